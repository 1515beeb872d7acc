"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonScalarOutput
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise ``|a - n| / max(|a|, |n|)``; zero when both are below ``floor``."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``backward()`` gradients of a scalar ``f(*inputs)`` against
    central differences.

    ``max_coords`` limits how many coordinates per input are perturbed (drawn
    without replacement from ``rng``); ``None`` checks every coordinate.
    Kinked functions must be sampled away from their kinks by the caller.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise NonScalarOutput(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = rng or np.random.default_rng(0)
    errors = []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2.0 * h)
        errors.append(relative_error(a.reshape(-1)[coords], numeric))
    return GradCheckReport(max(errors) if errors else 0.0, tol, errors)
