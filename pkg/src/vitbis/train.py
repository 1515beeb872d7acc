"""Training loop, checkpoints, run manifests and the ablation harness."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod
from . import vtb
from .config import ModelConfig
from .data import AugmentConfig, apply_augment, draw_augment_params
from .errors import ConfigMismatch, CorruptFile, NonFiniteLoss
from .losses import LossConfig, segmentation_loss
from .metrics import MetricReport, evaluate
from .model import VitbisModel, forward
from .optim import AdamState, OptimConfig, adam_step
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    checkpoint_every: int = 0
    augment: bool = False
    crop_size: int | None = None
    flip_prob: float = 0.5
    eval_batch: int = 16
    loss: LossConfig = field(default_factory=LossConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigMismatch(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "loss" in d:
            extra = set(d["loss"]) - {f.name for f in dataclasses.fields(LossConfig)}
            if extra:
                raise ConfigMismatch(f"unknown loss config keys: {sorted(extra)}")
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


@dataclass
class RunManifest:
    config: dict
    loss_trace: list[float] = field(default_factory=list)
    metrics: dict[str, dict] = field(default_factory=dict)
    checkpoints: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def loss_csv(self, start_step: int = 1) -> str:
        lines = ["step,loss"]
        lines += [f"{start_step + i},{v:.9f}" for i, v in enumerate(self.loss_trace)]
        return "\n".join(lines) + "\n"


def report_to_dict(r: MetricReport) -> dict:
    return {
        "class_names": r.class_names,
        "per_class_dice": r.per_class_dice,
        "per_class_hd95": [None if math.isnan(v) else v for v in r.per_class_hd95],
        "mean_dice": r.mean_dice,
        "mean_hd95": None if math.isnan(r.mean_hd95) else r.mean_hd95,
        "undefined_hd95": r.undefined_hd95,
    }


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: VitbisModel, state: AdamState, optim_cfg: OptimConfig, step: int) -> str:
    """Write model + optimizer state; returns the SHA-256 of the file."""
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    for k in sorted(state.m):
        tensors[f"adam_m/{k}"] = state.m[k]
        tensors[f"adam_v/{k}"] = state.v[k]
    meta = {
        "kind": "checkpoint",
        "config_version": CONFIG_VERSION,
        "model": model.cfg.to_dict(),
        "optim": optim_cfg.to_dict(),
        "step": step,
        "adam_t": state.t,
    }
    data = vtb.write_vtb(path, tensors, meta)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, expected_sha256: str | None = None):
    """Return ``(model, adam_state, optim_cfg, step)``."""
    raw = Path(path).read_bytes()
    if expected_sha256 is not None and hashlib.sha256(raw).hexdigest() != expected_sha256:
        raise CorruptFile(f"{path}: checkpoint hash does not match the manifest")
    tensors, meta = vtb.decode(raw)
    if meta.get("kind") != "checkpoint":
        raise CorruptFile(f"{path} is not a checkpoint")
    cfg = ModelConfig.from_dict(meta["model"])
    model = VitbisModel(cfg)
    model.load_state_dict({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    state = AdamState(t=int(meta["adam_t"]))
    for k, v in tensors.items():
        if k.startswith("adam_m/"):
            state.m[k[len("adam_m/"):]] = v
        elif k.startswith("adam_v/"):
            state.v[k[len("adam_v/"):]] = v
    return model, state, OptimConfig.from_dict(meta["optim"]), int(meta["step"])


# ----------------------------------------------------------------- training


def _batch(step: int, images, masks, optim_cfg: OptimConfig, train_cfg: TrainConfig, size: int):
    n = len(images)
    order = rngmod.stream(optim_cfg.seed, "order", step)
    # sorted, so a full-dataset batch is the same array every step
    idx = np.sort(order.permutation(n)[: min(optim_cfg.batch_size, n)])
    xb, yb = images[idx], masks[idx]
    if train_cfg.augment:
        acfg = AugmentConfig(crop_size=train_cfg.crop_size or size, flip_prob=train_cfg.flip_prob)
        xs, ys = [], []
        for k in range(len(idx)):
            params = draw_augment_params(yb[k].shape, acfg, rngmod.stream(optim_cfg.seed, "augment", step, k))
            x, y = apply_augment(xb[k], yb[k], params)
            xs.append(x)
            ys.append(y)
        xb, yb = np.stack(xs), np.stack(ys)
    return xb, yb


def predict_labels(model: VitbisModel, images: np.ndarray, batch: int = 16) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, len(images), batch):
            logits = forward(model, Tensor(images[i : i + batch]))
            outs.append(np.argmax(logits.data, axis=1).astype(np.uint8))
    return np.concatenate(outs)


def evaluate_model(model: VitbisModel, images, masks, batch: int = 16) -> MetricReport:
    return evaluate(predict_labels(model, images, batch), masks, model.cfg.num_classes)


def train(
    model_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    data: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray] | None = None,
    train_cfg: TrainConfig = TrainConfig(),
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    return_model: bool = False,
):
    """Optimize a fresh (or resumed) model on ``data`` for ``max_steps`` steps.

    Batches and augmentations of step ``t`` depend only on ``(seed, t)``,
    so a resumed run continues exactly where an uninterrupted one would be.
    """
    images, masks = data
    if images.shape[2:] != (model_cfg.height, model_cfg.width) and not train_cfg.augment:
        raise ConfigMismatch(f"images {images.shape[2:]} do not match model input {(model_cfg.height, model_cfg.width)}")
    if resume is not None:
        model, state, _, start = load_checkpoint(resume)
        if model.cfg != model_cfg:
            raise ConfigMismatch("checkpoint model config differs from the requested one")
    else:
        model, state, start = VitbisModel(model_cfg, seed=optim_cfg.seed), AdamState(), 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    manifest = RunManifest(
        config={
            "version": CONFIG_VERSION,
            "model": model_cfg.to_dict(),
            "optim": optim_cfg.to_dict(),
            "train": train_cfg.to_dict(),
        },
        notes={"start_step": start + 1},
    )
    params = dict(model.named_parameters())
    for step in range(start + 1, optim_cfg.max_steps + 1):
        xb, yb = _batch(step, images, masks, optim_cfg, train_cfg, model_cfg.height)
        model.zero_grad()
        logits = forward(model, Tensor(xb))
        if not np.all(np.isfinite(logits.data)):
            raise NonFiniteLoss(f"non-finite logits at step {step}")
        loss = segmentation_loss(logits, yb, train_cfg.loss)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss became {value} at step {step}")
        loss.backward()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        adam_step(params, grads, state, optim_cfg)
        manifest.loss_trace.append(value)
        log.debug("step %d loss %.9f", step, value)
        if out is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            path = out / f"ckpt_{step:06d}.vtb"
            digest = save_checkpoint(path, model, state, optim_cfg, step)
            manifest.checkpoints.append({"step": step, "path": path.name, "sha256": digest})

    manifest.metrics["train"] = report_to_dict(evaluate_model(model, images, masks, train_cfg.eval_batch))
    if val is not None:
        manifest.metrics["val"] = report_to_dict(evaluate_model(model, *val, train_cfg.eval_batch))
    if out is not None:
        path = out / "final.vtb"
        digest = save_checkpoint(path, model, state, optim_cfg, optim_cfg.max_steps)
        manifest.checkpoints.append({"step": optim_cfg.max_steps, "path": path.name, "sha256": digest})
        (out / "manifest.json").write_text(manifest.to_json())
        (out / "loss.csv").write_text(manifest.loss_csv(start + 1))
    return (manifest, model) if return_model else manifest


def verify_manifest(manifest: RunManifest, run_dir) -> None:
    """Re-hash every checkpoint named in the manifest."""
    for ck in manifest.checkpoints:
        load_checkpoint(Path(run_dir) / ck["path"], ck["sha256"])


# ----------------------------------------------------------------- ablation


@dataclass
class AblationTable:
    title: str
    columns: list[str]
    rows: list[list]
    header: list[str] = field(default_factory=list)

    def format(self) -> str:
        cells = [self.columns] + [[_cell(v) for v in r] for r in self.rows]
        widths = [max(len(str(r[i])) for r in cells) for i in range(len(self.columns))]
        lines = [self.title] + [f"# {h}" for h in self.header]
        for r in cells:
            lines.append("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        lines += [",".join(_cell(v) for v in r) for r in self.rows]
        return "\n".join(lines) + "\n"


def _cell(v) -> str:
    return f"{v:.2f}" if isinstance(v, float) else str(v)


def _dice_row(report: dict) -> list[float]:
    return [100.0 * report["mean_dice"]] + [100.0 * d for d in report["per_class_dice"]]


def ablate_upsampling(
    base_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    data,
    val=None,
    train_cfg: TrainConfig = TrainConfig(),
    out_dir=None,
) -> tuple[AblationTable, dict[str, RunManifest]]:
    """Twin runs differing only in the decoder upsampler."""
    runs = {}
    for tag, mode in (("BI", "bilinear"), ("TC", "transposed_conv")):
        sub = None if out_dir is None else Path(out_dir) / tag
        runs[tag] = train(base_cfg.replace(upsample_mode=mode), optim_cfg, data, val, train_cfg, sub)
    split = "val" if val is not None else "train"
    names = runs["BI"].metrics[split]["class_names"]
    rows = [[tag] + _dice_row(runs[tag].metrics[split]) for tag in ("BI", "TC")]
    observed = rows[1][1] > rows[0][1]
    header = [
        "full-scale reference: TC 78.53 > BI 77.24 mean Dice (%)",
        f"direction TC > BI at desk scale: {'observed' if observed else 'not observed'}",
        f"evaluated on {split} split; values are Dice %",
    ]
    return AblationTable("Upsampling ablation", ["Up-sampling", "DSC"] + names, rows, header), runs


def ablate_scale(
    base_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    data,
    val=None,
    depths: Sequence[int] = (1, 2, 4),
    dims: Sequence[int] = (48, 64),
    train_cfg: TrainConfig = TrainConfig(),
    out_dir=None,
) -> tuple[AblationTable, dict[tuple[int, int], RunManifest]]:
    """Grid over transformer depth and embedding dimension."""
    runs = {}
    rows = []
    split = "val" if val is not None else "train"
    for depth in depths:
        for dim in dims:
            sub = None if out_dir is None else Path(out_dir) / f"L{depth}_d{dim}"
            man = train(base_cfg.replace(depth=depth, embed_dim=dim), optim_cfg, data, val, train_cfg, sub)
            runs[(depth, dim)] = man
            rows.append([depth, dim] + _dice_row(man.metrics[split])[1:])
    names = next(iter(runs.values())).metrics[split]["class_names"]
    best = max(rows, key=lambda r: float(np.mean(r[2:])))
    observed = best[0] == max(depths) and best[1] == min(dims)
    header = [
        "full-scale reference: best cell L=4, d=384 (ET 72.06, WT 85.39, TC 73.67 Dice %)",
        f"best desk-scale cell: L={best[0]}, d={best[1]}; deepest/narrowest best: {'observed' if observed else 'not observed'}",
        f"evaluated on {split} split; values are Dice %",
    ]
    return AblationTable("Scale ablation", ["Depth (L)", "Embedding dim (d)"] + names, rows, header), runs
