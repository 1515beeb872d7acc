"""Independent reference implementations shared by the test modules.

Everything here is written as plain loops or closed-form sums, without
calling into the code under test beyond reading parameter arrays.
"""

import math

import numpy as np

from vitbis.losses import PROB_CLAMP
from vitbis.model import split_sizes


def bce_ref(p, y):
    total = 0.0
    n = 0
    for pi, yi in zip(p.ravel(), y.ravel()):
        q = min(max(pi, PROB_CLAMP), 1.0 - PROB_CLAMP)
        total += yi * math.log(q) + (1.0 - yi) * math.log(1.0 - q)
        n += 1
    return -total / n


def dice_ref(p, y, eps=1e-4, factor=2.0):
    inter = sy = sp = 0.0
    for pi, yi in zip(p.ravel(), y.ravel()):
        inter += pi * yi
        sy += yi
        sp += pi
    return 1.0 - (factor * inter + eps) / (sy + sp + eps)


def voxelwise_ref(Y, G, alpha, beta, negate_ce=False):
    n_vox, n_cls = Y.shape
    dice = 0.0
    for j in range(n_cls):
        num = den = 0.0
        for i in range(n_vox):
            num += G[i, j] * Y[i, j]
            den += G[i, j] ** 2 + Y[i, j] ** 2
        dice += num / den
    ce = 0.0
    for i in range(n_vox):
        for j in range(n_cls):
            if G[i, j]:
                ce += G[i, j] * math.log(max(Y[i, j], PROB_CLAMP))
    ce *= beta / n_vox
    return 1.0 - alpha * 2.0 / n_cls * dice + (-ce if negate_ce else ce)


def dice_brute(pred, gt, c):
    inter = sp = sg = 0
    for a, b in zip(pred.ravel(), gt.ravel()):
        inter += (a == c) and (b == c)
        sp += a == c
        sg += b == c
    if sp + sg == 0:
        return 1.0
    return 2.0 * inter / (sp + sg)


def hd_brute(pred, gt, c, q=0.95, spacing=(1.0, 1.0)):
    """All-pairs directed distances, then the nearest-rank quantile."""
    P = [(i, j) for i in range(pred.shape[0]) for j in range(pred.shape[1]) if pred[i, j] == c]
    G = [(i, j) for i in range(gt.shape[0]) for j in range(gt.shape[1]) if gt[i, j] == c]
    if not P or not G:
        return math.nan

    def directed(A, B):
        out = []
        for a in A:
            best = math.inf
            for b in B:
                dr, dc = (a[0] - b[0]) * spacing[0], (a[1] - b[1]) * spacing[1]
                best = min(best, math.sqrt(dr * dr + dc * dc))
            out.append(best)
        out.sort()
        return out[max(math.ceil(q * len(out)), 1) - 1]

    return max(directed(P, G), directed(G, P))


def random_masks(seed, max_side=16, classes=3):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, max_side + 1, size=2)
    density = rng.uniform(0.05, 0.6)
    a = np.where(rng.random((h, w)) < density, rng.integers(1, classes, (h, w)), 0)
    b = np.where(rng.random((h, w)) < density, rng.integers(1, classes, (h, w)), 0)
    return a, b


def gsa_brute(feat, params, verbatim=False):
    """Double loop over (i, j) position pairs, one image at a time."""
    b, c, h, w = feat.shape
    n = h * w

    def conv1x1(conv, x):
        wt = conv.weight.data[:, :, 0, 0]
        return np.einsum("oc,cp->op", wt, x) + conv.bias.data[:, None]

    out = np.zeros((b, c, n))
    for bi in range(b):
        x = feat[bi].reshape(c, n)
        M, N, W = conv1x1(params.query, x), conv1x1(params.key, x), conv1x1(params.value, x)
        for j in range(n):
            logits = np.array([sum(M[r, i] * N[r, j] for r in range(M.shape[0])) for i in range(n)])
            e = np.exp(logits - logits.max())
            B = e / e.sum()
            for i in range(n):
                out[bi, :, j] += B[i] * (W[:, j] if verbatim else W[:, i])
    return out.reshape(b, c, h, w)


def closed_form_params(cfg):
    """Parameter count summed layer by layer from the configuration alone."""

    def conv(ci, co, k):
        return ci * co * k * k + co

    def msb(c):
        a, b, e = split_sizes(c)
        return conv(a, a, 1) + conv(b, b, 3) + conv(e, e, 5)

    d, k, p = cfg.embed_dim, cfg.reduced_channels, cfg.patch_size
    hid = cfg.mlp_hidden
    total = p * p * cfg.in_channels * d + cfg.num_tokens * d + msb(d)
    block = 4 * d + 4 * d * d + (2 * cfg.window - 1) ** 2 * cfg.num_heads + d * hid + hid + hid * d + d
    total += cfg.num_stacks * cfg.depth * block
    total += 2 * conv(d, max(d // 8, 1), 1) + conv(d, d, 1)
    total += conv(d, k, 1)
    c_in = k
    widths = [max(k >> (s + 1), 4) for s in range(3)]
    for s, w in enumerate(widths):
        skip = w + (cfg.in_channels if s == 2 else 0)
        total += conv(d, w, 1)
        if cfg.upsample_mode == "transposed_conv":
            total += c_in * c_in * 16 + c_in
        total += conv(c_in, w, 3) + conv(w + c_in + skip, w, 3)
        c_in = w
    return total + msb(c_in) + conv(c_in, cfg.num_classes, 1)
