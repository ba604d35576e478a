"""Training objectives and evaluation metrics.

The segmentation objective is Dice plus logit-stable BCE. The auxiliary
multi-scale alignment term compares, at each supervised scale, the cosine
similarity between the per-pixel decoder feature and the paired global audio
state (both L2-normalized, similarity sharpened by a temperature and squashed
to a probability) against the binary sounding-foreground mask, with a
pixelwise BCE averaged over scales. The total is seg + lambda * alignment.

Metrics: per-frame Jaccard index (mIoU) and region F-beta with beta^2 = 0.3,
both averaged over frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ContractError, DimensionError, Tensor, add, bilinear_upsample, clamp, div,
    l2_normalize, mul, sigmoid, softplus, sub, tlog, tmean, tsum,
)

PROB_EPS = 1e-7
FSCORE_BETA_SQ = 0.3


@dataclass
class AlignmentMaps:
    """Audio-visual similarity scores per scale, raw and upsampled."""

    s: list      # Tensor[B,1,H_i,W_i], values in (0,1), deepest first
    s_up: list   # Tensor[B,1,H,W]


@dataclass
class LossReport:
    dice: float
    bce: float
    msa: float
    total: float
    per_scale_msa: list = field(default_factory=list)
    avm: float | None = None
    loss: Tensor | None = None   # differentiable total, excluded from logs

    def to_json_dict(self, step: int) -> dict:
        d = {"step": step, "dice": self.dice, "bce": self.bce,
             "msa": self.msa, "total": self.total}
        if self.avm is not None:
            d["avm"] = self.avm
        return d


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def foreground_mask(y: Tensor) -> Tensor:
    """Union over class planes: 1 wherever any class is active."""
    vals = y.data
    if not np.isin(vals, (0.0, 1.0)).all():
        raise ContractError("class masks must be strictly binary")
    if y.shape[1] == 1:
        return Tensor(vals.copy())
    return Tensor((vals.sum(axis=1, keepdims=True) > 0).astype(np.float64))


# ---------------------------------------------------------------------------
# Segmentation losses
# ---------------------------------------------------------------------------

def dice_loss(logits: Tensor, mask: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft Dice with +1 smoothing, computed per frame and averaged."""
    if logits.shape != mask.shape:
        raise DimensionError(f"dice shapes differ: {logits.shape} vs {mask.shape}")
    p = sigmoid(logits)
    inter = tsum(mul(p, mask), axis=(1, 2, 3))
    denom = add(tsum(p, axis=(1, 2, 3)), tsum(mask, axis=(1, 2, 3)))
    frac = div(add(mul(inter, 2.0), smooth), add(denom, smooth))
    return tmean(sub(1.0, frac))


def bce_loss(logits: Tensor, mask: Tensor) -> Tensor:
    """Mean logit-stable binary cross-entropy."""
    if logits.shape != mask.shape:
        raise DimensionError(f"bce shapes differ: {logits.shape} vs {mask.shape}")
    return tmean(sub(softplus(logits), mul(logits, mask)))


def bce_on_probs(probs: Tensor, mask: Tensor) -> Tensor:
    """BCE for inputs that are already probabilities; clamped to avoid log(0)."""
    p = clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    pos = mul(mask, tlog(p))
    neg = mul(sub(1.0, mask), tlog(sub(1.0, p)))
    return mul(tmean(add(pos, neg)), -1.0)


# ---------------------------------------------------------------------------
# Multi-scale alignment
# ---------------------------------------------------------------------------

def alignment_maps(features: list, audio: list, tau: float, out_h: int,
                   out_w: int, eps: float = 1e-6) -> AlignmentMaps:
    """Per-scale sharpened cosine-similarity maps between pixels and audio."""
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if len(features) != len(audio):
        raise ContractError(
            f"{len(features)} feature scales but {len(audio)} audio states")
    raw, up = [], []
    for f, a in zip(features, audio):
        a_val = a.value if hasattr(a, "value") else a
        if f.shape[1] != a_val.shape[1]:
            raise DimensionError(
                f"feature width {f.shape[1]} != audio width {a_val.shape[1]}")
        v_bar = l2_normalize(f, axis=1, eps=eps)
        a_bar = l2_normalize(a_val, axis=1, eps=eps)
        sim = tsum(mul(v_bar, a_bar), axis=1, keepdims=True)
        s = sigmoid(mul(sim, 1.0 / tau))
        raw.append(s)
        up.append(bilinear_upsample(s, out_h, out_w))
    return AlignmentMaps(s=raw, s_up=up)


def msa_loss(maps: AlignmentMaps, mask: Tensor):
    """Mean over scales of pixelwise BCE between upsampled scores and mask."""
    per_scale = [bce_on_probs(s, mask) for s in maps.s_up]
    total = per_scale[0]
    for t in per_scale[1:]:
        total = add(total, t)
    return mul(total, 1.0 / len(per_scale)), per_scale


def avm_loss(maps: AlignmentMaps, mask: Tensor, eps: float = 1e-8):
    """KL-style alternative: distribution over pixels of scores vs of mask.

    Both the upsampled score map and the foreground mask are normalized to a
    per-frame spatial distribution; the loss is KL(mask || scores) averaged
    over scales and frames. Kept as an optional plugin for loss ablations.
    """
    per_scale = []
    for s in maps.s_up:
        p_mask = div(add(mask, eps), tsum(add(mask, eps), axis=(1, 2, 3), keepdims=True))
        p_s = div(add(s, eps), tsum(add(s, eps), axis=(1, 2, 3), keepdims=True))
        kl = tsum(mul(p_mask, sub(tlog(p_mask), tlog(p_s))), axis=(1, 2, 3))
        per_scale.append(tmean(kl))
    total = per_scale[0]
    for t in per_scale[1:]:
        total = add(total, t)
    return mul(total, 1.0 / len(per_scale)), per_scale


def total_loss(logits: Tensor, features: list, audio: list, y: Tensor,
               lam: float = 0.5, tau: float = 0.1,
               variant: str = "seg+msa") -> LossReport:
    """Assemble the training objective and its per-component report."""
    if lam < 0:
        raise ContractError(f"balance weight must be >= 0, got {lam}")
    mask = foreground_mask(y)
    d = dice_loss(logits, mask)
    b = bce_loss(logits, mask)
    seg = add(d, b)

    maps = alignment_maps(features, audio, tau, logits.shape[2], logits.shape[3])
    m, per_scale = msa_loss(maps, mask)
    avm_val = None
    if variant == "seg+avm":
        a, _ = avm_loss(maps, mask)
        loss = add(seg, mul(a, lam))
        avm_val = a.item()
    elif variant == "seg":
        loss = add(seg, mul(m, 0.0))
    elif variant == "seg+msa":
        loss = add(seg, mul(m, lam))
    else:
        raise ContractError(f"unknown loss variant {variant!r}")
    return LossReport(
        dice=d.item(), bce=b.item(), msa=m.item(), total=loss.item(),
        per_scale_msa=[t.item() for t in per_scale], avm=avm_val, loss=loss)


# ---------------------------------------------------------------------------
# Metrics (plain numpy, no gradients)
# ---------------------------------------------------------------------------

def _as_mask_batch(m) -> np.ndarray:
    arr = m.data if isinstance(m, Tensor) else np.asarray(m)
    arr = arr.astype(bool)
    if arr.ndim == 2:
        arr = arr[None]
    return arr.reshape(arr.shape[0], -1) if arr.ndim == 3 else arr.reshape(
        arr.shape[0] * arr.shape[1], -1)


def miou(pred_mask, gt_mask) -> float:
    """Mean per-frame intersection-over-union; empty-union frames score 1."""
    p, g = _as_mask_batch(pred_mask), _as_mask_batch(gt_mask)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    scores = []
    for pf, gf in zip(p, g):
        union = np.logical_or(pf, gf).sum()
        if union == 0:
            scores.append(1.0)
        else:
            scores.append(np.logical_and(pf, gf).sum() / union)
    return float(np.mean(scores))


def fscore(pred_mask, gt_mask, beta_sq: float = FSCORE_BETA_SQ) -> float:
    """Mean per-frame region F-beta (beta^2 = 0.3 by convention)."""
    p, g = _as_mask_batch(pred_mask), _as_mask_batch(gt_mask)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    scores = []
    for pf, gf in zip(p, g):
        np_, ng = pf.sum(), gf.sum()
        if np_ == 0 and ng == 0:
            scores.append(1.0)
            continue
        tp = np.logical_and(pf, gf).sum()
        prec = tp / np_ if np_ > 0 else 0.0
        rec = tp / ng if ng > 0 else 0.0
        denom = beta_sq * prec + rec
        scores.append(0.0 if denom == 0 else (1 + beta_sq) * prec * rec / denom)
    return float(np.mean(scores))
