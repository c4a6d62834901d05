"""Loss kernels: background regularization, crop-and-paste, weighted BCE.

Functions take the dataclass wrappers from `dataset`/`model` or equivalent
raw tensors; everything differentiable stays a torch scalar so gradients can
flow where the caller wants them. The realism weight is differentiable here
and deliberately detached by the trainer before it scales the loss.

Numeric conventions (the source material never pins these down): BCE
probabilities are clamped to [1e-7, 1 - 1e-7] before the logs; cosine
denominators carry a 1e-8 floor; a fully degenerate pair of zero-norm
vectors scores 0 with a logged warning.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from .dataset import Image, Mask
from .model import FeatureMap, PredictedMask

logger = logging.getLogger(__name__)

BCE_PROB_EPS = 1e-7
NORM_EPS = 1e-8

MASK_DOWNSAMPLE_MODES = ("area", "nearest")


class NumericalError(Exception):
    """A loss or metric became non-finite or otherwise unusable."""


ArrayLike = Union[np.ndarray, torch.Tensor]


def _mask_tensor(mask: Union[Mask, ArrayLike]) -> torch.Tensor:
    if isinstance(mask, Mask):
        return torch.from_numpy(mask.values.astype(np.float32))
    t = torch.as_tensor(mask, dtype=torch.float32)
    if t.ndim != 2:
        raise ValueError(f"mask must be (H, W), got {tuple(t.shape)}")
    if not torch.all((t == 0) | (t == 1)):
        raise ValueError("mask is not binary")
    return t


def _prob_tensor(pred: Union[PredictedMask, torch.Tensor]) -> torch.Tensor:
    if isinstance(pred, PredictedMask):
        return pred.probs
    if pred.ndim != 2:
        raise ValueError(f"predicted mask must be (H, W), got {tuple(pred.shape)}")
    return pred


def _vec(v: ArrayLike) -> torch.Tensor:
    t = torch.as_tensor(v, dtype=torch.float32) if not isinstance(v, torch.Tensor) else v
    if t.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValueError("vector has non-finite entries")
    return t


def downsample_mask(
    mask: Union[Mask, ArrayLike], out_h: int, out_w: int, mode: str = "area"
) -> torch.Tensor:
    """Shrink a binary mask to feature resolution.

    "area" keeps the exact fractional coverage of each cell (so a thin
    scratch at stride 32 survives as a small weight instead of vanishing,
    and complementary masks still sum to one cell-for-cell); "nearest"
    samples the top-left pixel of each cell and stays binary.
    """
    m = _mask_tensor(mask)
    h, w = m.shape
    if out_h <= 0 or out_w <= 0 or h % out_h or w % out_w:
        raise ValueError(
            f"mask {h}x{w} is not an integer multiple of feature grid {out_h}x{out_w}"
        )
    sy, sx = h // out_h, w // out_w
    if mode == "area":
        return m.reshape(out_h, sy, out_w, sx).mean(dim=(1, 3))
    if mode == "nearest":
        return m[::sy, ::sx].clone()
    raise ValueError(f"mode must be one of {MASK_DOWNSAMPLE_MODES}, got {mode!r}")


def background_crop(
    feature: FeatureMap, mask: Union[Mask, ArrayLike], mode: str = "area"
) -> FeatureMap:
    """Suppress defect cells: feature ⊙ (1 − downsampled mask).

    The mask lives at input resolution; each feature cell is weighted by the
    fraction of its receptive cell that is background, broadcast over
    channels.
    """
    c, fh, fw = feature.values.shape
    m = _mask_tensor(mask)
    if m.shape != (fh * feature.stride, fw * feature.stride):
        raise ValueError(
            f"mask {tuple(m.shape)} does not match feature {fh}x{fw} at "
            f"stride {feature.stride}"
        )
    small = downsample_mask(m, fh, fw, mode=mode)
    return FeatureMap(values=feature.values * (1.0 - small), stride=feature.stride)


def gap(feature: Union[FeatureMap, torch.Tensor]) -> torch.Tensor:
    """Global average pooling: per-channel mean over spatial positions."""
    values = feature.values if isinstance(feature, FeatureMap) else feature
    if values.ndim < 3:
        raise ValueError(f"need (..., C, h, w), got shape {tuple(values.shape)}")
    if values.shape[-1] == 0 or values.shape[-2] == 0:
        raise ValueError("empty spatial extent")
    return values.mean(dim=(-2, -1))


def nbr_loss(background_vec: ArrayLike, normal_vec: ArrayLike,
             eps: float = NORM_EPS) -> torch.Tensor:
    """Negative cosine similarity between the pooled background of a defect
    image and a pooled normal image; minimizing it pulls the two together.
    No absolute value here: anti-aligned vectors score +1, not -1."""
    b = _vec(background_vec)
    f = _vec(normal_vec)
    if b.shape != f.shape:
        raise ValueError(f"vector shapes differ: {tuple(b.shape)} vs {tuple(f.shape)}")
    nb = torch.linalg.vector_norm(b)
    nf = torch.linalg.vector_norm(f)
    if float(nb.detach()) < eps and float(nf.detach()) < eps:
        logger.warning("both pooled vectors are ~zero (all-defect image?); scoring 0")
        return torch.zeros((), dtype=b.dtype)
    return -(b @ f) / (nb * nf + eps)


def nbr_loss_euclidean(background_vec: ArrayLike, normal_vec: ArrayLike) -> torch.Tensor:
    """Distance-based variant: plain L2 between the pooled vectors."""
    b = _vec(background_vec)
    f = _vec(normal_vec)
    if b.shape != f.shape:
        raise ValueError(f"vector shapes differ: {tuple(b.shape)} vs {tuple(f.shape)}")
    return torch.linalg.vector_norm(b - f)


def cap_compose(defect_img: Image, defect_mask: Mask, normal_img: Image) -> Image:
    """Paste the masked defect region onto a normal image, same position:
    out = defect ⊙ mask + normal ⊙ (1 − mask). Exact on binary masks."""
    if defect_img.shape != defect_mask.shape or defect_img.shape != normal_img.shape:
        raise ValueError(
            f"shape mismatch: defect {defect_img.shape}, mask {defect_mask.shape}, "
            f"normal {normal_img.shape}"
        )
    m = defect_mask.values.astype(np.float32)[..., None]
    out = defect_img.pixels * m + normal_img.pixels * (1.0 - m)
    return Image(pixels=out)


def realism_weight(
    defect_features: FeatureMap, composite_features: FeatureMap,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    """Absolute cosine similarity of the pooled features of the original
    defect image and its pasted composite; 1 means the paste looks native
    to the background, 0 means alien. Differentiable; callers that use it
    as a loss weight must detach."""
    if defect_features.values.shape != composite_features.values.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(defect_features.values.shape)} vs "
            f"{tuple(composite_features.values.shape)}"
        )
    g1 = gap(defect_features)
    g2 = gap(composite_features)
    n1 = torch.linalg.vector_norm(g1)
    n2 = torch.linalg.vector_norm(g2)
    if float(n1.detach()) < eps and float(n2.detach()) < eps:
        logger.warning("both pooled feature vectors are ~zero; realism weight 0")
        return torch.zeros((), dtype=g1.dtype)
    # rounding can push |dot| a hair past the product of norms when the two
    # vectors coincide; the clamp keeps the weight a valid probability-like
    # coefficient without touching gradients elsewhere
    return torch.clamp(torch.abs(g1 @ g2) / (n1 * n2 + eps), 0.0, 1.0)


def weighted_bce(
    target: Union[Mask, ArrayLike],
    pred: Union[PredictedMask, torch.Tensor],
    weight: float,
    reduction: str = "mean",
) -> torch.Tensor:
    """Binary cross-entropy over pixels scaled by a constant weight.

    weight=1 reproduces the unweighted loss bit for bit (multiplication by
    1.0 is exact), which the training-loop equivalence tests rely on.
    """
    w = float(weight)
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"weight must lie in [0, 1], got {w}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    t = _mask_tensor(target)
    p = _prob_tensor(pred)
    if t.shape != p.shape:
        raise ValueError(f"target {tuple(t.shape)} vs prediction {tuple(p.shape)}")
    p = torch.clamp(p, BCE_PROB_EPS, 1.0 - BCE_PROB_EPS)
    pixelwise = -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))
    reduced = pixelwise.sum() if reduction == "sum" else pixelwise.mean()
    return w * reduced


def plain_bce(
    target: Union[Mask, ArrayLike],
    pred: Union[PredictedMask, torch.Tensor],
    reduction: str = "mean",
) -> torch.Tensor:
    """Unweighted binary cross-entropy; the weight-1 special case."""
    return weighted_bce(target, pred, 1.0, reduction=reduction)


@dataclass(frozen=True)
class LossBundle:
    """One optimization step's loss pieces; total is always nbr + seg.

    For a single pair under the cosine metric nbr lies in [-1, 1]; minibatch
    records sum m pairs so the range scales with m, and the euclidean metric
    is unbounded, so no range check is enforced here.
    """

    nbr: float
    seg: float
    total: float
    lambda_used: Optional[float] = None
    branch: str = "PLAIN"

    def __post_init__(self):
        if self.branch not in ("CAP", "PLAIN"):
            raise ValueError(f"branch must be CAP or PLAIN, got {self.branch!r}")
        for name in ("nbr", "seg", "total"):
            if not math.isfinite(getattr(self, name)):
                raise NumericalError(f"non-finite {name} in loss bundle")
        if self.seg < 0.0:
            raise ValueError(f"segmentation loss must be >= 0, got {self.seg}")
        if self.lambda_used is not None and not 0.0 <= self.lambda_used <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lambda_used}")


def combine(
    nbr: Union[float, torch.Tensor],
    seg: Union[float, torch.Tensor],
    lambda_used: Optional[float] = None,
    branch: str = "PLAIN",
) -> LossBundle:
    """Sum the regularizer and segmentation terms with no extra coefficient."""
    n = float(nbr)
    s = float(seg)
    if not (math.isfinite(n) and math.isfinite(s)):
        raise NumericalError(f"non-finite loss inputs: nbr={n}, seg={s}")
    return LossBundle(nbr=n, seg=s, total=n + s, lambda_used=lambda_used, branch=branch)
