"""Training loop: nested defect/normal minibatch sampling, per-pair
background regularization, a stochastic paste-augmentation branch, and
Adam updates on the summed minibatch loss.

Determinism contract: all sampling and the branch coin come from one
numpy Generator seeded by the config; the random stream is consumed in a
fixed order (defect indices, normal indices, branch uniform) regardless of
which ablation is active, so runs that differ only in ablation flags see
identical data order. Torch is used deterministically (single thread, no
torch-side RNG inside the loop).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import losses
from .dataset import Episode, Image, Mask, resize_pair
from .losses import NumericalError
from .metrics import ImageEval, anomaly_score, binarize, dice, iou, mean_iou
from .model import FeatureMap, SegmentationModel, image_to_tensor, save_checkpoint

logger = logging.getLogger(__name__)

ABLATIONS = ("B", "B_NBR", "B_NBR_CAP")
LAMBDA_MODES = ("computed", "fixed_one")
NBR_METRICS = ("cosine", "euclidean")


@dataclass(frozen=True)
class TrainConfig:
    k_shot: int = 1
    batch_size: int = 0  # 0 = auto: 2 in the 1-shot setting, 4 otherwise
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    iterations: int = 1350
    cap_probability: float = 0.5
    seed: int = 0
    ablation: str = "B_NBR_CAP"
    lambda_mode: str = "computed"
    nbr_metric: str = "cosine"
    bce_reduction: str = "mean"
    # The strong-baseline convention: B and B_NBR still see the paste
    # augmentation (unweighted) at cap_probability. Set False to make the
    # ablation steps purely incremental (no pasting outside B_NBR_CAP).
    baseline_cap_augment: bool = True
    mask_downsample: str = "area"
    inner_per_outer: int = 1
    eval_every: int = 0  # 0 = single final snapshot
    checkpoint_every: int = 0  # 0 = no periodic checkpoints
    threshold: float = 0.5

    def __post_init__(self):
        if self.k_shot < 1:
            raise ValueError("k_shot must be >= 1")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0 (0 = auto)")
        if not 0.0 <= self.cap_probability <= 1.0:
            raise ValueError("cap_probability must lie in [0, 1]")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ValueError(f"lambda_mode must be one of {LAMBDA_MODES}")
        if self.nbr_metric not in NBR_METRICS:
            raise ValueError(f"nbr_metric must be one of {NBR_METRICS}")
        if self.bce_reduction not in ("sum", "mean"):
            raise ValueError("bce_reduction must be 'sum' or 'mean'")
        if self.mask_downsample not in losses.MASK_DOWNSAMPLE_MODES:
            raise ValueError(f"mask_downsample must be one of {losses.MASK_DOWNSAMPLE_MODES}")
        if self.iterations < 1 or self.inner_per_outer < 1:
            raise ValueError("iterations and inner_per_outer must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size > 0:
            return self.batch_size
        return 2 if self.k_shot == 1 else 4

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    branch: str  # CAP or PLAIN
    nbr: float
    seg: float
    total: float
    lambdas: Optional[tuple[float, ...]]
    defect_indices: tuple[int, ...]
    normal_indices: tuple[int, ...]


@dataclass(frozen=True)
class EvalSnapshot:
    iteration: int
    mean_iou: float


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)
    snapshots: list[EvalSnapshot] = field(default_factory=list)

    def loss_trace(self) -> list[float]:
        return [r.total for r in self.records]

    def cap_fraction(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.branch == "CAP" for r in self.records) / len(self.records)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                d = {"type": "record", **dataclasses.asdict(r)}
                if d["lambdas"] is not None:
                    d["lambdas"] = list(d["lambdas"])
                d["defect_indices"] = list(d["defect_indices"])
                d["normal_indices"] = list(d["normal_indices"])
                fh.write(json.dumps(d, sort_keys=True) + "\n")
            for s in self.snapshots:
                fh.write(json.dumps({"type": "eval", **dataclasses.asdict(s)},
                                    sort_keys=True) + "\n")


def sample_minibatch(pool: Sequence, m: int, rng: np.random.Generator) -> list:
    """Draw m items; without replacement when the pool is large enough,
    with replacement otherwise (a 1-shot pool of one pair must still fill
    a batch of two)."""
    if len(pool) == 0:
        raise ValueError("cannot sample from an empty pool")
    if m < 1:
        raise ValueError("m must be >= 1")
    idx = rng.choice(len(pool), size=m, replace=len(pool) < m)
    return [pool[int(i)] for i in idx]


def evaluate_during_training(
    model: SegmentationModel,
    test_split: Sequence[tuple[Image, Mask]],
    every_n: int,
    *,
    iteration: int = 0,
    total_iterations: int = 0,
    log: Optional[TrainLog] = None,
    threshold: float = 0.5,
) -> Optional[EvalSnapshot]:
    """Append a mean-IOU snapshot over the held-out defect split when due.

    Due at multiples of every_n and always at the final iteration, so an
    every_n beyond the horizon still yields exactly one closing snapshot.
    Runs in eval mode without gradients and never mutates parameters.
    """
    if every_n < 1:
        raise ValueError("every_n must be >= 1")
    due = (iteration % every_n == 0) or (iteration == total_iterations)
    if not due:
        return None
    res = model.config.input_resolution
    was_training = model.net.training
    model.eval()
    ious = []
    with torch.no_grad():
        for img, mask in test_split:
            img_r, mask_r = resize_pair(img, mask, res)
            x = image_to_tensor(img_r)[None]
            probs = model.net(x)[0][0, 0]
            ious.append(iou(binarize(probs.numpy(), threshold), mask_r))
    if was_training:
        model.net.train()
    snap = EvalSnapshot(iteration=iteration, mean_iou=mean_iou(ious) if ious else float("nan"))
    if log is not None:
        log.snapshots.append(snap)
    return snap


def evaluate_model(
    model: SegmentationModel,
    defect_pairs: Sequence[tuple[Image, Mask]],
    normal_images: Sequence[Image] = (),
    threshold: float = 0.5,
    category: str = "synthetic",
) -> list[ImageEval]:
    """Score every test image: overlap metrics for defect images, empty
    groundtruth for normal ones (they only matter at image level)."""
    res = model.config.input_resolution
    was_training = model.net.training
    model.eval()
    evals: list[ImageEval] = []
    with torch.no_grad():
        for img, mask in defect_pairs:
            img_r, mask_r = resize_pair(img, mask, res)
            x = image_to_tensor(img_r)[None]
            pred = binarize(model.net(x)[0][0, 0].numpy(), threshold)
            evals.append(ImageEval(
                category=category,
                iou=iou(pred, mask_r),
                dice=dice(pred, mask_r),
                anomaly_score=anomaly_score(pred),
                is_defect=True,
            ))
        empty = None
        for img in normal_images:
            img_r, _ = resize_pair(img, Mask(np.zeros(img.shape, dtype=np.uint8)), res)
            if empty is None:
                empty = Mask(np.zeros((res, res), dtype=np.uint8))
            x = image_to_tensor(img_r)[None]
            pred = binarize(model.net(x)[0][0, 0].numpy(), threshold)
            evals.append(ImageEval(
                category=category,
                iou=iou(pred, empty),
                dice=dice(pred, empty),
                anomaly_score=anomaly_score(pred),
                is_defect=False,
            ))
    if was_training:
        model.net.train()
    return evals




def train(
    episode: Episode,
    model: SegmentationModel,
    cfg: TrainConfig,
    checkpoint_dir=None,
) -> tuple[SegmentationModel, TrainLog]:
    """Run the full nested-loop optimization on one episode.

    Each outer step samples a defect minibatch; each inner step samples a
    normal minibatch, draws the branch coin, computes the per-pair losses
    (regularizer plus either pasted-composite weighted BCE or plain BCE on
    the originals, both summed over the batch), and takes one Adam step.
    """
    torch.set_num_threads(1)
    rng = np.random.default_rng(cfg.seed)
    m = cfg.effective_batch_size
    res = model.config.input_resolution
    reduction = cfg.bce_reduction
    use_nbr = cfg.ablation in ("B_NBR", "B_NBR_CAP")
    cap_allowed = cfg.ablation == "B_NBR_CAP" or cfg.baseline_cap_augment
    weight_cap = cfg.ablation == "B_NBR_CAP" and cfg.lambda_mode == "computed"

    d_pairs = [resize_pair(img, mask, res) for img, mask in episode.defect_pairs]
    normals = [resize_pair(img, Mask(np.zeros(img.shape, np.uint8)), res)[0]
               for img in episode.normal_pool]
    d_tensors = [image_to_tensor(img) for img, _ in d_pairs]
    n_tensors = [image_to_tensor(img) for img in normals]
    mask_tensors = [torch.from_numpy(mask.values.astype(np.float32)) for _, mask in d_pairs]

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                           betas=(cfg.adam_beta1, cfg.adam_beta2))
    model.net.train()
    log = TrainLog()
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    t = 0
    n_outer = math.ceil(cfg.iterations / cfg.inner_per_outer)
    for _ in range(n_outer):
        d_idx = sample_minibatch(list(range(len(d_pairs))), m, rng)
        for _ in range(cfg.inner_per_outer):
            if t >= cfg.iterations:
                break
            t += 1
            # normal indices and the branch coin are always drawn so every
            # ablation consumes the random stream identically
            n_idx = sample_minibatch(list(range(len(normals))), m, rng)
            u = float(rng.uniform())
            use_cap = cap_allowed and u > (1.0 - cfg.cap_probability)

            d_batch = torch.stack([d_tensors[i] for i in d_idx])
            masks = [mask_tensors[i] for i in d_idx]

            bott_d = None
            probs_d = None
            if not use_cap:
                probs_d, bott_d = model.net(d_batch)
            elif use_nbr or weight_cap:
                bott_d, _ = model.net.encode(d_batch)

            bott_n = None
            if use_nbr:
                bott_n, _ = model.net.encode(torch.stack([n_tensors[i] for i in n_idx]))

            nbr_total = torch.zeros(())
            if use_nbr:
                for i in range(m):
                    fmap = FeatureMap(values=bott_d[i], stride=32)
                    bg = losses.background_crop(fmap, masks[i], mode=cfg.mask_downsample)
                    b_vec = losses.gap(bg)
                    f_vec = losses.gap(bott_n[i])
                    if cfg.nbr_metric == "cosine":
                        nbr_total = nbr_total + losses.nbr_loss(b_vec, f_vec)
                    else:
                        nbr_total = nbr_total + losses.nbr_loss_euclidean(b_vec, f_vec)

            lambdas: Optional[list[float]] = None
            if use_cap:
                composites = [
                    losses.cap_compose(d_pairs[di][0], d_pairs[di][1], normals[ni])
                    for di, ni in zip(d_idx, n_idx)
                ]
                cap_batch = torch.stack([image_to_tensor(c) for c in composites])
                probs_c, bott_c = model.net(cap_batch)
                lambdas = []
                seg_total = torch.zeros(())
                for i in range(m):
                    if weight_cap:
                        # the realism weight scales the loss as a constant:
                        # no gradient may flow back through it
                        lam = float(losses.realism_weight(
                            FeatureMap(values=bott_d[i], stride=32),
                            FeatureMap(values=bott_c[i], stride=32),
                        ).detach())
                    else:
                        lam = 1.0
                    lambdas.append(lam)
                    seg_total = seg_total + losses.weighted_bce(
                        masks[i], probs_c[i, 0], lam, reduction=reduction
                    )
            else:
                seg_total = torch.zeros(())
                for i in range(m):
                    seg_total = seg_total + losses.plain_bce(
                        masks[i], probs_d[i, 0], reduction=reduction
                    )

            total = nbr_total + seg_total
            if not torch.isfinite(total):
                diag = {
                    "iteration": t,
                    "branch": "CAP" if use_cap else "PLAIN",
                    "nbr": float(nbr_total.detach()),
                    "seg": float(seg_total.detach()),
                    "lambdas": lambdas,
                    "defect_indices": d_idx,
                    "normal_indices": n_idx,
                }
                err = NumericalError(f"non-finite loss at iteration {t}: {diag}")
                err.diagnostics = diag
                raise err

            opt.zero_grad()
            total.backward()
            opt.step()

            bundle = losses.combine(
                float(nbr_total.detach()),
                float(seg_total.detach()),
                lambda_used=float(np.mean(lambdas)) if lambdas else None,
                branch="CAP" if use_cap else "PLAIN",
            )
            log.records.append(TrainRecord(
                iteration=t,
                branch=bundle.branch,
                nbr=bundle.nbr,
                seg=bundle.seg,
                total=bundle.total,
                lambdas=tuple(lambdas) if lambdas else None,
                defect_indices=tuple(d_idx),
                normal_indices=tuple(n_idx),
            ))

            if episode.test_pairs:
                every = cfg.eval_every if cfg.eval_every >= 1 else cfg.iterations
                evaluate_during_training(
                    model, episode.test_pairs, every,
                    iteration=t, total_iterations=cfg.iterations,
                    log=log, threshold=cfg.threshold,
                )
            if (checkpoint_dir is not None and cfg.checkpoint_every > 0
                    and t % cfg.checkpoint_every == 0):
                save_checkpoint(model, checkpoint_dir / f"ckpt_{t:06d}.pt", cfg.seed)

    return model, log
