"""Dataset handling: MVTec-layout loading, K-shot episodes, synthetic data.

Directory layout expected by :func:`load_mvtec_category` (8-bit PNG):

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect_type>/*.png
    <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png

Any nonzero mask byte counts as defective. All returned structures are
immutable after construction and safe to share read-only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage


class DatasetError(Exception):
    """Unusable input data (missing files, malformed trees, bad masks)."""


@dataclass(frozen=True)
class Image:
    """An RGB photograph with channel values in [0, 1], H and W >= 32."""

    pixels: np.ndarray  # (H, W, 3) float32
    source_path: Optional[str] = None

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {p.shape}")
        if p.shape[0] < 32 or p.shape[1] < 32:
            raise ValueError(f"image too small: {p.shape[:2]} (need >= 32)")
        if p.dtype != np.float32:
            object.__setattr__(self, "pixels", p.astype(np.float32))
            p = self.pixels
        lo, hi = float(p.min()), float(p.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: min={lo}, max={hi}")
        p.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class Mask:
    """A strictly binary H x W array; 1 = defective pixel."""

    values: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError(f"mask must be 2-d, got shape {v.shape}")
        if v.dtype != np.uint8:
            object.__setattr__(self, "values", v.astype(np.uint8))
            v = self.values
        bad = (v != 0) & (v != 1)
        if bad.any():
            raise ValueError("mask is not binary")
        v.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def positive_count(self) -> int:
        return int(self.values.sum())


@dataclass
class Episode:
    """One K-shot split: selected defect pairs, normal pool, held-out test pairs."""

    defect_pairs: list[tuple[Image, Mask]]
    normal_pool: list[Image]
    category_ids: list[int]
    seed: int
    test_pairs: list[tuple[Image, Mask]] = field(default_factory=list)
    test_category_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.normal_pool:
            raise ValueError("episode needs a nonempty normal pool")
        if len(self.category_ids) != len(self.defect_pairs):
            raise ValueError("one category id per defect pair required")
        for img, mask in self.defect_pairs:
            if mask.positive_count() == 0:
                raise ValueError("defect mask with no positive pixels in episode")
            if img.shape != mask.shape:
                raise ValueError("image/mask shape mismatch in episode")


TEXTURE_KINDS = ("stripes", "checker", "noise-blobs")
DEFECT_KINDS = ("scratch-line", "blob", "hole")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a small, fully seeded MVTec-layout dataset on disk.

    counts = (n_normal_train, n_defect_train, n_defect_test); defect images all
    land in test/<defect_kind> (K-shot selection happens at episode build time,
    the two counts just size the pool). n_normal_test sizes test/good.
    """

    texture_kind: str = "stripes"
    defect_kind: str = "blob"
    counts: tuple[int, int, int] = (24, 4, 8)
    resolution: int = 64
    seed: int = 0
    n_normal_test: int = 8

    def __post_init__(self):
        if self.texture_kind not in TEXTURE_KINDS:
            raise ValueError(f"texture_kind must be one of {TEXTURE_KINDS}")
        if self.defect_kind not in DEFECT_KINDS:
            raise ValueError(f"defect_kind must be one of {DEFECT_KINDS}")
        if len(self.counts) != 3 or any(c < 0 for c in self.counts):
            raise ValueError("counts must be three non-negative integers")
        if self.counts[0] <= 0:
            raise ValueError("need at least one normal training image")
        if self.resolution < 64:
            raise ValueError("resolution must be >= 64")

    @property
    def category(self) -> str:
        return self.texture_kind


# ---------------------------------------------------------------------------
# loading


def _read_image(path: Path) -> Image:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DatasetError(f"unreadable image {path}: {e}") from e
    return Image(pixels=arr, source_path=str(path))


def _read_mask(path: Path) -> Mask:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as e:
        raise DatasetError(f"unreadable mask {path}: {e}") from e
    return Mask(values=(arr > 0).astype(np.uint8))


def load_mvtec_category(
    root, category: str
) -> tuple[list[Image], list[tuple[Image, Mask]], list[Image]]:
    """Load one MVTec-layout category.

    Returns (normal_train, defect_test, normal_test). Every defect test image
    is paired with its groundtruth mask by filename stem; normal test images
    carry no mask (callers score them against all-zero masks). Missing masks
    and unreadable files are hard errors.
    """
    cat = Path(root) / category
    train_good = cat / "train" / "good"
    if not train_good.is_dir():
        raise DatasetError(f"missing directory {train_good}")
    normal_train = [_read_image(p) for p in sorted(train_good.glob("*.png"))]
    if not normal_train:
        raise DatasetError(f"no normal images in {train_good}")

    defect_test: list[tuple[Image, Mask]] = []
    normal_test: list[Image] = []
    test_dir = cat / "test"
    if test_dir.is_dir():
        for sub in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            if sub.name == "good":
                normal_test.extend(_read_image(p) for p in sorted(sub.glob("*.png")))
                continue
            gt_dir = cat / "ground_truth" / sub.name
            for img_path in sorted(sub.glob("*.png")):
                mask_path = gt_dir / f"{img_path.stem}_mask.png"
                if not mask_path.is_file():
                    raise DatasetError(
                        f"missing mask for defect image {img_path} "
                        f"(expected {mask_path})"
                    )
                img = _read_image(img_path)
                mask = _read_mask(mask_path)
                if mask.shape != img.shape:
                    raise DatasetError(
                        f"mask {mask_path} shape {mask.shape} does not match "
                        f"image {img_path} shape {img.shape}"
                    )
                defect_test.append((img, mask))
    return normal_train, defect_test, normal_test


def defect_type_of(img: Image) -> str:
    """Defect type from the image's on-disk location (test/<type>/...)."""
    if img.source_path is None:
        return "unknown"
    parts = Path(img.source_path).parts
    if "test" in parts:
        i = len(parts) - 1 - parts[::-1].index("test")
        if i + 1 < len(parts) - 1:
            return parts[i + 1]
    return "unknown"


# ---------------------------------------------------------------------------
# episodes


def build_episode(
    defect_pool: Sequence[tuple[Image, Mask]],
    normal_pool: Sequence[Image],
    k: int,
    seed: int,
    per_defect_type: bool = True,
) -> Episode:
    """Select K defect pairs deterministically; the rest become the test split.

    With per_defect_type=True (default) K pairs are drawn from each defect
    type, the types being read off the images' source paths; with False, K
    pairs are drawn from the pooled set regardless of type.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not normal_pool:
        raise DatasetError("empty normal pool")
    rng = np.random.default_rng(seed)

    types = [defect_type_of(img) for img, _ in defect_pool]
    unique_types = sorted(set(types))
    type_index = {t: i for i, t in enumerate(unique_types)}

    if per_defect_type:
        groups = {t: [i for i, ti in enumerate(types) if ti == t] for t in unique_types}
        selected: list[int] = []
        for t in unique_types:
            idxs = groups[t]
            if len(idxs) < k:
                raise DatasetError(
                    f"defect type '{t}' has {len(idxs)} pairs, need {k}"
                )
            pick = rng.choice(len(idxs), size=k, replace=False)
            selected.extend(idxs[int(j)] for j in pick)
    else:
        if len(defect_pool) < k:
            raise DatasetError(f"defect pool has {len(defect_pool)} pairs, need {k}")
        pick = rng.choice(len(defect_pool), size=k, replace=False)
        selected = [int(j) for j in pick]

    chosen = set(selected)
    rest = [i for i in range(len(defect_pool)) if i not in chosen]
    return Episode(
        defect_pairs=[defect_pool[i] for i in selected],
        normal_pool=list(normal_pool),
        category_ids=[type_index[types[i]] for i in selected],
        seed=seed,
        test_pairs=[defect_pool[i] for i in rest],
        test_category_ids=[type_index[types[i]] for i in rest],
    )


# ---------------------------------------------------------------------------
# resizing


def resize_pair(img: Image, mask: Mask, res: int) -> tuple[Image, Mask]:
    """Resize an image/mask pair: bilinear for pixels, nearest + re-binarize
    for the mask, so the mask stays strictly binary. Identity when already
    at the target resolution."""
    if res <= 0:
        raise ValueError("res must be positive")
    if img.shape != mask.shape:
        raise ValueError(f"image {img.shape} and mask {mask.shape} differ")
    if img.shape == (res, res):
        return img, mask
    px = torch.from_numpy(img.pixels.copy()).permute(2, 0, 1)[None]
    out = F.interpolate(px, size=(res, res), mode="bilinear", align_corners=False)
    new_pixels = out[0].permute(1, 2, 0).clamp_(0.0, 1.0).numpy()

    mv = torch.from_numpy(mask.values.astype(np.float32))[None, None]
    mout = F.interpolate(mv, size=(res, res), mode="nearest")
    new_mask = (mout[0, 0].numpy() > 0.5).astype(np.uint8)
    return (
        Image(pixels=new_pixels, source_path=img.source_path),
        Mask(values=new_mask),
    )


# ---------------------------------------------------------------------------
# synthetic generation


def _texture(kind: str, res: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / res
    if kind == "stripes":
        # wide per-image variation so one training image never covers the
        # background distribution: orientation, frequency, phase, tint
        angle = rng.uniform(-1.2, 1.2)
        freq = rng.uniform(3.0, 8.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        base = 0.52 + 0.30 * wave
        # independent per-channel tint: some draws are cool/bluish, whose dark
        # bands resemble the blob defect colour, so single-image training
        # leaves systematic background false positives
        tint = rng.uniform(0.55, 1.0, size=3)
    elif kind == "checker":
        cells = rng.integers(5, 9)
        ox, oy = rng.uniform(0, 1, size=2)
        board = ((np.floor((xx + ox) * cells) + np.floor((yy + oy) * cells)) % 2)
        base = 0.35 + 0.40 * board
        tint = np.array([0.85, 0.95, 1.0])
    elif kind == "noise-blobs":
        field = rng.normal(size=(res, res))
        k = max(3, res // 16)
        kernel = np.ones(k) / k
        for axis in (0, 1):
            field = np.apply_along_axis(
                lambda m: np.convolve(m, kernel, mode="same"), axis, field
            )
        lo, hi = field.min(), field.max()
        base = 0.35 + 0.40 * (field - lo) / (hi - lo + 1e-12)
        tint = np.array([0.88, 0.92, 0.85])
    else:
        raise ValueError(f"unknown texture kind {kind!r}")

    brightness = rng.uniform(0.78, 1.0)
    img = base[..., None] * tint[None, None, :] * brightness
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _paint_defect(
    img: np.ndarray, kind: str, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Paint one defect; returns (image, exact binary mask)."""
    res = img.shape[0]
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    area = res * res

    if kind == "blob":
        # ellipse sized so 1% <= area <= 25% even before clipping to the frame
        a = rng.uniform(0.10, 0.17) * res
        b = rng.uniform(0.10, 0.17) * res
        margin = max(a, b) + 1
        cx = rng.uniform(margin, res - margin)
        cy = rng.uniform(margin, res - margin)
        theta = rng.uniform(0, np.pi)
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if not 0.01 * area <= mask.sum() <= 0.25 * area:
            return _paint_defect(img, kind, rng)
    elif kind == "hole":
        r = rng.uniform(0.10, 0.22) * res
        cx = rng.uniform(r + 1, res - r - 1)
        cy = rng.uniform(r + 1, res - r - 1)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    elif kind == "scratch-line":
        width = rng.uniform(max(1.0, res / 40.0), res / 18.0)
        x0, y0 = rng.uniform(0.1, 0.9, size=2) * res
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(0.4, 0.8) * res
        x1 = np.clip(x0 + length * np.cos(angle), 1, res - 2)
        y1 = np.clip(y0 + length * np.sin(angle), 1, res - 2)
        px, py = xx - x0, yy - y0
        vx, vy = x1 - x0, y1 - y0
        t = np.clip((px * vx + py * vy) / (vx * vx + vy * vy + 1e-12), 0.0, 1.0)
        dist = np.hypot(px - t * vx, py - t * vy)
        mask = dist <= width / 2.0
        if mask.sum() < max(8, 0.002 * area):
            return _paint_defect(img, kind, rng)
    else:
        raise ValueError(f"unknown defect kind {kind!r}")

    # Each defect kind has a characteristic colour with only mild jitter:
    # defect appearance is consistent across images while the backgrounds
    # vary widely, so generalisation hinges on background robustness.
    base_color = {
        "blob": (0.10, 0.10, 0.38),
        "hole": (0.06, 0.05, 0.05),
        "scratch-line": (0.42, 0.10, 0.10),
    }[kind]
    color = np.clip(np.asarray(base_color) + rng.uniform(-0.03, 0.03, size=3), 0.0, 1.0)
    out = img.copy()
    noise = rng.normal(0.0, 0.02, size=(int(mask.sum()), 3))
    out[mask] = np.clip(color[None, :] + noise, 0.0, 1.0)
    return out, mask.astype(np.uint8)


def _save_png(arr: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.ndim == 2:
        PILImage.fromarray((arr * 255).astype(np.uint8), mode="L").save(path)
    else:
        PILImage.fromarray(
            (np.clip(arr, 0, 1) * 255.0 + 0.5).astype(np.uint8), mode="RGB"
        ).save(path)


def generate_synthetic(spec: SyntheticSpec, out_root) -> dict:
    """Write a deterministic MVTec-layout tree under out_root.

    Defects are procedurally painted regions whose masks are exact; the whole
    tree is a pure function of the spec (including its seed). Returns a
    summary with on-disk counts.
    """
    rng = np.random.default_rng(spec.seed)
    root = Path(out_root)
    cat = root / spec.category
    n_normal, n_def_train, n_def_test = spec.counts
    res = spec.resolution

    for i in range(n_normal):
        _save_png(_texture(spec.texture_kind, res, rng), cat / "train" / "good" / f"{i:03d}.png")
    for i in range(spec.n_normal_test):
        _save_png(_texture(spec.texture_kind, res, rng), cat / "test" / "good" / f"{i:03d}.png")

    n_defect = n_def_train + n_def_test
    for i in range(n_defect):
        base = _texture(spec.texture_kind, res, rng)
        img, mask = _paint_defect(base, spec.defect_kind, rng)
        _save_png(img, cat / "test" / spec.defect_kind / f"{i:03d}.png")
        _save_png(mask, cat / "ground_truth" / spec.defect_kind / f"{i:03d}_mask.png")

    return {
        "category": spec.category,
        "root": str(root),
        "n_normal_train": n_normal,
        "n_normal_test": spec.n_normal_test,
        "n_defect": n_defect,
        "resolution": res,
        "seed": spec.seed,
    }


def spec_from_dict(d: dict) -> SyntheticSpec:
    d = dict(d)
    if "counts" in d:
        d["counts"] = tuple(d["counts"])
    fields = {f.name for f in dataclasses.fields(SyntheticSpec)}
    unknown = set(d) - fields
    if unknown:
        raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
    return SyntheticSpec(**d)
