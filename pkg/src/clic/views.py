"""Positive-view generation and small-scale crop-and-merge.

Three augmentation tiers:

``oc``  crop only.
``fa``  crop, horizontal flip (p=0.5), brightness jitter (factor in [0.8, 1.2]).
``ma``  ``fa`` plus contrast jitter (factor in [0.8, 1.2]) and a 3x3 Gaussian blur (p=0.5).

Everything is deterministic given the seed.  Randomness is drawn in a
fixed order (crop offset, flip, brightness, contrast, blur) so that the
lighter tiers are prefixes of the heavier ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .config import TrainConfig
from .errors import ParameterError, SizeError
from .imageio import check_image
from .metrics import global_entropy

STRATEGIES = ("oc", "fa", "ma")
_BLUR = np.array([0.25, 0.5, 0.25])


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of nonnegative integers."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centers; uint8 in, uint8 out."""
    arr = check_image(img)
    h, w = arr.shape[:2]
    oh, ow = size
    if (oh, ow) == (h, w):
        return arr.copy()
    src = arr.astype(np.float64)

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(oh, h)
    x0, x1, fx = coords(ow, w)
    if src.ndim == 3:
        fy = fy[:, None, None]
        fxb = fx[None, :, None]
    else:
        fy = fy[:, None]
        fxb = fx[None, :]
    top = src[y0][:, x0] * (1 - fxb) + src[y0][:, x1] * fxb
    bot = src[y1][:, x0] * (1 - fxb) + src[y1][:, x1] * fxb
    out = top * (1 - fy) + bot * fy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class CropSpec:
    strategy: str
    side: int
    seed: int

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown crop strategy {self.strategy!r}")
        if self.side < 1:
            raise ParameterError("crop side must be positive")


def _blur(arr: np.ndarray) -> np.ndarray:
    axes = (0, 1)
    out = arr
    for ax in axes:
        out = ndimage.correlate1d(out, _BLUR, axis=ax, mode="nearest")
    return out


def make_view(img: np.ndarray, spec: CropSpec, force_flip: bool | None = None) -> np.ndarray:
    """Random square crop of ``spec.side`` followed by the tier's augmentations."""
    arr = check_image(img)
    h, w = arr.shape[:2]
    if spec.side > min(h, w):
        raise SizeError(f"crop side {spec.side} exceeds image size {w}x{h}")
    rng = np.random.default_rng(spec.seed)
    y = int(rng.integers(0, h - spec.side + 1))
    x = int(rng.integers(0, w - spec.side + 1))
    crop = arr[y:y + spec.side, x:x + spec.side]
    if spec.strategy == "oc":
        return crop.copy()

    flip = rng.random() < 0.5
    if force_flip is not None:
        flip = force_flip
    brightness = rng.uniform(0.8, 1.2)
    out = crop.astype(np.float64)
    if flip:
        out = out[:, ::-1]
    out = out * brightness
    if spec.strategy == "ma":
        contrast = rng.uniform(0.8, 1.2)
        blur = rng.random() < 0.5
        mean = out.mean()
        out = mean + (out - mean) * contrast
        if blur:
            out = _blur(out)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class ViewPair:
    query_view: np.ndarray
    key_view: np.ndarray
    source_ge: float


def crop_side(img_side: int, fraction: float) -> int:
    return max(1, int(round(fraction * img_side)))


def make_pair(img: np.ndarray, cfg: TrainConfig, seed: int, source_ge: float | None = None) -> ViewPair:
    """Query view (``cfg.query_aug``) and key view (``cfg.key_aug``), cropped at
    ``cfg.crop_fraction`` of the short side and resized to ``cfg.resolution``.

    ``cfg.key_crop_fraction`` gives the key view its own crop size when nonzero.
    """
    arr = check_image(img)
    short = min(arr.shape[:2])
    side = crop_side(short, cfg.crop_fraction)
    key_side = crop_side(short, cfg.key_crop_fraction) if cfg.key_crop_fraction else side
    res = (cfg.resolution, cfg.resolution)
    q = make_view(arr, CropSpec(cfg.query_aug, side, derive_seed(seed, 0)))
    k = make_view(arr, CropSpec(cfg.key_aug, key_side, derive_seed(seed, 1)))
    ge = global_entropy(arr) if source_ge is None else float(source_ge)
    return ViewPair(resize_bilinear(q, res), resize_bilinear(k, res), ge)


def merged_count(c: int) -> int:
    return c // 2 + c + 2 * c


def crop_and_merge(img: np.ndarray, c: int, seed: int, min_side: int = 8) -> list[np.ndarray]:
    """Tile same-size crop pairs and their flipped copies into 2x2 composites.

    Crop tiers have sides ``(h, w) / c``, ``/ 2c`` and ``/ 4c`` (rounded down)
    with ``c``, ``2c`` and ``4c`` crops.  Within a tier crops are paired
    without replacement; each pair (A, B) becomes the grid
    ``[[A, B], [flip(A), flip(B)]]`` resized to the source resolution.
    """
    arr = check_image(img)
    if c < 2:
        raise ParameterError(f"crop-and-merge needs c >= 2, got {c}")
    h, w = arr.shape[:2]
    if min(h // (4 * c), w // (4 * c)) < min_side:
        raise ParameterError(f"c={c} makes the smallest crop smaller than {min_side}px for a {w}x{h} image")
    rng = np.random.default_rng(seed)
    merged = []
    for div, count in ((c, c), (2 * c, 2 * c), (4 * c, 4 * c)):
        ch, cw = h // div, w // div
        crops = []
        for _ in range(count):
            y = int(rng.integers(0, h - ch + 1))
            x = int(rng.integers(0, w - cw + 1))
            crops.append(arr[y:y + ch, x:x + cw])
        order = rng.permutation(count)
        for i in range(count // 2):
            a, b = crops[order[2 * i]], crops[order[2 * i + 1]]
            grid = np.concatenate(
                [np.concatenate([a, b], axis=1), np.concatenate([a[:, ::-1], b[:, ::-1]], axis=1)],
                axis=0,
            )
            merged.append(resize_bilinear(grid, (h, w)))
    return merged


def expand_corpus(images: Sequence[np.ndarray], c: int, seed: int) -> tuple[list[np.ndarray], list[int]]:
    """Originals followed by their merged images; also returns each item's source index."""
    if c == 0:
        return list(images), list(range(len(images)))
    out = list(images)
    src = list(range(len(images)))
    for i, img in enumerate(images):
        extra = crop_and_merge(img, c, derive_seed(seed, i))
        out.extend(extra)
        src.extend([i] * len(extra))
    return out, src


def view_ge_pcc(
    images: Sequence[np.ndarray], side_of, strategy: str, seed: int
) -> float:
    """PCC between the GE of one view per image and the GE of its source.

    ``side_of(img)`` gives the crop side for each image.
    """
    from .evaluation import pcc

    src = [global_entropy(img) for img in images]
    views = [
        global_entropy(make_view(img, CropSpec(strategy, side_of(img), derive_seed(seed, i))))
        for i, img in enumerate(images)
    ]
    return pcc(views, src)


def crop_study(
    images: Sequence[np.ndarray],
    sides: Sequence[float],
    strategies: Sequence[str] = STRATEGIES,
    seed: int = 0,
) -> list[tuple[float, str, float]]:
    """Rows of ``(side, strategy, pcc)``.

    A side <= 1 is a fraction of each image's short side; larger values are
    absolute pixel sizes.
    """
    rows = []
    for side in sides:
        if side <= 1:
            side_of = lambda img, f=side: crop_side(min(img.shape[:2]), f)  # noqa: E731
        else:
            side_of = lambda img, s=int(side): s  # noqa: E731
        for strat in strategies:
            rows.append((side, strat, view_ge_pcc(images, side_of, strat, seed)))
    return rows


def format_crop_study(rows) -> str:
    lines = ["side,strategy,pcc_ge_views_vs_source"]
    for side, strat, r in rows:
        side_txt = f"{side:g}"
        lines.append(f"{side_txt},{strat},{r:.6f}")
    return "\n".join(lines) + "\n"
