"""Heuristic image-complexity measures and corpus statistics.

All scores are normalized to [0, 1] and increase with complexity:

* ``global_entropy`` - Shannon entropy of the 256-level gray histogram / 8.
* ``edge_density`` - fraction of pixels Canny marks as edges.
* ``compression_ratio`` - entropy-based ratio ``8 / H``; the stored score is
  its reciprocal ``H / 8`` so it orients like the others.  The raw ratio is
  available from ``raw_compression_ratio``.
* ``uae`` - mean post-ReLU activation of one encoder stage.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    CapacityError,
    ContractError,
    EmptyInputError,
    InsufficientDataError,
    SizeError,
)
from .imageio import check_image, to_gray

if TYPE_CHECKING:
    from .encoder import EncoderState

BIT_DEPTH = 8
CR_EPS = 1e-6
# Gradient magnitudes below this (in gray levels per pixel) are rounding
# residue from the smoothing step, not structure.
MIN_GRADIENT = 1e-6


class Metric(str, enum.Enum):
    GE = "ge"
    ED = "ed"
    CR = "cr"
    UAE = "uae"
    LEARNED = "learned"


@dataclass(frozen=True)
class ComplexityScore:
    value: float
    metric: Metric

    def __float__(self) -> float:
        return float(self.value)


def gray_histogram(img: np.ndarray) -> np.ndarray:
    gray = to_gray(img)
    return np.bincount(gray.ravel(), minlength=256)


def entropy_bits(img: np.ndarray) -> float:
    """Shannon entropy of the gray histogram in bits (0 log 0 = 0)."""
    hist = gray_histogram(img)
    total = hist.sum()
    if total == 0:
        raise EmptyInputError("image has no pixels")
    p = hist[hist > 0] / float(total)
    h = -float(np.sum(p * np.log2(p)))
    return h if h > 0 else 0.0


def global_entropy(img: np.ndarray) -> float:
    return min(max(entropy_bits(img) / BIT_DEPTH, 0.0), 1.0)


def raw_compression_ratio(img: np.ndarray) -> float:
    """``B / max(H(I), eps)``; saturates at ``8e6`` for constant images."""
    return BIT_DEPTH / max(entropy_bits(img), CR_EPS)


def compression_ratio(img: np.ndarray) -> float:
    """Normalized score ``1 / CR`` clamped to [0, 1]; zero when the ratio saturated."""
    h = entropy_bits(img)
    if h <= CR_EPS:
        return 0.0
    return min(max(1.0 / raw_compression_ratio(img), 0.0), 1.0)


# -- Canny ---------------------------------------------------------------


@dataclass(frozen=True)
class CannyParams:
    """Gaussian window size/sigma and hysteresis thresholds as fractions of the
    maximum gradient magnitude."""

    window: int = 5
    sigma: float = 1.4
    low: float = 0.1
    high: float = 0.3


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def canny(img: np.ndarray, params: CannyParams = CannyParams()) -> np.ndarray:
    """Boolean edge map.

    Gaussian smoothing, Sobel gradients, non-maximum suppression along the
    gradient direction quantized to 0/45/90/135 degrees, then hysteresis with
    8-connected tracking from strong pixels.
    """
    gray = to_gray(img).astype(np.float64)
    h, w = gray.shape
    if h < params.window or w < params.window:
        raise SizeError(f"image {w}x{h} is smaller than the {params.window}x{params.window} Gaussian window")
    smooth = ndimage.convolve(gray, _gaussian_kernel(params.window, params.sigma), mode="nearest")
    # ndimage.convolve flips the kernel; correlate keeps the textbook sign.
    gx = ndimage.correlate(smooth, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(smooth, _SOBEL_X.T, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= MIN_GRADIENT:
        return np.zeros((h, w), dtype=bool)

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    padded = np.pad(mag, 1, mode="constant")
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros((h, w), dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        back = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep |= (sector == s) & (mag >= fwd) & (mag >= back)
    nms = np.where(keep, mag, 0.0)

    strong = nms >= params.high * peak
    weak = nms >= params.low * peak
    labels, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return np.zeros((h, w), dtype=bool)
    hit = np.zeros(count + 1, dtype=bool)
    hit[np.unique(labels[strong])] = True
    hit[0] = False
    return hit[labels]


def edge_density(img: np.ndarray, params: CannyParams = CannyParams()) -> float:
    edges = canny(img, params)
    return float(edges.sum()) / edges.size


# -- UAE -----------------------------------------------------------------


def uae(img: np.ndarray, enc: "EncoderState", stage: int = -1) -> float:
    """Mean post-ReLU activation of one encoder stage (last by default), clamped to [0, 1]."""
    from .encoder import encode

    out = encode(enc, img, embed=False)
    energy = out.stage_energies[stage]
    return min(max(float(energy), 0.0), 1.0)


def compute_metric(img: np.ndarray, metric: Metric | str, encoder: "EncoderState | None" = None) -> float:
    metric = Metric(metric)
    if metric is Metric.GE:
        return global_entropy(img)
    if metric is Metric.ED:
        return edge_density(img)
    if metric is Metric.CR:
        return compression_ratio(img)
    if metric is Metric.UAE:
        if encoder is None:
            raise ContractError("uae needs an encoder")
        return uae(img, encoder)
    raise ContractError(f"metric {metric.value} is not a heuristic metric")


# -- corpus statistics ---------------------------------------------------


def bin_index(values, bins: int) -> np.ndarray:
    """Equal-width bin of each value in [0, 1]; 1.0 falls in the last bin."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.minimum(np.floor(v * bins).astype(int), bins - 1)


@dataclass(frozen=True)
class ICDStats:
    edges: np.ndarray
    mass: np.ndarray
    mean: float
    std: float

    def rows(self) -> list[tuple[float, float, float]]:
        return [(float(self.edges[i]), float(self.edges[i + 1]), float(self.mass[i])) for i in range(len(self.mass))]


def icd_stats(scores: Iterable[float | ComplexityScore], bins: int = 10) -> ICDStats:
    """Normalized histogram over [0, 1] plus mean and (population) std."""
    values = np.array([float(s) for s in scores], dtype=np.float64)
    if values.size < 2:
        raise InsufficientDataError(f"need at least 2 scores, got {values.size}")
    if bins < 1:
        raise ContractError("bins must be positive")
    counts = np.bincount(bin_index(values, bins), minlength=bins).astype(np.float64)
    return ICDStats(
        edges=np.linspace(0.0, 1.0, bins + 1),
        mass=counts / values.size,
        mean=float(values.mean()),
        std=float(values.std()),
    )


def target_bin_counts(n: int, target: str, bins: int = 10) -> np.ndarray:
    """Integer per-bin quotas summing to ``n`` (largest-remainder rounding)."""
    if target == "uniform":
        mass = np.full(bins, 1.0 / bins)
    elif target == "gaussian":
        mu, sigma = 0.5, 0.15
        edges = np.linspace(0.0, 1.0, bins + 1)
        cdf = np.array([0.5 * (1.0 + math.erf((e - mu) / (sigma * math.sqrt(2.0)))) for e in edges])
        mass = np.diff(cdf)
        mass = mass / mass.sum()
    else:
        raise ContractError(f"unknown sampling target {target!r}")
    raw = mass * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def entropy_balanced_indices(
    ge: Sequence[float], n: int, target: str = "uniform", seed: int = 0, bins: int = 10
) -> tuple[list[int], int]:
    """Pick ``n`` indices whose GE histogram follows ``target``.

    Bins short of candidates borrow from the nearest bin that still has some
    (lower bin first on ties).  Returns the indices and the number borrowed.
    """
    ge = np.asarray(ge, dtype=np.float64)
    if n > ge.size:
        raise CapacityError(f"cannot sample {n} images from a corpus of {ge.size}")
    quotas = target_bin_counts(n, target, bins)
    rng = np.random.default_rng(seed)
    idx = bin_index(ge, bins)
    pools = [list(rng.permutation(np.flatnonzero(idx == b))) for b in range(bins)]
    chosen: list[int] = []
    borrowed = 0
    for b in range(bins):
        take = min(quotas[b], len(pools[b]))
        chosen.extend(int(i) for i in pools[b][:take])
        del pools[b][:take]
        missing = quotas[b] - take
        dist = 1
        while missing > 0:
            for nb in (b - dist, b + dist):
                if 0 <= nb < bins and pools[nb] and missing > 0:
                    take = min(missing, len(pools[nb]))
                    chosen.extend(int(i) for i in pools[nb][:take])
                    del pools[nb][:take]
                    missing -= take
                    borrowed += take
            dist += 1
    return chosen, borrowed


def entropy_balanced_sample(
    corpus: Sequence[np.ndarray], n: int, target: str = "uniform", seed: int = 0
) -> list[np.ndarray]:
    if n > len(corpus):
        raise CapacityError(f"cannot sample {n} images from a corpus of {len(corpus)}")
    ge = [global_entropy(img) for img in corpus]
    chosen, _ = entropy_balanced_indices(ge, n, target, seed)
    return [corpus[i] for i in chosen]


def format_metric_rows(rows: Iterable[tuple[str, str, float]]) -> str:
    lines = ["path,metric,value"]
    lines += [f"{p},{m},{v:.6f}" for p, m, v in rows]
    return "\n".join(lines) + "\n"


def format_histogram(stats: ICDStats) -> str:
    lines = ["bin_low,bin_high,mass"]
    lines += [f"{lo:.6f},{hi:.6f},{m:.6f}" for lo, hi, m in stats.rows()]
    return "\n".join(lines) + "\n"
