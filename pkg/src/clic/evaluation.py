"""Correlation metrics, synthetic corpora with known complexity, and the
desk-scale ablation studies."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .config import TrainConfig
from .encoder import EncoderState, encode_batch, init_encoder
from .errors import ContractError, DegenerateSeriesError, InsufficientDataError
from .metrics import entropy_balanced_indices, global_entropy
from .trainer import (
    FineTuneHead,
    TrainResult,
    compute_priors,
    fine_tune,
    pooled_features,
    train,
)
from .views import derive_seed, expand_corpus, merged_count, resize_bilinear

log = logging.getLogger(__name__)


# -- correlation ---------------------------------------------------------


def _series(x, y) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ContractError(f"series lengths differ: {a.size} vs {b.size}")
    if a.size < 3:
        raise InsufficientDataError(f"correlation needs at least 3 samples, got {a.size}")
    return a, b


def pcc(x, y) -> float:
    """Sample Pearson correlation.  Raises DegenerateSeriesError on zero variance."""
    a, b = _series(x, y)
    a = a - a.mean()
    b = b - b.mean()
    sxx = float(np.dot(a, a))
    syy = float(np.dot(b, b))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateSeriesError("correlation is undefined for a constant series")
    r = float(np.dot(a, b)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    return rankdata(np.asarray(x, dtype=np.float64), method="average")


def srcc(x, y) -> float:
    """Spearman correlation: Pearson correlation of average ranks."""
    a, b = _series(x, y)
    return pcc(average_ranks(a), average_ranks(b))


@dataclass(frozen=True)
class CorrelationReport:
    pcc: float
    srcc: float
    n: int


def correlate(x, y) -> CorrelationReport:
    return CorrelationReport(pcc(x, y), srcc(x, y), len(np.asarray(x).reshape(-1)))


# -- synthetic corpora ---------------------------------------------------

NOISE_AMPLITUDE = 96.0
NOISE_EXPONENT = 2.0
MOSAIC_MAX_CELLS = 256


@dataclass
class SyntheticCorpus:
    images: list[np.ndarray]
    knob: np.ndarray
    kind: str

    def __len__(self) -> int:
        return len(self.images)


def noise_image(knob: float, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Low-pass filtered white noise.

    The radial cutoff is ``knob`` times Nyquist, and the field (normalized to
    unit std) is scaled by ``96 * knob**2`` around mid-gray, so low knobs give
    smooth, nearly flat images and high knobs give broadband texture.
    """
    white = rng.standard_normal((size, size))
    spec = np.fft.fft2(white)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2) / 0.5
    spec[radius > knob] = 0
    field_ = np.real(np.fft.ifft2(spec))
    sd = field_.std()
    # on small grids a low cutoff can pass only the DC term: flat image
    field_ = field_ / sd if sd > 1e-9 else np.zeros_like(field_)
    img = 128.0 + NOISE_AMPLITUDE * knob ** NOISE_EXPONENT * field_
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def mosaic_image(knob: float, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Voronoi mosaic with ``round(256 ** knob)`` cells of random gray levels
    (the knob is the log-normalized cell count)."""
    cells = max(1, int(round(MOSAIC_MAX_CELLS ** knob)))
    sites = rng.uniform(0, size, size=(cells, 2))
    levels = rng.integers(0, 256, size=cells)
    yy, xx = np.mgrid[0:size, 0:size]
    pts = np.stack([yy.ravel() + 0.5, xx.ravel() + 0.5], axis=1)
    d2 = ((pts[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
    owner = d2.argmin(axis=1)
    return levels[owner].reshape(size, size).astype(np.uint8)


def gen_synthetic(kind: str, n: int, seed: int, size: int = 64) -> SyntheticCorpus:
    """``n`` images with knobs drawn uniformly from [0.05, 0.95]."""
    if n < 1:
        raise ContractError("n must be at least 1")
    if kind == "noise":
        make = noise_image
    elif kind == "mosaic":
        make = mosaic_image
    else:
        raise ContractError(f"unknown corpus kind {kind!r}")
    knobs = np.random.default_rng(derive_seed(seed, 0)).uniform(0.05, 0.95, size=n)
    images = [make(float(k), np.random.default_rng(derive_seed(seed, 1, i)), size) for i, k in enumerate(knobs)]
    return SyntheticCorpus(images, knobs, kind)


# -- probing -------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    n_labels: int = 200
    n_eval: int = 500
    lr: float = 0.001
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0


def probe(
    encoder: EncoderState,
    label_images: Sequence[np.ndarray],
    label_scores: Sequence[float],
    eval_images: Sequence[np.ndarray],
    eval_scores: Sequence[float],
    pcfg: ProbeConfig = ProbeConfig(),
) -> tuple[CorrelationReport, FineTuneHead]:
    """Fit a linear head on frozen pooled features and score a held-out set."""
    feats = pooled_features(encoder, label_images)
    head = fine_tune(
        FineTuneHead.zeros(feats.shape[1]),
        encoder,
        list(zip(label_images, label_scores)),
        lr=pcfg.lr,
        epochs=pcfg.epochs,
        batch_size=pcfg.batch_size,
        seed=pcfg.seed,
        features=feats,
    )
    pred = head.predict(pooled_features(encoder, eval_images))
    try:
        report = correlate(pred, eval_scores)
    except DegenerateSeriesError:
        report = CorrelationReport(float("nan"), float("nan"), len(pred))
    return report, head


# -- studies -------------------------------------------------------------

STUDIES = (
    "lambda_sweep",
    "prior_ablation",
    "crop_study",
    "cm_sweep",
    "label_efficiency",
    "sampling_ablation",
)
LAMBDA_GRID = (0.0, 0.15, 0.25, 0.35, 0.5)
PRIOR_GRID = ("none", "cr", "ed", "ge")
CM_GRID = (0, 2, 3, 4, 5)
LABEL_GRID = (10, 50, 100, 200, 500)
SAMPLING_GRID = ("random", "uniform", "gaussian")
CROP_CASES = {
    "a": dict(query_aug="oc", crop_fraction=1.0, key_aug="oc", key_crop_fraction=1.0),
    "b": dict(query_aug="oc", crop_fraction=1.0, key_aug="fa", key_crop_fraction=144 / 224),
    "c": dict(query_aug="oc", crop_fraction=1.0, key_aug="fa", key_crop_fraction=1.0),
    "d": dict(query_aug="fa", crop_fraction=144 / 224, key_aug="ma", key_crop_fraction=0.0),
    "e": dict(query_aug="fa", crop_fraction=1.0, key_aug="ma", key_crop_fraction=0.0),
}
CM_SOURCE_SIZE = 160


@dataclass(frozen=True)
class StudyConfig:
    """Desk-scale study settings; ``train`` supplies everything the cells do not vary."""

    n_images: int = 2000
    kind: str = "noise"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    label_grid: tuple[int, ...] = LABEL_GRID


@dataclass(frozen=True)
class StudyRow:
    study: str
    cell_params: str
    pcc: float
    srcc: float
    steps: int
    final_loss: float


def _final_loss(res: TrainResult) -> float:
    if res.aborted or not res.records:
        return float("nan")
    return res.records[-1].loss_total


def _cell_row(study, params, res: TrainResult, report: CorrelationReport | None) -> StudyRow:
    if report is None:
        return StudyRow(study, params, float("nan"), float("nan"), len(res.records), float("nan"))
    return StudyRow(study, params, report.pcc, report.srcc, len(res.records), _final_loss(res))


def _probe_data(scfg: StudyConfig, size: int):
    pool = gen_synthetic(scfg.kind, scfg.probe.n_labels + scfg.probe.n_eval, derive_seed(scfg.seed, 99), size)
    if size != scfg.train.resolution:
        res = (scfg.train.resolution, scfg.train.resolution)
        pool.images = [resize_bilinear(im, res) for im in pool.images]
    return pool


def _train_and_probe(images, cfg: TrainConfig, pool, n_labels, pcfg: ProbeConfig, priors=None):
    res = train(images, cfg, priors=priors)
    if res.aborted:
        return res, None
    k = n_labels
    report, _ = probe(
        res.state.query,
        pool.images[:k], pool.knob[:k],
        pool.images[k:], pool.knob[k:],
        pcfg,
    )
    return res, report


def run_study(name: str, scfg: StudyConfig = StudyConfig()) -> list[StudyRow]:
    """Execute one study grid; aborted cells are reported with NaN scores."""
    if name not in STUDIES:
        raise ContractError(f"unknown study {name!r}; choose from {', '.join(STUDIES)}")
    cell_seed = derive_seed(scfg.seed, STUDIES.index(name))
    base = scfg.train.replace(seed=cell_seed)
    pcfg = scfg.probe
    rows: list[StudyRow] = []

    if name == "cm_sweep":
        corpus = gen_synthetic(scfg.kind, scfg.n_images, scfg.seed, size=CM_SOURCE_SIZE)
        pool = _probe_data(scfg, CM_SOURCE_SIZE)
        for c in CM_GRID:
            images, _ = expand_corpus(corpus.images, c, derive_seed(cell_seed, c))
            ratio = 1 + (merged_count(c) if c else 0)
            res, report = _train_and_probe(images, base, pool, pcfg.n_labels, pcfg)
            rows.append(_cell_row(name, f"c={c};ratio={ratio}x", res, report))
            log.info("%s %s", name, rows[-1])
        return rows

    pool = _probe_data(scfg, scfg.train.resolution)

    if name == "sampling_ablation":
        big = gen_synthetic(scfg.kind, 3 * scfg.n_images, scfg.seed)
        ge = [global_entropy(im) for im in big.images]
        for target in SAMPLING_GRID:
            if target == "random":
                idx = np.random.default_rng(cell_seed).choice(len(big), scfg.n_images, replace=False)
            else:
                idx, _ = entropy_balanced_indices(ge, scfg.n_images, target, seed=cell_seed)
            images = [big.images[i] for i in idx]
            res, report = _train_and_probe(images, base, pool, pcfg.n_labels, pcfg)
            rows.append(_cell_row(name, f"sampling={target}", res, report))
            log.info("%s %s", name, rows[-1])
        return rows

    corpus = gen_synthetic(scfg.kind, scfg.n_images, scfg.seed)

    if name == "label_efficiency":
        res = train(corpus.images, base)
        for k in scfg.label_grid:
            if res.aborted or k >= len(pool):
                rows.append(_cell_row(name, f"labels={k}", res, None))
                continue
            report, _ = probe(
                res.state.query,
                pool.images[:k], pool.knob[:k],
                pool.images[pcfg.n_labels:], pool.knob[pcfg.n_labels:],
                pcfg,
            )
            rows.append(_cell_row(name, f"labels={k}", res, report))
        return rows

    if name == "lambda_sweep":
        cells = [(f"lambda={lam:g}", base.replace(lam=lam)) for lam in LAMBDA_GRID]
    elif name == "prior_ablation":
        cells = [(f"prior={p}", base.replace(prior=p)) for p in PRIOR_GRID]
    else:
        cells = [(f"case={c}", base.replace(**kw)) for c, kw in CROP_CASES.items()]

    for params, cfg in cells:
        res, report = _train_and_probe(corpus.images, cfg, pool, pcfg.n_labels, pcfg)
        rows.append(_cell_row(name, params, res, report))
        log.info("%s %s", name, rows[-1])
    return rows


def _fmt(v: float) -> str:
    return "nan" if v != v else f"{v:.6f}"


def format_study(rows: Sequence[StudyRow]) -> str:
    lines = ["study,cell_params,pcc,srcc,steps,final_loss"]
    for r in rows:
        lines.append(f"{r.study},{r.cell_params},{_fmt(r.pcc)},{_fmt(r.srcc)},{r.steps},{_fmt(r.final_loss)}")
    return "\n".join(lines) + "\n"


# -- feature export ------------------------------------------------------


def export_features(
    encoder: EncoderState,
    paths: Sequence[str],
    images: Sequence[np.ndarray],
    head: FineTuneHead | None = None,
) -> str:
    """CSV ``path,ge,pred_score,f1..fD`` of pooled last-stage features.

    ``pred_score`` is the head's prediction, or the encoder's activation
    energy when no head is available.
    """
    fw = encode_batch(encoder, images)
    feats = fw.pooled.data.astype(np.float64)
    pred = head.predict(feats) if head is not None else fw.fae.data.astype(np.float64)
    d = feats.shape[1]
    lines = ["path,ge,pred_score," + ",".join(f"f{i + 1}" for i in range(d))]
    for p, im, s, f in zip(paths, images, pred, feats):
        vals = ",".join(f"{v:.6f}" for v in f)
        lines.append(f"{p},{global_entropy(im):.6f},{s:.6f},{vals}")
    return "\n".join(lines) + "\n"


def fae_gap(encoder: EncoderState, images: Sequence[np.ndarray], prior=None, fae_stages: str = "all") -> float:
    """Mean ``|fae - prior|`` over ``images`` (prior defaults to each image's GE)."""
    fae = encode_batch(encoder, images, fae_stages).fae.data.astype(np.float64)
    prior = np.array([global_entropy(im) for im in images]) if prior is None else np.asarray(prior, np.float64)
    return float(np.mean(np.abs(fae - prior)))


def baseline_encoder(cfg: TrainConfig) -> EncoderState:
    """Randomly initialized encoder with the same architecture and seed as a run."""
    return init_encoder(cfg.seed, channels=cfg.channels, embed_dim=cfg.embed_dim)


__all__ = [
    "CorrelationReport",
    "ProbeConfig",
    "StudyConfig",
    "StudyRow",
    "SyntheticCorpus",
    "average_ranks",
    "baseline_encoder",
    "fae_gap",
    "compute_priors",
    "correlate",
    "export_features",
    "format_study",
    "gen_synthetic",
    "pcc",
    "probe",
    "run_study",
    "srcc",
]
