"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or invalid
input), 3 numeric failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig, load_config
from .errors import ClicError, DataError, NumericFailure
from .imageio import atomic_write_text, list_images, load_image, save_image
from .views import resize_bilinear

log = logging.getLogger("clic")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _read_labels(path: str) -> list[tuple[Path, float]]:
    """``path,score`` CSV; relative paths resolve against the CSV's folder."""
    p = Path(path)
    try:
        lines = p.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read labels {p}: {exc}") from exc
    if not lines or lines[0].strip() != "path,score":
        raise DataError(f"{p}: expected header 'path,score'")
    rows = []
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            name, score = line.rsplit(",", 1)
            rows.append(((p.parent / name).resolve() if not Path(name).is_absolute() else Path(name), float(score)))
        except ValueError as exc:
            raise DataError(f"{p}:{n}: bad row {line!r}") from exc
    return rows


def _encoder_inputs(images, resolution: int) -> list[np.ndarray]:
    return [im if im.shape[:2] == (resolution, resolution) else resize_bilinear(im, (resolution, resolution)) for im in images]


def _load_ckpt(path: str):
    from .trainer import load_training_checkpoint

    return load_training_checkpoint(path)


# -- verbs ---------------------------------------------------------------


def cmd_metrics(args) -> int:
    from .encoder import init_encoder
    from .metrics import compute_metric, format_metric_rows

    encoder, res = None, None
    if args.metric == "uae":
        if args.ckpt:
            state, cfg, _ = _load_ckpt(args.ckpt)
            encoder, res = state.query, cfg.resolution
        else:
            encoder, res = init_encoder(args.seed), TrainConfig().resolution
    rows = []
    for p in args.paths:
        img = load_image(p)
        if res is not None:
            img = _encoder_inputs([img], res)[0]
        rows.append((p, args.metric, compute_metric(img, args.metric, encoder)))
    _emit(format_metric_rows(rows), args.out)
    return EXIT_OK


def cmd_icd(args) -> int:
    from .metrics import compute_metric, format_histogram, icd_stats

    scores = [compute_metric(load_image(p), args.metric) for p in list_images(args.dir)]
    stats = icd_stats(scores, args.bins)
    _emit(format_histogram(stats), args.out)
    log.info("mean %.6f std %.6f over %d images", stats.mean, stats.std, len(scores))
    return EXIT_OK


def cmd_sample(args) -> int:
    from .metrics import entropy_balanced_indices, global_entropy

    paths = list_images(args.dir)
    ge = [global_entropy(load_image(p)) for p in paths]
    chosen, borrowed = entropy_balanced_indices(ge, args.n, args.target, seed=args.seed, bins=args.bins)
    lines = ["path,ge"] + [f"{paths[i]},{ge[i]:.6f}" for i in chosen]
    _emit("\n".join(lines) + "\n", args.out)
    log.info("selected %d images (%d borrowed from neighbouring bins)", len(chosen), borrowed)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .evaluation import gen_synthetic

    if not args.out:
        raise UsageError("synth: -o/--out (the output folder) is required")
    corpus = gen_synthetic(args.kind, args.n, args.seed, size=args.size)
    out = Path(args.out)
    width = len(str(max(args.n - 1, 1)))
    lines = ["path,score"]
    for i, (img, knob) in enumerate(zip(corpus.images, corpus.knob)):
        name = f"{args.kind}_{i:0{width}d}.{args.format}"
        save_image(out / name, img)
        lines.append(f"{name},{knob:.6f}")
    atomic_write_text(out / "labels.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import format_log, save_training_checkpoint, train

    cfg = load_config(args.config)
    corpus = args.corpus or cfg.corpus
    output = Path(args.output or cfg.output or ".")
    if not corpus:
        raise DataError("no corpus: set 'corpus' in the config or pass --corpus")
    images = [load_image(p) for p in list_images(corpus)]
    if not images:
        raise DataError(f"no images in {corpus}")
    state = None
    if args.resume:
        state, saved_cfg, _ = _load_ckpt(args.resume)
        if saved_cfg != cfg:
            log.warning("resuming with a config that differs from the checkpoint's")

    def on_epoch_end(epoch, st):
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_training_checkpoint(output / f"epoch_{epoch:04d}.ckpt", st, cfg)

    res = train(images, cfg, state=state, on_epoch_end=on_epoch_end)
    atomic_write_text(output / "train_log.csv", format_log(res.records))
    save_training_checkpoint(output / "final.ckpt", res.state, cfg)
    if res.aborted:
        raise NumericFailure(res.aborted)
    return EXIT_OK


def _labeled_images(labels_csv: str, resolution: int):
    rows = _read_labels(labels_csv)
    images = _encoder_inputs([load_image(p) for p, _ in rows], resolution)
    return rows, images, np.array([s for _, s in rows])


def cmd_probe(args) -> int:
    from .evaluation import ProbeConfig, probe
    from .trainer import save_training_checkpoint

    state, cfg, _ = _load_ckpt(args.ckpt)
    rows, images, scores = _labeled_images(args.labels, cfg.resolution)
    k = args.n_labels
    if not 0 < k < len(rows) - 2:
        raise DataError(f"--n-labels must leave at least 3 held-out images (have {len(rows)})")
    pcfg = ProbeConfig(n_labels=k, lr=args.lr, epochs=args.epochs, seed=args.seed)
    report, head = probe(state.query, images[:k], scores[:k], images[k:], scores[k:], pcfg)
    _emit(f"n_labels,pcc,srcc,n_eval\n{k},{report.pcc:.6f},{report.srcc:.6f},{report.n}\n", args.out)
    if args.save:
        save_training_checkpoint(args.save, state, cfg, head)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .encoder import encode_batch
    from .evaluation import correlate

    state, cfg, head = _load_ckpt(args.ckpt)
    labels = Path(args.labels) if args.labels else Path(args.corpus) / "labels.csv"
    rows, images, scores = _labeled_images(str(labels), cfg.resolution)
    fw = encode_batch(state.query, images, cfg.fae_stages)
    pred = head.predict(fw.pooled.data) if head is not None else fw.fae.data.astype(np.float64)
    report = correlate(pred, scores)
    source = "head" if head is not None else "fae"
    _emit(f"predictor,pcc,srcc,n\n{source},{report.pcc:.6f},{report.srcc:.6f},{report.n}\n", args.out)
    if args.predictions:
        lines = ["path,score,pred"] + [f"{p},{s:.6f},{q:.6f}" for (p, s), q in zip(rows, pred)]
        atomic_write_text(args.predictions, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_cropstudy(args) -> int:
    from .views import crop_study, format_crop_study

    images = [load_image(p) for p in list_images(args.dir)]
    if len(images) < 3:
        raise DataError("crop study needs at least 3 images")
    rows = crop_study(images, args.sides, args.strategies.split(","), seed=args.seed)
    _emit(format_crop_study(rows), args.out)
    return EXIT_OK


def cmd_study(args) -> int:
    from .evaluation import ProbeConfig, StudyConfig, format_study, run_study

    train_cfg = load_config(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        train_cfg = train_cfg.replace(epochs=args.epochs)
    scfg = StudyConfig(
        n_images=args.n_images,
        kind=args.kind,
        seed=args.seed,
        train=train_cfg,
        probe=ProbeConfig(epochs=args.probe_epochs),
    )
    _emit(format_study(run_study(args.name, scfg)), args.out)
    return EXIT_OK


def cmd_export_features(args) -> int:
    from .evaluation import export_features

    state, cfg, head = _load_ckpt(args.ckpt)
    paths = list_images(args.dir)
    images = _encoder_inputs([load_image(p) for p in paths], cfg.resolution)
    _emit(export_features(state.query, [str(p) for p in paths], images, head), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    results = run_gradcheck(args.seed)
    lines = ["check,max_rel_error,ok"] + [f"{r.name},{r.max_rel_error:.3e},{int(r.ok)}" for r in results]
    _emit("\n".join(lines) + "\n", args.out)
    if not all(r.ok for r in results):
        log.error("gradient check failed (tolerance %g)", TOLERANCE)
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .evaluation import STUDIES

    parser = _Parser(prog="clic", description="Image-complexity representation laboratory.")
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("-o", "--out", default=None, help="write the CSV here instead of stdout")
        return p

    p = add("metrics", cmd_metrics, "per-image complexity metrics")
    p.add_argument("--metric", choices=["ge", "ed", "cr", "uae"], required=True)
    p.add_argument("--ckpt", default=None, help="encoder for uae (random init when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("paths", nargs="+")

    p = add("icd", cmd_icd, "complexity histogram of a folder")
    p.add_argument("dir")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--metric", choices=["ge", "ed", "cr"], default="ge")

    p = add("sample", cmd_sample, "entropy-balanced subset of a folder")
    p.add_argument("dir")
    p.add_argument("--target", choices=["uniform", "gaussian"], default="uniform")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = add("synth", cmd_synth, "write a synthetic corpus with labels.csv")
    p.add_argument("--kind", choices=["noise", "mosaic"], default="noise")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--format", choices=["png", "pgm"], default="png")

    p = add("train", cmd_train, "contrastive pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", default=None, help="overrides the config's corpus folder")
    p.add_argument("--output", default=None, help="overrides the config's output folder")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = add("probe", cmd_probe, "fit a linear head on frozen features and score held-out images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--labels", required=True, help="CSV path,score")
    p.add_argument("--n-labels", type=int, default=200)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save", default=None, help="write a checkpoint including the fitted head")

    p = add("eval", cmd_eval, "correlate predictions with labels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--labels", default=None, help="defaults to <corpus>/labels.csv")
    p.add_argument("--predictions", default=None, help="also write per-image predictions here")

    p = add("cropstudy", cmd_cropstudy, "view/source GE correlation per crop size")
    p.add_argument("--dir", required=True)
    p.add_argument("--sides", type=_csv_floats, default=[240, 192, 144, 96])
    p.add_argument("--strategies", default="oc,fa,ma")
    p.add_argument("--seed", type=int, default=0)

    p = add("study", cmd_study, "run an ablation grid")
    p.add_argument("--name", choices=STUDIES, required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--n-images", type=int, default=2000)
    p.add_argument("--kind", choices=["noise", "mosaic"], default="noise")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--probe-epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)

    p = add("export-features", cmd_export_features, "pooled features for external embedding")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dir", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("clic: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    if args.threads:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(args.threads)
    else:
        limit = nullcontext()
    try:
        with limit:
            return args.fn(args)
    except UsageError as exc:
        print(f"clic: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"clic: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ClicError, ValueError) as exc:
        print(f"clic: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
