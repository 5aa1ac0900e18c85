"""Command-line entry point wiring the library into reproducible runs.

Every command resolves its full configuration (printed as key=value lines
before doing work), seeds all randomness from --seed, and writes only the
documented artifacts, so reruns are byte-identical. Exit codes: 0 success,
1 configuration or contract error, 2 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import adapter, embedio, infotheory, trainer, ttt
from .errors import FormatError, RadaError
from .gradcheck import full_objective_check
from .losses import REG_NORMS, ENTROPY_MODES, LossConfig
from .trainer import RunConfig

_REGIME_FLAGS = {"eft": "EFT", "ttt": "TTT",
                 "fft-lite-stage1": "FFT-lite-stage1", "fft-lite-stage2": "FFT-lite-stage2"}

BUNDLE_FILES = {
    "base_train": "base_train.rda",
    "base_test": "base_test.rda",
    "new_test": "new_test.rda",
    "base_classes": "base_classes.rda",
    "new_classes": "new_classes.rda",
}
STREAM_FILE = "ttt_stream.rda"
CHECKPOINT_FILE = "adapter.rdam"


class _UsageError(RadaError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}")


def _print_config(args: argparse.Namespace) -> None:
    for key in sorted(vars(args)):
        if key == "func":
            continue
        print(f"config {key}={getattr(args, key)}")


def _load_batch(path: Path) -> embedio.EmbeddingBatch:
    """RDA1 batch, or a hand-authored TSV fixture (normalized on import)."""
    if Path(path).suffix.lower() == ".tsv":
        batch = embedio.load_tsv(path, split_tag="ttt-stream")
        return embedio.l2_normalized(batch)
    return embedio.load(path)


def _load_bundle(path: Path) -> embedio.DatasetBundle:
    return embedio.DatasetBundle(
        base_train=embedio.load(path / BUNDLE_FILES["base_train"]),
        base_test=embedio.load(path / BUNDLE_FILES["base_test"]),
        new_test=embedio.load(path / BUNDLE_FILES["new_test"]),
        base_classes=embedio.load(path / BUNDLE_FILES["base_classes"]),
        new_classes=embedio.load(path / BUNDLE_FILES["new_classes"]),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = embedio.synth_gaussian(
        args.k, args.d, shots=args.shots, sigma=args.sigma, seed=args.seed,
        new_k=args.new_k, test_shots=args.test_shots,
    )
    embedio.save(bundle.base_train, out / BUNDLE_FILES["base_train"])
    embedio.save(bundle.base_test, out / BUNDLE_FILES["base_test"])
    embedio.save(bundle.new_test, out / BUNDLE_FILES["new_test"])
    embedio.save(bundle.base_classes, out / BUNDLE_FILES["base_classes"])
    embedio.save(bundle.new_classes, out / BUNDLE_FILES["new_classes"])
    written = list(BUNDLE_FILES.values())
    if args.stream_size:
        stream_sigma = args.stream_sigma if args.stream_sigma is not None else args.sigma
        stream = embedio.synth_stream(args.k, args.d, args.stream_size, stream_sigma, args.seed)
        embedio.save(stream, out / STREAM_FILE)
        written.append(STREAM_FILE)
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def _run_config_from_args(args, regime: str) -> RunConfig:
    loss = LossConfig(
        reg_weight=args.alpha,
        reg_norm=args.reg_norm,
        apply_reg=True,
    )
    if regime == "FFT-lite":
        return RunConfig.fft_lite(
            seed=args.seed,
            logit_scale=args.logit_scale,
            batch_size=args.batch,
            stage1_lr=args.stage1_lr,
            stage2_lr=args.stage2_lr,
            stage1_epochs=args.stage1_epochs,
            stage2_epochs=args.stage2_epochs,
            weight_decay=args.weight_decay,
            loss=loss,
            eval_every=args.eval_every,
        )
    return RunConfig(
        regime=regime,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        optimizer=args.optimizer,
        weight_decay=args.weight_decay,
        seed=args.seed,
        logit_scale=args.logit_scale,
        loss=loss,
        eval_every=args.eval_every,
    )


def _finish_training(out_dir: Path, bundle, params, result, logit_scale, classifier=None) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    adapter.save_params(params, out_dir / CHECKPOINT_FILE)
    trainer.write_history_csv(result.history, out_dir / "history.csv")
    report = trainer.bundle_report(bundle, params, logit_scale, base_classes=classifier)
    trainer.write_report(report, out_dir / "report.txt")
    if classifier is not None:
        embedio.save(classifier, out_dir / "classifier.rda")
    print(
        f"base_acc={report.base_acc:.4f} new_acc={report.new_acc:.4f} "
        f"harmonic_mean={report.harmonic_mean:.4f}"
    )
    return 0


def cmd_train_eft(args) -> int:
    bundle = _load_bundle(Path(args.bundle))
    cfg = _run_config_from_args(args, "EFT")
    params = adapter.init_params(
        bundle.base_classes.dim, inner=args.inner, variant=args.variant,
        n_layers=args.layers, seed=args.seed,
    )
    result = trainer.train_eft(bundle, params, cfg)
    return _finish_training(Path(args.out), bundle, params, result, cfg.logit_scale)


def cmd_train_fft_lite(args) -> int:
    bundle = _load_bundle(Path(args.bundle))
    cfg = _run_config_from_args(args, "FFT-lite")
    params = adapter.init_params(
        bundle.base_classes.dim, inner=args.inner, variant=args.variant,
        n_layers=args.layers, seed=args.seed,
    )
    result = trainer.train_fft_lite(bundle, params, cfg)
    return _finish_training(
        Path(args.out), bundle, params, result, cfg.logit_scale, classifier=result.classifier
    )


def cmd_ttt(args) -> int:
    bundle_dir = Path(args.bundle)
    classes = embedio.load(bundle_dir / BUNDLE_FILES["base_classes"])
    stream_path = Path(args.stream) if args.stream else bundle_dir / STREAM_FILE
    stream = _load_batch(stream_path)
    if args.checkpoint:
        params = adapter.load_params(args.checkpoint)
    else:
        params = adapter.init_params(classes.dim, seed=args.seed)
    cfg = ttt.TttConfig(
        n_views=args.views,
        keep_frac=args.keep_frac,
        keep_mode=args.keep_mode,
        steps=args.steps,
        lr=args.lr,
        reg_weight=args.alpha,
        reg_norm=args.reg_norm,
        entropy_mode=args.entropy,
        view_jitter=args.jitter,
        view_drop_frac=args.drop_frac,
        logit_scale=args.logit_scale,
        seed=args.seed,
    )
    result = ttt.run_stream(stream, classes, params, cfg, workers=ttt.worker_count())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ttt.write_sample_log(result, out / "ttt_log.csv")
    (out / "report.txt").write_text(
        f"adapted_acc={result.accuracy:.10g}\n"
        f"initial_acc={result.zero_shot_accuracy:.10g}\n"
        f"samples={len(result.samples)}\n",
        encoding="utf-8",
    )
    print(f"initial_acc={result.zero_shot_accuracy:.4f} adapted_acc={result.accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    bundle = _load_bundle(Path(args.bundle))
    params = adapter.load_params(args.checkpoint) if args.checkpoint else None
    report = trainer.bundle_report(bundle, params, args.logit_scale)
    lines = [
        f"base_acc={report.base_acc:.10g}",
        f"new_acc={report.new_acc:.10g}",
        f"harmonic_mean={report.harmonic_mean:.10g}",
        f"mask_mean={report.mask_stats.mean:.10g}",
    ]
    for line in lines:
        print(line)
    if args.out:
        trainer.write_report(report, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    err = full_objective_check(
        _REGIME_FLAGS[args.regime],
        variant=args.variant,
        reg_norm=args.reg_norm,
        b=args.b,
        k=args.k,
        dim=args.dim,
        inner=args.inner,
        n_layers=args.layers,
        seed=args.seed,
        logit_scale=args.logit_scale,
        h=args.step,
    )
    print(f"max_relative_error={err:.6e}")
    print(f"threshold=1e-05 verdict={'pass' if err < 1e-5 else 'fail'}")
    return 0 if err < 1e-5 else 1


def cmd_mi_verify(args) -> int:
    all_hold = True
    for i in range(args.ensembles):
        ens = infotheory.random_ensemble(
            args.seed * 100_000 + i, k=args.k, d=args.d, support=args.support, bins=args.bins
        )
        lemma1 = infotheory.verify_lemma1(ens)
        lemma23 = infotheory.verify_lemma23(ens, budget=args.budget)
        for line in infotheory.report_lines(i, lemma1, lemma23):
            print(line)
        ok = (
            lemma1.holds
            and not lemma23.partial
            and lemma23.lemma2_holds
            and lemma23.lemma3_holds
            and lemma23.constrained_equality_dev <= infotheory.EQ_TOL
            and lemma23.invertible_equality_dev <= infotheory.EQ_TOL
        )
        all_hold = all_hold and ok
    print(f"ensembles={args.ensembles} verdict={'all-hold' if all_hold else 'violated'}")
    return 0 if all_hold else 1


def cmd_mask_stats(args) -> int:
    params = adapter.load_params(args.checkpoint)
    bundle_dir = Path(args.bundle)
    batch = embedio.load(bundle_dir / BUNDLE_FILES[args.split.replace("-", "_")])
    classes_file = "new_classes" if args.split == "new-test" else "base_classes"
    classes = embedio.load(bundle_dir / BUNDLE_FILES[classes_file])
    from .rational import compute_rational

    rational = compute_rational(batch, classes)
    mask = adapter.compute_mask(params, batch, classes, rational)
    values = mask.values.data

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:  # degenerate all-equal masks still get one populated bin
        hi = lo + 1e-12
    counts, edges = np.histogram(values, bins=args.bins, range=(lo, hi))
    with open(out / "mask_hist.csv", "w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for i, c in enumerate(counts):
            fh.write(f"{edges[i]:.10g},{edges[i + 1]:.10g},{int(c)}\n")
    summary = (
        f"mean={values.mean():.10g}\nstd={values.std():.10g}\n"
        f"min={values.min():.10g}\nmax={values.max():.10g}\n"
        f"count={values.size}\n"
    )
    (out / "mask_summary.txt").write_text(summary, encoding="utf-8")

    sample = args.sample
    np.savetxt(out / "sample_mask.csv", values[sample], delimiter=",", fmt="%.10g")
    np.savetxt(out / "sample_rational.csv", rational.values.data[sample], delimiter=",", fmt="%.10g")
    np.savetxt(
        out / "sample_masked_rational.csv",
        values[sample] * rational.values.data[sample],
        delimiter=",",
        fmt="%.10g",
    )
    print(summary.replace("\n", " ").strip())
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(p: _Parser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")


def _add_train_common(p: _Parser) -> None:
    p.add_argument("--bundle", required=True, help="directory with RDA1 bundle files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", default="multi-query", choices=adapter.VARIANTS, help="mask generator architecture")
    p.add_argument("--inner", type=int, default=None, help="attention width (default: embed dim)")
    p.add_argument("--layers", type=int, default=1, help="stacked mask layers")
    p.add_argument("--reg-norm", default="L2", choices=REG_NORMS, help="mask regularizer format")
    p.add_argument("--logit-scale", type=float, default=100.0, help="cosine logit multiplier")
    p.add_argument("--eval-every", type=int, default=1, help="epochs between history rows (0=final only)")
    p.add_argument("--weight-decay", type=float, default=0.0, help="decoupled weight decay")


def build_parser() -> _Parser:
    parser = _Parser(prog="rada", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="write a deterministic synthetic bundle")
    p.add_argument("--k", type=int, default=10, help="base class count")
    p.add_argument("--d", type=int, default=32, help="embedding width")
    p.add_argument("--shots", type=int, default=16, help="training samples per class")
    p.add_argument("--sigma", type=float, default=0.35, help="cluster spread")
    p.add_argument("--new-k", type=int, default=None, help="novel class count (default: k)")
    p.add_argument("--test-shots", type=int, default=None, help="test samples per class (default: 4x shots)")
    p.add_argument("--stream-size", type=int, default=0, help="also write a test-time stream")
    p.add_argument("--stream-sigma", type=float, default=None, help="stream spread (default: sigma)")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train-eft", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="train the mask generator, encoders frozen")
    _add_train_common(p)
    p.add_argument("--lr", type=float, default=0.0009, help="learning rate (reference protocol: 0.0009)")
    p.add_argument("--epochs", type=int, default=13, help="epochs (reference protocol: 13)")
    p.add_argument("--batch", type=int, default=1, help="batch size (reference protocol: 1)")
    p.add_argument("--alpha", type=float, default=1.5, help="mask regularizer weight (reference: 1.5)")
    p.add_argument("--optimizer", default="sgd-momentum", choices=trainer.OPTIMIZERS, help="parameter update rule")
    _add_common(p)
    p.set_defaults(func=cmd_train_eft)

    p = sub.add_parser("train-fft-lite", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="two-stage schedule with a learnable classifier")
    _add_train_common(p)
    p.add_argument("--stage1-lr", type=float, default=0.004, help="stage-1 learning rate (reference protocol)")
    p.add_argument("--stage2-lr", type=float, default=0.000004, help="stage-2 learning rate (reference protocol)")
    p.add_argument("--stage1-epochs", type=int, default=5, help="mask-only epochs (reference protocol)")
    p.add_argument("--stage2-epochs", type=int, default=5, help="joint classifier epochs (reference protocol)")
    p.add_argument("--batch", type=int, default=32, help="batch size")
    p.add_argument("--alpha", type=float, default=1.0, help="stage-1 regularizer weight")
    p.set_defaults(weight_decay=0.1)
    _add_common(p)
    p.set_defaults(func=cmd_train_fft_lite)

    p = sub.add_parser("ttt", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="offline per-sample test-time adaptation")
    p.add_argument("--bundle", required=True, help="bundle directory (classes + default stream)")
    p.add_argument("--stream", default=None,
                   help="stream file, .rda or hand-authored .tsv (default: ttt_stream.rda in bundle)")
    p.add_argument("--checkpoint", default=None, help="adapter checkpoint (default: fresh)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--views", type=int, default=63, help="augmented views per sample (reference: 63)")
    p.add_argument("--keep-frac", type=float, default=0.10, help="confident fraction kept (reference: 0.10)")
    p.add_argument("--keep-mode", default="ceil", choices=ttt.KEEP_MODES, help="rounding for the kept-row count")
    p.add_argument("--steps", type=int, default=3, help="update steps per sample (reference: 3)")
    p.add_argument("--lr", type=float, default=0.0008, help="learning rate (reference: 0.0008)")
    p.add_argument("--alpha", type=float, default=1.0, help="mask regularizer weight")
    p.add_argument("--reg-norm", default="L2", choices=REG_NORMS, help="mask regularizer format")
    p.add_argument("--entropy", default="marginal", choices=ENTROPY_MODES, help="entropy objective form")
    p.add_argument("--jitter", type=float, default=0.1, help="view noise scale")
    p.add_argument("--drop-frac", type=float, default=0.1, help="view coordinate dropout")
    p.add_argument("--logit-scale", type=float, default=100.0, help="cosine logit multiplier")
    _add_common(p)
    p.set_defaults(func=cmd_ttt)

    p = sub.add_parser("eval", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="base-to-new report for a checkpoint (or zero-shot)")
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--checkpoint", default=None, help="adapter checkpoint (zero-shot when omitted)")
    p.add_argument("--logit-scale", type=float, default=100.0, help="cosine logit multiplier")
    p.add_argument("--out", default=None, help="also write the report to this file")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="finite-difference check of a full objective")
    p.add_argument("--b", type=int, default=2, help="batch rows")
    p.add_argument("--k", type=int, default=3, help="classes")
    p.add_argument("--dim", type=int, default=4, help="embedding width")
    p.add_argument("--inner", type=int, default=4, help="attention width")
    p.add_argument("--layers", type=int, default=1, help="stacked mask layers")
    p.add_argument("--regime", default="eft", choices=sorted(_REGIME_FLAGS), help="objective to check")
    p.add_argument("--variant", default="multi-query", choices=adapter.VARIANTS, help="mask generator architecture")
    p.add_argument("--reg-norm", default="L2", choices=REG_NORMS, help="mask regularizer format")
    p.add_argument("--logit-scale", type=float, default=5.0,
                   help="moderate scale keeps the softmax away from saturation")
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--seed", type=int, default=12,
                   help="instance seed; the default keeps every gradient "
                        "coordinate well above the finite-difference noise floor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("mi-verify", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="brute-force check of the masking lemmas")
    p.add_argument("--ensembles", type=int, default=100, help="seeded ensembles to verify")
    p.add_argument("--k", type=int, default=2, help="classes per ensemble")
    p.add_argument("--d", type=int, default=2, help="embedding width")
    p.add_argument("--support", type=int, default=6, help="support points")
    p.add_argument("--bins", type=int, default=4096, help="quantizer bins")
    p.add_argument("--budget", type=int, default=1_000_000, help="mask-evaluation budget")
    _add_common(p)
    p.set_defaults(func=cmd_mi_verify)

    p = sub.add_parser("mask-stats", formatter_class=argparse.ArgumentDefaultsHelpFormatter, help="histogram and heatmap sources for a checkpoint")
    p.add_argument("--checkpoint", required=True, help="adapter checkpoint")
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--split", default="base-test", choices=("base-train", "base-test", "new-test"), help="split whose masks are summarized")
    p.add_argument("--bins", type=int, default=64, help="histogram bins")
    p.add_argument("--sample", type=int, default=0, help="sample index for the matrix exports")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_mask_stats)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _print_config(args)
        return args.func(args)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as err:
        print(f"io error: {err}", file=sys.stderr)
        return 2
    except RadaError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
