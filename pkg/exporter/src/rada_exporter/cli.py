"""rada-export: encode image folders into RDA1 files."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .encoders import make_encoder
from .export import DEFAULT_TEMPLATE, ExportJob, export, export_bundle
from .format import ExportError, SPLIT_TAGS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rada-export", description=__doc__)
    parser.add_argument("--backend", default="swatch-projection",
                        choices=("swatch-projection", "clip"))
    parser.add_argument("--dim", type=int, default=64,
                        help="embedding width (swatch-projection backend)")
    parser.add_argument("--model", default=None, help="checkpoint name/path (clip backend)")
    parser.add_argument("--template", default=DEFAULT_TEMPLATE)
    parser.add_argument("--out", required=True)

    single = parser.add_argument_group("single split")
    single.add_argument("--data", default=None, help="directory with one folder per class")
    single.add_argument("--split", default="base-test", choices=SPLIT_TAGS)
    single.add_argument("--views", type=int, default=0,
                        help="also write per-image augmented view batches")
    single.add_argument("--view-seed", type=int, default=0)

    bundle = parser.add_argument_group("full bundle")
    bundle.add_argument("--train-dir", default=None)
    bundle.add_argument("--test-dir", default=None)
    bundle.add_argument("--new-dir", default=None)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        encoder = make_encoder(args.backend, dim=args.dim, model=args.model)
        bundle_args = (args.train_dir, args.test_dir, args.new_dir)
        if any(bundle_args):
            if not all(bundle_args):
                parser.error("--train-dir, --test-dir, and --new-dir go together")
            written = export_bundle(
                Path(args.train_dir), Path(args.test_dir), Path(args.new_dir),
                Path(args.out), encoder, template=args.template,
            )
        elif args.data:
            job = ExportJob(
                dataset=Path(args.data), output=Path(args.out), template=args.template,
                split=args.split, view_count=args.views, view_seed=args.view_seed,
            )
            written = export(job, encoder)
        else:
            parser.error("pass either --data or the three bundle directories")
        for key, path in written.items():
            print(f"wrote {key}: {path}")
        return 0
    except ExportError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
