"""Command line entry point for trace extraction."""

from __future__ import annotations

import argparse
import sys

from .extract import CAPTURE_KINDS, ExtractionJob, extract_traces


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gapextract",
        description="Extract paired speech/text trace bundles from the toy LM.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    ex = sub.add_parser("extract", help="run the model over items and write a bundle")
    ex.add_argument("--out", required=True, help="bundle output directory")
    ex.add_argument("--items", type=int, default=2, help="number of QA items")
    ex.add_argument("--model-seed", type=int, default=0)
    ex.add_argument("--data-seed", type=int, default=0)
    ex.add_argument(
        "--modalities",
        default="t2t,s2t",
        help="comma-separated subset of t2t,s2t",
    )
    ex.add_argument(
        "--capture",
        default=",".join(CAPTURE_KINDS),
        help=f"comma-separated subset of {','.join(CAPTURE_KINDS)}",
    )
    ex.add_argument("--max-new-tokens", type=int, default=6)
    ex.add_argument("--calibration", default=None, help="calibration artifact JSON")
    ex.add_argument("--merge-plan", default=None, help="merge-plan artifact JSON")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExtractionJob(
            out_dir=args.out,
            num_items=args.items,
            modalities=tuple(m for m in args.modalities.split(",") if m),
            capture=tuple(c for c in args.capture.split(",") if c),
            model_seed=args.model_seed,
            data_seed=args.data_seed,
            max_new_tokens=args.max_new_tokens,
            calibration_path=args.calibration,
            merge_plan_path=args.merge_plan,
        )
        out = extract_traces(job)
    except Exception as exc:  # surface a one-line error, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
