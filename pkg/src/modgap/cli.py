"""Command-line front end. Every analysis subcommand is a thin wrapper around
run_pipeline with a single-analysis selection; `report` runs them all."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .align import AlignConfig, path_stats
from .bundle import BundleError, read_bundle, write_bundle
from .fixtures import gen_fixture_phases, gen_fixture_redundant
from .interventions import MergeConfig, RedundancySpec, inject_redundancy
from .report import ALL_ANALYSES, RunConfig, run_pipeline, sweep_dtw, _aligned_path, _write_csv

ANALYSIS_COMMANDS = {
    "cka": ("cka",),
    "phases": ("phases",),
    "lens": ("lens",),
    "margins": ("margins",),
    "dispersion": ("dispersion",),
    "norms": ("norms",),
    "update-cosine": ("update_cosine",),
    "calibrate": ("calibrate",),
    "merge-plan": ("merge_plan",),
    "probe": ("probe",),
    "report": ALL_ANALYSES,
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bundle", required=True, help="trace bundle directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--base-layer", type=int, default=10)
    p.add_argument("--metric", choices=("cosine", "normalized_l2"), default="cosine")
    p.add_argument("--step-penalty", type=float, default=0.0)
    p.add_argument("--band-radius", type=int, default=None)
    p.add_argument("--band-level", type=float, default=0.95)
    p.add_argument("--sample-count", type=int, default=None)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--merge-threshold", type=float, default=0.90)
    p.add_argument("--merge-layer-start", type=int, default=7)
    p.add_argument("--merge-layer-end", type=int, default=15)
    p.add_argument("--merge-max-frac", type=float, default=0.10)
    p.add_argument(
        "--calibration-site", choices=("input_layer0", "output_lastlayer"), default="input_layer0"
    )
    p.add_argument("--probe-train-frac", type=float, default=0.5)
    p.add_argument("--probe-pool", choices=("mean", "last"), default="mean")


def _run_config(args, analyses) -> RunConfig:
    return RunConfig(
        bundle_dir=args.bundle,
        out_dir=args.out,
        analyses=tuple(analyses),
        align=AlignConfig(
            base_layer=args.base_layer,
            metric=args.metric,
            step_penalty=args.step_penalty,
            band_radius=args.band_radius,
        ),
        band_level=args.band_level,
        merge=MergeConfig(
            key_cos_threshold=args.merge_threshold,
            layer_start=args.merge_layer_start,
            layer_end=args.merge_layer_end,
            max_frac=args.merge_max_frac,
        ),
        sample_count=args.sample_count,
        sample_seed=args.sample_seed,
        calibration_site=args.calibration_site,
        probe_train_frac=args.probe_train_frac,
        probe_pool=args.probe_pool,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modgap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a bundle directory")
    p.add_argument("--bundle", required=True)

    p = sub.add_parser("fixtures", help="generate a synthetic fixture bundle")
    p.add_argument("--kind", choices=("redundant", "phases"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-pairs", type=int, default=1)
    p.add_argument("--k", type=int, default=4, help="redundant: repetition factor")
    p.add_argument("--text-len", type=int, default=24, help="redundant: question length")
    p.add_argument("--dim", type=int, default=16, help="redundant: hidden dim")
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--speech-layers", type=int, default=28, help="phases: L_s")
    p.add_argument("--text-layers", type=int, default=28, help="phases: L_t")
    p.add_argument("--b1", type=int, default=5)
    p.add_argument("--b3", type=int, default=20)

    p = sub.add_parser("align", help="per-sample alignment quality at the base layer")
    _add_run_flags(p)

    for name in ANALYSIS_COMMANDS:
        p = sub.add_parser(name, help=f"emit the {name} report artifacts")
        _add_run_flags(p)

    p = sub.add_parser("redundancy", help="print a redundancy-injected prompt")
    p.add_argument("--question", required=True)
    p.add_argument("--options", default="")
    p.add_argument("-r", type=int, default=2, help="repetition factor")

    p = sub.add_parser("sweep-dtw", help="alignment sensitivity grid")
    _add_run_flags(p)
    p.add_argument("--sweep-base-layers", type=int, nargs="+", default=[0, 5, 10, 20])
    p.add_argument("--sweep-metrics", nargs="+", default=["cosine", "normalized_l2"])
    p.add_argument("--sweep-bands", nargs="+", default=["none"])
    return parser


def _cmd_validate(args) -> int:
    try:
        bundle = read_bundle(args.bundle)
    except BundleError as exc:
        print(f"INVALID: {exc}", file=sys.stderr)
        return 1
    print(f"OK: {len(bundle.manifest.samples)} samples, {len(bundle.arrays)} arrays")
    return 0


def _cmd_fixtures(args) -> int:
    if args.kind == "redundant":
        bundle = gen_fixture_redundant(
            args.k, args.text_len, args.dim, args.noise_sigma, args.seed, num_pairs=args.num_pairs
        )
    else:
        bundle = gen_fixture_phases(
            args.speech_layers,
            args.text_layers,
            args.b1,
            args.b3,
            args.seed,
            num_pairs=args.num_pairs,
        )
    write_bundle(bundle.manifest, bundle.arrays, args.out)
    print(f"wrote fixture bundle to {args.out}")
    return 0


def _cmd_align(args) -> int:
    cfg = _run_config(args, ("cka",))
    bundle = read_bundle(cfg.bundle_dir)
    rows = []
    for sid in bundle.paired_ids():
        _, _, path = _aligned_path(bundle, sid, cfg.align)
        st = path_stats(path)
        rows.append([sid, st.r2, st.stall_fraction, path.cumulative_score])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "align_stats.csv",
        cfg.config_hash(),
        ["sample_id", "r2", "stall_fraction", "cumulative_score"],
        rows,
    )
    return 0


def _cmd_analysis(args, analyses) -> int:
    result = run_pipeline(_run_config(args, analyses))
    for name, status in result.statuses.items():
        print(f"{name}: {status}")
    return 0 if result.ok else 1


def _cmd_redundancy(args) -> int:
    print(inject_redundancy(args.question, args.options, RedundancySpec(r=args.r)))
    return 0


def _cmd_sweep(args) -> int:
    cfg = _run_config(args, ("cka",))
    bundle = read_bundle(cfg.bundle_dir)
    bands = [None if b == "none" else int(b) for b in args.sweep_bands]
    rows = sweep_dtw(
        bundle,
        bundle.paired_ids(),
        base_layers=args.sweep_base_layers,
        metrics=args.sweep_metrics,
        bands=bands,
        step_penalty=args.step_penalty,
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "sweep_dtw.csv",
        cfg.config_hash(),
        ["base_layer", "metric", "band_radius", "r2", "stall_fraction", "error"],
        [
            [r["base_layer"], r["metric"], r["band_radius"], r["r2"], r["stall_fraction"], r["error"]]
            for r in rows
        ],
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "fixtures":
            return _cmd_fixtures(args)
        if args.command == "align":
            return _cmd_align(args)
        if args.command == "redundancy":
            return _cmd_redundancy(args)
        if args.command == "sweep-dtw":
            return _cmd_sweep(args)
        return _cmd_analysis(args, ANALYSIS_COMMANDS[args.command])
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
