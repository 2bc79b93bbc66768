"""Pipeline driver: runs the requested analyses over one bundle and emits a
deterministic report tree (CSV/JSON tables plus an SVG heatmap).

Determinism contract: identical (bundle, config) produce byte-identical
files. All floats are printed with %.9g, JSON keys are sorted, and every
file carries the config hash and format version in its header.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import dispersion as disp
from . import lens
from .align import AlignConfig, build_similarity_matrix, dtw_align, path_stats, question_slice
from .bundle import TraceBundle, read_bundle
from .crosslayer import (
    DEFAULT_BAND_LEVEL,
    cross_layer_heatmap,
    detect_phases,
    head_gap,
    summarize_rows,
)
from .interventions import MergeConfig, fit_calibration, plan_merges
from .probes import ProbeDataset, eval_probe, mean_pooled_features, train_linear_probe
from .similarity import ln_norm_curves, token_norm_curve, update_cosine_matrix

FORMAT_VERSION = 1

ALL_ANALYSES = (
    "cka",
    "phases",
    "lens",
    "margins",
    "dispersion",
    "norms",
    "update_cosine",
    "calibrate",
    "merge_plan",
    "probe",
)


class ReportError(Exception):
    pass


@dataclass
class RunConfig:
    bundle_dir: str
    out_dir: str
    analyses: tuple[str, ...] = ALL_ANALYSES
    align: AlignConfig = field(default_factory=AlignConfig)
    band_level: float = DEFAULT_BAND_LEVEL
    merge: MergeConfig = field(default_factory=MergeConfig)
    sample_count: int | None = None
    sample_seed: int = 0
    calibration_site: str = "input_layer0"
    probe_train_frac: float = 0.5
    probe_pool: str = "mean"

    def __post_init__(self):
        unknown = [a for a in self.analyses if a not in ALL_ANALYSES]
        if unknown:
            raise ReportError(f"unknown analyses: {unknown}")
        if not 0.0 < self.probe_train_frac < 1.0:
            raise ReportError("probe_train_frac must be in (0, 1)")

    def config_hash(self) -> str:
        # paths excluded: moving a bundle or output dir must not change hashes
        doc = asdict(self)
        doc.pop("bundle_dir")
        doc.pop("out_dir")
        doc["analyses"] = sorted(self.analyses)
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ReportResult:
    out_dir: str
    statuses: dict[str, str]  # analysis -> "ok" or the error message

    @property
    def ok(self) -> bool:
        return all(v == "ok" for v in self.statuses.values())


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "%.9g" % float(x)
    return str(x)


def _write_csv(path: Path, cfg_hash: str, columns: list[str], rows: list[list]) -> None:
    lines = [f"# config_hash={cfg_hash} format_version={FORMAT_VERSION}"]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(path: Path, cfg_hash: str, doc: dict) -> None:
    doc = dict(doc)
    doc["config_hash"] = cfg_hash
    doc["format_version"] = FORMAT_VERSION
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _select_samples(bundle: TraceBundle, cfg: RunConfig) -> list[str]:
    ids = bundle.paired_ids()
    if not ids:
        raise ReportError("bundle contains no samples with both modalities")
    if cfg.sample_count is not None and cfg.sample_count < len(ids):
        rng = np.random.default_rng(cfg.sample_seed)
        picked = rng.choice(len(ids), size=cfg.sample_count, replace=False)
        ids = [ids[i] for i in sorted(picked)]
    return ids


def _question_stacks(bundle: TraceBundle, sid: str, modality: str) -> np.ndarray:
    meta = bundle.meta(sid, modality)
    stack = bundle.hidden(sid, modality)
    return np.stack(
        [question_slice(stack[l], meta.question_span, meta.valid_mask) for l in range(stack.shape[0])]
    )


def _aligned_path(bundle: TraceBundle, sid: str, cfg: AlignConfig):
    s = _question_stacks(bundle, sid, "s2t")
    t = _question_stacks(bundle, sid, "t2t")
    m = build_similarity_matrix(s[cfg.base_layer], t[cfg.base_layer], cfg)
    return s, t, dtw_align(m, cfg)


def _heatmap(bundle: TraceBundle, cfg: RunConfig, ids: list[str], cache: dict) -> np.ndarray:
    if "heatmap" not in cache:
        cache["heatmap"] = cross_layer_heatmap(bundle, cfg.align, ids)
    return cache["heatmap"]


def _emit_cka(bundle, cfg, ids, out, h, cache):
    hm = _heatmap(bundle, cfg, ids, cache)
    rows = [
        [i, j, hm[i, j]] for i in range(hm.shape[0]) for j in range(hm.shape[1])
    ]
    _write_csv(out / "cka_heatmap.csv", h, ["speech_layer", "text_layer", "cka"], rows)
    (out / "cka_heatmap.svg").write_text(
        emit_heatmap_svg(
            hm,
            [f"s{i}" for i in range(hm.shape[0])],
            [f"t{j}" for j in range(hm.shape[1])],
        ),
        encoding="utf-8",
    )
    rs = summarize_rows(hm, cfg.band_level)
    _write_csv(
        out / "row_summary.csv",
        h,
        ["speech_layer", "peak", "best_match", "band_width"],
        [[i, rs.peak[i], int(rs.best_match[i]), rs.band_width[i]] for i in range(hm.shape[0])],
    )


def _emit_phases(bundle, cfg, ids, out, h, cache):
    hm = _heatmap(bundle, cfg, ids, cache)
    rs = summarize_rows(hm, cfg.band_level)
    pb = detect_phases(rs)
    _write_json(
        out / "phase_boundaries.json",
        h,
        {
            "phase1_end": pb.phase1_end,
            "phase3_start": pb.phase3_start,
            "fit_sse": pb.fit_sse,
            "plateau_len": pb.plateau_len,
            "no_plateau": pb.no_plateau,
            "head_gap": head_gap(rs, hm.shape[1]),
        },
    )


def _emit_lens(bundle, cfg, ids, out, h, cache):
    head = bundle.head()
    ent_rows, acc_rows = [], []
    for sid in ids:
        for modality in ("t2t", "s2t"):
            meta = bundle.meta(sid, modality)
            trace = lens.project_decision(
                bundle.hidden(sid, modality),
                meta.decision_position,
                head,
                meta.candidate_token_ids,
            )
            nats, norm = lens.entropy_curve(trace, allow_partial_vocab=not head.full_vocab)
            acc = lens.accessibility_curve(trace, meta.correct_option)
            for l in range(nats.size):
                ent_rows.append([sid, modality, l, nats[l], norm[l]])
                acc_rows.append([sid, modality, l, acc[l]])
    _write_csv(
        out / "entropy.csv",
        h,
        ["sample_id", "modality", "layer", "entropy_nats", "entropy_norm"],
        ent_rows,
    )
    _write_csv(out / "accessibility.csv", h, ["sample_id", "modality", "layer", "p_correct"], acc_rows)


def _emit_margins(bundle, cfg, ids, out, h, cache):
    head = bundle.head()
    scored = []
    curves: dict[str, dict[str, np.ndarray]] = {}
    for sid in ids:
        parsed = {}
        curves[sid] = {}
        correct = bundle.meta(sid, "t2t").correct_option
        for modality in ("t2t", "s2t"):
            meta = bundle.meta(sid, modality)
            parsed[modality] = lens.parse_answer(
                meta.generated_text, len(meta.candidate_token_ids)
            )
            trace = lens.project_decision(
                bundle.hidden(sid, modality),
                meta.decision_position,
                head,
                meta.candidate_token_ids,
            )
            curves[sid][modality] = lens.margin_curve(trace, meta.correct_option)
        scored.append((sid, correct, parsed["t2t"], parsed["s2t"]))
    report, groups = lens.score_outcomes(scored)
    _write_json(
        out / "gap_report.json",
        h,
        {
            "acc_t2t": report.acc_t2t,
            "acc_s2t": report.acc_s2t,
            "delta": report.delta,
            "unparseable_rate_t2t": report.unparseable_rate_t2t,
            "unparseable_rate_s2t": report.unparseable_rate_s2t,
            "num_scored": report.num_scored,
            "groups": groups.as_dict(),
        },
    )
    rows = []
    for group, per_mod in lens.group_margin_curves(curves, groups).items():
        for modality in ("t2t", "s2t"):
            mean, stderr = per_mod[modality]
            for l in range(mean.size):
                rows.append([group, modality, l, mean[l], stderr[l]])
    _write_csv(
        out / "margins_by_group.csv",
        h,
        ["group", "modality", "layer", "margin_mean", "margin_stderr"],
        rows,
    )


def _emit_dispersion(bundle, cfg, ids, out, h, cache):
    # head/layer chosen on the entropy-gap matrix averaged over samples
    gap_sum = None
    per_sample = []
    for sid in ids:
        attn_s = bundle.attention(sid, "s2t")
        attn_t = bundle.attention(sid, "t2t")
        mask_s = np.asarray(bundle.meta(sid, "s2t").valid_mask, dtype=bool)
        mask_t = np.asarray(bundle.meta(sid, "t2t").valid_mask, dtype=bool)
        n_layers, n_heads = attn_t.shape[:2]
        gaps = np.empty((n_layers, n_heads))
        for l in range(n_layers):
            for hd in range(n_heads):
                gaps[l, hd] = disp.normalized_entropy(
                    attn_s[l, hd, mask_s]
                ) - disp.normalized_entropy(attn_t[l, hd, mask_t])
        gap_sum = gaps if gap_sum is None else gap_sum + gaps
        per_sample.append((attn_s, attn_t, mask_s, mask_t))
    mean_gaps = gap_sum / len(ids)
    head = int(mean_gaps.mean(axis=0).argmax())
    layer = int(mean_gaps[:, head].argmax())
    records = {"t2t": [], "s2t": []}
    for attn_s, attn_t, mask_s, mask_t in per_sample:
        records["s2t"].append(disp.dispersion_metrics(attn_s[layer, head, mask_s]))
        records["t2t"].append(disp.dispersion_metrics(attn_t[layer, head, mask_t]))
    table = disp.aggregate_median(records)
    fields = disp.REAL_FIELDS + disp.INT_FIELDS
    rows = [[name, table["t2t"][name], table["s2t"][name], table["delta"][name]] for name in fields]
    _write_csv(
        out / "dispersion_table.csv",
        h,
        [f"metric(head={head} layer={layer})", "t2t", "s2t", "delta"],
        rows,
    )


def _emit_norms(bundle, cfg, ids, out, h, cache):
    rows = []
    for sid in ids:
        for modality in ("t2t", "s2t"):
            meta = bundle.meta(sid, modality)
            curve = token_norm_curve(
                bundle.hidden(sid, modality), meta.question_span, meta.valid_mask
            )
            pre_name = f"norms/{sid}/{modality}/preln"
            post_name = f"norms/{sid}/{modality}/postln"
            if bundle.has_array(pre_name) and bundle.has_array(post_name):
                pre, post = ln_norm_curves(
                    bundle.arrays[pre_name],
                    bundle.arrays[post_name],
                    meta.question_span,
                    meta.valid_mask,
                )
            else:
                pre = post = np.full(curve.size, np.nan)
            for l in range(curve.size):
                rows.append([sid, modality, l, curve[l], pre[l], post[l]])
    _write_csv(
        out / "norms.csv",
        h,
        ["sample_id", "modality", "layer", "hidden_norm", "preln_norm", "postln_norm"],
        rows,
    )


def _emit_update_cosine(bundle, cfg, ids, out, h, cache):
    acc = None
    for sid in ids:
        s, t, path = _aligned_path(bundle, sid, cfg.align)
        m = update_cosine_matrix(s, t, path)
        acc = m if acc is None else acc + m
    mean = acc / len(ids)
    rows = [
        [a, b, mean[a, b]] for a in range(mean.shape[0]) for b in range(mean.shape[1])
    ]
    _write_csv(out / "update_cosine.csv", h, ["s_update", "t_update", "cosine"], rows)


def _emit_calibration(bundle, cfg, ids, out, h, cache):
    layer = 0 if cfg.calibration_site == "input_layer0" else -1
    s_rows, t_rows = [], []
    for sid in ids:
        s = _question_stacks(bundle, sid, "s2t")
        t = _question_stacks(bundle, sid, "t2t")
        s_rows.append(s[layer])
        t_rows.append(t[layer])
    params = fit_calibration(
        np.concatenate(s_rows), np.concatenate(t_rows), cfg.calibration_site
    )
    _write_json(out / "calibration.json", h, json.loads(params.to_json()))


def _emit_merge_plan(bundle, cfg, ids, out, h, cache):
    # merge plans are per prompt; the report plans for the first sample
    sid = ids[0]
    meta = bundle.meta(sid, "s2t")
    keys = bundle.keys(sid, "s2t")
    start, end = meta.question_span
    mask = np.asarray(meta.valid_mask, dtype=bool)[start:end]
    keys_per_layer = {
        l: keys[l, start:end][mask] for l in range(cfg.merge.layer_start, cfg.merge.layer_end)
    }
    plan = plan_merges(keys_per_layer, cfg.merge, key_stage="stored")
    _write_json(out / "merge_plan.json", h, json.loads(plan.to_json()))


def _emit_probe(bundle, cfg, ids, out, h, cache):
    rows = []
    rng = np.random.default_rng(cfg.sample_seed)
    for modality in ("t2t", "s2t"):
        labels = []
        stacks = []
        for sid in ids:
            meta = bundle.meta(sid, modality)
            if meta.subject_label is None:
                raise ReportError(f"sample {sid} has no subject_label; cannot probe")
            labels.append(meta.subject_label)
            stacks.append((bundle.hidden(sid, modality), meta))
        labels = np.asarray(labels, dtype=int)
        n = len(ids)
        perm = rng.permutation(n)
        n_train = max(int(round(cfg.probe_train_frac * n)), 1)
        train_idx, test_idx = perm[:n_train], perm[n_train:]
        if test_idx.size == 0:
            raise ReportError("probe test split is empty; need more samples")
        n_layers = min(stack.shape[0] for stack, _ in stacks)
        for layer in range(n_layers):
            feats = np.stack(
                [
                    mean_pooled_features(
                        stack, meta.question_span, meta.valid_mask, layer, cfg.probe_pool
                    )
                    for stack, meta in stacks
                ]
            )
            ds = ProbeDataset(feats, labels, train_idx, test_idx)
            w, b, converged = train_linear_probe(ds)
            rows.append([modality, layer, eval_probe(w, b, ds), int(converged)])
    _write_csv(out / "probe_accuracy.csv", h, ["modality", "layer", "accuracy", "converged"], rows)


_EMITTERS = {
    "cka": _emit_cka,
    "phases": _emit_phases,
    "lens": _emit_lens,
    "margins": _emit_margins,
    "dispersion": _emit_dispersion,
    "norms": _emit_norms,
    "update_cosine": _emit_update_cosine,
    "calibrate": _emit_calibration,
    "merge_plan": _emit_merge_plan,
    "probe": _emit_probe,
}


def run_pipeline(cfg: RunConfig) -> ReportResult:
    """Run the requested analyses and write the report tree.

    The bundle is read and validated before any file is written, so a corrupt
    bundle never leaves partial output. Analysis-level failures are isolated:
    the failing analysis is recorded and the rest still complete.
    """
    bundle = read_bundle(cfg.bundle_dir)
    ids = _select_samples(bundle, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    cache: dict = {}
    statuses: dict[str, str] = {}
    for name in cfg.analyses:
        try:
            _EMITTERS[name](bundle, cfg, ids, out, h, cache)
            statuses[name] = "ok"
        except Exception as exc:  # per-analysis isolation
            statuses[name] = f"error: {exc}"
    return ReportResult(out_dir=str(out), statuses=statuses)


def sweep_dtw(
    bundle: TraceBundle,
    ids: list[str],
    base_layers: list[int] = (0, 5, 10, 20),
    metrics: list[str] = ("cosine", "normalized_l2"),
    bands: list[int | None] = (None,),
    step_penalty: float = 0.0,
) -> list[dict]:
    """Alignment-quality grid: one row per (base_layer, metric, band) with
    mean r2 and stall_fraction over samples. Per-cell failures are recorded
    and the sweep continues."""
    rows = []
    for base in base_layers:
        for metric in metrics:
            for band in bands:
                row = {"base_layer": base, "metric": metric, "band_radius": band}
                try:
                    cfg = AlignConfig(
                        base_layer=base, metric=metric, band_radius=band, step_penalty=step_penalty
                    )
                    r2s, stalls = [], []
                    for sid in ids:
                        _, _, path = _aligned_path(bundle, sid, cfg)
                        st = path_stats(path)
                        r2s.append(st.r2)
                        stalls.append(st.stall_fraction)
                    row["r2"] = float(np.mean(r2s))
                    row["stall_fraction"] = float(np.mean(stalls))
                    row["error"] = ""
                except Exception as exc:
                    row["r2"] = math.nan
                    row["stall_fraction"] = math.nan
                    row["error"] = str(exc)
                rows.append(row)
    return rows


# viridis endpoints; a two-color lerp keeps the SVG free of colormap deps
_COLOR_LO = (68, 1, 84)
_COLOR_HI = (253, 231, 37)
_CELL = 12


def emit_heatmap_svg(matrix: np.ndarray, row_labels: list[str], col_labels: list[str]) -> str:
    """Deterministic SVG heatmap; cell color is a linear map of the value
    over [0, 1] between two fixed endpoint colors."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or not np.isfinite(m).all():
        raise ReportError("heatmap matrix must be 2-D and finite")
    if len(row_labels) != m.shape[0] or len(col_labels) != m.shape[1]:
        raise ReportError("axis label counts must match the matrix shape")
    margin = 40
    width = margin + m.shape[1] * _CELL
    height = margin + m.shape[0] * _CELL
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            v = min(max(float(m[i, j]), 0.0), 1.0)
            rgb = tuple(
                int(round(lo + v * (hi - lo))) for lo, hi in zip(_COLOR_LO, _COLOR_HI)
            )
            x = margin + j * _CELL
            y = margin + i * _CELL
            parts.append(
                f'<rect x="{x}" y="{y}" width="{_CELL}" height="{_CELL}" '
                f'fill="rgb({rgb[0]},{rgb[1]},{rgb[2]})">'
                f"<title>{row_labels[i]},{col_labels[j]}={v:.4f}</title></rect>"
            )
    for j, lab in enumerate(col_labels):
        parts.append(
            f'<text x="{margin + j * _CELL + 2}" y="{margin - 4}" font-size="6">{lab}</text>'
        )
    for i, lab in enumerate(row_labels):
        parts.append(
            f'<text x="2" y="{margin + i * _CELL + 9}" font-size="6">{lab}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
