"""Cross-layer CKA heatmaps and three-phase boundary extraction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .align import AlignConfig, build_similarity_matrix, dtw_align, question_slice
from .bundle import TraceBundle
from .similarity import UndefinedCkaError, linear_cka

log = logging.getLogger(__name__)

DEFAULT_BAND_LEVEL = 0.95


@dataclass
class RowSummary:
    peak: np.ndarray
    best_match: np.ndarray
    band_width: np.ndarray


@dataclass
class PhaseBoundaries:
    phase1_end: int
    phase3_start: int
    fit_sse: float
    plateau_len: int
    no_plateau: bool = False


def cross_layer_heatmap(
    bundle: TraceBundle, cfg: AlignConfig, sample_ids: list[str]
) -> np.ndarray:
    """Mean-over-samples CKA between every (speech layer, text layer) pair.

    Token alignment is computed once per sample at cfg.base_layer and reused
    for every layer pair. Samples whose CKA is undefined for a cell are
    excluded from that cell's mean with a logged count.
    """
    if not sample_ids:
        raise ValueError("need at least one sample id")
    sums: np.ndarray | None = None
    counts: np.ndarray | None = None
    undefined = 0
    for sid in sample_ids:
        meta_s = bundle.meta(sid, "s2t")
        meta_t = bundle.meta(sid, "t2t")
        hs = bundle.hidden(sid, "s2t")
        ht = bundle.hidden(sid, "t2t")
        s_slices = [question_slice(hs[l], meta_s.question_span, meta_s.valid_mask)
                    for l in range(hs.shape[0])]
        t_slices = [question_slice(ht[l], meta_t.question_span, meta_t.valid_mask)
                    for l in range(ht.shape[0])]
        m = build_similarity_matrix(s_slices[cfg.base_layer], t_slices[cfg.base_layer], cfg)
        path = dtw_align(m, cfg)
        ii = np.array([p[0] for p in path.pairs])
        jj = np.array([p[1] for p in path.pairs])
        l_s, l_t = hs.shape[0], ht.shape[0]
        if sums is None:
            sums = np.zeros((l_s, l_t))
            counts = np.zeros((l_s, l_t))
        for i in range(l_s):
            x = s_slices[i][ii]
            for j in range(l_t):
                try:
                    sums[i, j] += linear_cka(x, t_slices[j][jj])
                    counts[i, j] += 1
                except UndefinedCkaError:
                    undefined += 1
    if undefined:
        log.warning("CKA undefined for %d (sample, layer-pair) cells; excluded", undefined)
    if (counts == 0).any():
        raise ValueError("some heatmap cells have no defined CKA value for any sample")
    return sums / counts


def summarize_rows(heatmap: np.ndarray, band_level: float = DEFAULT_BAND_LEVEL) -> RowSummary:
    """Row-wise peak, earliest-argmax best-match layer, and near-peak band width."""
    if not 0.0 < band_level <= 1.0:
        raise ValueError("band_level must be in (0, 1]")
    h = np.asarray(heatmap, dtype=np.float64)
    peak = h.max(axis=1)
    best = h.argmax(axis=1)
    band = (h >= band_level * peak[:, None]).sum(axis=1)
    return RowSummary(peak=peak, best_match=best.astype(int), band_width=band.astype(float))


def two_segment_fit(peak: np.ndarray) -> tuple[int, float]:
    """Exhaustive two-segment least-squares change point of a peak curve.

    Segment 1 covers layers [0, b) and segment 2 covers [b, L); each segment
    gets its own least-squares line. Only breakpoints where segment 2's mean
    exceeds segment 1's qualify (the curve must rise across the break; a
    slope comparison is too fragile on short noisy segments); if no
    breakpoint qualifies the change point is 0 (flat or falling curve). SSE
    ties resolve to the latest breakpoint, which names the first layer of
    the rising segment.
    """
    y = np.asarray(peak, dtype=np.float64)
    n = y.size
    x = np.arange(n, dtype=np.float64)
    best_b, best_sse = 0, math.inf
    for b in range(2, n - 1):
        if y[b:].mean() <= y[:b].mean():
            continue
        _, r1 = _line_fit(x[:b], y[:b])
        _, r2 = _line_fit(x[b:], y[b:])
        sse = r1 + r2
        if sse <= best_sse + 1e-12:
            best_b, best_sse = b, min(sse, best_sse)
    return best_b, (best_sse if math.isfinite(best_sse) else 0.0)


def _line_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    coef, res, *_ = np.linalg.lstsq(np.column_stack([np.ones_like(x), x]), y, rcond=None)
    fitted = coef[0] + coef[1] * x
    return float(coef[1]), float(np.sum((y - fitted) ** 2))


def detect_phases(rs: RowSummary, plateau_slack: int = 0) -> PhaseBoundaries:
    """Phase boundaries from a row summary.

    phase1_end comes from the two-segment change-point fit of the peak curve.
    phase3_start is the first layer at or past 60% depth where the best-match
    layer repeats for 3 consecutive layers (optionally with +-plateau_slack
    index tolerance); if no plateau exists it is L_s, reported via no_plateau.
    """
    l_s = rs.peak.size
    if l_s < 6:
        raise ValueError("need at least 6 layers to detect phases")
    b1, sse = two_segment_fit(rs.peak)
    start = math.ceil(0.6 * l_s)
    b3 = l_s
    plateau_len = 0
    bm = rs.best_match
    for l in range(start, l_s - 2):
        window = bm[l : l + 3]
        if np.ptp(window) <= plateau_slack:
            b3 = l
            run = 3
            while l + run < l_s and abs(int(bm[l + run]) - int(bm[l])) <= plateau_slack:
                run += 1
            plateau_len = run
            break
    return PhaseBoundaries(
        phase1_end=b1,
        phase3_start=b3,
        fit_sse=sse,
        plateau_len=plateau_len,
        no_plateau=(b3 == l_s),
    )


def head_gap(rs: RowSummary, l_t: int) -> int:
    """Late-layer stagnation gap: distance from the last speech layer's
    best-match text layer to the text head."""
    return int(l_t - 1 - rs.best_match[-1])
