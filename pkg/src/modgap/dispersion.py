"""Decision-token attention dispersion metrics and head/layer selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DispersionError(Exception):
    pass


@dataclass
class DispersionRecord:
    entropy_norm: float
    p_max: float
    top10_mass: float
    cov90_fraction: float
    cov90_count: int


REAL_FIELDS = ("entropy_norm", "p_max", "top10_mass", "cov90_fraction")
INT_FIELDS = ("cov90_count",)


def _renormalize(attn_row: np.ndarray) -> np.ndarray:
    p = np.asarray(attn_row, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise DispersionError("expected a non-empty 1-D attention row")
    if (p < -1e-12).any():
        raise DispersionError("attention row has negative entries")
    # summing in sorted order keeps renormalization permutation-invariant
    total = np.sort(p).sum()
    if total <= 0.0:
        raise DispersionError("attention row sums to zero; cannot renormalize")
    return np.clip(p, 0.0, None) / total


def normalized_entropy(p: np.ndarray) -> float:
    p = _renormalize(p)
    if p.size == 1:
        return 0.0
    # summing in sorted order makes the value exactly permutation-invariant
    p = np.sort(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return float(-terms.sum() / np.log(p.size))


def dispersion_metrics(attn_row: np.ndarray) -> DispersionRecord:
    """Spread statistics of one decision-token attention row over valid
    positions: normalized entropy, peak mass, top-10 mass, and the minimal
    token count/fraction covering 90% cumulative mass."""
    p = _renormalize(attn_row)
    t = p.size
    sorted_desc = np.sort(p)[::-1]
    cum = np.cumsum(sorted_desc)
    cov_count = int(np.searchsorted(cum, 0.90 - 1e-12) + 1)
    cov_count = min(cov_count, t)
    return DispersionRecord(
        entropy_norm=normalized_entropy(p),
        p_max=float(sorted_desc[0]),
        top10_mass=float(sorted_desc[: min(10, t)].sum()),
        cov90_fraction=cov_count / t,
        cov90_count=cov_count,
    )


def select_head_layer(
    s2t_attn: np.ndarray,
    t2t_attn: np.ndarray,
    s2t_mask=None,
    t2t_mask=None,
    stage1: str = "mean",
) -> tuple[int, int]:
    """Head/layer pair maximizing the S2T-minus-T2T normalized-entropy gap.

    Stage 1 picks the head with the largest gap aggregated over layers (mean
    by default, max behind the flag); stage 2 picks the layer where that
    head's gap is largest. Earliest index wins ties. Sequence lengths may
    differ across modalities; the entropy is length-normalized.
    """
    if s2t_attn.shape[:2] != t2t_attn.shape[:2]:
        raise DispersionError("modalities must share layer and head counts")
    if stage1 not in ("mean", "max"):
        raise DispersionError("stage1 must be 'mean' or 'max'")
    n_layers, n_heads = s2t_attn.shape[:2]
    s_mask = np.ones(s2t_attn.shape[2], bool) if s2t_mask is None else np.asarray(s2t_mask, bool)
    t_mask = np.ones(t2t_attn.shape[2], bool) if t2t_mask is None else np.asarray(t2t_mask, bool)
    gaps = np.empty((n_layers, n_heads))
    for l in range(n_layers):
        for h in range(n_heads):
            gaps[l, h] = normalized_entropy(s2t_attn[l, h, s_mask]) - normalized_entropy(
                t2t_attn[l, h, t_mask]
            )
    agg = gaps.mean(axis=0) if stage1 == "mean" else gaps.max(axis=0)
    head = int(agg.argmax())
    layer = int(gaps[:, head].argmax())
    return head, layer


def aggregate_median(records: dict[str, list[DispersionRecord]]) -> dict[str, dict[str, float]]:
    """Fieldwise per-modality medians plus an S2T-minus-T2T delta column.

    Real fields use the midpoint convention for even counts; the integer
    cov90_count uses the lower median so the summary stays a token count.
    """
    for modality in ("t2t", "s2t"):
        if not records.get(modality):
            raise DispersionError(f"no dispersion records for {modality}")
    table: dict[str, dict[str, float]] = {m: {} for m in ("t2t", "s2t")}
    for modality in ("t2t", "s2t"):
        recs = records[modality]
        for name in REAL_FIELDS:
            table[modality][name] = float(np.median([getattr(r, name) for r in recs]))
        for name in INT_FIELDS:
            vals = sorted(getattr(r, name) for r in recs)
            table[modality][name] = float(vals[(len(vals) - 1) // 2])
    table["delta"] = {
        name: table["s2t"][name] - table["t2t"][name] for name in REAL_FIELDS + INT_FIELDS
    }
    return table


def rank_cdf(attn_row: np.ndarray) -> np.ndarray:
    """Cumulative attention mass by descending rank, for rank-CDF export."""
    p = _renormalize(attn_row)
    return np.cumsum(np.sort(p)[::-1])
