"""Logit-lens projection at the decision position and downstream decision
diagnostics: entropy, candidate accessibility, margins, answer parsing, and
the behavioral gap report."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .bundle import ProjectionHead


class LensError(Exception):
    pass


@dataclass
class DecisionTrace:
    logits: np.ndarray  # (L, V)
    candidate_logits: np.ndarray  # (L, C)
    candidate_token_ids: list[int]
    full_vocab: bool


@dataclass
class GapReport:
    acc_t2t: float
    acc_s2t: float
    delta: float
    unparseable_rate_t2t: float
    unparseable_rate_s2t: float
    num_scored: int


@dataclass
class CorrectnessGroups:
    both: list[str] = field(default_factory=list)
    only_t2t: list[str] = field(default_factory=list)
    only_s2t: list[str] = field(default_factory=list)
    neither: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, list[str]]:
        return {
            "both": self.both,
            "only_t2t": self.only_t2t,
            "only_s2t": self.only_s2t,
            "neither": self.neither,
        }


def apply_final_norm(h: np.ndarray, head: ProjectionHead) -> np.ndarray:
    """Model-final normalization applied to one hidden vector."""
    h = np.asarray(h, dtype=np.float64)
    eps = head.norm_epsilon
    if head.norm_kind == "rmsnorm":
        rms = np.sqrt(np.mean(h * h) + eps)
        return h / rms * head.norm_weight
    if head.norm_kind == "layernorm":
        mu = h.mean()
        var = h.var()
        out = (h - mu) / np.sqrt(var + eps) * head.norm_weight
        if head.norm_bias is not None:
            out = out + head.norm_bias
        return out
    return h  # identity


def project_decision(stack: np.ndarray, pos: int, head: ProjectionHead,
                     candidate_token_ids: list[int]) -> DecisionTrace:
    """Per-layer logits of the decision-position hidden state.

    Applies the model's final normalization at every layer (standard
    logit-lens convention) before unembedding.
    """
    if not 0 <= pos < stack.shape[1]:
        raise LensError(f"decision position {pos} out of range")
    if head.unembed_rows.shape[1] != stack.shape[2]:
        raise LensError("projection head dimension does not match hidden dim")
    row_index = {tok: i for i, tok in enumerate(head.row_token_ids)}
    try:
        cand_rows = [row_index[c] for c in candidate_token_ids]
    except KeyError as exc:
        raise LensError(f"candidate token id {exc} absent from projection head") from exc
    unembed = head.unembed_rows.astype(np.float64)
    logits = np.stack([unembed @ apply_final_norm(stack[l, pos], head)
                       for l in range(stack.shape[0])])
    return DecisionTrace(
        logits=logits,
        candidate_logits=logits[:, cand_rows],
        candidate_token_ids=list(candidate_token_ids),
        full_vocab=head.full_vocab,
    )


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def entropy_curve(trace: DecisionTrace, allow_partial_vocab: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer Shannon entropy of the projected vocabulary distribution.

    Returns (nats, normalized-by-ln-V). Refuses candidate-restricted heads
    unless allow_partial_vocab, since that is a different quantity.
    """
    if not trace.full_vocab and not allow_partial_vocab:
        raise LensError("projection head does not cover the full vocabulary")
    p = softmax(trace.logits, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    ent = -terms.sum(axis=1)
    return ent, ent / np.log(trace.logits.shape[1])


def accessibility_curve(trace: DecisionTrace, correct: int) -> np.ndarray:
    """Per-layer probability of the correct candidate under a softmax
    restricted to the candidate logits."""
    if trace.candidate_logits.shape[1] < 2:
        raise LensError("need at least 2 candidates")
    p = softmax(trace.candidate_logits, axis=1)
    return p[:, correct]


def margin_curve(trace: DecisionTrace, correct: int) -> np.ndarray:
    """Per-layer correct-candidate logit minus the strongest competitor's."""
    cand = trace.candidate_logits
    if cand.shape[1] < 2:
        raise LensError("need at least 2 candidates")
    others = np.delete(cand, correct, axis=1)
    return cand[:, correct] - others.max(axis=1)


_MARKER_RE = re.compile(
    r"\b(?i:answer|option|choice)\b(?i:\s+(?:is|was))?\s*[:\-=]?\s*\(?([A-Z])\)?(?![A-Za-z])"
)
_PAREN_RE = re.compile(r"\(([A-Z])\)")
_STANDALONE_RE = re.compile(r"(?<![A-Za-z])([A-Z])(?![A-Za-z])")


def parse_answer(text: str, num_options: int) -> int | None:
    """First standalone option letter in the text, or None if unparseable.

    A letter counts when it follows an answer marker ("answer", "option",
    "choice"), sits in parentheses, or stands alone. A bare "A" standing
    alone is only accepted when followed by punctuation or end-of-text, to
    avoid reading the English article as an option.
    """
    if not 2 <= num_options <= 26:
        raise LensError("num_options must be in [2, 26]")
    letters = {chr(ord("A") + i): i for i in range(num_options)}
    candidates: list[tuple[int, str]] = []
    for rex in (_MARKER_RE, _PAREN_RE):
        for m in rex.finditer(text):
            if m.group(1) in letters:
                candidates.append((m.start(1), m.group(1)))
    for m in _STANDALONE_RE.finditer(text):
        letter = m.group(1)
        if letter not in letters:
            continue
        if letter == "A":
            rest = text[m.end(1):]
            if rest and not re.match(r"[\s]*[.,:;!?)\]]|$", rest):
                continue
        candidates.append((m.start(1), letter))
    if not candidates:
        return None
    candidates.sort()
    return letters[candidates[0][1]]


def score_outcomes(
    samples: list[tuple[str, int, int | None, int | None]]
) -> tuple[GapReport, CorrectnessGroups]:
    """Behavioral gap and correctness partition.

    Each entry is (sample_id, correct_option, parsed_t2t, parsed_s2t) where a
    parsed answer of None is the unparseable outcome, counted as incorrect.
    """
    groups = CorrectnessGroups()
    n = len(samples)
    if n == 0:
        raise LensError("no scored samples")
    correct_t = correct_s = unp_t = unp_s = 0
    for sid, correct, ans_t, ans_s in samples:
        ok_t = ans_t == correct
        ok_s = ans_s == correct
        correct_t += ok_t
        correct_s += ok_s
        unp_t += ans_t is None
        unp_s += ans_s is None
        if ok_t and ok_s:
            groups.both.append(sid)
        elif ok_t:
            groups.only_t2t.append(sid)
        elif ok_s:
            groups.only_s2t.append(sid)
        else:
            groups.neither.append(sid)
    acc_t = correct_t / n
    acc_s = correct_s / n
    report = GapReport(
        acc_t2t=acc_t,
        acc_s2t=acc_s,
        delta=acc_t - acc_s,
        unparseable_rate_t2t=unp_t / n,
        unparseable_rate_s2t=unp_s / n,
        num_scored=n,
    )
    return report, groups


def group_margin_curves(
    curves: dict[str, dict[str, np.ndarray]], groups: CorrectnessGroups
) -> dict[str, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Pointwise mean and standard error of margin curves per group/modality.

    curves maps sample_id -> modality -> (L,) margin curve. Empty groups are
    omitted. Aggregation follows each group's stored id order.
    """
    out: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
    for name, ids in groups.as_dict().items():
        ids = [s for s in ids if s in curves]
        if not ids:
            continue
        out[name] = {}
        for modality in ("t2t", "s2t"):
            stack = np.stack([curves[s][modality] for s in ids])
            mean = stack.mean(axis=0)
            if stack.shape[0] > 1:
                stderr = stack.std(axis=0, ddof=1) / np.sqrt(stack.shape[0])
            else:
                stderr = np.zeros_like(mean)
            out[name][modality] = (mean, stderr)
    return out
