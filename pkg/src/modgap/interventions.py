"""Intervention artifacts: moment calibration parameters, redundancy-injected
prompts, and KV merge plans. Applying them to a live model is the extraction
client's job; this module only fits, transforms matrices, and plans."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

CALIBRATION_EPS = 1e-6
SCHEMA_VERSION = 1

log = logging.getLogger(__name__)


class InterventionError(Exception):
    pass


@dataclass
class CalibrationParams:
    site: str  # input_layer0 | output_lastlayer
    mu_s: np.ndarray
    sigma_s: np.ndarray
    mu_t: np.ndarray
    sigma_t: np.ndarray
    span_policy: str = "audio_span_only"
    epsilon: float = CALIBRATION_EPS

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "kind": "calibration",
                "site": self.site,
                "span_policy": self.span_policy,
                "epsilon": self.epsilon,
                "mu_s": self.mu_s.tolist(),
                "sigma_s": self.sigma_s.tolist(),
                "mu_t": self.mu_t.tolist(),
                "sigma_t": self.sigma_t.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "CalibrationParams":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION or doc.get("kind") != "calibration":
            raise InterventionError("not a supported calibration document")
        return cls(
            site=doc["site"],
            mu_s=np.asarray(doc["mu_s"], dtype=np.float64),
            sigma_s=np.asarray(doc["sigma_s"], dtype=np.float64),
            mu_t=np.asarray(doc["mu_t"], dtype=np.float64),
            sigma_t=np.asarray(doc["sigma_t"], dtype=np.float64),
            span_policy=doc["span_policy"],
            epsilon=doc["epsilon"],
        )


@dataclass
class RedundancySpec:
    r: int = 1

    def __post_init__(self):
        if self.r < 1:
            raise InterventionError("repetition factor must be >= 1")


@dataclass
class MergeConfig:
    key_cos_threshold: float = 0.90
    layer_start: int = 7
    layer_end: int = 15
    max_frac: float = 0.10

    def __post_init__(self):
        if self.layer_start >= self.layer_end:
            raise InterventionError("layer_start must be < layer_end")
        if not 0.0 < self.max_frac <= 1.0:
            raise InterventionError("max_frac must be in (0, 1]")


@dataclass
class MergePlan:
    config: MergeConfig
    layers: dict[int, list[list[int]]] = field(default_factory=dict)
    merged_fraction: dict[int, float] = field(default_factory=dict)
    span_length: int = 0
    key_stage: str = "unspecified"

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "kind": "merge_plan",
                "key_cos_threshold": self.config.key_cos_threshold,
                "layer_start": self.config.layer_start,
                "layer_end": self.config.layer_end,
                "max_frac": self.config.max_frac,
                "span_policy": "audio_span_only",
                "span_length": self.span_length,
                "key_stage": self.key_stage,
                "layers": [
                    {
                        "layer": l,
                        "groups": self.layers[l],
                        "merged_fraction": self.merged_fraction[l],
                    }
                    for l in sorted(self.layers)
                ],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MergePlan":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION or doc.get("kind") != "merge_plan":
            raise InterventionError("not a supported merge-plan document")
        cfg = MergeConfig(
            key_cos_threshold=doc["key_cos_threshold"],
            layer_start=doc["layer_start"],
            layer_end=doc["layer_end"],
            max_frac=doc["max_frac"],
        )
        plan = cls(config=cfg, span_length=doc["span_length"], key_stage=doc["key_stage"])
        for entry in doc["layers"]:
            plan.layers[entry["layer"]] = [list(g) for g in entry["groups"]]
            plan.merged_fraction[entry["layer"]] = entry["merged_fraction"]
        return plan


def fit_calibration(
    speech_span: np.ndarray, text_span: np.ndarray, site: str, scalar: bool = False
) -> CalibrationParams:
    """Per-dimension mean/std of both spans (scalar moments behind the flag)."""
    s = np.asarray(speech_span, dtype=np.float64)
    t = np.asarray(text_span, dtype=np.float64)
    if s.ndim != 2 or t.ndim != 2 or s.shape[1] != t.shape[1]:
        raise InterventionError("expected (N, D) spans with matching D")
    if s.shape[0] < 2 or t.shape[0] < 2:
        raise InterventionError("need at least 2 rows per span")
    if site not in ("input_layer0", "output_lastlayer"):
        raise InterventionError(f"unknown calibration site {site!r}")
    if scalar:
        d = s.shape[1]
        mu_s = np.full(d, s.mean())
        sigma_s = np.full(d, s.std())
        mu_t = np.full(d, t.mean())
        sigma_t = np.full(d, t.std())
    else:
        mu_s, sigma_s = s.mean(axis=0), s.std(axis=0)
        mu_t, sigma_t = t.mean(axis=0), t.std(axis=0)
    flagged = int((sigma_s < CALIBRATION_EPS).sum())
    if flagged:
        log.warning("%d zero-variance speech dimensions regularized by epsilon", flagged)
    return CalibrationParams(site=site, mu_s=mu_s, sigma_s=sigma_s, mu_t=mu_t, sigma_t=sigma_t)


def apply_calibration(x: np.ndarray, params: CalibrationParams) -> np.ndarray:
    """x' = (x - mu_s) / (sigma_s + eps) * sigma_t + mu_t, rowwise."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.mu_s.shape[0]:
        raise InterventionError("dimension mismatch between input and calibration params")
    return (x - params.mu_s) / (params.sigma_s + params.epsilon) * params.sigma_t + params.mu_t


def inject_redundancy(question: str, options_block: str, spec: RedundancySpec) -> str:
    """Repeat each whitespace-delimited question word r times in place; the
    options block is appended verbatim."""
    if spec.r == 1:
        repeated = question
    else:
        words = question.split()
        repeated = " ".join(w for word in words for w in [word] * spec.r)
    if options_block:
        return repeated + "\n" + options_block
    return repeated


def _cosine_matrix(keys: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(keys, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = keys / safe[:, None]
    unit[norms == 0.0] = 0.0
    return unit @ unit.T


def _plan_layer(keys: np.ndarray, cfg: MergeConfig) -> tuple[list[list[int]], float]:
    """Greedy complete-linkage agglomeration of one layer's span keys.

    Each union removes exactly one token; stops before merged_fraction would
    exceed max_frac. Pairs are taken in descending cosine order, ties broken
    by smaller first then second index.
    """
    t = keys.shape[0]
    cos = _cosine_matrix(np.asarray(keys, dtype=np.float64))
    pairs = [
        (float(cos[a, b]), a, b)
        for a in range(t)
        for b in range(a + 1, t)
        if cos[a, b] >= cfg.key_cos_threshold
    ]
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    group_of = list(range(t))
    members: dict[int, list[int]] = {i: [i] for i in range(t)}
    removed = 0
    budget = int(np.floor(cfg.max_frac * t + 1e-9))
    for _, a, b in pairs:
        if removed >= budget:
            break
        ga, gb = group_of[a], group_of[b]
        if ga == gb:
            continue
        # complete linkage: every cross pair must clear the threshold
        if any(
            cos[u, v] < cfg.key_cos_threshold for u in members[ga] for v in members[gb]
        ):
            continue
        merged = sorted(members[ga] + members[gb])
        for tok in merged:
            group_of[tok] = ga
        members[ga] = merged
        del members[gb]
        removed += 1
    groups = sorted((g for g in members.values() if len(g) >= 2), key=lambda g: g[0])
    return groups, removed / t if t else 0.0


def plan_merges(keys_per_layer: dict[int, np.ndarray], cfg: MergeConfig,
                key_stage: str = "unspecified") -> MergePlan:
    """Per-layer merge groups over the audio span for layers in
    [layer_start, layer_end). Token indices are 0-based span-relative."""
    span_len = 0
    plan = MergePlan(config=cfg, key_stage=key_stage)
    for layer in range(cfg.layer_start, cfg.layer_end):
        if layer not in keys_per_layer:
            raise InterventionError(f"missing key matrix for layer {layer}")
        keys = np.asarray(keys_per_layer[layer])
        if keys.ndim != 2:
            raise InterventionError(f"layer {layer}: expected (T_span, D_k) keys")
        span_len = keys.shape[0]
        groups, frac = _plan_layer(keys, cfg)
        plan.layers[layer] = groups
        plan.merged_fraction[layer] = frac
    plan.span_length = span_len
    return plan
