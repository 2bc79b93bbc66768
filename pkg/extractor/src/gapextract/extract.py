"""Trace extraction: runs the toy model over paired prompts, captures the
requested tensors, and writes a trace-bundle directory (manifest.json plus
one raw little-endian float32 file per array)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .artifacts import CalibrationArtifact, MergePlanArtifact, load_calibration, load_merge_plan
from .dataset import FRAMES_PER_WORD, Item, make_items, speech_prompt, text_prompt_ids
from .model import RuntimeInterventions, ToyLM
from .vocab import OPTION_IDS, VOCAB_SIZE, WORD_TO_ID, decode

FORMAT_VERSION = 1
CAPTURE_KINDS = ("hiddens", "attentions", "norms", "keys")


class ExtractionError(Exception):
    pass


@dataclass
class ExtractionJob:
    out_dir: str
    num_items: int = 2
    items: list[Item] | None = None
    modalities: tuple[str, ...] = ("t2t", "s2t")
    capture: tuple[str, ...] = CAPTURE_KINDS
    model_seed: int = 0
    data_seed: int = 0
    max_new_tokens: int = 6
    calibration_path: str | None = None
    merge_plan_path: str | None = None
    dataset_name: str = "toy-qa"

    def __post_init__(self):
        if not self.capture:
            raise ExtractionError("capture set must be non-empty")
        unknown = [c for c in self.capture if c not in CAPTURE_KINDS]
        if unknown:
            raise ExtractionError(f"unknown capture kinds: {unknown}")
        bad = [m for m in self.modalities if m not in ("t2t", "s2t")]
        if bad:
            raise ExtractionError(f"unknown modalities: {bad}")


def _interventions_for(
    modality: str,
    span: tuple[int, int],
    n_layers: int,
    calibration: CalibrationArtifact | None,
    plan: MergePlanArtifact | None,
) -> RuntimeInterventions:
    iv = RuntimeInterventions()
    if modality != "s2t":
        return iv  # audio-span interventions leave the text baseline alone
    if calibration is not None:
        scale, shift = calibration.affine()
        if calibration.site == "input_layer0":
            iv.input_affine = (scale, shift)
            iv.input_span = span
        else:
            iv.output_affine = (scale, shift)
            iv.output_span = span
    if plan is not None:
        start, end = span
        if plan.span_length and plan.span_length != end - start:
            raise ExtractionError(
                f"merge plan was built for a span of {plan.span_length} tokens, "
                f"prompt has {end - start}"
            )
        for layer, groups in plan.layers.items():
            if not 0 <= layer < n_layers:
                raise ExtractionError(f"merge plan layer {layer} outside the model")
            absolute = [[start + i for i in g] for g in groups if len(g) >= 2]
            if absolute:
                iv.merge_groups[layer] = absolute
    return iv


def extract_traces(job: ExtractionJob) -> Path:
    """Run the job and return the bundle directory path."""
    model = ToyLM(seed=job.model_seed)
    items = job.items if job.items is not None else make_items(job.num_items, job.data_seed)
    calibration = load_calibration(job.calibration_path) if job.calibration_path else None
    plan = load_merge_plan(job.merge_plan_path) if job.merge_plan_path else None

    arrays: dict[str, np.ndarray] = {
        "head/unembed_rows": model.embed,
        "head/norm_weight": model.final_norm_weight,
    }
    samples: list[dict] = []
    stop_id = WORD_TO_ID["."]
    for item in items:
        for modality in job.modalities:
            if modality == "t2t":
                ids, span = text_prompt_ids(item)
                x = model.input_embeddings(ids)
            else:
                x, span = speech_prompt(item, model, job.data_seed)
            t_total = x.shape[0]
            decision = t_total - 1
            iv = _interventions_for(modality, span, model.n_layers, calibration, plan)
            logits, caps = model.forward(x, iv, decision_pos=decision, capture=True)
            gen_ids = model.generate_greedy(x, job.max_new_tokens, iv, stop_id=stop_id)
            if logits.shape != (t_total, VOCAB_SIZE):
                raise ExtractionError(
                    f"hook capture mismatch: logits {logits.shape} for T={t_total}"
                )
            prefix = f"{item.item_id}/{modality}"
            if "hiddens" in job.capture:
                arrays[f"hidden/{prefix}"] = np.stack(caps.hiddens)
            if "attentions" in job.capture:
                arrays[f"attn/{prefix}"] = caps.decision_attn
            if "keys" in job.capture:
                arrays[f"keys/{prefix}"] = np.stack(caps.keys)
            if "norms" in job.capture:
                arrays[f"norms/{prefix}/preln"] = caps.preln
                arrays[f"norms/{prefix}/postln"] = caps.postln
            samples.append(
                {
                    "sample_id": item.item_id,
                    "dataset": job.dataset_name,
                    "modality": modality,
                    "question_span": list(span),
                    "valid_mask": [True] * t_total,
                    "decision_position": decision,
                    "candidate_token_ids": list(OPTION_IDS),
                    "correct_option": item.correct_option,
                    "generated_text": decode(gen_ids),
                    "subject_label": item.subject_label,
                }
            )

    tags = [a.digest for a in (calibration, plan) if a is not None]
    model_name = f"toylm-{job.model_seed}" + (f"+{'+'.join(tags)}" if tags else "")
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_name": model_name,
        "num_layers": model.n_layers + 1,
        "hidden_dim": model.dim,
        "num_heads": model.n_heads,
        "vocab_rows": VOCAB_SIZE,
        "norm_kind": "rmsnorm",
        "norm_epsilon": model.norm_eps,
        # state 0 of every hidden stack is the (position-encoded) embedding
        "includes_embedding": True,
        "full_vocab": True,
        "row_token_ids": list(range(VOCAB_SIZE)),
        "key_dim": model.dim,
        "samples": samples,
        "arrays": {name: list(arr.shape) for name, arr in arrays.items()},
    }
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8"
    )
    for name, arr in arrays.items():
        path = out / (name + ".f32")
        path.parent.mkdir(parents=True, exist_ok=True)
        data = np.ascontiguousarray(arr, dtype="<f4")
        if data.size != math.prod(arr.shape):
            raise ExtractionError(f"array {name}: element count mismatch")
        data.tofile(path)
    return out
