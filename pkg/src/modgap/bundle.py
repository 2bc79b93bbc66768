"""Trace-bundle container: on-disk format, validation, and in-memory access.

A bundle is a directory holding ``manifest.json`` plus one raw ``.f32`` file
per named array (float32, little-endian, row-major). Array names may contain
``/`` which maps to subdirectories. Bundles are immutable after write.

Array naming convention used throughout this package:

- ``hidden/<sample_id>/<modality>``          (L_states, T, D) hidden stacks
- ``attn/<sample_id>/<modality>``            (L, H, T) decision-token attention
- ``norms/<sample_id>/<modality>/preln``     (L_states, T) optional stored norms
- ``norms/<sample_id>/<modality>/postln``    (L_states, T)
- ``keys/<sample_id>/<modality>``            (L, T, key_dim) optional key vectors
- ``head/unembed_rows``                      (V, D) projection head
- ``head/norm_weight``                       (D,)
- ``head/norm_bias``                         (D,) required iff norm_kind == layernorm
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1

NORM_KINDS = ("rmsnorm", "layernorm", "identity")
MODALITIES = ("s2t", "t2t")


class BundleError(Exception):
    """Malformed bundle content, shape mismatch, or failed validation."""


@dataclass
class SampleMeta:
    sample_id: str
    dataset: str
    modality: str
    question_span: tuple[int, int]
    valid_mask: list[bool]
    decision_position: int
    candidate_token_ids: list[int]
    correct_option: int
    generated_text: str
    subject_label: int | None = None

    def validate(self) -> None:
        t = len(self.valid_mask)
        start, end = self.question_span
        if self.modality not in MODALITIES:
            raise BundleError(f"sample {self.sample_id}: unknown modality {self.modality!r}")
        if not (0 <= start < end <= t):
            raise BundleError(
                f"sample {self.sample_id}/{self.modality}: question_span {self.question_span} "
                f"out of range for T={t}"
            )
        if not (0 <= self.decision_position < t):
            raise BundleError(
                f"sample {self.sample_id}/{self.modality}: decision_position "
                f"{self.decision_position} out of range for T={t}"
            )
        if len(self.candidate_token_ids) < 2:
            raise BundleError(f"sample {self.sample_id}/{self.modality}: need >= 2 candidates")
        if not (0 <= self.correct_option < len(self.candidate_token_ids)):
            raise BundleError(f"sample {self.sample_id}/{self.modality}: correct_option out of range")


@dataclass
class BundleManifest:
    model_name: str
    num_layers: int
    hidden_dim: int
    num_heads: int
    vocab_rows: int
    norm_kind: str
    norm_epsilon: float
    includes_embedding: bool
    full_vocab: bool
    row_token_ids: list[int]
    samples: list[SampleMeta]
    arrays: dict[str, list[int]]
    key_dim: int | None = None
    format_version: int = FORMAT_VERSION

    def validate(self) -> None:
        if self.format_version != FORMAT_VERSION:
            raise BundleError(f"unsupported format_version {self.format_version}")
        if self.num_layers < 2:
            raise BundleError("num_layers must be >= 2")
        if self.hidden_dim < 1:
            raise BundleError("hidden_dim must be >= 1")
        if self.vocab_rows < 2:
            raise BundleError("vocab_rows must be >= 2")
        if self.norm_kind not in NORM_KINDS:
            raise BundleError(f"unknown norm_kind {self.norm_kind!r}")
        if self.norm_kind == "layernorm" and "head/norm_bias" not in self.arrays:
            raise BundleError("norm_kind layernorm requires array head/norm_bias")
        if len(self.row_token_ids) != self.vocab_rows:
            raise BundleError("row_token_ids length must equal vocab_rows")
        row_ids = set(self.row_token_ids)
        for meta in self.samples:
            meta.validate()
            missing = [c for c in meta.candidate_token_ids if c not in row_ids]
            if missing:
                raise BundleError(
                    f"sample {meta.sample_id}/{meta.modality}: candidate token ids "
                    f"{missing} absent from row_token_ids"
                )
            hidden_name = f"hidden/{meta.sample_id}/{meta.modality}"
            if hidden_name not in self.arrays:
                raise BundleError(f"missing declared hidden array {hidden_name}")
            shape = self.arrays[hidden_name]
            if len(shape) != 3 or shape[1] != len(meta.valid_mask) or shape[2] != self.hidden_dim:
                raise BundleError(
                    f"array {hidden_name}: shape {shape} inconsistent with "
                    f"T={len(meta.valid_mask)}, D={self.hidden_dim}"
                )

    def to_json(self) -> str:
        doc = asdict(self)
        doc["samples"] = [asdict(m) for m in self.samples]
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "BundleManifest":
        doc = json.loads(text)
        try:
            samples = [
                SampleMeta(
                    sample_id=m["sample_id"],
                    dataset=m["dataset"],
                    modality=m["modality"],
                    question_span=tuple(m["question_span"]),
                    valid_mask=[bool(v) for v in m["valid_mask"]],
                    decision_position=m["decision_position"],
                    candidate_token_ids=list(m["candidate_token_ids"]),
                    correct_option=m["correct_option"],
                    generated_text=m["generated_text"],
                    subject_label=m.get("subject_label"),
                )
                for m in doc["samples"]
            ]
            return cls(
                model_name=doc["model_name"],
                num_layers=doc["num_layers"],
                hidden_dim=doc["hidden_dim"],
                num_heads=doc["num_heads"],
                vocab_rows=doc["vocab_rows"],
                norm_kind=doc["norm_kind"],
                norm_epsilon=doc["norm_epsilon"],
                includes_embedding=doc["includes_embedding"],
                full_vocab=doc["full_vocab"],
                row_token_ids=list(doc["row_token_ids"]),
                samples=samples,
                arrays={k: list(v) for k, v in doc["arrays"].items()},
                key_dim=doc.get("key_dim"),
                format_version=doc.get("format_version", FORMAT_VERSION),
            )
        except KeyError as exc:
            raise BundleError(f"manifest missing field {exc}") from exc


@dataclass
class ProjectionHead:
    unembed_rows: np.ndarray
    row_token_ids: list[int]
    norm_weight: np.ndarray
    norm_bias: np.ndarray | None
    norm_kind: str
    norm_epsilon: float
    full_vocab: bool


@dataclass
class TraceBundle:
    manifest: BundleManifest
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def sample_ids(self) -> list[str]:
        seen: list[str] = []
        for m in self.manifest.samples:
            if m.sample_id not in seen:
                seen.append(m.sample_id)
        return seen

    def paired_ids(self) -> list[str]:
        """Sample ids having both modalities."""
        mods: dict[str, set[str]] = {}
        order: list[str] = []
        for m in self.manifest.samples:
            if m.sample_id not in mods:
                mods[m.sample_id] = set()
                order.append(m.sample_id)
            mods[m.sample_id].add(m.modality)
        return [s for s in order if mods[s] == set(MODALITIES)]

    def meta(self, sample_id: str, modality: str) -> SampleMeta:
        for m in self.manifest.samples:
            if m.sample_id == sample_id and m.modality == modality:
                return m
        raise BundleError(f"no sample meta for {sample_id}/{modality}")

    def hidden(self, sample_id: str, modality: str) -> np.ndarray:
        return self._array(f"hidden/{sample_id}/{modality}")

    def attention(self, sample_id: str, modality: str) -> np.ndarray:
        return self._array(f"attn/{sample_id}/{modality}")

    def keys(self, sample_id: str, modality: str) -> np.ndarray:
        return self._array(f"keys/{sample_id}/{modality}")

    def has_array(self, name: str) -> bool:
        return name in self.arrays

    def head(self) -> ProjectionHead:
        bias = self.arrays.get("head/norm_bias")
        return ProjectionHead(
            unembed_rows=self._array("head/unembed_rows"),
            row_token_ids=self.manifest.row_token_ids,
            norm_weight=self._array("head/norm_weight"),
            norm_bias=bias,
            norm_kind=self.manifest.norm_kind,
            norm_epsilon=self.manifest.norm_epsilon,
            full_vocab=self.manifest.full_vocab,
        )

    def _array(self, name: str) -> np.ndarray:
        if name not in self.arrays:
            raise BundleError(f"bundle has no array {name}")
        return self.arrays[name]

    def validate(self) -> None:
        self.manifest.validate()
        declared = set(self.manifest.arrays)
        present = set(self.arrays)
        if declared - present:
            raise BundleError(f"missing arrays: {sorted(declared - present)}")
        if present - declared:
            raise BundleError(f"undeclared arrays: {sorted(present - declared)}")
        for name, shape in self.manifest.arrays.items():
            arr = self.arrays[name]
            if list(arr.shape) != list(shape):
                raise BundleError(
                    f"array {name}: shape {list(arr.shape)} != declared {list(shape)}"
                )
            if not np.isfinite(arr).all():
                raise BundleError(f"array {name}: contains non-finite values")
        for meta in self.manifest.samples:
            self._check_attention(meta)

    def _check_attention(self, meta: SampleMeta) -> None:
        name = f"attn/{meta.sample_id}/{meta.modality}"
        if name not in self.arrays:
            return
        attn = self.arrays[name]
        mask = np.asarray(meta.valid_mask, dtype=bool)
        if attn.ndim != 3 or attn.shape[2] != mask.size:
            raise BundleError(f"array {name}: expected (L, H, T={mask.size}) shape")
        if (attn < -1e-7).any():
            raise BundleError(f"array {name}: negative attention weights")
        sums = attn[:, :, mask].sum(axis=2)
        if not np.allclose(sums, 1.0, atol=1e-4):
            raise BundleError(f"array {name}: rows do not sum to 1 over valid positions")


def _array_path(directory: Path, name: str) -> Path:
    return directory / (name + ".f32")


def write_bundle(manifest: BundleManifest, arrays: dict[str, np.ndarray], directory) -> None:
    """Write ``manifest.json`` and one raw .f32 file per array.

    Rejects shape mismatches before touching the filesystem so a failed write
    never leaves a partial bundle behind.
    """
    manifest.validate()
    declared = set(manifest.arrays)
    if declared != set(arrays):
        raise BundleError(
            f"arrays do not match manifest declaration: "
            f"missing={sorted(declared - set(arrays))} extra={sorted(set(arrays) - declared)}"
        )
    for name, arr in arrays.items():
        expected = manifest.arrays[name]
        got = list(np.asarray(arr).shape)
        if got != list(expected):
            raise BundleError(f"array {name}: shape {got} != declared {list(expected)}")
        if math.prod(got) != np.asarray(arr).size:
            raise BundleError(f"array {name}: element count mismatch")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
    for name, arr in arrays.items():
        path = _array_path(directory, name)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def read_bundle(directory) -> TraceBundle:
    """Read and fully validate a bundle directory.

    Every malformed-bundle class raises ``BundleError`` with the offending
    array name; nothing is silently patched.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise BundleError(f"missing {MANIFEST_NAME} in {directory}")
    manifest = BundleManifest.from_json(manifest_path.read_text(encoding="utf-8"))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in manifest.arrays.items():
        path = _array_path(directory, name)
        if not path.is_file():
            raise BundleError(f"missing array file for {name}")
        expected_bytes = math.prod(shape) * 4
        actual_bytes = path.stat().st_size
        if actual_bytes != expected_bytes:
            raise BundleError(
                f"array {name}: file has {actual_bytes} bytes, expected {expected_bytes}"
            )
        data = np.fromfile(path, dtype="<f4")
        arrays[name] = data.reshape(shape)
    bundle = TraceBundle(manifest=manifest, arrays=arrays)
    bundle.validate()
    return bundle
