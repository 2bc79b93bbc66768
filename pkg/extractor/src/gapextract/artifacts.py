"""Readers for the intervention artifact JSON schemas (schema_version 1).

These documents are the contract with the analysis side; this module parses
them independently so the extractor depends only on the schema, not on the
analysis package."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

SCHEMA_VERSION = 1


class ArtifactError(Exception):
    pass


@dataclass
class CalibrationArtifact:
    site: str  # input_layer0 | output_lastlayer
    span_policy: str
    epsilon: float
    mu_s: np.ndarray
    sigma_s: np.ndarray
    mu_t: np.ndarray
    sigma_t: np.ndarray
    digest: str

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """x' = (x - mu_s)/(sigma_s + eps) * sigma_t + mu_t as (scale, shift)."""
        scale = self.sigma_t / (self.sigma_s + self.epsilon)
        shift = self.mu_t - self.mu_s * scale
        return scale, shift


@dataclass
class MergePlanArtifact:
    span_policy: str
    span_length: int
    layers: dict[int, list[list[int]]]  # span-relative token groups
    digest: str


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def load_calibration(path) -> CalibrationArtifact:
    text = open(path, encoding="utf-8").read()
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION or doc.get("kind") != "calibration":
        raise ArtifactError(f"{path}: not a schema-v{SCHEMA_VERSION} calibration document")
    if doc["site"] not in ("input_layer0", "output_lastlayer"):
        raise ArtifactError(f"unknown calibration site {doc['site']!r}")
    return CalibrationArtifact(
        site=doc["site"],
        span_policy=doc["span_policy"],
        epsilon=float(doc["epsilon"]),
        mu_s=np.asarray(doc["mu_s"], dtype=np.float64),
        sigma_s=np.asarray(doc["sigma_s"], dtype=np.float64),
        mu_t=np.asarray(doc["mu_t"], dtype=np.float64),
        sigma_t=np.asarray(doc["sigma_t"], dtype=np.float64),
        digest=_digest(text),
    )


def load_merge_plan(path) -> MergePlanArtifact:
    text = open(path, encoding="utf-8").read()
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION or doc.get("kind") != "merge_plan":
        raise ArtifactError(f"{path}: not a schema-v{SCHEMA_VERSION} merge-plan document")
    layers: dict[int, list[list[int]]] = {}
    for entry in doc["layers"]:
        groups = [sorted(int(i) for i in g) for g in entry["groups"]]
        layers[int(entry["layer"])] = groups
    return MergePlanArtifact(
        span_policy=doc["span_policy"],
        span_length=int(doc["span_length"]),
        layers=layers,
        digest=_digest(text),
    )
