"""End-to-end extractor checks. The analysis package (modgap) is imported
only as the contract validator for the bundle directory format."""

import json

import numpy as np
import pytest

import modgap
from gapextract import (
    ExtractionJob,
    RuntimeInterventions,
    ToyLM,
    extract_traces,
    make_items,
    speech_prompt,
)
from gapextract.cli import main as cli_main


def _extract(tmp_path, name="bundle", **kw):
    job = ExtractionJob(out_dir=str(tmp_path / name), **kw)
    return extract_traces(job)


def _identity_calibration(tmp_path, dim=16, site="input_layer0"):
    doc = {
        "schema_version": 1,
        "kind": "calibration",
        "site": site,
        "span_policy": "audio_span_only",
        "epsilon": 0.0,
        "mu_s": [0.0] * dim,
        "sigma_s": [1.0] * dim,
        "mu_t": [0.0] * dim,
        "sigma_t": [1.0] * dim,
    }
    path = tmp_path / "identity_calibration.json"
    path.write_text(json.dumps(doc))
    return str(path)


def _merge_plan(tmp_path, layers, span_length=0, name="plan.json"):
    doc = {
        "schema_version": 1,
        "kind": "merge_plan",
        "key_cos_threshold": 0.9,
        "layer_start": 0,
        "layer_end": 6,
        "max_frac": 0.2,
        "span_policy": "audio_span_only",
        "span_length": span_length,
        "key_stage": "pre_rope",
        "layers": layers,
    }
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_bundle_passes_core_validation(tmp_path):
    out = _extract(tmp_path, num_items=2)
    bundle = modgap.read_bundle(out)
    assert len(bundle.manifest.samples) == 4
    assert bundle.paired_ids() == ["item000", "item001"]
    for meta in bundle.manifest.samples:
        assert meta.subject_label in (0, 1)
        assert meta.generated_text
        assert meta.candidate_token_ids == [0, 1, 2, 3]
        assert meta.question_span[0] == 0 and meta.question_span[1] > 0
    hid = bundle.hidden("item000", "s2t")
    assert hid.shape[0] == bundle.manifest.num_layers
    assert bundle.keys("item000", "t2t").shape[2] == bundle.manifest.key_dim


def test_speech_prompt_longer_than_text(tmp_path):
    # two frames per word make the audio span longer than the text question
    out = _extract(tmp_path, num_items=1)
    bundle = modgap.read_bundle(out)
    span_s = bundle.meta("item000", "s2t").question_span
    span_t = bundle.meta("item000", "t2t").question_span
    assert span_s[1] == 2 * span_t[1]


def test_same_seeds_reproduce_bytes(tmp_path):
    a = _extract(tmp_path, "a", num_items=3, model_seed=7, data_seed=3)
    b = _extract(tmp_path, "b", num_items=3, model_seed=7, data_seed=3)
    ma = (a / "manifest.json").read_bytes()
    mb = (b / "manifest.json").read_bytes()
    assert ma == mb
    for fa in sorted(a.rglob("*.f32")):
        fb = b / fa.relative_to(a)
        assert fa.read_bytes() == fb.read_bytes(), fa.name


def test_identity_calibration_keeps_generations(tmp_path):
    base = _extract(tmp_path, "base", num_items=4)
    calib = _identity_calibration(tmp_path)
    treated = _extract(tmp_path, "calib", num_items=4, calibration_path=calib)
    b0 = modgap.read_bundle(base)
    b1 = modgap.read_bundle(treated)
    for meta in b0.manifest.samples:
        other = b1.meta(meta.sample_id, meta.modality)
        assert other.generated_text == meta.generated_text
    # epsilon 0 with unit moments is an exact no-op on the forward pass too
    assert np.array_equal(b0.hidden("item000", "s2t"), b1.hidden("item000", "s2t"))


def test_empty_merge_plan_keeps_generations(tmp_path):
    base = _extract(tmp_path, "base", num_items=4)
    plan = _merge_plan(tmp_path, layers=[{"layer": 2, "groups": [], "merged_fraction": 0.0}])
    treated = _extract(tmp_path, "plan", num_items=4, merge_plan_path=plan)
    b0 = modgap.read_bundle(base)
    b1 = modgap.read_bundle(treated)
    for meta in b0.manifest.samples:
        assert b1.meta(meta.sample_id, meta.modality).generated_text == meta.generated_text
    assert np.array_equal(b0.attention("item001", "s2t"), b1.attention("item001", "s2t"))


def test_merge_plan_drops_group_members(tmp_path):
    items = make_items(1, seed=0)
    model = ToyLM(seed=0)
    x, span = speech_prompt(items[0], model, seed=0)
    span_len = span[1] - span[0]
    plan = _merge_plan(
        tmp_path,
        layers=[{"layer": 2, "groups": [[0, 1], [4, 5]], "merged_fraction": 2 / span_len}],
        span_length=span_len,
    )
    treated = _extract(
        tmp_path, "merged", items=items, merge_plan_path=plan, num_items=1
    )
    bundle = modgap.read_bundle(treated)  # attention rows still sum to 1
    attn = bundle.attention("item000", "s2t")
    # dropped members carry zero weight at the planned layer, leaders do not
    assert np.all(attn[2, :, [1, 5]] == 0.0)
    assert attn[2, :, 0].max() > 0.0
    assert attn[1, :, 1].max() > 0.0  # unplanned layers keep the full sequence
    # the text side is untouched by an audio-span plan
    base = _extract(tmp_path, "base", items=items, num_items=1)
    b0 = modgap.read_bundle(base)
    assert np.array_equal(b0.hidden("item000", "t2t"), bundle.hidden("item000", "t2t"))
    assert not np.array_equal(b0.hidden("item000", "s2t"), bundle.hidden("item000", "s2t"))


def test_merge_plan_span_mismatch_rejected(tmp_path):
    plan = _merge_plan(tmp_path, layers=[], span_length=3)
    with pytest.raises(Exception, match="span"):
        _extract(tmp_path, "bad", num_items=1, merge_plan_path=plan)


def test_calibration_changes_speech_only(tmp_path):
    doc = {
        "schema_version": 1,
        "kind": "calibration",
        "site": "input_layer0",
        "span_policy": "audio_span_only",
        "epsilon": 1e-6,
        "mu_s": [0.5] * 16,
        "sigma_s": [2.0] * 16,
        "mu_t": [0.0] * 16,
        "sigma_t": [1.0] * 16,
    }
    path = tmp_path / "calib.json"
    path.write_text(json.dumps(doc))
    base = _extract(tmp_path, "base", num_items=2)
    treated = _extract(tmp_path, "calib", num_items=2, calibration_path=str(path))
    b0 = modgap.read_bundle(base)
    b1 = modgap.read_bundle(treated)
    assert np.array_equal(b0.hidden("item000", "t2t"), b1.hidden("item000", "t2t"))
    assert not np.array_equal(b0.hidden("item000", "s2t"), b1.hidden("item000", "s2t"))


def test_capture_subset(tmp_path):
    out = _extract(tmp_path, num_items=1, capture=("hiddens", "attentions"))
    bundle = modgap.read_bundle(out)
    assert bundle.has_array("hidden/item000/s2t")
    assert not bundle.has_array("keys/item000/s2t")
    assert not bundle.has_array("norms/item000/s2t/preln")


def test_interventions_tag_model_name(tmp_path):
    calib = _identity_calibration(tmp_path)
    out = _extract(tmp_path, num_items=1, calibration_path=calib)
    bundle = modgap.read_bundle(out)
    assert bundle.manifest.model_name.startswith("toylm-0+")


def test_merge_reduces_decision_context(tmp_path):
    # direct model-level check that merged tokens leave the KV sequence
    model = ToyLM(seed=1)
    items = make_items(1, seed=1)
    x, span = speech_prompt(items[0], model, seed=1)
    t = x.shape[0]
    iv = RuntimeInterventions(merge_groups={3: [[0, 1, 2]]})
    _, caps = model.forward(x, iv, decision_pos=t - 1, capture=True)
    assert caps.decision_attn[3].sum(axis=1) == pytest.approx(np.ones(model.n_heads))
    assert np.all(caps.decision_attn[3][:, [1, 2]] == 0.0)


def test_cli_extract(tmp_path):
    out = tmp_path / "cli_bundle"
    rc = cli_main(["extract", "--out", str(out), "--items", "2", "--data-seed", "5"])
    assert rc == 0
    bundle = modgap.read_bundle(out)
    assert len(bundle.paired_ids()) == 2


def test_cli_rejects_bad_capture(tmp_path, capsys):
    rc = cli_main(["extract", "--out", str(tmp_path / "x"), "--capture", "nonsense"])
    assert rc == 1
    assert "capture" in capsys.readouterr().err


def test_pipeline_artifacts_feed_back_into_extraction(tmp_path):
    # analysis-side fitted artifacts must be loadable and applicable here
    out = _extract(tmp_path, "base", num_items=4, data_seed=2)
    cfg = modgap.RunConfig(
        bundle_dir=str(out),
        out_dir=str(tmp_path / "report"),
        analyses=("calibrate", "merge_plan"),
        merge=modgap.MergeConfig(key_cos_threshold=0.7, layer_start=1, layer_end=4, max_frac=0.2),
    )
    result = modgap.run_pipeline(cfg)
    assert result.ok, result.statuses
    treated = _extract(
        tmp_path,
        "treated",
        num_items=4,
        data_seed=2,
        calibration_path=str(tmp_path / "report" / "calibration.json"),
        merge_plan_path=str(tmp_path / "report" / "merge_plan.json"),
    )
    bundle = modgap.read_bundle(treated)
    assert len(bundle.paired_ids()) == 4


def test_round_trip_with_analysis_pipeline(tmp_path):
    out = _extract(tmp_path, "big", num_items=10, data_seed=11)
    cfg = modgap.RunConfig(
        bundle_dir=str(out),
        out_dir=str(tmp_path / "report"),
        align=modgap.AlignConfig(base_layer=6),
        merge=modgap.MergeConfig(key_cos_threshold=0.8, layer_start=1, layer_end=4, max_frac=0.2),
    )
    result = modgap.run_pipeline(cfg)
    assert result.ok, result.statuses
    report = tmp_path / "report"
    for fname in (
        "cka_heatmap.csv",
        "phase_boundaries.json",
        "gap_report.json",
        "dispersion_table.csv",
        "calibration.json",
        "merge_plan.json",
        "probe_accuracy.csv",
    ):
        assert (report / fname).is_file(), fname
