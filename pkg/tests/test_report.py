import numpy as np
import pytest

from modgap.align import AlignConfig
from modgap.bundle import write_bundle
from modgap.fixtures import gen_fixture_phases, gen_fixture_redundant
from modgap.interventions import MergeConfig
from modgap.report import (
    ReportError,
    RunConfig,
    emit_heatmap_svg,
    run_pipeline,
    sweep_dtw,
)

ALL_FILES = {
    "cka_heatmap.csv",
    "cka_heatmap.svg",
    "row_summary.csv",
    "phase_boundaries.json",
    "entropy.csv",
    "accessibility.csv",
    "margins_by_group.csv",
    "gap_report.json",
    "dispersion_table.csv",
    "norms.csv",
    "update_cosine.csv",
    "calibration.json",
    "merge_plan.json",
    "probe_accuracy.csv",
}


@pytest.fixture(scope="module")
def phases_bundle_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("bundle") / "phases"
    bundle = gen_fixture_phases(16, 16, 3, 11, seed=0, num_pairs=8)
    write_bundle(bundle.manifest, bundle.arrays, path)
    return path


def _cfg(bundle_dir, out_dir, **kw):
    kw.setdefault("align", AlignConfig(base_layer=15))
    kw.setdefault("merge", MergeConfig(layer_start=5, layer_end=9))
    return RunConfig(bundle_dir=str(bundle_dir), out_dir=str(out_dir), **kw)


def test_all_analyses_emit_all_files(phases_bundle_dir, tmp_path):
    result = run_pipeline(_cfg(phases_bundle_dir, tmp_path / "out"))
    assert result.ok, result.statuses
    names = {p.name for p in (tmp_path / "out").iterdir()}
    assert names == ALL_FILES


def test_rerun_byte_identical(phases_bundle_dir, tmp_path):
    r1 = run_pipeline(_cfg(phases_bundle_dir, tmp_path / "a"))
    r2 = run_pipeline(_cfg(phases_bundle_dir, tmp_path / "b"))
    assert r1.ok and r2.ok
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_analysis_subset_only_emits_subset(phases_bundle_dir, tmp_path):
    result = run_pipeline(_cfg(phases_bundle_dir, tmp_path / "out", analyses=("cka",)))
    assert result.ok
    names = {p.name for p in (tmp_path / "out").iterdir()}
    assert names == {"cka_heatmap.csv", "cka_heatmap.svg", "row_summary.csv"}


def test_config_hash_in_every_header(phases_bundle_dir, tmp_path):
    cfg = _cfg(phases_bundle_dir, tmp_path / "out")
    run_pipeline(cfg)
    h = cfg.config_hash()
    for p in (tmp_path / "out").iterdir():
        text = p.read_text()
        if p.suffix == ".svg":
            continue
        assert h in text
        assert "format_version" in text


def test_config_hash_ignores_paths_but_not_params(phases_bundle_dir, tmp_path):
    a = _cfg(phases_bundle_dir, tmp_path / "a")
    b = _cfg(phases_bundle_dir, tmp_path / "b")
    assert a.config_hash() == b.config_hash()
    c = _cfg(phases_bundle_dir, tmp_path / "c", band_level=0.9)
    assert c.config_hash() != a.config_hash()


def test_corrupt_bundle_no_partial_output(phases_bundle_dir, tmp_path):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(phases_bundle_dir, broken)
    victim = broken / "hidden" / "item000" / "s2t.f32"
    victim.write_bytes(victim.read_bytes()[:-8])
    out = tmp_path / "out"
    with pytest.raises(Exception):
        run_pipeline(_cfg(broken, out))
    assert not out.exists()


def test_analysis_isolation(phases_bundle_dir, tmp_path):
    # merge layer range beyond the bundle's layers: merge_plan fails, rest run
    cfg = _cfg(
        phases_bundle_dir,
        tmp_path / "out",
        merge=MergeConfig(layer_start=90, layer_end=95),
        analyses=("cka", "merge_plan"),
    )
    result = run_pipeline(cfg)
    assert result.statuses["cka"] == "ok"
    assert result.statuses["merge_plan"].startswith("error")
    assert not result.ok


def test_unknown_analysis_rejected(phases_bundle_dir, tmp_path):
    with pytest.raises(ReportError):
        _cfg(phases_bundle_dir, tmp_path / "out", analyses=("cka", "nonsense"))


def test_sample_count_selection(phases_bundle_dir, tmp_path):
    cfg = _cfg(
        phases_bundle_dir, tmp_path / "out", analyses=("lens",), sample_count=2, sample_seed=1
    )
    result = run_pipeline(cfg)
    assert result.ok
    lines = (tmp_path / "out" / "entropy.csv").read_text().splitlines()
    ids = {line.split(",")[0] for line in lines[2:]}
    assert len(ids) == 2


def test_sweep_grid_cardinality_and_rows():
    bundle = gen_fixture_redundant(2, 12, 16, 0.01, seed=0)
    rows = sweep_dtw(
        bundle,
        ["item000"],
        base_layers=[0, 5, 10, 15],
        metrics=["cosine", "normalized_l2"],
        bands=[None, 30],
    )
    assert len(rows) == 16
    assert all(r["error"] == "" for r in rows)
    single = sweep_dtw(bundle, ["item000"], base_layers=[3], metrics=["cosine"], bands=[None])
    assert len(single) == 1


def test_sweep_records_per_cell_failures():
    bundle = gen_fixture_redundant(2, 12, 16, 0.01, seed=0)
    rows = sweep_dtw(bundle, ["item000"], base_layers=[99], metrics=["cosine"], bands=[None])
    assert len(rows) == 1
    assert rows[0]["error"] != ""
    assert np.isnan(rows[0]["r2"])


def test_sweep_stall_constant_across_base_layers():
    bundle = gen_fixture_redundant(4, 16, 16, 0.01, seed=1)
    rows = sweep_dtw(
        bundle, ["item000"], base_layers=[5, 8, 11, 14], metrics=["cosine"], bands=[None]
    )
    stalls = [r["stall_fraction"] for r in rows]
    assert max(stalls) - min(stalls) < 0.05


def test_svg_single_mid_cell():
    svg = emit_heatmap_svg(np.array([[0.5]]), ["r0"], ["c0"])
    assert svg.count("<rect") == 2  # background + one cell
    assert "=0.5000" in svg


def test_svg_identity_max_color_on_diagonal():
    svg = emit_heatmap_svg(np.eye(2), ["a", "b"], ["x", "y"])
    assert svg.count("rgb(253,231,37)") == 2  # the two diagonal cells
    assert svg.count("rgb(68,1,84)") == 2


def test_svg_deterministic():
    rng = np.random.default_rng(0)
    m = rng.uniform(0, 1, size=(4, 5))
    assert emit_heatmap_svg(m, list("abcd"), list("vwxyz")) == emit_heatmap_svg(
        m.copy(), list("abcd"), list("vwxyz")
    )


def test_svg_rejects_nonfinite():
    with pytest.raises(ReportError):
        emit_heatmap_svg(np.array([[np.nan]]), ["a"], ["b"])
