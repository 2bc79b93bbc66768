import numpy as np
import pytest

from modgap.align import AlignConfig, build_similarity_matrix, dtw_align, path_stats, question_slice
from modgap.bundle import BundleError
from modgap.crosslayer import cross_layer_heatmap, detect_phases, summarize_rows
from modgap.fixtures import gen_fixture_phases, gen_fixture_redundant, sigma_for_cka


def _question(bundle, sid, modality, layer):
    meta = bundle.meta(sid, modality)
    stack = bundle.hidden(sid, modality)
    return question_slice(stack[layer], meta.question_span, meta.valid_mask)


def test_redundant_k1_noise0_speech_equals_text():
    bundle = gen_fixture_redundant(1, 8, 8, 0.0, seed=0)
    hs = bundle.hidden("item000", "s2t")
    ht = bundle.hidden("item000", "t2t")
    # question spans coincide; the appended decision column differs by design
    t_q = bundle.meta("item000", "t2t").question_span[1]
    assert np.array_equal(hs[:, :t_q], ht[:, :t_q])


def test_redundant_length_arithmetic():
    bundle = gen_fixture_redundant(3, 5, 8, 0.01, seed=0)
    assert bundle.meta("item000", "s2t").question_span == (0, 15)
    assert bundle.meta("item000", "t2t").question_span == (0, 5)


def test_redundant_rowwise_argmax_at_noise0():
    bundle = gen_fixture_redundant(2, 10, 16, 0.0, seed=1)
    cfg = AlignConfig(base_layer=10)
    s = _question(bundle, "item000", "s2t", 10)
    t = _question(bundle, "item000", "t2t", 10)
    m = build_similarity_matrix(s, t, cfg)
    for i in range(m.shape[0]):
        assert m[i].argmax() == i // 2


def test_redundant_stall_k4_in_stated_interval():
    bundle = gen_fixture_redundant(4, 24, 16, 0.01, seed=0)
    cfg = AlignConfig(base_layer=10)
    s = _question(bundle, "item000", "s2t", 10)
    t = _question(bundle, "item000", "t2t", 10)
    path = dtw_align(build_similarity_matrix(s, t, cfg), cfg)
    assert 0.70 <= path_stats(path).stall_fraction <= 0.80


def test_redundant_stall_constant_across_base_layers():
    bundle = gen_fixture_redundant(4, 20, 16, 0.01, seed=2)
    stalls = []
    for base in (5, 8, 11, 14):
        cfg = AlignConfig(base_layer=base)
        s = _question(bundle, "item000", "s2t", base)
        t = _question(bundle, "item000", "t2t", base)
        path = dtw_align(build_similarity_matrix(s, t, cfg), cfg)
        stalls.append(path_stats(path).stall_fraction)
    assert max(stalls) - min(stalls) < 0.05


def test_redundant_preconditions():
    with pytest.raises(BundleError):
        gen_fixture_redundant(0, 8, 8, 0.01, seed=0)
    with pytest.raises(BundleError):
        gen_fixture_redundant(2, 1, 8, 0.01, seed=0)
    with pytest.raises(BundleError):
        gen_fixture_redundant(2, 8, 8, -0.1, seed=0)


def test_redundant_speech_keys_shared_within_group():
    bundle = gen_fixture_redundant(3, 6, 8, 0.05, seed=3)
    keys = bundle.keys("item000", "s2t")
    for t in range(6):
        group = keys[:, 3 * t : 3 * t + 3]
        assert np.array_equal(group[:, 0], group[:, 1])
        assert np.array_equal(group[:, 0], group[:, 2])


def test_phases_preconditions():
    with pytest.raises(BundleError):
        gen_fixture_phases(28, 28, 0, 20, seed=0)
    with pytest.raises(BundleError):
        gen_fixture_phases(28, 28, 10, 9, seed=0)
    with pytest.raises(BundleError):
        gen_fixture_phases(28, 28, 2, 28, seed=0)
    with pytest.raises(BundleError):
        gen_fixture_phases(28, 28, 2, 10, seed=0)  # b3 before 60% depth


def test_phases_canonical_recovery():
    bundle = gen_fixture_phases(28, 28, 5, 20, seed=0)
    cfg = AlignConfig(base_layer=27)
    rs = summarize_rows(cross_layer_heatmap(bundle, cfg, ["item000"]))
    pb = detect_phases(rs)
    assert abs(pb.phase1_end - 5) <= 1
    assert abs(pb.phase3_start - 20) <= 1


def test_phases_extreme_boundaries_recovered():
    l_s = 28
    b1, b3 = 1, int(np.ceil(0.6 * l_s))
    bundle = gen_fixture_phases(l_s, l_s, b1, b3, seed=3)
    cfg = AlignConfig(base_layer=l_s - 1)
    rs = summarize_rows(cross_layer_heatmap(bundle, cfg, ["item000"]))
    pb = detect_phases(rs)
    assert abs(pb.phase1_end - b1) <= 1
    assert abs(pb.phase3_start - b3) <= 1


def test_phases_two_seeds_distinct_same_boundaries():
    cfg = AlignConfig(base_layer=27)
    detected = []
    raw = []
    for seed in (10, 11):
        bundle = gen_fixture_phases(28, 28, 6, 19, seed=seed)
        raw.append(bundle.hidden("item000", "s2t").tobytes())
        rs = summarize_rows(cross_layer_heatmap(bundle, cfg, ["item000"]))
        pb = detect_phases(rs)
        detected.append((pb.phase1_end, pb.phase3_start))
    assert raw[0] != raw[1]
    assert abs(detected[0][0] - detected[1][0]) <= 2
    assert abs(detected[0][1] - detected[1][1]) <= 2


def test_sigma_for_cka_monotone_and_anchored():
    assert sigma_for_cka(0.9979) == pytest.approx(0.05)
    assert sigma_for_cka(0.6129) == pytest.approx(0.90)
    grid = [sigma_for_cka(c) for c in np.linspace(0.65, 0.99, 20)]
    assert all(a > b for a, b in zip(grid, grid[1:]))  # higher target, less noise
