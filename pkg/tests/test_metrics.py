import json
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from patchfool.attack import AttackConfig
from patchfool.data import gen_dataset
from patchfool.interpret import Heatmap
from patchfool.metrics import (
    aggregate,
    energy_ratio,
    evaluate_suite,
    format_table,
    histogram_intersection,
    iou,
    localization,
)


def _sum1(values):
    v = np.asarray(values, dtype=np.float64)
    s = v.sum()
    return Heatmap(v / s if s > 0 else v, 0, "sum-1", s <= 0)


def _uniform(h, w):
    return Heatmap(np.full((h, w), 1.0 / (h * w)), 0)


# zero or normal-range values; subnormals underflow under scaling
maps = hnp.arrays(np.float64, (8, 8), elements=st.one_of(st.just(0.0), st.floats(1e-6, 10)))


# ---------------------------------------------------------------- energy ratio


def test_uniform_energy_is_area_fraction():
    assert energy_ratio(_uniform(64, 64), (0, 0, 18, 18)) == pytest.approx(324 / 4096, abs=1e-12)
    assert energy_ratio(_uniform(224, 224), (0, 0, 64, 64)) == pytest.approx(4096 / 50176, abs=1e-12)


def test_energy_bounds():
    v = np.zeros((8, 8))
    v[1:3, 1:3] = 1
    assert energy_ratio(_sum1(v), (0, 0, 4, 4)) == pytest.approx(1.0)
    assert energy_ratio(_sum1(v), (4, 4, 4, 4)) == 0.0


def test_degenerate_energy_is_zero():
    assert energy_ratio(_sum1(np.zeros((8, 8))), (0, 0, 4, 4)) == 0.0


@pytest.mark.parametrize("rect", [(-1, 0, 2, 2), (0, 0, 9, 1), (7, 7, 2, 2)])
def test_energy_rect_out_of_bounds(rect):
    with pytest.raises(ValueError):
        energy_ratio(_uniform(8, 8), rect)


@settings(max_examples=50, deadline=None)
@given(v=maps, x0=st.integers(0, 7), y0=st.integers(0, 7), w=st.integers(0, 8), h=st.integers(0, 8))
def test_energy_properties(v, x0, y0, w, h):
    hm = _sum1(v)
    w, h = min(w, 8 - x0), min(h, 8 - y0)
    e = energy_ratio(hm, (x0, y0, w, h))
    assert -1e-12 <= e <= 1 + 1e-12
    if not hm.degenerate:
        assert energy_ratio(hm, (0, 0, 8, 8)) == pytest.approx(1.0)


# ---------------------------------------------------------------- histogram intersection


def test_histogram_examples():
    u = _uniform(8, 8)
    assert histogram_intersection(u, u) == pytest.approx(1.0)
    a, b = np.zeros((8, 8)), np.zeros((8, 8))
    a[0, 0], b[5, 5] = 1, 1
    assert histogram_intersection(_sum1(a), _sum1(b)) == 0.0
    assert histogram_intersection(u, _sum1(a)) == pytest.approx(1 / 64)


def test_histogram_resolution_mismatch():
    with pytest.raises(ValueError):
        histogram_intersection(_uniform(8, 8), _uniform(4, 4))


def test_histogram_degenerate_operand():
    assert histogram_intersection(_uniform(8, 8), _sum1(np.zeros((8, 8)))) == 0.0


@settings(max_examples=50, deadline=None)
@given(a=maps, b=maps, x0=st.integers(0, 7), y0=st.integers(0, 7))
def test_histogram_properties(a, b, x0, y0):
    ha, hb = _sum1(a), _sum1(b)
    hi = histogram_intersection(ha, hb)
    assert hi == pytest.approx(histogram_intersection(hb, ha), abs=1e-12)
    assert -1e-12 <= hi <= 1 + 1e-12
    if not ha.degenerate:
        assert histogram_intersection(ha, ha) == pytest.approx(1.0)
    if not (ha.degenerate or hb.degenerate):
        # the intersection splits over any region and its complement
        rect = (x0, y0, 8 - x0, 8 - y0)
        inside = np.zeros((8, 8), bool)
        inside[y0:, x0:] = True
        lo_in = min(energy_ratio(ha, rect), energy_ratio(hb, rect))
        lo_out = min(1 - energy_ratio(ha, rect), 1 - energy_ratio(hb, rect))
        assert hi <= lo_in + lo_out + 1e-9


# ---------------------------------------------------------------- localization


def test_indicator_map_localizes_exactly():
    v = np.zeros((16, 16))
    v[3:9, 4:12] = 1.0
    loc = localization(_sum1(v), (4, 3, 12, 9))
    assert loc.box == (4, 3, 12, 9) and loc.iou == 1.0 and not loc.error


def test_disjoint_box_is_an_error():
    v = np.zeros((16, 16))
    v[0:3, 0:3] = 1.0
    loc = localization(_sum1(v), (8, 8, 16, 16))
    assert loc.iou == 0.0 and loc.error


def test_degenerate_map_localization():
    loc = localization(_sum1(np.zeros((8, 8))), (0, 0, 4, 4))
    assert loc.box is None and loc.iou == 0.0 and loc.error


@settings(max_examples=50, deadline=None)
@given(v=maps, scale=st.floats(1e-3, 1e3))
def test_localization_scale_invariance(v, scale):
    a = Heatmap(v, 0, "raw", not v.any())
    b = Heatmap(v * scale, 0, "raw", not v.any())
    la, lb = localization(a, (1, 1, 5, 5)), localization(b, (1, 1, 5, 5))
    if not a.degenerate:
        assert la.box is not None  # the max-1 rescale always leaves a pixel above threshold
    assert la.box == lb.box and la.iou == pytest.approx(lb.iou)


def test_iou_values():
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0


# ---------------------------------------------------------------- evaluation sweep


@pytest.fixture(scope="module")
def tiny_data():
    return gen_dataset(6, image_size=32, seed=4)


@pytest.fixture(scope="module")
def tiny_model():
    from patchfool.model import build_default_model

    return build_default_model(4, seed=1, image_size=32)


def _recompute(records, key):
    vals = [getattr(r, key) for r in records if r.error is None and not r.degenerate and getattr(r, key) is not None]
    return vals


def test_no_attack_sanity(tiny_model, tiny_data):
    rep = evaluate_suite(tiny_model, tiny_data, None, chunk_size=4)
    assert "target_accuracy" not in rep.aggregates
    errors = [r.localization_error for r in rep.records]
    assert rep.aggregates["localization_error_rate"] == pytest.approx(sum(errors) / len(errors))
    for r in rep.records:
        assert r.histogram_intersection in (0.0, pytest.approx(1.0))
    json.dumps(rep.to_dict())


def test_aggregates_match_records(tiny_model, tiny_data):
    cfg = AttackConfig.for_mode("targeted", iterations=3, patch=(0, 0, 8, 8))
    rep = evaluate_suite(tiny_model, tiny_data, cfg, chunk_size=4)
    agg, recs = rep.aggregates, rep.records
    assert agg["target_accuracy"] == pytest.approx(np.mean([r.success for r in recs]))
    assert agg["accuracy"] == pytest.approx(np.mean([r.final_class == r.clean_class for r in recs]))
    energies = _recompute(recs, "energy_ratio")
    assert agg["mean_energy_ratio"] == pytest.approx(statistics.fmean(energies))
    assert agg["median_energy_ratio"] == pytest.approx(statistics.median(energies))
    hist = _recompute(recs, "histogram_intersection")
    assert agg["mean_histogram_intersection"] == pytest.approx(statistics.fmean(hist))
    assert agg["degenerate_count"] == sum(r.degenerate for r in recs)
    assert aggregate(recs, "targeted") == agg
    for r in recs:
        for key in ("energy_ratio", "histogram_intersection", "localization_iou"):
            assert 0 <= getattr(r, key) <= 1 + 1e-9
        assert r.interpreted_class == r.target_class


def test_jobs_do_not_change_results(tiny_model, tiny_data):
    cfg = AttackConfig.for_mode("targeted", iterations=2, patch=(0, 0, 8, 8))
    one = evaluate_suite(tiny_model, tiny_data, cfg, chunk_size=2, jobs=1).to_dict()
    two = evaluate_suite(tiny_model, tiny_data, cfg, chunk_size=2, jobs=2).to_dict()
    assert one == two


def test_occlusion_method_and_modes(tiny_model, tiny_data):
    rep = evaluate_suite(tiny_model, tiny_data[:2], None, method="occlusion")
    assert rep.method == "occlusion" and len(rep.records) == 2
    cfg = AttackConfig.for_mode("uniform", iterations=2, patch=(0, 0, 8, 8), decoy=(24, 0, 8, 8))
    rep = evaluate_suite(tiny_model, tiny_data[:2], cfg)
    assert all(r.decoy_energy_ratio is not None for r in rep.records)
    cfg = AttackConfig.for_mode("full-image", iterations=2)
    rep = evaluate_suite(tiny_model, tiny_data[:2], cfg)
    assert all(r.energy_ratio is None and r.interpreted_class == r.clean_class for r in rep.records)
    rep = evaluate_suite(tiny_model, tiny_data[:2], AttackConfig.for_mode("nontargeted", iterations=2,
                                                                          patch=(0, 0, 8, 8)))
    assert "success_rate" in rep.aggregates


def test_failed_images_are_recorded(tiny_model, tiny_data):
    cfg = AttackConfig.for_mode("targeted", iterations=1, patch=(30, 30, 8, 8))  # off the 32x32 image
    rep = evaluate_suite(tiny_model, tiny_data[:3], cfg)
    assert rep.aggregates["failed"] == 3
    assert all(r.error for r in rep.records)


def test_bad_inputs(tiny_model, tiny_data):
    with pytest.raises(ValueError):
        evaluate_suite(tiny_model, [], None)
    with pytest.raises(ValueError):
        evaluate_suite(tiny_model, tiny_data, None, method="cam")


def test_table_layout(tiny_model, tiny_data):
    rep = evaluate_suite(tiny_model, tiny_data[:2], None)
    lines = format_table([("clean", rep), ("clean again", rep)]).splitlines()
    assert lines[0].startswith("Method") and "Energy Ratio (%)" in lines[0]
    assert len({len(line) for line in lines}) == 1
