import warnings

import numpy as np
import pytest

from adaptll.arch import CONV_STAGE, AuxiliarySpec, LayerParams, LayerSpec, init_head, init_unit, toy_vgg6
from adaptll.errors import UsageError
from adaptll.meter import MemoryMeter
from adaptll.profiler import (
    MemoryModel,
    ProfileReport,
    fit_linear,
    measure_layer_step,
    profile_network,
)

MB = 1e6


def closed_form_ols(points):
    n = len(points)
    sx = sum(b for b, _ in points)
    sy = sum(m for _, m in points)
    sxx = sum(b * b for b, _ in points)
    sxy = sum(b * m for b, m in points)
    slope = (n * sxy - sx * sy) / (n * sxx - sx * sx)
    return slope, (sy - slope * sx) / n


def test_fit_two_point_l1_slope():
    model = fit_linear([(10, 172.032 * MB), (90, 1547.264 * MB)])
    # (1547.264 - 172.032) / 80 = 17.1904 MB per sample
    assert model.slope / MB == pytest.approx(17.1904, rel=1e-12)
    assert model.intercept / MB == pytest.approx(0.128, abs=1e-9)
    assert model.r_squared == 1.0


def test_fit_exact_line():
    model = fit_linear([(b, 3 * b + 7) for b in (1, 2, 5, 9)])
    assert model.slope == pytest.approx(3, abs=1e-12)
    assert model.intercept == pytest.approx(7, abs=1e-12)
    assert model.r_squared == pytest.approx(1.0, abs=1e-15)


def test_fit_matches_closed_form_with_perturbation():
    points = [(4, 19.0), (8, 31.0), (16, 56.5), (32, 103.0)]
    slope, intercept = closed_form_ols(points)
    model = fit_linear(points)
    assert abs(model.slope - slope) < 1e-9 and abs(model.intercept - intercept) < 1e-9
    assert 0.99 < model.r_squared < 1.0


def test_fit_clamps_negative_intercept():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = fit_linear([(1, 1.0), (2, 4.0)])
    assert model.intercept == 0.0 and model.intercept_clamped
    assert caught


@pytest.mark.parametrize("points", [[(4, 10)], [(4, 10), (4, 12)], []])
def test_fit_rejects_degenerate_points(points):
    with pytest.raises(UsageError):
        fit_linear(points)


def test_memory_model_round_trip():
    m = MemoryModel(3, 2.5, 11.0, 0.9999, [(4, 21), (8, 31)])
    assert MemoryModel.from_dict(m.to_dict()) == m


def _toy_layer():
    layer = LayerSpec(CONV_STAGE, 3, 8, False)
    head = AuxiliarySpec(4, (2, 2), 16, 3, 8)
    return layer, head


def test_byte_enumeration_oracle():
    layer, head = _toy_layer()
    n, hw = 4, 8 * 8
    unit_params = 8 * 3 * 9 + 8
    head_params = 4 * 8 * 9 + 4 + 3 * 16 + 3
    tensors = {
        "input": n * 3 * hw,
        "params+velocity": 2 * (unit_params + head_params),
        "conv out": n * 8 * hw,
        "relu out": n * 8 * hw,
        "aux conv": n * 4 * hw,
        "aux relu": n * 4 * hw,
        "aux pooled": n * 4 * 4,
        "logits": n * 3,
        "grad logits": n * 3,
        "grad pooled": n * 16,
        "grad aux relu": n * 4 * hw,
        "grad fc": 3 * 16 + 3,
        "grad aux conv out": n * 4 * hw,
        "grad unit output": n * 8 * hw,
        "grad aux conv params": 4 * 8 * 9 + 4,
        "grad unit pre-relu": n * 8 * hw,
        "grad unit params": unit_params,
    }
    assert measure_layer_step(layer, head, n, (3, 8, 8)) == 4 * sum(tensors.values())


def test_measurement_is_repeatable_monotone_and_side_effect_free():
    layer, head = _toy_layer()
    lp = LayerParams(init_unit(layer, 1, 0), init_head(head, 1, 0), head)
    before = [p.copy() for p in lp.unit_list() + lp.head_list()]
    meter = MemoryMeter()
    p1 = measure_layer_step(layer, head, 2, (3, 8, 8), meter, params=lp)
    p2 = measure_layer_step(layer, head, 2, (3, 8, 8), meter, params=lp)
    assert p1 == p2 > measure_layer_step(layer, head, 1, (3, 8, 8))
    assert meter.live_bytes == 0
    for b, p in zip(before, lp.unit_list() + lp.head_list()):
        assert np.array_equal(b, p)


def test_profile_structure_and_round_trip(tmp_path):
    net = toy_vgg6(num_classes=4)
    report = profile_network(net, "aan")
    assert len(report.models) == net.depth == 6
    assert [m.layer_index for m in report.models] == list(range(1, 7))
    assert all(m.r_squared >= 0.999 and m.slope > 0 for m in report.models)
    for m in report.models:
        for b, bytes_ in m.sample_points:
            assert abs(m.predict(b) - bytes_) <= 0.05 * bytes_
    path = tmp_path / "profile.json"
    report.save(path)
    assert ProfileReport.load(path) == report
    first = path.read_bytes()
    profile_network(net, "aan").save(path)
    assert path.read_bytes() == first


def test_bp_profile_has_one_model():
    assert len(profile_network(toy_vgg6(num_classes=4), "bp", [1, 2]).models) == 1


def test_aan_cheaper_than_classic_on_first_layer():
    from adaptll.arch import NetworkSpec

    layers = [LayerSpec(CONV_STAGE, 3, 64), LayerSpec(CONV_STAGE, 64, 64, True), LayerSpec(CONV_STAGE, 64, 128, True)]
    net = NetworkSpec("w64", (3, 8, 8), layers, 10)
    aan = profile_network(net, "aan", [8, 16]).models[0]
    classic = profile_network(net, "classic", [8, 16]).models[0]
    assert aan.predict(16) < classic.predict(16)
