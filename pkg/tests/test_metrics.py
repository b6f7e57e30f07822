"""Evaluation metrics: hand oracles, zero points, and scene dispatch."""

import numpy as np
import pytest

from intrinsic.errors import ConfigError, ContractError, DimensionError
from intrinsic.image import ImageF
from intrinsic.metrics import (
    Comparison,
    EvalScene,
    JudgementPoint,
    JudgementSet,
    MetricConfig,
    decompose,
    evaluate_scene,
    mpre,
    si_lmse,
    si_mse_metric,
    whdr,
)
from intrinsic.network import IntrinsicNet, NetConfig

from tests.conftest import assert_close


def _img(arr):
    return ImageF(np.asarray(arr, dtype=np.float64))


# ---------------------------------------------------------------------------
# si-MSE / si-LMSE

def test_si_mse_metric_hand_case():
    est = _img(np.array([1.0, 2.0]).reshape(1, 2, 1))
    ref = _img(np.array([1.0, 1.0]).reshape(1, 2, 1))
    assert abs(si_mse_metric(est, ref) - 0.25) < 1e-12


def test_si_mse_metric_zero_point(rng):
    ref = _img(rng.uniform(0.1, 1, (6, 6, 3)))
    est = _img(2.7 * ref.data)
    assert si_mse_metric(est, ref) < 1e-24
    assert si_mse_metric(ref, ref) == 0.0


def test_si_lmse_full_window_equals_simse(rng):
    est = _img(rng.uniform(0, 1, (8, 8, 3)))
    ref = _img(rng.uniform(0.1, 1, (8, 8, 3)))
    cfg = MetricConfig(lmse_window_frac=1.0, lmse_stride_frac=1.0)
    assert_close(si_lmse(est, ref, cfg), si_mse_metric(est, ref), 1e-14)


def test_si_lmse_zero_for_locally_scaled_reference(rng):
    # scale each half of the reference differently: globally not a
    # multiple, but every window within one half is
    ref = rng.uniform(0.1, 1, (4, 8, 1))
    est = ref.copy()
    est[:, :4] *= 2.0
    est[:, 4:] *= 5.0
    cfg = MetricConfig(lmse_window_frac=0.25, lmse_stride_frac=0.25)
    # windows are 2x2 on a stride-2 lattice: none straddles the split
    assert si_lmse(_img(est), _img(ref), cfg) < 1e-24
    assert si_mse_metric(_img(est), _img(ref)) > 1e-3


def test_si_lmse_hand_window_layout(rng):
    # 4x6 image, frac 1/3 of long dim 6 gives side 2, stride 1/6 -> 1:
    # starts are 0..2 vertically and 0..4 horizontally, all full windows
    est = rng.uniform(0, 1, (4, 6, 1))
    ref = rng.uniform(0.1, 1, (4, 6, 1))
    cfg = MetricConfig(lmse_window_frac=1 / 3, lmse_stride_frac=1 / 6)
    values = []
    for y0 in range(3):
        for x0 in range(5):
            e = est[y0:y0 + 2, x0:x0 + 2].ravel()
            r = ref[y0:y0 + 2, x0:x0 + 2].ravel()
            alpha = float(e @ r) / float(r @ r)
            values.append(float(((e - alpha * r) ** 2).mean()))
    assert_close(si_lmse(_img(est), _img(ref), cfg), np.mean(values), 1e-13)


def test_si_lmse_tail_window_anchored(rng):
    # dim 5, side 2, stride 2 -> starts 0, 2, and a tail window at 3
    est = rng.uniform(0, 1, (5, 5, 1))
    ref = rng.uniform(0.1, 1, (5, 5, 1))
    cfg = MetricConfig(lmse_window_frac=0.4, lmse_stride_frac=0.4)
    values = []
    for y0 in (0, 2, 3):
        for x0 in (0, 2, 3):
            e = est[y0:y0 + 2, x0:x0 + 2].ravel()
            r = ref[y0:y0 + 2, x0:x0 + 2].ravel()
            alpha = float(e @ r) / float(r @ r)
            values.append(float(((e - alpha * r) ** 2).mean()))
    assert_close(si_lmse(_img(est), _img(ref), cfg), np.mean(values), 1e-13)


def test_si_lmse_rejects_tiny_window():
    est = _img(np.zeros((4, 4, 1)))
    with pytest.raises(ConfigError):
        si_lmse(est, est, MetricConfig(lmse_window_frac=0.1))  # side 0


def test_metric_shape_mismatch():
    with pytest.raises(DimensionError):
        si_mse_metric(_img(np.zeros((2, 2, 1))), _img(np.zeros((2, 3, 1))))


# ---------------------------------------------------------------------------
# WHDR

def _whdr_fixture():
    # 2x2 reflectance with known lightness: left column 0.8, right 0.2
    data = np.zeros((2, 2, 3))
    data[:, 0] = 0.8
    data[:, 1] = 0.2
    refl = _img(data)
    points = [
        JudgementPoint(id=1, x=0.25, y=0.25),  # left, light
        JudgementPoint(id=2, x=0.75, y=0.25),  # right, dark
        JudgementPoint(id=3, x=0.25, y=0.75),  # left, light
    ]
    return refl, points


def test_whdr_oracle_values():
    refl, points = _whdr_fixture()
    comps = [
        Comparison(point1=1, point2=2, darker="2", weight=1.0),  # correct
        Comparison(point1=1, point2=3, darker="E", weight=1.0),  # correct
        Comparison(point1=2, point2=3, darker="2", weight=2.0),  # wrong: 3 lighter
    ]
    js = JudgementSet(points=points, comparisons=comps)
    # disagreement = 2 of total weight 4
    assert abs(whdr(refl, js) - 0.5) < 1e-12

    all_right = JudgementSet(points=points, comparisons=comps[:2])
    assert whdr(refl, all_right) == 0.0


def test_whdr_threshold_boundary():
    # ratio exactly at 1 + delta must predict E (strict inequality)
    data = np.zeros((1, 2, 3))
    data[0, 0] = 0.55
    data[0, 1] = 0.5
    refl = _img(data)
    points = [JudgementPoint(id=1, x=0.25, y=0.5), JudgementPoint(id=2, x=0.75, y=0.5)]
    js_e = JudgementSet(
        points=points, comparisons=[Comparison(point1=1, point2=2, darker="E")]
    )
    assert whdr(refl, js_e, delta=0.10) == 0.0
    # nudge past the threshold: now "2" is predicted
    data[0, 0] = 0.5501
    refl2 = _img(data)
    js_2 = JudgementSet(
        points=points, comparisons=[Comparison(point1=1, point2=2, darker="2")]
    )
    assert whdr(refl2, js_2, delta=0.10) == 0.0


def test_whdr_weighted():
    refl, points = _whdr_fixture()
    comps = [
        Comparison(point1=1, point2=2, darker="2", weight=3.0),
        Comparison(point1=1, point2=2, darker="1", weight=1.0),
    ]
    js = JudgementSet(points=points, comparisons=comps)
    assert abs(whdr(refl, js) - 0.25) < 1e-12


def test_whdr_true_reflectance_scores_zero(rng):
    from intrinsic.datasets import MondrianConfig, gen_judgements, gen_mondrian
    t = gen_mondrian(MondrianConfig(seed=77))
    js = gen_judgements(t, 100, 0.10, rng)
    assert whdr(t.reflectance, js) == 0.0


def test_whdr_scale_invariant(rng):
    from intrinsic.datasets import MondrianConfig, gen_judgements, gen_mondrian
    t = gen_mondrian(MondrianConfig(seed=78))
    js = gen_judgements(t, 50, 0.10, rng)
    scaled = _img(0.37 * t.reflectance.data)
    assert whdr(scaled, js) == whdr(t.reflectance, js)


def test_whdr_contract_errors():
    refl, points = _whdr_fixture()
    with pytest.raises(ContractError):
        whdr(refl, JudgementSet(points=points, comparisons=[]))
    zero_w = JudgementSet(
        points=points,
        comparisons=[Comparison(point1=1, point2=2, darker="E", weight=0.0)],
    )
    with pytest.raises(ContractError):
        whdr(refl, zero_w)


def test_judgement_set_validation():
    points = [JudgementPoint(id=1, x=0.5, y=0.5), JudgementPoint(id=1, x=0.1, y=0.1)]
    with pytest.raises(ContractError):
        JudgementSet(points=points, comparisons=[])
    with pytest.raises(ContractError):
        JudgementSet(
            points=[JudgementPoint(id=1, x=0.5, y=0.5)],
            comparisons=[Comparison(point1=1, point2=99, darker="E")],
        )
    with pytest.raises(ContractError):
        JudgementPoint(id=1, x=1.5, y=0.5)
    with pytest.raises(ContractError):
        Comparison(point1=1, point2=2, darker="E", weight=-1.0)


# ---------------------------------------------------------------------------
# Cross-image reconstruction error

def test_mpre_single_pixel_fixture():
    # two 1x1 images: I1 = 1, I2 = 2; decompositions R = 1, S_i = I_i.
    # every swapped reconstruction is exact, so the error is 0
    one = _img(np.full((1, 1, 3), 1.0))
    two = _img(np.full((1, 1, 3), 2.0))
    s1 = _img(np.full((1, 1, 1), 1.0))
    s2 = _img(np.full((1, 1, 1), 2.0))
    r = _img(np.full((1, 1, 3), 1.0))
    assert mpre([(one, r, s1), (two, r, s2)]) < 1e-24


def test_mpre_hand_value():
    # deliberately wrong reflectance on the second image:
    # R2 = (2, 0, 0) vs I composed of ones; compute the four terms by hand
    i1 = _img(np.full((1, 1, 3), 1.0))
    i2 = _img(np.full((1, 1, 3), 1.0))
    s = _img(np.full((1, 1, 1), 1.0))
    r1 = _img(np.full((1, 1, 3), 1.0))
    r2 = _img(np.array([2.0, 0.0, 0.0]).reshape(1, 1, 3))

    def si(est, ref):
        est, ref = np.ravel(est), np.ravel(ref)
        alpha = float(est @ ref) / float(ref @ ref)
        return float(((est - alpha * ref) ** 2).mean())

    expect = (
        si(r1.data, i1.data) + si(r2.data, i1.data)
        + si(r1.data, i2.data) + si(r2.data, i2.data)
    ) / 4.0
    got = mpre([(i1, r1, s), (i2, r2, s)])
    assert_close(got, expect, 1e-13)
    assert got > 0.1


def test_mpre_perfect_decomposition_zero(rng):
    from intrinsic.datasets import MondrianConfig, gen_real_pair
    group, (reflectance, shadings) = gen_real_pair(MondrianConfig(seed=12), 3)
    triples = [
        (img, reflectance, sh) for img, sh in zip(group.images, shadings)
    ]
    assert mpre(triples) < 1e-20


def test_mpre_contract():
    with pytest.raises(ContractError):
        mpre([])
    one = _img(np.full((2, 2, 3), 1.0))
    s_bad = _img(np.full((2, 2, 3), 1.0))  # 3 channels: not a shading
    with pytest.raises(DimensionError):
        mpre([(one, one, s_bad)])


# ---------------------------------------------------------------------------
# decompose / evaluate_scene

def _tiny_net():
    return IntrinsicNet(NetConfig(levels=2, base_channels=4, seed=0))


def test_decompose_handles_odd_sizes(rng):
    net = _tiny_net()
    img = ImageF(rng.uniform(0.1, 1, (10, 13, 3)))
    refl, shad = decompose(net, img, filtered=False)
    assert refl.data.shape == (10, 13, 3)
    assert shad.data.shape == (10, 13, 1)
    assert refl.data.min() > 0 and shad.data.min() > 0


def test_decompose_filtered_smooths(rng):
    from intrinsic.bilateral import BilateralParams
    net = _tiny_net()
    img = ImageF(rng.uniform(0.1, 1, (8, 8, 3)))
    raw, _ = decompose(net, img, filtered=False)
    smooth, _ = decompose(
        net, img, bilateral_params=BilateralParams(gamma=500.0, backend="dense")
    )
    assert not np.array_equal(raw.data, smooth.data)
    # smoothing reduces total variation of the reflectance
    def tv(a):
        return np.abs(np.diff(a, axis=0)).sum() + np.abs(np.diff(a, axis=1)).sum()
    assert tv(smooth.data) < tv(raw.data)


def _oracle_fn(reflectance, shading):
    def fn(img):
        return reflectance, shading
    return fn


def test_evaluate_scene_synthetic_keys(rng):
    from intrinsic.datasets import MondrianConfig, gen_mondrian
    t = gen_mondrian(MondrianConfig(width=16, height=16, seed=5))
    scene = EvalScene(
        scene_id="s", kind="synthetic", images=[t.input],
        reflectance_gt=t.reflectance, shading_gt=t.shading,
    )
    fn = _oracle_fn(t.reflectance, t.shading)
    report = evaluate_scene(fn, scene, ["simse", "silmse"],
                            MetricConfig(lmse_window_frac=0.5))
    assert set(report) == {"simse", "silmse"}
    assert report["simse"]["r"] == 0.0
    assert report["simse"]["s"] == 0.0
    assert report["silmse"]["r"] < 1e-24

    only = evaluate_scene(fn, scene, ["simse"])
    assert set(only) == {"simse"}


def test_evaluate_scene_judgement(rng):
    from intrinsic.datasets import MondrianConfig, gen_judgements, gen_mondrian
    t = gen_mondrian(MondrianConfig(width=16, height=16, seed=6))
    js = gen_judgements(t, 30, 0.10, rng)
    scene = EvalScene(scene_id="j", kind="judgement", images=[t.input], judgements=js)
    report = evaluate_scene(_oracle_fn(t.reflectance, t.shading), scene, ["whdr"])
    assert report == {"whdr": 0.0}


def test_evaluate_scene_real(rng):
    from intrinsic.datasets import MondrianConfig, gen_real_pair
    cfg = MondrianConfig(width=16, height=16, seed=7)
    group, (reflectance, shadings) = gen_real_pair(cfg, 2)
    scene = EvalScene(scene_id="r", kind="real", images=list(group.images))

    calls = {"n": 0}
    def fn(img):
        i = calls["n"]
        calls["n"] += 1
        return reflectance, shadings[i]
    report = evaluate_scene(fn, scene, ["mpre"])
    assert report["mpre"] < 1e-20


def test_evaluate_scene_kind_mismatch(rng):
    from intrinsic.datasets import MondrianConfig, gen_mondrian
    t = gen_mondrian(MondrianConfig(width=16, height=16, seed=8))
    scene = EvalScene(
        scene_id="s", kind="synthetic", images=[t.input],
        reflectance_gt=t.reflectance, shading_gt=t.shading,
    )
    fn = _oracle_fn(t.reflectance, t.shading)
    with pytest.raises(ConfigError):
        evaluate_scene(fn, scene, ["whdr"])
    with pytest.raises(ConfigError):
        evaluate_scene(fn, scene, ["simse", "mpre"])
    with pytest.raises(ConfigError):
        evaluate_scene(fn, scene, ["unknown"])
    with pytest.raises(ConfigError):
        evaluate_scene(fn, scene, [])


def test_evaluate_scene_resizes_large_real_inputs(rng):
    sizes = []
    def fn(img):
        sizes.append((img.height, img.width))
        r = ImageF(np.full((img.height, img.width, 3), 0.5))
        s = ImageF(img.data.mean(axis=2, keepdims=True) * 2.0)
        return r, s
    big = ImageF(rng.uniform(0.1, 1, (8, 20, 3)))
    scene = EvalScene(scene_id="r", kind="real", images=[big, big])
    evaluate_scene(fn, scene, ["mpre"], MetricConfig(mpre_resize=10))
    assert sizes == [(4, 10), (4, 10)]


def test_metric_config_validation():
    with pytest.raises(ConfigError):
        MetricConfig(whdr_delta=-0.1)
    with pytest.raises(ConfigError):
        MetricConfig(lmse_window_frac=0.0)
    with pytest.raises(ConfigError):
        MetricConfig(lmse_stride_frac=-1.0)
    with pytest.raises(ConfigError):
        MetricConfig(mpre_resize=0)
