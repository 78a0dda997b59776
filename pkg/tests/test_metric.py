import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import ap_from_flags, chamfer_oracle, greedy_flags

from mapforge.errors import EmptyGeometry
from mapforge.geometry import MapElement, make_element
from mapforge.metric import (
    DEFAULT_THRESHOLDS,
    ScoredElement,
    ap_at_threshold,
    average_precision,
    chamfer_distance,
    evaluate,
)
from mapforge.synthetic import PerturbSpec, SceneRecipe, gen_scene, perturb


def _divider(x, n=20):
    return make_element("divider", [(x, -10.0), (x, 10.0)], n)


# ---------------------------------------------------------------- chamfer


def test_chamfer_examples():
    a = np.random.default_rng(0).random((7, 2))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance([(0, 0)], [(3, 4)]) == 5.0
    p = np.column_stack([np.zeros(20), np.linspace(0, 10, 20)])
    q = p + [1.0, 0.0]
    assert chamfer_distance(p, q) == pytest.approx(chamfer_oracle(p, q), abs=1e-12)
    assert chamfer_distance(p, q) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(EmptyGeometry):
        chamfer_distance(np.zeros((0, 2)), a)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10**6))
def test_chamfer_symmetric_and_matches_oracle(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 2)) * 5, rng.normal(size=(m, 2)) * 5
    d = chamfer_distance(a, b)
    assert d == pytest.approx(chamfer_distance(b, a), abs=1e-12)
    assert d == pytest.approx(chamfer_oracle(a, b), abs=1e-12)


# ---------------------------------------------------------------- AP


def test_ap_hand_curve():
    flags = [1, 0, 1, 1]
    # interpolated precision 1 on [0, 1/3], 3/4 on (1/3, 1]
    assert average_precision(flags, 3) == pytest.approx(1 / 3 + (2 / 3) * 0.75, abs=1e-15)
    assert average_precision(flags, 3) == pytest.approx(ap_from_flags(flags, 3), abs=1e-15)


@given(st.lists(st.booleans(), max_size=30), st.integers(1, 30))
def test_ap_matches_enumeration(flags, num_gt):
    if sum(flags) > num_gt:
        return
    assert average_precision(flags, num_gt) == pytest.approx(ap_from_flags(flags, num_gt), abs=1e-12)


def test_ap_at_threshold_hand_sequence():
    gts = {0: [_divider(-6), _divider(0), _divider(6)]}
    preds = [
        ScoredElement(_divider(-6.1), 0.9),
        ScoredElement(_divider(12), 0.8),  # far from everything
        ScoredElement(_divider(0.2), 0.7),
        ScoredElement(_divider(6.3), 0.6),
    ]
    assert ap_at_threshold(preds, gts, "divider", 0.5) == pytest.approx(5 / 6, abs=1e-12)
    assert np.isnan(ap_at_threshold(preds, gts, "boundary", 0.5))


def test_perfect_and_far_predictions():
    scene = gen_scene(SceneRecipe(seed=3))
    gts = {0: list(scene.elements)}
    perfect = [ScoredElement(el, 1.0) for el in scene.elements]
    assert evaluate(perfect, gts).mAP == 1.0
    far = [ScoredElement(el.with_points(el.points + [200.0, 0.0]), 1.0) for el in scene.elements]
    assert evaluate(far, gts).mAP == 0.0
    assert evaluate([], gts).mAP == 0.0


def test_each_gt_claimed_once():
    gts = {0: [_divider(0)]}
    preds = [ScoredElement(_divider(0), 0.9), ScoredElement(_divider(0), 0.8)]
    # second duplicate is a false positive
    assert ap_at_threshold(preds, gts, "divider", 1.0) == 1.0
    res = evaluate(preds + [ScoredElement(_divider(0), 0.95, scene_id=9)], gts)
    assert res.mAP == 1.0  # unknown scene ids are ignored


def _oracle_ap(preds, gts, cls, tau):
    p = [(s.score, s.scene_id, s.element.points) for s in preds if s.element.cls.value == cls]
    g = {sid: [e.points for e in els if e.cls.value == cls] for sid, els in gts.items()}
    n = sum(len(v) for v in g.values())
    return ap_from_flags(greedy_flags(p, g, tau), n)


@pytest.mark.parametrize("seed", range(4))
def test_evaluate_matches_oracle_on_perturbed_scenes(seed):
    gts, preds = {}, []
    for s in range(3):
        scene = gen_scene(SceneRecipe(seed=100 * seed + s, n_points=8))
        gts[s] = list(scene.elements)
        preds += perturb(scene, PerturbSpec(sigma=0.6, drop=0.2, spurious=0.5), seed=s, scene_id=s)
    res = evaluate(preds, gts)
    for cls, aps in res.per_threshold.items():
        for tau, v in aps.items():
            assert v == pytest.approx(_oracle_ap(preds, gts, cls, tau), abs=1e-12)
    assert res.mAP == pytest.approx(np.mean([np.mean(list(a.values())) for a in res.per_threshold.values()]))


@pytest.mark.parametrize("seed", range(10))
def test_ap_invariances(seed):
    scene = gen_scene(SceneRecipe(seed=seed, n_points=10))
    preds = perturb(scene, PerturbSpec(sigma=0.8, drop=0.1, spurious=1.0), seed=seed)
    gts = {0: list(scene.elements)}
    for cls in ("ped_crossing", "divider", "boundary"):
        aps = [ap_at_threshold(preds, gts, cls, t) for t in (0.25, 0.5, 1.0, 1.5, 3.0)]
        assert all(a <= b + 1e-15 for a, b in zip(aps, aps[1:]))
        # strictly monotone score transform
        warped = [ScoredElement(p.element, p.score**3 / 7.0, p.scene_id) for p in preds]
        assert ap_at_threshold(warped, gts, cls, 1.0) == aps[2]
        # uniform rescaling of coordinates and threshold (a power of two keeps it exact)
        big = [ScoredElement(p.element.with_points(p.element.points * 4.0), p.score) for p in preds]
        big_gts = {0: [g.with_points(g.points * 4.0) for g in scene.elements]}
        assert ap_at_threshold(big, big_gts, cls, 4.0) == aps[2]


def test_noise_level_orders_map():
    gts, low, high = {}, [], []
    for s in range(200):
        scene = gen_scene(SceneRecipe(seed=s, n_points=10))
        gts[s] = list(scene.elements)
        low += perturb(scene, PerturbSpec(sigma=0.2), seed=s, scene_id=s)
        high += perturb(scene, PerturbSpec(sigma=1.0), seed=s, scene_id=s)
    assert evaluate(low, gts).mAP > evaluate(high, gts).mAP


def test_result_serialization():
    gts = {0: [_divider(0)]}
    res = evaluate([ScoredElement(_divider(0.1), 0.5)], gts)
    d = res.to_dict()
    assert d["thresholds"] == list(DEFAULT_THRESHOLDS)
    assert set(d["per_threshold"]["divider"]) == {"0.5", "1.0", "1.5"}
    assert d["mAP"] == 1.0
    assert evaluate([], {}).to_dict()["mAP"] is None


def test_score_must_be_finite():
    with pytest.raises(ValueError):
        ScoredElement(MapElement("divider", [(0, 0), (1, 1)]), float("nan"))
