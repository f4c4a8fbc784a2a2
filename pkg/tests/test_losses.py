import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modt import numerics as nx
from modt.encoder import TokenSet
from modt.losses import (
    LossWeights,
    association_loss,
    build_gt_affinity,
    center_loss,
    match_predictions,
    objectness_loss,
    size_loss,
    total_loss,
)
from modt.numerics import GradTape, Tensor, backward, finite_difference_gradient, gradient_error
from modt.scans import GroundTruthObject


def tokens(pos):
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    return TokenSet(Tensor(np.zeros((len(pos), 4))), pos, np.arange(len(pos)))


def box(tid, center, size=(2.0, 2.0, 2.0)):
    return GroundTruthObject(tid, center, size, 0.0)


def test_perfect_affinity_loss_zero():
    a = np.full((3, 3), -1e3)
    np.fill_diagonal(a, 0.0)
    assert association_loss(Tensor(a), np.eye(3)).value.item() == pytest.approx(0.0, abs=1e-12)


def test_half_mass_gives_ln2():
    a = Tensor([[0.0, 0.0], [0.0, 0.0]])
    g = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert association_loss(a, g).value.item() == pytest.approx(math.log(2), abs=1e-15)


def test_empty_g_is_unsupervised():
    term = association_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)))
    assert term.count == 0 and term.value.item() == 0.0


def test_extra_zero_rows_leave_loss_unchanged():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    g = np.eye(3)
    big_a = np.full((6, 6), -50.0)
    big_a[:3, :3] = a
    big_g = np.zeros((6, 6))
    big_g[:3, :3] = g
    # padded columns carry ~zero softmax mass, padded rows carry no G entries
    small = association_loss(Tensor(a), g).value.item()
    big = association_loss(Tensor(big_a), big_g).value.item()
    assert big == pytest.approx(small, abs=1e-12)


def test_association_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    g = np.zeros((4, 4))
    g[0, 1] = g[2, 3] = g[3, 0] = 1.0
    for _ in range(5):
        a = rng.normal(size=(4, 4))
        t = Tensor(a, requires_grad=True)
        with GradTape() as tape:
            loss = association_loss(t, g).value
        analytic = backward(loss, tape)[t]
        numeric = finite_difference_gradient(lambda x: association_loss(Tensor(x), g).value.item(), a)
        assert gradient_error(analytic, numeric) < 1e-4


def test_center_loss_examples():
    assert center_loss(Tensor(np.ones((2, 3))), np.ones((2, 3))).value.item() == 0.0
    assert center_loss(Tensor([[1.0, -2.0, 2.0]]), np.zeros((1, 3))).value.item() == 5.0
    pred = Tensor([[1.0, 1.0, 1.0], [0.0, 5.0, 0.0]])
    assert center_loss(pred, np.zeros((2, 3))).value.item() == 4.0


def test_size_loss_examples():
    assert size_loss(Tensor([[1.0, 2.0, 3.0]]), [[1.0, 2.0, 3.0]]).value.item() == 0.0
    got = size_loss(Tensor([[1.1, 2.2, 3.3]]), [[1.0, 2.0, 3.0]]).value.item()
    assert got == pytest.approx(0.6, abs=1e-12)


def test_size_loss_is_in_meters():
    # log-size 0 decodes to 1 m; the error is measured after exp
    log_size = Tensor(np.zeros((1, 3)))
    assert size_loss(nx.exp(log_size), [[2.0, 2.0, 2.0]]).value.item() == 3.0


def test_total_loss_examples():
    w = LossWeights(lambda_c=0.5, lambda_b=1.0)
    assert total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), w).item() == 5.0
    w0 = LossWeights(lambda_c=0.0, lambda_b=0.0)
    assert total_loss(Tensor(1.5), Tensor(2.0), Tensor(3.0), w0).item() == 1.5
    assert total_loss(Tensor(0.0), Tensor(0.0), Tensor(0.0), LossWeights()).item() == 0.0


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(lambda_c=-1.0)


def test_objectness_bce_value():
    term = objectness_loss(Tensor([[0.0], [0.0]]), np.array([1.0, 0.0]))
    assert term.value.item() == pytest.approx(math.log(2))


def test_no_objects_gives_zero_g():
    g = build_gt_affinity(tokens([[0, 0, 0], [1, 0, 0]]), tokens([[0, 0, 0], [1, 0, 0]]), [], [])
    assert not g.values.any()


def test_static_object_gives_identity_matching():
    pos = [[0.0, 0.0, 1.0], [0.5, 0.0, 1.0], [0.0, 0.5, 1.0]]
    obj = box(7, (0.0, 0.0, 1.0))
    g = build_gt_affinity(tokens(pos), tokens(pos), [obj], [obj]).values
    np.testing.assert_array_equal(g, np.eye(3))


def brute_force_g(pos_t, pos_tm1, objs_t, objs_tm1):
    """For each t token inside a box, the same-track t-1 token at the nearest object-relative offset."""
    def owner(p, objs):
        inside = [o for o in objs if all(abs(p[i] - o.center[i]) <= o.size[i] / 2 for i in range(3))]
        if not inside:
            return None
        return min(inside, key=lambda o: sum((p[i] - o.center[i]) ** 2 for i in range(3)))

    m = max(len(pos_t), len(pos_tm1))
    g = np.zeros((m, m))
    for d, p in enumerate(pos_t):
        o = owner(p, objs_t)
        if o is None:
            continue
        best = None
        for e, q in enumerate(pos_tm1):
            o2 = owner(q, objs_tm1)
            if o2 is None or o2.track_id != o.track_id:
                continue
            cost = sum(((q[i] - o2.center[i]) - (p[i] - o.center[i])) ** 2 for i in range(3))
            if best is None or cost < best[0]:
                best = (cost, e)
        if best:
            g[d, best[1]] = 1.0
    return g


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gt_affinity_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    objs_tm1 = [box(3, (-4.0, 0.0, 1.0)), box(5, (4.0, 0.0, 1.0))]
    shift = rng.uniform(-0.5, 0.5, 3) * [1, 1, 0]
    objs_t = [box(o.track_id, o.center + shift) for o in objs_tm1]
    pos_tm1 = np.concatenate([o.center + rng.uniform(-0.9, 0.9, (3, 3)) for o in objs_tm1] + [[[0.0, 5.0, 0.0]]])
    pos_t = np.concatenate([o.center + rng.uniform(-0.9, 0.9, (3, 3)) for o in objs_t] + [[[0.0, -5.0, 0.0]]])
    got = build_gt_affinity(tokens(pos_t), tokens(pos_tm1), objs_t, objs_tm1).values
    want = brute_force_g(pos_t, pos_tm1, objs_t, objs_tm1)
    np.testing.assert_array_equal(got, want)
    assert np.all(got.sum(axis=1) <= 1)
    # block structure: no links across objects
    assert not got[:3, 3:].any() and not got[3:6, :3].any()


def test_match_predictions_greedy_by_confidence():
    pred = np.array([[0.0, 0, 0], [0.5, 0, 0], [9.0, 0, 0]])
    conf = np.array([0.2, 0.9, 0.8])
    gt = np.array([[0.1, 0, 0], [10.5, 0, 0]])
    assert match_predictions(pred, conf, gt, 2.0) == [(1, 0), (2, 1)]
