import math

import numpy as np
import pytest

from worldground import oracle
from worldground.errors import NumericError, ValidationError


def test_iou_identity_and_disjoint():
    a = (0.0, 0.0, 1.0, 1.0)
    assert oracle.iou(a, a) == 1.0
    assert oracle.iou(a, (2.0, 2.0, 3.0, 3.0)) == 0.0


def test_iou_quarter_overlap():
    # areas 4 and 4, intersection 1, union 7
    v = oracle.iou((0, 0, 2, 2), (1, 1, 3, 3))
    assert abs(v - 1.0 / 7.0) < 1e-12


def test_iou_random_pairs_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        pts = rng.random(8)
        a = (min(pts[0], pts[1]), min(pts[2], pts[3]),
             max(pts[0], pts[1]), max(pts[2], pts[3]))
        b = (min(pts[4], pts[5]), min(pts[6], pts[7]),
             max(pts[4], pts[5]), max(pts[6], pts[7]))
        v = oracle.iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == oracle.iou(b, a)


def test_iou_rejects_malformed():
    with pytest.raises(ValidationError):
        oracle.iou((1, 0, 0, 1), (0, 0, 1, 1))


def test_finite_diff_square():
    g = oracle.finite_diff_grad(lambda p: float(p[0][0] ** 2),
                                [np.array([3.0])])
    assert abs(g[0][0] - 6.0) < 1e-6


def test_finite_diff_constant_is_zero():
    g = oracle.finite_diff_grad(lambda p: 7.0, [np.ones((2, 2))])
    assert np.all(g[0] == 0.0)


def test_finite_diff_rejects_nonfinite():
    def f(p):
        return math.inf if p[0][0] > 3.0 else 0.0
    with pytest.raises(NumericError):
        oracle.finite_diff_grad(f, [np.array([3.0])])


def test_dense_hgconv_identity_instance():
    # 1 node, 1 edge, H=[1], W_e=I: all normalizers are 1
    x = np.array([[0.3, -0.7]])
    h = np.array([[1.0]])
    theta = np.eye(2)
    out = oracle.dense_hgconv(x, h, np.ones(1), theta,
                              activation=lambda v: v)
    assert np.allclose(out, x, atol=1e-12)


def test_dense_hgconv_shared_edge_mean():
    # 2 nodes on one edge, identity weights: each output is the mean
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    h = np.ones((2, 1))
    out = oracle.dense_hgconv(x, h, np.ones(1), np.eye(2),
                              activation=lambda v: v)
    assert np.allclose(out, [[0.5, 0.5], [0.5, 0.5]], atol=1e-12)


def test_dense_hgconv_node_cap():
    x = np.zeros((65, 2))
    h = np.ones((65, 1))
    with pytest.raises(ValidationError):
        oracle.dense_hgconv(x, h, np.ones(1), np.eye(2))


def test_ref_losses_match_frozen_values():
    # 2x2 grid, one positive, uniform p=0.5: 1 - 1.5/2.5
    p = np.full(4, 0.5)
    g = np.array([1.0, 0.0, 0.0, 0.0])
    assert abs(oracle.ref_tversky(p, g, 0.5, 0.5, 1.0) - 0.4) < 1e-12
    # focal at p_t=0.5: loss contribution is -(0.25 * 0.25 * ln 0.5)
    h = oracle.ref_focal(np.full(1, 0.5), np.ones(1), 0.25, 2.0)
    assert abs(h - 0.043321) < 1e-6
    assert abs(h + 0.25 * 0.25 * math.log(0.5)) < 1e-12
