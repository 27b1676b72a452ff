"""Analytic-vs-numeric gradient checks for every differentiable
operation with bespoke math. Each check builds a tiny float64 instance,
backpropagates a random scalar projection of the op's outputs, and
compares against central finite differences of the same scalar.

Instances are resampled when they land too close to a kink (argmax
flips, LeakyReLU corners, L1 at zero) since finite differences straddle
such points.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from torch.func import functional_call

from . import hyperdecoder, losses, sawm
from .errors import NumericError
from .oracle import finite_diff_grad

TOLERANCE = 1e-4
POINTS = 10


@dataclasses.dataclass
class OpReport:
    name: str
    worst_rel_err: float
    points: int
    passed: bool


def _rel_err(analytic, numeric) -> float:
    diff = np.abs(analytic - numeric).max()
    # the floor absorbs finite-difference noise (~1e-11 at eps=1e-5) on
    # parameters whose true gradient is exactly zero
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-6)
    return float(diff / scale)


def _check_grads(torch_fn, params, rng, eps=1e-5) -> float:
    """torch_fn(list of float64 tensors) -> list of output tensors;
    returns the worst relative error across params."""
    leaves = [torch.tensor(p, dtype=torch.float64, requires_grad=True)
              for p in params]
    outs = torch_fn(leaves)
    probes = [torch.tensor(rng.standard_normal(tuple(o.shape)),
                           dtype=torch.float64) for o in outs]
    scalar = sum((o * r).sum() for o, r in zip(outs, probes))
    scalar.backward()
    analytic = [leaf.grad.numpy().copy() if leaf.grad is not None
                else np.zeros(p.shape) for leaf, p in zip(leaves, params)]

    def f(values):
        tensors = [torch.tensor(v, dtype=torch.float64) for v in values]
        with torch.no_grad():
            outs = torch_fn(tensors)
            return float(sum((o * r).sum()
                             for o, r in zip(outs, probes)))

    numeric = finite_diff_grad(f, [np.array(p, dtype=np.float64)
                                   for p in params], eps=eps)
    return max(_rel_err(a, n) for a, n in zip(analytic, numeric))


def _module_params(module) -> tuple:
    """(names, float64 value arrays) in named_parameters order."""
    names, values = [], []
    for name, p in module.named_parameters():
        names.append(name)
        values.append(p.detach().double().numpy().copy())
    return names, values


def _randomize(module, rng, scale=0.4) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.tensor(
                rng.standard_normal(tuple(p.shape)) * scale))


# ---------------------------------------------------------------------------
# per-op checks; each returns the worst relative error for one instance


def _check_saliency(rng) -> float:
    p, d, f = 5, 4, 3
    params = [rng.standard_normal((p, d)) * 0.5,
              rng.standard_normal((p, d)) * 0.5,
              rng.standard_normal((p, f)),
              rng.standard_normal(f),
              np.asarray(0.5 + rng.random()),
              np.asarray(0.5 + rng.random())]

    def torch_fn(t):
        return [sawm.saliency_scores(t[0], t[1], t[2], t[3], t[4], t[5])]

    return _check_grads(torch_fn, params, rng)


def _check_rollout(rng) -> float:
    n, dz, dc = 2, 4, 4
    transition = sawm.RolloutTransition(dz, dc).double()
    _randomize(transition, rng)
    names, weights = _module_params(transition)
    z0 = rng.standard_normal((n, dz)) * 0.5
    o_t = rng.standard_normal((3, dc)) * 0.5
    params = weights + [z0, o_t]

    def torch_fn(t):
        mapping = dict(zip(names, t[:len(names)]))
        states = functional_call(transition, mapping, (t[-2], t[-1], 2))
        return [torch.stack(states)]

    return _check_grads(torch_fn, params, rng)


def _check_affinity(rng) -> float:
    n, length, dim = 3, 4, 4
    head = hyperdecoder.AffinityHead(dim).double()
    _randomize(head, rng)
    names, weights = _module_params(head)
    z = rng.standard_normal((n, dim))
    x = rng.standard_normal((length, dim))
    params = weights + [z, x]

    def torch_fn(t):
        mapping = dict(zip(names, t[:len(names)]))
        return [functional_call(head, mapping, (t[-2], t[-1]))]

    return _check_grads(torch_fn, params, rng)


def _check_incidence(rng) -> float:
    dim, n_visual, length, k = 4, 3, 3, 2
    head = hyperdecoder.IncidenceAttention(dim).double()
    while True:
        _randomize(head, rng)
        names, weights = _module_params(head)
        nodes = rng.standard_normal((n_visual + length, dim))
        e_feats = rng.standard_normal((n_visual, dim))
        members = torch.tensor(
            np.stack([rng.choice(length, size=k, replace=False)
                      for _ in range(n_visual)]), dtype=torch.int64)
        # LeakyReLU kinks: resample until every incident logit clears 0
        with torch.no_grad():
            u = head.w(torch.tensor(nodes)) @ head.a_node
            w = head.w(torch.tensor(e_feats)) @ head.a_edge
            logits = u.unsqueeze(1) + w.unsqueeze(0)
            if logits.abs().min() > 1e-3:
                break
    params = weights + [nodes, e_feats]

    def torch_fn(t):
        mapping = dict(zip(names, t[:len(names)]))
        h, _ = functional_call(head, mapping,
                               (t[-2], t[-1], members, n_visual))
        return [h]

    return _check_grads(torch_fn, params, rng)


def _check_hypergraph_conv(rng) -> float:
    n, e, dim = 5, 3, 4
    h = rng.random((n, e)) * 0.8 + 0.2
    h[rng.random((n, e)) < 0.3] = 0.0
    # degrees sit behind an epsilon clamp; an empty row or column would
    # put the finite difference right on that boundary
    for i in range(n):
        if not h[i].any():
            h[i, int(rng.integers(e))] = 0.5
    for j in range(e):
        if not h[:, j].any():
            h[int(rng.integers(n)), j] = 0.5
    params = [rng.standard_normal((n, dim)),
              h,
              rng.random(e) + 0.5,
              rng.standard_normal((dim, dim))]

    def torch_fn(t):
        return [hyperdecoder.hypergraph_conv(t[0], t[1], t[2], t[3])]

    return _check_grads(torch_fn, params, rng)


def _check_mld(rng) -> float:
    dim, n_v, n_t = 4, 3, 2
    mld = hyperdecoder.MLDAttention(dim, blocks=2, heads=2,
                                    dropout=0.0).double()
    _randomize(mld, rng)
    names, weights = _module_params(mld)
    o_v = rng.standard_normal((n_v, dim)) * 0.5
    o_t = rng.standard_normal((n_t, dim)) * 0.5
    params = weights + [o_v, o_t]

    def torch_fn(t):
        mapping = dict(zip(names, t[:len(names)]))
        return [functional_call(mld, mapping, (t[-2], t[-1]))]

    return _check_grads(torch_fn, params, rng)


def _check_ground(rng) -> float:
    dim, n, grid = 6, 3, 4
    head = hyperdecoder.GroundHead(dim, grid).double()
    boxes = torch.tensor([[0.1, 0.1, 0.4, 0.5],
                          [0.3, 0.2, 0.9, 0.8],
                          [0.5, 0.4, 0.7, 0.9]], dtype=torch.float64)
    while True:
        _randomize(head, rng)
        names, weights = _module_params(head)
        feats = rng.standard_normal((n, dim))
        with torch.no_grad():
            probs = head(torch.tensor(feats), boxes).probs
        top2 = torch.topk(probs, 2).values
        # a stable argmax keeps the offset head differentiable here
        if float(top2[0] - top2[1]) > 1e-2:
            break
    params = weights + [feats]

    def torch_fn(t):
        mapping = dict(zip(names, t[:len(names)]))
        out = functional_call(head, mapping, (t[-1], boxes))
        return [out.probs, out.box, out.S_lat]

    return _check_grads(torch_fn, params, rng)


def _check_rollout_loss(rng) -> float:
    cfg = losses.LossConfig()
    maps = rng.random((3, 12)) * 0.8 + 0.1
    target = (rng.random(12) > 0.6).astype(np.float64)

    def torch_fn(t):
        return [losses.rollout_loss(t[0], torch.tensor(target), cfg)]

    return _check_grads(torch_fn, [maps], rng)


def _check_grounding_loss(rng) -> float:
    cfg = losses.LossConfig()
    n = 4
    gt_box = np.array([0.2, 0.3, 0.6, 0.7])
    s_hat = torch.tensor((rng.random((2, 2)) > 0.5).astype(np.float64))
    while True:
        probs = rng.random(n) * 0.8 + 0.1
        s_lat = rng.random((2, 2)) * 0.8 + 0.1
        box = rng.random(4) * 0.8 + 0.1
        # L1 terms kink where prediction meets target
        if (np.abs(box - gt_box).min() > 1e-3
                and np.abs(s_lat - s_hat.numpy()).min() > 1e-3):
            break

    def torch_fn(t):
        return [losses.grounding_loss(t[0], 1, t[1], s_hat, t[2],
                                      torch.tensor(gt_box), cfg)]

    return _check_grads(torch_fn, [probs, s_lat, box], rng)


CHECKS = (
    ("saliency_scores", _check_saliency),
    ("rollout", _check_rollout),
    ("affinity", _check_affinity),
    ("incidence_attention", _check_incidence),
    ("hypergraph_conv", _check_hypergraph_conv),
    ("mld_attention", _check_mld),
    ("ground", _check_ground),
    ("rollout_loss", _check_rollout_loss),
    ("grounding_loss", _check_grounding_loss),
)


def run_all(points: int = POINTS, tolerance: float = TOLERANCE,
            seed: int = 0) -> list:
    reports = []
    for name, check in CHECKS:
        rng = np.random.default_rng(seed * 1000 + len(reports))
        worst = max(check(rng) for _ in range(points))
        reports.append(OpReport(name=name, worst_rel_err=worst,
                                points=points,
                                passed=worst <= tolerance))
    return reports


def require_all(points: int = POINTS, tolerance: float = TOLERANCE,
                seed: int = 0) -> list:
    reports = run_all(points, tolerance, seed)
    bad = [r for r in reports if not r.passed]
    if bad:
        detail = ", ".join(f"{r.name} ({r.worst_rel_err:.2e})"
                           for r in bad)
        raise NumericError(f"gradient check failed for: {detail}")
    return reports
