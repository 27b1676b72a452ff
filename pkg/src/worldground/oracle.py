"""Brute-force reference implementations and numeric checkers.

Everything here is written with explicit loops over plain numpy arrays and
imports nothing from the model modules, so a bug in the main path cannot
validate itself. Weight matrices follow the x @ W.T + b convention of the
layers they mirror.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ValidationError


# ---------------------------------------------------------------------------
# metrics and checkers


def iou(box_a, box_b) -> float:
    for name, box in (("A", box_a), ("B", box_b)):
        x0, y0, x1, y1 = box
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(f"malformed box {name}: {tuple(box)}")
    ix = max(0.0, min(box_a[2], box_b[2]) - max(box_a[0], box_b[0]))
    iy = max(0.0, min(box_a[3], box_b[3]) - max(box_a[1], box_b[1]))
    inter = ix * iy
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    return inter / (area_a + area_b - inter)


def finite_diff_grad(f, params, eps: float = 1e-5):
    """Central differences of a scalar function w.r.t. a list of float64
    arrays. Returns gradients of matching shapes."""
    grads = []
    for pi, param in enumerate(params):
        param = np.asarray(param, dtype=np.float64)
        grad = np.zeros_like(param)
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.shape[0]):
            keep = flat[i]
            flat[i] = keep + eps
            hi = f(params)
            flat[i] = keep - eps
            lo = f(params)
            flat[i] = keep
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NumericError(f"non-finite value while perturbing "
                                   f"param {pi}, flat index {i}")
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(grad)
    return grads


# ---------------------------------------------------------------------------
# activation helpers (local copies on purpose)


def _softmax_row(row):
    peak = max(row)
    exps = [math.exp(v - peak) for v in row]
    total = sum(exps)
    return [v / total for v in exps]


def _gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _elu(x: float) -> float:
    return x if x > 0 else math.exp(x) - 1.0


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def _linear(x, w, b=None):
    """y = x @ w.T + b for a single vector x."""
    out = np.zeros(w.shape[0], dtype=np.float64)
    for o in range(w.shape[0]):
        acc = 0.0
        for i in range(w.shape[1]):
            acc += x[i] * w[o, i]
        out[o] = acc + (b[o] if b is not None else 0.0)
    return out


# ---------------------------------------------------------------------------
# dense hypergraph convolution (the A2 reference)


def dense_hgconv(X, H, W_e, theta, activation=_elu):
    """Literal dense evaluation of the hypergraph convolution with
    membership-count degrees: D_v(i) = sum_j W_e(j) [H_ij != 0],
    D_e(j) = sum_i [H_ij != 0]; message weights use H's values."""
    X = np.asarray(X, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    W_e = np.asarray(W_e, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    n, e = H.shape
    if n > 64:
        raise ValidationError("dense_hgconv is for tiny instances (<= 64 "
                              f"nodes); got {n}")
    d_v = np.zeros(n)
    d_e = np.zeros(e)
    for i in range(n):
        for j in range(e):
            if H[i, j] != 0.0:
                d_v[i] += W_e[j]
                d_e[j] += 1.0
    mid = np.zeros((n, X.shape[1]))
    for i in range(n):
        for ii in range(n):
            coupling = 0.0
            for j in range(e):
                coupling += (H[i, j] * W_e[j] / d_e[j] * H[ii, j]
                             if H[i, j] != 0.0 and H[ii, j] != 0.0 else 0.0)
            if coupling == 0.0:
                continue
            weight = coupling / math.sqrt(d_v[i]) / math.sqrt(d_v[ii])
            for c in range(X.shape[1]):
                mid[i, c] += weight * X[ii, c]
    out = np.zeros((n, theta.shape[1]))
    for i in range(n):
        for o in range(theta.shape[1]):
            acc = 0.0
            for c in range(theta.shape[0]):
                acc += mid[i, c] * theta[c, o]
            out[i, o] = activation(acc)
    return out


# ---------------------------------------------------------------------------
# scalar references for the model operations


def ref_cross_modal(F_v, F_c, w_q_vis, w_k_t, w_q_tex, w_k_vis,
                    w_v_vis, w_v_tex):
    """Returns (A_t, A_v, O_t, O_v) via explicit loops."""
    F_v = np.asarray(F_v, dtype=np.float64)
    F_c = np.asarray(F_c, dtype=np.float64)
    p, d = F_v.shape
    length = F_c.shape[0]
    qv = np.stack([_linear(F_v[i], w_q_vis) for i in range(p)])
    kt = np.stack([_linear(F_c[j], w_k_t) for j in range(length)])
    qt = np.stack([_linear(F_c[j], w_q_tex) for j in range(length)])
    kv = np.stack([_linear(F_v[i], w_k_vis) for i in range(p)])
    vv = np.stack([_linear(F_v[i], w_v_vis) for i in range(p)])
    vt = np.stack([_linear(F_c[j], w_v_tex) for j in range(length)])
    scale = 1.0 / math.sqrt(d)
    a_t = np.zeros((p, length))
    for i in range(p):
        logits = [sum(qv[i, c] * kt[j, c] for c in range(d)) * scale
                  for j in range(length)]
        a_t[i] = _softmax_row(logits)
    a_v = np.zeros((length, p))
    for j in range(length):
        logits = [sum(qt[j, c] * kv[i, c] for c in range(d)) * scale
                  for i in range(p)]
        a_v[j] = _softmax_row(logits)
    o_t = np.zeros((length, d))
    for j in range(length):
        for c in range(d):
            o_t[j, c] = sum(a_t[i, j] * vv[i, c] for i in range(p))
    o_v = np.zeros((p, d))
    for i in range(p):
        for c in range(d):
            o_v[i, c] = sum(a_v[j, i] * vt[j, c] for j in range(length))
    return a_t, a_v, o_t, o_v


def ref_saliency(F_v, O_v, prior_feat, a_vec, mu, sigma):
    F_v = np.asarray(F_v, dtype=np.float64)
    O_v = np.asarray(O_v, dtype=np.float64)
    prior_feat = np.asarray(prior_feat, dtype=np.float64)
    out = np.zeros(F_v.shape[0])
    for k in range(F_v.shape[0]):
        align = sum(F_v[k, c] * O_v[k, c] for c in range(F_v.shape[1]))
        numerator = sigma * sigma * sum(
            a_vec[i] * prior_feat[k, i] for i in range(len(a_vec)))
        out[k] = numerator / math.exp((1.0 - align) ** 2 / (2.0 * mu))
    return out


def ref_build_current_state(F_o, scores, w1, b1, w2, b2):
    F_o = np.asarray(F_o, dtype=np.float64)
    out = []
    for i in range(F_o.shape[0]):
        gated = np.array([F_o[i, c] * scores[i] + F_o[i, c]
                          for c in range(F_o.shape[1])])
        hidden = _linear(gated, w1, b1)
        hidden = np.array([_gelu(v) for v in hidden])
        out.append(_linear(hidden, w2, b2))
    return np.stack(out)


def ref_rollout(z0, O_t, horizon, gate_w, gate_b, d1_w, d1_b, d2_w, d2_b):
    z0 = np.asarray(z0, dtype=np.float64)
    O_t = np.asarray(O_t, dtype=np.float64)
    ctx = np.array([O_t[:, c].mean() for c in range(O_t.shape[1])])
    states = []
    z = z0
    for _ in range(horizon):
        nxt = np.zeros_like(z)
        for i in range(z.shape[0]):
            joined = np.concatenate([z[i], ctx])
            gate = np.array([_sigmoid(v) for v in
                             _linear(joined, gate_w, gate_b)])
            hidden = np.array([_gelu(v) for v in
                               _linear(joined, d1_w, d1_b)])
            delta = np.tanh(_linear(hidden, d2_w, d2_b))
            nxt[i] = z[i] + gate * delta
        states.append(nxt)
        z = nxt
    return states


def ref_affinity(Z_v, X_t, w_v, w_t, a_v, a_t):
    Z_v = np.asarray(Z_v, dtype=np.float64)
    X_t = np.asarray(X_t, dtype=np.float64)
    n, length = Z_v.shape[0], X_t.shape[0]
    out = np.zeros((n, length))
    for i in range(n):
        zi = _linear(Z_v[i], w_v)
        for j in range(length):
            xj = _linear(X_t[j], w_t)
            out[i, j] = (sum(a_v[c] * zi[c] for c in range(len(a_v)))
                         + sum(a_t[c] * xj[c] for c in range(len(a_t))))
    return out


def ref_incidence(nodes, edge_features, members, n_visual, w, a_node,
                  a_edge, slope=0.2):
    nodes = np.asarray(nodes, dtype=np.float64)
    edge_features = np.asarray(edge_features, dtype=np.float64)
    total = nodes.shape[0]
    n_edges = edge_features.shape[0]
    neighborhoods = []
    for i in range(total):
        if i < n_visual:
            neighborhoods.append([i] if i < n_edges else [])
        else:
            text_idx = i - n_visual
            neighborhoods.append(
                [j for j in range(n_edges) if text_idx in members[j]])
    h = np.zeros((total, n_edges))
    for i in range(total):
        hood = neighborhoods[i]
        if not hood:
            continue
        ui = _linear(nodes[i], w)
        logits = []
        for j in hood:
            ej = _linear(edge_features[j], w)
            raw = (sum(a_node[c] * ui[c] for c in range(len(a_node)))
                   + sum(a_edge[c] * ej[c] for c in range(len(a_edge))))
            logits.append(raw if raw > 0 else slope * raw)
        soft = _softmax_row(logits)
        for j, value in zip(hood, soft):
            h[i, j] = value
    return h


def ref_mld(O_v, O_t, blocks, fuse_w, fuse_b, heads):
    """blocks: list of dicts with q_v, k_v, v_v, q_t, k_t, v_t weight
    matrices. Returns F_out rows for the visual nodes."""
    O_v = np.asarray(O_v, dtype=np.float64)
    O_t = np.asarray(O_t, dtype=np.float64)
    dim = O_v.shape[1]
    hd = dim // heads

    def project(rows, w):
        return np.stack([_linear(rows[i], w) for i in range(rows.shape[0])])

    def attend_mix(q_rows, k_rows, v_rows):
        """Per-head softmax(q k / sqrt(hd)) @ v, heads concatenated."""
        nq, nk = q_rows.shape[0], k_rows.shape[0]
        out = np.zeros((nq, dim))
        for h_i in range(heads):
            lo, hi = h_i * hd, (h_i + 1) * hd
            for i in range(nq):
                logits = [sum(q_rows[i, c] * k_rows[j, c]
                              for c in range(lo, hi)) / math.sqrt(hd)
                          for j in range(nk)]
                weights = _softmax_row(logits)
                for c in range(lo, hi):
                    out[i, c] = sum(weights[j] * v_rows[j, c]
                                    for j in range(nk))
        return out

    collected = []
    for block in blocks:
        qv = project(O_v, block["q_v"])
        kv = project(O_v, block["k_v"])
        vv = project(O_v, block["v_v"])
        qt = project(O_t, block["q_t"])
        kt = project(O_t, block["k_t"])
        vt = project(O_t, block["v_t"])
        new_v = attend_mix(qv, kv, vv) + attend_mix(qv, kt, vt) + O_v
        new_t = attend_mix(qt, kt, vt) + attend_mix(qt, kv, vv) + O_t
        O_v, O_t = new_v, new_t
        collected.append(O_v)
    concat = np.concatenate(collected, axis=1)
    out = np.zeros((O_v.shape[0], fuse_w.shape[0]))
    for i in range(O_v.shape[0]):
        acts = np.array([_gelu(v) for v in concat[i]])
        out[i] = _linear(acts, fuse_w, fuse_b)
    return out


# ---------------------------------------------------------------------------
# loss references


def ref_tversky(p, g, alpha, beta, epsilon):
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    inter = sum(p[i] * g[i] for i in range(len(p)))
    fp = alpha * sum((1.0 - g[i]) * p[i] for i in range(len(p)))
    fn = beta * sum(g[i] * (1.0 - p[i]) for i in range(len(p)))
    return 1.0 - (inter + epsilon) / (inter + fp + fn + epsilon)


def ref_focal(p, g, alpha_t, gamma):
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    total = 0.0
    for i in range(len(p)):
        pi = min(max(p[i], 1e-7), 1.0 - 1e-7)
        p_t = g[i] * pi + (1.0 - g[i]) * (1.0 - pi)
        total += alpha_t * (1.0 - p_t) ** gamma * math.log(p_t)
    return -total / len(p)


def ref_rollout_loss(maps, target, alpha, beta, epsilon, alpha_t, gamma,
                     lambda_tve, lambda_foc):
    maps = np.asarray(maps, dtype=np.float64)
    total = 0.0
    for k in range(maps.shape[0]):
        total += lambda_tve * ref_tversky(maps[k], target, alpha, beta,
                                          epsilon)
        total += lambda_foc * ref_focal(maps[k], target, alpha_t, gamma)
    return total / maps.shape[0]


def ref_grounding_loss(probs, target_index, s_lat, s_hat, box, gt_box,
                       lambda_cls, lambda_reg):
    probs = np.asarray(probs, dtype=np.float64)
    bce = 0.0
    for i in range(len(probs)):
        pi = min(max(probs[i], 1e-7), 1.0 - 1e-7)
        y = 1.0 if i == target_index else 0.0
        bce += -(y * math.log(pi) + (1.0 - y) * math.log(1.0 - pi))
    bce /= len(probs)
    s_lat = np.asarray(s_lat, dtype=np.float64).reshape(-1)
    s_hat = np.asarray(s_hat, dtype=np.float64).reshape(-1)
    mask_l1 = sum(abs(s_lat[i] - s_hat[i])
                  for i in range(len(s_lat))) / len(s_lat)
    box_l1 = sum(abs(box[i] - gt_box[i]) for i in range(4)) / 4.0
    return lambda_cls * bce + lambda_reg * (mask_l1 + box_l1)
