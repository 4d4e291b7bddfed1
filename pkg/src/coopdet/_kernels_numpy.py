"""Pure-NumPy implementations of the hot kernels.

Every function here has a jitted twin in ``_kernels_numba`` with the same
signature and semantics; ``backend`` selects which set is active. Callers
(``sparse_ops``, ``boxes``) normalize dtypes before dispatch: indices are
int64, features/weights are contiguous float64.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def conv_active(indices, features, weights, bias, stride, hout, wout):
    """Strided sparse convolution over the active set.

    The output active set is every in-bounds output cell whose receptive
    field touches at least one input cell. Values match a dense
    zero-padded convolution restricted to that set, bias included.
    Output indices come back sorted by linear index (row-major).
    """
    k2, _, cout = weights.shape
    k = int(round(k2 ** 0.5))
    p = k // 2
    n = indices.shape[0]
    if n == 0:
        return np.zeros((0, 2), np.int64), np.zeros((0, cout), np.float64)

    taps = np.arange(k2)
    u = taps // k
    v = taps % k
    rn = indices[:, 0][:, None] + p - u[None, :]
    cn = indices[:, 1][:, None] + p - v[None, :]
    ok = (rn % stride == 0) & (cn % stride == 0)
    ro = rn // stride
    co = cn // stride
    ok &= (ro >= 0) & (ro < hout) & (co >= 0) & (co < wout)

    lin = (ro * wout + co)[ok]
    if lin.size == 0:
        return np.zeros((0, 2), np.int64), np.zeros((0, cout), np.float64)
    cell = np.broadcast_to(np.arange(n)[:, None], (n, k2))[ok]
    tap = np.broadcast_to(taps[None, :], (n, k2))[ok]

    uniq, inv = np.unique(lin, return_inverse=True)
    out = np.zeros((uniq.size, cout), np.float64)
    for t in range(k2):
        sel = tap == t
        if sel.any():
            np.add.at(out, inv[sel], features[cell[sel]] @ weights[t])
    out += bias

    oidx = np.empty((uniq.size, 2), np.int64)
    oidx[:, 0] = uniq // wout
    oidx[:, 1] = uniq % wout
    return oidx, out


def subm_active(indices, features, weights, bias, h, w):
    """Submanifold convolution: outputs only at the input active set."""
    k2, _, cout = weights.shape
    k = int(round(k2 ** 0.5))
    p = k // 2
    n = indices.shape[0]
    out = np.zeros((n, cout), np.float64)
    if n == 0:
        return out

    slot = np.full(h * w, -1, np.int64)
    slot[indices[:, 0] * w + indices[:, 1]] = np.arange(n)
    for t in range(k2):
        dr = t // k - p
        dc = t % k - p
        rr = indices[:, 0] + dr
        cc = indices[:, 1] + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        nb = slot[rr[ok] * w + cc[ok]]
        has = nb >= 0
        rows = np.nonzero(ok)[0][has]
        if rows.size:
            out[rows] += features[nb[has]] @ weights[t]
    out += bias
    return out


def maxpool_keep(indices, scores, window, h, w):
    """Boolean mask of cells that win their window under (score, -lex).

    A cell survives iff no other active cell in its window×window
    neighborhood has a higher score, or an equal score with a lower
    (row, col) lexicographic index.
    """
    n = indices.shape[0]
    keep = np.zeros(n, np.bool_)
    if n == 0:
        return keep
    half = window // 2
    big = np.iinfo(np.int64).max
    lin = indices[:, 0] * w + indices[:, 1]

    smap = np.full((h + 2 * half, w + 2 * half), -np.inf)
    lmap = np.full((h + 2 * half, w + 2 * half), big, np.int64)
    smap[half + indices[:, 0], half + indices[:, 1]] = scores
    lmap[half + indices[:, 0], half + indices[:, 1]] = lin

    best_s = np.full((h, w), -np.inf)
    best_l = np.full((h, w), big, np.int64)
    for dr in range(-half, half + 1):
        for dc in range(-half, half + 1):
            s = smap[half + dr:half + dr + h, half + dc:half + dc + w]
            l = lmap[half + dr:half + dr + h, half + dc:half + dc + w]
            better = (s > best_s) | ((s == best_s) & (l < best_l))
            best_s = np.where(better, s, best_s)
            best_l = np.where(better, l, best_l)

    keep = (best_s[indices[:, 0], indices[:, 1]] == scores) & (
        best_l[indices[:, 0], indices[:, 1]] == lin
    )
    return keep


def mc_iou(box_a, box_b, n_samples, seed):
    """Monte-Carlo BEV IoU estimate for two (cx, cy, w, l, yaw) boxes.

    Samples uniformly over the joint axis-aligned bounding box and
    returns hits(A∩B) / hits(A∪B). Verification utility, independent of
    the polygon-clipping path.
    """
    cs = np.empty((2, 4, 2))
    for i, b in enumerate((box_a, box_b)):
        cx, cy, bw, bl, yaw = b
        ca, sa = np.cos(yaw), np.sin(yaw)
        local = np.array(
            [[bl / 2, bw / 2], [-bl / 2, bw / 2], [-bl / 2, -bw / 2], [bl / 2, -bw / 2]]
        )
        cs[i, :, 0] = cx + local[:, 0] * ca - local[:, 1] * sa
        cs[i, :, 1] = cy + local[:, 0] * sa + local[:, 1] * ca
    lo = cs.reshape(-1, 2).min(axis=0)
    hi = cs.reshape(-1, 2).max(axis=0)

    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_samples, 2))

    def inside(b):
        cx, cy, bw, bl, yaw = b
        ca, sa = np.cos(yaw), np.sin(yaw)
        dx = pts[:, 0] - cx
        dy = pts[:, 1] - cy
        xr = dx * ca + dy * sa
        yr = -dx * sa + dy * ca
        return (np.abs(xr) <= bl / 2) & (np.abs(yr) <= bw / 2)

    in_a = inside(box_a)
    in_b = inside(box_b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union
