"""Numba-jitted twins of the kernels in ``_kernels_numpy``.

Same signatures and semantics; explicit loops instead of vectorized
gather/scatter. Compiled lazily on first call, with on-disk caching.
"""

from __future__ import annotations

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def conv_active(indices, features, weights, bias, stride, hout, wout):
    k2, cin, cout = weights.shape
    k = int(round(k2 ** 0.5))
    p = k // 2
    n = indices.shape[0]

    slot = np.full(hout * wout, -1, np.int64)
    for i in range(n):
        r = indices[i, 0]
        c = indices[i, 1]
        for t in range(k2):
            rn = r + p - t // k
            cn = c + p - t % k
            if rn % stride == 0 and cn % stride == 0:
                ro = rn // stride
                co = cn // stride
                if 0 <= ro < hout and 0 <= co < wout:
                    slot[ro * wout + co] = 0

    m = 0
    for j in range(hout * wout):
        if slot[j] == 0:
            slot[j] = m
            m += 1
        else:
            slot[j] = -1

    oidx = np.empty((m, 2), np.int64)
    for j in range(hout * wout):
        s = slot[j]
        if s >= 0:
            oidx[s, 0] = j // wout
            oidx[s, 1] = j % wout

    out = np.zeros((m, cout), np.float64)
    for i in range(n):
        r = indices[i, 0]
        c = indices[i, 1]
        for t in range(k2):
            rn = r + p - t // k
            cn = c + p - t % k
            if rn % stride == 0 and cn % stride == 0:
                ro = rn // stride
                co = cn // stride
                if 0 <= ro < hout and 0 <= co < wout:
                    s = slot[ro * wout + co]
                    for ci in range(cin):
                        f = features[i, ci]
                        if f != 0.0:
                            for co_ in range(cout):
                                out[s, co_] += f * weights[t, ci, co_]
    for j in range(m):
        for co_ in range(cout):
            out[j, co_] += bias[co_]
    return oidx, out


@njit(cache=True)
def subm_active(indices, features, weights, bias, h, w):
    k2, cin, cout = weights.shape
    k = int(round(k2 ** 0.5))
    p = k // 2
    n = indices.shape[0]

    out = np.zeros((n, cout), np.float64)
    if n == 0:
        return out
    slot = np.full(h * w, -1, np.int64)
    for i in range(n):
        slot[indices[i, 0] * w + indices[i, 1]] = i

    for i in range(n):
        r = indices[i, 0]
        c = indices[i, 1]
        for t in range(k2):
            rr = r + t // k - p
            cc = c + t % k - p
            if 0 <= rr < h and 0 <= cc < w:
                nb = slot[rr * w + cc]
                if nb >= 0:
                    for ci in range(cin):
                        f = features[nb, ci]
                        if f != 0.0:
                            for co_ in range(cout):
                                out[i, co_] += f * weights[t, ci, co_]
        for co_ in range(cout):
            out[i, co_] += bias[co_]
    return out


@njit(cache=True)
def maxpool_keep(indices, scores, window, h, w):
    n = indices.shape[0]
    keep = np.zeros(n, np.bool_)
    half = window // 2

    slot = np.full(h * w, -1, np.int64)
    for i in range(n):
        slot[indices[i, 0] * w + indices[i, 1]] = i

    for i in range(n):
        r = indices[i, 0]
        c = indices[i, 1]
        lin_i = r * w + c
        best = True
        for dr in range(-half, half + 1):
            rr = r + dr
            if rr < 0 or rr >= h:
                continue
            for dc in range(-half, half + 1):
                cc = c + dc
                if cc < 0 or cc >= w:
                    continue
                j = slot[rr * w + cc]
                if j < 0 or j == i:
                    continue
                sj = scores[j]
                if sj > scores[i] or (sj == scores[i] and rr * w + cc < lin_i):
                    best = False
                    break
            if not best:
                break
        keep[i] = best
    return keep


@njit(cache=True)
def mc_iou(box_a, box_b, n_samples, seed):
    # Joint bounding box of both corner sets.
    lo_x = np.inf
    lo_y = np.inf
    hi_x = -np.inf
    hi_y = -np.inf
    for b in (box_a, box_b):
        cx, cy, bw, bl, yaw = b[0], b[1], b[2], b[3], b[4]
        ca = np.cos(yaw)
        sa = np.sin(yaw)
        for sx in (-1.0, 1.0):
            for sy in (-1.0, 1.0):
                x = cx + sx * bl / 2 * ca - sy * bw / 2 * sa
                y = cy + sx * bl / 2 * sa + sy * bw / 2 * ca
                lo_x = min(lo_x, x)
                lo_y = min(lo_y, y)
                hi_x = max(hi_x, x)
                hi_y = max(hi_y, y)

    ca_a = np.cos(box_a[4])
    sa_a = np.sin(box_a[4])
    ca_b = np.cos(box_b[4])
    sa_b = np.sin(box_b[4])
    hl_a = box_a[3] / 2
    hw_a = box_a[2] / 2
    hl_b = box_b[3] / 2
    hw_b = box_b[2] / 2
    span_x = hi_x - lo_x
    span_y = hi_y - lo_y

    # inline xorshift64*: the sampler is the hot loop and only needs
    # uniformity, not numpy's generator machinery
    state = np.uint64(seed) * np.uint64(6364136223846793005) + np.uint64(
        1442695040888963407
    )
    if state == np.uint64(0):
        state = np.uint64(0x9E3779B97F4A7C15)
    mult = np.uint64(2685821657736338717)
    inv53 = 1.0 / 9007199254740992.0

    inter = 0
    union = 0
    for _ in range(n_samples):
        state ^= state >> np.uint64(12)
        state ^= state << np.uint64(25)
        state ^= state >> np.uint64(27)
        x = lo_x + span_x * (((state * mult) >> np.uint64(11)) * inv53)
        state ^= state >> np.uint64(12)
        state ^= state << np.uint64(25)
        state ^= state >> np.uint64(27)
        y = lo_y + span_y * (((state * mult) >> np.uint64(11)) * inv53)

        dx = x - box_a[0]
        dy = y - box_a[1]
        xr = dx * ca_a + dy * sa_a
        yr = -dx * sa_a + dy * ca_a
        in_a = abs(xr) <= hl_a and abs(yr) <= hw_a

        dx = x - box_b[0]
        dy = y - box_b[1]
        xr = dx * ca_b + dy * sa_b
        yr = -dx * sa_b + dy * ca_b
        in_b = abs(xr) <= hl_b and abs(yr) <= hw_b

        if in_a or in_b:
            union += 1
            if in_a and in_b:
                inter += 1
    if union == 0:
        return 0.0
    return inter / union
