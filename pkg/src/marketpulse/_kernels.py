"""Compiled per-pixel kernels. Everything here works on plain arrays."""

import math

import numpy as np
from numba import njit

EPS = 1e-9


@njit(cache=True)
def rank_window(total, lo, hi):
    """1-based inclusive range of expanded entries kept by the interval mean.

    Entry i of n covers fractional ranks ((i-1)/n, i/n]; it is kept when that
    interval lies inside [lo, hi]. Falls back to the entry holding rank 0.5.
    """
    i_lo = int(math.ceil(lo * total - EPS)) + 1
    i_hi = int(math.floor(hi * total + EPS))
    if i_lo > i_hi:
        i_mid = int(math.ceil(0.5 * total - EPS))
        if i_mid < 1:
            i_mid = 1
        return i_mid, i_mid
    return i_lo, i_hi


@njit(cache=True)
def _insertion_sort_pairs(vals, wts, k):
    for i in range(1, k):
        v = vals[i]
        w = wts[i]
        j = i - 1
        while j >= 0 and vals[j] > v:
            vals[j + 1] = vals[j]
            wts[j + 1] = wts[j]
            j -= 1
        vals[j + 1] = v
        wts[j + 1] = w


@njit(cache=True)
def weighted_interval_mean(vals, wts, k, lo, hi):
    """Interval mean of the first ``k`` (value, integer weight) pairs.

    Sorts the pairs in place. Returns NaN when k == 0.
    """
    if k == 0:
        return np.nan
    _insertion_sort_pairs(vals, wts, k)
    total = 0
    for i in range(k):
        total += wts[i]
    i_lo, i_hi = rank_window(total, lo, hi)
    acc = 0.0
    cnt = 0
    c = 0
    for i in range(k):
        first = c + 1
        last = c + wts[i]
        c = last
        if last < i_lo:
            continue
        if first > i_hi:
            break
        a = first if first > i_lo else i_lo
        b = last if last < i_hi else i_hi
        m = b - a + 1
        acc += vals[i] * m
        cnt += m
    return acc / cnt


@njit(cache=True)
def sorted_interval_mean(svals, n, lo, hi):
    """Interval mean of the first ``n`` entries of an ascending array (unit weights)."""
    if n == 0:
        return np.nan
    i_lo, i_hi = rank_window(n, lo, hi)
    acc = 0.0
    for i in range(i_lo - 1, i_hi):
        acc += svals[i]
    return acc / (i_hi - i_lo + 1)


def _batcher_pairs(n):
    pairs = []
    p = 1
    while p < n:
        k = p
        while k >= 1:
            for j in range(k % p, n - k, 2 * k):
                for i in range(min(k, n - j - k)):
                    if (i + j) // (2 * p) == (i + j + k) // (2 * p):
                        pairs.append((i + j, i + j + k))
            k //= 2
        p *= 2
    return pairs


def sorting_networks(max_size):
    """Flattened comparator lists for every size 0..max_size.

    Batcher odd-even merge networks on the next power of two, pruned of the
    comparators that only touch padding (padding holds +inf and never moves).
    Returns (first, second, offsets); size n uses slice offsets[n]:offsets[n+1].
    """
    first, second, offsets = [], [], [0]
    cache = {}
    for n in range(max_size + 1):
        m = 1
        while m < n:
            m *= 2
        if m not in cache:
            cache[m] = _batcher_pairs(m)
        pairs = [(a, b) for a, b in cache[m] if b < n]
        first.extend(a for a, _ in pairs)
        second.extend(b for _, b in pairs)
        offsets.append(len(first))
    return (np.array(first, dtype=np.int32), np.array(second, dtype=np.int32),
            np.array(offsets, dtype=np.int64))


@njit(cache=True)
def composite_lanes(stack, valid, p0, nl, idx, wts, n, exp_idx, exp_n,
                    net_a, net_b, net_off, min_valid, lo, hi,
                    V, W, out, cnt, expanded):
    """Reference composite for one target over lanes p0..p0+nl of a block.

    ``stack`` is (T, B, P), ``valid`` is (T, P). Samples are sorted per lane
    by a comparator network so the work vectorises across pixels. Writes
    out[b, l], the weighted valid count cnt[l] and expanded[l].
    """
    B = stack.shape[1]
    for l in range(nl):
        cnt[l] = 0
        expanded[l] = False
    for s in range(n):
        j = idx[s]
        ws = wts[s]
        for l in range(nl):
            if valid[j, p0 + l]:
                cnt[l] += ws
    any_exp = False
    if exp_n > 0:
        for l in range(nl):
            if cnt[l] < min_valid:
                expanded[l] = True
                any_exp = True
        if any_exp:
            for s in range(exp_n):
                j = exp_idx[s]
                for l in range(nl):
                    if expanded[l] and valid[j, p0 + l]:
                        cnt[l] += 1
    ilo = np.empty(nl, dtype=np.int64)
    ihi = np.empty(nl, dtype=np.int64)
    for l in range(nl):
        a, b = rank_window(cnt[l], lo, hi)
        ilo[l] = a
        ihi[l] = b
    K = n + exp_n if any_exp else n
    c0 = net_off[K]
    c1 = net_off[K + 1]
    cum = np.empty(nl, dtype=np.int64)
    acc = np.empty(nl, dtype=np.float64)
    for b in range(B):
        for s in range(n):
            j = idx[s]
            ws = wts[s]
            for l in range(nl):
                ok = valid[j, p0 + l]
                V[s, l] = stack[j, b, p0 + l] if ok else np.inf
                W[s, l] = ws if ok else 0
        for s in range(n, K):
            j = exp_idx[s - n]
            for l in range(nl):
                ok = expanded[l] and valid[j, p0 + l]
                V[s, l] = stack[j, b, p0 + l] if ok else np.inf
                W[s, l] = 1 if ok else 0
        for c in range(c0, c1):
            i = net_a[c]
            k = net_b[c]
            for l in range(nl):
                x = V[i, l]
                y = V[k, l]
                wi = W[i, l]
                wk = W[k, l]
                sw = x > y
                V[i, l] = y if sw else x
                V[k, l] = x if sw else y
                W[i, l] = wk if sw else wi
                W[k, l] = wi if sw else wk
        for l in range(nl):
            cum[l] = 0
            acc[l] = 0.0
        for s in range(K):
            for l in range(nl):
                first = cum[l] + 1
                last = cum[l] + W[s, l]
                cum[l] = last
                a = first if first > ilo[l] else ilo[l]
                e = last if last < ihi[l] else ihi[l]
                m = e - a + 1
                acc[l] += V[s, l] * m if m > 0 else 0.0
        for l in range(nl):
            out[b, l] = acc[l] / (ihi[l] - ilo[l] + 1) if cnt[l] > 0 else np.nan


@njit(cache=True)
def composite_block(stack, valid, idx, wts, n, exp_idx, exp_n, net_a, net_b,
                    net_off, min_valid, lo, hi, lanes):
    """Composite for one target over every pixel of a (T, B, P) block."""
    B = stack.shape[1]
    P = stack.shape[2]
    out = np.empty((B, P), dtype=np.float64)
    counts = np.zeros(P, dtype=np.int64)
    expanded = np.zeros(P, dtype=np.bool_)
    K = n + exp_n
    V = np.empty((max(K, 1), lanes), dtype=np.float32)
    W = np.empty((max(K, 1), lanes), dtype=np.int32)
    o = np.empty((B, lanes), dtype=np.float64)
    c = np.empty(lanes, dtype=np.int64)
    e = np.empty(lanes, dtype=np.bool_)
    for p0 in range(0, P, lanes):
        nl = min(lanes, P - p0)
        composite_lanes(stack, valid, p0, nl, idx, wts, n, exp_idx, exp_n,
                        net_a, net_b, net_off, min_valid, lo, hi, V, W, o, c, e)
        for l in range(nl):
            counts[p0 + l] = c[l]
            expanded[p0 + l] = e[l]
            for b in range(B):
                out[b, p0 + l] = o[b, l]
    return out, counts, expanded


@njit(cache=True)
def dow_difference_block(stack, valid, active, targets, dows, idx, wts, n,
                         exp_idx, exp_n, net_a, net_b, net_off, min_valid,
                         lo, hi, lanes):
    """Per-day-of-week interval mean of |scene - reference| over a block.

    ``stack`` is (T, B, P) float32 and ``valid`` (T, P). Row t of the
    schedule arrays (idx, wts, n, exp_idx, exp_n) is the reference sample of
    scene ``targets[t]``. Returns (7, B, P) aggregates, NaN where a day has no
    difference image, and the (7, P) number of contributing images.
    """
    B = stack.shape[1]
    P = stack.shape[2]
    nt = targets.shape[0]
    out = np.full((7, B, P), np.nan, dtype=np.float64)
    counts = np.zeros((7, P), dtype=np.int64)
    per_dow = np.zeros(7, dtype=np.int64)
    for t in range(nt):
        per_dow[dows[targets[t]]] += 1
    cap = max(1, per_dow.max())
    D = np.empty((7, B, cap, lanes), dtype=np.float32)
    fill = np.zeros((7, lanes), dtype=np.int64)
    K = idx.shape[1] + exp_idx.shape[1]
    V = np.empty((max(K, 1), lanes), dtype=np.float32)
    W = np.empty((max(K, 1), lanes), dtype=np.int32)
    comp = np.empty((B, lanes), dtype=np.float64)
    cnt = np.empty(lanes, dtype=np.int64)
    exp_flag = np.empty(lanes, dtype=np.bool_)
    sbuf = np.empty(cap, dtype=np.float64)
    for p0 in range(0, P, lanes):
        nl = min(lanes, P - p0)
        live = False
        for l in range(nl):
            if active[p0 + l]:
                live = True
        if not live:
            continue
        fill[:, :] = 0
        for t in range(nt):
            j = targets[t]
            any_valid = False
            for l in range(nl):
                if valid[j, p0 + l] and active[p0 + l]:
                    any_valid = True
                    break
            if not any_valid:
                continue
            composite_lanes(stack, valid, p0, nl, idx[t], wts[t], n[t],
                            exp_idx[t], exp_n[t], net_a, net_b, net_off,
                            min_valid, lo, hi, V, W, comp, cnt, exp_flag)
            d = dows[j]
            for l in range(nl):
                if valid[j, p0 + l] and active[p0 + l] and cnt[l] > 0:
                    f = fill[d, l]
                    for b in range(B):
                        D[d, b, f, l] = abs(stack[j, b, p0 + l] - comp[b, l])
                    fill[d, l] = f + 1
        for l in range(nl):
            if not active[p0 + l]:
                continue
            for d in range(7):
                m = fill[d, l]
                counts[d, p0 + l] = m
                if m == 0:
                    continue
                for b in range(B):
                    for f in range(m):
                        sbuf[f] = D[d, b, f, l]
                    s = np.sort(sbuf[:m])
                    out[d, b, p0 + l] = sorted_interval_mean(s, m, lo, hi)
    return out, counts


@njit(cache=True)
def interval_mean_stack(stack, valid, lo, hi):
    """Unweighted interval mean across axis 1 of a (P, T, B) stack."""
    P, T, B = stack.shape
    out = np.full((P, B), np.nan, dtype=np.float64)
    buf = np.empty(T, dtype=np.float64)
    for p in range(P):
        for b in range(B):
            m = 0
            for t in range(T):
                if valid[p, t]:
                    buf[m] = stack[p, t, b]
                    m += 1
            if m:
                s = np.sort(buf[:m])
                out[p, b] = sorted_interval_mean(s, m, lo, hi)
    return out


@njit(cache=True)
def masked_median_filter(field, valid, radius):
    """Median over the in-bounds, valid part of a (2r+1)^2 window.

    Pixels whose window holds no valid value come back invalid (NaN, False).
    """
    H, W = field.shape
    out = np.full((H, W), np.nan, dtype=np.float64)
    ok = np.zeros((H, W), dtype=np.bool_)
    side = 2 * radius + 1
    buf = np.empty(side * side, dtype=np.float64)
    for i in range(H):
        i0 = max(0, i - radius)
        i1 = min(H, i + radius + 1)
        for j in range(W):
            j0 = max(0, j - radius)
            j1 = min(W, j + radius + 1)
            m = 0
            for a in range(i0, i1):
                for b in range(j0, j1):
                    if valid[a, b]:
                        v = field[a, b]
                        # insertion keeps buf[:m] sorted
                        k = m - 1
                        while k >= 0 and buf[k] > v:
                            buf[k + 1] = buf[k]
                            k -= 1
                        buf[k + 1] = v
                        m += 1
            if m == 0:
                continue
            if m % 2 == 1:
                out[i, j] = buf[m // 2]
            else:
                out[i, j] = (buf[m // 2 - 1] + buf[m // 2]) / 2.0
            ok[i, j] = True
    return out, ok


@njit(cache=True)
def piecewise_linear(x, xs, ys, out):
    """np.interp semantics (clamped ends) for float32 input; writes into ``out``."""
    k = xs.size
    for i in range(x.size):
        v = x[i]
        if v <= xs[0]:
            out[i] = ys[0]
        elif v >= xs[k - 1]:
            out[i] = ys[k - 1]
        else:
            lo = 0
            hi = k - 1
            while hi - lo > 1:
                mid = (lo + hi) >> 1
                if xs[mid] <= v:
                    lo = mid
                else:
                    hi = mid
            out[i] = ys[lo] + (v - xs[lo]) * (ys[hi] - ys[lo]) / (xs[hi] - xs[lo])
    return out


@njit(cache=True)
def refine_nodes(xs, ys, first, inside, frac, xl_all, xh_all, ml_all, mh_all):
    """Node refinement loop of harmonize._refine_map; returns the new (xs, ys)."""
    m = xs.size
    ox = np.empty(2 * m)
    oy = np.empty(2 * m)
    k = 0
    for a in range(m):
        x = xs[a]
        y = ys[a]
        i = first[a]
        if not inside[i]:
            if k > 0 and x <= ox[k - 1]:
                continue
            ox[k] = x
            oy[k] = y
            k += 1
            continue
        f = frac[i]
        xl = xl_all[i]
        xh = xh_all[i]
        e = (1.0 - f) * ml_all[i] + f * mh_all[i] - y
        yl = ml_all[i] - e
        yh = mh_all[i] - e
        left_fixed = k > 0 and xl <= ox[k - 1]
        right_fixed = a + 1 < m and xh >= xs[a + 1]
        lower = oy[k - 1] if k > 0 else -np.inf
        upper = ys[a + 1] if a + 1 < m else np.inf
        if left_fixed and right_fixed:
            ox[k] = x
            oy[k] = y
            k += 1
            continue
        if left_fixed or yl < lower:
            yl = lower
            yh = (y - (1.0 - f) * yl) / f
        if right_fixed or yh > upper:
            yh = upper
            yl = max((y - f * yh) / (1.0 - f), lower)
        if not left_fixed:
            ox[k] = xl
            oy[k] = yl
            k += 1
        if not right_fixed:
            ox[k] = xh
            oy[k] = yh
            k += 1
    return ox[:k].copy(), oy[:k].copy()
