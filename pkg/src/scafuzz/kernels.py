"""Hot numeric kernels: peak finding and k-nearest-neighbour voting.

Every kernel exists twice: a numba ``@njit`` loop and a vectorised numpy
version. ``find_peaks`` / ``knn_predict`` dispatch to one of them depending on
``SCAFUZZ_NUMBA`` (see :mod:`scafuzz._accel`). Both paths return identical
results; the test-suite checks that on random inputs.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# peaks
# --------------------------------------------------------------------------


@njit
def _local_maxima_nb(x):
    n = x.shape[0]
    out = np.empty(n // 2 + 1, dtype=np.int64)
    m = 0
    i = 1
    i_max = n - 1
    while i < i_max:
        if x[i - 1] < x[i]:
            ahead = i + 1
            while ahead < i_max and x[ahead] == x[i]:
                ahead += 1
            if x[ahead] < x[i]:
                out[m] = (i + ahead - 1) // 2
                m += 1
                i = ahead
        i += 1
    return out[:m]


@njit
def _prominences_nb(x, peaks, wlen):
    n = x.shape[0]
    prom = np.empty(peaks.shape[0], dtype=np.float64)
    for p in range(peaks.shape[0]):
        peak = peaks[p]
        lo = 0
        hi = n - 1
        if wlen >= 2:
            lo = max(peak - wlen // 2, 0)
            hi = min(peak + wlen // 2, n - 1)
        top = x[peak]
        left_min = top
        i = peak
        while i >= lo and x[i] <= top:
            if x[i] < left_min:
                left_min = x[i]
            i -= 1
        right_min = top
        i = peak
        while i <= hi and x[i] <= top:
            if x[i] < right_min:
                right_min = x[i]
            i += 1
        prom[p] = top - max(left_min, right_min)
    return prom


@njit
def _thin_nb(x, peaks, min_sep):
    m = peaks.shape[0]
    heights = np.empty(m, dtype=np.float64)
    for i in range(m):
        heights[i] = x[peaks[i]]
    # stable descending order by height: ties keep the earlier peak first
    order = np.argsort(-heights, kind="mergesort")
    keep = np.ones(m, dtype=np.bool_)
    for oi in range(m):
        j = order[oi]
        if not keep[j]:
            continue
        k = j - 1
        while k >= 0 and peaks[j] - peaks[k] < min_sep:
            keep[k] = False
            k -= 1
        k = j + 1
        while k < m and peaks[k] - peaks[j] < min_sep:
            keep[k] = False
            k += 1
    return peaks[keep]


@njit
def _find_peaks_nb(x, min_sep, prominence, wlen):
    peaks = _local_maxima_nb(x)
    prom = _prominences_nb(x, peaks, wlen)
    peaks = peaks[prom >= prominence]
    if min_sep > 1 and peaks.shape[0] > 1:
        peaks = _thin_nb(x, peaks, min_sep)
    return peaks


def _local_maxima_np(x):
    if x.size < 3:
        return np.empty(0, dtype=np.int64)
    # collapse runs of equal values, then look for rise-fall patterns
    change = np.flatnonzero(np.diff(x) != 0) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change - 1, [x.size - 1]))
    vals = x[starts]
    if vals.size < 3:
        return np.empty(0, dtype=np.int64)
    is_max = (vals[1:-1] > vals[:-2]) & (vals[1:-1] > vals[2:])
    idx = np.flatnonzero(is_max) + 1
    return ((starts[idx] + ends[idx]) // 2).astype(np.int64)


def _side_min(sides, top):
    # lowest value reached before the first sample that rises above the peak
    blocked = np.logical_or.accumulate(sides > top[:, None], axis=1)
    return np.where(blocked, np.inf, sides).min(axis=1)


def _prominences_np(x, peaks, wlen):
    n = x.size
    if peaks.size == 0:
        return np.empty(0, dtype=np.float64)
    if wlen < 2:
        prom = np.empty(peaks.size, dtype=np.float64)
        for p, peak in enumerate(peaks):
            top = x[peak]
            left = x[: peak + 1][::-1]
            higher = np.flatnonzero(left > top)
            left = left[: higher[0]] if higher.size else left
            right = x[peak:]
            higher = np.flatnonzero(right > top)
            right = right[: higher[0]] if higher.size else right
            prom[p] = top - max(left.min(), right.min())
        return prom
    h = wlen // 2
    # +inf padding stops the walk at the signal edges like the window clamp does
    padded = np.concatenate((np.full(h, np.inf), x, np.full(h, np.inf)))
    win = np.lib.stride_tricks.sliding_window_view(padded, 2 * h + 1)[peaks]
    top = x[peaks]
    left = win[:, h::-1]
    right = win[:, h:]
    return top - np.maximum(_side_min(left, top), _side_min(right, top))


def _thin_np(x, peaks, min_sep):
    order = np.lexsort((peaks, -x[peaks]))
    lo = np.searchsorted(peaks, peaks - min_sep, side="right")
    hi = np.searchsorted(peaks, peaks + min_sep, side="left")
    keep = np.ones(peaks.size, dtype=bool)
    for j in order:
        if keep[j]:
            keep[lo[j] : j] = False
            keep[j + 1 : hi[j]] = False
    return peaks[keep]


def _find_peaks_np(x, min_sep, prominence, wlen):
    peaks = _local_maxima_np(x)
    peaks = peaks[_prominences_np(x, peaks, wlen) >= prominence]
    if min_sep > 1 and peaks.size > 1:
        peaks = _thin_np(x, peaks, min_sep)
    return peaks


def find_peaks(x, min_separation=1, prominence=0.0, wlen=0, use_numba=None):
    """Indices of local maxima with prominence >= ``prominence``.

    ``wlen`` bounds the prominence search window (0 = whole signal). Peaks
    closer than ``min_separation`` are thinned greedily, tallest first.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    fn = _find_peaks_nb if (USE_NUMBA if use_numba is None else use_numba) else _find_peaks_np
    return fn(x, int(min_separation), float(prominence), int(wlen))


# --------------------------------------------------------------------------
# k nearest neighbours
# --------------------------------------------------------------------------


@njit
def _vote_nb(nbr_labels, n_labels):
    counts = np.zeros(n_labels, dtype=np.int64)
    for lab in nbr_labels:
        counts[lab] += 1
    best = counts.max()
    # tie: first (nearest) neighbour whose label reaches the top count
    for lab in nbr_labels:
        if counts[lab] == best:
            return lab
    return nbr_labels[0]


@njit
def _knn_nb(train, labels, queries, k, n_labels, chunk=512):
    n, w = train.shape
    m = queries.shape[0]
    out = np.empty(m, dtype=np.int64)
    sq_train = np.empty(n)
    for t in range(n):
        sq_train[t] = np.dot(train[t], train[t])
    tt_max = sq_train.max()
    train_t = np.ascontiguousarray(train.T)
    kth = np.empty(k)
    best_d = np.empty(k)
    best_i = np.empty(k, dtype=np.int64)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        q = np.ascontiguousarray(queries[lo:hi])
        approx = np.dot(q, train_t)
        for r in range(hi - lo):
            row = approx[r]
            # k-th smallest approximate distance bounds the exact shortlist
            kth[:] = np.inf
            for t in range(n):
                a = sq_train[t] - 2.0 * row[t]
                row[t] = a
                if a < kth[k - 1]:
                    pos = k - 1
                    while pos > 0 and kth[pos - 1] > a:
                        kth[pos] = kth[pos - 1]
                        pos -= 1
                    kth[pos] = a
            cut = kth[k - 1] + 1e-8 * (np.dot(q[r], q[r]) + tt_max) + 1e-12
            best_d[:] = np.inf
            best_i[:] = -1
            for t in range(n):
                if row[t] > cut:
                    continue
                d = 0.0
                for j in range(w):
                    diff = q[r, j] - train[t, j]
                    d += diff * diff
                if d < best_d[k - 1]:
                    pos = k - 1
                    while pos > 0 and best_d[pos - 1] > d:
                        best_d[pos] = best_d[pos - 1]
                        best_i[pos] = best_i[pos - 1]
                        pos -= 1
                    best_d[pos] = d
                    best_i[pos] = t
            out[lo + r] = _vote_nb(labels[best_i], n_labels)
    return out


def _vote_np(nbr_labels, n_labels):
    counts = np.zeros(n_labels, dtype=np.int64)
    np.add.at(counts, nbr_labels, 1)
    best = counts.max()
    for lab in nbr_labels:
        if counts[lab] == best:
            return lab
    return nbr_labels[0]


def _knn_np(train, labels, queries, k, n_labels, chunk=512):
    m = queries.shape[0]
    out = np.empty(m, dtype=np.int64)
    if m == 0:
        return out
    sq_train = np.einsum("ij,ij->i", train, train)
    tt_max = sq_train.max()
    for lo in range(0, m, chunk):
        q = queries[lo : lo + chunk]
        approx = sq_train[None, :] - 2.0 * (q @ train.T)
        # every true neighbour lies within rounding error of the k-th approximate distance
        kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
        cut = kth + 1e-8 * (np.einsum("ij,ij->i", q, q) + tt_max) + 1e-12
        for r in range(q.shape[0]):
            cand = np.flatnonzero(approx[r] <= cut[r])
            diff = q[r] - train[cand]
            exact = np.cumsum(diff * diff, axis=1)[:, -1]
            order = np.lexsort((cand, exact))[:k]
            out[lo + r] = _vote_np(labels[cand[order]], n_labels)
    return out


def knn_predict(train, labels, queries, k, n_labels=None, use_numba=None):
    """Majority vote of the ``k`` nearest rows of ``train`` for every query row.

    Distances are squared Euclidean; equal distances prefer the lower training
    index. Label ties go to the label of the nearest neighbour among the tied.
    """
    train = np.ascontiguousarray(train, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, train.shape[1])
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if n_labels is None:
        n_labels = int(labels.max()) + 1
    k = min(int(k), train.shape[0])
    fn = _knn_nb if (USE_NUMBA if use_numba is None else use_numba) else _knn_np
    return fn(train, labels, queries, k, int(n_labels))
