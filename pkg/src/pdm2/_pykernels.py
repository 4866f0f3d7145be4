"""Reference (numpy) implementations of the hot kernels.

Used when the compiled extension is unavailable or when the environment
variable ``PDM2_KERNELS=python`` is set.  The compiled versions in
``_ckernels.pyx`` must agree with these.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def xcorr(w, r, j_min, j_max):
    """Sliding inner product ``c[j - j_min] = sum_k r[k] * w[j + k]``."""
    w = np.ascontiguousarray(w, dtype=np.float64)
    r = np.ascontiguousarray(r, dtype=np.float64)
    n = r.shape[0]
    seg = w[j_min:j_max + n]
    return np.correlate(seg, r, mode="valid")


def window_features(x, window_len, n_coefs, first_coef, normalize):
    """Real/imag parts of DFT coefficients of every length-``window_len`` window.

    Returns an array of shape ``(len(x) - window_len + 1, 2 * n_coefs)`` laid
    out as ``[Re c_f, Im c_f, Re c_{f+1}, Im c_{f+1}, ...]``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    win = sliding_window_view(x, window_len)
    if normalize:
        mu = win.mean(axis=1, keepdims=True)
        sd = win.std(axis=1, keepdims=True)
        flat = sd[:, 0] <= 1e-12 * np.abs(mu[:, 0])  # relative, so scale invariant
        sd[flat] = 1.0
        win = (win - mu) / sd
        win[flat] = 0.0
    coefs = np.fft.rfft(win, axis=1)[:, first_coef:first_coef + n_coefs]
    out = np.empty((coefs.shape[0], 2 * n_coefs))
    out[:, 0::2] = coefs.real
    out[:, 1::2] = coefs.imag
    return out


def bag_distances(q_codes, q_counts, indptr, codes, counts):
    """Asymmetric bag distance from one query bag to every training bag.

    Bags are sorted word-code arrays with matching counts; the training bags
    are stored back to back, bag ``b`` spanning ``indptr[b]:indptr[b + 1]``.
    """
    q_codes = np.asarray(q_codes, dtype=np.int64)
    q_counts = np.asarray(q_counts, dtype=np.int64)
    n_bags = len(indptr) - 1
    out = np.empty(n_bags, dtype=np.int64)
    for b in range(n_bags):
        bc = codes[indptr[b]:indptr[b + 1]]
        bn = counts[indptr[b]:indptr[b + 1]]
        other = np.zeros_like(q_counts)
        if len(bc):
            pos = np.minimum(np.searchsorted(bc, q_codes), len(bc) - 1)
            hit = bc[pos] == q_codes
            other[hit] = bn[pos[hit]]
        diff = q_counts - other
        out[b] = int(np.dot(diff, diff))
    return out
