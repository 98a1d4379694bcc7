"""Pure numpy implementations of the hot loops (fallback for ``_ckernels``).

Signatures mirror the compiled module exactly. Results agree with it to
rounding (BLAS reductions are ordered differently), not bit-for-bit.
"""
import numpy as np

BACKEND = "python"


def sq_dist(a, b):
    diff = np.subtract(a, b)
    # cumsum is strictly sequential, unlike np.sum's pairwise reduction
    return float(np.cumsum(diff * diff)[-1]) if diff.size else 0.0


def _finish(x, k, max_norm):
    nrm = float(np.dot(x, x))
    if not nrm <= max_norm * max_norm:
        return k, float(np.sqrt(nrm))
    return -1, float(np.sqrt(nrm))


def sgd_least_squares(x0, X, y, idx, lrs, prox, path=None, max_norm=1e8):
    x = np.array(x0, dtype=np.float64, copy=True)
    K, b = idx.shape
    if path is not None:
        path[0] = x
    nrm = float(np.sqrt(np.dot(x, x)))
    for k in range(K):
        sel = idx[k]
        Xb = X[sel]
        r = Xb @ x - y[sel]
        g = (Xb.T @ r) / b
        x = x - lrs[k] * g - prox * (x - x0)
        if path is not None:
            path[k + 1] = x
        bad, nrm = _finish(x, k, max_norm)
        if bad >= 0:
            return x, bad, nrm
    return x, -1, nrm


def mlp_unpack(x, p, H, C):
    o = 0
    W1 = x[o:o + H * p].reshape(H, p)
    o += H * p
    b1 = x[o:o + H]
    o += H
    W2 = x[o:o + C * H].reshape(C, H)
    o += C * H
    b2 = x[o:o + C]
    return W1, b1, W2, b2


def mlp_batch_grad(x, Xb, yb, p, H, C):
    W1, b1, W2, b2 = mlp_unpack(x, p, H, C)
    m = Xb.shape[0]
    Hh = np.tanh(Xb @ W1.T + b1)
    O = Hh @ W2.T + b2
    O = O - O.max(axis=1, keepdims=True)
    P = np.exp(O)
    P /= P.sum(axis=1, keepdims=True)
    P[np.arange(m), yb] -= 1.0
    gW2 = P.T @ Hh
    gb2 = P.sum(axis=0)
    dA = (P @ W2) * (1.0 - Hh * Hh)
    gW1 = dA.T @ Xb
    gb1 = dA.sum(axis=0)
    return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2]) / m


def sgd_mlp(x0, X, y, idx, lrs, prox, p, H, C, path=None, max_norm=1e8):
    x = np.array(x0, dtype=np.float64, copy=True)
    K = idx.shape[0]
    if path is not None:
        path[0] = x
    nrm = float(np.sqrt(np.dot(x, x)))
    for k in range(K):
        sel = idx[k]
        g = mlp_batch_grad(x, X[sel], y[sel], p, H, C)
        x = x - lrs[k] * g - prox * (x - x0)
        if path is not None:
            path[k + 1] = x
        bad, nrm = _finish(x, k, max_norm)
        if bad >= 0:
            return x, bad, nrm
    return x, -1, nrm
