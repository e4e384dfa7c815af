"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked at import time from the ``DRFT_NUMBA`` environment
variable ("0"/"false"/"off" forces numpy). ``set_backend`` switches it at
runtime, which is what the benchmark and the equivalence tests use.

All kernels work on 2-D C-contiguous arrays; callers reshape leading axes
away before dispatching.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_FALSY = {"0", "false", "off", "no"}


def _env_wants_numba():
    return os.environ.get("DRFT_NUMBA", "1").strip().lower() not in _FALSY


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------


def softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layernorm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_bwd_np(g, xhat, rstd, gamma):
    n = xhat.shape[1]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxhat = g * gamma
    dx = (rstd[:, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


def tiou_np(a, b):
    inter = np.clip(np.minimum(a[:, 1], b[:, 1]) - np.maximum(a[:, 0], b[:, 0]), 0.0, None)
    union = np.maximum(a[:, 1], b[:, 1]) - np.minimum(a[:, 0], b[:, 0])
    out = np.zeros(len(a), dtype=np.float64)
    pos = union > 0
    out[pos] = inter[pos] / union[pos]
    # zero-length union: both intervals are the same point or distinct points
    degenerate = ~pos
    out[degenerate] = (a[degenerate, 0] == b[degenerate, 0]).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def softmax_fwd_nb(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(cols):
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(cols):
                out[i, j] *= inv
        return out

    @numba.njit(cache=True)
    def softmax_bwd_nb(y, g):
        rows, cols = y.shape
        out = np.empty_like(y)
        for i in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += g[i, j] * y[i, j]
            for j in range(cols):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @numba.njit(cache=True)
    def layernorm_fwd_nb(x, gamma, beta, eps):
        rows, cols = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for i in range(rows):
            mu = 0.0
            for j in range(cols):
                mu += x[i, j]
            mu /= cols
            var = 0.0
            for j in range(cols):
                d = x[i, j] - mu
                var += d * d
            var /= cols
            r = 1.0 / np.sqrt(var + eps)
            rstd[i] = r
            for j in range(cols):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                out[i, j] = h * gamma[j] + beta[j]
        return out, xhat, rstd

    @numba.njit(cache=True)
    def layernorm_bwd_nb(g, xhat, rstd, gamma):
        rows, cols = g.shape
        dx = np.empty_like(g)
        dgamma = np.zeros(cols, dtype=g.dtype)
        dbeta = np.zeros(cols, dtype=g.dtype)
        for i in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(cols):
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
                dh = g[i, j] * gamma[j]
                s1 += dh
                s2 += dh * xhat[i, j]
            scale = rstd[i] / cols
            for j in range(cols):
                dh = g[i, j] * gamma[j]
                dx[i, j] = scale * (cols * dh - s1 - xhat[i, j] * s2)
        return dx, dgamma, dbeta

    @numba.njit(cache=True)
    def tiou_nb(a, b):
        n = a.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            lo = max(a[i, 0], b[i, 0])
            hi = min(a[i, 1], b[i, 1])
            inter = hi - lo if hi > lo else 0.0
            union = max(a[i, 1], b[i, 1]) - min(a[i, 0], b[i, 0])
            if union > 0.0:
                out[i] = inter / union
            else:
                out[i] = 1.0 if a[i, 0] == b[i, 0] else 0.0
        return out


_NUMPY = {
    "softmax_fwd": softmax_fwd_np,
    "softmax_bwd": softmax_bwd_np,
    "layernorm_fwd": layernorm_fwd_np,
    "layernorm_bwd": layernorm_bwd_np,
    "tiou": tiou_np,
}

_NUMBA = (
    {
        "softmax_fwd": softmax_fwd_nb,
        "softmax_bwd": softmax_bwd_nb,
        "layernorm_fwd": layernorm_fwd_nb,
        "layernorm_bwd": layernorm_bwd_nb,
        "tiou": tiou_nb,
    }
    if HAVE_NUMBA
    else {}
)

_active = {}
backend = "numpy"


def set_backend(name):
    """Select "numba" or "numpy" for every kernel. Returns the previous name."""
    global backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    previous = backend
    backend = name
    _active.clear()
    _active.update(_NUMBA if name == "numba" else _NUMPY)
    return previous


set_backend("numba" if HAVE_NUMBA and _env_wants_numba() else "numpy")


def softmax_fwd(x):
    return _active["softmax_fwd"](np.ascontiguousarray(x))


def softmax_bwd(y, g):
    return _active["softmax_bwd"](np.ascontiguousarray(y), np.ascontiguousarray(g))


def layernorm_fwd(x, gamma, beta, eps):
    return _active["layernorm_fwd"](
        np.ascontiguousarray(x),
        np.ascontiguousarray(gamma),
        np.ascontiguousarray(beta),
        eps,
    )


def layernorm_bwd(g, xhat, rstd, gamma):
    return _active["layernorm_bwd"](
        np.ascontiguousarray(g), xhat, rstd, np.ascontiguousarray(gamma)
    )


def tiou(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 2)
    return _active["tiou"](a, b)
