"""Hot numeric kernels: numba-jitted inner loops with a pure-numpy fallback.

The numba path is the default when numba imports cleanly; set ``COSS_NUMBA=0``
to force the numpy path. Each path is bit-deterministic on its own; across
paths the compiled loops and numpy's vectorized kernels round differently in
the last ulp, so float64 agrees to ~1e-14 relative and float32 to ~1e-6.
``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

from __future__ import annotations

import os

import numpy as np


def _numba_enabled() -> bool:
    flag = os.environ.get("COSS_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# numpy reference implementations


def adamw_update_numpy(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """Fused decoupled-weight-decay Adam update, in place on p, m, v (1D views)."""
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * p)


def pairwise_sqdist_numpy(x, c, block=512):
    """Squared Euclidean distances between rows of x [n,d] and c [k,d] -> [n,k].

    Uses explicit differences (no quadratic expansion) so near-ties rank the
    same way a per-pair loop would.
    """
    n = x.shape[0]
    out = np.empty((n, c.shape[0]), dtype=np.result_type(x, c))
    for i in range(0, n, block):
        d = x[i:i + block, None, :] - c[None, :, :]
        out[i:i + block] = np.einsum("nkd,nkd->nk", d, d)
    return out


def min_sqdist_numpy(a, b, block=512):
    """For each row of a [na,d], min squared distance to any row of b [nb,d]."""
    na = a.shape[0]
    out = np.empty(na, dtype=np.result_type(a, b))
    for i in range(0, na, block):
        d = a[i:i + block, None, :] - b[None, :, :]
        out[i:i + block] = np.einsum("nkd,nkd->nk", d, d).min(axis=1)
    return out


NUMPY_IMPLS = {
    "adamw_update": adamw_update_numpy,
    "pairwise_sqdist": pairwise_sqdist_numpy,
    "min_sqdist": min_sqdist_numpy,
}


# ---------------------------------------------------------------------------
# numba implementations (compiled lazily on first call)


def _build_numba_impls():
    from numba import njit

    @njit(cache=True)
    def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
        bc1 = 1.0 - beta1 ** step
        bc2 = 1.0 - beta2 ** step
        for i in range(p.shape[0]):
            mi = beta1 * m[i] + (1.0 - beta1) * g[i]
            vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
            m[i] = mi
            v[i] = vi
            p[i] -= lr * ((mi / bc1) / (np.sqrt(vi / bc2) + eps)
                          + weight_decay * p[i])

    @njit(cache=True)
    def pairwise_sqdist(x, c):
        n, d = x.shape
        k = c.shape[0]
        out = np.empty((n, k), dtype=x.dtype)
        for i in range(n):
            for j in range(k):
                acc = 0.0
                for t in range(d):
                    diff = x[i, t] - c[j, t]
                    acc += diff * diff
                out[i, j] = acc
        return out

    @njit(cache=True)
    def min_sqdist(a, b):
        na, d = a.shape
        nb = b.shape[0]
        out = np.empty(na, dtype=a.dtype)
        for i in range(na):
            best = np.inf
            for j in range(nb):
                acc = 0.0
                for t in range(d):
                    diff = a[i, t] - b[j, t]
                    acc += diff * diff
                if acc < best:
                    best = acc
            out[i] = best
        return out

    return {
        "adamw_update": adamw_update,
        "pairwise_sqdist": pairwise_sqdist,
        "min_sqdist": min_sqdist,
    }


NUMBA_IMPLS = None
if _numba_enabled():
    try:
        NUMBA_IMPLS = _build_numba_impls()
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_IMPLS = None

_ACTIVE = NUMBA_IMPLS if NUMBA_IMPLS is not None else NUMPY_IMPLS


def using_numba() -> bool:
    return _ACTIVE is not NUMPY_IMPLS


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """Apply one AdamW step in place; p, m, v must be C-contiguous."""
    if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
        raise ValueError("adamw_update requires contiguous arrays")
    g = np.ascontiguousarray(g)
    _ACTIVE["adamw_update"](p.ravel(), g.ravel(), m.ravel(), v.ravel(),
                            lr, beta1, beta2, eps, weight_decay, step)


def pairwise_sqdist(x, c):
    x = np.ascontiguousarray(x)
    c = np.ascontiguousarray(c)
    return _ACTIVE["pairwise_sqdist"](x, c)


def min_sqdist(a, b):
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    return _ACTIVE["min_sqdist"](a, b)
