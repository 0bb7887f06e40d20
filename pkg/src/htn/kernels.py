"""Batched environment-transfer kernels.

The inner loop of every forward pass, metric evaluation, and sweep is the
same operation: push a stack of per-sample ket/bra environments through one
site tensor, weighting the paired reduction legs by the diagonal reduction
operator.  Two implementations are provided:

* a numba ``@njit`` kernel (default when numba imports cleanly), and
* a pure-numpy einsum path.

Select with the environment variable ``HTN_KERNEL_BACKEND=numba|numpy``
(read at import time).  ``benchmarks/bench_kernels.py`` compares the two.

Sites that carry a non-trivial output leg occur at most twice per chain and
always go through the einsum path; only the out-free transfer is hot.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

_REQUESTED = os.environ.get("HTN_KERNEL_BACKEND", "").strip().lower()
if _REQUESTED not in ("", "numba", "numpy"):
    raise ValueError(
        f"HTN_KERNEL_BACKEND must be 'numba' or 'numpy', got {_REQUESTED!r}"
    )
if _REQUESTED == "numba" and not _HAVE_NUMBA:
    raise ImportError("HTN_KERNEL_BACKEND=numba but numba is not importable")
_BACKEND = _REQUESTED or ("numba" if _HAVE_NUMBA else "numpy")


def backend() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return _BACKEND


def env_update_numpy(env, ax, d):
    """Pure-numpy transfer of out-free environments through one site.

    env: (N, l, m) stacked ket/bra environments
    ax:  (N, l, x, r) site tensor contracted with the per-sample input vector
    d:   (r,) diagonal reduction operator
    returns (N, x, y) = sum_{l,m,r} env[n,l,m] ax[n,l,x,r] conj(ax[n,m,y,r]) d[r]
    """
    t = np.einsum("nlm,nlxr->nmxr", env, ax)
    return np.einsum("nmxr,nmyr,r->nxy", t, ax.conj(), d)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _env_update_numba(env, ax, d, out):  # pragma: no cover - jitted
        n_samp, n_l, n_m = env.shape
        n_x = ax.shape[2]
        n_r = ax.shape[3]
        for n in range(n_samp):
            t = np.zeros((n_m, n_x, n_r), dtype=np.complex128)
            for l in range(n_l):
                for m in range(n_m):
                    e = env[n, l, m]
                    if e == 0.0:
                        continue
                    for x in range(n_x):
                        for r in range(n_r):
                            t[m, x, r] += e * ax[n, l, x, r]
            for x in range(n_x):
                for y in range(n_x):
                    acc = 0.0 + 0.0j
                    for m in range(n_m):
                        for r in range(n_r):
                            acc += t[m, x, r] * np.conj(ax[n, m, y, r]) * d[r]
                    out[n, x, y] = acc

    def env_update_numba(env, ax, d):
        env = np.ascontiguousarray(env)
        ax = np.ascontiguousarray(ax)
        d = np.ascontiguousarray(d, dtype=np.float64)
        out = np.empty((env.shape[0], ax.shape[2], ax.shape[2]), dtype=np.complex128)
        _env_update_numba(env, ax, d, out)
        return out


if _BACKEND == "numba":
    env_update = env_update_numba
else:
    env_update = env_update_numpy


def env_update_out(env, ax, d):
    """Transfer environments carrying open output legs through one site.

    env: (N, l, m, u, v) with u/v the accumulated ket/bra output indices
    ax:  (N, l, x, r, o) with o the current site's output leg
    returns (N, x, y, u*o, v*p); the new output index appends the current
    site's leg as the least-significant factor (site order).
    """
    t = np.einsum("nlmuv,nlxro->nmxruov", env, ax)
    res = np.einsum("nmxruov,nmyrp,r->nxyuovp", t, ax.conj(), d)
    n, x, y, u, o, v, p = res.shape
    return res.reshape(n, x, y, u * o, v * p)


def env_update_out_right(env, ax, d):
    """Right-moving variant: the current site sits before the env's sites.

    env: (N, b, c, u, v); ax: (N, a, b, r, o).
    returns (N, a, a2, o*u, p*v); the current site's output leg becomes the
    most-significant factor, preserving site order in the joint index.
    """
    t = np.einsum("nbcuv,nabro->nacruov", env, ax)
    res = np.einsum("nacruov,necrp,r->naeoupv", t, ax.conj(), d)
    n, a, e, o, u, p, v = res.shape
    return res.reshape(n, a, e, o * u, p * v)
