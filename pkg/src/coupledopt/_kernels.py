"""Hot loops for the built-in problem families.

Two interchangeable backends: numba-compiled loops and a pure numpy/scipy
path. The backend is chosen at import time from ``COUPLEDOPT_NO_NUMBA``
(set it to 1 to force numpy) and can be switched with :func:`set_backend`.
"""
import os

import numpy as np
import scipy.sparse as sp

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_BACKEND = "numpy" if (os.environ.get("COUPLEDOPT_NO_NUMBA", "") not in ("", "0")
                       or not HAVE_NUMBA) else "numba"


def backend():
    return _BACKEND


def set_backend(name):
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


if HAVE_NUMBA:
    @njit(cache=True)
    def _quad_forms_nb(xg, M, v, mptr, gptr):
        n = gptr.shape[0] - 1
        vals = np.empty(n)
        grads = np.empty(xg.shape[0])
        for i in range(n):
            a, b = gptr[i], gptr[i + 1]
            D = b - a
            m0 = mptr[i]
            acc = 0.0
            for r in range(D):
                s = 0.0
                for c in range(D):
                    s += M[m0 + r * D + c] * xg[a + c]
                acc += xg[a + r] * (s + v[a + r])
                # symmetric blocks: gradient of x'Mx is 2Mx
                grads[a + r] = 2.0 * s + v[a + r]
            vals[i] = acc
        return vals, grads

    @njit(cache=True)
    def _scatter_add_nb(idx, w, size):
        out = np.zeros(size)
        for k in range(idx.shape[0]):
            out[idx[k]] += w[k]
        return out

    @njit(cache=True)
    def _segment_dot_nb(a, b, gptr):
        n = gptr.shape[0] - 1
        out = np.empty(n)
        for i in range(n):
            s = 0.0
            for k in range(gptr[i], gptr[i + 1]):
                s += a[k] * b[k]
            out[i] = s
        return out


class QuadBlocks:
    """Per-node symmetric quadratic forms x_N' M_i x_N + v_i' x_N.

    ``M_list[i]`` is D_i x D_i, ``v_list[i]`` has length D_i. Inputs to
    :meth:`evaluate` are gathered vectors: the concatenation of x_{N_i}.
    """

    def __init__(self, M_list, v_list):
        sizes = np.array([len(v) for v in v_list], dtype=np.int64)
        self.gptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.mptr = np.concatenate([[0], np.cumsum(sizes ** 2)]).astype(np.int64)
        self.M = np.concatenate([np.asarray(M, float).ravel() for M in M_list]) \
            if M_list else np.zeros(0)
        self.v = np.concatenate([np.asarray(v, float) for v in v_list]) \
            if v_list else np.zeros(0)
        self._K = sp.block_diag([np.asarray(M, float) for M in M_list], format="csr")
        self._starts = self.gptr[:-1]

    def evaluate(self, xg):
        """Return (values (n,), gradients concatenated like ``xg``)."""
        if _BACKEND == "numba":
            return _quad_forms_nb(xg, self.M, self.v, self.mptr, self.gptr)
        Mx = self._K @ xg
        vals = np.add.reduceat(xg * (Mx + self.v), self._starts)
        return vals, 2.0 * Mx + self.v


def scatter_add(idx, w, size):
    """out[idx[k]] += w[k]; a fixed left-to-right reduction order."""
    if _BACKEND == "numba":
        return _scatter_add_nb(idx, w, size)
    return np.bincount(idx, weights=w, minlength=size)


def segment_dot(a, b, gptr):
    """Per-segment inner products of two concatenated vectors."""
    if _BACKEND == "numba":
        return _segment_dot_nb(a, b, gptr)
    return np.add.reduceat(a * b, gptr[:-1]) if len(a) else np.zeros(len(gptr) - 1)
