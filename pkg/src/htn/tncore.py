"""Dense complex tensor algebra: contraction, decomposition, isometrization,
and partial traces.

Tensors are plain ``numpy`` arrays of ``complex128`` in row-major order; the
shape tuple plays the role of the axis-length list.  Density matrices are
square ``complex128`` arrays expected to be Hermitian and positive
semidefinite up to a small numerical floor, with trace in [0, 1] (channels
built on post-selection shrink the trace, so sub-normalized states are
legitimate).

All functions are pure and never mutate their inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ContractionError,
    DegenerateInputError,
    DirectionViolationError,
    InvalidArgumentError,
)

# Singular values below RANK_FLOOR * s_max count as zero for rank decisions.
RANK_FLOOR = 1e-14


def asc128(a) -> np.ndarray:
    """View/convert input as a complex128 ndarray."""
    return np.asarray(a, dtype=np.complex128)


def contract(a, b, pairs) -> np.ndarray:
    """Contract tensor ``a`` with tensor ``b`` over the given axis pairs.

    ``pairs`` is a sequence of ``(axis_of_a, axis_of_b)`` tuples.  The result
    carries the unpaired axes of ``a`` followed by the unpaired axes of ``b``,
    each in their original order.
    """
    a = asc128(a)
    b = asc128(b)
    pairs = list(pairs)
    for ax_a, ax_b in pairs:
        if a.shape[ax_a] != b.shape[ax_b]:
            raise ContractionError(
                f"axis {ax_a} of a (len {a.shape[ax_a]}) does not match "
                f"axis {ax_b} of b (len {b.shape[ax_b]})"
            )
    if pairs:
        axes_a, axes_b = zip(*pairs)
    else:
        axes_a, axes_b = (), ()
    return np.tensordot(a, b, axes=(axes_a, axes_b))


def svd_split(t, left_axes, right_axes, max_rank):
    """Split ``t`` into ``left @ diag(s) @ right`` across an axis bipartition.

    Returns ``(left, s, right)`` where ``left`` has shape
    ``(*left_axis_lens, k)`` with orthonormal columns, ``right`` has shape
    ``(k, *right_axis_lens)`` with orthonormal rows, and ``s`` is the
    descending vector of the ``k <= max_rank`` retained singular values.
    The Frobenius reconstruction error equals the root-sum-square of the
    discarded singular values.
    """
    if max_rank < 1:
        raise InvalidArgumentError(f"max_rank must be >= 1, got {max_rank}")
    t = asc128(t)
    left_axes = list(left_axes)
    right_axes = list(right_axes)
    if sorted(left_axes + right_axes) != list(range(t.ndim)):
        raise InvalidArgumentError(
            f"left {left_axes} + right {right_axes} must partition all "
            f"{t.ndim} axes"
        )
    ldims = [t.shape[ax] for ax in left_axes]
    rdims = [t.shape[ax] for ax in right_axes]
    mat = t.transpose(left_axes + right_axes).reshape(
        int(np.prod(ldims, dtype=np.int64)), int(np.prod(rdims, dtype=np.int64))
    )
    u, s, vh = np.linalg.svd(mat, full_matrices=False)
    k = min(max_rank, len(s))
    left = u[:, :k].reshape(*ldims, k)
    right = vh[:k].reshape(k, *rdims)
    return left, s[:k].copy(), right


def _matricize(t, in_axes):
    """Reshape ``t`` to an (in_dim, out_dim) matrix, returning reshape info."""
    t = asc128(t)
    in_axes = list(in_axes)
    out_axes = [ax for ax in range(t.ndim) if ax not in in_axes]
    in_dim = int(np.prod([t.shape[ax] for ax in in_axes], dtype=np.int64))
    out_dim = int(np.prod([t.shape[ax] for ax in out_axes], dtype=np.int64))
    mat = t.transpose(in_axes + out_axes).reshape(in_dim, out_dim)
    return mat, in_axes, out_axes, in_dim, out_dim


def polar_isometry(mat) -> np.ndarray:
    """Nearest matrix with orthonormal rows to ``mat`` (shape (m, n), m <= n).

    Computed as ``u @ vh`` from the thin SVD.  Singular values below
    ``RANK_FLOOR * s_max`` are treated as zero; the corresponding null
    directions are completed from the SVD basis itself, which is
    deterministic for a given input.
    """
    u, s, vh = np.linalg.svd(mat, full_matrices=False)
    if s[0] <= 0.0:
        raise DegenerateInputError("cannot isometrize an all-zero matrix")
    # u/vh columns for zero singular values are still a valid orthonormal
    # completion; u @ vh therefore has exactly orthonormal rows.
    return u @ vh


def isometrize(t, in_axes) -> np.ndarray:
    """Project ``t`` onto the nearest isometry from ``in_axes`` into the rest.

    The matricization over (input axes) x (output axes) is replaced by its
    polar factor, the closest matrix in Frobenius norm with ``W^dag W = I`` on
    the input space.  Requires in_dim <= out_dim.  The result keeps the axis
    order of ``t``.
    """
    mat, in_axes, out_axes, in_dim, out_dim = _matricize(t, in_axes)
    if in_dim > out_dim:
        raise DirectionViolationError(
            f"input space (dim {in_dim}) larger than output space "
            f"(dim {out_dim}); reduction must go through reduction operators"
        )
    w = polar_isometry(mat)
    t2 = w.reshape([t.shape[ax] for ax in in_axes + out_axes])
    inv = np.argsort(in_axes + out_axes)
    return t2.transpose(inv)


def isometry_defect(t, in_axes) -> float:
    """Max-abs deviation of ``W^dag W`` from the identity on the input space."""
    mat, _, _, in_dim, _ = _matricize(t, in_axes)
    return float(np.abs(mat @ mat.conj().T - np.eye(in_dim)).max())


def partial_trace(rho, dims, traced) -> np.ndarray:
    """Trace out the subsystems listed in ``traced``.

    ``dims`` are the tensor-product factor dimensions of ``rho`` (their
    product must equal the side length); ``traced`` is a set of indices into
    ``dims``.  The result is the reduced density matrix on the remaining
    factors, in their original order.
    """
    rho = asc128(rho)
    dims = list(dims)
    d = int(np.prod(dims, dtype=np.int64))
    if rho.shape != (d, d):
        raise InvalidArgumentError(
            f"dims product {d} does not match matrix of shape {rho.shape}"
        )
    traced = sorted(set(traced))
    if any(i < 0 or i >= len(dims) for i in traced):
        raise InvalidArgumentError(f"traced indices {traced} out of range")
    keep = [i for i in range(len(dims)) if i not in traced]
    n = len(dims)
    tens = rho.reshape(dims + dims)
    for off, i in enumerate(traced):
        # Ket axis i has `off` earlier ket axes removed before it; the bra
        # axis n+i additionally lost the `off` matching bra axes.
        tens = np.trace(tens, axis1=i - off, axis2=n + i - 2 * off)
    dk = int(np.prod([dims[i] for i in keep], dtype=np.int64))
    return tens.reshape(dk, dk)


def trace_norm_check(rho, atol=1e-12) -> bool:
    """True when ``rho`` is Hermitian and PSD up to ``atol`` with trace <= 1."""
    rho = asc128(rho)
    if np.abs(rho - rho.conj().T).max() > atol * max(1.0, np.abs(rho).max()):
        return False
    evals = np.linalg.eigvalsh((rho + rho.conj().T) / 2.0)
    if evals.min() < -atol:
        return False
    tr = rho.trace().real
    return -atol <= tr <= 1.0 + atol
