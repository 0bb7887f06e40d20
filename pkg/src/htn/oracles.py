"""Dense brute-force reference implementations.

Everything here deliberately avoids the streaming environment contraction
used by the production forward pass: models are expanded into one global
matrix on the full 2^n input space and outputs are computed by plain matrix
algebra.  Only usable at desk scale (a handful of sites); used by the test
suite and by ``htn verify``.
"""

from __future__ import annotations

import numpy as np

from .tncore import asc128


def dense_isometry(model) -> np.ndarray:
    """Global matrix of the ket network.

    Returns V of shape (R * O, 2^n) mapping the joint input space to the
    joint (reduction, output) space, with R the product of the reduction
    legs and O the product of the output legs, both in site order.  For a
    valid model V^dag V = I.
    """
    n = model.n_sites
    # Running tensor with axes (phys_0..phys_{k-1}, red_0..red_{k-1},
    # out_0..out_{k-1}, bond_k), kept in that order after each step.
    t = np.ones((1,), dtype=np.complex128)
    t = t.reshape(1)
    n_phys = 0
    for k, a in enumerate(model.sites):
        t = np.tensordot(t, asc128(a), axes=([t.ndim - 1], [0]))
        # new axes: (phys.., red.., out.., phys_k, bond_{k+1}, red_k, out_k)
        nd = t.ndim
        perm = (
            list(range(n_phys))
            + [nd - 4]
            + list(range(n_phys, n_phys + k))
            + [nd - 2]
            + list(range(n_phys + k, n_phys + 2 * k))
            + [nd - 1]
            + [nd - 3]
        )
        t = t.transpose(perm)
        n_phys += 1
    # Drop the trivial closing bond, group (red, out) x (phys).
    t = t.reshape(t.shape[:-1])
    phys_dim = 2**n
    return t.reshape(phys_dim, -1).T.copy()


def joint_reduction(model) -> np.ndarray:
    """Tensor product of all reduction operators, in site order."""
    d = np.ones(1)
    for k in range(model.n_sites):
        d = np.kron(d, model.reduction(k))
    return d


def stinespring_forward(model, site_vectors) -> np.ndarray:
    """Output density via the global-matrix route.

    Builds psi as the full 2^n product state, applies the dense network
    matrix, and contracts the reduction space against the aggregated diagonal
    reduction operator: rho[o, o'] = sum_r w[r, o] conj(w[r, o']) D[r].
    """
    v = dense_isometry(model)
    psi = np.ones(1, dtype=np.complex128)
    for vec in np.asarray(site_vectors, dtype=np.complex128):
        psi = np.kron(psi, vec)
    w = v @ psi
    d_all = joint_reduction(model)
    out = model.out_total
    w = w.reshape(-1, out)
    return np.einsum("ro,rp,r->op", w, w.conj(), d_all)


def random_density(dim, rng, rank=None, mix=0.0) -> np.ndarray:
    """Random positive semidefinite matrix with unit trace.

    ``rank`` bounds the rank; ``mix`` blends in the maximally mixed state to
    guarantee full rank.
    """
    rank = rank or dim
    g = rng.standard_normal((dim, rank)) + 1j * rng.standard_normal((dim, rank))
    rho = g @ g.conj().T
    rho /= rho.trace().real
    if mix > 0.0:
        rho = (1.0 - mix) * rho + mix * np.eye(dim) / dim
    return rho


def random_unitary(dim, rng) -> np.ndarray:
    """Haar-ish random unitary from the QR of a complex Gaussian matrix."""
    g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def stinespring_channel(dim_sys, dim_env, rng):
    """A random channel as (unitary, apply) with apply(rho) the partial trace
    of U (rho x |0><0|) U^dag over the environment."""
    u = random_unitary(dim_sys * dim_env, rng)

    def apply(rho):
        rho = asc128(rho)
        # rho x |0><0|_env with the environment as the trailing factor
        e0 = np.zeros((dim_env, dim_env))
        e0[0, 0] = 1.0
        big = np.kron(rho, e0)
        evolved = u @ big @ u.conj().T
        t = evolved.reshape(dim_sys, dim_env, dim_sys, dim_env)
        return np.trace(t, axis1=1, axis2=3)

    return u, apply


def apply_matrix_postselected(m, psi):
    """Reference semantics of the compiled circuits: the post-selected output
    state M psi / ||M psi|| and the retention ||M psi||^2 / r^2 with r the
    largest singular value of M."""
    m = asc128(m)
    psi = asc128(psi)
    out = m @ psi
    nrm = np.linalg.norm(out)
    r = np.linalg.svd(m, compute_uv=False)[0]
    if nrm == 0.0:
        return None, 0.0
    return out / nrm, float(nrm**2 / r**2)
