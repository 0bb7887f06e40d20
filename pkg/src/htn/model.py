"""Chain model with trainable reduction operators: forward pass, the
normalization family, depolarization, losses, and analytic gradients.

Model layout
------------
A model is a chain of ``n`` site tensors.  Site ``k`` has axes

    (left_bond, phys, right_bond, red, out)

and is isometric from ``(left_bond, phys)`` into ``(right_bond, red, out)``:
matricized over those groups, ``W^dag W = I`` on the input side.  The ``red``
axis (dimension xi) is paired with the conjugate network through a real
diagonal matrix ``D = diag(sin^2 theta)`` with entries in [0, 1]; the ``out``
axes (dimension 1 or 2) carry the classifier output.  Contracting the chain
with its conjugate through the reduction operators yields a sub-normalized
density matrix on the joint output legs: reduction operators at identity act
as partial traces (the trace is preserved), one-hot reduction operators act
as post-selection (the trace shrinks by the discarded weight).

The forward pass streams a stack of per-sample (ket, bra) environments
through the chain and never materializes the 2^n input space.  Environments
are arrays ``(N, bond, bond', out_ket, out_bra)``; output legs accumulate in
site order, earliest site most significant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import (
    EncodingRangeError,
    InvalidArgumentError,
    NumericalDomainError,
    ShapeMismatchError,
    VanishedStateError,
)
from .tncore import asc128, isometrize, isometry_defect

# Traces at or below this floor count as fully post-selected away.
TRACE_FLOOR = 1e-15
# Largest reduction entry is lifted to this floor so D never vanishes.
REDUCTION_FLOOR = 1e-6
# Isometry tolerance for model validation.
ISO_TOL = 1e-10


# ---------------------------------------------------------------------------
# Encoding


@dataclass(frozen=True)
class EncodedState:
    """Product-state encoding of one sample: one unit vector per site.

    ``vectors`` has shape (n_sites, 2); the trailing ``ancilla_count`` rows
    are fixed at (1, 0).
    """

    vectors: np.ndarray
    ancilla_count: int = 0

    def __post_init__(self):
        v = asc128(self.vectors)
        if v.ndim != 2 or v.shape[1] != 2:
            raise InvalidArgumentError(f"vectors must be (n, 2), got {v.shape}")
        norms = np.linalg.norm(v, axis=1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-12:
            raise InvalidArgumentError("site vectors must have unit 2-norm")
        if self.ancilla_count:
            anc = v[-self.ancilla_count:]
            if np.abs(anc - np.array([1.0, 0.0])).max() > 0:
                raise InvalidArgumentError("ancilla sites must be exactly (1, 0)")
        object.__setattr__(self, "vectors", v)

    @property
    def n_sites(self) -> int:
        return self.vectors.shape[0]


def encode_features(features) -> np.ndarray:
    """Map features in [0, 1] to (cos(pi x / 2), sin(pi x / 2)) rows."""
    x = np.asarray(features, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        bad = x[(x < 0.0) | (x > 1.0)].flat[0]
        raise EncodingRangeError(f"feature value {bad} outside [0, 1]")
    ang = 0.5 * np.pi * x
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1).astype(np.complex128)


def encode_rotational(features, n_sites=None) -> EncodedState:
    """Rotational product-state encoding of one feature vector.

    When ``n_sites`` exceeds the feature count, the remaining sites are
    ancillas fixed at (1, 0).
    """
    vecs = encode_features(np.atleast_1d(features))
    n_feat = vecs.shape[0]
    if n_sites is None:
        n_sites = n_feat
    if n_sites < n_feat:
        raise InvalidArgumentError(
            f"n_sites {n_sites} smaller than feature count {n_feat}"
        )
    anc = n_sites - n_feat
    if anc:
        pad = np.zeros((anc, 2), dtype=np.complex128)
        pad[:, 0] = 1.0
        vecs = np.vstack([vecs, pad])
    return EncodedState(vectors=vecs, ancilla_count=anc)


def encode_batch(features, n_sites=None) -> np.ndarray:
    """Encode a (N, n_features) matrix to a (N, n_sites, 2) array."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError(f"expected (N, F) features, got {x.shape}")
    vecs = encode_features(x)
    if n_sites is not None and n_sites > x.shape[1]:
        pad = np.zeros((x.shape[0], n_sites - x.shape[1], 2), dtype=np.complex128)
        pad[:, :, 0] = 1.0
        vecs = np.concatenate([vecs, pad], axis=1)
    return vecs


# ---------------------------------------------------------------------------
# Labels and loss configuration


@dataclass(frozen=True)
class LabelState:
    """A class label as the pure computational-basis state |l><l|."""

    class_index: int
    dim: int

    def __post_init__(self):
        if not 0 <= self.class_index < self.dim:
            raise InvalidArgumentError(
                f"class index {self.class_index} not below dim {self.dim}"
            )

    def density(self) -> np.ndarray:
        rho = np.zeros((self.dim, self.dim), dtype=np.complex128)
        rho[self.class_index, self.class_index] = 1.0
        return rho


@dataclass(frozen=True)
class LossConfig:
    """Normalization variant, depolarization strength, and loss kind.

    variant: 'full' divides by the trace; 'threshold' divides by
    max(trace, t); 'weight' divides by trace**(1 - w); 'none' leaves the
    state untouched.  lam is the depolarizing probability applied before the
    matrix logarithm (cross-entropy only).
    """

    variant: str = "full"
    t: float = 1.0
    w: float = 1.0
    lam: float = 1e-6
    loss_kind: str = "cross_entropy"

    def __post_init__(self):
        if self.variant not in ("full", "threshold", "weight", "none"):
            raise InvalidArgumentError(f"unknown variant {self.variant!r}")
        if self.variant == "threshold" and not 0.0 <= self.t <= 1.0:
            raise InvalidArgumentError(f"t must be in [0, 1], got {self.t}")
        if self.variant == "weight" and not 0.0 <= self.w <= 1.0:
            raise InvalidArgumentError(f"w must be in [0, 1], got {self.w}")
        if not 0.0 <= self.lam < 1.0:
            raise InvalidArgumentError(f"lambda must be in [0, 1), got {self.lam}")
        if self.loss_kind not in ("cross_entropy", "mse"):
            raise InvalidArgumentError(f"unknown loss kind {self.loss_kind!r}")


# ---------------------------------------------------------------------------
# Reduction operators and bond geometry


def reduction_values(theta) -> np.ndarray:
    """Diagonal reduction entries sin^2(theta), floored away from zero.

    If every entry falls below REDUCTION_FLOOR, the largest is lifted to the
    floor so the operator never vanishes.
    """
    d = np.sin(np.asarray(theta, dtype=np.float64)) ** 2
    if d.size and d.max() < REDUCTION_FLOOR:
        d = d.copy()
        d[int(np.argmax(d))] = REDUCTION_FLOOR
    return d


def identity_theta(xi: int) -> np.ndarray:
    """Parameters mapping to the identity reduction operator."""
    return np.full(xi, 0.5 * np.pi)


def bond_dims(n_sites, chi, xi, output_dims) -> list[int]:
    """Feasible bond dimensions for a chain, ends pinned at 1.

    ``output_dims`` lists the out-leg dimension of every site.  Bonds are
    capped by chi, by the input rank growing from the left, and by the
    isometry capacity 2*b[k] <= b[k+1] * xi * o[k] propagated from the right.
    """
    if chi < 1 or xi < 1:
        raise InvalidArgumentError(f"chi and xi must be >= 1, got {chi}, {xi}")
    output_dims = list(output_dims)
    if len(output_dims) != n_sites:
        raise InvalidArgumentError("output_dims must list every site")
    cap = [0] * (n_sites + 1)
    cap[n_sites] = 1
    for k in range(n_sites - 1, -1, -1):
        cap[k] = min(cap[k + 1] * xi * output_dims[k] // 2, 1 << 60)
    b = [1] * (n_sites + 1)
    grow = 1
    for k in range(1, n_sites):
        grow = min(grow * 2, 1 << 60)
        b[k] = min(chi, grow, cap[k])
        if b[k] < 1:
            raise InvalidArgumentError(
                f"no isometric chain exists: bond {k} capacity is {cap[k]} "
                f"(increase xi or output dims)"
            )
    for k in range(n_sites):
        if 2 * b[k] > b[k + 1] * xi * output_dims[k]:
            raise InvalidArgumentError(
                f"site {k} cannot be isometric: 2*{b[k]} > "
                f"{b[k + 1]}*{xi}*{output_dims[k]}"
            )
    return b


def default_output_dims(n_sites, n_classes) -> list[int]:
    """Place 2-dimensional output legs on the last sites until the joint
    output space covers ``n_classes``."""
    dims = [1] * n_sites
    k = n_sites - 1
    total = 1
    while total < n_classes:
        if k < 0:
            raise InvalidArgumentError("not enough sites for the class count")
        dims[k] = 2
        total *= 2
        k -= 1
    return dims


@dataclass
class HtnModel:
    """Isometric site chain plus per-site reduction parameters.

    sites[k] has axes (left_bond, phys=2, right_bond, xi, out_k);
    thetas[k] parametrizes the reduction operator on site k's red leg.
    """

    sites: list
    thetas: list
    chi: int
    xi: int
    n_classes: int

    def __post_init__(self):
        self.sites = [asc128(a) for a in self.sites]
        self.thetas = [np.asarray(t, dtype=np.float64) for t in self.thetas]
        self.validate()

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def output_dims(self) -> list[int]:
        return [a.shape[4] for a in self.sites]

    @property
    def out_total(self) -> int:
        return int(np.prod(self.output_dims, dtype=np.int64))

    @property
    def bonds(self) -> list[int]:
        return [a.shape[0] for a in self.sites] + [self.sites[-1].shape[2]]

    def reduction(self, k) -> np.ndarray:
        return reduction_values(self.thetas[k])

    def validate(self):
        if not self.sites:
            raise InvalidArgumentError("model needs at least one site")
        if len(self.thetas) != len(self.sites):
            raise InvalidArgumentError("one reduction parameter vector per site")
        left = 1
        for k, a in enumerate(self.sites):
            if a.ndim != 5 or a.shape[1] != 2:
                raise InvalidArgumentError(
                    f"site {k} must have axes (left, 2, right, xi, out), "
                    f"got shape {a.shape}"
                )
            if a.shape[0] != left:
                raise InvalidArgumentError(
                    f"site {k} left bond {a.shape[0]} != previous right {left}"
                )
            if a.shape[3] != self.xi:
                raise InvalidArgumentError(
                    f"site {k} reduction leg {a.shape[3]} != xi {self.xi}"
                )
            if len(self.thetas[k]) != self.xi:
                raise InvalidArgumentError(f"theta[{k}] must have length xi {self.xi}")
            defect = isometry_defect(a, in_axes=(0, 1))
            if defect > ISO_TOL:
                raise InvalidArgumentError(
                    f"site {k} is not isometric (defect {defect:.2e})"
                )
            left = a.shape[2]
        if left != 1:
            raise InvalidArgumentError("rightmost bond must close at dimension 1")
        for k in range(self.n_sites):
            d = self.reduction(k)
            if d.min() < 0.0 or d.max() > 1.0 or d.max() <= 0.0:
                raise InvalidArgumentError(f"reduction operator {k} out of [0, 1]")
        if self.out_total < self.n_classes:
            raise InvalidArgumentError(
                f"joint output dim {self.out_total} below {self.n_classes} classes"
            )

    def copy(self) -> "HtnModel":
        return HtnModel(
            sites=[a.copy() for a in self.sites],
            thetas=[t.copy() for t in self.thetas],
            chi=self.chi,
            xi=self.xi,
            n_classes=self.n_classes,
        )

    def with_identity_reduction(self) -> "HtnModel":
        m = self.copy()
        m.thetas = [identity_theta(self.xi) for _ in m.sites]
        return m


def random_model(
    n_sites,
    chi,
    xi,
    n_classes,
    rng,
    identity_reduction=False,
    output_dims=None,
) -> HtnModel:
    """Model with isometrized Gaussian site tensors and random (or identity)
    reduction parameters."""
    if output_dims is None:
        output_dims = default_output_dims(n_sites, n_classes)
    b = bond_dims(n_sites, chi, xi, output_dims)
    sites = []
    for k in range(n_sites):
        shape = (b[k], 2, b[k + 1], xi, output_dims[k])
        raw = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        sites.append(isometrize(raw, in_axes=(0, 1)))
    if identity_reduction:
        thetas = [identity_theta(xi) for _ in range(n_sites)]
    else:
        thetas = [rng.uniform(0.15, np.pi / 2, size=xi) for _ in range(n_sites)]
    return HtnModel(sites=sites, thetas=thetas, chi=chi, xi=xi, n_classes=n_classes)


# ---------------------------------------------------------------------------
# Forward pass


def site_with_input(a, x) -> np.ndarray:
    """Contract a site tensor with a batch of input vectors.

    a: (l, 2, r, xi, o); x: (N, 2) -> (N, l, r, xi, o).
    """
    l, _, r, xi, o = a.shape
    flat = np.moveaxis(a, 1, 0).reshape(2, -1)
    return (x @ flat).reshape(-1, l, r, xi, o)


def fresh_envs(n) -> np.ndarray:
    """Trivial boundary environments for n samples."""
    return np.ones((n, 1, 1, 1, 1), dtype=np.complex128)


def apply_site_left(env, a, x, d) -> np.ndarray:
    """Push environments rightward through one site.

    env: (N, l, l', u, v); returns (N, r, r', u*o, v*o).
    """
    ax = site_with_input(a, x)
    if env.shape[3] == env.shape[4] == 1 and a.shape[4] == 1:
        out = kernels.env_update(
            np.ascontiguousarray(env[:, :, :, 0, 0]), ax[:, :, :, :, 0], d
        )
        return out[:, :, :, None, None]
    return kernels.env_update_out(env, ax, d)


def apply_site_right(env, a, x, d) -> np.ndarray:
    """Push environments leftward through one site.

    env: (N, r, r', u, v); returns (N, l, l', o*u, o*v).
    """
    ax = site_with_input(a, x)
    if env.shape[3] == env.shape[4] == 1 and a.shape[4] == 1:
        swapped = np.ascontiguousarray(ax[:, :, :, :, 0].transpose(0, 2, 1, 3))
        out = kernels.env_update(
            np.ascontiguousarray(env[:, :, :, 0, 0]), swapped, d
        )
        return out[:, :, :, None, None]
    return kernels.env_update_out_right(env, ax, d)


def _check_sites(model, x_batch):
    if x_batch.ndim != 3 or x_batch.shape[1] != model.n_sites:
        raise ShapeMismatchError(
            f"encoded batch shape {x_batch.shape} does not match "
            f"{model.n_sites} model sites"
        )


def batch_forward(model, x_batch) -> np.ndarray:
    """Densities on the output legs for a (N, n_sites, 2) encoded batch."""
    x_batch = asc128(x_batch)
    _check_sites(model, x_batch)
    env = fresh_envs(x_batch.shape[0])
    for k, a in enumerate(model.sites):
        env = apply_site_left(env, a, x_batch[:, k], model.reduction(k))
    return np.ascontiguousarray(env[:, 0, 0, :, :])


def forward(model, sigma: EncodedState) -> np.ndarray:
    """Output density matrix of one encoded sample (Hermitian PSD, trace <= 1)."""
    if sigma.n_sites != model.n_sites:
        raise ShapeMismatchError(
            f"state has {sigma.n_sites} sites, model has {model.n_sites}"
        )
    return batch_forward(model, sigma.vectors[None])[0]


def build_left_envs(model, x_batch) -> list:
    """left[k] = environment of sites 0..k-1 per sample; left[0] is trivial."""
    x_batch = asc128(x_batch)
    _check_sites(model, x_batch)
    envs = [fresh_envs(x_batch.shape[0])]
    for k, a in enumerate(model.sites):
        envs.append(apply_site_left(envs[-1], a, x_batch[:, k], model.reduction(k)))
    return envs


def build_right_envs(model, x_batch) -> list:
    """right[k] = environment of sites k..n-1; right[n] is trivial."""
    x_batch = asc128(x_batch)
    _check_sites(model, x_batch)
    n = model.n_sites
    envs: list = [None] * (n + 1)
    envs[n] = fresh_envs(x_batch.shape[0])
    for k in range(n - 1, -1, -1):
        envs[k] = apply_site_right(
            envs[k + 1], model.sites[k], x_batch[:, k], model.reduction(k)
        )
    return envs


# ---------------------------------------------------------------------------
# Normalization family, depolarization, completions


def norm_scale(trace, cfg: LossConfig):
    """Divisor applied by the normalization variant, or None when the sample
    has been fully post-selected away (vanished trace under a dividing
    variant)."""
    tr = float(trace)
    if cfg.variant == "none":
        return 1.0
    if cfg.variant == "threshold":
        m = max(tr, cfg.t)
        return None if m <= TRACE_FLOOR else m
    if cfg.variant == "weight":
        if cfg.w >= 1.0:
            return 1.0
        return None if tr <= TRACE_FLOOR else tr ** (1.0 - cfg.w)
    return None if tr <= TRACE_FLOOR else tr


def normalize(rho, cfg: LossConfig) -> np.ndarray:
    """Apply the configured normalization; raises VanishedStateError when the
    trace sits at the floor under a dividing variant."""
    rho = asc128(rho)
    m = norm_scale(rho.trace().real, cfg)
    if m is None:
        raise VanishedStateError(
            f"trace {rho.trace().real:.3e} below floor under {cfg.variant!r}"
        )
    return rho / m


def depolarize(rho, lam) -> np.ndarray:
    """(1 - lam) * rho + lam * I/d."""
    if not 0.0 <= lam <= 1.0:
        raise InvalidArgumentError(f"lambda must be in [0, 1], got {lam}")
    rho = asc128(rho)
    d = rho.shape[0]
    return (1.0 - lam) * rho + (lam / d) * np.eye(d)


def randomized_completion(rho) -> np.ndarray:
    """Fill the post-selected-away weight with the maximally mixed state so
    the result has unit trace."""
    rho = asc128(rho)
    tr = rho.trace().real
    if tr > 1.0 + 1e-12:
        raise InvalidArgumentError(f"trace {tr} exceeds 1")
    d = rho.shape[0]
    return rho + ((1.0 - tr) / d) * np.eye(d)


def hermitian_log(mat) -> np.ndarray:
    """Matrix logarithm of a Hermitian positive definite matrix via
    eigendecomposition.  Raises NumericalDomainError on non-positive
    eigenvalues; positive eigenvalues are floored at 1e-300."""
    evals, vecs = np.linalg.eigh(asc128(mat))
    if evals.min() <= 0.0:
        raise NumericalDomainError(
            f"matrix log undefined: smallest eigenvalue {evals.min():.3e}"
        )
    logs = np.log(np.maximum(evals, 1e-300))
    return (vecs * logs) @ vecs.conj().T


def relative_entropy(rho, sigma) -> float:
    """S(rho || sigma) = tr(rho log rho - rho log sigma).

    Returns +inf when rho has weight outside the support of sigma.
    """
    rho = asc128(rho)
    sigma = asc128(sigma)
    er = np.linalg.eigvalsh(rho)
    es, vs = np.linalg.eigh(sigma)
    floor_r = max(er.max(), 1.0) * 1e-15
    floor_s = max(es.max(), 1.0) * 1e-14
    w = np.einsum("ai,ab,bi->i", vs.conj(), rho, vs).real
    if np.any((es < floor_s) & (w > 1e-12)):
        return math.inf
    pos_r = er > floor_r
    s_rho = float(np.sum(er[pos_r] * np.log(er[pos_r])))
    good = es > floor_s
    s_cross = float(np.sum(w[good] * np.log(es[good])))
    return s_rho - s_cross


# ---------------------------------------------------------------------------
# Losses


@dataclass
class BatchLoss:
    """Result of one loss evaluation over a batch.

    ``included`` masks off samples fully post-selected away; ``value`` is the
    mean over included terms (nan when every sample vanished).  When
    requested, ``adjoints`` holds per-sample Hermitian matrices G_i with
    d(term_i) = tr(G_i d rho_i); excluded samples get zero.
    """

    value: float
    terms: np.ndarray
    included: np.ndarray
    traces: np.ndarray
    adjoints: np.ndarray | None = None

    @property
    def abstention_rate(self) -> float:
        if self.included.size == 0:
            return 0.0
        return 1.0 - float(self.included.mean())


def _scales_and_mask(traces, cfg: LossConfig):
    """Vectorized norm_scale: per-sample divisors plus the inclusion mask."""
    tr = np.asarray(traces, dtype=np.float64)
    if cfg.variant == "none" or (cfg.variant == "weight" and cfg.w >= 1.0):
        return np.ones_like(tr), np.ones_like(tr, dtype=bool)
    if cfg.variant == "threshold":
        m = np.maximum(tr, cfg.t)
        inc = m > TRACE_FLOOR
    elif cfg.variant == "weight":
        inc = tr > TRACE_FLOOR
        m = np.where(inc, tr, 1.0) ** (1.0 - cfg.w)
    else:
        inc = tr > TRACE_FLOOR
        m = np.where(inc, tr, 1.0)
    return m, inc


def _backprop_norm_batch(g_n, rhos, traces, scales, cfg: LossConfig):
    """Pull per-sample adjoints through the normalization map."""
    if cfg.variant == "none" or (cfg.variant == "weight" and cfg.w >= 1.0):
        return g_n
    d = rhos.shape[1]
    eye = np.eye(d)
    coupling = np.einsum("nab,nba->n", g_n, rhos)
    m = scales
    if cfg.variant == "full":
        factor = coupling / m**2
    elif cfg.variant == "threshold":
        factor = np.where(traces > cfg.t, coupling / m**2, 0.0)
    else:  # weight, w < 1
        safe_tr = np.where(traces > TRACE_FLOOR, traces, 1.0)
        factor = (1.0 - cfg.w) * coupling * safe_tr ** (cfg.w - 2.0)
    return g_n / m[:, None, None] - factor[:, None, None] * eye[None]


def loss_from_rhos(rhos, label_indices, cfg: LossConfig, want_adjoints=False) -> BatchLoss:
    """Evaluate the configured loss on a stack of raw output densities."""
    rhos = asc128(rhos)
    n, d, _ = rhos.shape
    labels = np.asarray(label_indices, dtype=np.int64)
    traces = np.einsum("ncc->n", rhos).real.copy()
    scales, included = _scales_and_mask(traces, cfg)
    nr = rhos / scales[:, None, None]
    terms = np.zeros(n)
    adjoints = None
    if cfg.loss_kind == "cross_entropy":
        lam = cfg.lam
        rt = (1.0 - lam) * nr + (lam / d) * np.eye(d)[None]
        evals, vecs = np.linalg.eigh(rt)
        bad = included & (evals.min(axis=1) <= 0.0)
        if bad.any():
            raise NumericalDomainError(
                f"non-positive eigenvalue {evals[bad].min():.3e} in processed "
                f"state (need lambda > 0 or full-rank outputs)"
            )
        evals = np.maximum(evals, 1e-300)
        logs = np.log(evals)
        rows = vecs[np.arange(n), labels, :]
        terms = -np.sum(logs * np.abs(rows) ** 2, axis=1)
        if want_adjoints:
            # Frechet adjoint of the Hermitian log applied to tau = |l><l|.
            diff = evals[:, :, None] - evals[:, None, :]
            close = np.abs(diff) < 1e-14 * np.maximum(evals.max(axis=1), 1.0)[
                :, None, None
            ]
            ratio = np.log(evals[:, :, None] / evals[:, None, :])
            lmat = np.where(close, 1.0 / evals[:, :, None], ratio / np.where(close, 1.0, diff))
            mmat = rows.conj()[:, :, None] * rows[:, None, :]
            g_log = -np.einsum("nap,npq,nbq->nab", vecs, mmat * lmat, vecs.conj())
            g_n = (1.0 - lam) * g_log
            adjoints = _backprop_norm_batch(g_n, rhos, traces, scales, cfg)
    else:
        taus = np.zeros((n, d, d))
        taus[np.arange(n), labels, labels] = 1.0
        diffs = nr - taus
        terms = 0.5 * np.einsum("nab,nba->n", diffs, diffs).real
        if want_adjoints:
            adjoints = _backprop_norm_batch(diffs, rhos, traces, scales, cfg)
    terms = np.where(included, terms, 0.0)
    if want_adjoints:
        adjoints = np.where(included[:, None, None], adjoints, 0.0)
    value = float(terms[included].mean()) if included.any() else float("nan")
    return BatchLoss(
        value=value, terms=terms, included=included, traces=traces, adjoints=adjoints
    )


def _as_pairs(batch):
    xs = np.stack([s.vectors for s, _ in batch])
    labels = np.array([l.class_index for _, l in batch], dtype=np.int64)
    return xs, labels


def cross_entropy_loss(batch, model: HtnModel, cfg: LossConfig) -> float:
    """Mean cross-entropy of (EncodedState, LabelState) pairs."""
    xs, labels = _as_pairs(batch)
    cfg = replace(cfg, loss_kind="cross_entropy")
    return loss_from_rhos(batch_forward(model, xs), labels, cfg).value


def mse_loss(batch, model: HtnModel, cfg: LossConfig) -> float:
    """Mean squared deviation 0.5 tr((tau - N(rho))^2) over a batch."""
    xs, labels = _as_pairs(batch)
    cfg = replace(cfg, loss_kind="mse")
    return loss_from_rhos(batch_forward(model, xs), labels, cfg).value


def batch_loss(model: HtnModel, x_batch, label_indices, cfg: LossConfig,
               want_adjoints=False) -> BatchLoss:
    rhos = batch_forward(model, asc128(x_batch))
    return loss_from_rhos(rhos, label_indices, cfg, want_adjoints=want_adjoints)


# ---------------------------------------------------------------------------
# Prediction


def predict(model: HtnModel, sigma: EncodedState, cfg: LossConfig) -> int:
    """Class with the largest diagonal weight of the normalized output,
    restricted to the first n_classes entries; ties break to the lowest
    index.  Raises VanishedStateError when the sample is fully post-selected
    away under a dividing variant."""
    rho = normalize(forward(model, sigma), cfg)
    return int(np.argmax(np.diag(rho).real[: model.n_classes]))


def classify_batch(model: HtnModel, x_batch, cfg: LossConfig):
    """Predictions for a batch; abstained samples get -1.

    Returns (predictions, abstained_mask).
    """
    rhos = batch_forward(model, asc128(x_batch))
    traces = np.einsum("ncc->n", rhos).real
    preds = np.full(len(rhos), -1, dtype=np.int64)
    abstained = np.zeros(len(rhos), dtype=bool)
    for i in range(len(rhos)):
        if norm_scale(traces[i], cfg) is None:
            abstained[i] = True
        else:
            preds[i] = int(np.argmax(np.diag(rhos[i]).real[: model.n_classes]))
    return preds, abstained


# ---------------------------------------------------------------------------
# Window contraction and gradients
#
# A "window" is one or two adjacent sites viewed as a single merged tensor
# (left, S, right, R, O): S joins the physical legs, R the reduction legs
# (weighted by the tensor product of the window's reduction operators), and
# O the window's output legs.  Densities and loss gradients factor through
# the per-sample environments on both sides; everything below is batched
# and chunked over samples to bound the intermediates.


def merge_two_sites(a, b) -> np.ndarray:
    """Merged window of adjacent sites in (l, S, r, R, O) form.

    a: (l, 2, m, xa, oa); b: (m, 2, r, xb, ob).  Joint indices order the
    left site's factor first.
    """
    w = np.einsum("lsmpe,mtrqf->lstrpqef", a, b)
    l, s, t, r, p, q, e, f = w.shape
    return np.ascontiguousarray(w.reshape(l, s * t, r, p * q, e * f))


def _window_chunk(left_env, w, budget_elems=4_000_000):
    per = left_env.shape[2] * int(np.prod(w.shape[2:], dtype=np.int64))
    per *= left_env.shape[3] * left_env.shape[4]
    return max(1, budget_elems // max(per, 1))


def _window_inputs(w, d, xy_chunk):
    """Per-sample window tensors in reduction-last layout.

    Returns wx = (n, l, r, O, R) with the window contracted against the
    inputs, plus (when d is given) the same with the reduction weights
    absorbed.  Keeping R last lets every later pairing run as a
    stride-friendly batched matmul.
    """
    l, S, r, R, O = w.shape
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 4, 3)).reshape(S, -1)
    wx = (xy_chunk @ wt).reshape(-1, l, r, O, R)
    wxd = wx * d if d is not None else None
    return wx, wxd


def _apply_left(left_env, wx):
    """t1[n, (L u v), (r O R)] = sum_l left_env[n,l,L,u,v] wx[n,l,(r O R)]."""
    nn, l, L, u, v = left_env.shape
    lm = np.ascontiguousarray(left_env.transpose(0, 2, 3, 4, 1)).reshape(nn, L * u * v, l)
    return np.matmul(lm, wx.reshape(nn, l, -1))


def window_rho(left_env, right_env, w, d, xy, chunk=None) -> np.ndarray:
    """Densities of a batch given fixed environments around a window.

    left_env: (N, l, L, u, v); right_env: (N, r, s, x, y);
    w: (l, S, r, R, O); d: (R,); xy: (N, S).
    Returns (N, Ot, Ot) with Ot = u * O * x.
    """
    n = xy.shape[0]
    chunk = chunk or _window_chunk(left_env, w)
    l, S, r, R, O = w.shape
    outs = []
    for b0 in range(0, n, chunk):
        e = slice(b0, min(b0 + chunk, n))
        wx, wxd = _window_inputs(w, d, xy[e])
        nn = wx.shape[0]
        _, _, L, u, v = left_env.shape
        t1 = _apply_left(left_env[e], wxd).reshape(nn, L, u, v, r, O, R)
        # pair ket and bra over (L, R); swapaxes views keep BLAS zero-copy
        am = np.ascontiguousarray(t1.transpose(0, 4, 5, 2, 3, 1, 6)).reshape(
            nn, r * O * u * v, L * R
        )
        bm = wx.conj().reshape(nn, L, r * O, R)
        bm = np.ascontiguousarray(bm.transpose(0, 2, 1, 3)).reshape(nn, r * O, L * R)
        t2 = np.matmul(am, bm.swapaxes(1, 2)).reshape(nn, r, O, u, v, r, O)
        rho = np.einsum("nrOuvsQ,nrsxy->nuOxvQy", t2, right_env[e], optimize=True)
        nn, u2, o2, x2, v2, q2, y2 = rho.shape
        outs.append(rho.reshape(nn, u2 * o2 * x2, v2 * q2 * y2))
    return np.concatenate(outs, axis=0)


def window_step(left_env, right_env, w, d, xy, label_indices, cfg, chunk=None):
    """Fused per-bond evaluation: densities, loss, and window gradients.

    Shares the input-contracted window and the left-applied intermediate
    between the density and gradient passes.  Returns
    (BatchLoss, gw, gth_joint) where gw follows the ``window_grads``
    convention (raw sum over samples) and gth_joint is the raw gradient for
    the joint reduction weights; both are None when every sample vanished.
    """
    n = xy.shape[0]
    chunk = chunk or _window_chunk(left_env, w)
    l, S, r, R, O = w.shape
    _, _, L, u, v = left_env.shape
    s_dim = right_env.shape[2]
    x_dim, y_dim = right_env.shape[3], right_env.shape[4]
    gw_sum = np.zeros_like(w)
    gd_sum = np.zeros_like(d, dtype=np.float64)
    parts = []
    for b0 in range(0, n, chunk):
        e = slice(b0, min(b0 + chunk, n))
        wx, _ = _window_inputs(w, None, xy[e])
        cwx = np.conjugate(wx)  # layout (n, L, s, Q, R)
        nn = wx.shape[0]
        t1 = _apply_left(left_env[e], wx).reshape(nn, L, u, v, r, O, R)
        # one transposed copy serves both pairings
        tc = np.ascontiguousarray(t1.transpose(0, 1, 6, 2, 3, 5, 4))  # (n,L,R,u,v,O,r)
        bm = np.ascontiguousarray(
            cwx.reshape(nn, L, r * O, R).transpose(0, 2, 1, 3)
        ).reshape(nn, r * O, L * R)
        tcd = tc * d[None, None, :, None, None, None, None]
        t2 = np.matmul(bm, tcd.reshape(nn, L * R, u * v * O * r)).reshape(
            nn, r, O, u, v, O, r
        )
        rho = np.einsum("nsQuvOr,nrsxy->nuOxvQy", t2, right_env[e], optimize=True)
        part = loss_from_rhos(
            rho.reshape(nn, u * O * x_dim, v * O * y_dim),
            np.asarray(label_indices)[e], cfg, want_adjoints=True,
        )
        parts.append(part)
        if part.included.any():
            g7 = part.adjoints.reshape(nn, v, O, y_dim, u, O, x_dim)
            gr = np.einsum("nvQyuOx,nrsxy->nuvOrQs", g7, right_env[e], optimize=True)
            t5 = np.matmul(
                tc.reshape(nn, L * R, u * v * O * r),
                gr.reshape(nn, u * v * O * r, -1),
            ).reshape(nn, L, R, O, s_dim)
            gw_sum += np.einsum(
                "nLRQs,nT,R->LTsRQ", t5, xy[e].conj(), d, optimize=True
            )
            gd_sum += np.einsum("nLRQs,nLsQR->R", t5, cwx, optimize=True).real
    terms = np.concatenate([p.terms for p in parts])
    included = np.concatenate([p.included for p in parts])
    traces = np.concatenate([p.traces for p in parts])
    value = float(terms[included].mean()) if included.any() else float("nan")
    bl = BatchLoss(value=value, terms=terms, included=included, traces=traces)
    if not included.any():
        return bl, None, None
    return bl, gw_sum, gd_sum


def window_grads(left_env, right_env, w, d, xy, adjoints, chunk=None):
    """Raw adjoint-weighted environments of a window.

    Returns ``(gw_sum, gd_sum)``: the sums over samples of the partial
    derivatives of tr(G_i rho_i) with respect to conj(w) and with respect to
    the joint reduction weights d.  Callers divide by the included count and
    double gw_sum for a real-coordinate gradient (Re/Im of the result are
    then the derivatives with respect to Re/Im of w).
    """
    n = xy.shape[0]
    ul, vl = left_env.shape[3], left_env.shape[4]
    ur, vr = right_env.shape[3], right_env.shape[4]
    o = w.shape[4]
    chunk = chunk or _window_chunk(left_env, w)
    l, S, r, R, O = w.shape
    gw_sum = np.zeros_like(w)
    gd_sum = np.zeros_like(d, dtype=np.float64)
    for b0 in range(0, n, chunk):
        e = slice(b0, min(b0 + chunk, n))
        g7 = adjoints[e].reshape(-1, vl, o, vr, ul, o, ur)  # [n, v, Q, y, u, O, x]
        wx, _ = _window_inputs(w, None, xy[e])
        nn = wx.shape[0]
        _, _, L, u, v = left_env.shape
        t1 = _apply_left(left_env[e], wx).reshape(nn, L, u, v, r, O, R)
        # close the right environment against the adjoints first (all small)
        gr = np.einsum("nvQyuOx,nrsxy->nuvOrQs", g7, right_env[e], optimize=True)
        am = np.ascontiguousarray(t1.transpose(0, 1, 6, 2, 3, 5, 4)).reshape(
            nn, L * R, u * v * O * r
        )
        gm = gr.reshape(nn, u * v * O * r, -1)
        t5 = np.matmul(am, gm).reshape(nn, L, R, o, right_env.shape[2])
        gw_sum += np.einsum(
            "nLRQs,nT,R->LTsRQ", t5, xy[e].conj(), d, optimize=True
        )
        gd_sum += np.einsum(
            "nLRQs,nLsQR->R", t5, wx.conj(), optimize=True
        ).real
    return gw_sum, gd_sum


def loss_and_gradients(model: HtnModel, x_batch, label_indices, cfg: LossConfig):
    """Loss plus analytic gradients with respect to every raw site tensor and
    every reduction parameter vector.

    Returns ``(batch_loss, site_grads, theta_grads)``.  Site gradients are
    complex arrays whose real/imaginary parts are the derivatives of the
    mean loss with respect to the real/imaginary parts of the site entries;
    theta gradients are real.  Does not require the sites to be isometric.
    """
    x_batch = asc128(x_batch)
    lefts = build_left_envs(model, x_batch)
    rights = build_right_envs(model, x_batch)
    rhos = lefts[-1][:, 0, 0, :, :]
    bl = loss_from_rhos(rhos, label_indices, cfg, want_adjoints=True)
    n_inc = int(bl.included.sum())
    site_grads = []
    theta_grads = []
    for k, a in enumerate(model.sites):
        d = model.reduction(k)
        if n_inc == 0:
            site_grads.append(np.zeros_like(a))
            theta_grads.append(np.zeros_like(model.thetas[k]))
            continue
        l, _, r, xi, o = a.shape
        wform = a.reshape(l, 2, r, xi, o)
        gw, gd = window_grads(
            lefts[k], rights[k + 1], wform, d, x_batch[:, k], bl.adjoints
        )
        site_grads.append((2.0 / n_inc) * gw.reshape(a.shape))
        theta_grads.append((gd / n_inc) * np.sin(2.0 * model.thetas[k]))
    return bl, site_grads, theta_grads
