"""Two-site sweep optimization with Adam, environment caching, and
data-derived initialization.

Each bond update merges two adjacent sites into one window tensor, runs a
fixed number of full-batch Adam steps on the (unconstrained) window together
with the two local reduction-parameter vectors, then splits the window back
into two isometric site tensors and refreshes the cached environments
incrementally.

The split deserves a note: the SVD factors of the merged tensor are
orthonormal with respect to the new bond alone, while a valid site must be
isometric from (left bond, phys) into (bond, red, out).  After the truncated
SVD we therefore solve for a bond transform making the left factor isometric
(a small least-squares problem on the bond), absorb its inverse into the
right factor, and only then apply a polar projection as a safety net.  When
the merged tensor is exactly a product of two valid sites this recovers them
up to bond gauge, so a zero-step sweep leaves the model (and loss)
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CacheConsistencyError, InvalidArgumentError
from .model import (
    window_step,
    HtnModel,
    LossConfig,
    apply_site_left,
    apply_site_right,
    bond_dims,
    classify_batch,
    default_output_dims,
    encode_batch,
    fresh_envs,
    identity_theta,
    loss_from_rhos,
    merge_two_sites,
    reduction_values,
    window_grads,
    window_rho,
)
from .tncore import RANK_FLOOR, asc128, isometrize


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class SweepConfig:
    """Sweep count, per-bond Adam budget, and Adam hyperparameters."""

    n_sweeps: int = 20
    adam_steps_per_site: int = 50
    adam_lr: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.n_sweeps < 1:
            raise InvalidArgumentError("n_sweeps must be >= 1")
        if self.adam_lr <= 0:
            raise InvalidArgumentError("learning rate must be positive")


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter dict.

    Complex parameters are viewed as interleaved float64 pairs so the update
    treats real and imaginary parts as independent coordinates.
    """

    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _float_view(a):
    if np.iscomplexobj(a):
        return np.ascontiguousarray(a).view(np.float64)
    return np.asarray(a, dtype=np.float64)


def adam_step(params, grads, state: AdamState, cfg: SweepConfig):
    """One Adam update with bias correction.

    ``params`` and ``grads`` are dicts of matching arrays (complex allowed).
    Returns (new_params, new_state); inputs are not mutated.
    """
    t = state.t + 1
    new_m, new_v, out = {}, {}, {}
    bc1 = 1.0 - cfg.adam_beta1**t
    bc2 = 1.0 - cfg.adam_beta2**t
    for key, p in params.items():
        pf = _float_view(p).copy()
        gf = _float_view(grads[key])
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(pf)
            v = np.zeros_like(pf)
        m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * gf
        v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * gf * gf
        step = cfg.adam_lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        pf -= step
        new_m[key], new_v[key] = m, v
        out[key] = pf.view(np.complex128) if np.iscomplexobj(p) else pf
        out[key] = out[key].reshape(p.shape)
    return out, AdamState(t=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# Isometric two-site split


def _bond_sqrt(h, floor_rel=1e-12):
    """Hermitian square root and inverse square root with an eigenvalue floor."""
    h = (h + h.conj().T) / 2.0
    evals, vecs = np.linalg.eigh(h)
    floor = max(evals.max(), 0.0) * floor_rel
    evals = np.maximum(evals, max(floor, 1e-300))
    root = (vecs * np.sqrt(evals)) @ vecs.conj().T
    inv = (vecs / np.sqrt(evals)) @ vecs.conj().T
    return root, inv


def _left_gauge(u_tensor):
    """Bond transform B with BB^dag = H solving the isometry condition for
    the left split factor.

    u_tensor: (l, 2, p, e, m) slices of the truncated SVD basis.  Solves the
    linear least-squares system sum_{pe,m,m'} U[lspe m] conj(U[l's'pe m'])
    H[m m'] = delta_{(ls),(l's')} for Hermitian H, then returns H^(1/2) and
    its inverse.
    """
    l, s, p, e, m = u_tensor.shape
    din = l * s
    t = np.einsum("lspem,LSpeM->lsLSmM", u_tensor, u_tensor.conj())
    a = t.reshape(din * din, m * m)
    rhs = np.eye(din).reshape(din * din)
    h, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    return _bond_sqrt(h.reshape(m, m))


def split_window(w8, max_bond):
    """Split a merged two-site tensor back into two isometric site tensors.

    w8: (l, s, t, r, p, q, e, f) with s/t the physical legs, p/q the
    reduction legs, and e/f the output legs of the two sites.  The new bond
    is truncated to ``max_bond`` (and padded up when the left site needs
    more room to stay isometric).  Returns (left_site, right_site) in
    (bond, phys, bond, red, out) layout.
    """
    l, s, t, r, p, q, e, f = w8.shape
    mat = w8.transpose(0, 1, 4, 6, 2, 3, 5, 7).reshape(l * s * p * e, t * r * q * f)
    u, sv, vh = np.linalg.svd(mat, full_matrices=False)
    rank = max(int(np.sum(sv > RANK_FLOOR * sv[0])), 1) if sv.size else 1
    min_m = -(-2 * l // (p * e))  # left site needs 2l <= m*p*e
    m_hi = min(max_bond, len(sv), r * q * f // 2)  # right site needs 2m <= r*q*f
    m = min(max(rank, min_m), m_hi)
    if m < min_m:
        raise InvalidArgumentError(
            f"no feasible bond in [{min_m}, {m_hi}] for window {w8.shape}"
        )
    u_m = u[:, :m].reshape(l, s, p, e, m)
    root, inv = _left_gauge(u_m)
    left = np.einsum("lspem,mn->lspen", u_m, root)
    left = left.transpose(0, 1, 4, 2, 3)  # (l, s, m, p, e)
    left = isometrize(left, in_axes=(0, 1))
    right = (inv @ (sv[:m, None] * vh[:m])).reshape(m, t, r, q, f)
    right = isometrize(right, in_axes=(0, 1))
    return left, right


# ---------------------------------------------------------------------------
# Environment cache


@dataclass
class EnvironmentCache:
    """Per-sample environments of the doubled network against a fixed batch.

    ``left_envs[k]`` covers sites 0..k-1, ``right_envs[k]`` covers sites
    k..n-1; both are (N, bond, bond', out_ket, out_bra) stacks.
    """

    left_envs: list
    right_envs: list

    @classmethod
    def build(cls, model: HtnModel, x_batch):
        x_batch = asc128(x_batch)
        n = model.n_sites
        left = [fresh_envs(x_batch.shape[0])] + [None] * n
        right = [None] * n + [fresh_envs(x_batch.shape[0])]
        for k in range(n - 1, 1, -1):
            right[k] = apply_site_right(
                right[k + 1], model.sites[k], x_batch[:, k], model.reduction(k)
            )
        return cls(left_envs=left, right_envs=right)

    def advance_left(self, model, x_batch, k):
        """Refresh left_envs[k+1] from left_envs[k] through site k."""
        self.left_envs[k + 1] = apply_site_left(
            self.left_envs[k], model.sites[k], x_batch[:, k], model.reduction(k)
        )

    def advance_right(self, model, x_batch, k):
        """Refresh right_envs[k] from right_envs[k+1] through site k."""
        self.right_envs[k] = apply_site_right(
            self.right_envs[k + 1], model.sites[k], x_batch[:, k], model.reduction(k)
        )

    def check(self, model, x_batch, k, tol=1e-8):
        """Compare the cached composition at bond k against a from-scratch
        contraction; raises CacheConsistencyError beyond ``tol``."""
        from .model import batch_forward

        rhos_cache = compose_envs(
            apply_site_left(
                self.left_envs[k], model.sites[k], x_batch[:, k], model.reduction(k)
            ),
            self.right_envs[k + 1],
        )
        rhos_full = batch_forward(model, x_batch)
        err = float(np.abs(rhos_cache - rhos_full).max())
        if err > tol:
            raise CacheConsistencyError(
                f"cached environments diverge from recontraction by {err:.3e}"
            )
        return err


def compose_envs(left_env, right_env) -> np.ndarray:
    """Close a left and right environment into output densities."""
    rho = np.einsum("nabuv,nabxy->nuxvy", left_env, right_env)
    n, u, x, v, y = rho.shape
    return rho.reshape(n, u * x, v * y)


# ---------------------------------------------------------------------------
# Sweeping


def _window_loss_and_grads(cache, model, x_batch, labels, loss_cfg, k, w5, th1, th2):
    """Loss over the batch plus gradients for the merged window at bond k."""
    d1 = reduction_values(th1)
    d2 = reduction_values(th2)
    d = np.kron(d1, d2)
    xy = np.einsum("ns,nt->nst", x_batch[:, k], x_batch[:, k + 1]).reshape(
        x_batch.shape[0], 4
    )
    bl, gw_sum, gd_sum = window_step(
        cache.left_envs[k], cache.right_envs[k + 2], w5, d, xy, labels, loss_cfg
    )
    n_inc = int(bl.included.sum())
    if gw_sum is None:
        return bl, None, None, None
    gw = (2.0 / n_inc) * gw_sum
    gd = (gd_sum / n_inc).reshape(len(d1), len(d2))
    gth1 = (gd @ d2) * np.sin(2.0 * np.asarray(th1))
    gth2 = (d1 @ gd) * np.sin(2.0 * np.asarray(th2))
    return bl, gw, gth1, gth2


def _optimize_bond(model, x_batch, labels, loss_cfg, sweep_cfg, cache, k, max_bond):
    """Merge sites (k, k+1), Adam-optimize, split back; returns the loss
    recorded after the bond update."""
    a, b = model.sites[k], model.sites[k + 1]
    w8 = np.einsum("lsmpe,mtrqf->lstrpqef", a, b)
    l, s, t, r, p, q, e, f = w8.shape
    w5 = np.ascontiguousarray(w8.reshape(l, s * t, r, p * q, e * f))
    params = {
        "w": w5,
        "th1": model.thetas[k].copy(),
        "th2": model.thetas[k + 1].copy(),
    }
    state = AdamState()
    for _ in range(sweep_cfg.adam_steps_per_site):
        bl, gw, gth1, gth2 = _window_loss_and_grads(
            cache, model, x_batch, labels, loss_cfg, k,
            params["w"], params["th1"], params["th2"],
        )
        if gw is None:
            break
        grads = {"w": gw, "th1": gth1, "th2": gth2}
        params, state = adam_step(params, grads, state, sweep_cfg)
    w8_new = params["w"].reshape(l, s, t, r, p, q, e, f)
    left_site, right_site = split_window(w8_new, max_bond)
    model.sites[k] = left_site
    model.sites[k + 1] = right_site
    model.thetas[k] = np.asarray(params["th1"], dtype=np.float64)
    model.thetas[k + 1] = np.asarray(params["th2"], dtype=np.float64)


def _recorded_loss(cache, model, x_batch, labels, loss_cfg, k, direction):
    """Training loss from the fresh cache side after updating bond k."""
    if direction == "lr":
        mid = apply_site_left(
            cache.left_envs[k + 1], model.sites[k + 1],
            x_batch[:, k + 1], model.reduction(k + 1),
        )
        rhos = compose_envs(mid, cache.right_envs[k + 2])
    else:
        mid = apply_site_left(
            cache.left_envs[k], model.sites[k], x_batch[:, k], model.reduction(k)
        )
        rhos = compose_envs(mid, cache.right_envs[k + 1])
    return loss_from_rhos(rhos, labels, loss_cfg).value


def sweep(model, batch, loss_cfg, sweep_cfg, cache, verify_cache=False):
    """One left-to-right plus right-to-left pass of two-site bond updates.

    ``batch`` is an (encoded_inputs, label_indices) pair.  The model is
    updated in place; returns (model, per-bond-update recorded losses).
    The cache must be consistent with the model and batch on entry.  With
    ``verify_cache`` every bond update is cross-checked against a
    from-scratch contraction (slow; for tests).
    """
    x_batch, labels = batch
    x_batch = asc128(x_batch)
    n = model.n_sites
    if n < 2:
        raise InvalidArgumentError("two-site sweeps need at least 2 sites")
    caps = bond_dims(n, model.chi, model.xi, model.output_dims)
    losses = []
    for k in range(n - 1):
        _optimize_bond(model, x_batch, labels, loss_cfg, sweep_cfg, cache, k, caps[k + 1])
        cache.advance_left(model, x_batch, k)
        losses.append(_recorded_loss(cache, model, x_batch, labels, loss_cfg, k, "lr"))
        if verify_cache:
            cache.check(model, x_batch, k + 1)
    for k in range(n - 2, -1, -1):
        _optimize_bond(model, x_batch, labels, loss_cfg, sweep_cfg, cache, k, caps[k + 1])
        cache.advance_right(model, x_batch, k + 1)
        losses.append(_recorded_loss(cache, model, x_batch, labels, loss_cfg, k, "rl"))
        if verify_cache:
            cache.check(model, x_batch, k)
    return model, losses


# ---------------------------------------------------------------------------
# Data-derived initialization


def init_from_data(dataset, chi, xi, n_classes, seed=0, output_dims=None) -> HtnModel:
    """Model initialized by sequential compression of the class-averaged
    encoded training states.

    ``dataset`` is a (features, labels) pair with features already in
    [0, 1].  Site cores are the dominant eigenvectors of the class-mean
    overlap matrix at each bond (the last site carries the class-mean
    read-out head), embedded into the first reduction slice and projected to
    the nearest isometry.  Reduction operators start at the identity.
    """
    features, labels = dataset
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.size == 0:
        raise InvalidArgumentError("dataset must be non-empty")
    if chi < 1 or xi < 1:
        raise InvalidArgumentError("chi and xi must be >= 1")
    n = features.shape[1]
    if output_dims is None:
        output_dims = default_output_dims(n, n_classes)
    caps = bond_dims(n, chi, xi, output_dims)
    enc = encode_batch(features)
    classes = np.unique(labels)
    bits = _class_bits(classes, output_dims, n_classes)
    v = np.ones((features.shape[0], 1), dtype=np.complex128)
    sites = []
    for k in range(n - 1):
        o = output_dims[k]
        ext = np.einsum("nb,ns->nbs", v, enc[:, k]).reshape(len(v), -1)
        if o > 1:
            sel = np.zeros((len(v), o))
            sel[np.arange(len(v)), bits[labels, k]] = 1.0
            ext = np.einsum("nd,no->ndo", ext, sel).reshape(len(v), -1)
        # Orthonormalized class means: keeps the compressed target close to a
        # co-isometry so the polar projection below does not mix classes.
        means = _loewdin(np.stack([ext[labels == c].mean(axis=0) for c in classes]))
        cmat = np.einsum("cd,ce->de", means, means.conj())
        evals, evecs = np.linalg.eigh(cmat)
        order = np.argsort(evals)[::-1]
        rank = max(int(np.sum(evals > 1e-12 * max(evals.max(), 1e-30))), 1)
        min_b = -(-2 * v.shape[1] // (xi * o))
        b_next = min(max(rank, min_b), caps[k + 1], ext.shape[1])
        basis = evecs[:, order[:b_next]]  # (din*o, b_next)
        core = basis.conj().T.reshape(b_next, v.shape[1], 2, o)
        sites.append(_embed_core(core.transpose(0, 3, 1, 2), xi))
        v = ext @ basis.conj()
    # Read-out head on the last site: bit-grouped sums of the orthonormalized
    # class means (rows for different output values stay orthogonal).
    b = v.shape[1]
    ext = np.einsum("nd,ns->nds", v, enc[:, n - 1]).reshape(len(v), -1)
    means = _loewdin(np.stack([ext[labels == c].mean(axis=0) for c in classes]))
    o_last = output_dims[n - 1]
    head = np.zeros((o_last, ext.shape[1]), dtype=np.complex128)
    for ci, c in enumerate(classes):
        head[bits[int(c), n - 1]] += means[ci].conj()
    sites.append(_embed_core(head.reshape(1, o_last, b, 2), xi))
    thetas = [identity_theta(xi) for _ in range(n)]
    return HtnModel(sites=sites, thetas=thetas, chi=chi, xi=xi, n_classes=n_classes)


def _loewdin(vectors, floor=1e-12):
    """Symmetric orthonormalization of stacked row vectors."""
    s = vectors @ vectors.conj().T
    evals, evecs = np.linalg.eigh(s)
    keep = evals > floor * max(evals.max(), 1e-30)
    inv_root = (evecs[:, keep] / np.sqrt(evals[keep])) @ evecs[:, keep].conj().T
    return inv_root @ vectors


def _class_bits(classes, output_dims, n_classes):
    """Per-class output-leg basis indices, one row per class label value."""
    n = len(output_dims)
    bits = np.zeros((int(classes.max()) + 1, n), dtype=np.int64)
    for c in classes:
        idx = int(c)
        rem = idx
        for k in range(n - 1, -1, -1):
            o = output_dims[k]
            bits[idx, k] = rem % o
            rem //= o
    return bits


def _embed_core(core, xi):
    """Place a (b_next, o, l, s) core map in reduction slice 0 and project to
    the nearest isometry in (l, s, b_next, xi, o) layout."""
    b_next, o, l, s = core.shape
    site = np.zeros((l, s, b_next, xi, o), dtype=np.complex128)
    site[:, :, :, 0, :] = core.transpose(2, 3, 0, 1)
    return isometrize(site, in_axes=(0, 1))


# ---------------------------------------------------------------------------
# Full training loop


@dataclass
class TrainedReport:
    """Per-sweep series plus the final model."""

    model: HtnModel
    train_loss: list
    test_loss: list
    train_accuracy: list
    test_accuracy: list
    train_abstention: list
    test_abstention: list
    train_retained_trace: list
    test_retained_trace: list
    bond_losses: list

    def final(self) -> dict:
        return {
            "train_loss": self.train_loss[-1],
            "test_loss": self.test_loss[-1],
            "train_accuracy": self.train_accuracy[-1],
            "test_accuracy": self.test_accuracy[-1],
            "train_abstention": self.train_abstention[-1],
            "test_abstention": self.test_abstention[-1],
            "train_retained_trace": self.train_retained_trace[-1],
            "test_retained_trace": self.test_retained_trace[-1],
        }


def evaluate(model, x_batch, labels, loss_cfg):
    """Loss, accuracy (over non-abstained samples), abstention rate, and mean
    retained trace on one split."""
    from .model import batch_forward

    rhos = batch_forward(model, x_batch)
    bl = loss_from_rhos(rhos, labels, loss_cfg)
    preds, abstained = classify_batch(model, x_batch, loss_cfg)
    ok = ~abstained
    acc = float((preds[ok] == labels[ok]).mean()) if ok.any() else 0.0
    return {
        "loss": bl.value,
        "accuracy": acc,
        "abstention": float(abstained.mean()),
        "retained_trace": float(bl.traces.mean()),
    }


def train(model, train_set, test_set, loss_cfg, sweep_cfg, verify_cache=False) -> TrainedReport:
    """Run ``n_sweeps`` two-site sweeps; metrics recorded after every sweep.

    ``train_set``/``test_set`` are (encoded_inputs, labels) pairs; the model
    is copied, never mutated.
    """
    model = model.copy()
    x_train, y_train = train_set
    x_test, y_test = test_set
    x_train = asc128(x_train)
    x_test = asc128(x_test)
    report = TrainedReport(
        model=model, train_loss=[], test_loss=[], train_accuracy=[],
        test_accuracy=[], train_abstention=[], test_abstention=[],
        train_retained_trace=[], test_retained_trace=[], bond_losses=[],
    )
    cache = EnvironmentCache.build(model, x_train)
    for _ in range(sweep_cfg.n_sweeps):
        model, losses = sweep(
            model, (x_train, y_train), loss_cfg, sweep_cfg, cache,
            verify_cache=verify_cache,
        )
        report.bond_losses.extend(losses)
        tr = evaluate(model, x_train, y_train, loss_cfg)
        te = evaluate(model, x_test, y_test, loss_cfg)
        report.train_loss.append(tr["loss"])
        report.test_loss.append(te["loss"])
        report.train_accuracy.append(tr["accuracy"])
        report.test_accuracy.append(te["accuracy"])
        report.train_abstention.append(tr["abstention"])
        report.test_abstention.append(te["abstention"])
        report.train_retained_trace.append(tr["retained_trace"])
        report.test_retained_trace.append(te["retained_trace"])
    report.model = model
    return report
