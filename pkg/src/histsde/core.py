"""Shared numeric primitives: symmetric eigendecomposition, PSD square roots,
Gaussian log-densities, time rescaling and reproducible random streams.

All matrix routines accept a single ``(d, d)`` matrix or a stack of shape
``(..., d, d)``; the stacked form is what the simulators use on path batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCovarianceError, InputError, NotPsdError, SymmetryError

EPS = 1e-9
"""Eigenvalue floor applied whenever a PSD matrix is inverted or square-rooted."""

NEG_TOL = 1e-8
SYM_TOL = 1e-12
_LOG_2PI = float(np.log(2.0 * np.pi))


def _check_symmetric(m):
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - np.swapaxes(m, -1, -2)), initial=0.0) > SYM_TOL * scale:
        raise SymmetryError("matrix is not symmetric")


def jacobi_eigh(a, max_sweeps=50, tol=1e-15):
    """Cyclic Jacobi eigendecomposition of a stack of symmetric matrices.

    Returns unsorted ``(eigenvalues, eigenvectors)`` with eigenvectors stored
    as columns. Rotations are applied to the whole stack at once; matrices
    that have already converged receive identity rotations.
    """
    a = np.array(a, dtype=float, copy=True)
    d = a.shape[-1]
    batch_shape = a.shape[:-2]
    a = a.reshape((-1, d, d))
    v = np.broadcast_to(np.eye(d), a.shape).copy()
    if d == 1:
        return a[:, 0, 0].reshape(batch_shape + (1,)), v.reshape(batch_shape + (1, 1))
    iu = np.triu_indices(d, 1)
    norm = np.sqrt(np.sum(a * a, axis=(1, 2)))
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(a[:, iu[0], iu[1]] ** 2, axis=1))
        if np.all(off <= tol * np.maximum(norm, 1e-300)):
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[:, p, q]
                active = np.abs(apq) > 1e-300
                if not np.any(active):
                    continue
                safe = np.where(active, apq, 1.0)
                theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
                with np.errstate(over="ignore"):
                    t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t = np.where(theta == 0.0, 1.0, t)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                ap, aq = a[:, :, p].copy(), a[:, :, q].copy()
                a[:, :, p] = c * ap - s * aq
                a[:, :, q] = s * ap + c * aq
                ap, aq = a[:, p, :].copy(), a[:, q, :].copy()
                a[:, p, :] = c * ap - s * aq
                a[:, q, :] = s * ap + c * aq
                vp, vq = v[:, :, p].copy(), v[:, :, q].copy()
                v[:, :, p] = c * vp - s * vq
                v[:, :, q] = s * vp + c * vq
    lam = np.diagonal(a, axis1=1, axis2=2).copy()
    return lam.reshape(batch_shape + (d,)), v.reshape(batch_shape + (d, d))


def sym_eigendecompose(m):
    """Eigendecomposition of one symmetric matrix.

    Eigenvalues come back in descending order. Each eigenvector has its first
    nonzero component positive, and eigenvectors sharing an eigenvalue are
    ordered lexicographically (largest first) so the output is deterministic.

    Raises
    ------
    SymmetryError
        If ``m`` is not symmetric to within 1e-12 relative.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InputError(f"expected a square matrix, got shape {m.shape}")
    _check_symmetric(m)
    lam, u = jacobi_eigh(m)
    d = len(lam)
    for j in range(d):
        nz = np.flatnonzero(np.abs(u[:, j]) > 1e-12)
        if nz.size and u[nz[0], j] < 0:
            u[:, j] = -u[:, j]
    scale = max(1.0, float(np.max(np.abs(lam))))
    tie_tol = 1e-10 * scale
    # sort by eigenvalue, rounded into tie buckets, then by eigenvector
    order = sorted(
        range(d),
        key=lambda j: (-np.round(lam[j] / tie_tol), tuple(-u[:, j])),
    )
    return lam[order], u[:, order]


def _eig_stack(m):
    m = np.asarray(m, dtype=float)
    if m.shape[-1] != m.shape[-2]:
        raise InputError(f"expected square matrices, got shape {m.shape}")
    _check_symmetric(m)
    return jacobi_eigh(m)


def psd_sqrt(m):
    """Symmetric square root of a PSD matrix (or stack of them).

    Eigenvalues below ``EPS`` are raised to ``EPS`` first, so the result is
    always invertible.
    """
    lam, u = _eig_stack(m)
    if np.any(lam < -NEG_TOL):
        raise NotPsdError(f"matrix has eigenvalue {float(np.min(lam)):.3e} < -{NEG_TOL}")
    root = np.sqrt(np.maximum(lam, EPS))
    return (u * root[..., None, :]) @ np.swapaxes(u, -1, -2)


def psd_inv_sqrt(m):
    """Inverse of :func:`psd_sqrt`, with the same eigenvalue floor."""
    lam, u = _eig_stack(m)
    if np.any(lam < -NEG_TOL):
        raise NotPsdError(f"matrix has eigenvalue {float(np.min(lam)):.3e} < -{NEG_TOL}")
    root = 1.0 / np.sqrt(np.maximum(lam, EPS))
    return (u * root[..., None, :]) @ np.swapaxes(u, -1, -2)


def gaussian_logpdf(x, mean, cov):
    """Log of the multivariate normal density, including normalization.

    ``x``, ``mean`` broadcast over leading axes; ``cov`` has shape
    ``(..., d, d)``. Eigenvalues of ``cov`` are floored at ``EPS``.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        raise DegenerateCovarianceError("covariance has non-finite entries")
    lam, u = _eig_stack(cov)
    if np.any(lam < -NEG_TOL):
        raise DegenerateCovarianceError(
            f"covariance has eigenvalue {float(np.min(lam)):.3e}, not positive definite"
        )
    lam = np.maximum(lam, EPS)
    r = x - mean
    d = r.shape[-1]
    proj = np.einsum("...ij,...i->...j", u, r)
    quad = np.sum(proj * proj / lam, axis=-1)
    logdet = np.sum(np.log(lam), axis=-1)
    out = -0.5 * (d * _LOG_2PI + logdet + quad)
    return float(out) if np.ndim(out) == 0 else out


def diag_gaussian_logpdf(x, mean, var):
    """Normal log-density with diagonal covariance ``var`` (shape ``(..., d)``)."""
    r = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    return -0.5 * np.sum(_LOG_2PI + np.log(var) + r * r / var, axis=-1)


def logsumexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return np.squeeze(out, axis=axis) if axis is not None else float(out.squeeze())


@dataclass(frozen=True)
class TimeRescaling:
    """Map from observed time to simulation time, plus sub-stepping.

    ``t = alpha * t_obs`` and every observation interval is split into
    ``n_sub`` Euler-Maruyama steps.
    """

    alpha: float = 1.0
    n_sub: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise InputError(f"alpha must be > 0, got {self.alpha}")
        if int(self.n_sub) != self.n_sub or self.n_sub < 1:
            raise InputError(f"n_sub must be an integer >= 1, got {self.n_sub}")

    def to_sim(self, t_obs):
        return self.alpha * np.asarray(t_obs, dtype=float)

    def step(self, dt):
        """Internal step for a (simulation-time) interval ``dt``."""
        if not dt > 0:
            raise InputError(f"interval must be > 0, got {dt}")
        return dt / self.n_sub


@dataclass
class RngStream:
    """Reproducible random stream keyed by ``(master_seed, stream_id)``.

    Backed by numpy's counter-based Philox generator; the key alone
    determines the sequence, so draws do not depend on which worker or in
    which order streams are consumed. ``stream_id`` may be an int or a tuple
    of ints for hierarchical keys. A stream is meant for a single consumer.
    """

    master_seed: int
    stream_id: int | tuple = 0
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False)

    @property
    def key(self):
        sid = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        return tuple(int(s) for s in sid)

    @property
    def generator(self):
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=int(self.master_seed) % 2**64, spawn_key=self.key)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def child(self, *ids):
        return RngStream(self.master_seed, self.key + tuple(int(i) for i in ids))

    def standard_normal(self, shape):
        return self.generator.standard_normal(shape)

    def uniform(self, shape=None):
        return self.generator.random(shape)
