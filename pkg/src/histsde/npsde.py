"""Sparse-GP SDE estimator fitted by a simulated Monte-Carlo likelihood.

Drift ``F`` and a scalar amplitude ``b`` are GP predictive means given values
at fixed inducing points; ``D(x) = b(x)^2 / 2 * I``. The objective is

    sum_{i,k} log (1/S) sum_s N(y_ik; x^(i,s)(t_ik), R) + log prior

with paths started at each unit's first observation. Its gradient is the
pathwise derivative, obtained by integrating the sensitivity equations
alongside the Euler-Maruyama paths with the same noise.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, logsumexp
from .errors import ConditioningError, DivergenceError, InputError, InsufficientDataError
from .lbn import Adam
from .simulate import SdeModel

log = logging.getLogger(__name__)

JITTER = 1e-6
MAX_COND = 1e12
RESTART_FACTOR = 50
_LOG_2PI = math.log(2 * math.pi)


# --- kernels and GP fields ----------------------------------------------------


@dataclass(frozen=True)
class SqExpKernel:
    """``k(x, z) = variance * exp(-0.5 * sum_l (x_l - z_l)^2 / ls_l^2)``."""

    variance: float
    lengthscales: tuple

    def __post_init__(self):
        if not self.variance > 0 or not all(l > 0 for l in self.lengthscales):
            raise InputError("kernel variance and lengthscales must be > 0")

    @property
    def ls(self):
        return np.asarray(self.lengthscales, dtype=float)

    def sqdist(self, x, z):
        """Per-dimension scaled squared distances, shape ``(n, m, d)``."""
        diff = (np.asarray(x, dtype=float)[:, None, :] - np.asarray(z, dtype=float)[None, :, :]) / self.ls
        return diff * diff

    def __call__(self, x, z):
        return self.variance * np.exp(-0.5 * self.sqdist(x, z).sum(axis=-1))


class GpField:
    """GP predictive mean ``k(x, Z) K^{-1} U`` with all the derivatives we need.

    ``U`` has shape ``(M, q)``. Hyperparameter order is
    ``(log variance, log ls_1, ..., log ls_d)``.
    """

    def __init__(self, kernel, Z, U, jitter=JITTER):
        self.kernel = kernel
        self.Z = np.asarray(Z, dtype=float)
        self.U = np.asarray(U, dtype=float).reshape(len(self.Z), -1)
        M, d = self.Z.shape
        self.sq = kernel.sqdist(self.Z, self.Z)  # (M, M, d)
        K0 = kernel.variance * np.exp(-0.5 * self.sq.sum(axis=-1))
        K = K0 + jitter * np.eye(M)
        lam = np.linalg.eigvalsh(K)
        cond = lam[-1] / lam[0] if lam[0] > 0 else np.inf
        if not cond < MAX_COND:
            raise ConditioningError(f"inducing Gram matrix is ill-conditioned (condition estimate {cond:.3e})")
        self.cond = float(cond)
        self.K0 = K0
        self.K = K
        self.Kinv = np.linalg.inv(K)
        self.Kinv = 0.5 * (self.Kinv + self.Kinv.T)
        self.alpha = self.Kinv @ self.U  # (M, q)
        # dK/dh for each hyperparameter, (H, M, M)
        self.dK = np.concatenate([K0[None], K0[None] * np.moveaxis(self.sq, -1, 0)])
        # C_h = K^{-1} dK_h alpha, (H, M, q)
        self.C = np.einsum("ab,hbc,cq->haq", self.Kinv, self.dK, self.alpha)

    @property
    def n_hyper(self):
        return 1 + self.Z.shape[1]

    def value(self, x):
        return self.kernel(x, self.Z) @ self.alpha

    def full(self, x):
        """Value, ``d/dx``, ``d/dU`` weights and ``d/dhyper`` at ``x`` (``(n, d)``).

        Returns ``(v (n,q), v_x (n,q,d), kK (n,M), v_h (n,q,H))``; the
        derivative of ``v[:, j]`` with respect to ``U[m, j]`` is ``kK[:, m]``.
        """
        x = np.asarray(x, dtype=float)
        k = self.kernel(x, self.Z)  # (n, M)
        diff = x[:, None, :] - self.Z[None]  # (n, M, d)
        ls2 = self.kernel.ls**2
        v = k @ self.alpha
        dk_dx = -k[..., None] * diff / ls2  # (n, M, d)
        v_x = np.einsum("nmd,mq->nqd", dk_dx, self.alpha)
        kK = k @ self.Kinv
        dk_dh = np.concatenate([k[None], k[None] * np.moveaxis(diff * diff / ls2, -1, 0)])  # (H, n, M)
        v_h = np.einsum("hnm,mq->nqh", dk_dh, self.alpha) - np.einsum("nm,hmq->nqh", k, self.C)
        return v, v_x, kK, v_h

    def conditional_variance(self, x):
        k = self.kernel(x, self.Z)
        return self.kernel.variance - np.einsum("nm,mk,nk->n", k, self.Kinv, k)

    def log_prior(self):
        """``sum_j log N(U[:, j]; 0, K)`` and its gradients in ``U`` and hyperparameters."""
        M, q = self.U.shape
        logdet = np.linalg.slogdet(self.K)[1]
        val = -0.5 * np.sum(self.U * self.alpha) - 0.5 * q * (logdet + M * _LOG_2PI)
        g_U = -self.alpha
        tr = np.einsum("ab,hba->h", self.Kinv, self.dK)
        quad = np.einsum("aq,hab,bq->h", self.alpha, self.dK, self.alpha)
        g_h = 0.5 * quad - 0.5 * q * tr
        return val, g_U, g_h


# --- model --------------------------------------------------------------------


class NpsdeModel(SdeModel):
    """Inducing-point GP drift and amplitude; isotropic diffusion ``b^2/2 I``."""

    def __init__(self, Z, U_F, U_b, kernel_F, kernel_b, R, jitter=JITTER, metadata=None):
        self.Z = np.asarray(Z, dtype=float)
        if self.Z.ndim != 2 or len(self.Z) < 1:
            raise InputError("inducing locations must be an (M, d) array with M >= 1")
        self.dim = self.Z.shape[1]
        self.U_F = np.asarray(U_F, dtype=float).reshape(len(self.Z), self.dim)
        self.U_b = np.asarray(U_b, dtype=float).reshape(len(self.Z))
        self.kernel_F, self.kernel_b = kernel_F, kernel_b
        self.R = np.asarray(R, dtype=float).reshape(self.dim)
        self.jitter = jitter
        self.metadata = dict(metadata or {})
        self.field_F = GpField(kernel_F, self.Z, self.U_F, jitter)
        self.field_b = GpField(kernel_b, self.Z, self.U_b[:, None], jitter)

    @property
    def M(self):
        return len(self.Z)

    def _flat(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(-1, self.dim), x.shape[:-1]

    def drift(self, x):
        xf, lead = self._flat(x)
        return self.field_F.value(xf).reshape(lead + (self.dim,))

    def amplitude(self, x):
        xf, lead = self._flat(x)
        return self.field_b.value(xf)[:, 0].reshape(lead)

    def diffusion(self, x):
        b = self.amplitude(x)
        return 0.5 * (b * b)[..., None, None] * np.eye(self.dim)

    def noise_factor(self, x):
        return np.abs(self.amplitude(x))[..., None, None] * np.eye(self.dim)

    def drift_jacobian(self, x, h=None):
        xf, lead = self._flat(x)
        return self.field_F.full(xf)[1].reshape(lead + (self.dim, self.dim))

    def drift_variance(self, x):
        """GP conditional variance of each drift component given the inducing values."""
        xf, lead = self._flat(x)
        return self.field_F.conditional_variance(xf).reshape(lead)

    def to_dict(self):
        return {
            "kind": "npsde",
            "dim": self.dim,
            "Z": self.Z.tolist(),
            "U_F": self.U_F.tolist(),
            "U_b": self.U_b.tolist(),
            "kernel_F": {"variance": self.kernel_F.variance, "lengthscales": list(self.kernel_F.lengthscales)},
            "kernel_b": {"variance": self.kernel_b.variance, "lengthscales": list(self.kernel_b.lengthscales)},
            "R": self.R.tolist(),
            "jitter": self.jitter,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        kF = SqExpKernel(float(d["kernel_F"]["variance"]), tuple(d["kernel_F"]["lengthscales"]))
        kb = SqExpKernel(float(d["kernel_b"]["variance"]), tuple(d["kernel_b"]["lengthscales"]))
        return cls(d["Z"], d["U_F"], d["U_b"], kF, kb, d["R"], d.get("jitter", JITTER), d.get("metadata"))


def gp_interp_drift(model, x):
    return model.drift(x)


def gp_interp_diffusion(model, x):
    return model.diffusion(x)


# --- parameter vector ---------------------------------------------------------


@dataclass(frozen=True)
class ParamLayout:
    """Slices of the flat parameter vector.

    Order: ``U_F`` (row-major ``M x d``), ``U_b``, ``log var_F``,
    ``log ls_F`` (d), ``log var_b``, ``log ls_b`` (d), ``log R`` (d, only
    when R is fitted).
    """

    M: int
    d: int
    fit_R: bool = True

    @property
    def uF(self):
        return slice(0, self.M * self.d)

    @property
    def ub(self):
        s = self.M * self.d
        return slice(s, s + self.M)

    @property
    def hF(self):
        s = self.M * (self.d + 1)
        return slice(s, s + 1 + self.d)

    @property
    def hb(self):
        s = self.M * (self.d + 1) + 1 + self.d
        return slice(s, s + 1 + self.d)

    @property
    def logR(self):
        s = self.M * (self.d + 1) + 2 * (1 + self.d)
        return slice(s, s + self.d) if self.fit_R else slice(s, s)

    @property
    def size(self):
        return self.logR.stop

    def names(self):
        out = [f"U_F[{m},{j}]" for m in range(self.M) for j in range(self.d)]
        out += [f"U_b[{m}]" for m in range(self.M)]
        out += ["log_var_F"] + [f"log_ls_F[{l}]" for l in range(self.d)]
        out += ["log_var_b"] + [f"log_ls_b[{l}]" for l in range(self.d)]
        if self.fit_R:
            out += [f"log_R[{l}]" for l in range(self.d)]
        return out


def model_to_theta(model, layout):
    th = np.empty(layout.size)
    th[layout.uF] = model.U_F.reshape(-1)
    th[layout.ub] = model.U_b
    th[layout.hF] = np.log(np.r_[model.kernel_F.variance, model.kernel_F.ls])
    th[layout.hb] = np.log(np.r_[model.kernel_b.variance, model.kernel_b.ls])
    if layout.fit_R:
        th[layout.logR] = np.log(model.R)
    return th


def theta_to_model(theta, layout, Z, R_fixed=None, jitter=JITTER, metadata=None):
    theta = np.asarray(theta, dtype=float)
    hF, hb = np.exp(theta[layout.hF]), np.exp(theta[layout.hb])
    kF = SqExpKernel(float(hF[0]), tuple(float(v) for v in hF[1:]))
    kb = SqExpKernel(float(hb[0]), tuple(float(v) for v in hb[1:]))
    R = np.exp(theta[layout.logR]) if layout.fit_R else np.asarray(R_fixed, dtype=float)
    return NpsdeModel(Z, theta[layout.uF].reshape(layout.M, layout.d), theta[layout.ub], kF, kb, R, jitter, metadata)


# --- sensitivities ------------------------------------------------------------


def _direct_sensitivities(model, layout, x):
    """Drift, amplitude and their derivatives at ``x`` (``(n, d)``).

    Returns ``F, F_x, F_theta (n,d,P), b, b_x (n,d), b_theta (n,P)`` where the
    ``_theta`` arrays hold the explicit parameter dependence only.
    """
    n, d = x.shape
    P = layout.size
    F, F_x, kK_F, F_h = model.field_F.full(x)
    bv, b_x, kK_b, b_h = model.field_b.full(x)
    F_th = np.zeros((n, d, P))
    for j in range(d):
        F_th[:, j, layout.uF.start + j : layout.uF.stop : d] = kK_F
    F_th[:, :, layout.hF] = F_h
    b_th = np.zeros((n, P))
    b_th[:, layout.ub] = kK_b
    b_th[:, layout.hb] = b_h[:, 0, :]
    return F, F_x, F_th, bv[:, 0], b_x[:, 0, :], b_th


def sensitivity_step(model, x, dx_dtheta, dt, noise, layout=None):
    """One Euler-Maruyama step of the state and of ``d x / d theta``.

    ``x`` is ``(n, d)`` (or ``(d,)``), ``dx_dtheta`` is ``(n, d, P)``,
    ``dt`` a scalar or ``(n,)`` array and ``noise`` standard normals shaped
    like ``x``. The same noise drives state and sensitivities.
    """
    layout = layout or ParamLayout(model.M, model.dim, True)
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=float))
    J = np.asarray(dx_dtheta, dtype=float)
    if J.ndim == 2:
        J = J[None]
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    if J.shape != x.shape + (layout.size,) or noise.shape != x.shape:
        raise InputError(f"shape mismatch: x {x.shape}, sensitivities {J.shape}, noise {noise.shape}, P={layout.size}")
    h = np.broadcast_to(np.asarray(dt, dtype=float), (len(x),))
    sh = np.sqrt(h)
    F, F_x, F_th, b, b_x, b_th = _direct_sensitivities(model, layout, x)
    x_new = x + F * h[:, None] + (b * sh)[:, None] * noise
    dF = F_x @ J + F_th
    db = np.einsum("nd,ndp->np", b_x, J) + b_th
    J_new = J + dF * h[:, None, None] + noise[:, :, None] * (db * sh[:, None])[:, None, :]
    if single:
        return x_new[0], J_new[0]
    return x_new, J_new


# --- Monte-Carlo likelihood ---------------------------------------------------


@dataclass
class UnitSchedule:
    unit_id: str
    y: np.ndarray  # (n_obs, d)
    steps: np.ndarray  # step sizes
    obs_at: np.ndarray  # per step: observation index reached at the end of the step, or -1
    restart: np.ndarray  # per step: reset the state to that observation after scoring


@dataclass
class PanelSchedule:
    units: list
    dt_nominal: float
    n_steps: int
    n_scored: int
    h: np.ndarray = field(repr=False, default=None)  # (U, n_steps)
    obs_at: np.ndarray = field(repr=False, default=None)
    restart: np.ndarray = field(repr=False, default=None)


def build_schedule(latent_panel, dt_nominal=None):
    """Sub-step schedule for every unit.

    Each observation interval is split into ``ceil(interval / dt)`` equal
    steps with ``dt`` the nominal step (median interval divided by the
    panel's ``n_sub`` unless given). Paths restart at an observation when
    the following interval exceeds ``50 dt``.
    """
    units = [u for u in latent_panel.units if len(u.t_obs) >= 2]
    if not units:
        raise InsufficientDataError("no unit has two or more observations")
    if dt_nominal is None:
        ints = np.concatenate([np.diff(latent_panel.times(u)) for u in units])
        dt_nominal = float(np.median(ints)) / latent_panel.rescaling.n_sub
    scheds = []
    for u in units:
        t = latent_panel.times(u)
        steps, obs_at, restart = [], [], []
        ints = np.diff(t)
        for k, iv in enumerate(ints):
            n = max(1, int(math.ceil(iv / dt_nominal - 1e-9)))
            steps += [iv / n] * n
            obs_at += [-1] * (n - 1) + [k + 1]
            nxt = ints[k + 1] if k + 1 < len(ints) else 0.0
            restart += [False] * (n - 1) + [bool(nxt > RESTART_FACTOR * dt_nominal)]
        scheds.append(UnitSchedule(u.unit_id, np.asarray(u.states, dtype=float), np.array(steps), np.array(obs_at), np.array(restart)))
    n_steps = max(len(s.steps) for s in scheds)
    U = len(scheds)
    h = np.zeros((U, n_steps))
    obs = -np.ones((U, n_steps), dtype=int)
    rst = np.zeros((U, n_steps), dtype=bool)
    for i, s in enumerate(scheds):
        m = len(s.steps)
        h[i, :m], obs[i, :m], rst[i, :m] = s.steps, s.obs_at, s.restart
    n_scored = int(sum(len(s.y) - 1 for s in scheds))
    return PanelSchedule(scheds, float(dt_nominal), n_steps, n_scored, h, obs, rst)


def unit_key(unit_id):
    return zlib.crc32(str(unit_id).encode("utf-8"))


def _noise(schedule, S, d, rng):
    """Standard normals ``(U, S, n_steps, d)``; unit ``u`` draws from its own sub-stream."""
    out = np.zeros((len(schedule.units), S, schedule.n_steps, d))
    for i, s in enumerate(schedule.units):
        m = len(s.steps)
        out[i, :, :m] = rng.child(unit_key(s.unit_id)).standard_normal((S, m, d))
    return out


def hyper_log_prior(theta, layout):
    """Standard-normal density on the log hyperparameters (log-normal(0,1) on the values)."""
    idx = np.r_[np.arange(layout.hF.start, layout.hF.stop), np.arange(layout.hb.start, layout.hb.stop),
                np.arange(layout.logR.start, layout.logR.stop)]
    u = theta[idx]
    g = np.zeros_like(theta)
    g[idx] = -u
    return float(-0.5 * np.sum(u * u) - 0.5 * len(u) * _LOG_2PI), g


def log_prior(model, theta, layout):
    vF, gUF, ghF = model.field_F.log_prior()
    vb, gUb, ghb = model.field_b.log_prior()
    vh, g = hyper_log_prior(theta, layout)
    g[layout.uF] += gUF.reshape(-1)
    g[layout.ub] += gUb[:, 0]
    g[layout.hF] += ghF
    g[layout.hb] += ghb
    return vF + vb + vh, g


def _data_term(model, layout, schedule, S, noise, want_grad):
    """Per-unit data log-likelihoods and the gradient of their sum."""
    U, d, P = len(schedule.units), model.dim, layout.size
    y0 = np.stack([s.y[0] for s in schedule.units])  # (U, d)
    x = np.repeat(y0[:, None, :], S, axis=1).reshape(U * S, d)
    J = np.zeros((U * S, d, P)) if want_grad else None
    R = model.R
    per_unit = np.zeros(U)
    grad = np.zeros(P)
    h_all = np.repeat(schedule.h, S, axis=0)  # (U*S, n_steps)
    for k in range(schedule.n_steps):
        active = h_all[:, k] > 0
        eps = noise[:, :, k, :].reshape(U * S, d)
        if want_grad:
            xa, Ja = sensitivity_step(model, x[active], J[active], h_all[active, k], eps[active], layout)
            J[active] = Ja
        else:
            xa = _em_only(model, x[active], h_all[active, k], eps[active])
        x[active] = xa
        units_obs = np.flatnonzero(schedule.obs_at[:, k] >= 0)
        for i in units_obs:
            s = schedule.units[i]
            yk = s.y[schedule.obs_at[i, k]]
            rows = slice(i * S, (i + 1) * S)
            r = yk - x[rows]  # (S, d)
            logn = -0.5 * np.sum(_LOG_2PI + np.log(R) + r * r / R, axis=1)
            lse = logsumexp(logn)
            per_unit[i] += lse - math.log(S)
            if want_grad:
                w = np.exp(logn - lse)
                grad += np.einsum("s,sd,sdp->p", w, r / R, J[rows])
                if layout.fit_R:
                    grad[layout.logR] += np.einsum("s,sd->d", w, -0.5 + 0.5 * r * r / R)
            if schedule.restart[i, k]:
                x[rows] = yk
                if want_grad:
                    J[rows] = 0.0
    return per_unit, grad


def _em_only(model, x, h, eps):
    F = model.field_F.value(x)
    b = model.field_b.value(x)[:, 0]
    return x + F * h[:, None] + (b * np.sqrt(h))[:, None] * eps


def objective(theta, layout, Z, schedule, S, rng, R_fixed=None, want_grad=True, jitter=JITTER):
    """Monte-Carlo log-likelihood plus log prior, and its gradient in ``theta``."""
    model = theta_to_model(theta, layout, Z, R_fixed, jitter)
    noise = _noise(schedule, S, model.dim, rng)
    per_unit, g_data = _data_term(model, layout, schedule, S, noise, want_grad)
    lp, g_prior = log_prior(model, theta, layout)
    value = _ordered_sum(per_unit, schedule) + lp
    return value, (g_data + g_prior if want_grad else None)


def mc_loglik(model, latent_panel, S=64, rng=None, fit_R=True, dt_nominal=None, include_prior=True):
    """Value of the simulated-likelihood objective for a fixed model.

    With ``include_prior=False`` only the data term is returned.
    """
    if S < 1:
        raise InputError(f"S must be >= 1, got {S}")
    rng = rng if rng is not None else RngStream(0)
    layout = ParamLayout(model.M, model.dim, fit_R)
    sched = build_schedule(latent_panel, dt_nominal)
    if not include_prior:
        noise = _noise(sched, S, model.dim, rng)
        per_unit, _ = _data_term(model, layout, sched, S, noise, want_grad=False)
        return _ordered_sum(per_unit, sched)
    theta = model_to_theta(model, layout)
    return objective(theta, layout, model.Z, sched, S, rng, model.R, want_grad=False, jitter=model.jitter)[0]


def _ordered_sum(per_unit, schedule):
    """Sum in unit-id order, so the total does not depend on panel order."""
    order = np.argsort([s.unit_id for s in schedule.units], kind="stable")
    return math.fsum(per_unit[order])


# --- fitting ------------------------------------------------------------------


@dataclass
class NpsdeConfig:
    M: int | None = None  # inducing points; default 5^d capped at 64
    S: int = 32
    iterations: int = 400
    lr: float = 0.05
    fit_R: bool = True
    R_init: float = 0.1
    dt_nominal: float | None = None
    average_tail: float = 0.25  # fraction of final iterates averaged into the estimate

    def to_dict(self):
        return dict(M=self.M, S=self.S, iterations=self.iterations, lr=self.lr, fit_R=self.fit_R,
                    R_init=self.R_init, dt_nominal=self.dt_nominal, average_tail=self.average_tail)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def inducing_grid(x, M=None):
    """Uniform grid over the data bounding box expanded by 10% per side.

    Uses ``n`` points per dimension with ``n^d <= M`` (default ``M = 5^d``
    capped at 64).
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[1]
    M = M if M is not None else min(5**d, 64)
    n = max(1, int(math.floor(M ** (1.0 / d) + 1e-9)))
    lo, hi = x.min(axis=0), x.max(axis=0)
    pad = 0.1 * (hi - lo)
    axes = [np.linspace(lo[l] - pad[l], hi[l] + pad[l], n) if n > 1 else np.array([(lo[l] + hi[l]) / 2]) for l in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def initial_theta(layout, Z, latent_panel, R_init):
    """Zero drift; flat amplitude from the increment variance; unit hyperparameters."""
    th = np.zeros(layout.size)
    sq, tot = 0.0, 0.0
    for _, _, dt, xf, xt in latent_panel.transitions():
        sq += float(np.sum((xt - xf) ** 2))
        tot += dt * layout.d
    th[layout.ub] = math.sqrt(sq / tot) if tot > 0 else 1.0
    if layout.fit_R:
        th[layout.logR] = math.log(R_init)
    return th


def fit_npsde(latent_panel, config=None, seed=0):
    """Maximize the simulated-likelihood objective with Adam.

    Every iteration uses fresh common random numbers, keyed by
    ``(seed, iteration, unit)``.
    """
    config = config or NpsdeConfig()
    sched = build_schedule(latent_panel, config.dt_nominal)
    allx = np.concatenate([s.y for s in sched.units])
    d = allx.shape[1]
    Z = inducing_grid(allx, config.M)
    layout = ParamLayout(len(Z), d, config.fit_R)
    if layout.size > sched.n_scored:
        log.warning("%d parameters for %d scored observations", layout.size, sched.n_scored)
    R_fixed = None if config.fit_R else np.full(d, config.R_init)
    theta = initial_theta(layout, Z, latent_panel, config.R_init)
    opt = Adam(layout.size, config.lr)
    root = RngStream(seed)
    trace = []
    # iterate averaging over the tail damps the Monte-Carlo gradient noise
    avg_from = config.iterations - int(round(config.average_tail * config.iterations))
    avg, n_avg = np.zeros_like(theta), 0
    for it in range(config.iterations):
        val, g = objective(theta, layout, Z, sched, config.S, root.child(it), R_fixed)
        if not (np.isfinite(val) and np.all(np.isfinite(g))):
            raise DivergenceError(f"objective became non-finite at iteration {it}")
        trace.append(val)
        theta = opt.step(theta, -g)
        if it >= avg_from:
            n_avg += 1
            avg += (theta - avg) / n_avg
    if n_avg:
        theta = avg
    val, g = objective(theta, layout, Z, sched, config.S, root.child(config.iterations), R_fixed)
    meta = {
        "config": config.to_dict(),
        "seed": seed,
        "optimizer": "adam",
        "final_objective": float(val),
        "final_grad_norm": float(np.linalg.norm(g)),
        "objective_trace": [float(v) for v in trace],
        "dt_nominal": sched.dt_nominal,
        "restart_factor": RESTART_FACTOR,
        "jitter": JITTER,
        "n_scored": sched.n_scored,
    }
    return theta_to_model(theta, layout, Z, R_fixed, JITTER, meta)
