"""Transition log-densities and path log-probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import zlib

import numpy as np

from .core import RngStream, gaussian_logpdf, logsumexp
from .errors import DegenerateKdeError, HistSdeError, InputError
from .simulate import integrate

VARIANTS = ("one_step_gaussian", "composed_gaussian", "simulated_kde")


@dataclass(frozen=True)
class TransitionMethod:
    """How ``P(x_to | x_from)`` over a finite interval is approximated.

    ``one_step_gaussian``
        a single Euler-Maruyama Gaussian over the whole interval.
    ``composed_gaussian``
        mean and covariance pushed through ``n_sub`` linearized
        Euler-Maruyama steps, then one Gaussian.
    ``simulated_kde``
        ``S`` simulated endpoints smoothed by a product Gaussian kernel
        with per-dimension Silverman bandwidths.
    """

    variant: str = "composed_gaussian"
    n_sub: int = 10
    S: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown method {self.variant!r}; choose from {VARIANTS}")
        if int(self.n_sub) != self.n_sub or self.n_sub < 1:
            raise InputError(f"n_sub must be >= 1, got {self.n_sub}")
        if self.variant == "simulated_kde" and self.S < 100:
            raise InputError(f"simulated_kde needs S >= 100, got {self.S}")

    @property
    def steps(self):
        """Number of Euler-Maruyama steps the method takes over one interval."""
        return 1 if self.variant == "one_step_gaussian" else self.n_sub

    def describe(self):
        d = {"variant": self.variant}
        if self.variant != "one_step_gaussian":
            d["n_sub"] = self.n_sub
        if self.variant == "simulated_kde":
            d.update(S=self.S, seed=self.seed, bandwidth="silverman")
        return d


ONE_STEP = TransitionMethod("one_step_gaussian", n_sub=1)


def _prep(x_from, x_to, dt):
    x_from = np.asarray(x_from, dtype=float)
    x_to = np.asarray(x_to, dtype=float)
    dt = np.asarray(dt, dtype=float)
    if np.any(~(dt > 0)):
        raise InputError("dt must be > 0")
    return x_from, x_to, dt


def gaussian_moments(model, x_from, dt, method):
    """Mean and covariance of the Gaussian transition approximation.

    For ``composed_gaussian`` the covariance recursion is
    ``C <- (I + J dt) C (I + J dt)^T + 2 D(m) dt`` with ``J`` the drift
    Jacobian at the running mean ``m``.
    """
    x_from = np.asarray(x_from, dtype=float)
    dt = np.asarray(dt, dtype=float)
    d = x_from.shape[-1]
    if method.variant == "one_step_gaussian":
        mean = x_from + model.drift(x_from) * dt[..., None]
        cov = 2.0 * model.diffusion(x_from) * dt[..., None, None]
        return mean, cov
    h = dt / method.n_sub
    m = x_from.copy()
    C = np.zeros(x_from.shape + (d,))
    eye = np.eye(d)
    for _ in range(method.n_sub):
        A = eye + model.drift_jacobian(m) * h[..., None, None]
        C = A @ C @ np.swapaxes(A, -1, -2) + 2.0 * model.diffusion(m) * h[..., None, None]
        m = m + model.drift(m) * h[..., None]
    return m, 0.5 * (C + np.swapaxes(C, -1, -2))


def silverman_bandwidth(samples):
    """Per-dimension Silverman bandwidth of ``(S, d)`` samples."""
    S, d = samples.shape
    sd = samples.std(axis=0, ddof=1)
    return sd * (4.0 / ((d + 2.0) * S)) ** (1.0 / (d + 4.0))


def kde_logpdf(samples, x):
    """Product-Gaussian kernel density of ``samples`` (``(S, d)``) at ``x`` (``(..., d)``)."""
    h = silverman_bandwidth(samples)
    if not np.all(h > 0):
        raise DegenerateKdeError("simulated endpoints have zero spread in some dimension")
    x = np.asarray(x, dtype=float)
    z = (x[..., None, :] - samples) / h
    logk = -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(h)) - 0.5 * samples.shape[1] * np.log(2 * np.pi)
    return logsumexp(logk, axis=-1) - np.log(samples.shape[0])


def state_key(x, dt):
    """Stable 32-bit key of a (state, interval) pair, used to key random streams."""
    buf = np.ascontiguousarray(np.asarray(x, dtype=float)).tobytes() + np.float64(dt).tobytes()
    return zlib.crc32(buf)


def simulate_endpoints(model, x_from, dt, S, n_sub, rng):
    """``S`` Euler-Maruyama endpoints after ``dt`` from one state ``x_from``."""
    x_from = np.asarray(x_from, dtype=float).reshape(-1)
    start = np.broadcast_to(x_from, (S, x_from.size))
    return integrate(model, start, [0.0, float(dt)], n_sub, rng)[:, -1]


def transition_logdensity(model, x_from, x_to, dt, method=None, rng=None):
    """Approximate ``log P(x_to | x_from)`` after time ``dt``.

    ``x_from``, ``x_to`` may be stacked along leading axes, with ``dt`` a
    scalar or broadcastable array. ``rng`` is used by ``simulated_kde`` only
    (defaults to a stream keyed by ``method.seed``); the endpoint cloud from
    a given ``(x_from, dt)`` always comes from the same sub-stream, so a
    density evaluated twice, or in the two directions of an irreversibility
    ratio, sees identical simulations.
    """
    method = method or TransitionMethod()
    x_from, x_to, dt = _prep(x_from, x_to, dt)
    if method.variant != "simulated_kde":
        # moments depend on (x_from, dt) only; x_to broadcasts against them
        shape = np.broadcast_shapes(x_from.shape[:-1], dt.shape)
        xf = np.broadcast_to(x_from, shape + x_from.shape[-1:])
        dt_b = np.broadcast_to(dt, shape)
        mean, cov = gaussian_moments(model, xf, dt_b, method)
        return gaussian_logpdf(x_to, mean, cov)
    rng = rng if rng is not None else RngStream(method.seed)
    shape = np.broadcast_shapes(x_from.shape[:-1], x_to.shape[:-1], dt.shape)
    d = x_from.shape[-1]
    xf = np.broadcast_to(x_from, shape + (d,)).reshape(-1, d)
    xt = np.broadcast_to(x_to, shape + (d,)).reshape(-1, d)
    dts = np.broadcast_to(dt, shape).reshape(-1)
    out = np.empty(len(xf))
    clouds = {}
    for i in range(len(xf)):
        key = (tuple(xf[i]), float(dts[i]))
        if key not in clouds:
            sub = rng.child(0, state_key(xf[i], dts[i]))
            clouds[key] = simulate_endpoints(model, xf[i], dts[i], method.S, method.n_sub, sub)
        out[i] = kde_logpdf(clouds[key], xt[i])
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def path_logprob(model, trajectory, times, method=None, rng=None):
    """Sum of transition log-densities along a trajectory.

    The initial-state density is left out: the result is conditioned on the
    first state.
    """
    x = np.asarray(trajectory, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    t = np.asarray(times, dtype=float)
    if len(x) < 2 or len(t) != len(x):
        raise InputError("need at least two states with matching times")
    return float(np.sum(segment_logdensities(model, x, t, method, rng)))


def segment_logdensities(model, x, t, method=None, rng=None):
    """Per-segment transition log-densities; errors name the failing segment."""
    dt = np.diff(t)
    try:
        return transition_logdensity(model, x[:-1], x[1:], dt, method, rng)
    except HistSdeError:
        pass
    for k in range(len(dt)):
        try:
            transition_logdensity(model, x[k], x[k + 1], dt[k], method, rng)
        except HistSdeError as exc:
            raise type(exc)(f"segment {k}: {exc}") from exc
    raise AssertionError("batched evaluation failed but every segment succeeded")
