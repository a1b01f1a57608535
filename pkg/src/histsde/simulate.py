"""Euler-Maruyama integration of drift/diffusion models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream, TimeRescaling, psd_sqrt
from .errors import InputError, ModelEvaluationError


class SdeModel:
    """Anything with a drift field ``F(x)`` and a diffusion matrix ``D(x)``.

    The SDE is ``dx = F(x) dt + sqrt(2 D(x)) dW``. Subclasses implement
    :meth:`drift` and :meth:`diffusion` on stacked states of shape
    ``(..., d)``; both must be pure functions of ``x``.
    """

    dim: int

    def drift(self, x):
        raise NotImplementedError

    def diffusion(self, x):
        raise NotImplementedError

    def noise_factor(self, x):
        """``sqrt(2 D(x))``, recomputed at every call."""
        return psd_sqrt(2.0 * self.diffusion(x))

    def drift_jacobian(self, x, h=1e-6):
        """``J[..., i, j] = dF_i/dx_j``; central differences unless overridden."""
        x = np.asarray(x, dtype=float)
        cols = []
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = h
            cols.append((self.drift(x + e) - self.drift(x - e)) / (2 * h))
        return np.stack(cols, axis=-1)


class FunctionSde(SdeModel):
    """Model built from two vectorized callables."""

    def __init__(self, drift, diffusion, dim):
        self._drift = drift
        self._diffusion = diffusion
        self.dim = dim

    def drift(self, x):
        return np.asarray(self._drift(np.asarray(x, dtype=float)), dtype=float)

    def diffusion(self, x):
        return np.asarray(self._diffusion(np.asarray(x, dtype=float)), dtype=float)


class LinearSde(SdeModel):
    """``F(x) = A x + c`` with constant diffusion ``D``.

    Covers the Ornstein-Uhlenbeck, constant-drift and pure-diffusion fixtures.
    """

    def __init__(self, A, D, c=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.dim = self.A.shape[0]
        self.c = np.zeros(self.dim) if c is None else np.asarray(c, dtype=float).reshape(self.dim)
        self.D = np.atleast_2d(np.asarray(D, dtype=float))
        self._root = psd_sqrt(2.0 * self.D)

    @classmethod
    def ou(cls, theta=1.0, D=0.5, dim=1):
        return cls(-theta * np.eye(dim), D * np.eye(dim))

    @classmethod
    def constant(cls, F, D):
        F = np.atleast_1d(np.asarray(F, dtype=float))
        d = F.size
        D = np.asarray(D, dtype=float)
        D = D * np.eye(d) if D.ndim == 0 else D
        return cls(np.zeros((d, d)), D, c=F)

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.A.T + self.c

    def diffusion(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.D, x.shape[:-1] + self.D.shape)

    def noise_factor(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self._root, x.shape[:-1] + self._root.shape)

    def drift_jacobian(self, x, h=None):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.A, x.shape[:-1] + self.A.shape)


def em_step(model, x, dt, noise, step=None):
    """One Euler-Maruyama step ``x + F dt + sqrt(2D) sqrt(dt) noise``.

    ``x`` and ``noise`` are ``(d,)`` or stacked ``(n, d)``.
    """
    if not dt > 0:
        raise InputError(f"dt must be > 0, got {dt}")
    x = np.asarray(x, dtype=float)
    f = model.drift(x)
    g = model.noise_factor(x)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise ModelEvaluationError("model returned non-finite drift or diffusion", x=x, step=step)
    kick = np.einsum("...ij,...j->...i", g, np.asarray(noise, dtype=float))
    return x + f * dt + np.sqrt(dt) * kick


NOISE_BLOCK = 64


class NoiseSource:
    """Standard normals for successive integration steps of ``n_paths`` paths.

    Steps are grouped into blocks of ``NOISE_BLOCK``; block ``b`` is drawn
    from the stream keyed ``(seed, stream, b)`` in path-major order, so path
    ``s`` receives the same numbers however many paths run alongside it.
    """

    def __init__(self, rng, n_paths, dim):
        self.rng = rng
        self.n_paths = n_paths
        self.dim = dim
        self._block = -1
        self._buf = None

    def __call__(self, step):
        b, i = divmod(step, NOISE_BLOCK)
        if b != self._block:
            self._buf = self.rng.child(b).standard_normal((self.n_paths, NOISE_BLOCK, self.dim))
            self._block = b
        return self._buf[:, i, :]


def integrate(model, x0, times, n_sub, rng):
    """Integrate ``x0`` (``(d,)`` or ``(n, d)``) through ``times``.

    Each interval ``times[k] -> times[k+1]`` is split into ``n_sub`` equal
    steps. Returns states at every entry of ``times``, shape ``(n, m, d)``.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise InputError("times must be strictly increasing")
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    n, d = x.shape
    out = np.empty((n, len(times), d))
    out[:, 0] = x
    noise = NoiseSource(rng, n, d)
    step = 0
    for k in range(len(times) - 1):
        dt = (times[k + 1] - times[k]) / n_sub
        for _ in range(n_sub):
            x = em_step(model, x, dt, noise(step), step=step)
            step += 1
        out[:, k + 1] = x
    return out


@dataclass
class PathEnsemble:
    start: np.ndarray
    times: np.ndarray
    paths: np.ndarray  # (S, len(times), d)
    master_seed: int
    stream: tuple

    @property
    def S(self):
        return self.paths.shape[0]

    def mean(self):
        return self.paths.mean(axis=0)

    def var(self):
        return self.paths.var(axis=0, ddof=1) if self.S > 1 else np.zeros(self.paths.shape[1:])

    def stderr(self):
        return np.sqrt(self.var() / self.S)


def simulate_path(model, x0, horizon, rescaling=TimeRescaling(), rng=None, obs_interval=None):
    """Simulate one path and return it on the observation grid.

    The grid spacing is ``obs_interval`` in simulation time (one observed
    time unit, ``rescaling.alpha``, by default); each interval is split into
    ``rescaling.n_sub`` steps. Returns ``(times, states)``.
    """
    if not horizon > 0:
        raise InputError(f"horizon must be > 0, got {horizon}")
    rng = rng if rng is not None else RngStream(0)
    dt_obs = rescaling.alpha if obs_interval is None else obs_interval
    n = int(np.floor(horizon / dt_obs + 1e-9))
    times = dt_obs * np.arange(n + 1)
    if horizon - times[-1] > 1e-9 * dt_obs:
        times = np.append(times, horizon)
    states = integrate(model, x0, times, rescaling.n_sub, rng)[0]
    return times, states


def simulate_ensemble(model, x0, times, S, rng=None, n_sub=1):
    """``S`` independent paths from ``x0`` recorded at ``times``."""
    if S < 1:
        raise InputError(f"S must be >= 1, got {S}")
    rng = rng if rng is not None else RngStream(0)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    start = np.broadcast_to(x0, (S, x0.size))
    paths = integrate(model, start, times, n_sub, rng)
    return PathEnsemble(x0.copy(), np.asarray(times, dtype=float), paths, rng.master_seed, rng.key)
