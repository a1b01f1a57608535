"""Trajectory diagnostics: irreversibility, surprisal, tail probability, ACF checks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .core import EPS, RngStream, psd_inv_sqrt, sym_eigendecompose
from .errors import DegenerateSeriesError, InputError, InsufficientDataError
from .likelihood import (
    TransitionMethod,
    segment_logdensities,
    simulate_endpoints,
    state_key,
    transition_logdensity,
)
from .simulate import integrate

DEFAULT_S = 4096
ACF_PASS_FRACTION = 0.93


def _default_rng(method, rng):
    return rng if rng is not None else RngStream(method.seed)


def local_irreversibility(model, x_from, x_to, dt, method=None, rng=None):
    """``log P(x_to | x_from) - log P(x_from | x_to)`` in nats.

    Both directions use the same method, and for the simulated method the
    same random sub-streams, so swapping the arguments negates the result
    exactly.
    """
    method = method or TransitionMethod()
    rng = _default_rng(method, rng)
    fwd = transition_logdensity(model, x_from, x_to, dt, method, rng)
    rev = transition_logdensity(model, x_to, x_from, dt, method, rng)
    return fwd - rev


def path_irreversibility(model, trajectory, times, method=None, rng=None):
    """Total irreversibility of a path and its per-transition series.

    Returns ``(Sigma, sigma)`` where ``sigma[k]`` is the local term of the
    transition ``k -> k+1``.
    """
    method = method or TransitionMethod()
    rng = _default_rng(method, rng)
    x = np.asarray(trajectory, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    t = np.asarray(times, dtype=float)
    if len(x) < 2 or len(t) != len(x):
        raise InputError("need at least two states with matching times")
    fwd = segment_logdensities(model, x, t, method, rng)
    # reversed transition k: x[k+1] -> x[k] over the same interval
    rev = transition_logdensity(model, x[1:], x[:-1], np.diff(t), method, rng)
    sigma = np.atleast_1d(fwd - rev)
    # correctly rounded sum, so reversing the path negates Sigma exactly
    return math.fsum(sigma), sigma


def surprisal(model, x_from, x_to, dt, method=None, rng=None):
    """Negative transition log-density, in nats."""
    method = method or TransitionMethod()
    return -transition_logdensity(model, x_from, x_to, dt, method, _default_rng(method, rng))


def successors(model, x_from, dt, S, method, rng):
    """``S`` simulated successors of ``x_from`` after ``dt``.

    The sub-stream is keyed by the state and interval, so surprisal
    expectations and tail probabilities from the same state share draws.
    """
    x_from = np.asarray(x_from, dtype=float).reshape(-1)
    return simulate_endpoints(model, x_from, dt, S, method.steps, rng.child(1, state_key(x_from, dt)))


@dataclass
class Expectation:
    value: float
    stderr: float
    S: int


def _mc_surprisals(model, x_from, dt, S, method, rng):
    succ = successors(model, x_from, dt, S, method, rng)
    return -transition_logdensity(model, x_from, succ, dt, method, rng)


def expected_surprisal(model, x_from, dt, method=None, S=DEFAULT_S, rng=None, full=False):
    """Conditional mean of the surprisal of the next state.

    Closed form (Gaussian entropy) for the one-step method, Monte Carlo over
    ``S`` simulated successors otherwise. With ``full=True`` an
    :class:`Expectation` carrying the standard error is returned.
    """
    method = method or TransitionMethod()
    x_from = np.asarray(x_from, dtype=float).reshape(-1)
    if not dt > 0:
        raise InputError(f"dt must be > 0, got {dt}")
    if method.variant == "one_step_gaussian":
        d = x_from.size
        D = model.diffusion(x_from)
        lam = np.maximum(sym_eigendecompose(D)[0], EPS)
        h = 0.5 * (d * np.log(4 * np.pi * dt) + np.sum(np.log(lam))) + 0.5 * d
        out = Expectation(float(h), 0.0, 0)
    else:
        if S < 100:
            raise InputError(f"Monte-Carlo expectation needs S >= 100, got {S}")
        s = _mc_surprisals(model, x_from, dt, S, method, _default_rng(method, rng))
        out = Expectation(float(s.mean()), float(s.std(ddof=1) / np.sqrt(S)), S)
    return out if full else out.value


def normalized_surprisal(model, x_from, x_to, dt, method=None, S=DEFAULT_S, rng=None):
    """Surprisal minus its conditional expectation."""
    method = method or TransitionMethod()
    rng = _default_rng(method, rng)
    s = surprisal(model, x_from, x_to, dt, method, rng)
    return s - expected_surprisal(model, x_from, dt, method, S, rng)


def tail_probability(model, x_from, x_to, dt, method=None, S=DEFAULT_S, rng=None):
    """Fraction of simulated successors more surprising than the observed step.

    The expectation term is common to observed and simulated steps from the
    same state, so comparing normalized surprisals reduces to comparing raw
    ones.
    """
    method = method or TransitionMethod()
    if S < 1000:
        raise InputError(f"tail probability needs S >= 1000, got {S}")
    rng = _default_rng(method, rng)
    s_obs = surprisal(model, x_from, x_to, dt, method, rng)
    s_sim = _mc_surprisals(model, x_from, dt, S, method, rng)
    return float(np.mean(s_sim > s_obs))


# --- ACF checks -------------------------------------------------------------


def series_acf(series, max_lag=20):
    """Biased sample autocorrelation of a 1-D series at lags ``0..max_lag``."""
    x = np.asarray(series, dtype=float).reshape(-1)
    n = x.size
    c = x - x.mean()
    c0 = np.dot(c, c)
    if n < 2 or not c0 > 0:
        raise DegenerateSeriesError("series has zero variance; autocorrelation undefined")
    max_lag = min(max_lag, n - 1)
    return np.array([np.dot(c[: n - k], c[k:]) / c0 for k in range(max_lag + 1)])


@dataclass
class AcfResult:
    lags: np.ndarray
    acf: np.ndarray  # (d, max_lag + 1)
    band: float
    n: int

    @property
    def inside_fraction(self):
        return float(np.mean(np.abs(self.acf[:, 1:]) <= self.band))

    @property
    def markovian(self):
        """Verdict: at least 93% of (dimension, lag >= 1) values inside the band."""
        return self.inside_fraction >= ACF_PASS_FRACTION


def pooled_acf(segments, max_lag=20):
    """Autocorrelation pooled over several series of ``(n_k, d)`` values.

    Lag products are only formed within a series; the mean and variance are
    pooled. Band half-width is ``1.96 / sqrt(n)`` with ``n`` the total count.
    """
    segs = [np.asarray(s, dtype=float).reshape(len(s), -1) for s in segments if len(s)]
    if not segs:
        raise InsufficientDataError("no residuals")
    allr = np.concatenate(segs)
    n, d = allr.shape
    if n < max_lag + 2:
        raise InsufficientDataError(f"{n} transitions; need at least {max_lag + 2}")
    mu = allr.mean(axis=0)
    c0 = np.sum((allr - mu) ** 2, axis=0)
    if np.any(~(c0 > 0)):
        raise DegenerateSeriesError("residuals have zero variance in some dimension")
    acf = np.zeros((d, max_lag + 1))
    for s in segs:
        c = s - mu
        for k in range(min(max_lag, len(c) - 1) + 1):
            acf[:, k] += np.sum(c[: len(c) - k] * c[k:], axis=0)
    acf /= c0
    return AcfResult(np.arange(max_lag + 1), acf, 1.96 / np.sqrt(n), n)


def standardized_residuals(model, x_from, x_to, dt):
    """``(2 D(x) dt)^{-1/2} (dx - F(x) dt)`` for stacked transitions."""
    x_from = np.asarray(x_from, dtype=float)
    x_to = np.asarray(x_to, dtype=float)
    dt = np.asarray(dt, dtype=float)
    w = psd_inv_sqrt(2.0 * model.diffusion(x_from) * dt[..., None, None])
    r = x_to - x_from - model.drift(x_from) * dt[..., None]
    return np.einsum("...ij,...j->...i", w, r)


def residual_acf(model, latent_panel, max_lag=20):
    """Whiteness check of standardized residuals of observed transitions.

    Residuals are computed per gap-free run of observations and their ACF is
    pooled per dimension; see :class:`AcfResult` for the verdict.
    """
    runs = []
    for _, t, x in latent_panel.segments():
        if len(t) < 2:
            continue
        runs.append(standardized_residuals(model, x[:-1], x[1:], np.diff(t)))
    return pooled_acf(runs, max_lag)


def data_vs_simulated_acf(model, latent_panel, max_lag=20, n_sub=None, seed=0):
    """State ACF of the observed runs next to that of model replicas.

    Every gap-free run is re-simulated from its first state on the same
    time grid, so both tables share sampling design. Returns
    ``(data, simulated)`` :class:`AcfResult` objects.
    """
    n_sub = n_sub or latent_panel.rescaling.n_sub
    root = RngStream(seed)
    data, sim = [], []
    for i, (_, t, x) in enumerate(latent_panel.segments()):
        if len(t) < 2:
            continue
        data.append(x)
        sim.append(integrate(model, x[0], t, n_sub, root.child(i))[0])
    return pooled_acf(data, max_lag), pooled_acf(sim, max_lag)


# --- panel report -----------------------------------------------------------


@dataclass
class TransitionRecord:
    unit_id: str
    t: float  # start time, observation units
    dt: float  # interval, simulation units
    sigma: float
    sigma_cum: float
    s: float
    s_tilde: float
    tail_prob: float


@dataclass
class DiagnosticsReport:
    records: list
    unit_sigma: dict
    metadata: dict = field(default_factory=dict)

    CSV_FIELDS = ("unit", "t", "dt", "sigma", "Sigma_cum", "s", "s_tilde", "tail_prob")

    def to_csv(self, header_comment=None):
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.records:
            w.writerow(
                [r.unit_id]
                + [repr(float(v)) for v in (r.t, r.dt, r.sigma, r.sigma_cum, r.s, r.s_tilde, r.tail_prob)]
            )
        return buf.getvalue()

    def summary(self):
        s_tilde = np.array([r.s_tilde for r in self.records])
        tail = np.array([r.tail_prob for r in self.records])
        return {
            "metadata": self.metadata,
            "n_transitions": len(self.records),
            "unit_Sigma": {u: float(v) for u, v in self.unit_sigma.items()},
            "mean_sigma": float(np.mean([r.sigma for r in self.records])) if self.records else None,
            "mean_s_tilde": float(s_tilde.mean()) if len(s_tilde) else None,
            "n_tail_below_0.01": int(np.sum(tail < 0.01)),
        }


def diagnose(model, latent_panel, method=None, S=DEFAULT_S, seed=0):
    """Per-transition diagnostics for every gap-free observed transition.

    Each transition gets its own random sub-stream keyed by its position
    in the (unit, time) ordering, so results do not depend on scheduling.
    """
    method = method or TransitionMethod()
    if S < 1000:
        raise InputError(f"diagnostics need S >= 1000 for the tail probability, got {S}")
    root = RngStream(seed)
    records = []
    unit_sigma = {}
    alpha = latent_panel.rescaling.alpha
    for i, (uid, t, dt, xf, xt) in enumerate(latent_panel.transitions()):
        rng = root.child(i)
        # the observed endpoint and the successor cloud share one density
        # evaluation from xf; the cloud serves both expectation and tail
        succ = successors(model, xf, dt, S, method, rng)
        lp = transition_logdensity(model, xf, np.vstack([xt[None], succ]), dt, method, rng)
        rev = transition_logdensity(model, xt, xf, dt, method, rng)
        sig, s, s_sim = float(lp[0] - rev), float(-lp[0]), -lp[1:]
        if method.variant == "one_step_gaussian":
            h = expected_surprisal(model, xf, dt, method, S, rng)
        else:
            h = float(s_sim.mean())
        tail = float(np.mean(s_sim > s))
        cum = unit_sigma.get(uid, 0.0) + sig
        unit_sigma[uid] = cum
        records.append(TransitionRecord(uid, t / alpha, dt, sig, cum, s, s - h, tail))
    meta = {"method": method.describe(), "n_sub": method.steps, "S": S, "seed": seed}
    return DiagnosticsReport(records, unit_sigma, meta)
