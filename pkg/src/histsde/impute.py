"""Importance-sampling imputation of missing states between two observations."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .core import RngStream
from .errors import DegenerateWeightsError, InputError
from .likelihood import ONE_STEP, TransitionMethod, transition_logdensity
from .simulate import integrate

log = logging.getLogger(__name__)

ESS_WARN_FRACTION = 0.01


@dataclass
class BridgeSample:
    t: float
    candidates: np.ndarray  # (S, d)
    weights: np.ndarray  # (S,), sums to 1
    resampled: np.ndarray  # (S, d)
    effective_sample_size: float
    warning: str | None = None

    @property
    def S(self):
        return len(self.weights)

    def mean(self):
        return self.resampled.mean(axis=0)

    def var(self):
        return self.resampled.var(axis=0, ddof=1)

    def std(self):
        return np.sqrt(self.var())

    def stderr(self):
        """Monte-Carlo standard error of :meth:`mean`, using the ESS."""
        return np.sqrt(self.var() / self.effective_sample_size)


def propose_forward(model, x0, t0, t, S, rng, n_sub=10):
    """``S`` Euler-Maruyama endpoints at ``t`` started from ``x0`` at ``t0``.

    ``x0`` is one state or an ``(S, d)`` population.
    """
    if not t > t0:
        raise InputError(f"need t0 < t, got {t0} >= {t}")
    x0 = np.asarray(x0, dtype=float)
    start = np.broadcast_to(x0, (S, x0.shape[-1])) if x0.ndim == 1 else x0
    if len(start) != S:
        raise InputError(f"population has {len(start)} members, expected {S}")
    return integrate(model, start, [t0, t], n_sub, rng)[:, -1]


def endpoint_weight(model, candidate, x_T, t, t_T, method=None):
    """Unnormalized log-weight ``log P(x_T | candidate)`` over ``t_T - t``.

    ``candidate`` may be stacked ``(S, d)``.
    """
    if not t_T > t:
        raise InputError(f"need t < t_T, got {t} >= {t_T}")
    method = method or TransitionMethod()
    return transition_logdensity(model, candidate, x_T, t_T - t, method)


def normalize_logweights(logw):
    """Normalized weights from log-weights, shifting by the max before exponentiating."""
    logw = np.asarray(logw, dtype=float)
    finite = np.isfinite(logw)
    top = np.max(logw[finite]) if finite.any() else np.nan
    if not np.isfinite(top):
        raise DegenerateWeightsError("no candidate has a finite log-weight", max_logweight=top)
    w = np.where(finite, np.exp(logw - top), 0.0)
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError("all weights vanished", max_logweight=top)
    return w / total


def effective_sample_size(weights):
    return 1.0 / np.sum(np.asarray(weights) ** 2)


def bridge_resample(candidates, weights, rng):
    """Systematic resampling with one uniform offset.

    Candidates are put in lexicographic order first, so a permutation of
    the input gives the same output for the same stream.
    """
    candidates = np.asarray(candidates, dtype=float)
    weights = np.asarray(weights, dtype=float)
    S = len(weights)
    order = np.lexsort(candidates.T[::-1])
    cdf = np.cumsum(weights[order])
    cdf[-1] = 1.0
    u = (rng.uniform() + np.arange(S)) / S
    idx = np.searchsorted(cdf, u, side="right")
    return candidates[order][np.minimum(idx, S - 1)]


def _check_ess(ess, S, t):
    if ess < 2:
        raise DegenerateWeightsError(f"effective sample size {ess:.3g} < 2 at t={t}", max_logweight=None)
    if ess < ESS_WARN_FRACTION * S:
        msg = f"low effective sample size {ess:.1f} of {S} at t={t}"
        log.warning(msg)
        return msg
    return None


def impute_gap(model, x0, t0, x_T, t_T, query_times, S, rng=None, method=None, n_sub=10):
    """Bridge samples at each query time between ``(t0, x0)`` and ``(t_T, x_T)``.

    Query times are handled in increasing order by sequential Monte Carlo:
    the resampled population at one query time is propagated to the next,
    with incremental weight ``P(x_T | x_j) / P(x_T | x_{j-1})``. ``method``
    scores the remaining interval to the endpoint; a remainder of a single
    sub-step or less is scored with the one-step Gaussian.
    """
    q = np.asarray(query_times, dtype=float).reshape(-1)
    if q.size == 0:
        return []
    if np.any(q <= t0) or np.any(q >= t_T):
        raise InputError("query times must lie strictly inside (t0, t_T)")
    if np.any(np.diff(q) <= 0):
        raise InputError("query times must be strictly increasing")
    rng = rng if rng is not None else RngStream(0)
    x_T = np.asarray(x_T, dtype=float).reshape(-1)
    method = method or TransitionMethod()
    step = (q[0] - t0) / n_sub

    def score(x, t):
        m = ONE_STEP if t_T - t <= step * (1 + 1e-12) else method
        return endpoint_weight(model, x, x_T, t, t_T, m)

    out = []
    pop = np.asarray(x0, dtype=float).reshape(-1)
    prev_t, prev_score = t0, 0.0
    for j, t in enumerate(q):
        cand = propose_forward(model, pop, prev_t, t, S, rng.child(j, 0), n_sub)
        lw = score(cand, t)
        w = normalize_logweights(lw - prev_score)
        ess = effective_sample_size(w)
        warning = _check_ess(ess, S, t)
        res = bridge_resample(cand, w, rng.child(j, 1))
        out.append(BridgeSample(float(t), cand, w, res, float(ess), warning))
        pop, prev_t = res, t
        prev_score = score(res, t)
    return out


def impute_panel(model, latent_panel, S=4096, seed=0, method=None, n_sub=10):
    """Impute every recorded gap with missing observation times.

    Returns a list of ``(unit_id, query_time_obs, BridgeSample)``.
    """
    root = RngStream(seed)
    a = latent_panel.rescaling.alpha
    rows = []
    for g_idx, g in enumerate(latent_panel.gaps):
        if not g.missing_times:
            continue
        u = latent_panel.unit(g.unit_id)
        i0 = int(np.flatnonzero(u.t_obs == g.t_start)[0])
        i1 = int(np.flatnonzero(u.t_obs == g.t_end)[0])
        qs = sorted(g.missing_times)
        samples = impute_gap(
            model, u.states[i0], a * g.t_start, u.states[i1], a * g.t_end,
            [a * t for t in qs], S, root.child(g_idx), method, n_sub,
        )
        rows.extend((g.unit_id, t, b) for t, b in zip(qs, samples))
    return rows


def imputation_csv(rows, axis_names, header_comment=None):
    """CSV text: unit, query_time, mean and std per dimension, ESS."""
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["unit", "query_time"] + [f"mean_{a}" for a in axis_names] + [f"std_{a}" for a in axis_names] + ["ESS"])
    for uid, t, b in rows:
        w.writerow([uid, repr(float(t))] + [repr(float(v)) for v in np.concatenate([b.mean(), b.std()])] + [repr(b.effective_sample_size)])
    return buf.getvalue()
