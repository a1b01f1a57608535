"""From raw panel CSV to latent state trajectories.

Pipeline: read a long-format panel, log10-transform the heavy-tailed columns,
standardize, project onto the leading principal components of the pooled
correlation matrix, and map observation time to simulation time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import TimeRescaling, sym_eigendecompose
from .errors import (
    DegenerateColumnError,
    DuplicateKeyError,
    InputError,
    InsufficientDataError,
    ParseError,
    SchemaError,
)


@dataclass
class UnitObservations:
    unit_id: str
    t_obs: np.ndarray  # (n,)
    values: np.ndarray  # (n, p), NaN marks a missing entry


@dataclass
class Panel:
    columns: list
    units: list = field(default_factory=list)

    @property
    def p(self):
        return len(self.columns)

    def unit(self, unit_id):
        for u in self.units:
            if u.unit_id == unit_id:
                return u
        raise KeyError(unit_id)

    def stacked(self):
        if not self.units:
            return np.empty((0, self.p))
        return np.vstack([u.values for u in self.units])


def ingest_csv(path, unit_col="unit", time_col="time", value_cols=None):
    """Read a long-format panel CSV.

    The header must contain ``unit_col`` and ``time_col``; every other column
    (or only ``value_cols`` if given) is read as a numeric indicator. Empty
    cells become NaN. Rows are grouped by unit and sorted by time, and no
    interpolation is done.

    Raises
    ------
    SchemaError
        A required column is absent from the header.
    ParseError
        A time or value cell is not a number (message carries the row number).
    DuplicateKeyError
        The same (unit, time) appears twice.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        for name in (unit_col, time_col):
            if name not in header:
                raise SchemaError(f"missing required column {name!r} in header {header}")
        if value_cols is None:
            value_cols = [h for h in header if h not in (unit_col, time_col)]
        for name in value_cols:
            if name not in header:
                raise SchemaError(f"missing value column {name!r} in header {header}")
        if not value_cols:
            raise SchemaError("header has no value columns")
        iu, it = header.index(unit_col), header.index(time_col)
        iv = [header.index(c) for c in value_cols]

        rows = {}
        seen = set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", row=lineno)
            unit = rec[iu].strip()
            try:
                t = float(rec[it])
            except ValueError:
                raise ParseError(f"cannot parse time {rec[it]!r}", row=lineno) from None
            if (unit, t) in seen:
                raise DuplicateKeyError(f"row {lineno}: duplicate (unit, time) = ({unit!r}, {t})")
            seen.add((unit, t))
            vals = []
            for j in iv:
                cell = rec[j].strip()
                if cell == "":
                    vals.append(math.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"cannot parse {header[j]}={cell!r} as a number", row=lineno
                    ) from None
            rows.setdefault(unit, []).append((t, vals))

    units = []
    for unit, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        t = np.array([r[0] for r in recs])
        v = np.array([r[1] for r in recs], dtype=float).reshape(len(recs), len(value_cols))
        keep = ~np.all(np.isnan(v), axis=1)
        units.append(UnitObservations(unit, t[keep], v[keep]))
    return Panel(columns=list(value_cols), units=units)


@dataclass(frozen=True)
class PcaModel:
    """Fitted log/standardize/PCA transform.

    ``components`` spans all ``p`` raw columns; pass-through columns carry
    zero loadings and are appended to the scores after standardization.
    """

    columns: tuple
    column_means: np.ndarray
    column_stds: np.ndarray
    components: np.ndarray  # (k, p)
    explained_variance_ratio: np.ndarray  # (k,)
    sign_anchor: tuple
    log_columns: tuple
    passthrough: tuple = ()
    eigenvalues: np.ndarray = None
    n_fit_rows: int = 0

    @property
    def k(self):
        return self.components.shape[0]

    @property
    def dim(self):
        return self.k + len(self.passthrough)

    @property
    def axis_names(self):
        return [f"PC{i + 1}" for i in range(self.k)] + [self.columns[j] for j in self.passthrough]

    def standardize(self, values):
        v = np.array(values, dtype=float, copy=True)
        for j in self.log_columns:
            col = v[..., j]
            with np.errstate(invalid="ignore"):
                if np.any(col[~np.isnan(col)] <= 0):
                    raise InputError(f"column {self.columns[j]!r} has non-positive values; cannot log10")
            v[..., j] = np.log10(col)
        return (v - self.column_means) / self.column_stds

    def transform(self, values):
        z = self.standardize(values)
        scores = z @ self.components.T
        return np.concatenate([scores, z[..., list(self.passthrough)]], axis=-1)

    def inverse_transform(self, latent):
        """Map latent states back to raw columns (exact when k equals the PCA width)."""
        latent = np.asarray(latent, dtype=float)
        z = latent[..., : self.k] @ self.components
        for i, j in enumerate(self.passthrough):
            z[..., j] = latent[..., self.k + i]
        v = z * self.column_stds + self.column_means
        for j in self.log_columns:
            v[..., j] = 10.0 ** v[..., j]
        return v

    def to_dict(self):
        return {
            "columns": list(self.columns),
            "column_means": self.column_means.tolist(),
            "column_stds": self.column_stds.tolist(),
            "components": self.components.tolist(),
            "explained_variance_ratio": self.explained_variance_ratio.tolist(),
            "eigenvalues": None if self.eigenvalues is None else self.eigenvalues.tolist(),
            "sign_anchor": list(self.sign_anchor),
            "log_columns": list(self.log_columns),
            "passthrough": list(self.passthrough),
            "n_fit_rows": self.n_fit_rows,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            columns=tuple(d["columns"]),
            column_means=np.array(d["column_means"], dtype=float),
            column_stds=np.array(d["column_stds"], dtype=float),
            components=np.array(d["components"], dtype=float).reshape(-1, len(d["columns"])),
            explained_variance_ratio=np.array(d["explained_variance_ratio"], dtype=float),
            sign_anchor=tuple(d["sign_anchor"]),
            log_columns=tuple(d["log_columns"]),
            passthrough=tuple(d.get("passthrough", ())),
            eigenvalues=None if d.get("eigenvalues") is None else np.array(d["eigenvalues"]),
            n_fit_rows=d.get("n_fit_rows", 0),
        )


def _column_index(panel, c):
    if isinstance(c, str):
        if c not in panel.columns:
            raise SchemaError(f"unknown column {c!r}")
        return panel.columns.index(c)
    c = int(c)
    if not 0 <= c < panel.p:
        raise SchemaError(f"column index {c} out of range for {panel.p} columns")
    return c


def pca_fit(panel, k, log_columns=(), anchors=None, passthrough=()):
    """Fit the log/standardize/PCA transform on complete-case rows.

    Parameters
    ----------
    panel : Panel
    k : int
        Number of principal components kept from the non-pass-through columns.
    log_columns : iterable of column names or indices
        Columns log10-transformed before standardization.
    anchors : sequence, optional
        For each component, the raw column whose loading is made nonnegative.
        Defaults to the column with the largest absolute loading.
    passthrough : iterable of column names or indices
        Columns that skip PCA and enter the latent state standardized.
    """
    log_idx = tuple(sorted({_column_index(panel, c) for c in log_columns}))
    pass_idx = tuple(_column_index(panel, c) for c in passthrough)
    pca_idx = [j for j in range(panel.p) if j not in pass_idx]
    p_pca = len(pca_idx)
    if not 0 <= k <= p_pca:
        raise InputError(f"k={k} must be between 0 and the {p_pca} PCA columns")

    raw = panel.stacked()
    complete = raw[~np.any(np.isnan(raw), axis=1)]
    if complete.shape[0] < panel.p + 1:
        raise InsufficientDataError(
            f"{complete.shape[0]} complete rows; need at least {panel.p + 1} for {panel.p} columns"
        )
    v = complete.copy()
    for j in log_idx:
        if np.any(v[:, j] <= 0):
            raise InputError(f"column {panel.columns[j]!r} has non-positive values; cannot log10")
        v[:, j] = np.log10(v[:, j])
    means = v.mean(axis=0)
    stds = v.std(axis=0)
    for j in range(panel.p):
        if not stds[j] > 1e-12 * max(1.0, abs(means[j])):
            raise DegenerateColumnError(f"column {panel.columns[j]!r} has zero variance")
    z = (v - means) / stds

    components = np.zeros((k, panel.p))
    ratio = np.zeros(k)
    eigvals = np.zeros(0)
    anchor_out = []
    if k:
        zc = z[:, pca_idx]
        corr = zc.T @ zc / zc.shape[0]
        corr = 0.5 * (corr + corr.T)
        eigvals, vecs = sym_eigendecompose(corr)
        total = float(np.sum(eigvals))
        for i in range(k):
            load = np.zeros(panel.p)
            load[pca_idx] = vecs[:, i]
            if anchors is not None:
                a = _column_index(panel, anchors[i])
                if a in pass_idx:
                    raise InputError(f"anchor column {panel.columns[a]!r} is a pass-through column")
            else:
                a = int(np.argmax(np.abs(load)))
            if load[a] < 0:
                load = -load
            components[i] = load
            ratio[i] = max(eigvals[i], 0.0) / total
            anchor_out.append(a)
    return PcaModel(
        columns=tuple(panel.columns),
        column_means=means,
        column_stds=stds,
        components=components,
        explained_variance_ratio=ratio,
        sign_anchor=tuple(anchor_out),
        log_columns=log_idx,
        passthrough=pass_idx,
        eigenvalues=eigvals,
        n_fit_rows=int(complete.shape[0]),
    )


@dataclass(frozen=True)
class Gap:
    """Span between two retained observations of one unit with nothing usable inside.

    Times are in observation units; ``missing_times`` lists the observation
    times that were dropped (incomplete rows) or expected on the nominal grid.
    """

    unit_id: str
    t_start: float
    t_end: float
    missing_times: tuple = ()


@dataclass
class LatentUnit:
    unit_id: str
    t_obs: np.ndarray
    states: np.ndarray  # (n, d)


@dataclass
class LatentPanel:
    units: list
    dim: int
    rescaling: TimeRescaling = TimeRescaling()
    gaps: list = field(default_factory=list)
    axis_names: list = None

    def times(self, unit):
        return self.rescaling.to_sim(unit.t_obs)

    def unit(self, unit_id):
        for u in self.units:
            if u.unit_id == unit_id:
                return u
        raise KeyError(unit_id)

    def gap_spans(self):
        """Gaps as ``(unit_id, t_start, t_end)`` in simulation time."""
        a = self.rescaling.alpha
        return [(g.unit_id, a * g.t_start, a * g.t_end) for g in self.gaps]

    def _gap_starts(self):
        out = {}
        for g in self.gaps:
            out.setdefault(g.unit_id, set()).add(g.t_start)
        return out

    def transitions(self, include_gaps=False):
        """Yield ``(unit_id, t_from, dt, x_from, x_to)`` over consecutive retained pairs.

        ``t_from`` and ``dt`` are simulation times. Pairs spanning a recorded
        gap are skipped unless ``include_gaps`` is set.
        """
        starts = self._gap_starts()
        for u in self.units:
            t = self.times(u)
            gs = starts.get(u.unit_id, ())
            for j in range(len(t) - 1):
                if not include_gaps and u.t_obs[j] in gs:
                    continue
                yield u.unit_id, t[j], t[j + 1] - t[j], u.states[j], u.states[j + 1]

    def segments(self):
        """Runs of gap-free consecutive observations, as ``(unit_id, times, states)``."""
        starts = self._gap_starts()
        for u in self.units:
            t = self.times(u)
            gs = starts.get(u.unit_id, ())
            begin = 0
            for j in range(len(t)):
                if j == len(t) - 1 or u.t_obs[j] in gs:
                    yield u.unit_id, t[begin : j + 1], u.states[begin : j + 1]
                    begin = j + 1

    def n_observations(self):
        return sum(len(u.t_obs) for u in self.units)

    @classmethod
    def from_arrays(cls, data, rescaling=TimeRescaling(), gaps=(), axis_names=None):
        """Build from ``{unit_id: (t_obs, states)}``."""
        units = []
        dim = None
        for uid, (t, x) in data.items():
            t = np.asarray(t, dtype=float)
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            if np.any(np.diff(t) <= 0):
                raise InputError(f"unit {uid!r}: times must be strictly increasing")
            if dim is None:
                dim = x.shape[1]
            elif x.shape[1] != dim:
                raise SchemaError(f"unit {uid!r} has dimension {x.shape[1]}, expected {dim}")
            units.append(LatentUnit(str(uid), t, x))
        return cls(units=units, dim=dim or 0, rescaling=rescaling, gaps=list(gaps), axis_names=axis_names)

    def to_dict(self):
        return {
            "dim": self.dim,
            "axis_names": self.axis_names,
            "rescaling": {"alpha": self.rescaling.alpha, "n_sub": self.rescaling.n_sub},
            "units": [
                {
                    "unit_id": u.unit_id,
                    "t_obs": u.t_obs.tolist(),
                    "times": self.times(u).tolist(),
                    "states": u.states.tolist(),
                }
                for u in self.units
            ],
            "gaps": [
                {
                    "unit_id": g.unit_id,
                    "t_start": g.t_start,
                    "t_end": g.t_end,
                    "missing_times": list(g.missing_times),
                }
                for g in self.gaps
            ],
        }

    @classmethod
    def from_dict(cls, d):
        dim = int(d["dim"])
        units = [
            LatentUnit(
                u["unit_id"],
                np.array(u["t_obs"], dtype=float),
                np.array(u["states"], dtype=float).reshape(-1, dim),
            )
            for u in d["units"]
        ]
        gaps = [
            Gap(g["unit_id"], g["t_start"], g["t_end"], tuple(g.get("missing_times", ())))
            for g in d.get("gaps", [])
        ]
        r = d.get("rescaling", {})
        return cls(
            units=units,
            dim=dim,
            rescaling=TimeRescaling(r.get("alpha", 1.0), r.get("n_sub", 1)),
            gaps=gaps,
            axis_names=d.get("axis_names"),
        )


def pca_project(model, panel, nominal_interval=None):
    """Project every complete observation into the latent space.

    Incomplete observations are dropped and the span they leave between two
    retained observations is recorded as a :class:`Gap`. When
    ``nominal_interval`` is given, spacings longer than it are recorded as
    gaps too, with the expected grid times listed as missing.
    """
    if tuple(panel.columns) != tuple(model.columns):
        raise SchemaError(f"panel columns {panel.columns} do not match model columns {list(model.columns)}")
    units, gaps = [], []
    for u in panel.units:
        complete = ~np.any(np.isnan(u.values), axis=1)
        t_keep = u.t_obs[complete]
        states = model.transform(u.values[complete]) if complete.any() else np.empty((0, model.dim))
        units.append(LatentUnit(u.unit_id, t_keep, states))
        for j in range(len(t_keep) - 1):
            t0, t1 = t_keep[j], t_keep[j + 1]
            dropped = u.t_obs[(u.t_obs > t0) & (u.t_obs < t1)]
            missing = tuple(float(t) for t in dropped)
            if nominal_interval is not None and (t1 - t0) > nominal_interval * (1 + 1e-9):
                n = int(round((t1 - t0) / nominal_interval))
                grid = tuple(float(t0 + i * nominal_interval) for i in range(1, n))
                missing = tuple(sorted(set(missing) | set(grid)))
            if missing:
                gaps.append(Gap(u.unit_id, float(t0), float(t1), missing))
    return LatentPanel(units=units, dim=model.dim, gaps=gaps, axis_names=model.axis_names)


def rescale_time(latent, rescaling):
    """Return ``latent`` on the simulation clock ``t = alpha * t_obs``."""
    return replace(latent, rescaling=rescaling)
