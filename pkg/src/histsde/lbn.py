"""Neural Kramers-Moyal estimation of drift and diffusion with a SWAG ensemble.

Two small MLPs are trained on conditional-moment targets: ``dx/dt`` for the
drift and ``dx dx^T / (2 dt)`` for the diffusion. Gradients come from the
hand-written backward passes below; there is no autodiff dependency.
"""

from __future__ import annotations

import base64
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import EPS, RngStream, jacobi_eigh
from .errors import DivergenceError, InputError, InsufficientDataError
from .simulate import SdeModel

log = logging.getLogger(__name__)

LN_EPS = 1e-5
ROUND_GUARD = 64 * np.finfo(float).eps


# --- MLP ----------------------------------------------------------------------


def _elu(y):
    return np.where(y > 0, y, np.expm1(np.minimum(y, 0.0)))


def _elu_grad(y):
    return np.where(y > 0, 1.0, np.exp(np.minimum(y, 0.0)))


class Mlp:
    """Blocks of Linear -> LayerNorm -> ELU, then a linear output layer.

    Parameters live in one flat vector so that optimizers and SWAG work on
    plain arrays. ``widths = (n_in, h_1, ..., h_L, n_out)``.
    """

    def __init__(self, widths):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise InputError(f"bad layer widths {widths}")
        self._slices = []
        off = 0
        n_hidden = len(self.widths) - 2
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            layer = {}
            for name, shape in (("W", (b, a)), ("b", (b,))):
                n = int(np.prod(shape))
                layer[name] = (off, off + n, shape)
                off += n
            if i < n_hidden:
                for name in ("g", "beta"):
                    layer[name] = (off, off + b, (b,))
                    off += b
            self._slices.append(layer)
        self.n_params = off

    def unpack(self, theta):
        out = []
        for layer in self._slices:
            out.append({k: theta[s:e].reshape(shape) for k, (s, e, shape) in layer.items()})
        return out

    def init(self, rng):
        """Weights and biases ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, unit LayerNorm gains.

        Nonzero biases matter for low-dimensional inputs: with ``b = 0`` and
        a scalar input, LayerNorm of ``W x`` is a step function of ``x``.
        """
        theta = np.zeros(self.n_params)
        for i, layer in enumerate(self._slices):
            s, e, (b, a) = layer["W"]
            lim = 1.0 / np.sqrt(a)
            theta[s:e] = (2 * rng.child(i).uniform(e - s) - 1) * lim
            s, e, _ = layer["b"]
            theta[s:e] = (2 * rng.child(i, 1).uniform(e - s) - 1) * lim
            if "g" in layer:
                s, e, _ = layer["g"]
                theta[s:e] = 1.0
        return theta

    def forward(self, theta, x, cache=False):
        h = np.asarray(x, dtype=float)
        layers = self.unpack(theta)
        tape = []
        for p in layers[:-1]:
            z = h @ p["W"].T + p["b"]
            mu = z.mean(axis=-1, keepdims=True)
            c = z - mu
            inv = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + LN_EPS)
            zh = c * inv
            y = p["g"] * zh + p["beta"]
            if cache:
                tape.append((h, zh, inv, y))
            h = _elu(y)
        p = layers[-1]
        out = h @ p["W"].T + p["b"]
        if cache:
            tape.append((h,))
            return out, tape
        return out

    def forward_members(self, thetas, x):
        """Outputs of many parameter vectors ``(N, P)`` on shared inputs, ``(N, n, n_out)``."""
        thetas = np.atleast_2d(thetas)
        N = len(thetas)
        h = np.broadcast_to(np.asarray(x, dtype=float), (N,) + np.shape(x))
        layers = [{k: thetas[:, s:e].reshape((N,) + shape) for k, (s, e, shape) in layer.items()}
                  for layer in self._slices]
        for p in layers[:-1]:
            z = h @ np.swapaxes(p["W"], 1, 2) + p["b"][:, None, :]
            c = z - z.mean(axis=-1, keepdims=True)
            zh = c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + LN_EPS)
            h = _elu(p["g"][:, None, :] * zh + p["beta"][:, None, :])
        p = layers[-1]
        return h @ np.swapaxes(p["W"], 1, 2) + p["b"][:, None, :]

    def backward(self, theta, tape, dout):
        """Gradient of ``sum(dout * forward(theta, x))`` with respect to ``theta``."""
        layers = self.unpack(theta)
        grad = np.zeros_like(theta)
        gl = self.unpack(grad)  # views into grad
        (h,) = tape[-1]
        gl[-1]["W"][...] = dout.T @ h
        gl[-1]["b"][...] = dout.sum(axis=0)
        dh = dout @ layers[-1]["W"]
        for i in range(len(layers) - 2, -1, -1):
            h_in, zh, inv, y = tape[i]
            p = layers[i]
            dy = dh * _elu_grad(y)
            gl[i]["g"][...] = np.sum(dy * zh, axis=0)
            gl[i]["beta"][...] = dy.sum(axis=0)
            dzh = dy * p["g"]
            dz = inv * (dzh - dzh.mean(axis=-1, keepdims=True) - zh * (dzh * zh).mean(axis=-1, keepdims=True))
            gl[i]["W"][...] = dz.T @ h_in
            gl[i]["b"][...] = dz.sum(axis=0)
            dh = dz @ p["W"]
        return grad


# --- diffusion head -----------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tril_to_sym(v, d):
    """Symmetric matrices from lower-triangular slots ``(..., d(d+1)/2)``."""
    i, j = np.tril_indices(d)
    m = np.zeros(v.shape[:-1] + (d, d))
    m[..., i, j] = v
    m[..., j, i] = v
    return m


def sym_grad_to_tril(g, d):
    """Pull a gradient on the symmetric fill back to the triangular slots."""
    i, j = np.tril_indices(d)
    out = g[..., i, j] + g[..., j, i]
    out[..., i == j] *= 0.5
    return out


def psd_head(raw, d):
    """``U diag(softplus(lam) + EPS) U^T`` from raw triangular outputs.

    Returns the matrices and what the backward pass needs.
    """
    m = tril_to_sym(raw, d)
    if d == 1:
        lam, u = m[..., 0], np.ones(m.shape)
    else:
        lam, u = jacobi_eigh(m)
    f = _softplus(lam) + EPS
    D = (u * f[..., None, :]) @ np.swapaxes(u, -1, -2)
    # reconstruction rounding is ~ulp(max f); lift the diagonal by a few
    # dozen of those so the materialized matrix keeps its floor
    guard = ROUND_GUARD * d * np.max(f, axis=-1)
    idx = np.arange(d)
    D[..., idx, idx] += guard[..., None]
    return D, (lam, u, f)


def psd_head_backward(aux, gD, d):
    """Gradient with respect to the raw outputs, by the Daleckii-Krein formula."""
    lam, u, f = aux
    gD = 0.5 * (gD + np.swapaxes(gD, -1, -2))
    dl = lam[..., :, None] - lam[..., None, :]
    df = f[..., :, None] - f[..., None, :]
    fp = _sigmoid(lam)
    mid = _sigmoid(0.5 * (lam[..., :, None] + lam[..., None, :]))
    close = np.abs(dl) < 1e-10
    K = np.where(close, mid, df / np.where(close, 1.0, dl))
    idx = np.arange(d)
    K[..., idx, idx] = fp
    ut = np.swapaxes(u, -1, -2)
    gM = u @ (K * (ut @ gD @ u)) @ ut
    return sym_grad_to_tril(gM, d)


class DriftNet:
    def __init__(self, d, hidden=(64, 64, 64)):
        self.d = d
        self.mlp = Mlp((d,) + tuple(hidden) + (d,))

    def predict(self, theta, z):
        return self.mlp.forward(theta, z)

    def loss_and_grad(self, theta, z, y):
        out, tape = self.mlp.forward(theta, z, cache=True)
        r = out - y
        n = len(z)
        loss = 0.5 * np.sum(r * r) / n
        return loss, self.mlp.backward(theta, tape, r / n)

    def loss(self, theta, z, y):
        r = self.predict(theta, z) - y
        return 0.5 * np.sum(r * r) / len(z)


class DiffNet:
    """MLP to lower-triangular slots, then the eigenvalue-rectified PSD head."""

    def __init__(self, d, hidden=(64, 64, 64)):
        self.d = d
        self.mlp = Mlp((d,) + tuple(hidden) + (d * (d + 1) // 2,))

    def predict(self, theta, z):
        return psd_head(self.mlp.forward(theta, z), self.d)[0]

    def loss_and_grad(self, theta, z, y):
        raw, tape = self.mlp.forward(theta, z, cache=True)
        D, aux = psd_head(raw, self.d)
        r = D - y
        n = len(z)
        loss = 0.5 * np.sum(r * r) / n
        graw = psd_head_backward(aux, r / n, self.d)
        return loss, self.mlp.backward(theta, tape, graw)

    def loss(self, theta, z, y):
        r = self.predict(theta, z) - y
        return 0.5 * np.sum(r * r) / len(z)


def forward_diffusion(net, theta, z):
    """Diffusion matrices from a :class:`DiffNet`, min eigenvalue at least ``EPS``."""
    return net.predict(theta, z)


# --- data ---------------------------------------------------------------------


@dataclass
class KmPairs:
    x: np.ndarray  # (n, d)
    y_F: np.ndarray  # (n, d)
    y_D: np.ndarray  # (n, d, d)
    unit_ids: np.ndarray  # (n,)
    n_excluded: int


def km_targets(latent_panel, rescaling=None):
    """Kramers-Moyal regression pairs from consecutive observed transitions.

    ``rescaling`` overrides the panel's own time rescaling. Transitions
    spanning a recorded gap are dropped and counted.
    """
    if rescaling is not None:
        from .statespace import rescale_time

        latent_panel = rescale_time(latent_panel, rescaling)
    rows = list(latent_panel.transitions())
    n_all = sum(1 for _ in latent_panel.transitions(include_gaps=True))
    if not rows:
        raise InsufficientDataError("no consecutive observed transitions")
    uid = np.array([r[0] for r in rows])
    dt = np.array([r[2] for r in rows])
    x = np.array([r[3] for r in rows], dtype=float)
    dx = np.array([r[4] for r in rows], dtype=float) - x
    y_F = dx / dt[:, None]
    y_D = dx[:, :, None] * dx[:, None, :] / (2 * dt[:, None, None])
    return KmPairs(x, y_F, y_D, uid, n_all - len(rows))


def fold_assignment(unit_ids, k, rng):
    """Fold index per pair, splitting by unit.

    With fewer units than folds, pairs are split into ``k`` contiguous
    blocks instead.
    """
    units = list(dict.fromkeys(unit_ids.tolist()))
    n = len(unit_ids)
    if len(units) >= k:
        perm = rng.generator.permutation(len(units))
        fold_of = {u: int(perm[i] % k) for i, u in enumerate(units)}
        return np.array([fold_of[u] for u in unit_ids.tolist()]), "unit"
    return np.minimum(np.arange(n) * k // n, k - 1), "block"


# --- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    hidden: tuple = (64, 64, 64)
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 300
    patience: int = 20
    min_rel_improvement: float = 1e-3
    swa_epochs: int = 20
    k: int = 5
    n_ens: int = 30
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.n_ens % self.k:
            raise InputError(f"n_ens={self.n_ens} must be divisible by k={self.k}")
        if self.swa_epochs < 1 or self.max_epochs <= self.swa_epochs:
            raise InputError("need 1 <= swa_epochs < max_epochs")

    def to_dict(self):
        return {
            "hidden": list(self.hidden), "lr": self.lr, "batch_size": self.batch_size,
            "max_epochs": self.max_epochs, "patience": self.patience,
            "min_rel_improvement": self.min_rel_improvement, "swa_epochs": self.swa_epochs,
            "k": self.k, "n_ens": self.n_ens, "betas": list(self.betas),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        d["betas"] = tuple(d["betas"])
        return cls(**d)


class Adam:
    def __init__(self, n, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class SwagState:
    mean: np.ndarray
    sq_mean: np.ndarray
    n: int = 0

    @classmethod
    def empty(cls, n_params):
        return cls(np.zeros(n_params), np.zeros(n_params), 0)

    def collect(self, theta):
        self.n += 1
        self.mean += (theta - self.mean) / self.n
        self.sq_mean += (theta * theta - self.sq_mean) / self.n

    @property
    def variance(self):
        return np.maximum(self.sq_mean - self.mean**2, 0.0)


def swag_sample(state, rng):
    """One draw from ``N(mean, diag(variance))``."""
    var = state.variance
    if not np.any(var > 0):
        return state.mean.copy()
    return state.mean + np.sqrt(var) * rng.standard_normal(state.mean.shape)


def train_fold(net, z_tr, y_tr, z_val, y_val, config, rng):
    """Adam training with validation monitoring, then SWA moment collection.

    SWA starts once the validation loss has not improved by more than
    ``min_rel_improvement`` (relative) for ``patience`` epochs, or when only
    ``swa_epochs`` epochs remain. Returns ``(SwagState, log)``.
    """
    theta = net.mlp.init(rng.child(0))
    opt = Adam(theta.size, config.lr, config.betas)
    swag = SwagState.empty(theta.size)
    n = len(z_tr)
    bs = min(config.batch_size, n)
    best, best_epoch = np.inf, 0
    swa_start, trigger = None, None
    history = []
    for epoch in range(config.max_epochs):
        order = rng.child(1, epoch).generator.permutation(n)
        for s in range(0, n, bs):
            idx = order[s : s + bs]
            loss, g = net.loss_and_grad(theta, z_tr[idx], y_tr[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, learning rate {config.lr}")
            theta = opt.step(theta, g)
        val = net.loss(theta, z_val, y_val)
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}, learning rate {config.lr}")
        history.append(float(val))
        if swa_start is None:
            if val < best * (1 - config.min_rel_improvement):
                best, best_epoch = val, epoch
            if epoch - best_epoch >= config.patience:
                swa_start, trigger = epoch + 1, "plateau"
            elif epoch + 1 >= config.max_epochs - config.swa_epochs:
                swa_start, trigger = epoch + 1, "max_epochs"
        else:
            swag.collect(theta)
            if swag.n >= config.swa_epochs:
                break
    info = {"epochs": len(history), "swa_start": swa_start, "swa_trigger": trigger,
            "final_val_loss": history[-1], "best_val_loss": float(best), "val_history": history}
    return swag, info


# --- ensemble -----------------------------------------------------------------


def _b64(a):
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s, shape):
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).copy()


@dataclass
class LbnEnsemble(SdeModel):
    """SWAG ensemble of drift and diffusion networks; evaluates as ensemble means."""

    dim: int
    hidden: tuple
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray  # drift target offset
    y_scale: float  # drift target scale
    drift_params: np.ndarray  # (N_ens, P_F)
    diff_params: np.ndarray  # (N_ens, P_D)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.drift_net = DriftNet(self.dim, self.hidden)
        self.diff_net = DiffNet(self.dim, self.hidden)

    @property
    def n_members(self):
        return len(self.drift_params)

    def _z(self, x):
        return (np.asarray(x, dtype=float) - self.x_mean) / self.x_std

    def _flat(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(-1, self.dim), x.shape[:-1]

    def member_drift(self, x):
        """Drift of every member, shape ``(N_ens, ..., d)``."""
        xf, lead = self._flat(x)
        z = self._z(xf)
        out = self.drift_net.mlp.forward_members(self.drift_params, z) * self.y_scale + self.y_mean
        return out.reshape((self.n_members,) + lead + (self.dim,))

    def member_diffusion(self, x):
        xf, lead = self._flat(x)
        z = self._z(xf)
        out = psd_head(self.diff_net.mlp.forward_members(self.diff_params, z), self.dim)[0]
        return out.reshape((self.n_members,) + lead + (self.dim, self.dim))

    def drift(self, x):
        return self.member_drift(x).mean(axis=0)

    def diffusion(self, x):
        return self.member_diffusion(x).mean(axis=0)

    def to_dict(self):
        return {
            "kind": "lbn",
            "dim": self.dim,
            "hidden": list(self.hidden),
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean.tolist(),
            "y_scale": float(self.y_scale),
            "drift_params": {"shape": list(self.drift_params.shape), "data": _b64(self.drift_params)},
            "diff_params": {"shape": list(self.diff_params.shape), "data": _b64(self.diff_params)},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            dim=int(d["dim"]),
            hidden=tuple(d["hidden"]),
            x_mean=np.asarray(d["x_mean"], dtype=float),
            x_std=np.asarray(d["x_std"], dtype=float),
            y_mean=np.asarray(d["y_mean"], dtype=float),
            y_scale=float(d["y_scale"]),
            drift_params=_unb64(d["drift_params"]["data"], d["drift_params"]["shape"]),
            diff_params=_unb64(d["diff_params"]["data"], d["diff_params"]["shape"]),
            metadata=d.get("metadata", {}),
        )


def fit_lbn(pairs, config=None, seed=0):
    """Train the k-fold SWAG ensemble on Kramers-Moyal pairs."""
    config = config or TrainConfig()
    root = RngStream(seed)
    x, d = pairs.x, pairs.x.shape[1]
    x_mean = x.mean(axis=0)
    x_std = x.std(axis=0)
    if np.any(~(x_std > 0)):
        raise InputError("a state dimension is constant across all transitions")
    y_mean = pairs.y_F.mean(axis=0)
    y_scale = float(pairs.y_F.std()) or 1.0
    z = (x - x_mean) / x_std
    yF = (pairs.y_F - y_mean) / y_scale
    folds, split = fold_assignment(pairs.unit_ids, config.k, root.child(0))
    dnet, qnet = DriftNet(d, config.hidden), DiffNet(d, config.hidden)
    per_fold = config.n_ens // config.k
    drift_members, diff_members, fold_log = [], [], []
    for i in range(config.k):
        val = folds == i
        # a single fold has nothing to hold out; it monitors its own training loss
        tr = ~val if config.k > 1 else val
        if not tr.any() or not val.any():
            raise InsufficientDataError(f"fold {i} has no training or no validation pairs")
        frng = root.child(1, i)
        sF, infoF = train_fold(dnet, z[tr], yF[tr], z[val], yF[val], config, frng.child(0))
        sD, infoD = train_fold(qnet, z[tr], pairs.y_D[tr], z[val], pairs.y_D[val], config, frng.child(1))
        for j in range(per_fold):
            drift_members.append(swag_sample(sF, frng.child(2, j)))
            diff_members.append(swag_sample(sD, frng.child(3, j)))
        fold_log.append({"fold": i, "n_train": int(tr.sum()), "n_val": int(val.sum()), "drift": infoF, "diffusion": infoD})
        log.info("fold %d: drift val %.4g, diffusion val %.4g", i, infoF["final_val_loss"], infoD["final_val_loss"])
    meta = {
        "config": config.to_dict(),
        "seed": seed,
        "fold_split": split,
        "swa_rule": f"plateau: no val improvement > {config.min_rel_improvement:g} relative over {config.patience} epochs",
        "n_pairs": int(len(x)),
        "n_excluded_gap_pairs": int(pairs.n_excluded),
        "folds": fold_log,
    }
    return LbnEnsemble(d, tuple(config.hidden), x_mean, x_std, y_mean, y_scale,
                       np.array(drift_members), np.array(diff_members), meta)


@dataclass
class EnsemblePrediction:
    F_mean: np.ndarray
    F_std: np.ndarray
    D_mean: np.ndarray
    D_eigen_std: np.ndarray


def ensemble_predict(ens, x):
    """Ensemble mean and spread (population convention) of drift and diffusion."""
    F = ens.member_drift(x)
    Dm = ens.member_diffusion(x)
    lam, _ = jacobi_eigh(Dm)
    lam = -np.sort(-lam, axis=-1)
    return EnsemblePrediction(F.mean(axis=0), F.std(axis=0), Dm.mean(axis=0), lam.std(axis=0))


LOW_SIGNAL = 1e-6


def epistemic_from_members(F):
    """Normalized epistemic uncertainty from member drifts ``(N_ens, ..., d)``.

    Returns ``(sigma_epi, low_signal)``; ``low_signal`` marks points where
    the mean squared drift norm is below ``1e-6`` and the ratio is unstable.
    """
    F = np.asarray(F, dtype=float)
    norms = np.linalg.norm(F, axis=-1)
    m2 = np.mean(norms**2, axis=0)
    sd = norms.std(axis=0)
    low = m2 < LOW_SIGNAL
    out = np.where(m2 > 0, sd / np.sqrt(np.where(m2 > 0, m2, 1.0)), 0.0)
    return out, low


def epistemic_uncertainty(ens, x):
    return epistemic_from_members(ens.member_drift(x))
