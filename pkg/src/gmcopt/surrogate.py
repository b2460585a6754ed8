"""Six small sigmoid MLPs predicting the Cholesky factor of the homogenized tensor.

Each network maps the normalized cell Jacobian entries (and the cell fraction in the
variable-cell mode) to one entry of L; ``C = E L L^T``. Training is full-batch
Levenberg-Marquardt on the squared error.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.linalg.blas import dsyrk, ssyrk
from scipy.linalg.lapack import dpotrf, dpotrs

from . import __version__
from .dataset import L_NAMES, Dataset, holdout_split, vector_to_L

HIDDEN_WIDTHS = {
    "L11": (32, 24, 9),
    "L21": (32, 24, 9),
    "L31": (30, 30),
    "L22": (20, 20),
    "L32": (32, 24, 9),
    "L33": (30, 20, 15),
}
ACCEPT_NRMSE = 0.005
DJ_DEFAULT = 1e-4
DZETA_DEFAULT = 1e-3


class SurrogateError(RuntimeError):
    pass


class TrainingFailure(SurrogateError):
    def __init__(self, nrmse: dict, model=None):
        table = ", ".join(f"{k}={v:.4%}" for k, v in nrmse.items())
        super().__init__(f"validation RMSE above acceptance: {table}")
        self.nrmse = nrmse
        self.model = model


class ModeError(SurrogateError):
    """Operation not available for this model's input mode."""


class NearSingularError(SurrogateError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    n_in: int
    hidden: tuple

    def __post_init__(self):
        if not 1 <= len(self.hidden) <= 3 or any(w < 1 for w in self.hidden):
            raise ValueError("between one and three hidden layers of positive width")

    @property
    def sizes(self):
        return (self.n_in, *self.hidden, 1)

    @property
    def n_params(self):
        s = self.sizes
        return sum(s[i + 1] * (s[i] + 1) for i in range(len(s) - 1))


def _unpack(spec: MlpSpec, w):
    layers, k = [], 0
    s = spec.sizes
    for i in range(len(s) - 1):
        n_out, n_in = s[i + 1], s[i]
        W = w[k : k + n_out * n_in].reshape(n_out, n_in)
        k += n_out * n_in
        b = w[k : k + n_out]
        k += n_out
        layers.append((W, b))
    return layers


def _sigmoid(z):
    # in place: z is always a fresh pre-activation array
    z *= 0.5
    np.tanh(z, out=z)
    z += 1.0
    z *= 0.5
    return z


def _forward(spec, w, X):
    """Activations of every layer; the last entry is the (N,) output."""
    acts = [X]
    layers = _unpack(spec, w)
    for W, b in layers[:-1]:
        z = acts[-1] @ W.T
        z += b
        acts.append(_sigmoid(z))
    W, b = layers[-1]
    acts.append(acts[-1] @ W[0] + b[0])
    return acts


def _param_jacobian(spec, w, acts):
    """d output / d parameters for every sample, shape (N, n_params)."""
    N = acts[0].shape[0]
    layers = _unpack(spec, w)
    out = np.empty((N, spec.n_params))
    offs = np.cumsum([0] + [W.size + b.size for W, b in layers])
    delta = np.ones((N, 1))
    for l in range(len(layers) - 1, -1, -1):
        W, b = layers[l]
        a_prev = acts[l]
        k = offs[l]
        out[:, k : k + W.size] = (delta[:, :, None] * a_prev[:, None, :]).reshape(N, -1)
        out[:, k + W.size : k + W.size + b.size] = delta
        if l > 0:
            delta = (delta @ W) * a_prev * (1.0 - a_prev)
    return out


def _init_weights(spec, rng):
    parts = []
    s = spec.sizes
    for i in range(len(s) - 1):
        lim = np.sqrt(6.0 / (s[i] + s[i + 1]))
        parts.append(rng.uniform(-lim, lim, s[i + 1] * s[i]))
        parts.append(np.zeros(s[i + 1]))
    return np.concatenate(parts)


@dataclass
class TrainLog:
    iterations: int = 0
    best_iteration: int = 0
    train_rmse: float = np.inf
    val_rmse: float = np.inf
    final_mu: float = 0.0
    history: list = field(default_factory=list)


def train_network(spec: MlpSpec, X, y, Xv, yv, seed=0, max_iter=1000, patience=50, mu0=0.01, mu_max=1e10, single_gram=True):
    """Levenberg-Marquardt on one network; returns (best-validation weights, TrainLog).

    Damping ``mu`` is divided by 10 after an accepted step and multiplied by 10 after a
    rejected one; inputs and targets are expected to be normalized already.
    ``single_gram`` forms ``J^T J`` in single precision (about twice as fast); the
    gradient and the accept test stay in double precision.
    """
    rng = np.random.default_rng(seed)
    w = _init_weights(spec, rng)
    mu = mu0
    acts = _forward(spec, w, X)
    e = acts[-1] - y
    sse = float(e @ e)
    best_w, best_val = w.copy(), np.inf
    log = TrainLog()
    since_best = 0
    for it in range(1, max_iter + 1):
        Jm = _param_jacobian(spec, w, acts)
        # Jm.T is Fortran-contiguous, so this is J^T J without a copy
        if single_gram:
            A = ssyrk(1.0, Jm.T.astype(np.float32, order="F"), trans=0, lower=0).astype(np.float64)
        else:
            A = dsyrk(1.0, Jm.T, trans=0, lower=0)
        g = Jm.T @ e
        diag = A.diagonal().copy()
        accepted = False
        while mu <= mu_max:
            Am = A.copy(order="F")
            Am.flat[:: len(w) + 1] = diag + mu
            c, info = dpotrf(Am, lower=0, overwrite_a=1, clean=0)
            if info != 0:
                mu *= 10.0
                continue
            step, _ = dpotrs(c, -g, lower=0)
            w_try = w + step
            acts_try = _forward(spec, w_try, X)
            e_try = acts_try[-1] - y
            sse_try = float(e_try @ e_try)
            if sse_try < sse:
                w, acts, e, sse = w_try, acts_try, e_try, sse_try
                mu = max(mu / 10.0, 1e-20)
                accepted = True
                break
            mu *= 10.0
        val = float(np.sqrt(np.mean((_forward(spec, w, Xv)[-1] - yv) ** 2)))
        log.history.append((float(np.sqrt(sse / len(y))), val))
        log.iterations = it
        if val < best_val:
            best_val, best_w, log.best_iteration = val, w.copy(), it
            since_best = 0
        else:
            since_best += 1
        if not accepted or since_best >= patience or sse == 0.0:
            break
    log.train_rmse = float(np.sqrt(sse / len(y)))
    log.val_rmse = best_val
    log.final_mu = mu
    return best_w, log


class Prediction(NamedTuple):
    L: np.ndarray
    out_of_domain: np.ndarray


@dataclass
class TrainedModel:
    """Six trained networks with their normalization and training metadata."""

    specs: dict
    weights: dict
    x_lo: np.ndarray
    x_hi: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray
    mode: str = "fixed"
    fraction: float | None = 0.3
    E: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def variable(self):
        return self.mode == "variable"

    @property
    def n_in(self):
        return 5 if self.variable else 4

    def _inputs(self, Jp, zeta):
        Jp = np.asarray(Jp, dtype=float)
        X = Jp.reshape(-1, 4)
        if self.variable:
            if zeta is None:
                raise ModeError("variable-cell model needs a cell fraction")
            z = np.broadcast_to(np.asarray(zeta, dtype=float), Jp.shape[:-2]).reshape(-1, 1)
            X = np.column_stack([X, z])
        return X, Jp.shape[:-2]

    def predict(self, Jp, zeta=None) -> Prediction:
        return predict_L(self, Jp, zeta)

    def tensor(self, Jp, zeta=None):
        """Homogenized tensor ``E L L^T`` (no positive-definiteness check)."""
        L = predict_L(self, Jp, zeta).L
        return self.E * L @ np.swapaxes(L, -1, -2)

    def dC_dJ(self, Jp, zeta=None, step=DJ_DEFAULT):
        return dC_dJ(self, Jp, zeta, step)

    def dC_dzeta(self, Jp, zeta, step=DZETA_DEFAULT):
        return dC_dzeta(self, Jp, zeta, step)

    def to_json(self) -> str:
        doc = {
            "format": "gmcopt-surrogate",
            "version": __version__,
            "mode": self.mode,
            "fraction": self.fraction,
            "E": self.E,
            "normalization": {
                "x_lo": self.x_lo.tolist(),
                "x_hi": self.x_hi.tolist(),
                "y_lo": self.y_lo.tolist(),
                "y_hi": self.y_hi.tolist(),
            },
            "networks": {
                k: {"n_in": self.specs[k].n_in, "hidden": list(self.specs[k].hidden), "weights": self.weights[k].tolist()}
                for k in L_NAMES
            },
            "meta": self.meta,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json())


def load_model(path) -> TrainedModel:
    doc = json.loads(Path(path).read_text())
    norm = doc.get("normalization")
    if not norm or any(k not in norm for k in ("x_lo", "x_hi", "y_lo", "y_hi")):
        raise SurrogateError("model file has no normalization parameters")
    nets = doc["networks"]
    specs = {k: MlpSpec(nets[k]["n_in"], tuple(nets[k]["hidden"])) for k in L_NAMES}
    weights = {k: np.array(nets[k]["weights"], dtype=float) for k in L_NAMES}
    for k in L_NAMES:
        if weights[k].shape != (specs[k].n_params,):
            raise SurrogateError(f"network {k}: weight count does not match its layer widths")
    return TrainedModel(
        specs=specs,
        weights=weights,
        x_lo=np.array(norm["x_lo"]),
        x_hi=np.array(norm["x_hi"]),
        y_lo=np.array(norm["y_lo"]),
        y_hi=np.array(norm["y_hi"]),
        mode=doc["mode"],
        fraction=doc.get("fraction"),
        E=doc.get("E", 1.0),
        meta=doc.get("meta", {}),
    )


def _scale(lo, hi):
    span = hi - lo
    return np.where(span > 0, span, 1.0)


def _to_unit(v, lo, hi):
    return 2.0 * (v - lo) / _scale(lo, hi) - 1.0


def _from_unit(u, lo, hi):
    # a zero-width range decodes to its constant whatever the network outputs
    return lo + 0.5 * (u + 1.0) * (hi - lo)


def nrmse(pred, target, lo, hi):
    """RMSE divided by the target's range over the training set."""
    span = hi - lo
    denom = span if span > 0 else max(abs(lo), 1.0)
    return float(np.sqrt(np.mean((pred - target) ** 2)) / denom)


def train(dataset: Dataset, seed: int = 0, accept: float | None = ACCEPT_NRMSE, n_val: int | None = None, max_iter: int = 1000, patience: int = 50, hidden=None, progress=None) -> TrainedModel:
    """Train the six networks on a dataset with a deterministic holdout split.

    Raises ``TrainingFailure`` (carrying the model) when any network's validation
    normalized RMSE exceeds ``accept``.
    """
    if len(dataset) < 8:
        raise SurrogateError("dataset too small to split")
    tr, va = holdout_split(len(dataset), n_val, seed)
    X, Y = dataset.inputs, dataset.targets
    x_lo, x_hi = X[tr].min(axis=0), X[tr].max(axis=0)
    y_lo, y_hi = Y[tr].min(axis=0), Y[tr].max(axis=0)
    # ranges at roundoff level (e.g. off-diagonal zeros of an isotropic cell) are constants
    flat = (y_hi - y_lo) <= 1e-9 * np.abs(Y[tr]).max()
    y_lo[flat] = y_hi[flat] = 0.5 * (y_lo[flat] + y_hi[flat])
    Xn = _to_unit(X, x_lo, x_hi)
    Yn = _to_unit(Y, y_lo, y_hi)
    hidden = hidden or HIDDEN_WIDTHS
    seeds = np.random.SeedSequence(seed).generate_state(len(L_NAMES))
    specs, weights, logs = {}, {}, {}
    for k, name in enumerate(L_NAMES):
        spec = MlpSpec(X.shape[1], tuple(hidden[name]))
        t0 = time.perf_counter()
        w, log = train_network(spec, Xn[tr], Yn[tr, k], Xn[va], Yn[va, k], seed=int(seeds[k]), max_iter=max_iter, patience=patience)
        specs[name], weights[name] = spec, w
        logs[name] = (log, time.perf_counter() - t0)
        if progress:
            progress(name, log)
    model = TrainedModel(
        specs=specs,
        weights=weights,
        x_lo=x_lo,
        x_hi=x_hi,
        y_lo=y_lo,
        y_hi=y_hi,
        mode="variable" if dataset.variable else "fixed",
        fraction=dataset.header.get("fraction"),
        E=float(dataset.header.get("E", 1.0)),
    )
    holdout = holdout_scores(model, dataset, va)
    scores = {name: s["nrmse"] for name, s in holdout.items()}
    model.meta = {
        "seed": seed,
        "n_train": int(len(tr)),
        "n_val": int(len(va)),
        "dataset": {k: dataset.header.get(k) for k in ("mode", "fraction", "resolution", "seed", "count", "nu", "rho_void", "indicator")},
        "networks": {
            name: {
                "val_nrmse": scores[name],
                "iterations": logs[name][0].iterations,
                "best_iteration": logs[name][0].best_iteration,
                "train_rmse_normalized": logs[name][0].train_rmse,
                "wall_time_s": logs[name][1],
                "val_slope": holdout[name]["slope"],
                "val_r2": holdout[name]["r2"],
            }
            for name in L_NAMES
        },
        "accept_nrmse": accept,
    }
    if accept is not None and any(v > accept for v in scores.values()):
        raise TrainingFailure(scores, model)
    return model


def holdout_scores(model: TrainedModel, dataset: Dataset, idx=None) -> dict:
    """Per-network normalized RMSE, least-squares slope and R^2 of prediction against target.

    ``idx`` defaults to the validation rows of the split recorded in the model meta.
    """
    from .dataset import L_to_vector

    if idx is None:
        idx = holdout_split(len(dataset), model.meta["n_val"], model.meta["seed"])[1]
    X, Y = dataset.inputs[idx], dataset.targets[idx]
    pv = L_to_vector(predict_L(model, _inputs_as_jp(X), X[:, 4] if model.variable else None).L)
    out = {}
    for k, name in enumerate(L_NAMES):
        t, q = Y[:, k], pv[:, k]
        var = np.var(t)
        # constant targets (decoded exactly) have no regression line
        if model.y_hi[k] == model.y_lo[k] or var == 0.0 or np.var(q) == 0.0:
            slope = r2 = None
        else:
            slope = float(np.cov(t, q, bias=True)[0, 1] / var)
            r2 = float(np.corrcoef(t, q)[0, 1] ** 2)
        out[name] = {"nrmse": nrmse(q, t, model.y_lo[k], model.y_hi[k]), "slope": slope, "r2": r2}
    return out


def _inputs_as_jp(X):
    return X[:, :4].reshape(-1, 2, 2)


def predict_L(model: TrainedModel, Jp, zeta=None) -> Prediction:
    """Evaluate the six networks; flags inputs outside the training box."""
    if model.x_lo is None or model.y_lo is None:
        raise SurrogateError("model has no normalization parameters")
    X, shape = model._inputs(Jp, zeta)
    tol = 1e-9 * _scale(model.x_lo, model.x_hi)
    ood = np.any((X < model.x_lo - tol) | (X > model.x_hi + tol), axis=1)
    Xn = _to_unit(X, model.x_lo, model.x_hi)
    out = np.empty((len(X), len(L_NAMES)))
    for k, name in enumerate(L_NAMES):
        yn = _forward(model.specs[name], model.weights[name], Xn)[-1]
        out[:, k] = _from_unit(yn, model.y_lo[k], model.y_hi[k])
    return Prediction(vector_to_L(out).reshape(shape + (3, 3)), ood.reshape(shape))


def reconstruct_C(L, E=1.0, rtol=1e-12):
    """``C = E L L^T``; raises NearSingularError if any tensor is numerically singular."""
    L = np.asarray(L, dtype=float)
    C = E * L @ np.swapaxes(L, -1, -2)
    ev = np.linalg.eigvalsh(C)
    scale = np.linalg.norm(C, axis=(-2, -1))
    if np.any(ev[..., 0] <= rtol * scale):
        raise NearSingularError(f"reconstructed tensor near singular (min eigenvalue {ev[..., 0].min():.3e})")
    return C


def dC_dJ(model, Jp, zeta=None, step=DJ_DEFAULT):
    """Central differences of the tensor w.r.t. each J' entry; shape (..., 2, 2, 3, 3).

    Perturbed Jacobians are not re-normalized to unit determinant.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    Jp = np.asarray(Jp, dtype=float)
    shape = Jp.shape[:-2]
    E = np.zeros((2, 2, 2, 2))
    for p in range(2):
        for q in range(2):
            E[p, q, p, q] = step
    Jpl = Jp[..., None, None, :, :] + E
    Jmi = Jp[..., None, None, :, :] - E
    z = None if zeta is None else np.broadcast_to(np.asarray(zeta, float)[..., None, None], shape + (2, 2))
    return (model.tensor(Jpl, z) - model.tensor(Jmi, z)) / (2.0 * step)


def dC_dzeta(model, Jp, zeta, step=DZETA_DEFAULT):
    """Central difference of the tensor w.r.t. the cell fraction; shape (..., 3, 3)."""
    if not getattr(model, "variable", False):
        raise ModeError("fixed-cell model has no fraction input")
    z = np.asarray(zeta, dtype=float)
    return (model.tensor(Jp, z + step) - model.tensor(Jp, z - step)) / (2.0 * step)


class DirectModel:
    """Same interface as TrainedModel, but every tensor comes from a cell solve."""

    def __init__(self, fraction=0.3, r=64, variable=False, E=1.0, indicator="smooth", material=None):
        from .cell import Material

        self.fraction = fraction
        self.r = r
        self.mode = "variable" if variable else "fixed"
        self.E = E
        self.indicator = indicator
        self.material = material or Material()

    @property
    def variable(self):
        return self.mode == "variable"

    def tensor(self, Jp, zeta=None):
        from .cell import build_cell_mesh, cell_mesh_for, homogenized_moduli, solve_correctors
        from .geometry import MicroCellSpec, width_lookup

        Jp = np.asarray(Jp, dtype=float)
        shape = Jp.shape[:-2]
        flat = Jp.reshape(-1, 2, 2)
        if self.variable:
            zs = np.broadcast_to(np.asarray(zeta, float), shape).ravel()
        out = np.empty((len(flat), 3, 3))
        for i, J in enumerate(flat):
            if self.variable:
                spec = MicroCellSpec(fraction=float(zs[i]), width=float(width_lookup(zs[i])))
                mesh = build_cell_mesh(spec, self.r, self.indicator)
            else:
                mesh = cell_mesh_for(self.fraction, self.r, self.indicator)
            xi = solve_correctors(mesh, J, self.material)
            out[i] = homogenized_moduli(mesh, J, xi, self.material, check_pd=False).C
        return (self.E / self.material.E) * out.reshape(shape + (3, 3))

    def dC_dJ(self, Jp, zeta=None, step=DJ_DEFAULT):
        return dC_dJ(self, Jp, zeta, step)

    def dC_dzeta(self, Jp, zeta, step=DZETA_DEFAULT):
        return dC_dzeta(self, Jp, zeta, step)
