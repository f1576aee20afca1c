"""Equation-learner forecaster: one hidden layer of symbolic activations.

The hidden pre-activation ``z = W1 @ lags + b1`` has ``d = u + 2v`` entries.
The first ``u`` pass through identity, sin and cos units (in that order);
the last ``2v`` are multiplied pairwise. A linear read-out maps the ``k = u + v``
hidden outputs to the forecast. With the division head the read-out has two
rows, a numerator and a denominator, combined by the guarded ratio
``h(a, b) = a / b if b > gamma else 0``.

Gradients are derived by hand and checked against finite differences in the
test-suite; training is full-batch Adam.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import expr as ex
from .series import LagDataset

VARIANTS = {
    "synf": dict(use_division_head=False, use_l1=False),
    "synf-reg": dict(use_division_head=False, use_l1=True),
    "synf-div": dict(use_division_head=True, use_l1=False),
    "synf-div-reg": dict(use_division_head=True, use_l1=True),
}


class TrainingError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class SynfConfig:
    p: int = 1
    n_identity: int = 4
    n_sin: int = 4
    n_cos: int = 4
    v: int = 4
    use_division_head: bool = False
    use_l1: bool = False
    lam: float = 1e-3
    epochs: int = 4000
    penalty_epoch_interval: int = 50
    learning_rate: float = 1e-3
    bound: float | str = "auto"
    gamma_test: float = 1e-4
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        counts = (self.p, self.n_identity, self.n_sin, self.n_cos, self.v)
        if self.p < 1 or min(counts) < 0:
            raise ValueError("lag count must be >= 1 and unit counts >= 0")
        if self.d < 1:
            raise ValueError("network needs at least one hidden unit")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.penalty_epoch_interval < 1:
            raise ValueError("penalty_epoch_interval must be >= 1")
        if self.bound != "auto" and not float(self.bound) > 0:
            raise ValueError("bound must be 'auto' or a positive number")

    @property
    def u(self) -> int:
        return self.n_identity + self.n_sin + self.n_cos

    @property
    def d(self) -> int:
        return self.u + 2 * self.v

    @property
    def k(self) -> int:
        return self.u + self.v

    @property
    def n_out(self) -> int:
        return 2 if self.use_division_head else 1

    @classmethod
    def for_variant(cls, name: str, **overrides) -> "SynfConfig":
        if name not in VARIANTS:
            raise ValueError(f"unknown SyNF variant {name!r}; choose from {sorted(VARIANTS)}")
        return cls(**{**VARIANTS[name], **overrides})


@dataclass(frozen=True)
class SynfModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    config: SynfConfig
    bound: float | None = None

    def __post_init__(self):
        c = self.config
        shapes = {"W1": (c.d, c.p), "b1": (c.d,), "W2": (c.n_out, c.k), "b2": (c.n_out,)}
        for name, shape in shapes.items():
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1.copy(), "b1": self.b1.copy(), "W2": self.W2.copy(), "b2": self.b2.copy()}

    def with_params(self, params: dict) -> "SynfModel":
        return replace(self, **params)


@dataclass
class TrainTrace:
    mse: np.ndarray
    l1: np.ndarray
    p_gamma: np.ndarray
    p_bound: np.ndarray  # NaN outside penalty epochs
    gamma: np.ndarray

    def __len__(self):
        return self.mse.size


def gamma_schedule(epoch: int, evaluation: bool = False, gamma_test: float = 1e-4) -> float:
    """Division threshold: ``1/sqrt(epoch+1)`` while training, ``gamma_test`` otherwise."""
    if evaluation:
        return gamma_test
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return 1.0 / math.sqrt(epoch + 1.0)


def init_model(config: SynfConfig, rng: np.random.Generator | None = None, bound: float | None = None) -> SynfModel:
    """Weights ~ Normal(0, 1/sqrt(fan_in)), zero biases."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    W1 = rng.normal(0.0, 1.0 / math.sqrt(config.p), size=(config.d, config.p))
    W2 = rng.normal(0.0, 1.0 / math.sqrt(config.k), size=(config.n_out, config.k))
    return SynfModel(W1, np.zeros(config.d), W2, np.zeros(config.n_out), config, bound)


def _hidden(params, config, X):
    Z = X @ params["W1"].T + params["b1"]
    u0, u1, u = config.n_identity, config.n_identity + config.n_sin, config.u
    H = np.empty((X.shape[0], config.k))
    H[:, :u0] = Z[:, :u0]
    H[:, u0:u1] = np.sin(Z[:, u0:u1])
    H[:, u1:u] = np.cos(Z[:, u1:u])
    H[:, u:] = Z[:, u::2] * Z[:, u + 1 :: 2]
    return Z, H


def _output(params, config, X, gamma):
    Z, H = _hidden(params, config, X)
    Z2 = H @ params["W2"].T + params["b2"]
    if not config.use_division_head:
        return Z2[:, 0], (Z, H, Z2, None)
    num, den = Z2[:, 0], Z2[:, 1]
    active = den > gamma
    safe_den = np.where(active, den, 1.0)
    yhat = np.where(active, num / safe_den, 0.0)
    return yhat, (Z, H, Z2, active)


def predict(model: SynfModel, X, gamma: float | None = None) -> np.ndarray:
    """Batch forecasts for lag matrix ``X``; ``gamma`` defaults to the evaluation threshold."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.config.p:
        raise ValueError(f"expected {model.config.p} lags, got {X.shape[1]}")
    gamma = model.config.gamma_test if gamma is None else gamma
    return _output(model.params(), model.config, X, gamma)[0]


def forward(model: SynfModel, lags, gamma: float | None = None) -> float:
    lags = np.asarray(lags, dtype=float).reshape(-1)
    if lags.size != model.config.p:
        raise ValueError(f"expected {model.config.p} lags, got {lags.size}")
    return float(predict(model, lags[None, :], gamma)[0])


def is_penalty_epoch(config: SynfConfig, epoch: int) -> bool:
    return config.use_division_head and epoch % config.penalty_epoch_interval == 0


def loss_and_grad(params, config: SynfConfig, X, y, gamma: float, penalty_epoch: bool, bound: float | None):
    """Total training loss, its parts and the analytic gradient w.r.t. ``params``.

    ``total = MSE [+ lam * (|W1|_1 + |W2|_1)] [+ P_gamma] [+ P_bound]`` with
    ``P_gamma = sum max(gamma - den, 0)`` and
    ``P_bound = sum max(yhat - B, 0) + max(-yhat - B, 0)``.
    Sub-gradients at kinks are taken as 0.
    """
    n = y.size
    yhat, (Z, H, Z2, active) = _output(params, config, X, gamma)
    resid = yhat - y
    mse = float(np.mean(resid**2))
    parts = {"mse": mse, "l1": 0.0, "p_gamma": 0.0, "p_bound": math.nan}
    total = mse
    g_yhat = 2.0 * resid / n

    if penalty_epoch:
        if bound is None:
            raise ValueError("penalty epochs need a resolved output bound")
        over = np.maximum(yhat - bound, 0.0) + np.maximum(-yhat - bound, 0.0)
        parts["p_bound"] = float(over.sum())
        total += parts["p_bound"]
        g_yhat = g_yhat + (yhat > bound) - (yhat < -bound)

    g_Z2 = np.zeros_like(Z2)
    if config.use_division_head:
        num, den = Z2[:, 0], Z2[:, 1]
        safe_den = np.where(active, den, 1.0)
        g_Z2[:, 0] = np.where(active, g_yhat / safe_den, 0.0)
        g_Z2[:, 1] = np.where(active, -g_yhat * num / safe_den**2, 0.0)
        short = gamma - den
        parts["p_gamma"] = float(np.maximum(short, 0.0).sum())
        total += parts["p_gamma"]
        g_Z2[:, 1] -= short > 0
    else:
        g_Z2[:, 0] = g_yhat

    grads = {"W2": g_Z2.T @ H, "b2": g_Z2.sum(axis=0)}
    g_H = g_Z2 @ params["W2"]
    u0, u1, u = config.n_identity, config.n_identity + config.n_sin, config.u
    g_Z = np.empty_like(Z)
    g_Z[:, :u0] = g_H[:, :u0]
    g_Z[:, u0:u1] = g_H[:, u0:u1] * np.cos(Z[:, u0:u1])
    g_Z[:, u1:u] = -g_H[:, u1:u] * np.sin(Z[:, u1:u])
    g_Z[:, u::2] = g_H[:, u:] * Z[:, u + 1 :: 2]
    g_Z[:, u + 1 :: 2] = g_H[:, u:] * Z[:, u::2]
    grads["W1"] = g_Z.T @ X
    grads["b1"] = g_Z.sum(axis=0)

    if config.use_l1 and config.lam > 0:
        parts["l1"] = config.lam * float(np.abs(params["W1"]).sum() + np.abs(params["W2"]).sum())
        total += parts["l1"]
        grads["W1"] = grads["W1"] + config.lam * np.sign(params["W1"])
        grads["W2"] = grads["W2"] + config.lam * np.sign(params["W2"])
    return total, parts, grads


def loss(model: SynfModel, dataset: LagDataset, epoch: int, gamma: float | None = None):
    """Training loss at ``epoch`` (gamma from the curriculum unless given)."""
    if dataset.lag_count != model.config.p:
        raise ValueError("dataset lag count does not match the model")
    gamma = gamma_schedule(epoch) if gamma is None else gamma
    total, parts, _ = loss_and_grad(
        model.params(), model.config, dataset.inputs, dataset.targets, gamma,
        is_penalty_epoch(model.config, epoch), model.bound,
    )
    parts["gamma"] = gamma
    return total, parts


def resolve_bound(config: SynfConfig, targets) -> float:
    if config.bound == "auto":
        return 2.0 * float(np.max(np.abs(targets)))
    return float(config.bound)


def fit(config: SynfConfig, train: LagDataset) -> tuple[SynfModel, TrainTrace]:
    if len(train) == 0:
        raise ValueError("empty training set")
    if train.lag_count != config.p:
        raise ValueError(f"dataset has {train.lag_count} lags, config expects {config.p}")
    X, y = train.inputs, train.targets
    bound = resolve_bound(config, y)
    params = init_model(config, np.random.default_rng(config.seed), bound).params()
    m = {key: np.zeros_like(val) for key, val in params.items()}
    s = {key: np.zeros_like(val) for key, val in params.items()}
    beta1, beta2 = config.betas
    lr, eps = config.learning_rate, 1e-8
    cols = {key: np.empty(config.epochs) for key in ("mse", "l1", "p_gamma", "p_bound", "gamma")}

    for epoch in range(config.epochs):
        gamma = gamma_schedule(epoch)
        total, parts, grads = loss_and_grad(
            params, config, X, y, gamma, is_penalty_epoch(config, epoch), bound
        )
        if not math.isfinite(total):
            raise TrainingError(epoch)
        for key in ("mse", "l1", "p_gamma", "p_bound"):
            cols[key][epoch] = parts[key]
        cols["gamma"][epoch] = gamma
        t = epoch + 1
        for key, g in grads.items():
            m[key] = beta1 * m[key] + (1 - beta1) * g
            s[key] = beta2 * s[key] + (1 - beta2) * g * g
            m_hat = m[key] / (1 - beta1**t)
            s_hat = s[key] / (1 - beta2**t)
            params[key] = params[key] - lr * m_hat / (np.sqrt(s_hat) + eps)

    model = SynfModel(**params, config=config, bound=bound)
    return model, TrainTrace(**cols)


# -- equation extraction ---------------------------------------------------


def _keep(c: float, prune_below: float) -> bool:
    return c != 0.0 and abs(c) >= prune_below


def _affine(weights, bias, prune_below):
    """Expression for ``sum_j w_j * y[t-j-1] + bias`` with small terms dropped."""
    terms = [(float(w), ex.Lag(j + 1)) for j, w in enumerate(weights) if _keep(w, prune_below)]
    return _sum(float(bias) if _keep(bias, prune_below) else 0.0, terms)


def _sum(constant: float, terms) -> ex.Node:
    """``constant + sum(coef * factor)``, writing negative coefficients as subtraction."""
    acc = ex.Const(constant) if constant != 0.0 or not terms else None
    for coef, factor in terms:
        if acc is None:
            acc = factor if coef == 1.0 else ex.mul(ex.Const(coef), factor)
            continue
        mag = abs(coef)
        term = factor if mag == 1.0 else ex.mul(ex.Const(mag), factor)
        acc = ex.sub(acc, term) if coef < 0 else ex.add(acc, term)
    return acc


def _output_expression(model: SynfModel, row: int, prune_below: float, expand: bool) -> ex.Node:
    c = model.config
    W1, b1, w, b2 = model.W1, model.b1, model.W2[row], float(model.b2[row])
    p = c.p
    const = b2
    linear = np.zeros(p)
    quad = np.zeros((p, p))
    other = []

    for i in range(c.n_identity):
        const += w[i] * b1[i]
        linear += w[i] * W1[i]
    for i in range(c.n_identity, c.u):
        fn = "sin" if i < c.n_identity + c.n_sin else "cos"
        if _keep(w[i], prune_below):
            other.append((float(w[i]), ex.Unary(fn, _affine(W1[i], b1[i], prune_below))))
    for j in range(c.v):
        a, b = c.u + 2 * j, c.u + 2 * j + 1
        wj = w[c.u + j]
        if expand:
            const += wj * b1[a] * b1[b]
            linear += wj * (W1[a] * b1[b] + W1[b] * b1[a])
            quad += wj * np.outer(W1[a], W1[b])
        elif _keep(wj, prune_below):
            prod = ex.mul(_affine(W1[a], b1[a], prune_below), _affine(W1[b], b1[b], prune_below))
            other.append((float(wj), prod))

    terms = [(float(linear[j]), ex.Lag(j + 1)) for j in range(p)]
    for j in range(p):
        for l in range(j, p):
            coef = quad[j, l] + (quad[l, j] if l != j else 0.0)
            terms.append((float(coef), ex.mul(ex.Lag(j + 1), ex.Lag(l + 1))))
    terms = [(coef, f) for coef, f in terms if _keep(coef, prune_below)] + other
    return _sum(float(const) if _keep(const, prune_below) else 0.0, terms)


def extract_equation(model: SynfModel, precision: int | None = None, prune_below: float = 1e-5) -> ex.Node:
    """Closed-form expression equivalent to the network's output.

    Product units are expanded into quadratic monomials when ``p <= 4`` and
    kept as products of affine forms otherwise. Terms with coefficient
    magnitude below ``prune_below`` are dropped at every level; with
    ``prune_below=0`` the expression reproduces :func:`forward` (on the
    division head, wherever the denominator exceeds the threshold).
    ``precision`` optionally rounds every constant to that many decimals.
    """
    expand = model.config.p <= 4
    tree = _output_expression(model, 0, prune_below, expand)
    if model.config.use_division_head:
        tree = ex.div(tree, _output_expression(model, 1, prune_below, expand))
    if precision is not None:
        tree = ex.with_constants(tree, [round(v, precision) for v in ex.constants(tree)])
    return tree


# -- checkpoints -----------------------------------------------------------


def save_model(model: SynfModel, path) -> None:
    """JSON checkpoint; floats are written with ``repr`` precision so loading is exact."""
    cfg = asdict(model.config)
    cfg["betas"] = list(cfg["betas"])
    doc = {
        "format": "synf-checkpoint/1",
        "config": cfg,
        "bound": model.bound,
        "weights": {key: val.tolist() for key, val in model.params().items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_model(path) -> SynfModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "synf-checkpoint/1":
        raise ValueError(f"{path}: not a SyNF checkpoint")
    cfg = dict(doc["config"])
    cfg["betas"] = tuple(cfg["betas"])
    config = SynfConfig(**cfg)
    shapes = {"W1": (config.d, config.p), "b1": (config.d,), "W2": (config.n_out, config.k), "b2": (config.n_out,)}
    weights = {key: np.array(doc["weights"][key], dtype=float).reshape(shape) for key, shape in shapes.items()}
    return SynfModel(**weights, config=config, bound=doc["bound"])
