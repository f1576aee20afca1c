"""Registry of fitted forecasters behind one ``predict(lag_matrix)`` interface.

Every forecaster maps rows of lagged observations (most recent first) to
one-step-ahead forecasts on the original scale of the series. Models that
were trained on z-scored data undo the scaling internally, and their
exported equations are rewritten in original units with the rescaling
folded into the coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import expr as ex
from . import synf, sytf
from .series import Scaler, make_lags

SYNF_MODELS = tuple(synf.VARIANTS)
SYTF_MODELS = ("sytf", "sytf-div-exp")
MODEL_NAMES = SYNF_MODELS + SYTF_MODELS + ("persistence",)


class Forecaster:
    name: str
    lag_count: int

    def predict(self, X) -> np.ndarray:
        raise NotImplementedError

    def equation(self, precision: int = 3) -> str | None:
        return None


@dataclass
class Persistence(Forecaster):
    """Naive reference: the forecast is the last observed value."""

    lag_count: int = 1
    name: str = "persistence"

    def predict(self, X):
        return np.atleast_2d(np.asarray(X, dtype=float))[:, 0].copy()

    def equation(self, precision=3):
        return "y[t-1]"


def _unscaled_tree(tree: ex.Node, scaler: Scaler | None) -> ex.Node:
    """Rewrite a tree fitted on z-scored lags/targets in original units."""
    if scaler is None:
        return ex.collect_terms(tree)
    m, s = ex.Const(scaler.mean), ex.Const(scaler.std)

    def sub_lags(node):
        if isinstance(node, ex.Lag):
            return ex.div(ex.sub(node, m), s)
        if isinstance(node, ex.Unary):
            return ex.Unary(node.op, sub_lags(node.child))
        if isinstance(node, ex.Binary):
            return ex.Binary(node.op, sub_lags(node.left), sub_lags(node.right))
        return node

    return ex.collect_terms(ex.add(ex.mul(s, sub_lags(tree)), m))


@dataclass
class SynfForecaster(Forecaster):
    model: synf.SynfModel
    name: str
    scaler: Scaler | None = None
    prune_below: float = 1e-5

    @property
    def lag_count(self):
        return self.model.config.p

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.scaler is None:
            return synf.predict(self.model, X)
        return self.scaler.inverse(synf.predict(self.model, self.scaler.transform(X)))

    def tree(self) -> ex.Node:
        return _unscaled_tree(synf.extract_equation(self.model, prune_below=self.prune_below), self.scaler)

    def equation(self, precision=3):
        return ex.render(self.tree(), precision)


@dataclass
class SytfForecaster(Forecaster):
    selected: sytf.Individual
    front: sytf.ParetoFront
    name: str
    lag_count: int
    scaler: Scaler | None = None

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.scaler is None:
            return ex.evaluate_batch(self.selected.tree, X)
        return self.scaler.inverse(ex.evaluate_batch(self.selected.tree, self.scaler.transform(X)))

    def tree(self) -> ex.Node:
        return _unscaled_tree(self.selected.tree, self.scaler)

    def equation(self, precision=3):
        return ex.render(self.tree(), precision)

    def front_report(self, precision: int = 3) -> str:
        """Every Pareto member as ``complexity  train_loss  equation``; ``*`` marks the selected one."""
        scale = "z-scored" if self.scaler else "raw"
        lines = [f"# {self.name} Pareto front, train MSE on {scale} values", "# complexity\ttrain_mse\tequation"]
        for m in self.front.members():
            mark = " *" if m == self.selected else ""
            eq = ex.render(_unscaled_tree(m.tree, self.scaler), precision)
            lines.append(f"{m.complexity}\t{m.pred_loss:.6g}\t{eq}{mark}")
        return "\n".join(lines) + "\n"


def _split_overrides(cls, overrides: dict) -> tuple[dict, dict]:
    names = {f.name for f in fields(cls)}
    mine = {k: v for k, v in overrides.items() if k in names}
    rest = {k: v for k, v in overrides.items() if k not in names}
    return mine, rest


def fit_forecaster(name: str, train_values, p: int, seed: int = 0, scale: bool = False, **overrides) -> Forecaster:
    """Fit the named model on a training segment.

    ``overrides`` are forwarded to :class:`synf.SynfConfig` or
    :class:`sytf.EvolutionConfig`; SyTF additionally accepts ``selection``
    (``"parsimonious"``, ``"best_loss"`` or ``"knee"``).
    """
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    train_values = np.asarray(train_values, dtype=float)
    if name == "persistence":
        return Persistence(lag_count=p)
    scaler = Scaler.fit(train_values) if scale else None
    values = scaler.transform(train_values) if scaler else train_values
    data = make_lags(values, p)

    if name in SYNF_MODELS:
        cfg_kw, rest = _split_overrides(synf.SynfConfig, overrides)
        prune = rest.pop("prune_below", 1e-5)
        if rest:
            raise ValueError(f"unknown {name} options: {sorted(rest)}")
        config = synf.SynfConfig.for_variant(name, p=p, seed=seed, **cfg_kw)
        model, _ = synf.fit(config, data)
        return SynfForecaster(model, name, scaler, prune)

    cfg_kw, rest = _split_overrides(sytf.EvolutionConfig, overrides)
    selection = rest.pop("selection", "parsimonious")
    if rest:
        raise ValueError(f"unknown {name} options: {sorted(rest)}")
    ops = ex.DIV_EXP_OPS if name == "sytf-div-exp" else ex.BASE_OPS
    config = sytf.EvolutionConfig(seed=seed, **cfg_kw)
    front = sytf.evolve(config, data, ops)
    # absolute slack keeps round-off level differences from buying extra nodes
    atol = 1e-10 * float(np.var(data.targets))
    return SytfForecaster(sytf.select_model(front, selection, atol=atol), front, name, p, scaler)
