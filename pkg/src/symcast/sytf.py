"""Evolutionary search over expression trees.

Each subpopulation runs an age-regularised steady-state loop: a tournament
picks a parent, a mutated (or crossed-over) clone is gated by simulated
annealing, and an accepted child replaces the oldest member. Fitness is the
train MSE scaled by ``exp(frecency[complexity])`` so crowded complexity levels
are penalised. Every ``optimize_every`` generations the Pareto members are
simplified and their constants refined by BFGS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import expr as ex
from .series import LagDataset

WORST_LOSS = math.inf

MUTATION_KINDS = ("constant", "operator", "insert", "delete", "randomize", "noop")


@dataclass(frozen=True)
class Individual:
    tree: ex.Node
    pred_loss: float
    birth_tick: int = 0

    @property
    def complexity(self) -> int:
        return ex.complexity(self.tree)

    @property
    def flagged(self) -> bool:
        return not math.isfinite(self.pred_loss)


@dataclass(frozen=True)
class EvolutionConfig:
    n_populations: int = 8
    population_size: int = 33
    n_generations: int = 60
    tournament_size: int = 5
    tournament_selection_prob: float = 0.9
    mutation_weights: dict = field(
        default_factory=lambda: {
            "constant": 1.0,
            "operator": 0.5,
            "insert": 1.0,
            "delete": 0.7,
            "randomize": 0.3,
            "noop": 0.1,
        }
    )
    crossover_prob: float = 0.1
    max_complexity: int = 30
    max_init_depth: int = 4
    alpha: float = 0.01
    tau_min: float = 0.1
    tau_max: float = 1.0
    annealing_form: str = "as_written"  # or "conventional"
    frecency_window: float = 500.0
    frecency_normalization: float = 250.0
    optimize_every: int = 10
    bfgs_iterations: int = 100
    optimize_probability: float = 0.2
    offspring_bfgs_iterations: int = 8
    seed: int = 0

    def __post_init__(self):
        counts = ("n_populations", "population_size", "n_generations", "tournament_size", "max_complexity", "optimize_every")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("tournament_selection_prob", "crossover_prob", "optimize_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.annealing_form not in ("as_written", "conventional"):
            raise ValueError("annealing_form must be 'as_written' or 'conventional'")
        unknown = set(self.mutation_weights) - set(MUTATION_KINDS)
        if unknown or any(w < 0 for w in self.mutation_weights.values()):
            raise ValueError(f"bad mutation weights {self.mutation_weights}")
        if not sum(self.mutation_weights.values()) > 0:
            raise ValueError("mutation weights must not all be zero")

    def tau(self, generation: float) -> float:
        """Triangle wave from ``tau_max`` down to ``tau_min`` and back, period ``n_generations/5``."""
        period = max(self.n_generations / 5.0, 1.0)
        phase = (generation / period) % 1.0
        return self.tau_min + (self.tau_max - self.tau_min) * abs(1.0 - 2.0 * phase)


class FrecencyTable:
    """Exponentially decayed insertion counts per complexity level."""

    def __init__(self, window: float = 500.0, normalization: float = 250.0):
        if not window > 0 or not normalization > 0:
            raise ValueError("window and normalization must be positive")
        self.decay = math.exp(-1.0 / window)
        self.normalization = normalization
        self.counts: dict[int, float] = {}

    def record(self, complexity: int) -> None:
        self.counts[complexity] = self.counts.get(complexity, 0.0) + 1.0
        for c in self.counts:
            self.counts[c] *= self.decay

    def score(self, complexity: int) -> float:
        return self.counts.get(complexity, 0.0) / self.normalization


class ParetoFront:
    """Best individual per complexity, kept mutually non-dominated.

    ``a`` dominates ``b`` when ``a`` is no worse on both loss and complexity
    and strictly better on one.
    """

    def __init__(self, members: Sequence[Individual] = ()):
        self._by_c: dict[int, Individual] = {}
        for m in members:
            self.insert(m)

    @staticmethod
    def dominates(a: Individual, b: Individual) -> bool:
        ca, cb = a.complexity, b.complexity
        return a.pred_loss <= b.pred_loss and ca <= cb and (a.pred_loss < b.pred_loss or ca < cb)

    def insert(self, ind: Individual) -> bool:
        if ind.flagged:
            return False
        c = ind.complexity
        for m in self._by_c.values():
            if self.dominates(m, ind) or (m.complexity == c and m.pred_loss <= ind.pred_loss):
                return False
        self._by_c = {k: m for k, m in self._by_c.items() if not self.dominates(ind, m) and k != c}
        self._by_c[c] = ind
        return True

    def members(self) -> list[Individual]:
        return [self._by_c[c] for c in sorted(self._by_c)]

    def __len__(self):
        return len(self._by_c)

    def __iter__(self):
        return iter(self.members())


# -- losses ----------------------------------------------------------------


def _mse(pred, targets) -> float:
    if not np.all(np.isfinite(pred)):
        return WORST_LOSS
    with np.errstate(over="ignore"):
        mse = float(np.mean((pred - targets) ** 2))
    return mse if math.isfinite(mse) else WORST_LOSS


def prediction_loss(tree: ex.Node, data: LagDataset) -> float:
    """Train MSE, or ``WORST_LOSS`` when any prediction is flagged."""
    fn, consts = ex.compile_batch(tree)
    return _mse(fn(data.inputs, consts), data.targets)


def fitness(ind: Individual, frecency: FrecencyTable) -> float:
    if ind.flagged:
        return WORST_LOSS
    return ind.pred_loss * math.exp(frecency.score(ind.complexity))


# -- selection and variation -----------------------------------------------


def tournament_select(population: Sequence[Individual], config: EvolutionConfig, rng, key: Callable | None = None) -> Individual:
    """Sample ``tournament_size`` members; take the i-th best with probability ``q(1-q)^i``."""
    if not population:
        raise ValueError("empty population")
    key = key or (lambda ind: ind.pred_loss)
    size = min(config.tournament_size, len(population))
    idx = rng.choice(len(population), size=size, replace=False)
    ranked = sorted(idx, key=lambda i: (key(population[i]), i))
    q = config.tournament_selection_prob
    for i in ranked[:-1]:
        if rng.random() < q:
            return population[i]
    return population[ranked[-1]]


def _random_node_path(tree, rng, predicate=lambda n: True):
    paths = [path for path, node in ex.iter_nodes(tree) if predicate(node)]
    if not paths:
        return None
    return paths[int(rng.integers(len(paths)))]


def _applicable(kind: str, tree: ex.Node) -> bool:
    if kind == "constant":
        return any(isinstance(n, ex.Const) for _, n in ex.iter_nodes(tree))
    if kind in ("operator", "delete"):
        return isinstance(tree, (ex.Unary, ex.Binary))
    return True


def mutate(
    tree: ex.Node,
    ops: ex.OperatorSet,
    rng,
    *,
    p: int,
    weights: dict | None = None,
    max_complexity: int = 30,
) -> ex.Node:
    """Apply one randomly chosen mutation kind (weighted over the applicable kinds).

    Oversize results are discarded and the input returned.
    """
    weights = weights or EvolutionConfig().mutation_weights
    kinds = [k for k in MUTATION_KINDS if weights.get(k, 0.0) > 0 and _applicable(k, tree)]
    if not kinds:
        return tree
    w = np.array([weights[k] for k in kinds], dtype=float)
    kind = kinds[int(rng.choice(len(kinds), p=w / w.sum()))]
    unary = sorted(ops.unary - {"neg"})
    binary = sorted(ops.binary)

    if kind == "noop":
        return tree
    if kind == "constant":
        path = _random_node_path(tree, rng, lambda n: isinstance(n, ex.Const))
        c = ex.get_at(tree, path).value
        if c == 0.0:
            new = float(rng.standard_normal())
        else:
            new = c * (1.0 + 0.5 * float(rng.standard_normal()))
            if rng.random() < 0.05:
                new = -new
        out = ex.replace_at(tree, path, ex.Const(new))
    elif kind == "operator":
        path = _random_node_path(tree, rng, lambda n: isinstance(n, (ex.Unary, ex.Binary)))
        node = ex.get_at(tree, path)
        if isinstance(node, ex.Unary):
            choices = [o for o in unary if o != node.op] or unary
            if not choices:
                return tree
            out = ex.replace_at(tree, path, ex.Unary(choices[int(rng.integers(len(choices)))], node.child))
        else:
            choices = [o for o in binary if o != node.op] or binary
            out = ex.replace_at(tree, path, ex.Binary(choices[int(rng.integers(len(choices)))], node.left, node.right))
    elif kind == "insert":
        path = _random_node_path(tree, rng)
        node = ex.get_at(tree, path)
        k = int(rng.integers(len(unary) + len(binary)))
        if k < len(unary):
            new = ex.Unary(unary[k], node)
        else:
            leaf = ex.random_leaf(rng, p)
            op = binary[k - len(unary)]
            new = ex.Binary(op, node, leaf) if rng.random() < 0.5 else ex.Binary(op, leaf, node)
        out = ex.replace_at(tree, path, new)
    elif kind == "delete":
        path = _random_node_path(tree, rng, lambda n: isinstance(n, (ex.Unary, ex.Binary)))
        out = ex.replace_at(tree, path, ex.random_leaf(rng, p))
    else:  # randomize
        path = _random_node_path(tree, rng)
        out = ex.replace_at(tree, path, ex.random_tree(rng, ops, int(rng.integers(1, 4)), p))
    return out if ex.complexity(out) <= max_complexity else tree


def crossover(a: ex.Node, b: ex.Node, rng, max_complexity: int = 30) -> tuple[ex.Node, ex.Node]:
    """Swap uniformly chosen subtrees; oversize children return the parents unchanged."""
    pa = _random_node_path(a, rng)
    pb = _random_node_path(b, rng)
    child_a = ex.replace_at(a, pa, ex.get_at(b, pb))
    child_b = ex.replace_at(b, pb, ex.get_at(a, pa))
    if ex.complexity(child_a) > max_complexity or ex.complexity(child_b) > max_complexity:
        return a, b
    return child_a, child_b


def rejection_probability(child_loss: float, parent_loss: float, alpha: float, tau: float, form: str = "as_written") -> float:
    """``min(1, exp((L_F - L_E) / (alpha * tau)))``.

    ``form="conventional"`` is the Metropolis rule instead: children that are
    no worse are kept, worse ones are rejected with probability
    ``1 - exp(-(L_F - L_E) / (alpha * tau))``. ``tau == 0`` is the
    zero-temperature limit of either form.
    """
    diff = child_loss - parent_loss
    if math.isnan(diff):
        return 1.0
    if form == "conventional":
        if diff <= 0.0:
            return 0.0
        return 1.0 if tau <= 0.0 else -math.expm1(-diff / (alpha * tau))
    if tau <= 0.0:
        return 0.0 if child_loss < parent_loss else 1.0
    z = diff / (alpha * tau)
    return 1.0 if z >= 0.0 else math.exp(z)


def anneal_accept(child_loss: float, parent_loss: float, alpha: float, tau: float, rng, form: str = "as_written") -> bool:
    return rng.random() >= rejection_probability(child_loss, parent_loss, alpha, tau, form)


# -- constant refinement ----------------------------------------------------


def _fd_grad(f, x, fx):
    g = np.empty_like(x)
    for i in range(x.size):
        h = 1e-6 * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = f(xp), f(xm)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            # one-sided fallback near a flagged region
            if math.isfinite(fp):
                g[i] = (fp - fx) / h
            elif math.isfinite(fm):
                g[i] = (fx - fm) / h
            else:
                g[i] = 0.0
        else:
            g[i] = (fp - fm) / (2 * h)
    return g


def bfgs(f: Callable[[np.ndarray], float], x0, max_iter: int = 100, gtol: float = 1e-12) -> np.ndarray:
    """Minimise ``f`` by BFGS with finite-difference gradients and Armijo backtracking.

    Trial points where ``f`` is non-finite are rejected by the line search.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    fx = f(x)
    if not math.isfinite(fx):
        return x
    H = np.eye(n)
    g = _fd_grad(f, x, fx)
    for _ in range(max_iter):
        if np.max(np.abs(g)) <= gtol:
            break
        d = -H @ g
        slope = float(g @ d)
        if slope >= 0:
            H = np.eye(n)
            d, slope = -g, -float(g @ g)
        step = 1.0
        for _ in range(60):
            x_new = x + step * d
            f_new = f(x_new)
            if math.isfinite(f_new) and f_new <= fx + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            break
        g_new = _fd_grad(f, x_new, f_new)
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        improvement = fx - f_new
        x, fx, g = x_new, f_new, g_new
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            I = np.eye(n)
            H = (I - rho * np.outer(s, y)) @ H @ (I - rho * np.outer(y, s)) + rho * np.outer(s, s)
        else:
            H = np.eye(n)
        if improvement <= 1e-16 * max(abs(fx), 1e-300) and np.max(np.abs(g)) <= 1e-8:
            break
    return x


def optimize_constants(tree: ex.Node, train: LagDataset, max_iter: int = 100) -> ex.Node:
    """Refine the constants of ``tree`` by BFGS on train MSE; never increases the MSE."""
    c0 = np.array(ex.constants(tree))
    if c0.size == 0:
        return tree
    fn, _ = ex.compile_batch(tree)
    base = _mse(fn(train.inputs, c0), train.targets)
    if not math.isfinite(base) or base == 0.0:
        return tree

    def objective(c):
        return _mse(fn(train.inputs, c), train.targets) / base

    c = bfgs(objective, c0, max_iter=max_iter)
    out = ex.with_constants(tree, c)
    return out if prediction_loss(out, train) <= base else tree


# -- model selection -------------------------------------------------------


def select_model(front: ParetoFront | Sequence[Individual], policy: str = "knee", rtol: float = 0.01,
                 atol: float = 0.0) -> Individual:
    """Pick one member of a Pareto front.

    ``best_loss``: lowest train loss. ``knee``: largest log-loss drop per
    added node relative to the next-simpler member. ``parsimonious``: the
    simplest member whose loss is within ``best * (1 + rtol) + atol``.
    """
    members = sorted(front, key=lambda m: m.complexity)
    if not members:
        raise ValueError("empty Pareto front")
    best = min(members, key=lambda m: (m.pred_loss, m.complexity))
    if policy == "best_loss":
        return best
    if policy == "parsimonious":
        limit = best.pred_loss * (1.0 + rtol) + atol
        return next(m for m in members if m.pred_loss <= limit)
    if policy != "knee":
        raise ValueError(f"unknown selection policy {policy!r}")
    best, best_score = members[0], -math.inf
    for prev, cur in zip(members, members[1:]):
        drop = math.log(max(prev.pred_loss, 1e-300)) - math.log(max(cur.pred_loss, 1e-300))
        score = drop / (cur.complexity - prev.complexity)
        if score > best_score:
            best, best_score = cur, score
    return best


# -- the search loop -------------------------------------------------------


@dataclass
class _Population:
    members: list
    frecency: FrecencyTable
    front: ParetoFront
    rng: np.random.Generator
    tick: int = 0
    optimized: set = field(default_factory=set)

    def oldest_index(self) -> int:
        return min(range(len(self.members)), key=lambda i: (self.members[i].birth_tick, i))

    def insert(self, tree: ex.Node, loss: float) -> Individual:
        self.tick += 1
        ind = Individual(tree, loss, self.tick)
        self.members[self.oldest_index()] = ind
        self.frecency.record(ind.complexity)
        self.front.insert(ind)
        return ind


def _init_population(config, ops, data, rng) -> _Population:
    p = data.lag_count
    members = []
    for tick in range(config.population_size):
        while True:
            depth = int(rng.integers(1, config.max_init_depth + 1))
            tree = ex.simplify(ex.random_tree(rng, ops, depth, p))
            if ex.complexity(tree) <= config.max_complexity:
                break
        members.append(Individual(tree, prediction_loss(tree, data), tick - config.population_size))
    pop = _Population(members, FrecencyTable(config.frecency_window, config.frecency_normalization), ParetoFront(members), rng)
    return pop


def _optimize_pass(pop: _Population, config, data) -> None:
    """Simplify and BFGS-refine Pareto members; refined trees rejoin the population."""
    for member in pop.front.members():
        if member.tree in pop.optimized:
            continue
        tree = ex.simplify(member.tree)
        tree = optimize_constants(tree, data, config.bfgs_iterations)
        pop.optimized.add(tree)
        pop.optimized.add(member.tree)
        loss = prediction_loss(tree, data)
        if loss < member.pred_loss or tree != member.tree:
            pop.insert(tree, loss)


def _step(pop: _Population, config, ops, data, tau) -> None:
    rng = pop.rng
    key = lambda ind: fitness(ind, pop.frecency)  # noqa: E731
    p = data.lag_count
    if rng.random() < config.crossover_prob:
        pa = tournament_select(pop.members, config, rng, key)
        pb = tournament_select(pop.members, config, rng, key)
        children = crossover(pa.tree, pb.tree, rng, config.max_complexity)
        pairs = [(children[0], pa), (children[1], pb)]
    else:
        parent = tournament_select(pop.members, config, rng, key)
        child = mutate(parent.tree, ops, rng, p=p, weights=config.mutation_weights, max_complexity=config.max_complexity)
        pairs = [(child, parent)]
    for tree, parent in pairs:
        tree = ex.simplify(tree)
        if config.optimize_probability > 0 and rng.random() < config.optimize_probability:
            tree = optimize_constants(tree, data, config.offspring_bfgs_iterations)
        child = Individual(tree, prediction_loss(tree, data))
        f_child, f_parent = key(child), key(parent)
        if math.isinf(f_parent):
            rel_child = 0.0 if math.isfinite(f_child) else math.nan
        elif f_parent == 0.0:
            rel_child = 1.0 if f_child == 0.0 else math.inf
        else:
            rel_child = f_child / f_parent
        if anneal_accept(rel_child, 1.0, config.alpha, tau, rng, config.annealing_form):
            pop.insert(tree, child.pred_loss)


def evolve(
    config: EvolutionConfig,
    train: LagDataset,
    ops: ex.OperatorSet = ex.BASE_OPS,
    migrate: Callable[[list], None] | None = None,
) -> ParetoFront:
    """Run ``n_populations`` independent searches and merge their Pareto fronts.

    ``migrate``, when given, is called with the list of population member lists
    after every generation; the default is no interaction until the final merge.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_populations)
    pops = [_init_population(config, ops, train, np.random.default_rng(s)) for s in seeds]
    for gen in range(config.n_generations):
        for pop in pops:
            for i in range(config.population_size):
                _step(pop, config, ops, train, config.tau(gen + i / config.population_size))
            if (gen + 1) % config.optimize_every == 0:
                _optimize_pass(pop, config, train)
        if migrate is not None:
            migrate([pop.members for pop in pops])
    merged = ParetoFront()
    for pop in pops:
        _optimize_pass(pop, config, train)
        for m in pop.front.members():
            merged.insert(m)
    return merged
