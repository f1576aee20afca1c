import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symcast import expr as ex
from symcast import sytf
from symcast.expr import Const, Lag
from symcast.series import make_lags
from symcast.sytf import EvolutionConfig, FrecencyTable, Individual, ParetoFront

from _oracles import (
    anneal_acceptance_rate,
    dominated_pairs,
    bfgs_vs_lstsq,
    geometric_law,
    pareto_stress,
    search_invariant_violations,
    tournament_frequencies,
    tree_of_complexity,
)


def ind(c, loss, tick=0):
    return Individual(tree_of_complexity(c), loss, tick)


# -- fitness and frecency ---------------------------------------------------


def test_fitness_examples():
    table = FrecencyTable()
    assert sytf.fitness(ind(3, 0.2), table) == 0.2
    table.counts[3] = math.log(2) * table.normalization
    assert sytf.fitness(ind(3, 0.2), table) == pytest.approx(0.4)
    assert sytf.fitness(ind(3, math.inf), table) == sytf.WORST_LOSS


@given(st.floats(1e-6, 10), st.floats(0, 5), st.floats(1e-3, 5))
def test_frecency_pressure_monotone(loss, s1, ds):
    a, b = FrecencyTable(), FrecencyTable()
    a.counts[4] = s1 * a.normalization
    b.counts[4] = (s1 + ds) * b.normalization
    assert sytf.fitness(ind(4, loss), a) < sytf.fitness(ind(4, loss), b)


def test_frecency_decay_and_recency():
    table = FrecencyTable(window=10, normalization=2)
    assert 0 < table.decay < 1
    for _ in range(5):
        table.record(3)
    table.record(7)
    assert table.score(3) > table.score(7) > 0
    for _ in range(200):
        table.record(7)
    assert table.score(3) < 1e-6
    assert all(v >= 0 for v in table.counts.values())


# -- tournament ---------------------------------------------------------------


def _pop(losses):
    return [ind(1, loss, i) for i, loss in enumerate(losses)]


def test_tournament_q_one_picks_best_of_sample():
    rng = np.random.default_rng(0)
    cfg = EvolutionConfig(tournament_size=5, tournament_selection_prob=1.0)
    pop = _pop(range(5))
    assert all(sytf.tournament_select(pop, cfg, rng).pred_loss == 0 for _ in range(200))


def test_tournament_size_one_is_uniform():
    rng = np.random.default_rng(1)
    cfg = EvolutionConfig(tournament_size=1)
    pop = _pop(range(4))
    counts = np.bincount([int(sytf.tournament_select(pop, cfg, rng).pred_loss) for _ in range(8000)], minlength=4)
    assert np.all(np.abs(counts / 8000 - 0.25) < 0.03)


def test_tournament_geometric_law():
    freq = tournament_frequencies(trials=100_000)
    assert np.all(np.abs(freq - geometric_law(0.9, 5)) < 0.01)


# -- annealing ----------------------------------------------------------------


def test_rejection_probability_examples():
    assert sytf.rejection_probability(1.0, 1.0, 0.1, 0.5) == 1.0
    assert sytf.rejection_probability(0.0, 1.0, 0.1, 1.0) == pytest.approx(math.exp(-10))
    assert sytf.rejection_probability(2.0, 1.0, 0.1, 0.0) == 1.0
    assert sytf.rejection_probability(0.5, 1.0, 0.1, 0.0) == 0.0
    # the conventional form keeps improvements and ties, and rejects worse children by degree
    assert sytf.rejection_probability(0.5, 1.0, 0.1, 1.0, form="conventional") == 0.0
    assert sytf.rejection_probability(1.0, 1.0, 0.1, 1.0, form="conventional") == 0.0
    assert sytf.rejection_probability(1.01, 1.0, 0.1, 1.0, form="conventional") == pytest.approx(1 - math.exp(-0.1))
    assert sytf.rejection_probability(1.01, 1.0, 0.1, 0.0, form="conventional") == 1.0


@given(st.floats(0, 10), st.floats(0, 10), st.floats(1e-3, 1), st.floats(0, 1))
def test_rejection_probability_is_a_probability(lf, le, alpha, tau):
    for form in ("as_written", "conventional"):
        assert 0.0 <= sytf.rejection_probability(lf, le, alpha, tau, form) <= 1.0


def test_anneal_accept_near_certain_for_exponent_minus_ten():
    assert anneal_acceptance_rate() >= 0.9999


def test_zero_temperature_never_accepts_worse():
    rng = np.random.default_rng(2)
    assert not any(sytf.anneal_accept(1.5, 1.0, 0.1, 0.0, rng) for _ in range(1000))


def test_tau_schedule_cycles():
    cfg = EvolutionConfig(n_generations=50)
    taus = [cfg.tau(g) for g in np.linspace(0, 50, 501)]
    assert min(taus) == pytest.approx(0.1) and max(taus) == pytest.approx(1.0)
    assert cfg.tau(0) == pytest.approx(1.0) and cfg.tau(5) == pytest.approx(0.1) and cfg.tau(10) == pytest.approx(1.0)


# -- variation ---------------------------------------------------------------


def test_mutate_noop_only():
    rng = np.random.default_rng(0)
    t = ex.parse("sin(y[t-1]) + 0.5*y[t-2]")
    assert all(sytf.mutate(t, ex.BASE_OPS, rng, p=2, weights={"noop": 1.0}) == t for _ in range(50))


def test_mutate_constant_keeps_shape():
    rng = np.random.default_rng(0)
    for _ in range(50):
        out = sytf.mutate(Const(1.0), ex.BASE_OPS, rng, p=1, weights={"constant": 1.0})
        assert isinstance(out, Const)


def test_mutations_respect_operator_set_and_ceiling():
    rng = np.random.default_rng(3)
    t = ex.parse("y[t-1]")
    for _ in range(10_000):
        t = sytf.mutate(t, ex.BASE_OPS, rng, p=3, max_complexity=15)
        assert not ({"div", "exp"} & ex.uses_ops(t))
        assert ex.complexity(t) <= 15


def test_crossover_examples():
    rng = np.random.default_rng(0)
    a, b = sytf.crossover(Lag(1), Const(2.0), rng)
    assert (a, b) == (Const(2.0), Lag(1))
    t = ex.parse("sin(y[t-1]) * y[t-2] + 0.5")
    X = rng.normal(size=(20, 2))
    for _ in range(20):
        c1, c2 = sytf.crossover(t, t, rng)
        # swapping subtrees conserves the total node count
        assert ex.complexity(c1) + ex.complexity(c2) == 2 * ex.complexity(t)
    c1, c2 = sytf.crossover(t, t, rng, max_complexity=ex.complexity(t))
    for c in (c1, c2):
        assert ex.complexity(c) <= ex.complexity(t)
    c1, c2 = sytf.crossover(Lag(1), Lag(1), rng)
    assert np.array_equal(ex.evaluate_batch(c1, X), ex.evaluate_batch(Lag(1), X))


def test_crossover_rejects_oversize_children():
    rng = np.random.default_rng(0)
    a, b = tree_of_complexity(10), ex.parse("y[t-1] + y[t-2]")
    for _ in range(50):
        ca, cb = sytf.crossover(a, b, rng, max_complexity=10)
        assert ex.complexity(ca) <= 10 and ex.complexity(cb) <= 10
    # any swap other than equal-size subtrees overflows one side at the exact ceiling
    big, small = tree_of_complexity(4), ex.parse("y[t-1] + y[t-2]")
    for _ in range(50):
        ca, cb = sytf.crossover(big, small, rng, max_complexity=4)
        assert (ex.complexity(ca), ex.complexity(cb)) in {(4, 3), (3, 4)} or (ca, cb) == (big, small)


# -- Pareto front ------------------------------------------------------------


def test_pareto_invariant_randomized():
    assert pareto_stress(20_000) == 0


def test_search_loop_invariants():
    assert search_invariant_violations(1500) == 0


def test_pareto_keeps_best_per_level_and_drops_dominated():
    front = ParetoFront([ind(3, 0.5), ind(5, 0.2)])
    assert not front.insert(ind(3, 0.6))
    assert front.insert(ind(3, 0.1))
    assert [m.complexity for m in front] == [3]
    assert dominated_pairs(front) == 0
    assert not front.insert(ind(2, math.inf))


# -- constant optimisation ---------------------------------------------------


def test_optimize_scalar_coefficient():
    y = 3.0 * 0.5 ** np.arange(30) + np.sin(np.arange(30))
    d = make_lags(y, 1)
    tree = sytf.optimize_constants(ex.mul(Const(1.0), Lag(1)), d)
    oracle = float(d.inputs[:, 0] @ d.targets / (d.inputs[:, 0] @ d.inputs[:, 0]))
    assert abs(ex.constants(tree)[0] - oracle) < 1e-4
    y = 4.0 * 0.5 ** np.arange(30)
    tree = sytf.optimize_constants(ex.mul(Const(1.0), Lag(1)), make_lags(y, 1))
    assert abs(ex.constants(tree)[0] - 0.5) < 1e-4


def test_optimize_without_constants_is_identity():
    d = make_lags(np.arange(10.0), 1)
    t = ex.parse("sin(y[t-1])")
    assert sytf.optimize_constants(t, d) is t


@pytest.mark.parametrize("seed", range(20))
def test_bfgs_matches_least_squares(seed):
    assert bfgs_vs_lstsq(seed) < 1e-4


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_optimize_never_increases_mse(seed):
    rng = np.random.default_rng(seed)
    d = make_lags(np.cumsum(rng.normal(size=40)), 2)
    t = ex.random_tree(rng, ex.DIV_EXP_OPS, 4, 2)
    out = sytf.optimize_constants(t, d, max_iter=20)
    assert sytf.prediction_loss(out, d) <= sytf.prediction_loss(t, d)


def test_bfgs_rosenbrock():
    f = lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2  # noqa: E731
    x = sytf.bfgs(f, [-1.2, 1.0], max_iter=500)
    assert np.allclose(x, [1.0, 1.0], atol=1e-4)


# -- selection ---------------------------------------------------------------


def test_select_model_examples():
    front = [ind(1, 1.0), ind(3, 0.1), ind(15, 0.099)]
    assert sytf.select_model(front, "knee").complexity == 3
    assert sytf.select_model(front, "best_loss").complexity == 15
    assert sytf.select_model(front, "parsimonious").complexity == 15
    assert sytf.select_model(front, "parsimonious", rtol=0.02).complexity == 3
    assert sytf.select_model(front, "parsimonious", atol=1.0).complexity == 1
    single = [ind(4, 0.3)]
    assert sytf.select_model(single, "knee") is single[0]
    assert sytf.select_model(single, "best_loss") is single[0]
    with pytest.raises(ValueError):
        sytf.select_model([], "knee")


# -- the search loop -----------------------------------------------------------


def test_replacement_removes_oldest_and_keeps_size():
    cfg = EvolutionConfig(population_size=12, n_generations=5)
    d = make_lags(np.sin(np.arange(40) * 0.3), 2)
    pop = sytf._init_population(cfg, ex.BASE_OPS, d, np.random.default_rng(0))
    for _ in range(300):
        before = {m.birth_tick for m in pop.members}
        sytf._step(pop, cfg, ex.BASE_OPS, d, 0.5)
        after = {m.birth_tick for m in pop.members}
        removed = before - after
        assert len(pop.members) == 12
        # a crossover may insert two children, each evicting the then-oldest
        assert len(removed) <= 2 and removed == set(sorted(before)[: len(removed)])
        assert all(m.complexity <= cfg.max_complexity for m in pop.members)


def test_optimize_pass_never_worsens_front():
    cfg = EvolutionConfig(population_size=10, n_generations=3, optimize_every=1)
    d = make_lags(np.sin(np.arange(40) * 0.3), 2)
    pop = sytf._init_population(cfg, ex.BASE_OPS, d, np.random.default_rng(4))
    before = min(m.pred_loss for m in pop.front.members())
    sytf._optimize_pass(pop, cfg, d)
    assert min(m.pred_loss for m in pop.front.members()) <= before
    assert len(pop.members) == 10


def test_evolve_recovers_linear_coefficient():
    y = 10 * 0.9613 ** np.arange(200)
    front = sytf.evolve(EvolutionConfig(seed=0), make_lags(y, 1))
    small = [m for m in front.members() if m.complexity <= 3]
    assert any(abs(ex.constants(m.tree)[0] - 0.9613) < 0.01 for m in small if ex.constants(m.tree))
    chosen = ex.collect_terms(sytf.select_model(front, "knee").tree)
    text = ex.render(chosen, 4)
    assert text.endswith("*y[t-1]") and abs(float(text.split("*")[0]) - 0.9613) < 0.01


def test_evolve_constant_target():
    front = sytf.evolve(EvolutionConfig(seed=1, n_generations=10, n_populations=2), make_lags(np.full(50, 5.0), 1))
    assert any(m.complexity == 1 and m.pred_loss < 1e-6 for m in front.members())


def test_evolve_deterministic():
    d = make_lags(np.sin(np.arange(60) * 0.4), 2)
    cfg = EvolutionConfig(seed=3, n_generations=4, n_populations=2, population_size=10)
    a = [(m.tree, m.pred_loss) for m in sytf.evolve(cfg, d).members()]
    b = [(m.tree, m.pred_loss) for m in sytf.evolve(cfg, d).members()]
    assert a == b


@pytest.mark.parametrize("ops", [ex.BASE_OPS, ex.DIV_EXP_OPS])
def test_evolve_uses_only_allowed_operators(ops):
    d = make_lags(np.sin(np.arange(60) * 0.4), 2)
    front = sytf.evolve(EvolutionConfig(seed=0, n_generations=4, n_populations=2, population_size=10), d, ops)
    allowed = ops.unary | ops.binary | {"neg"}
    for m in front.members():
        assert ex.uses_ops(m.tree) <= allowed
        assert m.complexity <= 30 and ex.max_lag(m.tree) <= 2


def test_migration_hook_called():
    calls = []
    d = make_lags(np.sin(np.arange(30) * 0.4), 1)
    sytf.evolve(EvolutionConfig(n_generations=3, n_populations=2, population_size=6), d, migrate=calls.append)
    assert len(calls) == 3 and len(calls[0]) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        EvolutionConfig(tournament_selection_prob=1.5)
    with pytest.raises(ValueError):
        EvolutionConfig(annealing_form="other")
    with pytest.raises(ValueError):
        EvolutionConfig(mutation_weights={"noop": 0.0})
