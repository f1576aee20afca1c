import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symcast import expr as ex
from symcast.expr import Binary, Const, Lag, Unary

P = 3


def table3_tree():
    return ex.add(ex.mul(Const(0.985), Lag(1)), Const(0.417))


def test_evaluate_examples():
    assert ex.evaluate(table3_tree(), [2.0]) == pytest.approx(2.387, abs=1e-12)
    assert ex.evaluate(Lag(1), [7.3]) == 7.3
    assert ex.evaluate(Unary("sin", Const(0.0)), []) == 0.0


def test_evaluate_flags_instead_of_raising():
    assert math.isnan(ex.evaluate(ex.div(Lag(1), Const(0.0)), [1.0]))
    assert math.isnan(ex.evaluate(ex.div(Lag(1), Const(1e-13)), [1.0]))
    assert math.isnan(ex.evaluate(Unary("exp", Const(701.0)), []))
    assert math.isfinite(ex.evaluate(Unary("exp", Const(700.0)), []))
    assert ex.is_flagged(ex.evaluate(Unary("exp", ex.mul(Lag(1), Const(1e300))), [1e300]))


def test_lag_out_of_range():
    with pytest.raises(ex.LagIndexError):
        ex.evaluate(Lag(3), [1.0, 2.0])
    with pytest.raises(ex.ExprError):
        Lag(0)


def test_complexity_examples():
    assert ex.complexity(Const(1.0)) == 1
    assert ex.complexity(ex.add(Lag(1), Const(2.0))) == 3
    assert ex.complexity(ex.parse("0.985*y[t-1] + 0.417")) == 5


def test_simplify_examples():
    assert ex.simplify(ex.add(Lag(1), Const(0.0))) == Lag(1)
    assert ex.simplify(ex.mul(Const(2.0), Const(3.0))) == Const(6.0)
    tree = ex.sub(ex.mul(Lag(1), Const(1.0)), ex.sub(Lag(1), Lag(1)))
    assert ex.simplify(tree) == Lag(1)
    assert ex.simplify(Unary("neg", Unary("neg", Lag(2)))) == Lag(2)
    assert ex.simplify(ex.div(Lag(2), Const(1.0))) == Lag(2)
    assert ex.simplify(Unary("cos", Const(0.0))) == Const(1.0)


def test_simplify_keeps_flag_sources():
    # x*0 would hide a division by zero
    risky = ex.mul(ex.div(Const(1.0), Lag(1)), Const(0.0))
    assert math.isnan(ex.evaluate(ex.simplify(risky), [0.0]))


def test_render_examples():
    assert ex.render(table3_tree()) == "0.985*y[t-1] + 0.417"
    assert ex.render(Const(0.41666), 3) == "0.417"
    assert ex.render(ex.sub(Lag(1), ex.add(Lag(2), Lag(3)))) == "y[t-1] - (y[t-2] + y[t-3])"
    assert ex.render(ex.add(Lag(1), Const(-0.5))) == "y[t-1] + (-0.500)"
    assert ex.render(ex.add(Const(0.111), ex.mul(Const(0.9421), Lag(1))), 4) == "0.1110 + 0.9421*y[t-1]"


def test_render_rejects_zero_precision():
    with pytest.raises(ex.ExprError):
        ex.render(Lag(1), 0)


def test_parse_examples():
    assert ex.parse("y[t-1]") == Lag(1)
    assert ex.parse("sin(y[t-2]) * 0.5") == Binary("mul", Unary("sin", Lag(2)), Const(0.5))
    with pytest.raises(ex.ParseError) as info:
        ex.parse("y[t-")
    assert info.value.offset == 4


@pytest.mark.parametrize("text, offset", [("1 +", 3), ("(y[t-1]", 7), ("y[t-1] $", 7), ("sin y[t-1]", 4)])
def test_parse_error_offsets(text, offset):
    with pytest.raises(ex.ParseError) as info:
        ex.parse(text)
    assert info.value.offset == offset


def test_random_tree_depth_one_is_leaf():
    rng = np.random.default_rng(0)
    for _ in range(100):
        assert isinstance(ex.random_tree(rng, ex.DIV_EXP_OPS, 1, P), (Const, Lag))


def test_random_tree_deterministic():
    a = ex.random_tree(np.random.default_rng(5), ex.BASE_OPS, 5, P)
    b = ex.random_tree(np.random.default_rng(5), ex.BASE_OPS, 5, P)
    assert a == b


def test_random_tree_respects_operator_set():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        t = ex.random_tree(rng, ex.BASE_OPS, 5, P)
        assert not ({"div", "exp", "neg"} & ex.uses_ops(t))
        assert ex.depth(t) <= 5
        assert ex.max_lag(t) <= P


def test_batch_and_compiled_match_scalar():
    rng = np.random.default_rng(2)
    X = rng.uniform(-5, 5, size=(50, P))
    for _ in range(200):
        t = ex.random_tree(rng, ex.DIV_EXP_OPS, 5, P)
        scalar = np.array([ex.evaluate(t, x) for x in X])
        batch = ex.evaluate_batch(t, X)
        run, consts = ex.compile_batch(t)
        compiled = run(X, consts)
        assert np.array_equal(np.isnan(scalar), np.isnan(batch))
        assert np.array_equal(np.isnan(scalar), np.isnan(compiled))
        ok = ~np.isnan(scalar)
        assert np.allclose(scalar[ok], batch[ok], rtol=1e-12, atol=1e-12)
        assert np.allclose(scalar[ok], compiled[ok], rtol=1e-12, atol=1e-12)


def test_constants_round_trip():
    t = ex.parse("0.5*y[t-1] + sin(2.0*y[t-2]) - 3.0")
    assert ex.constants(t) == [0.5, 2.0, 3.0]
    assert ex.constants(ex.with_constants(t, [1.0, 4.0, 7.0])) == [1.0, 4.0, 7.0]


def test_paths_and_replacement():
    t = ex.parse("y[t-1] + 2.0*y[t-2]")
    paths = dict(ex.iter_nodes(t))
    assert paths[()] == t
    assert ex.get_at(t, (1, 0)) == Const(2.0)
    assert ex.replace_at(t, (1, 0), Const(3.0)) == ex.parse("y[t-1] + 3.0*y[t-2]")


# -- property tests --------------------------------------------------------

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=300, deadline=None)
@given(seeds, st.sampled_from([ex.BASE_OPS, ex.DIV_EXP_OPS]))
def test_simplify_sound(seed, ops):
    rng = np.random.default_rng(seed)
    t = ex.random_tree(rng, ops, 6, P)
    s = ex.simplify(t)
    assert ex.complexity(s) <= ex.complexity(t)
    X = rng.uniform(-5, 5, size=(100, P))
    a, b = ex.evaluate_batch(t, X), ex.evaluate_batch(s, X)
    assert np.array_equal(np.isnan(a), np.isnan(b))
    ok = ~np.isnan(a)
    assert np.allclose(a[ok], b[ok], rtol=1e-9, atol=1e-9)


def _representable(tree):
    # constants on a 1/8 grid render exactly at 3 decimals
    return ex.with_constants(tree, [round(c * 8) / 8 for c in ex.constants(tree)])


@settings(max_examples=300, deadline=None)
@given(seeds, st.sampled_from([ex.BASE_OPS, ex.DIV_EXP_OPS]))
def test_render_parse_round_trip(seed, ops):
    rng = np.random.default_rng(seed)
    t = _representable(ex.random_tree(rng, ops, 6, P))
    assert ex.parse(ex.render(t, 3)) == t


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_render_parse_close_for_any_constants(seed):
    rng = np.random.default_rng(seed)
    t = ex.random_tree(rng, ex.BASE_OPS, 3, P)
    back = ex.parse(ex.render(t, 6))
    X = rng.uniform(-1, 1, size=(50, P))
    assert np.allclose(ex.evaluate_batch(t, X), ex.evaluate_batch(back, X), atol=1e-5)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_evaluate_never_traps(seed):
    rng = np.random.default_rng(seed)
    t = ex.random_tree(rng, ex.DIV_EXP_OPS, 7, P)
    x = rng.normal(scale=rng.choice([1.0, 1e3, 1e150]), size=P)
    v = ex.evaluate(t, x)
    assert math.isfinite(v) or math.isnan(v)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_collect_terms_preserves_value(seed):
    rng = np.random.default_rng(seed)
    t = ex.random_tree(rng, ex.BASE_OPS, 5, P)
    c = ex.collect_terms(t)
    X = rng.uniform(-2, 2, size=(50, P))
    assert np.allclose(ex.evaluate_batch(t, X), ex.evaluate_batch(c, X), rtol=1e-7, atol=1e-7)


def test_collect_terms_folds_affine_rescaling():
    m, s = Const(2.0), Const(4.0)
    z = ex.div(ex.sub(Lag(1), m), s)
    t = ex.add(ex.mul(s, ex.add(ex.mul(Const(0.5), z), Const(0.25))), m)
    assert ex.render(ex.collect_terms(t)) == "2.000 + 0.500*y[t-1]"
