"""Expression trees over lagged inputs.

Trees are immutable dataclass nodes::

    Const(0.5)                      a real constant
    Lag(2)                          y[t-2]
    Unary("sin", child)             sin / cos / exp / neg
    Binary("add", left, right)      add / sub / mul / div

Evaluation is *protected*: a division by a denominator smaller than
``DIV_EPS`` in magnitude, an ``exp`` argument beyond ``EXP_LIMIT``, or any
other non-finite intermediate yields NaN (the non-finite flag) instead of
raising.

The text grammar produced by :func:`render` and read by :func:`parse` is::

    expr  := term (("+" | "-") term)*
    term  := unary (("*" | "/") unary)*
    unary := "-" unary | atom
    atom  := NUMBER | "y[t-" INT "]" | ("sin" | "cos" | "exp") "(" expr ")" | "(" expr ")"

Binary operators are left-associative.
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

DIV_EPS = 1e-12
EXP_LIMIT = 700.0

UNARY_OPS = ("sin", "cos", "exp", "neg")
BINARY_OPS = ("add", "sub", "mul", "div")
_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2}


class ExprError(ValueError):
    pass


class LagIndexError(ExprError, IndexError):
    pass


class ParseError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass(frozen=True, slots=True)
class Const:
    value: float


@dataclass(frozen=True, slots=True)
class Lag:
    index: int

    def __post_init__(self):
        if self.index < 1:
            raise ExprError(f"lag index must be >= 1, got {self.index}")


@dataclass(frozen=True, slots=True)
class Unary:
    op: str
    child: "Node"

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ExprError(f"unknown unary op {self.op!r}")


@dataclass(frozen=True, slots=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ExprError(f"unknown binary op {self.op!r}")


Node = Union[Const, Lag, Unary, Binary]


@dataclass(frozen=True)
class OperatorSet:
    unary: frozenset
    binary: frozenset

    def __post_init__(self):
        object.__setattr__(self, "unary", frozenset(self.unary))
        object.__setattr__(self, "binary", frozenset(self.binary))
        if not self.binary:
            raise ExprError("operator set needs at least one binary operator")
        if not self.unary <= set(UNARY_OPS) or not self.binary <= set(BINARY_OPS):
            raise ExprError("operator set contains unknown operators")


BASE_OPS = OperatorSet({"sin", "cos"}, {"add", "sub", "mul"})
DIV_EXP_OPS = OperatorSet({"sin", "cos", "exp"}, {"add", "sub", "mul", "div"})


# -- convenience constructors ---------------------------------------------


def add(a, b):
    return Binary("add", a, b)


def sub(a, b):
    return Binary("sub", a, b)


def mul(a, b):
    return Binary("mul", a, b)


def div(a, b):
    return Binary("div", a, b)


# -- traversal -------------------------------------------------------------


def complexity(tree: Node) -> int:
    """Number of nodes."""
    if isinstance(tree, Unary):
        return 1 + complexity(tree.child)
    if isinstance(tree, Binary):
        return 1 + complexity(tree.left) + complexity(tree.right)
    return 1


def depth(tree: Node) -> int:
    if isinstance(tree, Unary):
        return 1 + depth(tree.child)
    if isinstance(tree, Binary):
        return 1 + max(depth(tree.left), depth(tree.right))
    return 1


def iter_nodes(tree: Node, path: tuple = ()) -> Iterator[tuple[tuple, Node]]:
    """Pre-order ``(path, node)`` pairs; a path is a tuple of child indices."""
    yield path, tree
    if isinstance(tree, Unary):
        yield from iter_nodes(tree.child, path + (0,))
    elif isinstance(tree, Binary):
        yield from iter_nodes(tree.left, path + (0,))
        yield from iter_nodes(tree.right, path + (1,))


def get_at(tree: Node, path: Sequence[int]) -> Node:
    for i in path:
        tree = tree.child if isinstance(tree, Unary) else (tree.left, tree.right)[i]
    return tree


def replace_at(tree: Node, path: Sequence[int], new: Node) -> Node:
    if not path:
        return new
    head, rest = path[0], path[1:]
    if isinstance(tree, Unary):
        return Unary(tree.op, replace_at(tree.child, rest, new))
    if isinstance(tree, Binary):
        if head == 0:
            return Binary(tree.op, replace_at(tree.left, rest, new), tree.right)
        return Binary(tree.op, tree.left, replace_at(tree.right, rest, new))
    raise ExprError("path descends into a leaf")


def constants(tree: Node) -> list[float]:
    return [n.value for _, n in iter_nodes(tree) if isinstance(n, Const)]


def with_constants(tree: Node, values: Sequence[float]) -> Node:
    """Return ``tree`` with its constants (pre-order) replaced by ``values``."""
    it = iter(values)

    def rebuild(node):
        if isinstance(node, Const):
            return Const(float(next(it)))
        if isinstance(node, Unary):
            return Unary(node.op, rebuild(node.child))
        if isinstance(node, Binary):
            return Binary(node.op, rebuild(node.left), rebuild(node.right))
        return node

    return rebuild(tree)


def max_lag(tree: Node) -> int:
    return max((n.index for _, n in iter_nodes(tree) if isinstance(n, Lag)), default=0)


def uses_ops(tree: Node) -> set[str]:
    return {n.op for _, n in iter_nodes(tree) if isinstance(n, (Unary, Binary))}


# -- evaluation ------------------------------------------------------------


def is_flagged(value) -> bool:
    return not math.isfinite(value)


def _apply_unary(op, x):
    if op == "sin":
        return math.sin(x)
    if op == "cos":
        return math.cos(x)
    if op == "neg":
        return -x
    if x > EXP_LIMIT:
        return math.nan
    return math.exp(x)


def _apply_binary(op, a, b):
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if abs(b) < DIV_EPS:
        return math.nan
    return a / b


def evaluate(tree: Node, lags: Sequence[float]) -> float:
    """Evaluate at a single lag vector (``lags[0]`` is ``y[t-1]``).

    Returns NaN when the result is flagged non-finite.
    """

    def ev(node):
        if isinstance(node, Const):
            return node.value
        if isinstance(node, Lag):
            if node.index > len(lags):
                raise LagIndexError(f"y[t-{node.index}] needs {node.index} lags, got {len(lags)}")
            return float(lags[node.index - 1])
        if isinstance(node, Unary):
            x = ev(node.child)
            if not math.isfinite(x):
                return math.nan
            out = _apply_unary(node.op, x)
        else:
            a = ev(node.left)
            b = ev(node.right)
            if not (math.isfinite(a) and math.isfinite(b)):
                return math.nan
            out = _apply_binary(node.op, a, b)
        return out if math.isfinite(out) else math.nan

    return ev(tree)


def evaluate_batch(tree: Node, X: np.ndarray) -> np.ndarray:
    """Vectorised :func:`evaluate` over the rows of ``X`` (shape ``(n, p)``)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape

    def ev(node):
        if isinstance(node, Const):
            return np.full(n, node.value)
        if isinstance(node, Lag):
            if node.index > p:
                raise LagIndexError(f"y[t-{node.index}] needs {node.index} lags, got {p}")
            return X[:, node.index - 1]
        if isinstance(node, Unary):
            x = ev(node.child)
            if node.op == "sin":
                out = np.sin(x)
            elif node.op == "cos":
                out = np.cos(x)
            elif node.op == "neg":
                out = -x
            else:
                out = np.exp(np.where(x > EXP_LIMIT, np.nan, x))
        else:
            a = ev(node.left)
            b = ev(node.right)
            if node.op == "add":
                out = a + b
            elif node.op == "sub":
                out = a - b
            elif node.op == "mul":
                out = a * b
            else:
                out = a / np.where(np.abs(b) < DIV_EPS, np.nan, b)
        return np.where(np.isfinite(out), out, np.nan)

    with np.errstate(all="ignore"):
        return np.array(ev(tree), dtype=float, copy=True)


def _pdiv(a, b):
    bad = ~np.isfinite(b) | (np.abs(b) < DIV_EPS)
    return a / np.where(bad, np.nan, b)


def _pexp(x):
    return np.exp(np.where((x > EXP_LIMIT) | ~np.isfinite(x), np.nan, x))


_FUNC_SRC = {"sin": "_sin({})", "cos": "_cos({})", "exp": "_pexp({})", "neg": "(-{})"}
_BIN_SRC = {"add": "({} + {})", "sub": "({} - {})", "mul": "({} * {})", "div": "_pdiv({}, {})"}


def _source(tree: Node) -> str:
    count = 0

    def src(node):
        nonlocal count
        if isinstance(node, Const):
            count += 1
            return f"c[{count - 1}]"
        if isinstance(node, Lag):
            return f"X[:, {node.index - 1}]"
        if isinstance(node, Unary):
            return _FUNC_SRC[node.op].format(src(node.child))
        return _BIN_SRC[node.op].format(src(node.left), src(node.right))

    return src(tree)


@functools.lru_cache(maxsize=20000)
def _compile_source(source: str):
    env = {"_sin": np.sin, "_cos": np.cos, "_pexp": _pexp, "_pdiv": _pdiv}
    return eval(f"lambda X, c: {source}", env)  # noqa: S307 - source is generated from a tree


def compile_batch(tree: Node):
    """Return ``(fn, consts)`` with ``fn(X, consts)`` equal to :func:`evaluate_batch`.

    The compiled function is shared by every tree with the same shape, so
    constant refinement re-evaluates without rebuilding nodes. Only ``div``
    and ``exp`` can turn a non-finite intermediate back into a finite value,
    so guarding those two plus a final finiteness check reproduces the flag
    semantics.
    """
    fn = _compile_source(_source(tree))
    p_needed = max_lag(tree)

    def run(X, consts):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if p_needed > X.shape[1]:
            raise LagIndexError(f"y[t-{p_needed}] needs {p_needed} lags, got {X.shape[1]}")
        with np.errstate(all="ignore"):
            out = np.broadcast_to(np.asarray(fn(X, consts), dtype=float), (X.shape[0],))
            return np.where(np.isfinite(out), out, np.nan)

    return run, np.array(constants(tree), dtype=float)


# -- simplification --------------------------------------------------------


def _is_const(node, value=None):
    return isinstance(node, Const) and (value is None or node.value == value)


def _never_flags(node) -> bool:
    """True when the subtree cannot produce the non-finite flag for finite inputs."""
    return not ({"div", "exp"} & uses_ops(node))


def _fold_unary(op, c):
    out = _apply_unary(op, c)
    return Const(out) if math.isfinite(out) else None


def _fold_binary(op, a, b):
    out = _apply_binary(op, a, b)
    return Const(out) if math.isfinite(out) else None


def _simplify_node(node: Node) -> Node:
    if isinstance(node, Unary):
        child = node.child
        if isinstance(child, Const):
            folded = _fold_unary(node.op, child.value)
            if folded is not None:
                return folded
        if node.op == "neg" and isinstance(child, Unary) and child.op == "neg":
            return child.child
        return node

    if not isinstance(node, Binary):
        return node
    op, a, b = node.op, node.left, node.right
    if isinstance(a, Const) and isinstance(b, Const):
        folded = _fold_binary(op, a.value, b.value)
        if folded is not None:
            return folded
    neg_b = isinstance(b, Unary) and b.op == "neg"
    if op == "add":
        if _is_const(b, 0.0):
            return a
        if _is_const(a, 0.0):
            return b
        if neg_b:
            return Binary("sub", a, b.child)
        if isinstance(a, Unary) and a.op == "neg":
            return Binary("sub", b, a.child)
    elif op == "sub":
        if _is_const(b, 0.0):
            return a
        if a == b and _never_flags(a):
            return Const(0.0)
        if _is_const(a, 0.0):
            return _simplify_node(Unary("neg", b))
        if neg_b:
            return Binary("add", a, b.child)
    elif op == "mul":
        if _is_const(b, 1.0):
            return a
        if _is_const(a, 1.0):
            return b
        if (_is_const(a, 0.0) and _never_flags(b)) or (_is_const(b, 0.0) and _never_flags(a)):
            return Const(0.0)
        if _is_const(a, -1.0):
            return _simplify_node(Unary("neg", b))
        if _is_const(b, -1.0):
            return _simplify_node(Unary("neg", a))
    elif op == "div":
        if _is_const(b, 1.0):
            return a
        if _is_const(b, -1.0):
            return _simplify_node(Unary("neg", a))
    return node


def simplify(tree: Node) -> Node:
    """Apply value-preserving algebraic identities bottom-up.

    Every rule returns a value that is bit-identical to the original on
    inputs where the original is finite, and rules that could hide a
    non-finite flag (``x*0``, ``x-x``) are only used on subtrees free of
    ``div`` and ``exp``.
    """
    if isinstance(tree, Unary):
        tree = Unary(tree.op, simplify(tree.child))
    elif isinstance(tree, Binary):
        tree = Binary(tree.op, simplify(tree.left), simplify(tree.right))
    return _simplify_node(tree)


def _linear_form(node: Node) -> tuple[dict, float]:
    """Write ``node`` as ``const + sum(coef * atom)``; atoms are non-linear subtrees."""
    if isinstance(node, Const):
        return {}, node.value
    if isinstance(node, Lag):
        return {node: 1.0}, 0.0
    if isinstance(node, Unary):
        if node.op == "neg":
            terms, c = _linear_form(node.child)
            return {k: -v for k, v in terms.items()}, -c
        return {Unary(node.op, collect_terms(node.child)): 1.0}, 0.0
    (lt, lc), (rt, rc) = _linear_form(node.left), _linear_form(node.right)
    if node.op in ("add", "sub"):
        sign = 1.0 if node.op == "add" else -1.0
        terms = dict(lt)
        for k, v in rt.items():
            terms[k] = terms.get(k, 0.0) + sign * v
        return terms, lc + sign * rc
    if node.op == "mul" and not rt:
        return {k: v * rc for k, v in lt.items()}, lc * rc
    if node.op == "mul" and not lt:
        return {k: v * lc for k, v in rt.items()}, lc * rc
    if node.op == "div" and not rt and abs(rc) >= DIV_EPS:
        return {k: v / rc for k, v in lt.items()}, lc / rc
    return {Binary(node.op, collect_terms(node.left), collect_terms(node.right)): 1.0}, 0.0


def collect_terms(tree: Node) -> Node:
    """Expand constant scalings and collect like terms into ``c0 + c1*t1 + ...``.

    Intended for presentation: the result is algebraically equal to ``tree``
    but constants are re-associated, so values agree only to rounding error.
    Terms keep their first-appearance order and exact-zero coefficients drop.
    """
    terms, c = _linear_form(tree)
    out = None if c == 0.0 and terms else Const(c)
    for atom, coef in terms.items():
        if coef == 0.0:
            continue
        mag = abs(coef)
        term = atom if mag == 1.0 else mul(Const(mag), atom)
        if out is None:
            out = term if coef > 0 else Unary("neg", term)
        else:
            out = add(out, term) if coef > 0 else sub(out, term)
    return out if out is not None else Const(0.0)


# -- rendering -------------------------------------------------------------


def format_constant(value: float, precision: int) -> str:
    if value == 0.0:
        value = 0.0  # drop the sign of -0.0
    text = f"{value:.{precision}f}"
    if value != 0.0 and float(text) == 0.0:
        text = f"{value:.{precision}e}"
    return text


def _is_negative_prefix(node, precision) -> bool:
    if isinstance(node, Unary) and node.op == "neg":
        return True
    return isinstance(node, Const) and format_constant(node.value, precision).startswith("-")


def render(tree: Node, precision: int = 3) -> str:
    """Infix text in the ``y[t-k]`` grammar, constants fixed to ``precision`` places."""
    if precision < 1:
        raise ExprError("precision must be >= 1")

    def r(node):
        if isinstance(node, Const):
            return format_constant(node.value, precision)
        if isinstance(node, Lag):
            return f"y[t-{node.index}]"
        if isinstance(node, Unary):
            if node.op == "neg":
                inner = r(node.child)
                if isinstance(node.child, Binary) or _is_negative_prefix(node.child, precision):
                    inner = f"({inner})"
                return f"-{inner}"
            return f"{node.op}({r(node.child)})"
        prec = _PREC[node.op]
        left, right = r(node.left), r(node.right)
        if isinstance(node.left, Binary) and _PREC[node.left.op] < prec:
            left = f"({left})"
        if (isinstance(node.right, Binary) and _PREC[node.right.op] <= prec) or _is_negative_prefix(
            node.right, precision
        ):
            right = f"({right})"
        if prec == 1:
            return f"{left} {_SYMBOL[node.op]} {right}"
        return f"{left}{_SYMBOL[node.op]}{right}"

    return r(tree)


# -- parsing ---------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<lag>y\[t-(?P<k>\d+)\])"
    r"|(?P<func>sin|cos|exp)\b"
    r"|(?P<op>[-+*/()])"
    r")"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            # report the failing offset inside a partial y[t- ... token
            if text.startswith("y", pos):
                partial = re.match(r"y(\[(t(-(\d+)?)?)?)?", text[pos:])
                raise ParseError("malformed lag reference", pos + partial.end())
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        start = pos
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num")), start))
        elif m.group("lag") is not None:
            tokens.append(("lag", int(m.group("k")), start))
        elif m.group("func") is not None:
            tokens.append(("func", m.group("func"), start))
        else:
            tokens.append(("op", m.group("op"), start))
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


def parse(text: str) -> Node:
    """Inverse of :func:`render`; raises :class:`ParseError` with a character offset."""
    tokens = _tokenize(text)
    i = 0

    def peek():
        return tokens[i]

    def take(kind, value=None):
        nonlocal i
        tok = tokens[i]
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            raise ParseError(f"expected {want!r}", tok[2])
        i += 1
        return tok

    def expr():
        node = term()
        while peek()[0] == "op" and peek()[1] in "+-":
            op = "add" if take("op")[1] == "+" else "sub"
            node = Binary(op, node, term())
        return node

    def term():
        node = unary()
        while peek()[0] == "op" and peek()[1] in "*/":
            op = "mul" if take("op")[1] == "*" else "div"
            node = Binary(op, node, unary())
        return node

    def unary():
        if peek()[0] == "op" and peek()[1] == "-":
            take("op")
            if peek()[0] == "num":
                return Const(-take("num")[1])
            return Unary("neg", unary())
        return atom()

    def atom():
        kind, value, offset = peek()
        if kind == "num":
            take("num")
            return Const(value)
        if kind == "lag":
            take("lag")
            return Lag(value)
        if kind == "func":
            take("func")
            take("op", "(")
            inner = expr()
            take("op", ")")
            return Unary(value, inner)
        if kind == "op" and value == "(":
            take("op")
            inner = expr()
            take("op", ")")
            return inner
        raise ParseError("expected a number, lag, function or '('", offset)

    node = expr()
    if peek()[0] != "end":
        raise ParseError("trailing input", peek()[2])
    return node


# -- random generation -----------------------------------------------------


def random_leaf(rng: np.random.Generator, p: int, lag_prob: float = 0.5) -> Node:
    if rng.random() < lag_prob:
        return Lag(int(rng.integers(1, p + 1)))
    return Const(float(rng.standard_normal()))


def random_tree(
    rng: np.random.Generator,
    ops: OperatorSet,
    max_depth: int,
    p: int,
    *,
    leaf_prob: float = 0.3,
    lag_prob: float = 0.5,
) -> Node:
    """Grow a random tree of depth at most ``max_depth``.

    Internal nodes draw uniformly from the allowed operators (``neg`` is never
    emitted). Leaves are a lag with probability ``lag_prob``, otherwise a
    standard-normal constant.
    """
    if max_depth < 1:
        raise ExprError("max_depth must be >= 1")
    unary = sorted(ops.unary - {"neg"})
    binary = sorted(ops.binary)

    def grow(d):
        if d == 1 or rng.random() < leaf_prob:
            return random_leaf(rng, p, lag_prob)
        k = int(rng.integers(len(unary) + len(binary)))
        if k < len(unary):
            return Unary(unary[k], grow(d - 1))
        return Binary(binary[k - len(unary)], grow(d - 1), grow(d - 1))

    return grow(max_depth)
