"""
Node formula language.

Formulas are small R-like expressions evaluated for all units at once:

    plogis(-0.2 + W1/3)
    ifelse(nF > 0, sum(W1[[1:Kmax]])/nF, 0)
    mean(Var[[1:4]], na.rm=TRUE)

`V[[k]]` looks up V on the k-th friend of every unit (k = 0 is the unit
itself); `V[[lo:hi]]` yields an n x (hi-lo+1) matrix. `Kmax` may close a
range. `nF` is the per-unit friend count. `sum`/`mean` reduce matrices row by
row. MISSING is NaN and propagates through every operation; the two escape
hatches are the replaceNAw0 flag (applied at friend lookup) and na.rm=TRUE
inside sum/mean.

The grammar is documented in docs/grammar.md.
"""

from __future__ import annotations

import dataclasses
import logging
import re
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
from scipy import special

from src.errors import EvaluationError, ExprSyntaxError
from src.netgraph import MISSING, NetworkMatrix

logger = logging.getLogger(__name__)

RESERVED = frozenset({"nF", "Kmax"})
KMAX = "Kmax"


# --- AST -------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Num:
    value: float


@dataclasses.dataclass(frozen=True)
class Var:
    name: str


@dataclasses.dataclass(frozen=True)
class IndexRange:
    lo: int
    hi: Union[int, str]  # int or "Kmax"

    def resolve(self, kmax: int) -> List[int]:
        hi = kmax if self.hi == KMAX else int(self.hi)
        return list(range(self.lo, hi + 1))


@dataclasses.dataclass(frozen=True)
class FriendRef:
    name: str
    indices: Tuple[IndexRange, ...]

    @property
    def is_single(self) -> bool:
        return len(self.indices) == 1 and self.indices[0].hi == self.indices[0].lo


@dataclasses.dataclass(frozen=True)
class Call:
    func: str
    args: Tuple["Expression", ...]
    na_rm: bool = False


@dataclasses.dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expression"
    right: "Expression"


@dataclasses.dataclass(frozen=True)
class UnaryOp:
    op: str
    operand: "Expression"


Expression = Union[Num, Var, FriendRef, Call, BinOp, UnaryOp]
EXPRESSION_TYPES = (Num, Var, FriendRef, Call, BinOp, UnaryOp)


# --- function registry -----------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Function:
    name: str
    min_args: int
    max_args: Optional[int]
    impl: Callable
    na_rm: bool = False  # accepts na.rm=


FUNCTIONS: Dict[str, Function] = {}


def register_function(name: str, impl: Callable, min_args: int = 1, max_args: Optional[int] = 1, na_rm: bool = False) -> None:
    """Add a function to the formula whitelist. `impl(*values, na_rm=...)` gets evaluated arguments."""
    FUNCTIONS[name] = Function(name, min_args, max_args, impl, na_rm)


def _as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr[:, None]
    return arr


def _row_sum(*values, na_rm: bool = False):
    if all(np.ndim(v) == 0 for v in values):
        total = np.array([float(v) for v in values])
        return float(np.nansum(total) if na_rm else total.sum())
    parts = [_as_matrix(v) for v in values]
    n = max(p.shape[0] for p in parts)
    stacked = np.hstack([np.broadcast_to(p, (n, p.shape[1])) for p in parts])
    return np.nansum(stacked, axis=1) if na_rm else stacked.sum(axis=1)


def _row_mean(*values, na_rm: bool = False):
    if all(np.ndim(v) == 0 for v in values):
        total = np.array([float(v) for v in values])
        if na_rm:
            total = total[~np.isnan(total)]
            return float(total.mean()) if total.size else float("nan")
        return float(total.mean())
    parts = [_as_matrix(v) for v in values]
    n = max(p.shape[0] for p in parts)
    stacked = np.hstack([np.broadcast_to(p, (n, p.shape[1])) for p in parts])
    if not na_rm:
        return stacked.mean(axis=1)
    counts = (~np.isnan(stacked)).sum(axis=1)
    sums = np.nansum(stacked, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def _extreme(reducer: Callable, elementwise: Callable) -> Callable:
    def impl(*values, na_rm: bool = False):
        if len(values) == 1 and np.ndim(values[0]) == 2:
            return reducer(values[0], axis=1)
        out = values[0]
        for v in values[1:]:
            out = elementwise(out, v)
        return out

    return impl


def _ifelse(cond, yes, no, na_rm: bool = False):
    cond_arr = np.asarray(cond, dtype=float)
    out = np.where(cond_arr != 0, yes, no)
    out = np.where(np.isnan(cond_arr), np.nan, out)
    return float(out) if out.ndim == 0 else out


def _stack(*values, na_rm: bool = False):
    parts = [_as_matrix(v) for v in values]
    n = max(p.shape[0] for p in parts)
    return np.hstack([np.broadcast_to(p, (n, p.shape[1])) for p in parts])


register_function("sum", _row_sum, 1, None, na_rm=True)
register_function("mean", _row_mean, 1, None, na_rm=True)
register_function("plogis", lambda x, na_rm=False: special.expit(x))
register_function("log", lambda x, na_rm=False: np.log(x))
register_function("exp", lambda x, na_rm=False: np.exp(x))
register_function("abs", lambda x, na_rm=False: np.abs(x))
register_function("ifelse", _ifelse, 3, 3)
register_function("min", _extreme(np.min, np.minimum), 1, None)
register_function("max", _extreme(np.max, np.maximum), 1, None)
register_function("c", _stack, 1, None)


# --- tokenizer / parser ----------------------------------------------------

TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z][A-Za-z0-9._]*)
  | (?P<op>\[\[|\]\]|==|!=|<=|>=|[-+*/^(),:<>=&|!])
    """,
    re.VERBOSE,
)

COMPARE_OPS = {"<", ">", "<=", ">=", "==", "!="}


@dataclasses.dataclass
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> List[_Token]:
    tokens: List[_Token] = []
    pos = 0
    while pos < len(text):
        m = TOKEN_RE.match(text, pos)
        if not m:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", text, pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str, tok: _Token | None = None) -> ExprSyntaxError:
        tok = tok or self.tok
        return ExprSyntaxError(message, self.text, tok.pos)

    def expect(self, text: str) -> _Token:
        if self.tok.text != text:
            found = self.tok.text or "end of formula"
            raise self.error(f"expected {text!r}, found {found!r}")
        return self.advance()

    def parse(self) -> Expression:
        if self.tok.kind == "end":
            raise self.error("empty formula")
        expr = self.parse_or()
        if self.tok.kind != "end":
            raise self.error(f"unexpected {self.tok.text!r}")
        return expr

    def parse_or(self) -> Expression:
        left = self.parse_and()
        while self.tok.text == "|":
            self.advance()
            left = BinOp("|", left, self.parse_and())
        return left

    def parse_and(self) -> Expression:
        left = self.parse_not()
        while self.tok.text == "&":
            self.advance()
            left = BinOp("&", left, self.parse_not())
        return left

    def parse_not(self) -> Expression:
        if self.tok.text == "!":
            self.advance()
            return UnaryOp("!", self.parse_not())
        return self.parse_compare()

    def parse_compare(self) -> Expression:
        left = self.parse_additive()
        if self.tok.text in COMPARE_OPS:
            op = self.advance().text
            left = BinOp(op, left, self.parse_additive())
            if self.tok.text in COMPARE_OPS:
                raise self.error("comparisons cannot be chained")
        return left

    def parse_additive(self) -> Expression:
        left = self.parse_term()
        while self.tok.text in ("+", "-"):
            op = self.advance().text
            left = BinOp(op, left, self.parse_term())
        return left

    def parse_term(self) -> Expression:
        left = self.parse_unary()
        while self.tok.text in ("*", "/"):
            op = self.advance().text
            left = BinOp(op, left, self.parse_unary())
        return left

    def parse_unary(self) -> Expression:
        if self.tok.text in ("-", "+"):
            op = self.advance().text
            return UnaryOp(op, self.parse_unary())
        return self.parse_power()

    def parse_power(self) -> Expression:
        base = self.parse_primary()
        if self.tok.text == "^":
            self.advance()
            return BinOp("^", base, self.parse_unary())
        return base

    def parse_primary(self) -> Expression:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text))
        if tok.text == "(":
            self.advance()
            expr = self.parse_or()
            self.expect(")")
            return expr
        if tok.kind == "name":
            self.advance()
            if tok.text in ("TRUE", "FALSE"):
                return Num(1.0 if tok.text == "TRUE" else 0.0)
            if self.tok.text == "(":
                return self.parse_call(tok)
            if self.tok.text == "[[":
                return self.parse_friend_ref(tok)
            return Var(tok.text)
        found = tok.text or "end of formula"
        raise self.error(f"unexpected {found!r}")

    def parse_call(self, name_tok: _Token) -> Call:
        func = FUNCTIONS.get(name_tok.text)
        if func is None:
            raise self.error(f"unknown function {name_tok.text!r}", name_tok)
        self.expect("(")
        args: List[Expression] = []
        na_rm = False
        if self.tok.text != ")":
            while True:
                if self.tok.kind == "name" and self.tokens[self.i + 1].text == "=":
                    arg_tok = self.advance()
                    self.advance()
                    if arg_tok.text != "na.rm" or not func.na_rm:
                        raise self.error(f"unexpected named argument {arg_tok.text!r} for {func.name}", arg_tok)
                    value = self.advance()
                    if value.text not in ("TRUE", "FALSE"):
                        raise self.error("na.rm must be TRUE or FALSE", value)
                    na_rm = value.text == "TRUE"
                else:
                    args.append(self.parse_or())
                if self.tok.text != ",":
                    break
                self.advance()
        self.expect(")")
        if len(args) < func.min_args or (func.max_args is not None and len(args) > func.max_args):
            expected = f"{func.min_args}" if func.max_args == func.min_args else f"at least {func.min_args}"
            raise self.error(f"{func.name} takes {expected} argument(s), got {len(args)}", name_tok)
        return Call(func.name, tuple(args), na_rm)

    def parse_friend_ref(self, name_tok: _Token) -> FriendRef:
        self.expect("[[")
        indices = [self.parse_index()]
        while self.tok.text == ",":
            self.advance()
            indices.append(self.parse_index())
        self.expect("]]")
        return FriendRef(name_tok.text, tuple(indices))

    def parse_index(self) -> IndexRange:
        lo_tok = self.tok
        if lo_tok.text == "-":
            raise self.error("friend index must be non-negative")
        lo = self._int_token()
        if self.tok.text != ":":
            return IndexRange(lo, lo)
        self.advance()
        if self.tok.text == KMAX:
            self.advance()
            return IndexRange(lo, KMAX)
        if self.tok.text == "-":
            raise self.error("friend index must be non-negative")
        hi_tok = self.tok
        hi = self._int_token()
        if hi < lo:
            raise self.error(f"friend range {lo}:{hi} is decreasing", hi_tok)
        return IndexRange(lo, hi)

    def _int_token(self) -> int:
        tok = self.tok
        if tok.kind != "num" or not tok.text.isdigit():
            raise self.error(f"friend index must be a non-negative integer, found {tok.text or 'end of formula'!r}")
        self.advance()
        return int(tok.text)


def parse(text: str) -> Expression:
    """Parse formula text into an AST; numbers are accepted as-is."""
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        value = float(text)
        return UnaryOp("-", Num(-value)) if value < 0 else Num(value)
    return _Parser(str(text)).parse()


# --- printing --------------------------------------------------------------


def _format_num(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def to_text(expr: Expression) -> str:
    """Print an AST back to formula text; parse(to_text(e)) == e."""
    if isinstance(expr, Num):
        if expr.value < 0:
            return f"({_format_num(expr.value)})"
        return _format_num(expr.value)
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, FriendRef):
        parts = [str(r.lo) if r.hi == r.lo else f"{r.lo}:{r.hi}" for r in expr.indices]
        return f"{expr.name}[[{', '.join(parts)}]]"
    if isinstance(expr, Call):
        args = [to_text(a) for a in expr.args]
        if expr.na_rm:
            args.append("na.rm=TRUE")
        return f"{expr.func}({', '.join(args)})"
    if isinstance(expr, UnaryOp):
        return f"({expr.op}({to_text(expr.operand)}))"
    if isinstance(expr, BinOp):
        return f"({to_text(expr.left)} {expr.op} {to_text(expr.right)})"
    raise TypeError(f"not an expression: {expr!r}")


# --- analysis --------------------------------------------------------------


def walk(expr: Expression) -> Iterable[Expression]:
    yield expr
    if isinstance(expr, Call):
        for a in expr.args:
            yield from walk(a)
    elif isinstance(expr, BinOp):
        yield from walk(expr.left)
        yield from walk(expr.right)
    elif isinstance(expr, UnaryOp):
        yield from walk(expr.operand)


def dependencies(expr: Expression, exclude: Iterable[str] = ()) -> FrozenSet[str]:
    """Names of the columns an expression reads, minus reserved names and `exclude`."""
    skip = RESERVED | set(exclude)
    names = set()
    for node in walk(expr):
        if isinstance(node, (Var, FriendRef)) and node.name not in skip:
            names.add(node.name)
    return frozenset(names)


def uses_network(expr: Expression) -> bool:
    return any(isinstance(node, FriendRef) or (isinstance(node, Var) and node.name in RESERVED) for node in walk(expr))


def max_friend_width(expr: Expression) -> int:
    """Largest number of friend columns any lookup in `expr` requests without Kmax (0 if none)."""
    width = 0
    for node in walk(expr):
        if isinstance(node, FriendRef):
            for r in node.indices:
                if r.hi != KMAX:
                    width = max(width, int(r.hi))
    return width


# --- evaluation ------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class EvalContext:
    n: int
    columns: Mapping[str, np.ndarray]
    network: Optional[NetworkMatrix] = None
    bindings: Mapping[str, float] = dataclasses.field(default_factory=dict)
    replace_na_w0: bool = False
    node: Optional[str] = None  # for error messages

    def fail(self, message: str) -> EvaluationError:
        return EvaluationError(message, self.node)


def friend_lookup(column: np.ndarray, net: NetworkMatrix, indices: Iterable[int], replace_na_w0: bool = False) -> np.ndarray:
    """
    n x len(indices) matrix: index 0 is the unit's own value, index j its j-th
    friend's value, MISSING (NaN) when the unit has fewer than j friends.
    """
    idx = list(indices)
    column = np.asarray(column, dtype=float)
    out = np.empty((net.n, len(idx)), dtype=float)
    for c, j in enumerate(idx):
        if j < 0:
            raise EvaluationError(f"friend index {j} is negative")
        if j > net.kmax:
            raise EvaluationError(f"friend index {j} exceeds Kmax = {net.kmax}")
        if j == 0:
            out[:, c] = column
            continue
        friend = net.friends[:, j - 1]
        present = friend != MISSING
        values = np.full(net.n, 0.0 if replace_na_w0 else np.nan)
        values[present] = column[friend[present]]
        out[:, c] = values
    return out


def _propagate_nan(result, *operands):
    mask = None
    for x in operands:
        m = np.isnan(np.asarray(x, dtype=float))
        mask = m if mask is None else (mask | m)
    if mask is None or not np.any(mask):
        return result
    return np.where(mask, np.nan, result)


def _align(a, b):
    if np.ndim(a) == 1 and np.ndim(b) == 2:
        return a[:, None], b
    if np.ndim(a) == 2 and np.ndim(b) == 1:
        return a, b[:, None]
    return a, b


def _binary(op: str, a, b):
    a, b = _align(a, b)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if op == "+":
            return np.add(a, b)
        if op == "-":
            return np.subtract(a, b)
        if op == "*":
            return np.multiply(a, b)
        if op == "/":
            return np.divide(a, b)
        if op == "^":
            return np.power(a, b)
        if op in COMPARE_OPS:
            fn = {"<": np.less, ">": np.greater, "<=": np.less_equal, ">=": np.greater_equal, "==": np.equal, "!=": np.not_equal}[op]
            return _propagate_nan(fn(a, b).astype(float), a, b)
        if op == "&":
            return _propagate_nan(np.logical_and(np.nan_to_num(a) != 0, np.nan_to_num(b) != 0).astype(float), a, b)
        if op == "|":
            return _propagate_nan(np.logical_or(np.nan_to_num(a) != 0, np.nan_to_num(b) != 0).astype(float), a, b)
    raise EvaluationError(f"unknown operator {op!r}")


def _scalarize(value):
    arr = np.asarray(value, dtype=float)
    return float(arr) if arr.ndim == 0 else arr


def evaluate(expr: Expression, ctx: EvalContext):
    """Evaluate for all units: returns a float, a length-n column or an n x k matrix."""
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Var):
        return _lookup_var(expr.name, ctx)
    if isinstance(expr, FriendRef):
        return _eval_friend_ref(expr, ctx)
    if isinstance(expr, UnaryOp):
        value = evaluate(expr.operand, ctx)
        if expr.op == "-":
            return _scalarize(np.negative(value))
        if expr.op == "+":
            return value
        arr = np.asarray(value, dtype=float)
        return _scalarize(_propagate_nan((np.nan_to_num(arr) == 0).astype(float), arr))
    if isinstance(expr, BinOp):
        return _scalarize(_binary(expr.op, evaluate(expr.left, ctx), evaluate(expr.right, ctx)))
    if isinstance(expr, Call):
        func = FUNCTIONS.get(expr.func)
        if func is None:
            raise ctx.fail(f"unknown function {expr.func!r}")
        args = [evaluate(a, ctx) for a in expr.args]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return _scalarize(func.impl(*args, na_rm=expr.na_rm))
    raise TypeError(f"not an expression: {expr!r}")


def _lookup_var(name: str, ctx: EvalContext):
    if name in ctx.columns:
        return np.asarray(ctx.columns[name], dtype=float)
    if name == "nF":
        if ctx.network is None:
            raise ctx.fail("nF used but no network is attached")
        return ctx.network.n_friends.astype(float)
    if name == KMAX:
        if ctx.network is None:
            raise ctx.fail("Kmax used but no network is attached")
        return float(ctx.network.kmax)
    if name in ctx.bindings:
        return float(ctx.bindings[name])
    raise ctx.fail(f"reference to undefined variable {name!r}")


def _eval_friend_ref(ref: FriendRef, ctx: EvalContext) -> np.ndarray:
    if ctx.network is None:
        raise ctx.fail(f"{ref.name}[[...]] used but no network is attached")
    if ref.name not in ctx.columns:
        if ref.name in ctx.bindings or ref.name in RESERVED:
            raise ctx.fail(f"friend lookup of scalar {ref.name!r}")
        raise ctx.fail(f"reference to undefined variable {ref.name!r}")
    kmax = ctx.network.kmax
    indices: List[int] = []
    for r in ref.indices:
        resolved = r.resolve(kmax)
        if not resolved:
            raise ctx.fail(f"friend range {r.lo}:{r.hi} is empty because Kmax = {kmax}")
        if resolved[-1] > kmax:
            raise ctx.fail(f"friend index {resolved[-1]} exceeds Kmax = {kmax}")
        indices.extend(resolved)
    out = friend_lookup(ctx.columns[ref.name], ctx.network, indices, ctx.replace_na_w0)
    if ref.is_single:
        return out[:, 0]
    return out
