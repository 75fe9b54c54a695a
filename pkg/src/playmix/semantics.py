"""Exact trace semantics.

A term denotes a map from plays to rationals (the chance that running the
program produces the given request/response prefix).  Values here are exact:
generated branch families are summed in closed form by finding the index
past which a branch's value at the queried play can no longer change
(iterate/fold growth disappears below the reachable depth; affine-indexed
symbols stop matching any symbol occurring in the play).

Intervals are kept as the certification vehicle for truncated operations
(head enumeration of index-varying families); on the supported term language
trace values themselves come out exact (lo == hi).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

from .core import (
    Choice, CoeffFamily, Compr, FoldGen, GeneratorUnsupported, Hole,
    InvalidInput, IterN, IterateGen, MapGen, NatExpr, Play, PolyGeo,
    Req, ReqFam, Signature, SubtractionUnderflow, Sum, Sym, Term,
    UnknownSymbol, ZeroProbabilityHead, _free_vars, _poly_geo_sum, _poly_shift,
    context_hole_position, exchange_diagonal, family_tail, format_play,
    gen_branch, is_diagonal_sum, subst_term, weight, EMPTY_PLAY,
)

DEFAULT_EPS = Fraction(1, 2 ** 20)


# ---------------------------------------------------------------------------
# intervals

@dataclass(frozen=True)
class Interval:
    """Closed rational interval certifying a value."""

    lo: Fraction
    hi: Fraction

    def __post_init__(self):
        if self.lo > self.hi:
            raise InvalidInput(f"empty interval [{self.lo}, {self.hi}]")

    @staticmethod
    def exact(q: Fraction) -> "Interval":
        q = Fraction(q)
        return Interval(q, q)

    @property
    def is_exact(self) -> bool:
        return self.lo == self.hi

    @property
    def width(self) -> Fraction:
        return self.hi - self.lo

    def __add__(self, other: "Interval") -> "Interval":
        return Interval(self.lo + other.lo, self.hi + other.hi)

    def __sub__(self, other: "Interval") -> "Interval":
        return Interval(self.lo - other.hi, self.hi - other.lo)

    def scale(self, q: Fraction) -> "Interval":
        if q >= 0:
            return Interval(self.lo * q, self.hi * q)
        return Interval(self.hi * q, self.lo * q)

    def disjoint(self, other: "Interval") -> bool:
        return self.hi < other.lo or other.hi < self.lo


ZERO_IV = Interval(Fraction(0), Fraction(0))
ONE_IV = Interval(Fraction(1), Fraction(1))


# ---------------------------------------------------------------------------
# eventual-constancy thresholds

def _sym_var_exprs(term: Term, var: str, acc: list) -> None:
    """Collect affine index expressions mentioning var, from symbols anywhere."""
    def visit_sym(sym: Sym):
        for ix in sym.indices:
            if isinstance(ix, NatExpr) and ix.coeff_of(var):
                acc.append(ix)

    if isinstance(term, Req):
        visit_sym(term.sym)
        for ch in term.children:
            _sym_var_exprs(ch, var, acc)
    elif isinstance(term, ReqFam):
        visit_sym(term.sym)
        _sym_var_exprs(term.body, var, acc)
    elif isinstance(term, Choice):
        _sym_var_exprs(term.left, var, acc)
        _sym_var_exprs(term.right, var, acc)
    elif isinstance(term, Sum):
        for b in term.branches:
            _sym_var_exprs(b, var, acc)
        gen = term.gen
        if isinstance(gen, MapGen):
            _sym_var_exprs(gen.body, var, acc)
        elif isinstance(gen, IterateGen):
            _sym_var_exprs(gen.ctx, var, acc)
            _sym_var_exprs(gen.base, var, acc)
        elif isinstance(gen, FoldGen):
            _sym_var_exprs(gen.step, var, acc)
            _sym_var_exprs(gen.base, var, acc)
    elif isinstance(term, Compr):
        _sym_var_exprs(term.body, var, acc)
    elif isinstance(term, IterN):
        _sym_var_exprs(term.ctx, var, acc)
        _sym_var_exprs(term.base, var, acc)
    elif isinstance(term, Hole):
        pass
    else:
        raise TypeError(f"not a term: {term!r}")


def _structural_var_use(term: Term, var: str) -> bool:
    """Does var control structure (comprehension bound / iteration count)?"""
    if isinstance(term, Req):
        return any(_structural_var_use(c, var) for c in term.children)
    if isinstance(term, ReqFam):
        return _structural_var_use(term.body, var)
    if isinstance(term, Choice):
        return _structural_var_use(term.left, var) or _structural_var_use(term.right, var)
    if isinstance(term, Sum):
        if any(_structural_var_use(b, var) for b in term.branches):
            return True
        gen = term.gen
        if isinstance(gen, MapGen):
            return _structural_var_use(gen.body, var)
        if isinstance(gen, IterateGen):
            return _structural_var_use(gen.ctx, var) or _structural_var_use(gen.base, var)
        if isinstance(gen, FoldGen):
            return _structural_var_use(gen.step, var) or _structural_var_use(gen.base, var)
        return False
    if isinstance(term, Compr):
        return bool(term.bound.coeff_of(var)) or _structural_var_use(term.body, var)
    if isinstance(term, IterN):
        return bool(term.count.coeff_of(var)) or _structural_var_use(term.ctx, var) \
            or _structural_var_use(term.base, var)
    if isinstance(term, Hole):
        return False
    raise TypeError(f"not a term: {term!r}")


def _expr_threshold(exprs: list, imax: int) -> int:
    """Least n such that every expression exceeds imax from n on."""
    j = 0
    for e in exprs:
        a = sum(c for _, c in e.terms)
        b = e.const
        if b > imax:
            continue
        # smallest n with a*n + b > imax (other variables only increase it)
        j = max(j, (imax - b) // a + 1)
    return j


def stabilization_index(term: Sum, play: Play, k: int) -> int:
    """Generator index past which branch values at the play suffix are constant."""
    remaining = len(play.pairs) - k + (1 if play.dangling is not None else 0)
    imax = -1
    for idx in range(k, len(play.pairs)):
        imax = max(imax, play.pairs[idx][0].max_index())
    if play.dangling is not None:
        imax = max(imax, play.dangling.max_index())
    gen = term.gen
    exprs: list = []
    if isinstance(gen, MapGen):
        _sym_var_exprs(gen.body, gen.var, exprs)
        j = _expr_threshold(exprs, imax)
        if _structural_var_use(gen.body, gen.var):
            if (isinstance(gen.body, IterN)
                    and gen.body.count.terms == ((gen.var, 1),)):
                # constant once the context is iterated past the play suffix
                j = max(j, remaining + 1 - gen.body.count.const, 0)
            else:
                raise GeneratorUnsupported(
                    "family index controls branch structure; cannot stabilise")
        return j
    if isinstance(gen, IterateGen):
        return remaining + 1
    if isinstance(gen, FoldGen):
        _sym_var_exprs(gen.step, gen.var, exprs)
        _sym_var_exprs(gen.base, gen.var, exprs)
        return max(remaining + 1, _expr_threshold(exprs, imax))
    raise TypeError(f"not a generator: {gen!r}")


# ---------------------------------------------------------------------------
# exact play values

@functools.lru_cache(maxsize=None)
def _value_at(term: Term, play: Play, k: int) -> Fraction:
    if k == len(play.pairs) and play.dangling is None:
        return Fraction(1)
    if k < len(play.pairs):
        out, inp = play.pairs[k]
        has_input = True
    else:
        out, inp = play.dangling, None
        has_input = False
    if isinstance(term, Req):
        if term.sym != out:
            return Fraction(0)
        if not has_input:
            return Fraction(1)
        if not (0 <= inp < len(term.children)):
            raise InvalidInput(f"input {inp} out of range for '{term.sym}'")
        return _value_at(term.children[inp], play, k + 1)
    if isinstance(term, ReqFam):
        if term.sym != out:
            return Fraction(0)
        if not has_input:
            return Fraction(1)
        return _value_at(subst_term(term.body, {term.var: inp}), play, k + 1)
    if isinstance(term, Choice):
        return (term.p * _value_at(term.left, play, k)
                + (1 - term.p) * _value_at(term.right, play, k))
    if isinstance(term, Sum):
        if term.gen is not None and is_diagonal_sum(term):
            term = exchange_diagonal(term)
        total = Fraction(0)
        for coeff, branch in zip(term.coeffs.explicit, term.branches):
            total += coeff * _value_at(branch, play, k)
        if term.gen is not None:
            total += _tail_value(term, play, k)
        return total
    raise TypeError(f"cannot evaluate {term!r}")


def _tail_value(term: Sum, play: Play, k: int) -> Fraction:
    offset = len(term.branches)
    j = stabilization_index(term, play, k)
    total = Fraction(0)
    for g in range(j):
        total += term.coeffs.coeff(offset + g) * _value_at(gen_branch(term.gen, g), play, k)
    const = _value_at(gen_branch(term.gen, j), play, k)
    if const:
        total += family_tail(term.coeffs, offset + j) * const
    return total


def term_value(term: Term, play: Play) -> Fraction:
    """Exact value of a closed term at a play."""
    return _value_at(term, play, 0)


# ---------------------------------------------------------------------------
# measure views

class MeasureView:
    """A (sub-)probability play measure presented by terms and arithmetic."""

    def value(self, play: Play) -> Fraction:
        raise NotImplementedError

    def weight(self) -> Fraction:
        raise NotImplementedError


@dataclass(frozen=True)
class TermMeasure(MeasureView):
    term: Term
    scale: Fraction = Fraction(1)

    def value(self, play: Play) -> Fraction:
        return self.scale * term_value(self.term, play)

    def weight(self) -> Fraction:
        return self.scale * weight(self.term)


@dataclass(frozen=True)
class ZeroMeasure(MeasureView):
    def value(self, play: Play) -> Fraction:
        return Fraction(0)

    def weight(self) -> Fraction:
        return Fraction(0)


@dataclass(frozen=True)
class SumMeasure(MeasureView):
    parts: tuple

    def value(self, play: Play) -> Fraction:
        return sum((p.value(play) for p in self.parts), Fraction(0))

    def weight(self) -> Fraction:
        return sum((p.weight() for p in self.parts), Fraction(0))


@dataclass(frozen=True)
class DiffMeasure(MeasureView):
    plus: MeasureView
    minus: MeasureView

    def value(self, play: Play) -> Fraction:
        v = self.plus.value(play) - self.minus.value(play)
        if v < 0:
            raise SubtractionUnderflow(
                f"negative mass {v} at play '{format_play(play)}'")
        return v

    def weight(self) -> Fraction:
        return self.plus.weight() - self.minus.weight()


def as_measure(m: Union[MeasureView, Term]) -> MeasureView:
    if isinstance(m, MeasureView):
        return m
    return TermMeasure(m, Fraction(1))


def measure_add(m1: MeasureView, m2: MeasureView) -> MeasureView:
    m1, m2 = as_measure(m1), as_measure(m2)
    if isinstance(m1, ZeroMeasure):
        return m2
    if isinstance(m2, ZeroMeasure):
        return m1
    parts = []
    for m in (m1, m2):
        parts.extend(m.parts if isinstance(m, SumMeasure) else (m,))
    return SumMeasure(tuple(parts))


def measure_scale(m: MeasureView, q: Fraction) -> MeasureView:
    q = Fraction(q)
    if q < 0:
        raise InvalidInput("measures cannot be scaled by a negative factor")
    if q == 0:
        return ZeroMeasure()
    m = as_measure(m)
    if isinstance(m, TermMeasure):
        return TermMeasure(m.term, m.scale * q)
    if isinstance(m, ZeroMeasure):
        return m
    if isinstance(m, SumMeasure):
        return SumMeasure(tuple(measure_scale(p, q) for p in m.parts))
    if isinstance(m, DiffMeasure):
        return DiffMeasure(measure_scale(m.plus, q), measure_scale(m.minus, q))
    raise TypeError(f"not a measure: {m!r}")


def measure_sub(m1: MeasureView, m2: MeasureView) -> MeasureView:
    m1, m2 = as_measure(m1), as_measure(m2)
    if m1.weight() < m2.weight():
        raise SubtractionUnderflow(
            f"total weight {m1.weight()} < {m2.weight()}")
    if isinstance(m2, ZeroMeasure):
        return m1
    return DiffMeasure(m1, m2)


def trace_value(m: Union[MeasureView, Term], play: Play,
                eps: Fraction = DEFAULT_EPS) -> Interval:
    """Certified value of the measure at the play (exact on this term language)."""
    return Interval.exact(as_measure(m).value(play))


# ---------------------------------------------------------------------------
# head distributions

def _solve_affine(expr_indices: tuple, target_indices: tuple, var: str):
    """Solve sym index expressions == target for var; None if unsolvable."""
    solution = None
    for e, t in zip(expr_indices, target_indices):
        if isinstance(e, int):
            if e != t:
                return None
            continue
        a = e.coeff_of(var)
        rest = [v for v in e.vars() if v != var]
        if rest:
            raise GeneratorUnsupported("symbol index uses several open variables")
        if a == 0:
            if e.const != t:
                return None
            continue
        num = t - e.const
        if num % a != 0 or num < 0:
            return None
        cand = num // a
        if solution is not None and cand != solution:
            return None
        solution = cand
    return solution


def _root_sym(term: Term) -> Sym:
    if isinstance(term, (Req, ReqFam)):
        return term.sym
    if isinstance(term, IterN) and term.count.const >= 1:
        # at least one context layer wraps the base, so the root is fixed
        return _root_sym(term.ctx)
    raise GeneratorUnsupported("generated branch is not request-rooted")


def term_heads(term: Term, eps: Fraction) -> tuple:
    """Exact head masses as a dict Sym -> Fraction, plus unenumerated tail mass
    (only index-varying families are ever truncated, at total mass <= eps)."""
    if isinstance(term, (Req, ReqFam)):
        return {term.sym: Fraction(1)}, Fraction(0)
    if isinstance(term, Choice):
        lh, lt = term_heads(term.left, eps)
        rh, rt = term_heads(term.right, eps)
        out = {}
        for sym, q in lh.items():
            out[sym] = out.get(sym, Fraction(0)) + term.p * q
        for sym, q in rh.items():
            out[sym] = out.get(sym, Fraction(0)) + (1 - term.p) * q
        return out, term.p * lt + (1 - term.p) * rt
    if isinstance(term, Sum):
        if term.gen is not None and is_diagonal_sum(term):
            term = exchange_diagonal(term)
        out: dict = {}
        trunc = Fraction(0)

        def add(sym: Sym, q: Fraction):
            if q:
                out[sym] = out.get(sym, Fraction(0)) + q

        for coeff, branch in zip(term.coeffs.explicit, term.branches):
            bh, bt = term_heads(branch, eps)
            for sym, q in bh.items():
                add(sym, coeff * q)
            trunc += coeff * bt
        if term.gen is not None:
            gh, gt = _gen_heads(term, eps)
            for sym, q in gh.items():
                add(sym, q)
            trunc += gt
        return out, trunc
    raise TypeError(f"cannot take heads of {term!r}")


def _gen_heads(term: Sum, eps: Fraction) -> tuple:
    gen = term.gen
    offset = len(term.branches)
    cf = term.coeffs
    out: dict = {}
    trunc = Fraction(0)

    def add(sym: Sym, q: Fraction):
        if q:
            out[sym] = out.get(sym, Fraction(0)) + q

    if isinstance(gen, IterateGen):
        add(_root_sym(gen.base), cf.coeff(offset))
        add(_root_sym(gen.ctx), family_tail(cf, offset + 1))
        return out, trunc
    if isinstance(gen, FoldGen):
        base0 = _root_sym(subst_term(gen.base, {gen.var: 0}))
        add(base0, cf.coeff(offset))
        step_sym = _root_sym(gen.step)
        step0 = step_sym.subst({gen.stepvar: 0})
        if step0.is_concrete:
            add(step0, family_tail(cf, offset + 1))
            return out, trunc
        g = 1
        while family_tail(cf, offset + g) > eps:
            add(step0.subst({gen.var: g}), cf.coeff(offset + g))
            g += 1
        return out, family_tail(cf, offset + g)
    if isinstance(gen, MapGen):
        if gen.var not in _free_vars(gen.body):
            # constant family: semantically tail-mass * body, any body shape
            bh, bt = term_heads(gen.body, eps)
            w = family_tail(cf, offset)
            for sym, q in bh.items():
                add(sym, w * q)
            return out, trunc + w * bt
        sym = _root_sym(gen.body)
        fixed = sym.subst({})
        if fixed.is_concrete:
            add(fixed, family_tail(cf, offset))
            return out, trunc
        g = 0
        while family_tail(cf, offset + g) > eps:
            add(sym.subst({gen.var: g}), cf.coeff(offset + g))
            g += 1
        return out, family_tail(cf, offset + g)
    raise TypeError(f"not a generator: {gen!r}")


def head_distribution(m: Union[MeasureView, Term], eps: Fraction = DEFAULT_EPS,
                      sig: Optional[Signature] = None) -> list:
    """Distribution over first outputs: list of (Sym, Interval), exact entries;
    entries cover the total weight within eps."""
    m = as_measure(m)
    entries = _measure_heads(m, eps)
    items = sorted(entries.items(), key=(lambda kv: sig.sym_key(kv[0])) if sig else
                   (lambda kv: (kv[0].base, kv[0].indices)))
    return [(sym, Interval.exact(q)) for sym, q in items if q]


def _measure_heads(m: MeasureView, eps: Fraction) -> dict:
    if isinstance(m, TermMeasure):
        h, _ = term_heads(m.term, eps)
        return {sym: m.scale * q for sym, q in h.items()}
    if isinstance(m, ZeroMeasure):
        return {}
    if isinstance(m, SumMeasure):
        out: dict = {}
        for p in m.parts:
            for sym, q in _measure_heads(p, eps).items():
                out[sym] = out.get(sym, Fraction(0)) + q
        return out
    if isinstance(m, DiffMeasure):
        out = dict(_measure_heads(m.plus, eps))
        for sym, q in _measure_heads(m.minus, eps).items():
            v = out.get(sym, Fraction(0)) - q
            if v < 0:
                raise SubtractionUnderflow(f"negative head mass for '{sym}'")
            out[sym] = v
        return out
    raise TypeError(f"not a measure: {m!r}")


# ---------------------------------------------------------------------------
# conditioning

def cond_term(term: Term, k: Sym, i: int, eps: Fraction = DEFAULT_EPS) -> tuple:
    """Head mass of k and the renormalised continuation after output k, input i.

    Returns (mass, term); mass 0 comes with term None.  Exact for constant or
    solvable index-varying families.
    """
    pieces, mass = _cond_pieces(term, k, i, eps)
    if mass == 0:
        return Fraction(0), None
    return mass, _assemble(pieces, mass)


class _FamilyPiece:
    """A conditioned generated family: coefficient family + generator."""

    def __init__(self, coeffs: CoeffFamily, gen):
        self.coeffs = coeffs
        self.gen = gen
        self.mass = family_tail(coeffs, 0)


def _scale_piece(item, q: Fraction):
    if isinstance(item, _FamilyPiece):
        return _FamilyPiece(CoeffFamily((), item.coeffs.tail.scaled(q)), item.gen)
    w, t = item
    return (q * w, t)


def _cond_pieces(term: Term, k: Sym, i: int, eps: Fraction) -> tuple:
    """List of weighted pieces (Fraction, Term) | _FamilyPiece and total mass."""
    if isinstance(term, Req):
        if term.sym != k:
            return [], Fraction(0)
        if not (0 <= i < len(term.children)):
            raise InvalidInput(f"input {i} out of range for '{term.sym}'")
        return [(Fraction(1), term.children[i])], Fraction(1)
    if isinstance(term, ReqFam):
        if term.sym != k:
            return [], Fraction(0)
        if i < 0:
            raise InvalidInput("negative input")
        return [(Fraction(1), subst_term(term.body, {term.var: i}))], Fraction(1)
    if isinstance(term, Choice):
        lp, lm = _cond_pieces(term.left, k, i, eps)
        rp, rm = _cond_pieces(term.right, k, i, eps)
        pieces = [_scale_piece(item, term.p) for item in lp]
        pieces += [_scale_piece(item, 1 - term.p) for item in rp]
        return pieces, term.p * lm + (1 - term.p) * rm
    if isinstance(term, Sum):
        if term.gen is not None and is_diagonal_sum(term):
            term = exchange_diagonal(term)
        pieces = []
        mass = Fraction(0)
        for coeff, branch in zip(term.coeffs.explicit, term.branches):
            bp, bm = _cond_pieces(branch, k, i, eps)
            pieces += [_scale_piece(item, coeff) for item in bp]
            mass += coeff * bm
        if term.gen is not None:
            fam_pieces, fam_mass = _cond_gen(term, k, i, eps)
            pieces.extend(fam_pieces)
            mass += fam_mass
        return pieces, mass
    raise TypeError(f"cannot condition {term!r}")


def _cond_gen(term: Sum, k: Sym, i: int, eps: Fraction) -> tuple:
    """Pieces contributed by the generated tail of a sum."""
    gen = term.gen
    offset = len(term.branches)
    cf = term.coeffs
    tail = cf.tail
    pieces: list = []
    mass = Fraction(0)

    def explicit(w: Fraction, t: Term):
        nonlocal mass
        if w:
            pieces.append((w, t))
            mass += w

    def family(coeffs: CoeffFamily, g):
        nonlocal mass
        fp = _FamilyPiece(coeffs, g)
        if fp.mass:
            pieces.append(fp)
            mass += fp.mass

    if isinstance(gen, IterateGen):
        hole = context_hole_position(gen.ctx)
        base_sym = _root_sym(gen.base)
        if base_sym == k:
            explicit(cf.coeff(offset), _child_of(gen.base, i))
        if gen.ctx.sym == k:
            if not (0 <= i < len(gen.ctx.children)):
                raise InvalidInput(f"input {i} out of range for '{gen.ctx.sym}'")
            if i == hole:
                family(CoeffFamily((), tail.shifted(1)), gen)
            else:
                explicit(tail.tail_from(1), gen.ctx.children[i])
        return pieces, mass
    if isinstance(gen, FoldGen):
        hole = context_hole_position(gen.step)
        base0 = subst_term(gen.base, {gen.var: 0})
        if _root_sym(base0) == k:
            explicit(cf.coeff(offset), _child_of(base0, i))
        step_sym = gen.step.sym.subst({gen.stepvar: 0})
        if step_sym.is_concrete:
            if step_sym == k:
                if not (0 <= i < len(gen.step.children)):
                    raise InvalidInput(f"input {i} out of range for '{step_sym}'")
                if i == hole:
                    shifted_step = subst_term(
                        gen.step,
                        {gen.stepvar: NatExpr(1, ((gen.stepvar, 1),)),
                         gen.var: NatExpr(1, ((gen.var, 1),))})
                    shifted_base = subst_term(
                        gen.base, {gen.var: NatExpr(1, ((gen.var, 1),))})
                    family(CoeffFamily((), tail.shifted(1)),
                           FoldGen(gen.var, gen.stepvar, shifted_step, shifted_base))
                else:
                    child = subst_term(gen.step.children[i], {gen.stepvar: 0})
                    if not _free_vars(child):
                        explicit(tail.tail_from(1), child)
                    else:
                        body = subst_term(child, {gen.var: NatExpr(1, ((gen.var, 1),))})
                        family(CoeffFamily((), tail.shifted(1)), MapGen(gen.var, body))
        else:
            g0 = _solve_affine(step_sym.indices, k.indices, gen.var) \
                if step_sym.base == k.base else None
            if g0 is not None and g0 >= 1:
                branch = gen_branch(gen, g0)
                explicit(cf.coeff(offset + g0), _child_of(branch, i))
        return pieces, mass
    if isinstance(gen, MapGen):
        if gen.var not in _free_vars(gen.body):
            bp, bm = _cond_pieces(gen.body, k, i, eps)
            w = family_tail(cf, offset)
            return [_scale_piece(item, w) for item in bp], w * bm
        sym = _root_sym(gen.body)
        fixed = sym.subst({})
        if fixed.is_concrete:
            if fixed == k:
                child_tpl = _child_template(gen.body, i, gen.var)
                if not _free_vars(child_tpl):
                    explicit(tail.tail_from(0), child_tpl)
                else:
                    family(CoeffFamily((), tail), _as_gen(gen.var, child_tpl))
        elif sym.base == k.base:
            g0 = _solve_affine(sym.indices, k.indices, gen.var)
            if g0 is not None:
                explicit(cf.coeff(offset + g0),
                         _child_of(gen_branch(gen, g0), i))
        return pieces, mass
    raise TypeError(f"not a generator: {gen!r}")


def _child_of(term: Term, i: int) -> Term:
    if isinstance(term, Req):
        if not (0 <= i < len(term.children)):
            raise InvalidInput(f"input {i} out of range for '{term.sym}'")
        return term.children[i]
    if isinstance(term, ReqFam):
        if i < 0:
            raise InvalidInput("negative input")
        return subst_term(term.body, {term.var: i})
    raise GeneratorUnsupported("branch is not request-rooted")


def _as_gen(var: str, body: Term):
    """Prefer the iterate form when a map body is a pure counted iteration."""
    if (isinstance(body, IterN) and body.count == NatExpr(0, ((var, 1),))
            and not _free_vars(body.ctx) and not _free_vars(body.base)):
        return IterateGen(body.ctx, body.base)
    return MapGen(var, body)


def _child_template(body: Term, i: int, var: str) -> Term:
    """Child template of a request-rooted map body (may keep var open)."""
    if isinstance(body, Req):
        if not (0 <= i < len(body.children)):
            raise InvalidInput(f"input {i} out of range for '{body.sym}'")
        return body.children[i]
    if isinstance(body, ReqFam):
        return subst_term(body.body, {body.var: i})
    if isinstance(body, IterN) and body.count.const >= 1:
        hole = context_hole_position(body.ctx)
        if i == hole:
            return IterN(NatExpr(body.count.const - 1, body.count.terms),
                         body.ctx, body.base)
        if not (0 <= i < len(body.ctx.children)):
            raise InvalidInput(f"input {i} out of range for '{body.ctx.sym}'")
        return body.ctx.children[i]
    raise GeneratorUnsupported("map body is not request-rooted")


def _assemble(pieces: list, mass: Fraction) -> Term:
    """Combine conditioned pieces into one weight-1 term."""
    explicit = [item for item in pieces
                if not isinstance(item, _FamilyPiece) and item[0]]
    families = [item for item in pieces if isinstance(item, _FamilyPiece)]
    if not families and len(explicit) == 1 and explicit[0][0] == mass:
        return explicit[0][1]
    if not explicit and len(families) == 1 and families[0].mass == mass:
        fam = families[0]
        return Sum(CoeffFamily((), fam.coeffs.tail.scaled(Fraction(1) / mass)
                               if mass != 1 else fam.coeffs.tail), (), fam.gen)
    coeffs = [w / mass for w, _ in explicit]
    branches = [t for _, t in explicit]
    gen = None
    tailpg = None
    if len(families) == 1:
        fam = families[0]
        gen = fam.gen
        tailpg = fam.coeffs.tail.scaled(Fraction(1) / mass) if mass != 1 else fam.coeffs.tail
    else:
        for fam in families:
            sub = Sum(CoeffFamily((), fam.coeffs.tail.scaled(Fraction(1) / fam.mass)
                                  if fam.mass != 1 else fam.coeffs.tail), (), fam.gen)
            coeffs.append(fam.mass / mass)
            branches.append(sub)
    return Sum(CoeffFamily(tuple(coeffs), tailpg), tuple(branches), gen)


def condition(m: Union[MeasureView, Term], k: Sym, i: int,
              eps: Fraction = DEFAULT_EPS) -> MeasureView:
    """Renormalised continuation measure after output k and input i."""
    m = as_measure(m)
    if isinstance(m, TermMeasure):
        mass, t = cond_term(m.term, k, i, eps)
        if mass == 0:
            raise ZeroProbabilityHead(f"head '{k}' carries no mass")
        return TermMeasure(t, Fraction(1))
    if isinstance(m, SumMeasure):
        # renormalised mixture of per-part continuations
        parts = []
        total = Fraction(0)
        for p in m.parts:
            if not isinstance(p, TermMeasure):
                raise GeneratorUnsupported("condition needs term-backed measures")
            mass, t = cond_term(p.term, k, i, eps)
            if mass:
                parts.append(TermMeasure(t, p.scale * mass))
                total += p.scale * mass
        if total == 0:
            raise ZeroProbabilityHead(f"head '{k}' carries no mass")
        return measure_scale(SumMeasure(tuple(parts)), Fraction(1) / total)
    raise GeneratorUnsupported("condition needs term-backed measures")


# ---------------------------------------------------------------------------
# support enumeration

def support_enum(m: Union[MeasureView, Term], depth: int,
                 eps: Fraction = DEFAULT_EPS, omega_bound: int = 16,
                 sig: Optional[Signature] = None) -> list:
    """Plays of value > 0 up to the output depth, with certified values.

    The empty play and passive-ending plays are enumerated.  Inputs at
    omega-arity requests are probed up to omega_bound; entries of
    index-varying head families are enumerated down to remaining mass <= eps
    (omitted plays beyond these cut-offs are the documented caveat).
    """
    m = as_measure(m)
    plays = sorted(_support_plays(m, depth, eps, omega_bound, sig),
                   key=lambda p: (p.n_outputs, format_play(p)))
    out = []
    for play in plays:
        v = m.value(play)
        if v > 0:
            out.append((play, Interval.exact(v)))
    return out


def _support_plays(m: MeasureView, depth: int, eps: Fraction, omega_bound: int,
                   sig: Optional[Signature]) -> set:
    if isinstance(m, DiffMeasure):
        return _support_plays(m.plus, depth, eps, omega_bound, sig)
    if isinstance(m, SumMeasure):
        out = set()
        for p in m.parts:
            out |= _support_plays(p, depth, eps, omega_bound, sig)
        return out
    if isinstance(m, ZeroMeasure):
        return set()
    if isinstance(m, TermMeasure):
        return _term_support(m.term, depth, eps, omega_bound, sig)
    raise TypeError(f"not a measure: {m!r}")


def _term_support(term: Term, depth: int, eps: Fraction, omega_bound: int,
                  sig: Optional[Signature], prefix: Play = EMPTY_PLAY) -> set:
    """Empty play plus passive-ending plays reachable within the output depth."""
    out = {EMPTY_PLAY} if prefix == EMPTY_PLAY else set()
    if depth <= 0:
        return out
    heads, _ = term_heads(term, eps)
    for sym, q in heads.items():
        if q <= 0:
            continue
        passive = prefix.with_output(sym)
        out.add(passive)
        if depth == 1:
            continue
        size = sig.arity_size(sym) if sig is not None else _used_arity(term, sym)
        inputs = range(omega_bound) if size is None else range(size)
        for i in inputs:
            mass, child = cond_term(term, sym, i, eps)
            if mass == 0 or child is None:
                continue
            active = passive.with_input(i)
            for sub in _term_support(child, depth - 1, eps, omega_bound, sig):
                if sub != EMPTY_PLAY:
                    out.add(_append(active, sub))
    return out


def _used_arity(term: Term, sym: Sym):
    """Child count at the first request on sym inside term (None = omega)."""
    found: list = []

    def walk(t: Term):
        if found:
            return
        if isinstance(t, Req):
            if t.sym == sym:
                found.append(len(t.children))
            else:
                for c in t.children:
                    walk(c)
        elif isinstance(t, ReqFam):
            if t.sym == sym:
                found.append(None)
            else:
                walk(t.body)
        elif isinstance(t, Choice):
            walk(t.left)
            walk(t.right)
        elif isinstance(t, Sum):
            if t.gen is not None and is_diagonal_sum(t):
                t = exchange_diagonal(t)
            for b in t.branches:
                walk(b)
            if t.gen is not None:
                for g in range(2):
                    if not found:
                        walk(gen_branch(t.gen, g))

    walk(term)
    if not found:
        raise UnknownSymbol(f"symbol '{sym}' does not occur in the term")
    return found[0]


def _append(prefix: Play, suffix: Play) -> Play:
    pairs = prefix.pairs + suffix.pairs
    return Play(pairs, suffix.dangling)


def plays_union(m1: Union[MeasureView, Term], m2: Union[MeasureView, Term],
                depth: int, eps: Fraction = DEFAULT_EPS, omega_bound: int = 16,
                sig: Optional[Signature] = None) -> list:
    """Union of both supports up to depth, deterministically ordered."""
    out = {p for p, _ in support_enum(m1, depth, eps, omega_bound, sig)}
    out |= {p for p, _ in support_enum(m2, depth, eps, omega_bound, sig)}
    return sorted(out, key=lambda p: (p.n_outputs, format_play(p)))


def exact_trace_equal(m1: Union[MeasureView, Term], m2: Union[MeasureView, Term],
                      depth: int, eps: Fraction = DEFAULT_EPS,
                      omega_bound: int = 16, sig: Optional[Signature] = None):
    """Compare exactly on the support union; returns (equal, witness play or None)."""
    a, b = as_measure(m1), as_measure(m2)
    for play in plays_union(a, b, depth, eps, omega_bound, sig):
        if a.value(play) != b.value(play):
            return False, play
    return True, None


def clear_caches() -> None:
    _value_at.cache_clear()
