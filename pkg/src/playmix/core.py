"""Signatures, terms, coefficient families and plays.

Everything here is exact: probabilities and coefficients are
`fractions.Fraction`, infinite coefficient tails are polynomial-times-
geometric families with closed-form tail sums, and infinite branch
families are given by small templates (map / iterate / fold) that can be
materialised at any index.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Optional, Union


# ---------------------------------------------------------------------------
# errors

class PlaymixError(Exception):
    """Base class for all library errors."""


class ArityMismatch(PlaymixError):
    pass


class WeightNotOne(PlaymixError):
    pass


class ProbabilityOutOfRange(PlaymixError):
    pass


class InvalidInput(PlaymixError):
    pass


class UnknownSymbol(PlaymixError):
    pass


class ZeroProbabilityHead(PlaymixError):
    pass


class SubtractionUnderflow(PlaymixError):
    pass


class GeneratorUnsupported(PlaymixError):
    pass


class NotSteady(PlaymixError):
    pass


class WitnessSearchExhausted(PlaymixError):
    pass


class NotFinitelyFounded(PlaymixError):
    pass


class NotWellFounded(PlaymixError):
    pass


class InexactValues(PlaymixError):
    pass


class DominationFails(PlaymixError):
    """Scaled domination failed; carries the offending play."""

    def __init__(self, play: "Play", detail: str = ""):
        self.play = play
        super().__init__(f"domination fails at play '{format_play(play)}' {detail}".strip())


class SignatureNotFinitary(NotSteady):
    """Omega-arity operations rule out steady normalisation entirely."""


class Inconclusive(PlaymixError):
    pass


class ProgramSyntaxError(PlaymixError):
    """Raised on malformed program / play / strategy text."""


# ---------------------------------------------------------------------------
# configuration

DEFAULT_SEED = 0x9E3779B97F4A7C15  # 64-bit default


@dataclass
class Config:
    """Tolerances and bounds shared across the toolkit."""

    epsilon: Fraction = Fraction(1, 2 ** 20)
    depth: int = 12
    rounds: int = 6
    spot_checks: int = 16
    seed: int = DEFAULT_SEED

    @staticmethod
    def from_pairs(pairs: dict) -> "Config":
        cfg = Config()
        for key, value in pairs.items():
            if key == "epsilon":
                cfg.epsilon = parse_rational(value)
            elif key == "depth":
                cfg.depth = int(value)
            elif key == "rounds":
                cfg.rounds = int(value)
            elif key == "spot_checks":
                cfg.spot_checks = int(value)
            elif key == "seed":
                cfg.seed = int(value, 0) if isinstance(value, str) else int(value)
            else:
                raise ProgramSyntaxError(f"unknown config key '{key}'")
        return cfg


def parse_rational(text) -> Fraction:
    """Parse 'a/b' or 'a' into an exact rational."""
    if isinstance(text, Fraction):
        return text
    if isinstance(text, int):
        return Fraction(text)
    try:
        return Fraction(str(text).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ProgramSyntaxError(f"bad rational '{text}': {exc}") from None


def format_rational(q: Fraction) -> str:
    return f"{q.numerator}/{q.denominator}" if q.denominator != 1 else str(q.numerator)


# ---------------------------------------------------------------------------
# affine index expressions

@dataclass(frozen=True)
class NatExpr:
    """Affine expression over index variables: const + sum coeff*var, coeff >= 1."""

    const: int = 0
    terms: tuple = ()  # sorted tuple of (var, coeff)

    def __post_init__(self):
        for _, coeff in self.terms:
            if coeff <= 0:
                raise ProgramSyntaxError("index expressions must be monotone (coeff >= 1)")

    @staticmethod
    def of(value: Union[int, str, "NatExpr"]) -> "NatExpr":
        if isinstance(value, NatExpr):
            return value
        if isinstance(value, int):
            return NatExpr(value, ())
        return NatExpr(0, ((value, 1),))

    def vars(self) -> set:
        return {v for v, _ in self.terms}

    @property
    def is_const(self) -> bool:
        return not self.terms

    def eval(self, env: dict) -> int:
        value = self.const
        for var, coeff in self.terms:
            if var not in env:
                raise ProgramSyntaxError(f"unbound index variable '{var}'")
            value += coeff * env[var]
        if value < 0:
            raise InvalidInput(f"index expression '{self}' evaluates to {value} < 0")
        return value

    def subst(self, env: dict) -> "NatExpr":
        """Substitute variables by NatExprs (missing vars stay symbolic)."""
        const = self.const
        acc: dict = {}
        for var, coeff in self.terms:
            if var in env:
                rep = NatExpr.of(env[var])
                const += coeff * rep.const
                for v2, c2 in rep.terms:
                    acc[v2] = acc.get(v2, 0) + coeff * c2
            else:
                acc[var] = acc.get(var, 0) + coeff
        return NatExpr(const, tuple(sorted(acc.items())))

    def plus(self, k: int) -> "NatExpr":
        return NatExpr(self.const + k, self.terms)

    def coeff_of(self, var: str) -> int:
        for v, c in self.terms:
            if v == var:
                return c
        return 0

    def __str__(self):
        parts = []
        for var, coeff in self.terms:
            parts.append(var if coeff == 1 else f"{coeff}*{var}")
        if self.const or not parts:
            parts.append(str(self.const))
        return "+".join(parts)


@dataclass(frozen=True)
class RatLin:
    """Rational of shape num / (affine index expression)."""

    num: Fraction
    den: NatExpr

    def eval(self, env: dict) -> Fraction:
        d = self.den.eval(env)
        if d <= 0:
            raise InvalidInput("comprehension coefficient has nonpositive denominator")
        return self.num / d

    def subst(self, env: dict) -> "RatLin":
        return RatLin(self.num, self.den.subst(env))

    def __str__(self):
        return f"{format_rational(self.num)}/({self.den})"


# ---------------------------------------------------------------------------
# signatures and symbols

@dataclass(frozen=True)
class FiniteArity:
    """Finitely many possible inputs, optionally labelled."""

    labels: tuple = ()

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class OmegaArity:
    """Inputs range over all naturals."""


Arity = Union[FiniteArity, OmegaArity]


@dataclass(frozen=True)
class OpDecl:
    """One operation: a name, its input arity and how many symbol indices it takes.

    index_params > 0 declares a countable family of symbols written
    name{i}, name{i,j}, ... with each member having the declared arity.
    """

    name: str
    arity: Arity
    index_params: int = 0


@dataclass(frozen=True)
class Sym:
    """A concrete (or, inside templates, index-expression) symbol instance."""

    base: str
    indices: tuple = ()  # ints in closed terms, NatExpr inside templates

    def __str__(self):
        if not self.indices:
            return self.base
        inner = ",".join(str(i) for i in self.indices)
        return f"{self.base}{{{inner}}}"

    @property
    def is_concrete(self) -> bool:
        return all(isinstance(i, int) for i in self.indices)

    def subst(self, env: dict) -> "Sym":
        if self.is_concrete:
            return self
        out = []
        for ix in self.indices:
            if isinstance(ix, int):
                out.append(ix)
            else:
                e = ix.subst(env)
                out.append(e.eval({}) if e.is_const else e)
        return Sym(self.base, tuple(out))

    def max_index(self) -> int:
        mx = -1
        for ix in self.indices:
            if isinstance(ix, int):
                mx = max(mx, ix)
        return mx


class Signature:
    """Ordered list of operation declarations with name lookup."""

    def __init__(self, ops: Iterable[OpDecl]):
        self.ops = tuple(ops)
        self._by_name = {}
        for pos, op in enumerate(self.ops):
            if op.name in self._by_name:
                raise ProgramSyntaxError(f"duplicate operation '{op.name}'")
            self._by_name[op.name] = (pos, op)

    def lookup(self, name: str) -> OpDecl:
        try:
            return self._by_name[name][1]
        except KeyError:
            raise UnknownSymbol(f"unknown operation '{name}'") from None

    def position(self, name: str) -> int:
        if name not in self._by_name:
            raise UnknownSymbol(f"unknown operation '{name}'")
        return self._by_name[name][0]

    def arity_of(self, sym: Sym) -> Arity:
        op = self.lookup(sym.base)
        if len(sym.indices) != op.index_params:
            raise UnknownSymbol(
                f"operation '{sym.base}' takes {op.index_params} indices, got {len(sym.indices)}")
        return op.arity

    def arity_size(self, sym: Sym) -> Optional[int]:
        """Number of valid inputs for sym, or None for omega arity."""
        ar = self.arity_of(sym)
        return ar.size if isinstance(ar, FiniteArity) else None

    @property
    def is_finitary(self) -> bool:
        return all(isinstance(op.arity, FiniteArity) for op in self.ops)

    def sym_key(self, sym: Sym):
        """Total order on concrete symbols: declaration position, then indices."""
        return (self.position(sym.base), sym.indices)

    def __iter__(self) -> Iterator[OpDecl]:
        return iter(self.ops)


# ---------------------------------------------------------------------------
# polynomial * geometric coefficient tails

def _poly_eval(poly: tuple, x: Fraction) -> Fraction:
    acc = Fraction(0)
    for c in reversed(poly):
        acc = acc * x + c
    return acc


def _poly_shift(poly: tuple, k: int) -> tuple:
    """Coefficients of P(x + k)."""
    out = [Fraction(0)] * len(poly)
    for deg, c in enumerate(poly):
        # expand c*(x+k)^deg
        binom = 1
        for j in range(deg + 1):
            out[j] += c * binom * Fraction(k) ** (deg - j)
            binom = binom * (deg - j) // (j + 1)
    return tuple(out)


def _binomial_basis(i: int) -> tuple:
    """Coefficients of C(u + i, i) as a polynomial in u."""
    poly = [Fraction(1)]
    for k in range(1, i + 1):
        # multiply by (u + k)
        nxt = [Fraction(0)] * (len(poly) + 1)
        for deg, c in enumerate(poly):
            nxt[deg] += c * k
            nxt[deg + 1] += c
        poly = nxt
    return tuple(c / math.factorial(i) for c in poly)


def _poly_geo_sum(poly: tuple, ratio: Fraction) -> Fraction:
    """Exact value of sum_{u>=0} P(u) * ratio^u for 0 < ratio < 1."""
    work = list(poly)
    while work and work[-1] == 0:
        work.pop()
    total = Fraction(0)
    while work:
        d = len(work) - 1
        basis = _binomial_basis(d)
        scale = work[d] / basis[d]
        total += scale / (1 - ratio) ** (d + 1)
        for j in range(d + 1):
            work[j] -= scale * basis[j]
        while work and work[-1] == 0:
            work.pop()
    return total


@dataclass(frozen=True)
class PolyGeo:
    """Coefficient tail c(j) = scale * P(j + offset) * ratio^(j + offset)."""

    poly: tuple = (Fraction(1),)
    ratio: Fraction = Fraction(1, 2)
    scale: Fraction = Fraction(1)
    offset: int = 0

    def __post_init__(self):
        if not (0 < self.ratio < 1):
            raise ProbabilityOutOfRange("tail ratio must lie strictly between 0 and 1")
        if self.scale <= 0:
            raise ProbabilityOutOfRange("tail scale must be positive")

    def coeff(self, j: int) -> Fraction:
        t = j + self.offset
        return self.scale * _poly_eval(self.poly, Fraction(t)) * self.ratio ** t

    def tail_from(self, j: int) -> Fraction:
        """Exact sum_{u >= j} coeff(u)."""
        start = j + self.offset
        shifted = _poly_shift(self.poly, start)
        return self.scale * self.ratio ** start * _poly_geo_sum(shifted, self.ratio)

    def shifted(self, k: int) -> "PolyGeo":
        """Drop the first k coefficients (reindex j -> j + k)."""
        return PolyGeo(self.poly, self.ratio, self.scale, self.offset + k)

    def scaled(self, factor: Fraction) -> "PolyGeo":
        return PolyGeo(self.poly, self.ratio, self.scale * factor, self.offset)


@dataclass(frozen=True)
class CoeffFamily:
    """Countable coefficient family: explicit prefix then optional closed tail."""

    explicit: tuple = ()
    tail: Optional[PolyGeo] = None

    def coeff(self, n: int) -> Fraction:
        if n < len(self.explicit):
            return self.explicit[n]
        if self.tail is None:
            raise InvalidInput(f"coefficient index {n} beyond finite family")
        return self.tail.coeff(n - len(self.explicit))

    @property
    def size(self) -> Optional[int]:
        return None if self.tail is not None else len(self.explicit)

    def total(self) -> Fraction:
        t = sum(self.explicit, Fraction(0))
        if self.tail is not None:
            t += self.tail.tail_from(0)
        return t


def family_tail(family: CoeffFamily, m: int) -> Fraction:
    """Exact mass of the family's coefficients at positions >= m."""
    if m < 0:
        raise InvalidInput("tail index must be a natural number")
    t = sum(family.explicit[m:], Fraction(0))
    if family.tail is not None:
        t += family.tail.tail_from(max(0, m - len(family.explicit)))
    return t


# ---------------------------------------------------------------------------
# terms

@dataclass(frozen=True)
class Req:
    """Request with a finite tuple of continuations, one per input."""

    sym: Sym
    children: tuple = ()


@dataclass(frozen=True)
class ReqFam:
    """Omega-arity request: continuation for input i is body[var := i]."""

    sym: Sym
    var: str
    body: "Term"


@dataclass(frozen=True)
class Choice:
    """Binary convex choice; left branch happens with probability p."""

    p: Fraction
    left: "Term"
    right: "Term"


@dataclass(frozen=True)
class MapGen:
    """Branch n is body with var := n."""

    var: str
    body: "Term"


@dataclass(frozen=True)
class IterateGen:
    """Branch n is ctx applied n times around base (ctx has one hole)."""

    ctx: "Term"
    base: "Term"


@dataclass(frozen=True)
class FoldGen:
    """Branch n composes step[stepvar := 0..n-1] (0 outermost) around base[var := n]."""

    var: str
    stepvar: str
    step: "Term"
    base: "Term"


Generator = Union[MapGen, IterateGen, FoldGen]


@dataclass(frozen=True)
class Sum:
    """Countable convex combination with coefficient family `coeffs`.

    Branch n < len(branches) is explicit; further branches come from the
    generator at index n - len(branches).
    """

    coeffs: CoeffFamily
    branches: tuple = ()
    gen: Optional[Generator] = None


# template-only nodes ---------------------------------------------------------

@dataclass(frozen=True)
class Hole:
    """Context hole; exactly one per iterate/fold context."""


@dataclass(frozen=True)
class Compr:
    """Uniform-style comprehension: sum_{i=0..bound} coeff(i) * body[var := i]."""

    var: str
    bound: NatExpr
    coeff: RatLin
    body: "Term"


@dataclass(frozen=True)
class IterN:
    """Template iteration with variable count: ctx applied `count` times on base."""

    count: NatExpr
    ctx: "Term"
    base: "Term"


Term = Union[Req, ReqFam, Choice, Sum, Hole, Compr, IterN]


def weight(term: Term) -> Fraction:
    """Total mass of a term (validation pins this to exactly 1)."""
    if isinstance(term, (Req, ReqFam, Hole, Compr, IterN)):
        return Fraction(1)
    if isinstance(term, Choice):
        return Fraction(1)
    if isinstance(term, Sum):
        return term.coeffs.total()
    raise TypeError(f"not a term: {term!r}")


# ---------------------------------------------------------------------------
# substitution / materialisation

def subst_term(term: Term, env: dict) -> Term:
    """Substitute index variables; expands comprehensions and counted iterations
    whose bounds become concrete."""
    if isinstance(term, Req):
        return Req(term.sym.subst(env), tuple(subst_term(c, env) for c in term.children))
    if isinstance(term, ReqFam):
        inner = {k: v for k, v in env.items() if k != term.var}
        return ReqFam(term.sym.subst(env), term.var, subst_term(term.body, inner))
    if isinstance(term, Choice):
        return Choice(term.p, subst_term(term.left, env), subst_term(term.right, env))
    if isinstance(term, Sum):
        gen = term.gen
        if gen is not None:
            gen = _subst_gen(gen, env)
        return Sum(term.coeffs, tuple(subst_term(b, env) for b in term.branches), gen)
    if isinstance(term, Hole):
        return term
    if isinstance(term, Compr):
        bound = term.bound.subst(env)
        inner = {k: v for k, v in env.items() if k != term.var}
        if bound.is_const:
            n = bound.eval({})
            parts = []
            coeffs = []
            for i in range(n + 1):
                step_env = dict(inner)
                step_env[term.var] = i
                coeffs.append(term.coeff.subst(inner).eval({term.var: i}))
                parts.append(subst_term(term.body, step_env))
            return Sum(CoeffFamily(tuple(coeffs), None), tuple(parts), None)
        return Compr(term.var, bound, term.coeff.subst(inner), subst_term(term.body, inner))
    if isinstance(term, IterN):
        count = term.count.subst(env)
        ctx = subst_term(term.ctx, env)
        base = subst_term(term.base, env)
        if count.is_const:
            out = base
            for _ in range(count.eval({})):
                out = plug_hole(ctx, out)
            return out
        return IterN(count, ctx, base)
    raise TypeError(f"not a term: {term!r}")


def _subst_gen(gen: Generator, env: dict) -> Generator:
    if isinstance(gen, MapGen):
        inner = {k: v for k, v in env.items() if k != gen.var}
        return MapGen(gen.var, subst_term(gen.body, inner))
    if isinstance(gen, IterateGen):
        return IterateGen(subst_term(gen.ctx, env), subst_term(gen.base, env))
    if isinstance(gen, FoldGen):
        inner = {k: v for k, v in env.items() if k not in (gen.var, gen.stepvar)}
        return FoldGen(gen.var, gen.stepvar, subst_term(gen.step, inner),
                       subst_term(gen.base, {k: v for k, v in env.items() if k != gen.var}))
    raise TypeError(f"not a generator: {gen!r}")


def plug_hole(ctx: Term, filler: Term) -> Term:
    """Replace the unique hole in ctx by filler."""
    if isinstance(ctx, Hole):
        return filler
    if isinstance(ctx, Req):
        return Req(ctx.sym, tuple(plug_hole(c, filler) if _has_hole(c) else c
                                  for c in ctx.children))
    if isinstance(ctx, Choice):
        if _has_hole(ctx.left):
            return Choice(ctx.p, plug_hole(ctx.left, filler), ctx.right)
        return Choice(ctx.p, ctx.left, plug_hole(ctx.right, filler))
    raise GeneratorUnsupported("hole in unsupported context position")


def _has_hole(term: Term) -> bool:
    if isinstance(term, Hole):
        return True
    if isinstance(term, Req):
        return any(_has_hole(c) for c in term.children)
    if isinstance(term, Choice):
        return _has_hole(term.left) or _has_hole(term.right)
    if isinstance(term, Sum):
        return any(_has_hole(b) for b in term.branches)
    return False


def gen_branch(gen: Generator, n: int) -> Term:
    """Materialise branch n of a generator as a closed term."""
    if n < 0:
        raise InvalidInput("generator index must be a natural number")
    if isinstance(gen, MapGen):
        return subst_term(gen.body, {gen.var: n})
    if isinstance(gen, IterateGen):
        out = gen.base
        for _ in range(n):
            out = plug_hole(gen.ctx, out)
        return out
    if isinstance(gen, FoldGen):
        out = subst_term(gen.base, {gen.var: n})
        for j in range(n - 1, -1, -1):
            out = plug_hole(subst_term(gen.step, {gen.var: n, gen.stepvar: j}), out)
        return out
    raise TypeError(f"not a generator: {gen!r}")


def sum_branch(term: Sum, n: int) -> Term:
    if n < len(term.branches):
        return term.branches[n]
    if term.gen is None:
        raise InvalidInput(f"branch {n} beyond finite sum")
    return gen_branch(term.gen, n - len(term.branches))


def shift_gen(gen: Generator, k: int) -> Generator:
    """Generator whose branch j materialises to branch j+k of `gen`."""
    if k < 0:
        raise InvalidInput("generator shift must be a natural number")
    if k == 0:
        return gen
    if isinstance(gen, MapGen):
        bumped = NatExpr(k, ((gen.var, 1),))
        return MapGen(gen.var, subst_term(gen.body, {gen.var: bumped}))
    if isinstance(gen, IterateGen):
        var = "#shift"
        return MapGen(var, IterN(NatExpr(k, ((var, 1),)), gen.ctx, gen.base))
    raise GeneratorUnsupported("folded families have no closed-form shift")


def _poly_div_linear(poly: tuple, root: Fraction):
    """Synthetic division of P(x) by (x - root): (quotient, remainder)."""
    coeffs = list(poly)
    if len(coeffs) <= 1:
        return (), (coeffs[0] if coeffs else Fraction(0))
    quot = [Fraction(0)] * (len(coeffs) - 1)
    acc = coeffs[-1]
    for deg in range(len(coeffs) - 2, -1, -1):
        quot[deg] = acc
        acc = coeffs[deg] + root * acc
    return tuple(quot), acc


def _interpolate(values: list) -> tuple:
    """Lagrange interpolation through (0, values[0]), (1, values[1]), ..."""
    n = len(values)
    coeffs = [Fraction(0)] * n
    for i, yi in enumerate(values):
        # basis polynomial prod_{m != i} (x - m) / (i - m)
        basis = [Fraction(1)]
        denom = Fraction(1)
        for m in range(n):
            if m == i:
                continue
            nxt = [Fraction(0)] * (len(basis) + 1)
            for deg, c in enumerate(basis):
                nxt[deg] += c * (-m)
                nxt[deg + 1] += c
            basis = nxt
            denom *= (i - m)
        for deg, c in enumerate(basis):
            coeffs[deg] += yi * c / denom
    while len(coeffs) > 1 and coeffs[-1] == 0:
        coeffs.pop()
    return tuple(coeffs)


def is_diagonal_sum(term: Sum) -> bool:
    """Recognise sum_r beta(r) * (sum_{j <= r+c} num/(r+c+1) T(j)): a uniform
    comprehension (possibly shifted by c, as family shifts produce) against a
    closed coefficient tail."""
    gen = term.gen
    if not isinstance(gen, MapGen) or not isinstance(gen.body, Compr):
        return False
    if term.coeffs.tail is None:
        return False
    body = gen.body
    r, j = gen.var, body.var
    if body.bound.terms != ((r, 1),):
        return False
    if body.coeff.den != body.bound.plus(1):
        return False
    return not (_free_vars(body.body) - {j})


def exchange_diagonal(term: Sum) -> Sum:
    """Rewrite the diagonal recognised by `is_diagonal_sum` into a plain
    family over j with closed-form coefficients.  Exact.

    Component r averages T(0)..T(r+c), so T(j) collects beta(r)/(r+c+1) over
    all r >= j-c: a constant coefficient for j < c, a poly*geo tail past it.
    """
    if not is_diagonal_sum(term):
        raise GeneratorUnsupported("not a diagonal family")
    gen = term.gen
    body = gen.body
    pg = term.coeffs.tail
    c = body.bound.const
    num = body.coeff.num
    shifted = _poly_shift(pg.poly, pg.offset)
    # beta(r)/(r+c+1) needs the family polynomial divisible by (x + c + 1)
    quot, rem = _poly_div_linear(shifted, Fraction(-(c + 1)))
    if rem != 0:
        raise GeneratorUnsupported("family polynomial not divisible by the uniform weight")
    # R(g) = sum_{u>=0} Q(g+u) ratio^u, a polynomial of the same degree
    deg = max(0, len(quot) - 1)
    samples = [_poly_geo_sum(_poly_shift(quot, g), pg.ratio) for g in range(deg + 1)]
    rpoly = _interpolate(samples)
    new_tail = PolyGeo(rpoly, pg.ratio, pg.scale * num * pg.ratio ** pg.offset, 0)
    inner = body.body
    new_gen: Union[MapGen, IterateGen]
    if (isinstance(inner, IterN) and inner.count == NatExpr(0, ((body.var, 1),))
            and not _free_vars(inner.ctx) and not _free_vars(inner.base)):
        new_gen = IterateGen(inner.ctx, inner.base)
    else:
        new_gen = MapGen(body.var, inner)
    if c == 0:
        return Sum(CoeffFamily(term.coeffs.explicit, new_tail),
                   term.branches, new_gen)
    # the first c branches appear in every component: constant coefficient;
    # the generated tail resumes at T(c)
    g_all = num * PolyGeo(quot, pg.ratio, pg.scale, pg.offset).tail_from(0)
    head = tuple(subst_term(inner, {body.var: j}) for j in range(c))
    return Sum(CoeffFamily(term.coeffs.explicit + (g_all,) * c,
                           new_tail),
               term.branches + head, shift_gen(new_gen, c))


def family_shift_term(term: Sum, k: int) -> Sum:
    """Renormalised tail of a countable sum: branches k, k+1, ... rescaled to
    total mass 1."""
    tw = family_tail(term.coeffs, k)
    if tw <= 0:
        raise InvalidInput(f"family tail from {k} has no mass")
    ne = len(term.coeffs.explicit)
    if k <= ne:
        expl = tuple(c / tw for c in term.coeffs.explicit[k:])
        tail = term.coeffs.tail.scaled(1 / tw) if term.coeffs.tail else None
        coeffs = CoeffFamily(expl, tail)
    else:
        if term.coeffs.tail is None:
            raise InvalidInput(f"coefficient {k} beyond finite family")
        coeffs = CoeffFamily((), term.coeffs.tail.shifted(k - ne).scaled(1 / tw))
    nb = len(term.branches)
    if k <= nb:
        return Sum(coeffs, term.branches[k:], term.gen)
    if term.gen is None:
        raise InvalidInput(f"branch {k} beyond finite sum")
    return Sum(coeffs, (), shift_gen(term.gen, k - nb))


# ---------------------------------------------------------------------------
# plays

@dataclass(frozen=True)
class Play:
    """Alternating output/input word: completed (symbol, input) cycles plus an
    optional dangling output."""

    pairs: tuple = ()
    dangling: Optional[Sym] = None

    @property
    def n_outputs(self) -> int:
        return len(self.pairs) + (1 if self.dangling is not None else 0)

    @property
    def is_passive(self) -> bool:
        return self.dangling is not None

    def symbols(self) -> Iterator[Sym]:
        for sym, _ in self.pairs:
            yield sym
        if self.dangling is not None:
            yield self.dangling

    def with_output(self, sym: Sym) -> "Play":
        if self.dangling is not None:
            raise InvalidInput("play already awaits an input")
        return Play(self.pairs, sym)

    def with_input(self, i: int) -> "Play":
        if self.dangling is None:
            raise InvalidInput("play has no pending output")
        return Play(self.pairs + ((self.dangling, i),), None)

    def prefix_passive(self, k: int) -> "Play":
        """Passive prefix ending with the k-th output (0-based)."""
        if k < len(self.pairs):
            return Play(self.pairs[:k], self.pairs[k][0])
        if k == len(self.pairs) and self.dangling is not None:
            return self
        raise InvalidInput("prefix index out of range")


EMPTY_PLAY = Play((), None)

_SYM_TOKEN = re.compile(r"^([^.?{}]+)(\{(\d+(,\d+)*)\})?$")


def _parse_sym_token(token: str) -> Sym:
    m = _SYM_TOKEN.match(token)
    if not m:
        raise ProgramSyntaxError(f"bad symbol token '{token}'")
    base = m.group(1)
    indices: tuple = ()
    if m.group(3):
        indices = tuple(int(x) for x in m.group(3).split(","))
    return Sym(base, indices)


def format_play(play: Play) -> str:
    """Canonical text: cycles as 'Sym?i' joined by dots, dangling output last."""
    parts = [f"{sym}?{i}" for sym, i in play.pairs]
    if play.dangling is not None:
        parts.append(str(play.dangling))
    return ".".join(parts)


def parse_play(text: str, sig: Optional[Signature] = None) -> Play:
    """Parse canonical 'Sym?i' cycles; bare numeric segments also accepted as
    inputs ('star.0.b' means the same as 'star?0.b')."""
    text = text.strip()
    if text in ("", "(empty)"):
        return EMPTY_PLAY
    play = EMPTY_PLAY
    for token in text.split("."):
        token = token.strip()
        if not token:
            raise ProgramSyntaxError("empty play segment")
        if token.isdigit():
            if play.dangling is None:
                raise ProgramSyntaxError(f"input '{token}' with no pending output")
            play = play.with_input(int(token))
            continue
        if play.dangling is not None:
            raise ProgramSyntaxError(f"output '{token}' while an input is expected")
        if "?" in token:
            head, _, rest = token.rpartition("?")
            if rest == "":
                # trailing '?' marks the dangling output explicitly
                play = play.with_output(_parse_sym_token(head))
                continue
            if not rest.isdigit():
                raise ProgramSyntaxError(f"bad cycle token '{token}'")
            play = play.with_output(_parse_sym_token(head)).with_input(int(rest))
        else:
            play = play.with_output(_parse_sym_token(token))
    if sig is not None:
        _check_play(play, sig)
    return play


def _check_play(play: Play, sig: Signature) -> None:
    for sym, i in play.pairs:
        size = sig.arity_size(sym)
        if size is not None and not (0 <= i < size):
            raise InvalidInput(f"input {i} out of range for '{sym}'")
        if i < 0:
            raise InvalidInput(f"negative input {i}")
    if play.dangling is not None:
        sig.arity_of(play.dangling)


# ---------------------------------------------------------------------------
# validation

def _free_vars(term: Term) -> set:
    if isinstance(term, Req):
        out = set()
        for ix in term.sym.indices:
            if isinstance(ix, NatExpr):
                out |= ix.vars()
        for c in term.children:
            out |= _free_vars(c)
        return out
    if isinstance(term, ReqFam):
        out = _free_vars(term.body) - {term.var}
        for ix in term.sym.indices:
            if isinstance(ix, NatExpr):
                out |= ix.vars()
        return out
    if isinstance(term, Choice):
        return _free_vars(term.left) | _free_vars(term.right)
    if isinstance(term, Sum):
        out = set()
        for b in term.branches:
            out |= _free_vars(b)
        if term.gen is not None:
            out |= _gen_free_vars(term.gen)
        return out
    if isinstance(term, Hole):
        return set()
    if isinstance(term, Compr):
        return (term.bound.vars() | term.coeff.den.vars()
                | (_free_vars(term.body) - {term.var}))
    if isinstance(term, IterN):
        return term.count.vars() | _free_vars(term.ctx) | _free_vars(term.base)
    raise TypeError(f"not a term: {term!r}")


def _gen_free_vars(gen: Generator) -> set:
    if isinstance(gen, MapGen):
        return _free_vars(gen.body) - {gen.var}
    if isinstance(gen, IterateGen):
        return _free_vars(gen.ctx) | _free_vars(gen.base)
    if isinstance(gen, FoldGen):
        return ((_free_vars(gen.step) - {gen.var, gen.stepvar})
                | (_free_vars(gen.base) - {gen.var}))
    raise TypeError(f"not a generator: {gen!r}")


def _count_holes(term: Term) -> int:
    if isinstance(term, Hole):
        return 1
    if isinstance(term, Req):
        return sum(_count_holes(c) for c in term.children)
    if isinstance(term, Choice):
        return _count_holes(term.left) + _count_holes(term.right)
    if isinstance(term, Sum):
        return sum(_count_holes(b) for b in term.branches)
    return 0


def _check_context(ctx: Term) -> None:
    """A context is a request whose hole sits at a direct child position."""
    if not isinstance(ctx, Req):
        raise GeneratorUnsupported("generator context must be request-rooted")
    hole_positions = [i for i, c in enumerate(ctx.children) if isinstance(c, Hole)]
    if len(hole_positions) != 1 or _count_holes(ctx) != 1:
        raise GeneratorUnsupported(
            "generator context needs exactly one hole, directly under the root request")


def context_hole_position(ctx: Term) -> int:
    _check_context(ctx)
    for i, c in enumerate(ctx.children):
        if isinstance(c, Hole):
            return i
    raise GeneratorUnsupported("context has no hole")


def validate_term(term: Term, sig: Signature, config: Optional[Config] = None) -> None:
    """Check well-formation: arities, probability ranges, unit weights, and
    generator templates (including materialised spot checks)."""
    cfg = config or Config()
    free = _free_vars(term)
    if free:
        raise ProgramSyntaxError(f"unbound index variables: {sorted(free)}")
    if _count_holes(term) != 0:
        raise ProgramSyntaxError("hole outside generator context")
    _validate(term, sig, cfg, allow_vars=frozenset())


def _validate(term: Term, sig: Signature, cfg: Config, allow_vars: frozenset) -> None:
    if isinstance(term, Req):
        _validate_sym(term.sym, sig, allow_vars)
        ar = sig.lookup(term.sym.base).arity
        if isinstance(ar, OmegaArity):
            raise ArityMismatch(f"'{term.sym.base}' has omega arity; use a child family")
        if len(term.children) != ar.size:
            raise ArityMismatch(
                f"'{term.sym}' expects {ar.size} children, got {len(term.children)}")
        for c in term.children:
            _validate(c, sig, cfg, allow_vars)
        return
    if isinstance(term, ReqFam):
        _validate_sym(term.sym, sig, allow_vars)
        ar = sig.lookup(term.sym.base).arity
        if not isinstance(ar, OmegaArity):
            raise ArityMismatch(f"'{term.sym.base}' is not omega-arity")
        _validate(term.body, sig, cfg, allow_vars | {term.var})
        return
    if isinstance(term, Choice):
        if not (0 < term.p < 1):
            raise ProbabilityOutOfRange(f"choice probability {term.p} not in (0,1)")
        _validate(term.left, sig, cfg, allow_vars)
        _validate(term.right, sig, cfg, allow_vars)
        return
    if isinstance(term, Sum):
        if len(term.branches) != len(term.coeffs.explicit):
            raise ArityMismatch("sum branch count does not match coefficient count")
        if (term.gen is None) != (term.coeffs.tail is None):
            raise ArityMismatch("sum generator and coefficient tail must come together")
        for c in term.coeffs.explicit:
            if c <= 0:
                raise ProbabilityOutOfRange(f"sum coefficient {c} not positive")
        if term.coeffs.total() != 1:
            raise WeightNotOne(f"sum weighs {term.coeffs.total()}, expected exactly 1")
        for b in term.branches:
            _validate(b, sig, cfg, allow_vars)
        if term.gen is not None:
            _validate_generator(term, sig, cfg, allow_vars)
        return
    if isinstance(term, Hole):
        raise ProgramSyntaxError("hole outside generator context")
    if isinstance(term, Compr):
        if not (term.bound.vars() <= allow_vars):
            raise ProgramSyntaxError("comprehension bound uses unbound variables")
        _validate(term.body, sig, cfg, allow_vars | {term.var})
        return
    if isinstance(term, IterN):
        if not (term.count.vars() <= allow_vars):
            raise ProgramSyntaxError("iteration count uses unbound variables")
        _check_context(term.ctx)
        _validate(term.base, sig, cfg, allow_vars)
        for i, c in enumerate(term.ctx.children):
            if not isinstance(c, Hole):
                _validate(c, sig, cfg, allow_vars)
        _validate_sym(term.ctx.sym, sig, allow_vars)
        return
    raise TypeError(f"not a term: {term!r}")


def _validate_sym(sym: Sym, sig: Signature, allow_vars: frozenset) -> None:
    op = sig.lookup(sym.base)
    if len(sym.indices) != op.index_params:
        raise UnknownSymbol(
            f"'{sym.base}' takes {op.index_params} indices, got {len(sym.indices)}")
    for ix in sym.indices:
        if isinstance(ix, int):
            if ix < 0:
                raise InvalidInput(f"negative symbol index in '{sym}'")
        elif isinstance(ix, NatExpr):
            if not (ix.vars() <= allow_vars):
                raise ProgramSyntaxError(f"symbol '{sym}' uses unbound index variables")
        else:
            raise TypeError(f"bad symbol index {ix!r}")


def _validate_generator(term: Sum, sig: Signature, cfg: Config, allow_vars: frozenset) -> None:
    gen = term.gen
    if isinstance(gen, MapGen):
        body_vars = allow_vars | {gen.var}
        _validate(gen.body, sig, cfg, body_vars)
        if gen.var in _free_vars(gen.body) and \
                not isinstance(gen.body, (Req, ReqFam, Compr, IterN)):
            raise GeneratorUnsupported(
                "index-dependent map body must be request-rooted, a "
                "comprehension, or an indexed iteration")
    elif isinstance(gen, IterateGen):
        _check_context(gen.ctx)
        if _gen_free_vars(gen):
            raise GeneratorUnsupported("iterate generator must not use index variables")
        for c in gen.ctx.children:
            if not isinstance(c, Hole):
                _validate(c, sig, cfg, allow_vars)
        _validate(gen.base, sig, cfg, allow_vars)
        if not isinstance(gen.base, (Req, ReqFam)):
            raise GeneratorUnsupported("iterate base must be request-rooted")
    elif isinstance(gen, FoldGen):
        _check_context(gen.step)
        step_vars = allow_vars | {gen.var, gen.stepvar}
        for c in gen.step.children:
            if not isinstance(c, Hole):
                _validate(c, sig, cfg, step_vars)
        _validate_sym(gen.step.sym, sig, step_vars)
        _validate(gen.base, sig, cfg, allow_vars | {gen.var})
        if not isinstance(gen.base, (Req, ReqFam)):
            raise GeneratorUnsupported("fold base must be request-rooted")
    else:
        raise TypeError(f"not a generator: {gen!r}")
    # spot-check materialised branches
    if not allow_vars:
        offset = len(term.branches)
        for n in range(cfg.spot_checks):
            if term.coeffs.coeff(offset + n) <= 0:
                raise ProbabilityOutOfRange(f"tail coefficient at {offset + n} not positive")
            branch = gen_branch(gen, n)
            if _free_vars(branch) or _count_holes(branch):
                raise GeneratorUnsupported("generated branch is not closed")
            _validate(branch, sig, cfg, frozenset())


# ---------------------------------------------------------------------------
# small structural helpers used across modules

def term_size(term: Term) -> int:
    if isinstance(term, Req):
        return 1 + sum(term_size(c) for c in term.children)
    if isinstance(term, ReqFam):
        return 1 + term_size(term.body)
    if isinstance(term, Choice):
        return 1 + term_size(term.left) + term_size(term.right)
    if isinstance(term, Sum):
        extra = 0
        if isinstance(term.gen, MapGen):
            extra = term_size(term.gen.body)
        elif isinstance(term.gen, IterateGen):
            extra = term_size(term.gen.ctx) + term_size(term.gen.base)
        elif isinstance(term.gen, FoldGen):
            extra = term_size(term.gen.step) + term_size(term.gen.base)
        return 1 + sum(term_size(b) for b in term.branches) + extra
    if isinstance(term, (Hole,)):
        return 1
    if isinstance(term, Compr):
        return 1 + term_size(term.body)
    if isinstance(term, IterN):
        return 1 + term_size(term.ctx) + term_size(term.base)
    raise TypeError(f"not a term: {term!r}")


def is_generator_free(term: Term) -> bool:
    if isinstance(term, Req):
        return all(is_generator_free(c) for c in term.children)
    if isinstance(term, ReqFam):
        return False
    if isinstance(term, Choice):
        return is_generator_free(term.left) and is_generator_free(term.right)
    if isinstance(term, Sum):
        return term.gen is None and all(is_generator_free(b) for b in term.branches)
    if isinstance(term, (Hole, Compr, IterN)):
        return False
    raise TypeError(f"not a term: {term!r}")


def term_depth(term: Term) -> int:
    """Maximal number of requests along any path (finite terms only)."""
    if isinstance(term, Req):
        return 1 + max((term_depth(c) for c in term.children), default=0)
    if isinstance(term, Choice):
        return max(term_depth(term.left), term_depth(term.right))
    if isinstance(term, Sum):
        if term.gen is not None:
            raise GeneratorUnsupported("depth of a generated family is unbounded in general")
        return max((term_depth(b) for b in term.branches), default=0)
    if isinstance(term, ReqFam):
        return 1 + term_depth(term.body)
    raise TypeError(f"not a finite term: {term!r}")
