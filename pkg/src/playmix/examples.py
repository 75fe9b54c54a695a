"""Ready-made example programs used by tests, docs and the golden corpus."""

from __future__ import annotations

from fractions import Fraction

from .core import (
    Choice, CoeffFamily, Compr, FiniteArity, FoldGen, Hole, IterateGen, MapGen,
    NatExpr, OmegaArity, OpDecl, PolyGeo, RatLin, Req, ReqFam, Signature, Sum,
    Sym,
)

HALF = Fraction(1, 2)

# coeff(n) = 2^-(n+1)
DYADIC = PolyGeo(poly=(Fraction(1),), ratio=HALF, scale=HALF, offset=0)


def dyadic_family() -> CoeffFamily:
    return CoeffFamily((), DYADIC)


# ---------------------------------------------------------------------------
# greeting example (binary question, immediate stop)

SIG_GREET = Signature([
    OpDecl("Happy", FiniteArity(("yes", "no"))),
    OpDecl("Bye", FiniteArity(())),
])

BYE = Req(Sym("Bye"))
HAPPY_BB = Req(Sym("Happy"), (BYE, BYE))


def greeting() -> Req:
    """Asks once; on 'no' may ask again with asymmetric follow-ups."""
    follow_yes = Choice(Fraction(1, 3), BYE, HAPPY_BB)
    follow_no = Choice(Fraction(1, 3), HAPPY_BB, BYE)
    again = Req(Sym("Happy"), (follow_yes, follow_no))
    return Req(Sym("Happy"), (BYE, Choice(HALF, BYE, again)))


# ---------------------------------------------------------------------------
# geometric left/right towers (trace-equal, not bisimilar)

SIG_TOWER = Signature([
    OpDecl("star", FiniteArity(("l", "r"))),
    OpDecl("a", FiniteArity(())),
    OpDecl("b", FiniteArity(())),
    OpDecl("c", FiniteArity(())),
])

A = Req(Sym("a"))
B = Req(Sym("b"))
C = Req(Sym("c"))


def star(left, right) -> Req:
    return Req(Sym("star"), (left, right))


def tower_a() -> Sum:
    """sum_n 2^-(n+1) * b*( ... b*(a*c))  (n wrappers of b)."""
    return Sum(dyadic_family(), (), IterateGen(star(B, Hole()), star(A, C)))


def tower_b() -> Sum:
    """Same with the roles of a and b swapped."""
    return Sum(dyadic_family(), (), IterateGen(star(A, Hole()), star(B, C)))


# ---------------------------------------------------------------------------
# indexed towers (doubly-indexed constants)

SIG_GRID = Signature([
    OpDecl("star", FiniteArity(("l", "r"))),
    OpDecl("c", FiniteArity(()), index_params=2),
])


def _c(n, k) -> Req:
    return Req(Sym("c", (NatExpr.of(n), NatExpr.of(k))), ())


def grid_a() -> Sum:
    """Branch n spells out c{n,n} * c{n,n-1} * ... * c{n,0} left-nested."""
    step = Req(Sym("star"), (Hole(), _c("n", "j")))
    return Sum(dyadic_family(), (), FoldGen("n", "j", step, _c("n", "n")))


def grid_b() -> Sum:
    """Same skeleton; each second component is itself a geometric family."""
    inner = Sum(dyadic_family(), (), MapGen("m", Req(
        Sym("c", (NatExpr(1, (("j", 1), ("m", 1))), NatExpr.of("j"))), ())))
    step = Req(Sym("star"), (Hole(), inner))
    return Sum(dyadic_family(), (), FoldGen("n", "j", step, _c("n", "n")))


# ---------------------------------------------------------------------------
# unbounded unary loop (not well-founded)

SIG_LOOP = Signature([
    OpDecl("a", FiniteArity(("k",))),
    OpDecl("c", FiniteArity(())),
])


def loop() -> Sum:
    """sum_n 2^-(n+1) * a(a(...a(c)))  (n nested a's)."""
    return Sum(dyadic_family(), (),
               IterateGen(Req(Sym("a"), (Hole(),)), Req(Sym("c"), ())))


# ---------------------------------------------------------------------------
# omega-arity request with uniform replies (steady-style counterexample)

SIG_OMEGA = Signature([
    OpDecl("b", OmegaArity()),
    OpDecl("c", FiniteArity(()), index_params=1),
])


def omega_uniform() -> ReqFam:
    """Requests b; on input n answers uniformly among c{0..n}."""
    body = Compr("i", NatExpr.of("n"), RatLin(Fraction(1), NatExpr(1, (("n", 1),))),
                 Req(Sym("c", (NatExpr.of("i"),)), ()))
    return ReqFam(Sym("b"), "n", body)


ALL = {
    "greeting": (SIG_GREET, greeting),
    "tower_a": (SIG_TOWER, tower_a),
    "tower_b": (SIG_TOWER, tower_b),
    "grid_a": (SIG_GRID, grid_a),
    "grid_b": (SIG_GRID, grid_b),
    "loop": (SIG_LOOP, loop),
    "omega_uniform": (SIG_OMEGA, omega_uniform),
}
