"""Self-check battery: one deterministic pass/fail check per shipped guarantee.

Every check builds its own instances (seeded, so runs are reproducible),
exercises the public API, and reports a CheckResult.  The test suite and the
CLI selftest both run the same battery.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, List, Optional, Tuple

from .core import (
    Choice, CoeffFamily, Hole, IterateGen, Req, SignatureNotFinitary, Sum,
    Sym, Term, family_shift_term, format_play, parse_play, term_depth,
)
from .equivalence import (
    EquivalentUpTo, ProvedEquivalent, bisimilar, canon_bisim,
    check_law_soundness, replay_proof, tensor_equiv_finitary,
    trace_equiv_upto,
)
from .examples import (
    SIG_GREET, SIG_GRID, SIG_LOOP, SIG_OMEGA, SIG_TOWER, greeting, grid_a,
    grid_b, loop, omega_uniform, tower_a, tower_b,
)
from .games import (
    ConstIndex, Counterstrategy, RoundRobin, cont_prob, definability_decomp,
    level_masses,
)
from .normalforms import (
    UniformRefutation, ff_nf, impersonate, is_uniformly_below, steady_nf,
    subsplit,
)
from .semantics import (
    DEFAULT_EPS, Interval, SumMeasure, TermMeasure, exact_trace_equal,
    plays_union, support_enum,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


# ---------------------------------------------------------------------------
# seeded instance builders

_LEAVES = (Req(Sym("a")), Req(Sym("b")), Req(Sym("c")))
_DYADIC = loop().coeffs.tail


def _rand_prob(rng: random.Random) -> Fraction:
    den = rng.choice((2, 3, 4, 5, 8))
    return Fraction(rng.randint(1, den - 1), den)


def _rand_coeffs(rng: random.Random, n: int) -> tuple:
    raws = [rng.randint(1, 6) for _ in range(n)]
    total = sum(raws)
    return tuple(Fraction(r, total) for r in raws)


def random_free_term(rng: random.Random, depth: int = 2) -> Term:
    """Small generator-free weight-1 term over the star/a/b/c signature."""
    if depth <= 0 or rng.random() < 0.25:
        return rng.choice(_LEAVES)
    shape = rng.randrange(3)
    if shape == 0:
        return Req(Sym("star"), (random_free_term(rng, depth - 1),
                                 random_free_term(rng, depth - 1)))
    if shape == 1:
        return Choice(_rand_prob(rng), random_free_term(rng, depth - 1),
                      random_free_term(rng, depth - 1))
    n = rng.randint(2, 3)
    return Sum(CoeffFamily(_rand_coeffs(rng, n), None),
               tuple(random_free_term(rng, depth - 1) for _ in range(n)), None)


def _req_rooted(rng: random.Random, depth: int = 1) -> Req:
    """Head enumeration of iterated families needs request-rooted stages."""
    if rng.random() < 0.5:
        return rng.choice(_LEAVES)
    return Req(Sym("star"), (random_free_term(rng, depth),
                             random_free_term(rng, depth)))


def random_dyadic_family(rng: random.Random) -> Sum:
    """Weight-1 dyadic iterated family over the star/a/b/c signature."""
    ctx = Req(Sym("star"), rng.choice((
        (Hole(), random_free_term(rng, 1)),
        (random_free_term(rng, 1), Hole()))))
    return Sum(CoeffFamily((), _DYADIC), (), IterateGen(ctx, _req_rooted(rng)))


def random_finitary_term(rng: random.Random, depth: int = 2) -> Term:
    """Like random_free_term but sometimes a dyadic iterated family."""
    if rng.random() < 0.3:
        fam = random_dyadic_family(rng)
        if rng.random() < 0.4:
            return Choice(_rand_prob(rng), random_free_term(rng, depth), fam)
        return fam
    return random_free_term(rng, depth)


# --- law-preserving rewrites -------------------------------------------------

def _positions(t: Term, path: tuple = ()) -> list:
    out = [path]
    if isinstance(t, Req):
        for i, c in enumerate(t.children):
            out.extend(_positions(c, path + (i,)))
    elif isinstance(t, Choice):
        out.extend(_positions(t.left, path + (0,)))
        out.extend(_positions(t.right, path + (1,)))
    elif isinstance(t, Sum) and t.gen is None:
        for i, b in enumerate(t.branches):
            out.extend(_positions(b, path + (i,)))
    return out


def _child(t: Term, i: int) -> Term:
    if isinstance(t, Req):
        return t.children[i]
    if isinstance(t, Choice):
        return t.left if i == 0 else t.right
    return t.branches[i]


def _with_child(t: Term, i: int, new: Term) -> Term:
    if isinstance(t, Req):
        cs = list(t.children)
        cs[i] = new
        return Req(t.sym, tuple(cs))
    if isinstance(t, Choice):
        return Choice(t.p, new, t.right) if i == 0 else Choice(t.p, t.left, new)
    bs = list(t.branches)
    bs[i] = new
    return Sum(t.coeffs, tuple(bs), t.gen)


def _rewrite_at(t: Term, path: tuple, f: Callable[[Term], Term]) -> Term:
    if not path:
        return f(t)
    return _with_child(t, path[0], _rewrite_at(_child(t, path[0]), path[1:], f))


def _convex_moves(sub: Term, rng: random.Random) -> list:
    """Mixture-law transformations applicable at sub (all bisimulation-sound)."""
    moves = [lambda s: Choice(_rand_prob(rng), s, s),
             lambda s: Sum(CoeffFamily((Fraction(1),), None), (s,), None)]
    if isinstance(sub, Choice):
        moves.append(lambda s: Choice(1 - s.p, s.right, s.left))
        if sub.left == sub.right:
            moves.append(lambda s: s.left)
        if isinstance(sub.right, Choice):
            def rebracket(s):
                p, q = s.p, s.right.p
                r = p + q - p * q
                return Choice(r, Choice(p / r, s.left, s.right.left),
                              s.right.right)
            moves.append(rebracket)
    if isinstance(sub, Sum) and sub.gen is None and len(sub.branches) == 1 \
            and sub.coeffs.explicit == (Fraction(1),):
        moves.append(lambda s: s.branches[0])
    return moves


def _tensor_moves(sub: Term) -> list:
    """Head-commutation transformations (trace-sound, break bisimilarity)."""
    moves = []
    if (isinstance(sub, Choice) and isinstance(sub.left, Req)
            and isinstance(sub.right, Req) and sub.left.sym == sub.right.sym
            and len(sub.left.children) == len(sub.right.children)):
        moves.append(lambda s: Req(s.left.sym, tuple(
            Choice(s.p, a, b)
            for a, b in zip(s.left.children, s.right.children))))
    return moves


def random_rewrite(t: Term, rng: random.Random, tensor: bool = False) -> Term:
    """One random law application somewhere in t (identity when nothing fits)."""
    paths = _positions(t)
    rng.shuffle(paths)
    for path in paths:
        sub = t
        for i in path:
            sub = _child(sub, i)
        moves = _convex_moves(sub, rng) + (_tensor_moves(sub) if tensor else [])
        if moves:
            return _rewrite_at(t, path, rng.choice(moves))
    return t


def random_law_instance(rng: random.Random, law: str) -> Tuple[Term, Term]:
    """A fresh (lhs, rhs) instance of the named law."""
    M = random_free_term(rng, 2)
    N = random_free_term(rng, 2)
    L = random_free_term(rng, 1)
    p, q = _rand_prob(rng), _rand_prob(rng)
    if law == "convex-1":
        return Choice(p, M, M), M
    if law == "convex-2":
        return Choice(p, M, N), Choice(1 - p, N, M)
    if law == "convex-3":
        r = p + q - p * q
        return (Choice(p, M, Choice(q, N, L)),
                Choice(r, Choice(p / r, M, N), L))
    if law == "omega-convex-1":
        return Sum(CoeffFamily((Fraction(1),), None), (M,), None), M
    if law == "omega-convex-2":
        if rng.random() < 0.25:
            # regather a generated family: head entry + renormalised remainder
            base = _req_rooted(rng)
            fam = Sum(CoeffFamily((), _DYADIC), (),
                      IterateGen(Req(Sym("star"), (Hole(), M)), base))
            nested = Sum(CoeffFamily((Fraction(1, 2), Fraction(1, 2)), None),
                         (base, family_shift_term(fam, 1)), None)
            return nested, fam
        groups = []
        for _ in range(rng.randint(2, 3)):
            kind = rng.randrange(3)
            if kind == 0:
                groups.append(random_free_term(rng, 1))
            elif kind == 1:
                groups.append(Choice(p, random_free_term(rng, 1),
                                     random_free_term(rng, 1)))
            else:
                cs = _rand_coeffs(rng, 2)
                groups.append(Sum(CoeffFamily(cs, None),
                                  (random_free_term(rng, 1),
                                   random_free_term(rng, 1)), None))
        outer = _rand_coeffs(rng, len(groups))
        nested = Sum(CoeffFamily(outer, None), tuple(groups), None)
        flat_coeffs: list = []
        flat_branches: list = []
        for c, g in zip(outer, groups):
            if isinstance(g, Choice):
                flat_coeffs += [c * g.p, c * (1 - g.p)]
                flat_branches += [g.left, g.right]
            elif isinstance(g, Sum):
                flat_coeffs += [c * ci for ci in g.coeffs.explicit]
                flat_branches += list(g.branches)
            else:
                flat_coeffs.append(c)
                flat_branches.append(g)
        flat = Sum(CoeffFamily(tuple(flat_coeffs), None),
                   tuple(flat_branches), None)
        return nested, flat
    if law == "tensor-binary":
        l = Req(Sym("star"), (M, L))
        r = Req(Sym("star"), (N, L))
        return (Choice(p, l, r),
                Req(Sym("star"), (Choice(p, M, N), Choice(p, L, L))))
    if law == "tensor-countable":
        n = rng.randint(2, 3)
        cs = _rand_coeffs(rng, n)
        reqs = tuple(Req(Sym("star"), (random_free_term(rng, 1),
                                       random_free_term(rng, 1)))
                     for _ in range(n))
        lhs = Sum(CoeffFamily(cs, None), reqs, None)
        rhs = Req(Sym("star"), tuple(
            Sum(CoeffFamily(cs, None), tuple(b.children[i] for b in reqs), None)
            for i in range(2)))
        return lhs, rhs
    raise ValueError(f"no builder for law '{law}'")


LAW_IDS = ("convex-1", "convex-2", "convex-3", "omega-convex-1",
           "omega-convex-2", "tensor-binary", "tensor-countable")


# ---------------------------------------------------------------------------
# the ten checks

def check_trace_table() -> CheckResult:
    """The greeting program's exact depth-4 value table."""
    mv = TermMeasure(greeting(), Fraction(1))
    table = {
        "": Fraction(1),
        "Happy?": Fraction(1),
        "Happy?0.Bye": Fraction(1),
        "Happy?1.Bye": Fraction(1, 2),
        "Happy?1.Happy?": Fraction(1, 2),
        "Happy?1.Happy?0.Bye": Fraction(1, 6),
        "Happy?1.Happy?1.Happy": Fraction(1, 6),
        "Happy?1.Happy?1.Happy?0.Bye": Fraction(1, 6),
        "Happy?1.Happy?1.Happy?1.Bye": Fraction(1, 6),
        "Happy?1.Happy?0.Happy": Fraction(1, 3),
        "Happy?1.Happy?0.Happy?0.Bye": Fraction(1, 3),
        "Happy?1.Happy?0.Happy?1.Bye": Fraction(1, 3),
        "Happy?1.Happy?1.Bye": Fraction(1, 3),
    }
    canon = {}
    for text, want in table.items():
        play = parse_play(text, SIG_GREET)
        canon[format_play(play)] = want
        got = mv.value(play)
        if got != want:
            return CheckResult("trace-table", False,
                               f"value at '{text}' is {got}, wanted {want}")
    # nothing outside the table carries mass to depth 4
    support = {format_play(p) for p, _ in support_enum(mv, 4, sig=SIG_GREET)}
    if support != set(canon):
        off = sorted(support.symmetric_difference(canon))[0]
        return CheckResult("trace-table", False,
                           f"support table differs at '{off}'")
    return CheckResult("trace-table", True,
                       f"{len(table)} exact values, support closed at depth 4")


def check_tower_equivalence() -> CheckResult:
    """Left/right towers are trace-equal to depth 8 with exact 1/2 values."""
    M, N = tower_a(), tower_b()
    verdict = trace_equiv_upto(M, N, depth=8, sig=SIG_TOWER)
    if not isinstance(verdict, EquivalentUpTo):
        return CheckResult("tower-trace-equivalence", False, repr(verdict))
    if verdict.depth != 8 or verdict.epsilon != DEFAULT_EPS:
        return CheckResult("tower-trace-equivalence", False,
                           f"depth {verdict.depth}, epsilon {verdict.epsilon}")
    for text in ("star?0.a", "star?0.b"):
        play = parse_play(text, SIG_TOWER)
        vm = TermMeasure(M, Fraction(1)).value(play)
        vn = TermMeasure(N, Fraction(1)).value(play)
        if not (vm == vn == Fraction(1, 2)):
            return CheckResult("tower-trace-equivalence", False,
                               f"'{text}' gives {vm} / {vn}, wanted 1/2")
    return CheckResult("tower-trace-equivalence", True,
                       "equivalent to depth 8, boundary values exactly 1/2")


def check_grid_equivalence() -> CheckResult:
    """Indexed-family towers agree on pinned values and to depth 6."""
    M, N = grid_a(), grid_b()
    pins = (("c{0,0}", Fraction(1, 2)), ("star?1.c{1,0}", Fraction(1, 4)))
    for text, want in pins:
        play = parse_play(text, SIG_GRID)
        vm = TermMeasure(M, Fraction(1)).value(play)
        vn = TermMeasure(N, Fraction(1)).value(play)
        if not (vm == vn == want):
            return CheckResult("indexed-family-equivalence", False,
                               f"'{text}' gives {vm} / {vn}, wanted {want}")
    verdict = trace_equiv_upto(M, N, depth=6, sig=SIG_GRID)
    if not isinstance(verdict, EquivalentUpTo) or verdict.depth != 6:
        return CheckResult("indexed-family-equivalence", False, repr(verdict))
    return CheckResult("indexed-family-equivalence", True,
                       "pinned values exact, equivalent to depth 6")


def check_laws() -> CheckResult:
    """500 random instances across the law catalogue are trace-sound."""
    rng = random.Random(41)
    count = 0
    while count < 500:
        for law in LAW_IDS:
            lhs, rhs = random_law_instance(rng, law)
            res = check_law_soundness(law, lhs, rhs, depth=6)
            if not (res.shape_ok and res.sound):
                play = format_play(res.counterplay) if res.counterplay else "-"
                return CheckResult(
                    "law-soundness", False,
                    f"{law} instance {count}: {res.reason or play}")
            count += 1
    return CheckResult("law-soundness", True,
                       f"{count} instances across {len(LAW_IDS)} laws, no counterplays")


def check_bisimilarity() -> CheckResult:
    """Canonical forms agree with partition refinement; mixtures-law rewrites
    never change the canonical form."""
    rng = random.Random(42)
    agree = 0
    for i in range(1000):
        a = random_free_term(rng, 2)
        if rng.random() < 0.5:
            b = a
            for _ in range(rng.randint(1, 3)):
                b = random_rewrite(b, rng)
        else:
            b = random_free_term(rng, 2)
        same_canon = canon_bisim(a) == canon_bisim(b)
        same_bisim, _ = bisimilar(a, b)
        if same_canon != same_bisim:
            return CheckResult("bisimilarity-agreement", False,
                               f"pair {i}: canon {same_canon}, refinement {same_bisim}")
        agree += 1
        key = canon_bisim(a)
        t = a
        for j in range(10):
            t = random_rewrite(t, rng)
            if canon_bisim(t) != key:
                return CheckResult("bisimilarity-agreement", False,
                                   f"term {i}: canonical form moved at rewrite {j}")
    return CheckResult("bisimilarity-agreement", True,
                       f"{agree} pairs agree; canonical form stable under rewrites")


def check_ff_decision() -> CheckResult:
    """Bounded-depth normal forms decide exact trace equality."""
    rng = random.Random(43)
    for i in range(200):
        a = random_free_term(rng, 2)
        if rng.random() < 0.5:
            b = a
            for _ in range(rng.randint(1, 4)):
                b = random_rewrite(b, rng, tensor=True)
        else:
            b = random_free_term(rng, 2)
        depth = max(term_depth(a), term_depth(b)) + 1
        same_nf = ff_nf(a) == ff_nf(b)
        same_trace, witness = exact_trace_equal(a, b, depth, sig=SIG_TOWER)
        if same_nf != same_trace:
            return CheckResult(
                "normalform-decision", False,
                f"pair {i}: normal forms {'equal' if same_nf else 'differ'} but "
                f"traces {'agree' if same_trace else 'differ at ' + format_play(witness)}")
    return CheckResult("normalform-decision", True,
                       "200 pairs: syntactic equality matches exact trace equality")


def check_subsplit() -> CheckResult:
    """Splitting off a dominated part recombines to the original exactly."""
    rng = random.Random(44)
    for i in range(100):
        L = random_free_term(rng, 1)
        R = random_free_term(rng, 2)
        r = Fraction(rng.randint(2, 5), 6)
        M = Choice(r, L, R)
        p = r * Fraction(rng.randint(1, 3), 4)
        S = subsplit(M, L, p)
        recombined = Choice(p, L, S)
        depth = term_depth(M) + 1
        equal, witness = exact_trace_equal(recombined, M, depth, sig=SIG_TOWER)
        if not equal:
            return CheckResult("subsplit-identity", False,
                               f"instance {i} differs at '{format_play(witness)}'")
    # a generated instance: tolerance doubles because of family truncation
    M = Choice(Fraction(1, 2), Req(Sym("c")), loop())
    S = subsplit(M, Req(Sym("c")), Fraction(1, 4))
    mv = TermMeasure(M, Fraction(1))
    rv = SumMeasure((TermMeasure(Req(Sym("c")), Fraction(1, 4)),
                     TermMeasure(S, Fraction(3, 4))))
    for play in plays_union(mv, rv, 5, sig=SIG_LOOP):
        if abs(mv.value(play) - rv.value(play)) > 2 * DEFAULT_EPS:
            return CheckResult("subsplit-identity", False,
                               f"generated instance off at '{format_play(play)}'")
    return CheckResult("subsplit-identity", True,
                       "100 exact recombinations plus a generated spot-check")


def check_impersonation() -> CheckResult:
    """Six rounds of impersonation cancel the towers against each other."""
    M, N = tower_a(), tower_b()
    cert = impersonate(M, N, rounds=6, depth=6)
    U = cert.residual
    half = Fraction(1, 2)
    left = TermMeasure(Choice(half, M, U), Fraction(1))
    right = TermMeasure(Choice(half, N, U), Fraction(1))
    worst = Fraction(0)
    for play in plays_union(left, right, 6, sig=SIG_TOWER):
        gap = abs(left.value(play) - right.value(play))
        worst = max(worst, gap)
        if gap > 0:
            return CheckResult("impersonation-cancellation", False,
                               f"gap {gap} at '{format_play(play)}'")
    return CheckResult("impersonation-cancellation", True,
                       f"{cert.rounds} rounds, mixtures agree exactly to depth 6")


def check_steady() -> CheckResult:
    """Steady pipeline end to end: normalisation, the finitary prover with a
    replayable proof, and honest failure off the finitary fragment."""
    rng = random.Random(45)
    for i in range(100):
        t = random_dyadic_family(rng) if rng.random() < 0.3 \
            else random_free_term(rng, 2)
        _, witness = steady_nf(t, sig=SIG_TOWER)
        if not witness.margins or witness.margins[0] <= 0:
            return CheckResult("steady-pipeline", False,
                               f"term {i}: no positive margin certified")
    sa, _ = steady_nf(tower_a(), sig=SIG_TOWER)
    sb, _ = steady_nf(tower_b(), sig=SIG_TOWER)
    verdict = tensor_equiv_finitary(sa, sb, rounds=4, sig=SIG_TOWER)
    if not isinstance(verdict, ProvedEquivalent):
        return CheckResult("steady-pipeline", False, repr(verdict))
    replay_proof(verdict.proof, sa, sb, sig=SIG_TOWER)
    try:
        steady_nf(omega_uniform(), sig=SIG_OMEGA)
        return CheckResult("steady-pipeline", False,
                           "omega-arity program was not rejected")
    except SignatureNotFinitary:
        pass
    ref = is_uniformly_below(TermMeasure(omega_uniform(), Fraction(1, 2)),
                             omega_uniform(), search_depth=10, sig=SIG_OMEGA)
    if not isinstance(ref, UniformRefutation):
        return CheckResult("steady-pipeline", False,
                           f"expected a refutation, got {ref!r}")
    for d, play, _, tau_v in ref.violations:
        if d < Fraction(1, 1024):
            continue
        n = play.pairs[0][1] if play.pairs else -1
        ok = (len(play.pairs) == 1 and play.pairs[0][0] == Sym("b")
              and play.dangling is not None and play.dangling.base == "c"
              and tau_v == Fraction(1, n + 1))
        if not ok:
            return CheckResult(
                "steady-pipeline", False,
                f"violation for d={d} is '{format_play(play)}' value {tau_v}")
    return CheckResult("steady-pipeline", True,
                       "100 certified witnesses; towers proved with replayable "
                       "proof; omega program rejected with per-margin violations")


def check_games() -> CheckResult:
    """Survival probabilities, the per-level recurrence, and decompositions."""
    rho0 = Counterstrategy({}, ConstIndex(0))
    ps = cont_prob(loop(), rho0, 20, sig=SIG_LOOP)
    for m, p in enumerate(ps):
        if p != Interval.exact(Fraction(1, 2 ** m)):
            return CheckResult("counterplay-survival", False,
                               f"survival after {m} cycles is {p}")
    rng = random.Random(46)
    for i in range(100):
        t = random_finitary_term(rng, 2)
        rho = rng.choice((rho0, Counterstrategy({}, ConstIndex(1)),
                          Counterstrategy({}, RoundRobin()),
                          Counterstrategy({}, ConstIndex(rng.randrange(3)))))
        playing, failing, unresolved = level_masses(t, rho, 5, sig=SIG_TOWER)
        for m in range(5):
            if playing[m] != failing[m] + unresolved[m] + playing[m + 1]:
                return CheckResult(
                    "counterplay-survival", False,
                    f"pair {i}: level {m} books do not balance")
    d = definability_decomp(loop(), 4, certify_depth=4, sig=SIG_LOOP)
    full = TermMeasure(loop(), Fraction(1))
    tol = Fraction(1, 16) + DEFAULT_EPS
    for play, _ in support_enum(full, 4, sig=SIG_LOOP):
        approx = sum((w * TermMeasure(p, Fraction(1)).value(play)
                      for w, p in d.parts), Fraction(0))
        gap = full.value(play) - approx
        if not 0 <= gap <= tol:
            return CheckResult("counterplay-survival", False,
                               f"decomposition gap {gap} at '{format_play(play)}'")
    return CheckResult("counterplay-survival", True,
                       "exact survival profile; 100 balanced ledgers; "
                       "decomposition within 2^-4")


ALL_CHECKS: Tuple[Tuple[str, Callable[[], CheckResult]], ...] = (
    ("trace-table", check_trace_table),
    ("tower-trace-equivalence", check_tower_equivalence),
    ("indexed-family-equivalence", check_grid_equivalence),
    ("law-soundness", check_laws),
    ("bisimilarity-agreement", check_bisimilarity),
    ("normalform-decision", check_ff_decision),
    ("subsplit-identity", check_subsplit),
    ("impersonation-cancellation", check_impersonation),
    ("steady-pipeline", check_steady),
    ("counterplay-survival", check_games),
)


def run_all(names: Optional[List[str]] = None) -> List[CheckResult]:
    """Run the battery (or the named subset), never raising: an exception in a
    check becomes its failure message."""
    wanted = set(names) if names else None
    out = []
    for name, fn in ALL_CHECKS:
        if wanted is not None and name not in wanted:
            continue
        try:
            out.append(fn())
        except Exception as e:  # noqa: BLE001 - report, don't crash the battery
            out.append(CheckResult(name, False, f"{type(e).__name__}: {e}"))
    return out
