"""Counterplay: running programs against input-supplying policies.

The program emits outputs; a counterstrategy answers with inputs (or refuses,
which ends the run).  This module measures how long a program keeps playing
under a policy, searches for survival-maximising policies, extracts
bounded-depth approximants of a program, and samples individual runs.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Optional, Tuple, Union

from .core import (
    Choice, CoeffFamily, Compr, EMPTY_PLAY, GeneratorUnsupported, Inconclusive,
    InvalidInput, IterN, Play, ProgramSyntaxError, Req, ReqFam, Signature, Sum,
    Sym, Term, family_shift_term, family_tail, format_play, is_generator_free,
    parse_play, sum_branch, weight,
)
from .semantics import (
    DEFAULT_EPS, Interval, MeasureView, SumMeasure, TermMeasure, ZeroMeasure,
    as_measure, cond_term, exact_trace_equal, term_heads,
)
from .semantics import _used_arity


# ---------------------------------------------------------------------------
# counterstrategies

@dataclass(frozen=True)
class FailPolicy:
    """Refuse every input: any pending output ends the run."""

    def __str__(self) -> str:
        return "fail"


@dataclass(frozen=True)
class ConstIndex:
    """Always answer with the same input index (refusing where it is invalid)."""

    i: int

    def __str__(self) -> str:
        return f"const {self.i}"


@dataclass(frozen=True)
class RoundRobin:
    """Answer with the cycle count modulo the arity (the count itself at
    omega-arity requests)."""

    def __str__(self) -> str:
        return "roundrobin"


class Adversarial:
    """Answer from a precomputed play -> input table, refusing off-table."""

    def __init__(self, table: Dict[Play, int]):
        self.table = dict(table)

    def __eq__(self, other) -> bool:
        return isinstance(other, Adversarial) and self.table == other.table

    def __repr__(self) -> str:
        return f"Adversarial({len(self.table)} entries)"


FAIL = FailPolicy()

Policy = Union[FailPolicy, ConstIndex, RoundRobin, Adversarial]


def _checked(i: int, arity: Optional[int]) -> Optional[int]:
    if i < 0 or (arity is not None and i >= arity):
        return None
    return i


class Counterstrategy:
    """Input policy: explicit prescriptions at specific passive plays plus a
    default rule everywhere else.

    An explicit entry that is invalid for the request's arity counts as a
    refusal, not as a fall-through to the default.
    """

    def __init__(self, explicit: Optional[Dict[Play, int]] = None,
                 default: Policy = FAIL):
        self.explicit = dict(explicit or {})
        for play in self.explicit:
            if not play.is_passive:
                raise InvalidInput(
                    f"'{format_play(play)}' does not end with a pending output")
        self.default = default

    def input_for(self, play: Play, arity: Optional[int]) -> Optional[int]:
        """Prescribed input at a passive play; None means the run fails there.

        arity None stands for an omega-arity request (every natural number is
        a valid input); arity 0 has no valid input under any policy.
        """
        if not play.is_passive:
            raise InvalidInput("inputs are prescribed at passive plays only")
        if arity == 0:
            return None
        if play in self.explicit:
            return _checked(self.explicit[play], arity)
        d = self.default
        if isinstance(d, ConstIndex):
            return _checked(d.i, arity)
        if isinstance(d, RoundRobin):
            n = len(play.pairs)
            return n if arity is None else n % arity
        if isinstance(d, Adversarial):
            i = d.table.get(play)
            return None if i is None else _checked(i, arity)
        return None

    def __eq__(self, other) -> bool:
        return (isinstance(other, Counterstrategy)
                and self.explicit == other.explicit
                and self.default == other.default)

    def __repr__(self) -> str:
        return f"Counterstrategy({len(self.explicit)} explicit, default={self.default})"


def _parse_policy(text: str) -> Policy:
    text = text.strip()
    if text == "fail":
        return FAIL
    if text == "roundrobin":
        return RoundRobin()
    if text.startswith("const"):
        rest = text[len("const"):].strip()
        if not rest.lstrip("-").isdigit():
            raise ProgramSyntaxError(f"bad constant input '{rest}'")
        return ConstIndex(int(rest))
    raise ProgramSyntaxError(f"unknown default policy '{text}'")


def parse_counterstrategy(text: str, sig: Optional[Signature] = None) -> Counterstrategy:
    """Parse the line format: 'play -> input' entries plus one 'default:' line
    ('fail', 'const i' or 'roundrobin').  '#' starts a comment."""
    explicit: Dict[Play, int] = {}
    default: Policy = FAIL
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("default:"):
            default = _parse_policy(line[len("default:"):])
        elif "->" in line:
            left, _, right = line.rpartition("->")
            play = parse_play(left.strip(), sig)
            if not play.is_passive:
                raise ProgramSyntaxError(
                    f"'{left.strip()}' does not end with a pending output")
            right = right.strip()
            if not right.isdigit():
                raise ProgramSyntaxError(f"bad input '{right}'")
            explicit[play] = int(right)
        else:
            raise ProgramSyntaxError(f"bad counterstrategy line '{line}'")
    return Counterstrategy(explicit, default)


def format_counterstrategy(rho: Counterstrategy) -> str:
    """Inverse of parse_counterstrategy.  An Adversarial default is folded into
    explicit entries over 'default: fail' (same prescriptions, writable)."""
    explicit = dict(rho.explicit)
    default = rho.default
    if isinstance(default, Adversarial):
        for play, i in default.table.items():
            explicit.setdefault(play, i)
        default = FAIL
    lines = [f"default: {default}"]
    for play in sorted(explicit, key=lambda p: (p.n_outputs, format_play(p))):
        lines.append(f"{format_play(play)} -> {explicit[play]}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# survival probabilities

def _norm_parts(m: Union[MeasureView, Term]) -> tuple:
    """Flatten a measure into weighted term parts ((scale, term), ...)."""
    m = as_measure(m)
    if isinstance(m, ZeroMeasure):
        return ()
    if isinstance(m, TermMeasure):
        return ((m.scale, m.term),)
    if isinstance(m, SumMeasure):
        out = []
        for p in m.parts:
            out.extend(_norm_parts(p))
        return tuple(out)
    raise GeneratorUnsupported("survival analysis needs a term-backed measure")


def _arity_size(term: Term, sym: Sym, sig: Optional[Signature]) -> Optional[int]:
    if sig is not None:
        return sig.arity_size(sym)
    return _used_arity(term, sym)


def _sym_order(sym: Sym):
    return (sym.base, sym.indices)


def level_masses(m: Union[MeasureView, Term], rho: Counterstrategy, steps: int,
                 eps: Fraction = DEFAULT_EPS,
                 sig: Optional[Signature] = None) -> tuple:
    """Per-level bookkeeping of a run under rho: three lists of Fractions
    (playing, failing, unresolved), indexed by completed input/output cycles.

    playing[n] is the exact mass still in play after n cycles; failing[n] the
    mass whose pending output rho refuses during cycle n; unresolved[n] the
    mass lost to truncated head enumeration there (0 on solvable families).
    playing[n] == failing[n] + unresolved[n] + playing[n+1] is a theorem about
    conditioning, not an accounting identity: the failing side is computed from
    head masses and the playing side from independently conditioned
    continuations.
    """
    if steps < 0:
        raise InvalidInput("steps must be >= 0")
    entries = [(EMPTY_PLAY, scale, term) for scale, term in _norm_parts(m)]
    playing = [sum((w for _, w, _ in entries), Fraction(0))]
    failing = []
    unresolved = []
    for _ in range(steps):
        fail_n = Fraction(0)
        lost_n = Fraction(0)
        nxt = []
        for play, w, term in entries:
            heads, trunc = term_heads(term, eps)
            lost_n += w * trunc
            for sym in sorted(heads, key=_sym_order):
                q = heads[sym]
                if q <= 0:
                    continue
                passive = play.with_output(sym)
                i = rho.input_for(passive, _arity_size(term, sym, sig))
                if i is None:
                    fail_n += w * q
                    continue
                mass, child = cond_term(term, sym, i, eps)
                if child is None:
                    fail_n += w * q
                    continue
                nxt.append((passive.with_input(i), w * mass, child))
        entries = nxt
        failing.append(fail_n)
        unresolved.append(lost_n)
        playing.append(sum((w for _, w, _ in entries), Fraction(0)))
    return playing, failing, unresolved


def cont_prob(m: Union[MeasureView, Term], rho: Counterstrategy, steps: int,
              eps: Fraction = DEFAULT_EPS,
              sig: Optional[Signature] = None) -> list:
    """Certified survival probabilities: a list of steps+1 Intervals, the n-th
    enclosing the mass still in play after n completed cycles under rho.

    The first entry is the total weight; entries are non-increasing.  Interval
    widths stay 0 unless head enumeration had to truncate a family.
    """
    playing, _, unresolved = level_masses(m, rho, steps, eps, sig)
    out = []
    slack = Fraction(0)
    for n, p in enumerate(playing):
        out.append(Interval(p, p + slack))
        if n < len(unresolved):
            slack += unresolved[n]
    return out


def fail_mass(m: Union[MeasureView, Term], rho: Counterstrategy, depth: int,
              eps: Fraction = DEFAULT_EPS,
              sig: Optional[Signature] = None) -> Interval:
    """Bounds on the total mass that eventually fails under rho: the lower
    bound is the mass seen failing within depth cycles, the upper adds
    everything still in play (or unresolved) at the horizon."""
    playing, failing, unresolved = level_masses(m, rho, depth, eps, sig)
    seen = sum(failing, Fraction(0))
    return Interval(seen, seen + playing[-1] + sum(unresolved, Fraction(0)))


# ---------------------------------------------------------------------------
# adversarial counterstrategies

@dataclass(frozen=True)
class ResidualTable:
    """Stopped mass q and through mass r per explored play, to a horizon.

    q is the mass whose pending output has no valid input (the run stops
    there); r is the mass that plays on through — beyond the horizon all
    unstopped mass counts as playing on.  margin(n) = 2 - 1/(n+1) is the
    survival weight ladder an adversary tracks between consecutive cycles: the
    chosen input at cycle n keeps at least margin(n)/margin(n+1) of the play's
    through mass, which an exact argmax satisfies by construction.
    """

    entries: tuple  # ((play, q, r), ...)
    horizon: int
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index",
                           {play: (q, r) for play, q, r in self.entries})

    def lookup(self, play: Play) -> Tuple[Fraction, Fraction]:
        if play not in self._index:
            raise InvalidInput(f"play '{format_play(play)}' was not explored")
        return self._index[play]

    @staticmethod
    def margin(n: int) -> Fraction:
        return 2 - Fraction(1, n + 1)


def residual_table(t: Term, depth: int, eps: Fraction = DEFAULT_EPS,
                   sig: Optional[Signature] = None,
                   omega_bound: int = 4) -> Tuple[ResidualTable, Dict[Play, int]]:
    """Explore plays of t to depth and prescribe, at every passive play, the
    input whose survival profile (mass still alive after d more cycles, for
    every d in the horizon, compared from the horizon backwards) is largest —
    so of two inputs whose mass dies either way, the one that dies later wins.

    Returns the table and the prescription map.  Inputs at omega-arity
    requests are probed up to omega_bound.
    """
    entries = []
    table: Dict[Play, int] = {}

    def explore(term: Term, w: Fraction, play: Play, level: int) -> list:
        """Survival profile of w under the prescriptions chosen below:
        prof[d] = mass still in play after d more completed cycles."""
        entries.append((play, Fraction(0), w))
        span = depth - level
        prof = [Fraction(0)] * (span + 1)
        prof[0] = w
        heads, trunc = term_heads(term, eps)
        for d in range(1, span + 1):
            prof[d] += w * trunc  # unknown mass: assume it keeps playing
        for sym in sorted(heads, key=_sym_order):
            q = heads[sym]
            if q <= 0:
                continue
            passive = play.with_output(sym)
            arity = _arity_size(term, sym, sig)
            if arity == 0:
                entries.append((passive, w * q, Fraction(0)))
                continue
            entries.append((passive, Fraction(0), w * q))
            if level >= depth:
                continue
            inputs = range(omega_bound) if arity is None else range(arity)
            best = None
            for i in inputs:
                mass, child = cond_term(term, sym, i, eps)
                if child is None:
                    continue
                cp = explore(child, w * mass, passive.with_input(i), level + 1)
                key = tuple(reversed(cp))
                if best is None or key > best[0]:
                    best = (key, i, cp)
            if best is None:
                continue
            table[passive] = best[1]
            for d, v in enumerate(best[2]):
                prof[d + 1] += v
        return prof

    explore(t, Fraction(1), EMPTY_PLAY, 0)
    return ResidualTable(tuple(entries), depth), table


def adversarial_rho(t: Term, depth: int = 6, eps: Fraction = DEFAULT_EPS,
                    sig: Optional[Signature] = None,
                    omega_bound: int = 4) -> Counterstrategy:
    """Best-effort survival-maximising counterstrategy for t.

    Builds the residual-table prescription to the given depth, then keeps
    whichever of {that table, const 0..3, roundrobin} measures the highest
    survival probability at the horizon (the table wins ties).
    """
    _, table = residual_table(t, depth, eps, sig, omega_bound)
    candidates = [Counterstrategy(table, FAIL)]
    candidates += [Counterstrategy({}, ConstIndex(i)) for i in range(4)]
    candidates.append(Counterstrategy({}, RoundRobin()))
    best, best_score = None, None
    for cand in candidates:
        last = cont_prob(t, cand, depth, eps=eps, sig=sig)[-1]
        score = (last.lo, last.hi)
        if best_score is None or score > best_score:
            best, best_score = cand, score
    return best


# ---------------------------------------------------------------------------
# bounded-depth extraction

def _split_rest(lam_i: Fraction, tau_i: Term, rest_i: Optional[Term],
                lam: Fraction) -> Term:
    """The residual of one constituent, renormalised: mixes the over-extracted
    part of tau_i with rest_i."""
    if lam_i == 1:
        return tau_i
    if lam_i == lam:
        return rest_i
    return Choice((lam_i - lam) / (1 - lam), tau_i, rest_i)


def _extract_split(t: Term, x: Fraction) -> Tuple[Fraction, Term, Optional[Term]]:
    """Split t = lam * tau + (1 - lam) * rest exactly, with lam >= x and tau of
    bounded depth (generated families truncated; omega-arity requests kept).

    rest is None exactly when lam == 1.
    """
    if is_generator_free(t):
        return Fraction(1), t, None
    if isinstance(t, Req):
        parts = [_extract_split(c, x) for c in t.children]
        lam = min(p[0] for p in parts)
        tau = Req(t.sym, tuple(p[1] for p in parts))
        if lam == 1:
            return lam, tau, None
        rest = Req(t.sym, tuple(_split_rest(li, ti, ri, lam)
                                for li, ti, ri in parts))
        return lam, tau, rest
    if isinstance(t, ReqFam):
        lam, tau_b, rest_b = _extract_split(t.body, x)
        return (lam, ReqFam(t.sym, t.var, tau_b),
                None if rest_b is None else ReqFam(t.sym, t.var, rest_b))
    if isinstance(t, Compr):
        # bounded uniform comprehension: extraction commutes with it because
        # the split below is the same for every index
        lam, tau_b, rest_b = _extract_split(t.body, x)
        return (lam, Compr(t.var, t.bound, t.coeff, tau_b),
                None if rest_b is None else Compr(t.var, t.bound, t.coeff, rest_b))
    if isinstance(t, Choice):
        ll, lt, lr = _extract_split(t.left, x)
        rl, rt, rr = _extract_split(t.right, x)
        lam = t.p * ll + (1 - t.p) * rl
        if lam == 1:
            return lam, Choice(t.p, lt, rt), None
        tau = Choice(t.p * ll / lam, lt, rt)
        if ll == 1:
            rest: Term = rr
        elif rl == 1:
            rest = lr
        else:
            rest = Choice(t.p * (1 - ll) / (1 - lam), lr, rr)
        return lam, tau, rest
    if isinstance(t, Sum):
        if t.gen is None:
            coeffs = t.coeffs.explicit
            branches = t.branches
        else:
            if not (0 <= x < 1):
                raise InvalidInput("extraction level must satisfy 0 <= x < 1")
            budget = 1 - x
            cut = len(t.branches)
            while family_tail(t.coeffs, cut) > budget / 2:
                cut += 1
                if cut > 100000:
                    raise GeneratorUnsupported(
                        "coefficient tail decays too slowly to truncate")
            coeffs = tuple(t.coeffs.coeff(i) for i in range(cut))
            branches = tuple(t.branches) + tuple(
                sum_branch(t, i) for i in range(len(t.branches), cut))
            x = 1 - budget / 2  # tighter level for the kept prefix
        parts = [_extract_split(b, x) for b in branches]
        lam = sum((c * p[0] for c, p in zip(coeffs, parts)), Fraction(0))
        tau = Sum(CoeffFamily(tuple(c * p[0] / lam for c, p in zip(coeffs, parts)),
                              None), tuple(p[1] for p in parts), None)
        if lam == 1:
            return lam, tau, None
        rest_coeffs = []
        rest_branches = []
        for c, (li, ti, ri) in zip(coeffs, parts):
            if li == 1:
                continue
            rest_coeffs.append(c * (1 - li) / (1 - lam))
            rest_branches.append(ri)
        if t.gen is not None:
            tail_w = family_tail(t.coeffs, len(branches))
            if tail_w > 0:
                rest_coeffs.append(tail_w / (1 - lam))
                rest_branches.append(family_shift_term(t, len(branches)))
        if len(rest_branches) == 1 and rest_coeffs[0] == 1:
            rest = rest_branches[0]
        else:
            rest = Sum(CoeffFamily(tuple(rest_coeffs), None),
                       tuple(rest_branches), None)
        return lam, tau, rest
    raise GeneratorUnsupported(f"cannot extract from template node {type(t).__name__}")


def extract_ff(t: Term, x: Union[Fraction, int]) -> Tuple[Fraction, Term]:
    """Keep a bounded-depth approximant of t of weight lam >= x: returns
    (lam, tau) with lam * trace(tau) <= trace(t) pointwise.

    Generated families are truncated once their tail fits half the budget
    1 - x, and the kept branches are extracted at the remaining half; a
    generator-free t is returned whole with lam == 1.  Omega-arity requests
    with bounded bodies are kept intact.
    """
    x = Fraction(x)
    if not (0 <= x < 1):
        raise InvalidInput("extraction level must satisfy 0 <= x < 1")
    lam, tau, _ = _extract_split(t, x)
    return lam, tau


# ---------------------------------------------------------------------------
# definability decompositions

@dataclass(frozen=True)
class DefinabilityDecomposition:
    """t as a dyadic series of bounded-depth parts plus a small residual:
    trace(t) == sum of w_k * trace(tau_k) + residual_weight * trace(residual),
    with w_k = 2^-(k+1) exactly and residual_weight = 2^-K."""

    parts: tuple  # ((Fraction, Term), ...)
    residual_weight: Fraction
    residual: Term
    certified_depth: int


def definability_decomp(t: Term, rounds: int, certify_depth: int = 4,
                        eps: Fraction = DEFAULT_EPS,
                        sig: Optional[Signature] = None) -> DefinabilityDecomposition:
    """Peel off bounded-depth parts of weight exactly 2^-(k+1), k < rounds.

    Each round extracts at level 1/2 and reshapes the split so that exactly
    half the remaining mass is claimed; the residual after all rounds carries
    weight 2^-rounds exactly.  The reassembly is checked against t on the
    support union to certify_depth before returning.
    """
    if rounds < 1:
        raise InvalidInput("rounds must be >= 1")
    cur = t
    parts = []
    for k in range(rounds):
        lam, tau, rest = _extract_split(cur, Fraction(1, 2))
        parts.append((Fraction(1, 2 ** (k + 1)), tau))
        if rest is None:
            cur = tau
        elif lam == Fraction(1, 2):
            cur = rest
        else:
            cur = Choice(2 * lam - 1, tau, rest)
    residual_weight = Fraction(1, 2 ** rounds)
    reassembled = SumMeasure(tuple(TermMeasure(part, w) for w, part in parts)
                             + (TermMeasure(cur, residual_weight),))
    same, witness = exact_trace_equal(reassembled, t, certify_depth, eps=eps, sig=sig)
    if not same:
        raise Inconclusive(
            f"decomposition does not re-assemble at '{format_play(witness)}'")
    return DefinabilityDecomposition(tuple(parts), residual_weight, cur,
                                     certify_depth)


# ---------------------------------------------------------------------------
# sampled runs

@dataclass(frozen=True)
class Failed:
    """The counterstrategy refused the pending output."""

    at: Play


@dataclass(frozen=True)
class Exhausted:
    """The step budget ran out with the play still alive."""


def sample_play(t: Term, rho: Counterstrategy, max_steps: int = 64,
                seed: int = 0, eps: Fraction = DEFAULT_EPS,
                sig: Optional[Signature] = None) -> Tuple[Play, Union[Failed, Exhausted]]:
    """Run one play of t under rho: outputs sampled from the exact head
    distribution, inputs taken from rho.  Deterministic for a fixed seed.

    Returns the play together with Failed(at) when rho refuses (requests with
    no valid input always fail) or Exhausted() after max_steps cycles.
    """
    rng = random.Random(seed)
    play, term = EMPTY_PLAY, t
    for _ in range(max_steps):
        heads, _ = term_heads(term, eps)
        items = [(sym, heads[sym]) for sym in sorted(heads, key=_sym_order)
                 if heads[sym] > 0]
        total = sum((q for _, q in items), Fraction(0))
        draw = Fraction(rng.getrandbits(64), 2 ** 64) * total
        acc = Fraction(0)
        sym = items[-1][0]
        for s, q in items:
            acc += q
            if draw < acc:
                sym = s
                break
        passive = play.with_output(sym)
        i = rho.input_for(passive, _arity_size(term, sym, sig))
        if i is None:
            return passive, Failed(passive)
        _, child = cond_term(term, sym, i, eps)
        if child is None:
            return passive, Failed(passive)
        play, term = passive.with_input(i), child
    return play, Exhausted()
