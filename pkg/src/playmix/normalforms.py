"""Normal-form rewriters and the constructive decompositions behind them.

The ladder: ``shallow_nf`` (one head layer), ``light_nf`` (exact dyadic
coefficients, Sum-free components), ``ff_nf`` / ``wf_nf`` (canonical nested
head forms), ``steady_nf`` (dyadic components with certified uniform margins).
Alongside: ``is_uniformly_below`` (margin witnesses / refutations),
``measure_to_wfnf`` (reconstruct a term from an exactly-queryable measure),
``subsplit`` (convex decomposition against a dominated part), and
``impersonate`` (iterated subsplits yielding a cancellation residual).

All arithmetic is exact; certification failures raise rather than degrade.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, Optional, Tuple

from .core import (
    Choice, CoeffFamily, Compr, DominationFails, EMPTY_PLAY, FoldGen,
    GeneratorUnsupported, Hole, Inconclusive, InexactValues, InvalidInput,
    IterN, IterateGen, MapGen, NatExpr, NotFinitelyFounded, NotWellFounded,
    Play, PolyGeo, ProbabilityOutOfRange, RatLin, Req, ReqFam, Signature,
    SignatureNotFinitary, Sum, Sym, Term, family_tail, format_play,
    is_generator_free, shift_gen, sum_branch, term_depth, weight,
)
from .semantics import (
    DEFAULT_EPS, DiffMeasure, MeasureView, SumMeasure, TermMeasure,
    ZeroMeasure, as_measure, cond_term, exact_trace_equal, exchange_diagonal,
    is_diagonal_sum, support_enum, term_heads,
)
from .semantics import _used_arity

__all__ = [
    "UniformWitness", "UniformRefutation", "SteadyWitness",
    "ImpersonationCertificate", "ZERO_TERM", "is_uniformly_below",
    "shallow_nf", "light_nf", "ff_nf", "wf_nf", "measure_to_wfnf",
    "subsplit", "impersonate", "steady_nf",
]


ZERO_TERM = Sum(CoeffFamily((), None), (), None)
"""The empty mixture: weight 0, no branches."""


# ---------------------------------------------------------------------------
# shared helpers

def _sym_sort_key(sym: Sym):
    parts = []
    for ix in sym.indices:
        parts.append((0, ix, "") if isinstance(ix, int) else (1, 0, str(ix)))
    return (sym.base, tuple(parts))


def _contains_omega(t) -> bool:
    if isinstance(t, ReqFam):
        return True
    if isinstance(t, Req):
        return any(_contains_omega(c) for c in t.children)
    if isinstance(t, Choice):
        return _contains_omega(t.left) or _contains_omega(t.right)
    if isinstance(t, Sum):
        if any(_contains_omega(b) for b in t.branches):
            return True
        gen = t.gen
        if isinstance(gen, MapGen):
            return _contains_omega(gen.body)
        if isinstance(gen, (IterateGen, FoldGen)):
            ctx = gen.ctx if isinstance(gen, IterateGen) else gen.step
            return _contains_omega(ctx) or _contains_omega(gen.base)
        return False
    if isinstance(t, Compr):
        return _contains_omega(t.body)
    if isinstance(t, IterN):
        return _contains_omega(t.ctx) or _contains_omega(t.base)
    if isinstance(t, Hole):
        return False
    raise TypeError(f"not a term: {t!r}")


def _flatten_finite(t, err, what: str) -> list:
    """Flatten Choice/explicit-Sum structure to [(weight, request-node)]."""
    if isinstance(t, Req):
        return [(Fraction(1), t)]
    if isinstance(t, ReqFam):
        raise err(f"{what}: omega-arity request")
    if isinstance(t, Choice):
        out = [(t.p * q, r) for q, r in _flatten_finite(t.left, err, what)]
        out += [((1 - t.p) * q, r)
                for q, r in _flatten_finite(t.right, err, what)]
        return [(q, r) for q, r in out if q]
    if isinstance(t, Sum):
        if t.gen is not None or t.coeffs.tail is not None:
            raise err(f"{what}: generated family")
        out = []
        for c, b in zip(t.coeffs.explicit, t.branches):
            if c == 0:
                continue
            out += [(c * q, r) for q, r in _flatten_finite(b, err, what)]
        return out
    raise err(f"{what}: unexpected {type(t).__name__} node")


def _mix_pairs(pairs: list):
    """Weighted mixture as a term; aggregates duplicates, collapses singletons."""
    agg: list = []
    for q, t in pairs:
        if q == 0:
            continue
        for i, (qa, ta) in enumerate(agg):
            if ta == t:
                agg[i] = (qa + q, ta)
                break
        else:
            agg.append((q, t))
    total = sum((q for q, _ in agg), Fraction(0))
    if len(agg) == 1:
        return agg[0][1]
    return Sum(CoeffFamily(tuple(q / total for q, _ in agg)),
               tuple(t for _, t in agg))


def _comb(pairs: list):
    """Right-comb of binary choices over weighted components (normalised)."""
    pairs = [(q, t) for q, t in pairs if q]
    if not pairs:
        raise InvalidInput("empty mixture")
    if len(pairs) == 1:
        return pairs[0][1]
    total = sum((q for q, _ in pairs), Fraction(0))
    q0, t0 = pairs[0]
    return Choice(q0 / total, t0, _comb(pairs[1:]))


def _measure_parts(m: MeasureView) -> list:
    if isinstance(m, TermMeasure):
        return [m]
    if isinstance(m, ZeroMeasure):
        return []
    if isinstance(m, SumMeasure):
        out: list = []
        for p in m.parts:
            out.extend(_measure_parts(p))
        return out
    if isinstance(m, DiffMeasure):
        return _measure_parts(m.plus) + _measure_parts(m.minus)
    raise TypeError(f"not a measure: {m!r}")


def _exhaustive_depth(m: MeasureView) -> Optional[int]:
    """Depth past which enumeration provably covers the whole support, or
    None when the measure reaches through generators / omega requests."""
    parts = _measure_parts(m)
    if all(is_generator_free(p.term) for p in parts):
        return max((term_depth(p.term) for p in parts), default=0) + 1
    return None


# ---------------------------------------------------------------------------
# uniform margins

@dataclass(frozen=True)
class UniformWitness:
    """Certified d with sigma(s) + d <= tau(s) on sigma's whole support."""

    d: Fraction
    support_size: int
    min_margin: Fraction


@dataclass(frozen=True)
class UniformRefutation:
    """One violating support play per candidate margin 2^-j."""

    violations: tuple  # ((d, play, sigma_value, tau_value), ...)


def _probe_indices(d: Fraction) -> list:
    pivot = int(1 / (2 * d)) + 1
    return sorted({max(0, pivot - 1), pivot, pivot + 1, pivot + 2})


def is_uniformly_below(sigma, tau, search_depth: int = 24,
                       depth: Optional[int] = None,
                       eps: Fraction = DEFAULT_EPS,
                       sig: Optional[Signature] = None,
                       omega_bound: int = 16):
    """Search the margin ladder {2^-j : j <= search_depth}.

    Returns a UniformWitness (certified when sigma's support is exhaustible)
    or a UniformRefutation carrying a violating play per candidate; raises
    Inconclusive when neither can be established.
    """
    sigma, tau = as_measure(sigma), as_measure(tau)
    if sigma.weight() == 0:
        return UniformWitness(Fraction(1), 0, Fraction(1))
    full = _exhaustive_depth(sigma)
    if depth is None:
        depth = full if full is not None else 12
    exhaustive = full is not None and depth >= full

    entries = []
    for play, _ in support_enum(sigma, depth, eps, omega_bound, sig):
        sv = sigma.value(play)
        if sv == 0:
            continue
        entries.append((tau.value(play) - sv, play, sv))
    if not entries:
        raise Inconclusive("no support play enumerated for a non-zero measure")
    worst = min(entries, key=lambda e: e[0])
    min_margin = worst[0]
    candidates = [Fraction(1, 2 ** j) for j in range(search_depth + 1)]

    if exhaustive and min_margin > 0:
        for d in candidates:
            if d <= min_margin:
                return UniformWitness(d, len(entries), min_margin)
    # No certifiable witness on the ladder: refute candidate by candidate.
    violations = []
    for d in candidates:
        if min_margin < d:
            margin, play, sv = worst
            violations.append((d, play, sv, sv + margin))
            continue
        hit = _probe_violation(sigma, tau, d, entries)
        if hit is None:
            raise Inconclusive(
                f"support not exhausted at depth {depth} and no violation "
                f"found for candidate {d}")
        violations.append(hit)
    return UniformRefutation(tuple(violations))


def _probe_violation(sigma: MeasureView, tau: MeasureView, d: Fraction,
                     entries: list):
    """Look for a margin violation at large input indices by rewriting the
    inputs of already-enumerated support plays."""
    for _, play, _ in entries:
        for pos in range(len(play.pairs)):
            for n in _probe_indices(d):
                pairs = list(play.pairs)
                pairs[pos] = (pairs[pos][0], n)
                cand = Play(tuple(pairs), play.dangling)
                try:
                    sv = sigma.value(cand)
                except InvalidInput:
                    continue
                if sv <= 0:
                    continue
                tv = tau.value(cand)
                if sv + d > tv:
                    return (d, cand, sv, tv)
    return None


# ---------------------------------------------------------------------------
# shallow normal form

def _already_shallow(t: Sum, spot: int = 8) -> bool:
    heads = []
    for b in t.branches:
        if not isinstance(b, (Req, ReqFam)):
            return False
        heads.append(b.sym)
    if t.gen is not None:
        try:
            for n in range(spot):
                b = sum_branch(t, len(t.branches) + n)
                if not isinstance(b, (Req, ReqFam)):
                    return False
                heads.append(b.sym)
        except (InvalidInput, GeneratorUnsupported):
            return False
    return len(set(heads)) == len(heads)


def shallow_nf(t, eps: Fraction = DEFAULT_EPS) -> Term:
    """Gather the first layer into one head distribution with conditioned
    continuations; deeper structure is left untouched."""
    if isinstance(t, (Req, ReqFam)):
        return Sum(CoeffFamily((Fraction(1),)), (t,))
    if isinstance(t, Sum) and _already_shallow(t):
        return t
    heads, trunc = term_heads(t, eps)
    if trunc:
        raise GeneratorUnsupported(
            "head family cannot be enumerated exactly; the term is not "
            "reducible to a single head layer")
    coeffs = []
    branches = []
    for sym in sorted(heads, key=_sym_sort_key):
        p = heads[sym]
        if p == 0:
            continue
        arity = _used_arity(t, sym)
        if arity is None:
            raise GeneratorUnsupported(
                "omega-arity heads cannot be merged by conditioning")
        children = []
        for i in range(arity):
            mass, child = cond_term(t, sym, i, eps)
            if mass != p:
                raise InexactValues(
                    f"inconsistent conditional mass at head '{sym}'")
            children.append(child)
        coeffs.append(p)
        branches.append(Req(sym, tuple(children)))
    return Sum(CoeffFamily(tuple(coeffs)), tuple(branches))


# ---------------------------------------------------------------------------
# light normal form

def _has_sum_node(t) -> bool:
    if isinstance(t, Req):
        return any(_has_sum_node(c) for c in t.children)
    if isinstance(t, ReqFam):
        return _has_sum_node(t.body)
    if isinstance(t, Choice):
        return _has_sum_node(t.left) or _has_sum_node(t.right)
    if isinstance(t, (Sum, Compr)):
        return True
    if isinstance(t, IterN):
        return _has_sum_node(t.ctx) or _has_sum_node(t.base)
    if isinstance(t, Hole):
        return False
    raise TypeError(f"not a term: {t!r}")


def _gen_sum_free(gen) -> bool:
    if isinstance(gen, MapGen):
        return not _has_sum_node(gen.body)
    if isinstance(gen, IterateGen):
        return not (_has_sum_node(gen.ctx) or _has_sum_node(gen.base))
    if isinstance(gen, FoldGen):
        return not (_has_sum_node(gen.step) or _has_sum_node(gen.base))
    raise TypeError(f"not a generator: {gen!r}")


def _dyadic_coeffs(t: Sum, probes: int = 4) -> bool:
    """Exactly 2^-n-1 everywhere: probe explicit entries, pin the tail shape."""
    for n, c in enumerate(t.coeffs.explicit):
        if c != Fraction(1, 2 ** (n + 1)):
            return False
    tail = t.coeffs.tail
    if tail is None:
        return False
    if tail.ratio != Fraction(1, 2) or len(tail.poly) > 1:
        return False
    ne = len(t.coeffs.explicit)
    return all(tail.coeff(j) == Fraction(1, 2 ** (ne + j + 1))
               for j in range(probes))


def _is_light(t) -> bool:
    if not isinstance(t, Sum) or weight(t) != 1:
        return False
    if not _dyadic_coeffs(t):
        return False
    if any(_has_sum_node(b) for b in t.branches):
        return False
    if t.gen is None:
        return False
    return _gen_sum_free(t.gen)


def _sum_free(t) -> Term:
    """Rewrite every finite Sum node into a right-comb of binary choices."""
    if isinstance(t, Req):
        return Req(t.sym, tuple(_sum_free(c) for c in t.children))
    if isinstance(t, ReqFam):
        return ReqFam(t.sym, t.var, _sum_free(t.body))
    if isinstance(t, Choice):
        return Choice(t.p, _sum_free(t.left), _sum_free(t.right))
    if isinstance(t, Sum):
        if t.gen is not None or t.coeffs.tail is not None:
            raise GeneratorUnsupported(
                "a generated family inside a component cannot be combed")
        pairs = [(c, _sum_free(b))
                 for c, b in zip(t.coeffs.explicit, t.branches) if c]
        return _comb(pairs)
    raise TypeError(f"cannot remove sums from {t!r}")


def _dyadic_tail_poly(start: int) -> PolyGeo:
    """Coefficients 2^-(start+j)-1 for j = 0, 1, ..."""
    return PolyGeo((Fraction(1),), Fraction(1, 2),
                   Fraction(1, 2 ** (start + 1)), 0)


def _regather(stream: list, tail_comp: Term) -> list:
    """Greedy dyadic slot filling over [(weight, component)] followed by a
    constant remainder carrying all the leftover mass; returns the components
    of the finitely many slots that mix anything besides the remainder."""
    slots: list = []
    cur: list = []
    need = Fraction(1, 2)
    i = 0
    used = Fraction(0)
    while True:
        if i >= len(stream):
            if cur:
                cur.append((need, tail_comp))
                slots.append(_comb(cur))
            return slots
        w, comp = stream[i]
        take = min(w - used, need)
        if take:
            cur.append((take, comp))
        used += take
        need -= take
        if used == w:
            i += 1
            used = Fraction(0)
        if need == 0:
            slots.append(_comb(cur))
            cur = []
            need = Fraction(1, 2 ** (len(slots) + 1))
        if len(slots) > 4096:
            raise Inconclusive("dyadic regathering did not stabilise")


def _dyadic_family_term(components: list, tail_comp: Term) -> Sum:
    k = len(components)
    coeffs = tuple(Fraction(1, 2 ** (n + 1)) for n in range(k))
    return Sum(CoeffFamily(coeffs, _dyadic_tail_poly(k)),
               tuple(components), MapGen("#n", tail_comp))


def _finite_syntax(t) -> bool:
    """No generated families or template nodes; omega requests are fine."""
    if isinstance(t, Req):
        return all(_finite_syntax(c) for c in t.children)
    if isinstance(t, ReqFam):
        return _finite_syntax(t.body)
    if isinstance(t, Choice):
        return _finite_syntax(t.left) and _finite_syntax(t.right)
    if isinstance(t, Sum):
        return (t.gen is None and t.coeffs.tail is None
                and all(_finite_syntax(b) for b in t.branches))
    return False


def light_nf(t) -> Term:
    """Exact coefficients 2^-n-1 over components free of Sum nodes."""
    if isinstance(t, Sum) and _is_light(t):
        return t
    if _finite_syntax(t):
        if isinstance(t, Sum) and weight(t) != 1:
            raise InvalidInput("light normalisation needs a weight-1 term")
        stream = [(q, _sum_free(r))
                  for q, r in _flatten_top(t)]
        slots = _regather(stream[:-1], stream[-1][1])
        return _dyadic_family_term(slots, stream[-1][1])
    if not isinstance(t, Sum) or t.gen is None:
        raise GeneratorUnsupported(f"cannot light-normalise {type(t).__name__}")
    return _light_gen_sum(t)


def _flatten_top(t) -> list:
    """Top-level probabilistic structure only; components stay intact."""
    if isinstance(t, (Req, ReqFam)):
        return [(Fraction(1), t)]
    if isinstance(t, Choice):
        out = [(t.p * q, r) for q, r in _flatten_top(t.left)]
        out += [((1 - t.p) * q, r) for q, r in _flatten_top(t.right)]
        return [(q, r) for q, r in out if q]
    if isinstance(t, Sum):
        out = []
        for c, b in zip(t.coeffs.explicit, t.branches):
            if c:
                out += [(c * q, r) for q, r in _flatten_top(b)]
        return out
    raise TypeError(f"cannot flatten {t!r}")


def _light_gen_sum(t: Sum) -> Term:
    """Align a geometric(1/2) coefficient tail onto dyadic slots by shifting
    the generator; other tail shapes are out of template reach."""
    tail = t.coeffs.tail
    if tail is None:
        raise GeneratorUnsupported("generated family without a closed tail")
    if tail.ratio != Fraction(1, 2) or len(tail.poly) > 1:
        raise GeneratorUnsupported(
            "only geometric(1/2) coefficient tails regather into the exact "
            "dyadic ladder within this term language")
    if not _gen_sum_free(t.gen) or any(_has_sum_node(b) for b in t.branches):
        raise GeneratorUnsupported(
            "components of a generated family cannot be combed in place")
    stream = [(c, b) for c, b in zip(t.coeffs.explicit, t.branches) if c]
    ne = len(t.coeffs.explicit)
    nb = len(t.branches)
    # advance into the generated region until a slot boundary aligns with a
    # branch boundary carrying exactly the dyadic remainder
    slots: list = []
    cur: list = []
    need = Fraction(1, 2)
    i = 0
    used = Fraction(0)
    for _ in range(512):
        rest = family_tail(t.coeffs, max(ne, i))
        if i >= len(stream) and used == 0 and not cur:
            want = Fraction(1, 2 ** len(slots))
            if rest == want and t.coeffs.coeff(i) == want / 2:
                k = len(slots)
                return Sum(
                    CoeffFamily(tuple(Fraction(1, 2 ** (n + 1))
                                      for n in range(k)),
                                _dyadic_tail_poly(k)),
                    tuple(slots), shift_gen(t.gen, i - nb))
        if i >= len(stream):
            stream.append((t.coeffs.coeff(i), sum_branch(t, i)))
        w, comp = stream[i]
        take = min(w - used, need)
        if take:
            cur.append((take, comp))
        used += take
        need -= take
        if used == w:
            i += 1
            used = Fraction(0)
        if need == 0:
            slots.append(_comb(cur))
            cur = []
            need = Fraction(1, 2 ** (len(slots) + 1))
    raise GeneratorUnsupported(
        "coefficient stream never aligns with the dyadic ladder")


# ---------------------------------------------------------------------------
# finitely-founded / well-founded normal forms

def _gather_nf(t, err, what: str) -> Sum:
    pairs = _flatten_finite(t, err, what)
    groups: Dict = {}
    for q, req in pairs:
        groups.setdefault(req.sym, []).append((q, req))
    out_syms = sorted(groups, key=_sym_sort_key)
    coeffs = []
    branches = []
    for sym in out_syms:
        occ = groups[sym]
        p = sum((q for q, _ in occ), Fraction(0))
        arity = len(occ[0][1].children)
        if any(len(r.children) != arity for _, r in occ):
            raise InvalidInput(f"head '{sym}' used at two arities")
        children = []
        for i in range(arity):
            mix = _mix_pairs([(q / p, r.children[i]) for q, r in occ])
            children.append(_gather_nf(mix, err, what))
        coeffs.append(p)
        branches.append(Req(sym, tuple(children)))
    return Sum(CoeffFamily(tuple(coeffs)), tuple(branches))


def ff_nf(t) -> Term:
    """Canonical finite nested head form; equality decides trace equivalence
    on finitely probabilistic terms."""
    if not is_generator_free(t):
        raise NotFinitelyFounded(
            "finitely-founded normalisation needs a generator-free term")
    if _contains_omega(t):
        raise NotFinitelyFounded(
            "omega-arity requests are not finitely probabilistic")
    return _gather_nf(t, NotFinitelyFounded, "ff normal form")


def _template_gather(body, err, what: str):
    """Normalise a generator template body, keeping index expressions open."""
    if isinstance(body, Req):
        return Req(body.sym,
                   tuple(_gather_nf(c, err, what) if is_generator_free(c)
                         else _template_gather(c, err, what)
                         for c in body.children))
    raise GeneratorUnsupported(
        f"{what}: template bodies must be request-rooted")


def wf_nf(t, declared_depth: Optional[int] = None, spot: int = 16) -> Term:
    """Canonical countable nested head form.

    Generated families must come with a declared play-depth bound; the bound
    is spot-verified on materialised branches, and families whose branch depth
    grows without bound are rejected.
    """
    if is_generator_free(t):
        if _contains_omega(t):
            raise NotWellFounded("omega-arity requests have no nested form here")
        return _gather_nf(t, NotWellFounded, "wf normal form")
    if not isinstance(t, Sum) or t.gen is None:
        raise NotWellFounded(
            "generated families below the root are not supported")
    if declared_depth is None:
        raise NotWellFounded(
            "generated family carries no declared depth bound")
    checks = max(spot, declared_depth + 2)
    for n in range(checks):
        b = sum_branch(t, len(t.branches) + n)
        if term_depth(b) > declared_depth:
            raise NotWellFounded(
                f"generated branch {n} exceeds the declared depth bound "
                f"{declared_depth}")
    if not isinstance(t.gen, MapGen):
        raise NotWellFounded(
            "iterated and folded families grow without a depth bound")
    heads = []
    for b in t.branches:
        if not isinstance(b, Req):
            raise NotWellFounded("explicit branches must be request-rooted")
        heads.append(b.sym)
    for n in range(checks):
        heads.append(sum_branch(t, len(t.branches) + n).sym)
    if len(set(heads)) != len(heads):
        raise GeneratorUnsupported(
            "cannot merge heads across a generated family")
    branches = tuple(
        Req(b.sym, tuple(_gather_nf(c, NotWellFounded, "wf normal form")
                         for c in b.children))
        for b in t.branches)
    return Sum(t.coeffs, branches,
               MapGen(t.gen.var,
                      _template_gather(t.gen.body, NotWellFounded,
                                       "wf normal form")))


# ---------------------------------------------------------------------------
# measure reconstruction

def measure_to_wfnf(m, sig: Optional[Signature] = None,
                    declared_depth: Optional[int] = None,
                    eps: Fraction = DEFAULT_EPS,
                    omega_bound: int = 16) -> Tuple[Fraction, Term]:
    """Rebuild (weight, Term) from an exactly-queryable play measure."""
    m = as_measure(m)
    lam = m.value(EMPTY_PLAY)
    if lam < 0:
        raise InexactValues(f"negative total mass {lam}")
    if lam == 0:
        return Fraction(0), ZERO_TERM
    depth = _exhaustive_depth(m)
    if depth is None:
        if declared_depth is None:
            raise NotWellFounded(
                "measure reaches through generators and carries no declared "
                "depth bound")
        depth = declared_depth + 1
    plays = [p for p, _ in support_enum(m, depth, eps, omega_bound, sig)]
    deep = [p for p in plays if p.n_outputs >= depth]
    if declared_depth is not None and deep:
        raise NotWellFounded(
            f"support reaches past the declared depth bound at "
            f"'{format_play(deep[0])}'")
    entries = [(p, m.value(p) / lam) for p in plays
               if p != EMPTY_PLAY and m.value(p) > 0]
    return lam, _rebuild(entries, sig)


def _rebuild(entries: list, sig: Optional[Signature]) -> Term:
    """entries: conditioned support suffixes with values; node mass is 1."""
    heads: Dict = {}
    for play, v in entries:
        sym = play.pairs[0][0] if play.pairs else play.dangling
        heads.setdefault(sym, []).append((play, v))
    coeffs = []
    branches = []
    total = Fraction(0)
    for sym in sorted(heads, key=_sym_sort_key):
        group = heads[sym]
        p = next((v for play, v in group
                  if not play.pairs and play.dangling == sym), None)
        if p is None:
            raise InexactValues(
                f"head '{sym}' carries extensions but no head mass")
        if sig is not None:
            arity = sig.arity_size(sym)
            if arity is None:
                raise NotWellFounded(
                    "omega-arity heads have no finite reconstruction")
        else:
            arity = max((play.pairs[0][1] for play, _ in group if play.pairs),
                        default=-1) + 1
        children = []
        for i in range(arity):
            sub = [(Play(play.pairs[1:], play.dangling), v / p)
                   for play, v in group
                   if play.pairs and play.pairs[0][1] == i]
            if not sub:
                raise InexactValues(
                    f"no mass behind input {i} of head '{sym}'")
            children.append(_rebuild(sub, sig))
        coeffs.append(p)
        branches.append(Req(sym, tuple(children)))
        total += p
    if total != 1:
        raise InexactValues(f"head masses sum to {total}, expected 1")
    if len(branches) == 1:
        return branches[0]
    return Sum(CoeffFamily(tuple(coeffs)), tuple(branches))


# ---------------------------------------------------------------------------
# subsplit

def _head_table(t, err, what: str) -> Dict:
    """sym -> (mass, [conditioned child mixture per input])."""
    pairs = _flatten_finite(t, err, what)
    groups: Dict = {}
    for q, req in pairs:
        groups.setdefault(req.sym, []).append((q, req))
    table: Dict = {}
    for sym, occ in groups.items():
        p = sum((q for q, _ in occ), Fraction(0))
        arity = len(occ[0][1].children)
        if any(len(r.children) != arity for _, r in occ):
            raise InvalidInput(f"head '{sym}' used at two arities")
        children = [
            _mix_pairs([(q / p, r.children[i]) for q, r in occ])
            for i in range(arity)
        ]
        table[sym] = (p, children)
    return table


def _sem_head_table(t, eps: Fraction) -> Dict:
    """Like _head_table but through exact head/conditioning semantics, so
    generated families work too (their solvable heads are exact)."""
    heads, trunc = term_heads(t, eps)
    if trunc:
        raise GeneratorUnsupported("subsplit: truncated head family")
    table: Dict = {}
    for sym, q in heads.items():
        if q == 0:
            continue
        arity = _used_arity(t, sym)
        if arity is None:
            raise GeneratorUnsupported("subsplit: omega-arity request")
        table[sym] = (q, [cond_term(t, sym, i, eps)[1] for i in range(arity)])
    return table


def subsplit(M, L, p: Fraction, prefix: Play = EMPTY_PLAY,
             eps: Fraction = DEFAULT_EPS) -> Term:
    """N with M trace-equal to Choice(p, L, N); exact on generator-free input
    and on generated M with solvable heads (L itself must be bounded).

    Follows the per-head recursion: shared heads keep (a_k - p*b_k)/(1-p),
    heads unique to M keep a_k/(1-p); a head of L that outweighs its share in
    M raises DominationFails at the offending play.
    """
    p = Fraction(p)
    if not 0 < p < 1:
        raise ProbabilityOutOfRange(f"split probability {p} not in (0,1)")
    tm = _head_table(M, GeneratorUnsupported, "subsplit") \
        if is_generator_free(M) else _sem_head_table(M, eps)
    tl = _head_table(L, GeneratorUnsupported, "subsplit")
    coeffs = []
    branches = []
    for sym in sorted(set(tm) | set(tl), key=_sym_sort_key):
        a_k = tm[sym][0] if sym in tm else Fraction(0)
        b_k = tl[sym][0] if sym in tl else Fraction(0)
        here = prefix.with_output(sym)
        if p * b_k > a_k:
            raise DominationFails(
                here, f"({p} * {b_k} > {a_k})")
        c_k = (a_k - p * b_k) / (1 - p)
        if b_k == 0:
            children = tm[sym][1]
        elif c_k == 0:
            # the whole share is L's: the conditioned continuations must agree
            for i, (mc, lc) in enumerate(zip(tm[sym][1], tl[sym][1])):
                d = max((term_depth(x) for x in (mc, lc)
                         if is_generator_free(x)), default=0) + 1
                equal, witness = exact_trace_equal(mc, lc, d, eps)
                if not equal:
                    raise DominationFails(
                        _extend(here.with_input(i), witness),
                        "(continuations disagree on an exhausted head)")
            continue
        else:
            sub_p = p * b_k / a_k
            children = [
                subsplit(mc, lc, sub_p, here.with_input(i), eps)
                for i, (mc, lc) in enumerate(zip(tm[sym][1], tl[sym][1]))
            ]
        coeffs.append(c_k)
        branches.append(Req(sym, tuple(children)))
    total = sum(coeffs, Fraction(0))
    if total != 1:
        raise InexactValues(f"residual masses sum to {total}, expected 1")
    if len(branches) == 1:
        return branches[0]
    return Sum(CoeffFamily(tuple(coeffs)), tuple(branches))


def _extend(prefix: Play, suffix: Optional[Play]) -> Play:
    if suffix is None:
        return prefix
    return Play(prefix.pairs + suffix.pairs, suffix.dangling)


# ---------------------------------------------------------------------------
# impersonation

@dataclass(frozen=True)
class ImpersonationCertificate:
    """P_n from M's light form, the solution ladder Q_n, and the residual U
    with Choice(1/2, M, U) trace-equal to Choice(1/2, N, U)."""

    components: tuple
    solutions: tuple
    residual: Term
    rounds: int
    certified_depth: int


def impersonate(M, N, rounds: int, depth: int = 6,
                eps: Fraction = DEFAULT_EPS) -> ImpersonationCertificate:
    """Iterate Q_{n+1} = subsplit(Q_n, P_n, 1/2) along M's light components.

    DominationFails from any round signals that M and N were not
    trace-equivalent to begin with.
    """
    if rounds < 1:
        raise InvalidInput("at least one round is needed")
    light = light_nf(M)
    comps = tuple(sum_branch(light, n) for n in range(rounds))
    sols = [N]
    for n in range(rounds):
        sols.append(subsplit(sols[n], comps[n], Fraction(1, 2)))
        equal, witness = exact_trace_equal(
            sols[n], Choice(Fraction(1, 2), comps[n], sols[n + 1]), depth, eps)
        if not equal:
            raise Inconclusive(
                f"solution {n} failed its defining identity at "
                f"'{format_play(witness)}'")
    residual = _dyadic_family_term(sols[1:], sols[rounds])
    half = Fraction(1, 2)
    equal, witness = exact_trace_equal(
        Choice(half, M, residual), Choice(half, N, residual), depth, eps)
    if not equal:
        raise Inconclusive(
            f"cancellation identity fails at '{format_play(witness)}'")
    return ImpersonationCertificate(comps, tuple(sols), residual, rounds, depth)


# ---------------------------------------------------------------------------
# steady normal form

@dataclass(frozen=True)
class SteadyWitness:
    """margins[m] certifies: prefix of m components + margins[m] <= total,
    on every certified support play of the prefix."""

    margins: tuple
    certified_depth: int


class _Family:
    """Eventually-constant dyadic component family with margin callbacks."""

    def __init__(self, comps: tuple, tail: Term, d: Callable[[int], Fraction]):
        self.comps = comps
        self.tail = tail
        self._d = d
        self._memo: Dict[int, Fraction] = {}

    def component(self, n: int) -> Term:
        return self.comps[n] if n < len(self.comps) else self.tail

    def d(self, m: int) -> Fraction:
        if m not in self._memo:
            self._memo[m] = self._d(m)
        return self._memo[m]


def _steady_family(t) -> _Family:
    if isinstance(t, Req):
        if not t.children:
            return _Family((), t, lambda m: Fraction(1, 2 ** m))
        fams = [_steady_family(c) for c in t.children]
        k = max(len(f.comps) for f in fams)
        comps = tuple(Req(t.sym, tuple(f.component(n) for f in fams))
                      for n in range(k))
        tail = Req(t.sym, tuple(f.tail for f in fams))
        return _Family(comps, tail,
                       lambda m: min([Fraction(1, 2 ** m)]
                                     + [f.d(m) for f in fams]))
    if isinstance(t, Choice):
        lf, rf = _steady_family(t.left), _steady_family(t.right)
        k = max(len(lf.comps), len(rf.comps))
        comps = tuple(Choice(t.p, lf.component(n), rf.component(n))
                      for n in range(k))
        tail = Choice(t.p, lf.tail, rf.tail)
        return _Family(comps, tail,
                       lambda m, p=t.p: min(p * lf.d(m), (1 - p) * rf.d(m)))
    if isinstance(t, Sum):
        items = [(c, b) for c, b in zip(t.coeffs.explicit, t.branches) if c]
        if not items:
            raise InvalidInput("empty mixture has no steady form")
        if len(items) == 1 and items[0][0] == 1:
            return _steady_family(items[0][1])
        probs = [c for c, _ in items]
        fams = [_steady_family(b) for _, b in items]
        return _beta_diagonal(probs, fams)
    raise TypeError(f"cannot steady-normalise {type(t).__name__}")


def _beta_coeff(probs: list, r: int) -> Fraction:
    return sum((probs[j] * Fraction(1, 2 ** (r - j + 1))
                for j in range(min(r, len(probs) - 1) + 1)), Fraction(0))


def _beta_diagonal(probs: list, fams: list) -> _Family:
    """Diagonal regathering of a finite mixture of dyadic families."""
    J = len(probs) - 1
    stable = J + max(len(f.comps) for f in fams)

    def n_r(r: int) -> Term:
        beta = _beta_coeff(probs, r)
        pairs = [(probs[j] * Fraction(1, 2 ** (r - j + 1)) / beta,
                  fams[j].component(r - j))
                 for j in range(min(r, J) + 1)]
        return _comb(pairs)

    def d_src(r: int) -> Fraction:
        return min([Fraction(1)]
                   + [probs[j] * fams[j].d(r - j)
                      for j in range(min(r, J) + 1)])

    stream = [(_beta_coeff(probs, r), n_r(r)) for r in range(stable)]
    tail_comp = n_r(stable)
    slots = _regather(stream, tail_comp)
    # Slots rearrange the source stream in order, so the m-slot prefix (mass
    # 1 - 2^-m) sits inside the first r' source entries whenever the source
    # tail past r' weighs at most 2^-m; beta_r <= K*2^-r-1 with K <= 2^J
    # makes r' = m + J enough, and the source margin carries over.
    return _Family(
        tuple(slots), tail_comp,
        lambda m: Fraction(1) if m == 0 else d_src(m + J))


def _prefix_measure(term: Sum, m: int) -> MeasureView:
    if m == 0:
        return ZeroMeasure()
    return SumMeasure(tuple(
        TermMeasure(sum_branch(term, i), term.coeffs.coeff(i))
        for i in range(m)))


def _exact_dyadic_tail(coeffs: CoeffFamily) -> bool:
    """Decide coeff(n) == 2^-(n+1) exactly.  Once the tail ratio is 1/2 the
    claim is a polynomial identity, so len(poly)+1 tail samples settle it."""
    tail = coeffs.tail
    if not isinstance(tail, PolyGeo) or tail.ratio != Fraction(1, 2):
        return False
    for n in range(len(coeffs.explicit) + len(tail.poly) + 1):
        if coeffs.coeff(n) != Fraction(1, 2 ** (n + 1)):
            return False
    return True


def _min_support_value(term: Term, sig: Optional[Signature],
                       eps: Fraction) -> Fraction:
    mv = TermMeasure(term, Fraction(1))
    lo = Fraction(1)
    for play, _ in support_enum(mv, term_depth(term) + 1, eps, sig=sig):
        v = mv.value(play)
        if 0 < v < lo:
            lo = v
    return lo


def _diagonal_steady(t: Sum) -> Sum:
    """Regather a dyadic generated family sum_j 2^-(j+1) M_j into the uniform
    diagonal sum_r (r+1) 2^-(r+2) N_r with N_r the equal-weight mixture of
    M_0..M_r.  Prefixes of the result retain a share of every component, which
    is what makes the margins positive."""
    gen = t.gen
    if isinstance(gen, IterateGen):
        inner = "j"
        body: Term = IterN(NatExpr.of(inner), gen.ctx, gen.base)
    elif isinstance(gen, MapGen):
        inner = gen.var
        body = gen.body
    else:
        raise GeneratorUnsupported(
            "folded families do not regather into a single diagonal template")
    outer = "r" if inner != "r" else "r1"
    beta = PolyGeo((Fraction(1), Fraction(1)), Fraction(1, 2), Fraction(1, 4), 0)
    return Sum(
        CoeffFamily((), beta), (),
        MapGen(outer, Compr(inner, NatExpr.of(outer),
                            RatLin(Fraction(1), NatExpr(1, ((outer, 1),))),
                            body)))


def steady_nf(t, sig: Optional[Signature] = None, prefix_bound: int = 8,
              certify_depth: int = 6, search_depth: int = 24,
              eps: Fraction = DEFAULT_EPS) -> Tuple[Term, SteadyWitness]:
    """Component family whose prefixes sit uniformly below the total.

    Generator-free terms get structure-derived margins (leaf, pairing, and
    finite-mixture diagonal constructions) and dyadic output coefficients.
    Dyadic generated families are regathered into the uniform diagonal, whose
    coefficients follow the closed (r+1)*2^-(r+2) stream and whose margins
    come from the minimum support values of the original components.  Every
    reported margin is re-certified against the input's exact values.
    """
    if sig is not None and not sig.is_finitary:
        raise SignatureNotFinitary(
            "steady normalisation requires a finitary signature")
    if _contains_omega(t):
        raise SignatureNotFinitary(
            "omega-arity requests rule out steady normalisation")
    if is_generator_free(t):
        if weight(t) != 1:
            raise InvalidInput("steady normalisation needs a weight-1 term")
        fam = _steady_family(t)
        out = _dyadic_family_term(list(fam.comps), fam.tail)
        margins = tuple(fam.d(m) for m in range(prefix_bound + 1))
    elif isinstance(t, Sum) and t.gen is not None:
        if weight(t) != 1:
            raise InvalidInput("steady normalisation needs a weight-1 term")
        if t.branches or t.coeffs.explicit:
            raise GeneratorUnsupported(
                "generated families with explicit prefix entries do not fit "
                "a single diagonal template")
        if is_diagonal_sum(t):
            out, flat = t, exchange_diagonal(t)
        else:
            out, flat = _diagonal_steady(t), t
        if not _exact_dyadic_tail(flat.coeffs):
            raise GeneratorUnsupported(
                "generated families regather diagonally only from the dyadic "
                "coefficient ladder; other coefficient streams do not "
                "regather within this term language")
        equal, witness = exact_trace_equal(
            TermMeasure(out, Fraction(1)), TermMeasure(t, Fraction(1)),
            certify_depth + 2, eps, sig=sig)
        if not equal:
            raise Inconclusive(
                f"diagonal regathering diverges at '{format_play(witness)}'")
        # Prefix m omits share 2^(j-m) of component j < m, nothing more, so
        # its margin on any support play is at least
        # min_j 2^-(j+1) * 2^(j-m) * min(support values of M_j).
        vmin = Fraction(1)
        margins_list = [Fraction(1)]
        for m in range(1, prefix_bound + 1):
            branch = sum_branch(flat, m - 1)
            if not is_generator_free(branch):
                raise GeneratorUnsupported(
                    "family components must materialise without generators")
            vmin = min(vmin, _min_support_value(branch, sig, eps))
            margins_list.append(Fraction(1, 2 ** (m + 1)) * vmin)
        margins = tuple(margins_list)
    else:
        raise GeneratorUnsupported(
            "steady normalisation covers generator-free terms and dyadic "
            "generated families")

    total = TermMeasure(t, Fraction(1))
    for m in range(min(certify_depth, prefix_bound) + 1):
        sigma = _prefix_measure(out, m)
        for play, _ in support_enum(sigma, certify_depth + 2, eps, sig=sig):
            sv = sigma.value(play)
            if sv == 0:
                continue
            if sv + margins[m] > total.value(play):
                raise Inconclusive(
                    f"margin {margins[m]} for prefix {m} fails at "
                    f"'{format_play(play)}'")
    return out, SteadyWitness(margins, certify_depth)
