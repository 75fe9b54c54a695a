"""Equivalence checking for probabilistic I/O programs.

Four entry points:

- ``canon_bisim`` / ``bisimilar``: sum-equivalence (probabilistic bisimilarity)
  on explicit, generator-free terms, via canonical forms and partition
  refinement respectively.  The two are independent implementations and must
  agree.
- ``trace_equiv_upto``: certified bounded-depth trace comparison producing an
  :class:`EquivVerdict`.
- ``check_law_soundness``: structural + semantic verification of the seven
  convexity/commutation laws.
- ``tensor_equiv_finitary``: the finitary interleaving procedure; on success it
  emits a :class:`RewriteProof` whose steps replay.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Tuple, Union

from .core import (
    Choice, CoeffFamily, Compr, FoldGen, GeneratorUnsupported, Hole, IterN,
    IterateGen, Inconclusive, InvalidInput, MapGen, NotSteady, Play,
    Req, ReqFam, Signature, SignatureNotFinitary, Sum, Sym, Term,
    WitnessSearchExhausted, family_shift_term, family_tail, format_play,
    gen_branch, is_generator_free, sum_branch, term_depth, weight,
)
from .semantics import (
    DEFAULT_EPS, Interval, SumMeasure, TermMeasure, as_measure, exact_trace_equal,
    measure_scale, measure_sub, plays_union,
)

__all__ = [
    "EquivalentUpTo", "Distinguished", "ProvedEquivalent", "LawCheck",
    "ProofStep", "RewriteProof", "LAW_IDS", "canon_bisim", "bisimilar",
    "trace_equiv_upto", "check_law_soundness", "law_shape_ok", "term_key",
    "term_hash", "subterm_at", "replace_at", "replay_proof",
    "tensor_equiv_finitary",
]


# ---------------------------------------------------------------------------
# verdicts

@dataclass(frozen=True)
class EquivalentUpTo:
    """Bounded claim: no difference found on the support union."""

    depth: int
    epsilon: Fraction
    plays_checked: int = 0


@dataclass(frozen=True)
class Distinguished:
    """Definitive refutation: certified disjoint values at `play`."""

    play: Play
    left: Interval
    right: Interval


@dataclass(frozen=True)
class ProvedEquivalent:
    proof: "RewriteProof"


EquivVerdict = Union[EquivalentUpTo, Distinguished, ProvedEquivalent]


# ---------------------------------------------------------------------------
# deterministic term serialisation (used for canonical sorting and hashing)

def term_key(t) -> str:
    """Deterministic, injective-on-structure serialisation of a term."""
    if isinstance(t, Req):
        inner = ",".join(term_key(c) for c in t.children)
        return f"R[{t.sym}]({inner})"
    if isinstance(t, ReqFam):
        return f"F[{t.sym}]({t.var}.{term_key(t.body)})"
    if isinstance(t, Choice):
        return f"C[{t.p}]({term_key(t.left)},{term_key(t.right)})"
    if isinstance(t, Sum):
        coeffs = ",".join(str(c) for c in t.coeffs.explicit)
        tail = ""
        if t.coeffs.tail is not None:
            pg = t.coeffs.tail
            poly = ",".join(str(c) for c in pg.poly)
            tail = f";tail[{poly}|{pg.ratio}|{pg.scale}|{pg.offset}]"
        branches = ",".join(term_key(b) for b in t.branches)
        gen = f";{_gen_key(t.gen)}" if t.gen is not None else ""
        return f"S[{coeffs}{tail}]({branches}{gen})"
    if isinstance(t, Hole):
        return "@"
    if isinstance(t, Compr):
        return f"U[{t.var}<={t.bound}|{t.coeff}]({term_key(t.body)})"
    if isinstance(t, IterN):
        return f"I[{t.count}]({term_key(t.ctx)},{term_key(t.base)})"
    raise TypeError(f"not a term: {t!r}")


def _gen_key(gen) -> str:
    if isinstance(gen, MapGen):
        return f"map[{gen.var}]({term_key(gen.body)})"
    if isinstance(gen, IterateGen):
        return f"iter({term_key(gen.ctx)},{term_key(gen.base)})"
    if isinstance(gen, FoldGen):
        return f"fold[{gen.var},{gen.stepvar}]({term_key(gen.step)},{term_key(gen.base)})"
    raise TypeError(f"not a generator: {gen!r}")


def term_hash(t) -> str:
    return hashlib.sha256(term_key(t).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# canonical forms for sum-equivalence

def _sym_order_key(sym: Sym, sig: Optional[Signature]):
    if sig is not None:
        return sig.sym_key(sym)
    return (sym.base, sym.indices)


def _dist(t) -> list:
    """Flatten probabilistic structure into [(prob, request-node)]."""
    if isinstance(t, Req):
        return [(Fraction(1), t)]
    if isinstance(t, Choice):
        out = [(t.p * q, r) for q, r in _dist(t.left)]
        out += [((1 - t.p) * q, r) for q, r in _dist(t.right)]
        return out
    if isinstance(t, Sum):
        if t.gen is not None or t.coeffs.tail is not None:
            raise GeneratorUnsupported(
                "bisimilarity checking needs an explicit finite term")
        out = []
        for c, b in zip(t.coeffs.explicit, t.branches):
            out += [(c * q, r) for q, r in _dist(b)]
        return out
    if isinstance(t, ReqFam):
        raise GeneratorUnsupported(
            "bisimilarity checking does not handle omega-arity requests")
    raise GeneratorUnsupported(f"not an explicit term node: {type(t).__name__}")


def canon_bisim(t, sig: Optional[Signature] = None):
    """Canonical form: nested ("mix", ((prob, rooted), ...)) structure.

    Two generator-free terms are bisimilar iff their canonical forms are
    equal.  Probabilities of identical rooted forms are aggregated before
    sorting, so convex-law rewrites never change the form.
    """
    agg: dict = {}
    order: dict = {}
    for p, req in _dist(t):
        rooted = ("req", str(req.sym),
                  tuple(canon_bisim(c, sig) for c in req.children))
        agg[rooted] = agg.get(rooted, Fraction(0)) + p
        order.setdefault(rooted, _sym_order_key(req.sym, sig))
    ordered = sorted(agg, key=lambda r: (order[r], r))
    return ("mix", tuple((agg[r], r) for r in ordered))


def bisimilar(t1, t2, sig: Optional[Signature] = None) -> Tuple[bool, tuple]:
    """Partition refinement over the joint subterm graph.

    Returns (verdict, blocks); blocks is a tuple of frozensets of terms — the
    greatest bisimulation restricted to reachable subterms.
    """
    states: list = []
    seen: set = set()

    def collect(s) -> None:
        if s in seen:
            return
        seen.add(s)
        states.append(s)
        for _, req in _dist(s):
            for child in req.children:
                collect(child)

    collect(t1)
    collect(t2)

    block = {s: 0 for s in states}
    while True:
        sigs = {}
        for s in states:
            agg: dict = {}
            for p, req in _dist(s):
                label = (str(req.sym), tuple(block[c] for c in req.children))
                agg[label] = agg.get(label, Fraction(0)) + p
            sigs[s] = (block[s], tuple(sorted(agg.items())))
        renum: dict = {}
        new_block = {}
        for s in states:
            new_block[s] = renum.setdefault(sigs[s], len(renum))
        if new_block == block:
            break
        block = new_block

    groups: dict = {}
    for s in states:
        groups.setdefault(block[s], []).append(s)
    blocks = tuple(frozenset(g) for _, g in sorted(groups.items()))
    return block[t1] == block[t2], blocks


# ---------------------------------------------------------------------------
# bounded trace equivalence

def trace_equiv_upto(t1, t2, depth: int = 12, eps: Fraction = DEFAULT_EPS,
                     sig: Optional[Signature] = None,
                     omega_bound: int = 16) -> EquivVerdict:
    """Compare trace values on the support union up to `depth`.

    Distinguished (disjoint certified intervals) is definitive; EquivalentUpTo
    is a bounded claim only.
    """
    a, b = as_measure(t1), as_measure(t2)
    plays = plays_union(a, b, depth, eps, omega_bound, sig)
    for play in plays:
        va, vb = a.value(play), b.value(play)
        if va != vb:
            return Distinguished(play, Interval.exact(va), Interval.exact(vb))
    return EquivalentUpTo(depth, eps, len(plays))


# ---------------------------------------------------------------------------
# the seven laws

LAW_IDS = (
    "convex-1", "convex-2", "convex-3",
    "omega-convex-1", "omega-convex-2",
    "tensor-binary", "tensor-countable",
)


@dataclass(frozen=True)
class LawCheck:
    law: str
    shape_ok: bool
    sound: bool
    counterplay: Optional[Play] = None
    reason: str = ""


def _shape_convex_1(lhs, rhs) -> Optional[str]:
    if not isinstance(lhs, Choice):
        return "lhs must be a binary choice"
    if lhs.left != lhs.right:
        return "idempotence needs structurally equal branches"
    if rhs != lhs.left:
        return "rhs must equal the repeated branch"
    return None


def _shape_convex_2(lhs, rhs) -> Optional[str]:
    if not (isinstance(lhs, Choice) and isinstance(rhs, Choice)):
        return "both sides must be binary choices"
    if rhs.p != 1 - lhs.p or rhs.left != lhs.right or rhs.right != lhs.left:
        return "rhs must be the mirrored choice at probability 1-p"
    return None


def _shape_convex_3(lhs, rhs) -> Optional[str]:
    if not (isinstance(lhs, Choice) and isinstance(lhs.right, Choice)):
        return "lhs must be p-choice onto a nested q-choice"
    if not (isinstance(rhs, Choice) and isinstance(rhs.left, Choice)):
        return "rhs must be a nested choice on the left"
    p, q = lhs.p, lhs.right.p
    r = p + q - p * q
    if rhs.p != r:
        return "outer probability must be p+q-p*q"
    if rhs.left.p * r != p:
        return "inner probability must be p/(p+q-p*q)"
    if rhs.left.left != lhs.left or rhs.left.right != lhs.right.left \
            or rhs.right != lhs.right.right:
        return "branches must rebracket without reordering"
    return None


def _explicit_sum(t) -> Optional[str]:
    if not isinstance(t, Sum):
        return "expected a countable-sum node"
    if t.gen is not None or t.coeffs.tail is not None:
        return "law instances must use explicit finite sums"
    return None


def _shape_omega_convex_1(lhs, rhs) -> Optional[str]:
    err = _explicit_sum(lhs)
    if err:
        return err
    if len(lhs.branches) != 1 or lhs.coeffs.explicit != (Fraction(1),):
        return "point-mass sum must carry a single coefficient-1 branch"
    if rhs != lhs.branches[0]:
        return "rhs must equal the selected branch"
    return None


def _flat_entry(flat: Sum, i: int):
    """(coefficient, materialised branch) of a countable sum, or None."""
    try:
        c = flat.coeffs.coeff(i)
        if i < len(flat.branches):
            return c, flat.branches[i]
        if flat.gen is None:
            return None
        return c, gen_branch(flat.gen, i - len(flat.branches))
    except (InvalidInput, GeneratorUnsupported):
        return None


def _shape_omega_convex_2(nested, flat) -> Optional[str]:
    """Check that `flat` is the in-order flattening of the mix-of-mixes
    `nested`.

    Every nested entry either matches one flat entry verbatim, or is a group
    (binary choice, explicit finite sum) whose scaled entries match the next
    flat entries in order, or — in final position only — is the renormalised
    remainder of `flat` carrying exactly the remaining mass.
    """
    err = _explicit_sum(nested)
    if err:
        return err
    if len(nested.coeffs.explicit) != len(nested.branches):
        return "nested side must pair every coefficient with a branch"
    if not isinstance(flat, Sum):
        return "flat side must be a countable sum"

    pos = 0
    remainder_matched = False
    last = len(nested.branches) - 1
    for k, (c, b) in enumerate(zip(nested.coeffs.explicit, nested.branches)):
        entry = _flat_entry(flat, pos)
        if entry is not None and entry == (c, b):
            pos += 1
            continue
        if isinstance(b, Choice):
            group = ((c * b.p, b.left), (c * (1 - b.p), b.right))
        elif isinstance(b, Sum) and b.gen is None and b.coeffs.tail is None:
            group = tuple((c * q, m)
                          for q, m in zip(b.coeffs.explicit, b.branches))
        elif isinstance(b, Sum):
            if k != last:
                return "a countable group may only close the nested sum"
            if c != family_tail(flat.coeffs, pos):
                return "closing group must carry the remaining mass exactly"
            try:
                if b != family_shift_term(flat, pos):
                    return "closing group must be the renormalised remainder"
            except (InvalidInput, GeneratorUnsupported):
                return "flat side has no renormalisable remainder here"
            remainder_matched = True
            continue
        else:
            return f"entry {k} is neither a flat entry nor a known group"
        for want in group:
            entry = _flat_entry(flat, pos)
            if entry != want:
                return f"group entries diverge from the flat sum at {pos}"
            pos += 1

    if remainder_matched:
        return None
    if flat.coeffs.tail is not None or flat.gen is not None:
        return "flat side keeps a tail the nested side never covers"
    if pos != len(flat.branches) or pos != len(flat.coeffs.explicit):
        return "flat side has entries the nested side never covers"
    return None


def _shape_tensor_binary(lhs, rhs) -> Optional[str]:
    if not (isinstance(lhs, Choice) and isinstance(lhs.left, Req)
            and isinstance(lhs.right, Req)):
        return "lhs must be a choice of two requests"
    if lhs.left.sym != lhs.right.sym:
        return "requests must share the head symbol"
    if len(lhs.left.children) != len(lhs.right.children):
        return "requests must share the arity"
    if not isinstance(rhs, Req) or rhs.sym != lhs.left.sym:
        return "rhs must be a request on the same symbol"
    want = tuple(Choice(lhs.p, a, b)
                 for a, b in zip(lhs.left.children, lhs.right.children))
    if rhs.children != want:
        return "rhs children must be the componentwise choices"
    return None


def _shape_tensor_countable(lhs, rhs) -> Optional[str]:
    err = _explicit_sum(lhs)
    if err:
        return err
    if not lhs.branches:
        return "empty sum"
    if not all(isinstance(b, Req) for b in lhs.branches):
        return "every branch must be a request"
    sym = lhs.branches[0].sym
    arity = len(lhs.branches[0].children)
    if any(b.sym != sym or len(b.children) != arity for b in lhs.branches):
        return "branches must share the head symbol and arity"
    if not isinstance(rhs, Req) or rhs.sym != sym:
        return "rhs must be a request on the shared symbol"
    want = tuple(
        Sum(lhs.coeffs, tuple(b.children[i] for b in lhs.branches))
        for i in range(arity))
    if rhs.children != want:
        return "rhs children must be the componentwise sums"
    return None


_LAW_SHAPES = {
    "convex-1": _shape_convex_1,
    "convex-2": _shape_convex_2,
    "convex-3": _shape_convex_3,
    "omega-convex-1": _shape_omega_convex_1,
    "omega-convex-2": _shape_omega_convex_2,
    "tensor-binary": _shape_tensor_binary,
    "tensor-countable": _shape_tensor_countable,
}


def law_shape_ok(law: str, lhs, rhs) -> Optional[str]:
    """None if (lhs, rhs) is an instance of the law (either orientation)."""
    if law == "congruence":
        return None
    if law not in _LAW_SHAPES:
        return f"unknown law id '{law}'"
    err = _LAW_SHAPES[law](lhs, rhs)
    if err is None:
        return None
    back = _LAW_SHAPES[law](rhs, lhs)
    return None if back is None else err


def check_law_soundness(law: str, lhs, rhs, depth: int = 6,
                        eps: Fraction = DEFAULT_EPS,
                        sig: Optional[Signature] = None) -> LawCheck:
    """Verify that a law instance is trace-sound: shape + exact values to depth."""
    err = law_shape_ok(law, lhs, rhs)
    if err is not None:
        return LawCheck(law, False, False, reason=err)
    equal, witness = exact_trace_equal(lhs, rhs, depth, eps, sig=sig)
    if equal:
        return LawCheck(law, True, True)
    return LawCheck(law, True, False, counterplay=witness,
                    reason="values differ" if witness else "")


# ---------------------------------------------------------------------------
# rewrite proofs

@dataclass(frozen=True)
class ProofStep:
    law: str                      # one of LAW_IDS or "congruence"
    path: tuple
    before: Term
    after: Term
    before_hash: str
    after_hash: str
    note: str = ""
    bound: Optional[Fraction] = None


@dataclass(frozen=True)
class RewriteProof:
    steps: tuple
    cuts: tuple = ()              # ((m_r, n_r), ...)
    final_cut: int = 0
    witnesses: tuple = ()         # certified margin per cut pair
    residual_bound: Fraction = Fraction(0)
    depth: int = 6
    source_hash: str = ""
    target_hash: str = ""


def subterm_at(t, path: tuple):
    for ix in path:
        if isinstance(t, Req):
            t = t.children[ix]
        elif isinstance(t, Choice):
            t = (t.left, t.right)[ix]
        elif isinstance(t, Sum):
            t = t.branches[ix]
        elif isinstance(t, ReqFam):
            if ix != 0:
                raise InvalidInput("omega request has a single body position")
            t = t.body
        else:
            raise InvalidInput(f"cannot descend into {type(t).__name__}")
    return t


def replace_at(t, path: tuple, new):
    if not path:
        return new
    ix, rest = path[0], path[1:]
    if isinstance(t, Req):
        kids = list(t.children)
        kids[ix] = replace_at(kids[ix], rest, new)
        return Req(t.sym, tuple(kids))
    if isinstance(t, Choice):
        if ix == 0:
            return Choice(t.p, replace_at(t.left, rest, new), t.right)
        return Choice(t.p, t.left, replace_at(t.right, rest, new))
    if isinstance(t, Sum):
        branches = list(t.branches)
        branches[ix] = replace_at(branches[ix], rest, new)
        return Sum(t.coeffs, tuple(branches), t.gen)
    if isinstance(t, ReqFam):
        return ReqFam(t.sym, t.var, replace_at(t.body, rest, new))
    raise InvalidInput(f"cannot descend into {type(t).__name__}")


def replay_proof(proof: RewriteProof, t1, t2, sig: Optional[Signature] = None,
                 eps: Fraction = DEFAULT_EPS, depth: Optional[int] = None,
                 omega_bound: int = 16) -> Tuple[bool, str]:
    """Re-verify a proof: hashes chain, every step is a checked rewrite, and
    replaying the steps transforms t1 into t2."""
    depth = proof.depth if depth is None else depth
    if proof.source_hash and proof.source_hash != term_hash(t1):
        return False, "source hash mismatch"
    if proof.target_hash and proof.target_hash != term_hash(t2):
        return False, "target hash mismatch"

    for r in range(1, len(proof.cuts)):
        (m0, n0), (m1, n1) = proof.cuts[r - 1], proof.cuts[r]
        monotone = (m0 < n0 < m1 < n1) or (m0 == n0 and m1 == n1 and m0 < m1)
        if not monotone:
            return False, f"cut sequence not interleaved at round {r}"

    current = t1
    for i, step in enumerate(proof.steps):
        sub = subterm_at(current, step.path)
        if sub != step.before:
            return False, f"step {i}: recorded source does not match the term"
        if term_hash(step.before) != step.before_hash \
                or term_hash(step.after) != step.after_hash:
            return False, f"step {i}: hash mismatch"
        err = law_shape_ok(step.law, step.before, step.after)
        if err is not None:
            return False, f"step {i}: not a '{step.law}' instance ({err})"
        try:
            equal, witness = exact_trace_equal(
                step.before, step.after, depth, eps,
                omega_bound=omega_bound, sig=sig)
        except Inconclusive as exc:
            return False, f"step {i}: {exc}"
        if not equal:
            where = format_play(witness) if witness else "?"
            return False, f"step {i}: values differ at {where}"
        current = replace_at(current, step.path, step.after)

    if current != t2:
        return False, "replayed steps do not reach the target term"
    return True, f"replayed {len(proof.steps)} steps at depth {depth}"


# ---------------------------------------------------------------------------
# finitary interleaving procedure

def _mentions_omega(t) -> bool:
    if isinstance(t, ReqFam):
        return True
    if isinstance(t, Req):
        return any(_mentions_omega(c) for c in t.children)
    if isinstance(t, Choice):
        return _mentions_omega(t.left) or _mentions_omega(t.right)
    if isinstance(t, Sum):
        if any(_mentions_omega(b) for b in t.branches):
            return True
        if isinstance(t.gen, MapGen):
            return _mentions_omega(t.gen.body)
        if isinstance(t.gen, IterateGen):
            return _mentions_omega(t.gen.ctx) or _mentions_omega(t.gen.base)
        if isinstance(t.gen, FoldGen):
            return _mentions_omega(t.gen.step) or _mentions_omega(t.gen.base)
        return False
    if isinstance(t, Compr):
        return _mentions_omega(t.body)
    if isinstance(t, IterN):
        return _mentions_omega(t.ctx) or _mentions_omega(t.base)
    return False


class _SteadyView:
    """Component/coefficient access for a steady-shaped sum term."""

    def __init__(self, t, name: str):
        if not isinstance(t, Sum):
            raise NotSteady(f"{name}: steady form must be a countable sum")
        if t.coeffs.tail is None:
            raise NotSteady(f"{name}: steady form needs a closed coefficient tail")
        if weight(t) != 1:
            raise NotSteady(f"{name}: total mass must be exactly 1")
        self.term = t
        self.name = name
        self._components: list = []

    def component(self, n: int):
        while len(self._components) <= n:
            comp = sum_branch(self.term, len(self._components))
            if not is_generator_free(comp):
                raise NotSteady(
                    f"{self.name}: component {len(self._components)} does not "
                    f"materialise to an explicit well-founded term")
            self._components.append(comp)
        return self._components[n]

    def coeff(self, n: int) -> Fraction:
        return self.term.coeffs.coeff(n)

    def tail(self, m: int) -> Fraction:
        return family_tail(self.term.coeffs, m)

    def prefix_measure(self, m: int):
        parts = [TermMeasure(self.component(i), self.coeff(i)) for i in range(m)]
        return SumMeasure(tuple(parts))

    def prefix_depth(self, m: int) -> int:
        return max([term_depth(self.component(i)) for i in range(m)], default=0)


def _find_cut(lo: _SteadyView, lo_cut: int, hi: _SteadyView, start: int,
              search_depth: int, eps: Fraction, sig, max_advance: int = 64):
    """Smallest cut > start such that lo's prefix is uniformly below hi's.

    Returns (cut, certified witness d).  The margin scan follows the
    candidate ladder {2^-j : j <= search_depth}.
    """
    from .normalforms import is_uniformly_below, UniformWitness

    sigma = lo.prefix_measure(lo_cut)
    for cut in range(start + 1, start + 1 + max_advance):
        tau = hi.prefix_measure(cut)
        depth = max(lo.prefix_depth(lo_cut), hi.prefix_depth(cut)) + 1
        # Steady margins shrink roughly like the coefficient tail past the
        # cut, so the candidate ladder has to deepen as the cuts advance.
        res = is_uniformly_below(sigma, tau, search_depth + cut, depth=depth,
                                 eps=eps, sig=sig)
        if isinstance(res, UniformWitness):
            return cut, res.d
    raise WitnessSearchExhausted(
        f"no uniformly-below cut for {lo.name} prefix {lo_cut} within "
        f"{max_advance} candidates past {start}")


def _mix_term(coeffs: list, branches: list):
    """Renormalised explicit sum (or the unique branch)."""
    total = sum(coeffs, Fraction(0))
    if len(branches) == 1:
        return branches[0]
    return Sum(CoeffFamily(tuple(c / total for c in coeffs)), tuple(branches))


def _step(law: str, before, after, note: str = "",
          bound: Optional[Fraction] = None, path: tuple = ()) -> ProofStep:
    return ProofStep(law, path, before, after, term_hash(before),
                     term_hash(after), note, bound)


def tensor_equiv_finitary(t1, t2, rounds: int = 6,
                          sig: Optional[Signature] = None,
                          eps: Fraction = DEFAULT_EPS,
                          search_depth: int = 24,
                          depth: Optional[int] = None) -> EquivVerdict:
    """Interleave the two steady forms and emit a replayable rewrite proof.

    Requires a finitary signature and inputs in steady form (a countable sum
    with a closed coefficient tail and explicit well-founded components).
    Constructs strictly interleaved cuts m_0 < n_0 < m_1 < ... by greedy
    uniformly-below search, reconstructs the difference measures between
    consecutive prefixes as well-founded terms, and chains the regroupings
    into a proof whose residual carries weight tail(n_{R-1}).
    """
    if rounds < 1:
        raise InvalidInput("round budget must be at least 1")
    if sig is not None and not sig.is_finitary:
        raise SignatureNotFinitary(
            "steady interleaving requires a finitary signature")
    if _mentions_omega(t1) or _mentions_omega(t2):
        raise SignatureNotFinitary(
            "omega-arity requests rule out steady interleaving")
    if depth is None:
        depth = max(6, rounds)

    if t1 == t2:
        step = _step("congruence", t1, t2, note="identical terms")
        proof = RewriteProof(
            steps=(step,), cuts=tuple((r, r) for r in range(rounds)),
            final_cut=rounds, witnesses=(), residual_bound=Fraction(0),
            depth=depth, source_hash=term_hash(t1), target_hash=term_hash(t2))
        return ProvedEquivalent(proof)

    left = _SteadyView(t1, "left")
    right = _SteadyView(t2, "right")

    verdict = trace_equiv_upto(t1, t2, depth, eps, sig=sig)
    if isinstance(verdict, Distinguished):
        return verdict

    from .normalforms import measure_to_wfnf

    # Interleaved cuts: prefix(m_r) of t1 uniformly below prefix(n_r) of t2,
    # which is uniformly below prefix(m_{r+1}) of t1, and so on.
    m_cuts = [0]
    n_cuts: list = []
    witnesses: list = []
    for r in range(rounds):
        n_r, d = _find_cut(left, m_cuts[r], right, m_cuts[r],
                           search_depth, eps, sig)
        n_cuts.append(n_r)
        witnesses.append(d)
        m_next, d2 = _find_cut(right, n_r, left, n_r, search_depth, eps, sig)
        m_cuts.append(m_next)
        witnesses.append(d2)

    R = rounds
    tail1 = left.tail
    tail2 = right.tail

    a = [tail1(m_cuts[r]) - tail2(n_cuts[r]) for r in range(R)]
    b = [tail2(n_cuts[r]) - tail1(m_cuts[r + 1]) for r in range(R)]
    if any(x <= 0 for x in a) or any(x <= 0 for x in b):
        raise WitnessSearchExhausted("cut weights failed to interleave")

    def diff_term(hi_view, hi_cut, lo_view, lo_cut, scale_inv: Fraction):
        diff = measure_sub(hi_view.prefix_measure(hi_cut),
                           lo_view.prefix_measure(lo_cut))
        lam, term = measure_to_wfnf(measure_scale(diff, 1 / scale_inv), sig)
        if lam != 1:
            raise Inconclusive(
                f"difference measure reconstructed with mass {lam}, wanted 1")
        return term

    U = [diff_term(right, n_cuts[r], left, m_cuts[r], a[r]) for r in range(R)]
    V = [diff_term(left, m_cuts[r + 1], right, n_cuts[r], b[r]) for r in range(R)]

    # Chain terms.
    w_blocks = [tail1(m_cuts[r]) - tail1(m_cuts[r + 1]) for r in range(R)]
    m_tail_w = tail1(m_cuts[R])
    m_tail = family_shift_term(t1, m_cuts[R])

    def block_of(view, lo: int, hi: int, total: Fraction):
        coeffs = [view.coeff(i) / total for i in range(lo, hi)]
        return Sum(CoeffFamily(tuple(coeffs)),
                   tuple(view.component(i) for i in range(lo, hi)))

    blocked_m = Sum(
        CoeffFamily(tuple(w_blocks) + (m_tail_w,)),
        tuple(block_of(left, m_cuts[r], m_cuts[r + 1], w_blocks[r])
              for r in range(R)) + (m_tail,))

    blocked_uv = Sum(
        blocked_m.coeffs,
        tuple(Choice(a[r] / w_blocks[r], U[r], V[r]) for r in range(R))
        + (m_tail,))

    flat_coeffs: list = []
    flat_branches: list = []
    for r in range(R):
        flat_coeffs += [a[r], b[r]]
        flat_branches += [U[r], V[r]]
    flat_coeffs.append(m_tail_w)
    flat_branches.append(m_tail)
    flat_uv = Sum(CoeffFamily(tuple(flat_coeffs)), tuple(flat_branches))

    n_block_w = [a[0]] + [b[r] + a[r + 1] for r in range(R - 1)]
    n_last_w = b[R - 1] + m_tail_w          # equals tail2(n_{R-1})
    regrouped = Sum(
        CoeffFamily(tuple(n_block_w) + (n_last_w,)),
        (U[0],)
        + tuple(Choice(b[r] / n_block_w[r + 1], V[r], U[r + 1])
                for r in range(R - 1))
        + (Choice(b[R - 1] / n_last_w, V[R - 1], m_tail),))

    n_tail = family_shift_term(t2, n_cuts[R - 1])
    n_bounds = [0] + n_cuts
    blocked_n_mid = Sum(
        regrouped.coeffs,
        tuple(block_of(right, n_bounds[r], n_bounds[r + 1], n_block_w[r])
              for r in range(R))
        + (Choice(b[R - 1] / n_last_w, V[R - 1], m_tail),))
    blocked_n = Sum(
        regrouped.coeffs,
        blocked_n_mid.branches[:-1] + (n_tail,))

    residual = tail2(n_cuts[R - 1])
    steps = (
        _step("omega-convex-2", t1, blocked_m,
              note="gather components into cut blocks"),
        _step("congruence", blocked_m, blocked_uv,
              note="blocks replaced by difference-measure mixes"),
        _step("omega-convex-2", blocked_uv, flat_uv,
              note="flatten the block mixes"),
        _step("omega-convex-2", flat_uv, regrouped,
              note="regroup along the second staircase"),
        _step("congruence", regrouped, blocked_n_mid,
              note="difference mixes replaced by target blocks"),
        _step("congruence", blocked_n_mid, blocked_n,
              note="residual swap onto the target tail", bound=residual),
        _step("omega-convex-2", blocked_n, t2,
              note="ungather the target blocks"),
    )
    proof = RewriteProof(
        steps=steps, cuts=tuple(zip(m_cuts[:R], n_cuts)), final_cut=m_cuts[R],
        witnesses=tuple(witnesses), residual_bound=residual, depth=depth,
        source_hash=term_hash(t1), target_hash=term_hash(t2))

    ok, why = replay_proof(proof, t1, t2, sig=sig, eps=eps, depth=depth)
    if not ok:
        raise Inconclusive(f"constructed proof failed self-replay: {why}")
    return ProvedEquivalent(proof)
