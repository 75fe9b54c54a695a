import traceback
from fractions import Fraction as F

from playmix.core import (
    Choice, CoeffFamily, DominationFails, GeneratorUnsupported, Inconclusive,
    NotFinitelyFounded, NotWellFounded, Req, SignatureNotFinitary, Sum, Sym,
    parse_play, validate_term, weight,
)
from playmix.semantics import (
    TermMeasure, ZeroMeasure, exact_trace_equal, measure_scale, measure_sub,
    support_enum, term_value,
)
from playmix.examples import (
    ALL, BYE, SIG_GREET, SIG_TOWER, SIG_GRID, SIG_LOOP, SIG_OMEGA, greeting, tower_a, tower_b,
    grid_a, grid_b, loop, omega_uniform, A, B, C, star,
)
import playmix.normalforms as nf

PASS, FAIL = 0, []


def check(name, cond, extra=""):
    global PASS
    if cond:
        PASS += 1
    else:
        FAIL.append((name, extra))
        print(f"FAIL {name}  {extra}")


def expect_raises(name, exc, fn):
    try:
        fn()
    except exc:
        check(name, True)
    except Exception as e:  # noqa
        check(name, False, f"raised {type(e).__name__}: {e}")
    else:
        check(name, False, "no exception")


def eq_exact(t1, t2, depth=7, sig=None):
    ok, w = exact_trace_equal(t1, t2, depth, sig=sig)
    return ok, w


# --- shallow -------------------------------------------------------------
s = nf.shallow_nf(BYE)
check("shallow ReqBye", isinstance(s, Sum) and s.coeffs.explicit == (F(1),)
      and s.branches == (BYE,))

A_c = Req(Sym("a"), (C,))
A_c2 = Req(Sym("a"), (Req(Sym("b"), ()),))
B_c = Req(Sym("b"), (C,))
# need a signature-valid term: use tower sig syms: a/b/c nullary, star binary
t = Choice(F(1, 2), star(A, C), Choice(F(1, 2), star(A, B), star(B, C)))
s = nf.shallow_nf(t)
check("shallow merge single head", isinstance(s, Sum)
      and s.coeffs.explicit == (F(1),) and s.branches[0].sym == Sym("star"))
ok, w = eq_exact(s, t)
check("shallow merge trace-equal", ok, str(w))

g = greeting()
s = nf.shallow_nf(g)
ok, w = eq_exact(s, g)
check("shallow greeting trace-equal", ok, str(w))

ta = tower_a()
s = nf.shallow_nf(ta)
ok, w = eq_exact(s, ta, depth=8, sig=SIG_TOWER)
check("shallow towers trace-equal", ok, str(w))
check("shallow towers single star head", isinstance(s, Sum)
      and len(s.branches) == 1 and s.branches[0].sym == Sym("star"))

ga = grid_a()
s = nf.shallow_nf(ga)
check("shallow grids passthrough or exact",
      s == ga or eq_exact(s, ga, depth=5, sig=SIG_GRID)[0])

om = omega_uniform()
s = nf.shallow_nf(om)
check("shallow omega wraps", isinstance(s, Sum) and s.branches == (om,))

# --- light ---------------------------------------------------------------
lt = nf.light_nf(Sum(CoeffFamily((F(1, 3), F(2, 3))), (A, B)))
validate_term(lt, SIG_TOWER)
ok, w = eq_exact(lt, Sum(CoeffFamily((F(1, 3), F(2, 3))), (A, B)))
check("light 1/3-2/3 trace-equal", ok, str(w))
check("light 1/3-2/3 slot0", lt.branches[0] == Choice(F(2, 3), A, B),
      str(lt.branches[:1]))
check("light is_light", nf._is_light(lt))

lt2 = nf.light_nf(B)
check("light constant family", nf._is_light(lt2) and len(lt2.branches) == 0)
ok, w = eq_exact(lt2, B)
check("light constant trace-equal", ok, str(w))

check("light towers identity", nf.light_nf(ta) is ta)
check("light grid_a identity", nf.light_nf(ga) is ga)
expect_raises("light grid_b unsupported", GeneratorUnsupported,
              lambda: nf.light_nf(grid_b()))

lg = nf.light_nf(greeting())
validate_term(lg, SIG_GREET)
ok, w = eq_exact(lg, greeting())
check("light greeting trace-equal", ok, str(w))
check("light greeting is light", nf._is_light(lg))

# shifted-tail alignment: explicit prefix (1/2 on X) then dyadic tail over gen
from playmix.core import IterateGen, Hole, MapGen, PolyGeo
shifted = Sum(CoeffFamily((F(1, 2),), PolyGeo((F(1),), F(1, 2), F(1, 4), 0)),
              (star(A, A),), IterateGen(star(B, Hole()), star(A, C)))
validate_term(shifted, SIG_TOWER)
ls = nf.light_nf(shifted)
check("light shifted gen is light", nf._is_light(ls))
ok, w = eq_exact(ls, shifted, depth=8, sig=SIG_TOWER)
check("light shifted gen trace-equal", ok, str(w))

# --- ff / wf -------------------------------------------------------------
f1 = nf.ff_nf(greeting())
check("ff idempotent", nf.ff_nf(f1) == f1)
# convex rewrite of greeting: swap a Choice orientation
g2 = Req(Sym("Happy"), (BYE, Choice(F(1, 2), BYE,
        Req(Sym("Happy"), (Choice(F(1, 3), BYE, Req(Sym("Happy"), (BYE, BYE))),
                           Choice(F(2, 3), BYE, Req(Sym("Happy"), (BYE, BYE))))))))
# g2: follow_no = Choice(1/3, HAPPY_BB, BYE) == Choice(2/3, BYE, HAPPY_BB)
check("ff decides trace equivalence", nf.ff_nf(g2) == f1)
ok, w = eq_exact(g2, greeting())
check("g2 really equals greeting", ok, str(w))

bad = Choice(F(1, 2), star(A, C), star(B, C))
check("ff differs on different terms", nf.ff_nf(bad) != nf.ff_nf(star(A, C)))
expect_raises("ff rejects towers", NotFinitelyFounded, lambda: nf.ff_nf(ta))
expect_raises("ff rejects omega", NotFinitelyFounded, lambda: nf.ff_nf(om))

w1 = nf.wf_nf(greeting())
check("wf == ff on finite", w1 == f1)
expect_raises("wf undeclared towers", NotWellFounded, lambda: nf.wf_nf(ta))
expect_raises("wf towers depth grows", NotWellFounded,
              lambda: nf.wf_nf(ta, declared_depth=10))
expect_raises("wf notwnf loop", NotWellFounded,
              lambda: nf.wf_nf(loop(), declared_depth=8))
expect_raises("wf grid depth grows", NotWellFounded,
              lambda: nf.wf_nf(ga, declared_depth=40))
from playmix.core import NatExpr
from playmix.examples import dyadic_family
flat = Sum(dyadic_family(), (),
           MapGen("n", Req(Sym("c", (NatExpr.of("n"), NatExpr.of(0))), ())))
validate_term(flat, SIG_GRID)
wg = nf.wf_nf(flat, declared_depth=1)
check("wf flat family normalises", isinstance(wg, Sum) and wg.gen is not None)
ok, w = eq_exact(wg, flat, depth=3, sig=SIG_GRID)
check("wf flat family trace-equal", ok, str(w))

# --- measure_to_wfnf ------------------------------------------------------
lam, t0 = nf.measure_to_wfnf(TermMeasure(BYE, F(1)), SIG_GREET)
check("m2wf ReqBye", lam == 1 and t0 == BYE, f"{lam} {t0}")

lam, t0 = nf.measure_to_wfnf(ZeroMeasure())
check("m2wf zero", lam == 0 and t0 == nf.ZERO_TERM)

gm = TermMeasure(greeting(), F(1))
lam, t0 = nf.measure_to_wfnf(gm, SIG_GREET)
check("m2wf greeting lambda", lam == 1)
ok, w = eq_exact(t0, greeting())
check("m2wf greeting roundtrip", ok, str(w))

# diff of two strategies sigma <= tau: tau = greeting, sigma = 1/2 greeting
d = measure_sub(gm, measure_scale(gm, F(1, 2)))
lam, t0 = nf.measure_to_wfnf(d, SIG_GREET)
check("m2wf diff lambda", lam == F(1, 2), str(lam))
ok, w = exact_trace_equal(TermMeasure(t0, lam), d, 7)
check("m2wf diff matches", ok, str(w))

# --- subsplit --------------------------------------------------------------
Mw = nf.wf_nf(greeting())
N = nf.subsplit(greeting(), Mw, F(1, 3))
ok, w = eq_exact(N, greeting())
check("subsplit L=M gives M", ok, str(w))

expect_raises("subsplit disjoint heads", DominationFails,
              lambda: nf.subsplit(star(A, C), star(B, C), F(1, 2)))

M2 = Choice(F(1, 2), star(A, C), star(B, C))
L2 = nf.wf_nf(star(A, C))
N2 = nf.subsplit(M2, L2, F(1, 4))
ok, w = eq_exact(Choice(F(1, 4), L2, N2), M2)
check("subsplit identity exact", ok, str(w))
# b-mass boosted inside the shared star head's first child:
# a: (1/2-1/4)/(3/4)=1/3, b: (1/2)/(3/4)=2/3
child0 = N2.children[0]
heads = {b.sym: c for c, b in zip(child0.coeffs.explicit, child0.branches)}
check("subsplit b boosted", heads.get(Sym("b")) == F(2, 3), str(N2))

try:
    nf.subsplit(M2, L2, F(3, 4))
    check("subsplit p too big", False, "no exception")
except DominationFails as e:
    check("subsplit p too big", True)

# --- impersonate -----------------------------------------------------------
cert = nf.impersonate(greeting(), greeting(), 4)
check("impersonate self rounds", cert.rounds == 4
      and len(cert.solutions) == 5)
cert2 = nf.impersonate(greeting(), g2, 5)
check("impersonate variant ok", cert2.residual is not None)
expect_raises("impersonate non-equiv", DominationFails,
              lambda: nf.impersonate(star(A, C), star(B, C), 1))

# --- steady ----------------------------------------------------------------
out, wit = nf.steady_nf(BYE, SIG_GREET)
check("steady ReqBye margins", wit.margins[:4] == (F(1), F(1, 2), F(1, 4), F(1, 8)),
      str(wit.margins[:4]))
ok, w = eq_exact(out, BYE)
check("steady ReqBye trace-equal", ok, str(w))
validate_term(out, SIG_GREET)

out, wit = nf.steady_nf(greeting(), SIG_GREET)
ok, w = eq_exact(out, greeting())
check("steady greeting trace-equal", ok, str(w))
check("steady greeting margins positive", all(d > 0 for d in wit.margins),
      str(wit.margins))
validate_term(out, SIG_GREET)
check("steady output is dyadic family", nf._dyadic_coeffs(out))

expect_raises("steady omega sig", SignatureNotFinitary,
              lambda: nf.steady_nf(om, SIG_OMEGA))
expect_raises("steady omega term", SignatureNotFinitary,
              lambda: nf.steady_nf(om))

mix = Sum(CoeffFamily((F(1, 3), F(1, 6), F(1, 2))),
          (star(A, C), star(B, C), C))
out, wit = nf.steady_nf(mix, SIG_TOWER)
ok, w = eq_exact(out, mix)
check("steady 3-mix trace-equal", ok, str(w))
check("steady 3-mix margins", all(d > 0 for d in wit.margins), str(wit.margins))

# --- is_uniformly_below ----------------------------------------------------
res = nf.is_uniformly_below(measure_scale(gm, F(1, 2)), gm)
check("iub half-strategy witness", isinstance(res, nf.UniformWitness)
      and res.d <= res.min_margin, str(res))

res = nf.is_uniformly_below(ZeroMeasure(), gm)
check("iub zero witness 1", isinstance(res, nf.UniformWitness) and res.d == 1)

omm = TermMeasure(om, F(1))
res = nf.is_uniformly_below(measure_scale(omm, F(1, 2)), omm, 10)
check("iub omega refutation", isinstance(res, nf.UniformRefutation)
      and len(res.violations) == 11, str(type(res)))
if isinstance(res, nf.UniformRefutation):
    okv = all(sv + d > tv for d, pl, sv, tv in res.violations)
    check("iub omega violations genuine", okv, str(res.violations[:2]))

# prefix of tower below full tower measure: margin 0 expected -> refutation
pm = nf._prefix_measure(ta, 1)
res = nf.is_uniformly_below(pm, TermMeasure(ta, F(1)), 6)
check("iub tower prefix refuted", isinstance(res, nf.UniformRefutation),
      str(type(res)))

# --- steady diagonal on towers ----------------------------------------------
try:
    sa, wa = nf.steady_nf(tower_a(), SIG_TOWER)
    sb, wb = nf.steady_nf(tower_b(), SIG_TOWER)
    check("steady towers margins", wa.margins[:4] == (F(1), F(1, 4), F(1, 8), F(1, 16)),
          str(wa.margins[:4]))
    ok, w = eq_exact(sa, tower_a(), sig=SIG_TOWER)
    check("steady tower_a trace-equal", ok, str(w))
    validate_term(sa, SIG_TOWER)
    # prefix of the diagonal is now uniformly below the total
    res = nf.is_uniformly_below(nf._prefix_measure(sa, 1), TermMeasure(sa, F(1)),
                                6, sig=SIG_TOWER)
    check("iub diagonal prefix witness", isinstance(res, nf.UniformWitness),
          str(res))
    # re-normalising the diagonal keeps it (recognised shape, same margins)
    sa2, wa2 = nf.steady_nf(sa, SIG_TOWER)
    check("steady diagonal stable", sa2 is sa and wa2.margins == wa.margins)
except Exception as e:
    traceback.print_exc()
    check("steady towers", False, f"{type(e).__name__}: {e}")

# --- tensor_equiv_finitary end-to-end --------------------------------------
from playmix.equivalence import tensor_equiv_finitary, ProvedEquivalent, replay_proof

try:
    verdict = tensor_equiv_finitary(sa, sb, rounds=6, sig=SIG_TOWER)
    check("tensor towers proved", isinstance(verdict, ProvedEquivalent),
          str(type(verdict)))
    if isinstance(verdict, ProvedEquivalent):
        ok, why = replay_proof(verdict.proof, sa, sb, sig=SIG_TOWER)
        check("tensor proof replays", ok, why)
        print("cuts:", verdict.proof.cuts, "final:", verdict.proof.final_cut)
        print("witnesses:", verdict.proof.witnesses)
        print("residual:", verdict.proof.residual_bound)
except Exception as e:
    traceback.print_exc()
    check("tensor towers proved", False, f"{type(e).__name__}: {e}")

print(f"\n{PASS} passed, {len(FAIL)} failed")
for name, extra in FAIL:
    print(" -", name, extra[:200])
