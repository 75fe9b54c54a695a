"""Smoke checks for the games module against hand-derived oracles."""

from fractions import Fraction as F

from playmix.core import (
    Choice, EMPTY_PLAY, Play, Req, Sym, format_play, parse_play, weight,
)
from playmix.examples import (
    BYE, HAPPY_BB, SIG_GREET, SIG_LOOP, SIG_OMEGA, greeting, loop,
    omega_uniform,
)
from playmix.semantics import Interval, TermMeasure, trace_value
from playmix.games import (
    Adversarial, ConstIndex, Counterstrategy, Exhausted, FAIL, Failed,
    RoundRobin, adversarial_rho, cont_prob, definability_decomp, extract_ff,
    fail_mass, format_counterstrategy, level_masses, parse_counterstrategy,
    residual_table, sample_play,
)

PASS = []
FAILED = []


def check(name, ok, note=""):
    (PASS if ok else FAILED).append(name)
    print(("ok  " if ok else "FAIL") + f" {name}" + (f"  {note}" if note else ""))


rho0 = Counterstrategy({}, ConstIndex(0))

# --- cont_prob oracles ------------------------------------------------------
bye = Req(Sym("Bye"))
ps = cont_prob(bye, rho0, 1, sig=SIG_GREET)
check("bye P0=1 P1=0", ps == [Interval.exact(1), Interval.exact(0)], ps)

ps = cont_prob(bye, rho0, 0, sig=SIG_GREET)
check("steps 0 -> [weight]", ps == [Interval.exact(1)])

ps = cont_prob(loop(), rho0, 20, sig=SIG_LOOP)
check("loop P^m = 2^-m", all(p == Interval.exact(F(1, 2 ** m)) for m, p in enumerate(ps)))
check("non-increasing", all(ps[m].lo >= ps[m + 1].lo and ps[m].hi >= ps[m + 1].hi
                            for m in range(20)))

# scaled measure: P^0 = weight
ps = cont_prob(TermMeasure(loop(), F(1, 2)), rho0, 3, sig=SIG_LOOP)
check("scaled P^0 = 1/2", ps[0] == Interval.exact(F(1, 2)) and ps[3] == Interval.exact(F(1, 16)))

# recurrence bookkeeping
playing, failing, unresolved = level_masses(loop(), rho0, 12, sig=SIG_LOOP)
check("recurrence", all(playing[m] == failing[m] + unresolved[m] + playing[m + 1]
                        for m in range(12)))
check("no truncation on loop", all(u == 0 for u in unresolved))

# greeting under const 1: all mass survives cycle 1, the Bye half dies in
# cycle 2, the follow-up keeps 1/3 of the rest alive through cycle 3
ps = cont_prob(greeting(), Counterstrategy({}, ConstIndex(1)), 4, sig=SIG_GREET)
check("greeting const1 profile",
      [p.lo for p in ps] == [1, 1, F(1, 2), F(1, 6), 0]
      and all(p.is_exact for p in ps), [str(p.lo) for p in ps])

# omega-arity requests: const 5 is a valid input
ps = cont_prob(omega_uniform(), Counterstrategy({}, ConstIndex(5)), 1, sig=SIG_OMEGA)
check("omega const5 survives one cycle", ps[1] == Interval.exact(1))
ps = cont_prob(omega_uniform(), Counterstrategy({}, ConstIndex(5)), 2, sig=SIG_OMEGA)
check("omega then dies at c_i", ps[2] == Interval.exact(0))

# --- fail_mass --------------------------------------------------------------
fm = fail_mass(bye, rho0, 1, sig=SIG_GREET)
check("fail bye [1,1]", fm == Interval.exact(1))
fm = fail_mass(loop(), rho0, 10, sig=SIG_LOOP)
check("fail loop [1-2^-10, 1]", fm == Interval(1 - F(1, 1024), F(1)))
fm = fail_mass(TermMeasure(loop(), F(1, 2)), rho0, 4, sig=SIG_LOOP)
check("fail bounded by weight", fm.hi == F(1, 2))

# --- counterstrategy prescriptions ------------------------------------------
check("fail default refuses", FAIL == Counterstrategy().default
      and Counterstrategy().input_for(Play((), Sym("Bye")), 0) is None)
check("const invalid refuses", rho0.input_for(Play((), Sym("Bye")), 0) is None)
rr = Counterstrategy({}, RoundRobin())
p0 = Play((), Sym("Happy"))
p1 = Play(((Sym("Happy"), 0),), Sym("Happy"))
check("roundrobin cycles", rr.input_for(p0, 2) == 0 and rr.input_for(p1, 2) == 1)
check("roundrobin omega", rr.input_for(p1, None) == 1)
exp = Counterstrategy({p0: 1}, ConstIndex(0))
check("explicit beats default", exp.input_for(p0, 2) == 1 and exp.input_for(p1, 2) == 0)
check("explicit invalid refuses", Counterstrategy({p0: 7}, ConstIndex(0)).input_for(p0, 2) is None)
adv = Counterstrategy({}, Adversarial({p0: 1}))
check("adversarial table", adv.input_for(p0, 2) == 1 and adv.input_for(p1, 2) is None)

# parse / format round-trip
text = "# demo\ndefault: const 0\nHappy -> 1\nHappy?1.Happy -> 0\n"
rho = parse_counterstrategy(text, SIG_GREET)
check("parse explicit", rho.explicit[parse_play("Happy?", SIG_GREET)] == 1
      and rho.default == ConstIndex(0))
check("format round-trip", parse_counterstrategy(format_counterstrategy(rho), SIG_GREET) == rho)
check("format adversarial folds", "-> 1" in format_counterstrategy(adv)
      and "default: fail" in format_counterstrategy(adv))
for bad in ("default: sometimes", "Happy -> x", "nonsense line"):
    try:
        parse_counterstrategy(bad, SIG_GREET)
        check(f"reject '{bad}'", False)
    except Exception:
        check(f"reject '{bad}'", True)

# --- adversarial_rho ---------------------------------------------------------
t = Req(Sym("Happy"), (BYE, HAPPY_BB))
rho = adversarial_rho(t, depth=4, sig=SIG_GREET)
check("adversary picks deeper branch",
      rho.input_for(Play((), Sym("Happy")), 2) == 1, rho)

rho = adversarial_rho(loop(), depth=6, sig=SIG_LOOP)
allzero = all(i == 0 for i in rho.explicit.values()) if rho.explicit else \
    rho.default == ConstIndex(0)
check("loop adversary prescribes 0", allzero, rho)
ps = cont_prob(loop(), rho, 6, sig=SIG_LOOP)
check("loop adversary survives 2^-6", ps[-1] == Interval.exact(F(1, 64)))

tab, table = residual_table(t, 4, sig=SIG_GREET)
q, r = tab.lookup(Play((), Sym("Happy")))
check("residual table r", q == 0 and r == 1, (q, r))
check("margins ladder", [tab.margin(n) for n in range(3)] == [F(1), F(3, 2), F(5, 3)])

# --- extract_ff ---------------------------------------------------------------
lam, tau = extract_ff(greeting(), F(1, 2))
check("generator-free extracts whole", lam == 1 and tau == greeting())

lam, tau = extract_ff(loop(), F(7, 8))
from playmix.core import is_generator_free, Sum
check("loop extract lam 15/16", lam == F(15, 16), lam)
check("loop extract four summands", isinstance(tau, Sum) and len(tau.branches) == 4
      and is_generator_free(tau))
check("extract weight 1", weight(tau) == 1)
# scaled trace dominated pointwise
for play_txt, full in [("c", F(1, 2)), ("a?0.c", F(1, 4)), ("a?0.a?0.c", F(1, 8))]:
    play = parse_play(play_txt, SIG_LOOP)
    v = trace_value(tau, play)
    check(f"dominated at {play_txt}", lam * v.lo <= full and v.is_exact)

lam, tau = extract_ff(loop(), 0)
check("x=0 ok", lam >= F(1, 2) and is_generator_free(tau), lam)
lam, tau = extract_ff(omega_uniform(), F(3, 4))
check("omega kept intact", lam == 1 and tau == omega_uniform())
try:
    extract_ff(loop(), 1)
    check("x=1 rejected", False)
except Exception:
    check("x=1 rejected", True)

# --- definability_decomp ------------------------------------------------------
d = definability_decomp(bye, 3, sig=SIG_GREET)
check("bye decomp parts", [w for w, _ in d.parts] == [F(1, 2), F(1, 4), F(1, 8)]
      and all(p == bye for _, p in d.parts))
check("bye residual 1/8", d.residual_weight == F(1, 8) and d.residual == bye)

d = definability_decomp(bye, 1, sig=SIG_GREET)
check("K=1 single part", len(d.parts) == 1 and d.parts[0] == (F(1, 2), bye))

d = definability_decomp(loop(), 4, certify_depth=4, sig=SIG_LOOP)
check("loop residual 1/16", d.residual_weight == F(1, 16))
check("loop parts bounded", all(is_generator_free(p) for _, p in d.parts))
# reassembly within 2^-4 pointwise at depth 4
full = TermMeasure(loop(), F(1))
for play_txt in ["c", "a?0.c", "a?0.a?0.c", "a?0.a?0.a?0.c"]:
    play = parse_play(play_txt, SIG_LOOP)
    approx = sum((w * trace_value(p, play).lo for w, p in d.parts), F(0))
    gap = full.value(play) - approx
    check(f"decomp gap at {play_txt}", 0 <= gap <= d.residual_weight, gap)

try:
    definability_decomp(loop(), 0, sig=SIG_LOOP)
    check("K=0 rejected", False)
except Exception:
    check("K=0 rejected", True)

# --- sample_play ---------------------------------------------------------------
play, outcome = sample_play(bye, rho0, sig=SIG_GREET)
check("bye fails immediately", outcome == Failed(Play((), Sym("Bye")))
      and format_play(play) == "Bye")
p1, o1 = sample_play(greeting(), Counterstrategy({}, ConstIndex(1)), seed=7, sig=SIG_GREET)
p2, o2 = sample_play(greeting(), Counterstrategy({}, ConstIndex(1)), seed=7, sig=SIG_GREET)
check("seeded determinism", (p1, o1) == (p2, o2))
play, outcome = sample_play(loop(), rho0, max_steps=5, seed=3, sig=SIG_LOOP)
check("loop outcome shape", isinstance(outcome, (Failed, Exhausted)), (format_play(play), outcome))
seen = set()
for s in range(40):
    play, outcome = sample_play(loop(), rho0, max_steps=30, seed=s, sig=SIG_LOOP)
    check_ok = isinstance(outcome, Failed) and outcome.at.dangling == Sym("c")
    seen.add(outcome.at.n_outputs if isinstance(outcome, Failed) else -1)
    if not check_ok:
        break
else:
    check_ok = True
check("loop always dies at c", check_ok, sorted(seen))
check("loop run lengths vary", len(seen) >= 3, sorted(seen))

print(f"\n{len(PASS)} passed, {len(FAILED)} failed")
if FAILED:
    raise SystemExit(1)
