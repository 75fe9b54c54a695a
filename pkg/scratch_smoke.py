"""Throwaway smoke checks for the semantics engine (deleted before commit)."""
from fractions import Fraction as F

from playmix import examples as ex
from playmix.core import parse_play, validate_term, format_play
from playmix.semantics import (term_value, term_heads, cond_term, support_enum,
                               head_distribution)

# --- greeting example ---
p = ex.greeting()
validate_term(p, ex.SIG_GREET)
table = {
    "": F(1),
    "Happy": F(1),
    "Happy?0.Bye": F(1),
    "Happy?1.Bye": F(1, 2),
    "Happy?1.Happy": F(1, 2),
    "Happy?1.Happy?0.Bye": F(1, 6),
    "Happy?1.Happy?1.Bye": F(1, 3),
    "Happy?1.Happy?0.Happy?0.Bye": F(1, 3),
    "Happy?1.Happy?1.Happy?0.Bye": F(1, 6),
}
for text, want in table.items():
    got = term_value(p, parse_play(text))
    assert got == want, (text, got, want)
print("greeting table OK")

sup2 = support_enum(p, 2, sig=ex.SIG_GREET)
print("support depth2:", [(format_play(s) or "(empty)", str(v.lo)) for s, v in sup2])

# --- towers ---
m = ex.tower_a()
n = ex.tower_b()
validate_term(m, ex.SIG_TOWER)
validate_term(n, ex.SIG_TOWER)
checks = [
    ("star?0.b", F(1, 2), F(1, 2)),
    ("star?0.a", F(1, 2), F(1, 2)),
    ("star", F(1), F(1)),
    ("star?1.star", F(1, 2), F(1, 2)),
    ("star?1.c", F(1, 2), F(1, 2)),
    ("star?1.star?0.a", F(1, 4), F(1, 4)),
    ("star?1.star?0.b", F(1, 4), F(1, 4)),
]
for text, wm, wn in checks:
    play = parse_play(text)
    gm, gn = term_value(m, play), term_value(n, play)
    assert gm == wm, (text, gm, wm)
    assert gn == wn, (text, gn, wn)
# m at star?0.b should be 1/2 too? no: branch0 left=a, so star?0.b has mass from branches n>=1: each has left=b: sum_{n>=1} 2^-(n+1) = 1/2
print("tower spot values OK (note: star?0.b on m =", term_value(m, parse_play("star?0.b")), ")")

# trace equality to depth 5 on union support
s1 = support_enum(m, 5, sig=ex.SIG_TOWER)
s2 = support_enum(n, 5, sig=ex.SIG_TOWER)
plays = {pl for pl, _ in s1} | {pl for pl, _ in s2}
bad = [format_play(pl) for pl in plays if term_value(m, pl) != term_value(n, pl)]
assert not bad, bad
print(f"towers trace-equal on {len(plays)} plays to depth 5")

# conditioning example: cond(m, star, 1) = 1/2 c + 1/4 a*c + 1/8 b*(a*c) ...
mass, t = cond_term(m, ex.Sym("star") if hasattr(ex, "Sym") else None, 1)
