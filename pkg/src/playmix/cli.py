"""Text formats and the command-line tool.

Programs (`.prog`), signatures (`.sig`) and counterstrategies (`.cs`) are
plain text; every command prints one JSON result envelope on stdout and
structured diagnostics on stderr.  Exit codes: 0 success / proved,
1 distinguished / failed, 2 usage error or inconclusive.
"""

from __future__ import annotations

import json
import os
import random
import sys
import time
from fractions import Fraction
from typing import List, Optional, Tuple, Union

import click

from .core import (
    Choice, CoeffFamily, Compr, Config, FiniteArity, FoldGen, Hole, IterN,
    IterateGen, MapGen, NatExpr, OmegaArity, OpDecl, PlaymixError, PolyGeo,
    ProbabilityOutOfRange, ProgramSyntaxError, RatLin, Req, ReqFam, Signature,
    Sum, Sym, Term, format_play, format_rational, parse_play, parse_rational,
    validate_term,
)
from .semantics import head_distribution, support_enum, trace_value
from .equivalence import (
    Distinguished, EquivalentUpTo, ProvedEquivalent, bisimilar,
    tensor_equiv_finitary, trace_equiv_upto,
)
from .normalforms import (
    ff_nf, impersonate, light_nf, shallow_nf, steady_nf, subsplit, wf_nf,
)
from .games import (
    Counterstrategy, Exhausted, Failed, adversarial_rho, cont_prob, fail_mass,
    format_counterstrategy, level_masses, parse_counterstrategy, sample_play,
)
from .semantics import cond_term
from . import acceptance, __version__


# ---------------------------------------------------------------------------
# tokenizer shared by the program and signature readers

_KEYWORDS = frozenset({
    "req", "sum", "tail", "map", "fold", "iterate", "each", "on", "from",
    "hole", "omega", "indices",
})

_PUNCT2 = ("+[", "=>", ">=", "<=")
_PUNCT1 = "()[]{},:;+*^/"


class _Tok:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind: str, text: str, line: int, col: int):
        self.kind = kind          # NAME | INT | KEY | PUNCT | EOF
        self.text = text
        self.line = line
        self.col = col


def _tokenize(text: str) -> List[_Tok]:
    toks: List[_Tok] = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        start_col = col
        two = text[i:i + 2]
        if two in _PUNCT2:
            toks.append(_Tok("PUNCT", two, line, start_col))
            i += 2
            col += 2
            continue
        if ch.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            toks.append(_Tok("INT", text[i:j], line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            toks.append(_Tok("KEY" if word in _KEYWORDS else "NAME",
                             word, line, start_col))
            col += j - i
            i = j
            continue
        if ch in _PUNCT1:
            toks.append(_Tok("PUNCT", ch, line, start_col))
            i += 1
            col += 1
            continue
        raise ProgramSyntaxError(
            f"line {line}, column {col}: unexpected character {ch!r}")
    toks.append(_Tok("EOF", "", line, col))
    return toks


class _Parser:
    """Recursive-descent reader for the program DSL."""

    def __init__(self, toks: List[_Tok], sig: Signature):
        self.toks = toks
        self.pos = 0
        self.sig = sig

    # -- plumbing ---------------------------------------------------------

    def peek(self, ahead: int = 0) -> _Tok:
        return self.toks[min(self.pos + ahead, len(self.toks) - 1)]

    def next(self) -> _Tok:
        tok = self.toks[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok.text == text and tok.kind in ("PUNCT", "KEY")

    def eat(self, text: str) -> bool:
        if self.at(text):
            self.next()
            return True
        return False

    def expect(self, text: str) -> _Tok:
        tok = self.next()
        if tok.text != text or tok.kind not in ("PUNCT", "KEY"):
            self.fail(f"expected {text!r}, found {tok.text!r}", tok)
        return tok

    def fail(self, msg: str, tok: Optional[_Tok] = None):
        tok = tok or self.peek()
        raise ProgramSyntaxError(f"line {tok.line}, column {tok.col}: {msg}")

    # -- atoms ------------------------------------------------------------

    def name(self, what: str = "name") -> str:
        tok = self.next()
        if tok.kind != "NAME":
            self.fail(f"expected {what}, found {tok.text!r}", tok)
        return tok.text

    def int_(self) -> int:
        tok = self.next()
        if tok.kind != "INT":
            self.fail(f"expected an integer, found {tok.text!r}", tok)
        return int(tok.text)

    def rational(self) -> Fraction:
        num = self.int_()
        if self.at("/") and self.peek(1).kind == "INT":
            self.next()
            den = self.int_()
            if den == 0:
                self.fail("division by zero in rational")
            return Fraction(num, den)
        return Fraction(num)

    def natexpr(self) -> NatExpr:
        const = 0
        terms: dict = {}
        while True:
            tok = self.peek()
            if tok.kind == "INT":
                k = self.int_()
                if self.eat("*"):
                    var = self.name("index variable")
                    terms[var] = terms.get(var, 0) + k
                else:
                    const += k
            elif tok.kind == "NAME":
                var = self.name()
                terms[var] = terms.get(var, 0) + 1
            else:
                self.fail("expected an index expression")
            if not self.eat("+"):
                break
        return NatExpr(const, tuple(sorted(terms.items())))

    def symref(self) -> Sym:
        base = self.name("operation name")
        indices: list = []
        if self.eat("{"):
            while True:
                e = self.natexpr()
                indices.append(e.const if e.is_const else e)
                if not self.eat(","):
                    break
            self.expect("}")
        return Sym(base, tuple(indices))

    # -- terms ------------------------------------------------------------

    def term(self) -> Term:
        left = self.atom()
        if self.eat("+["):
            tok = self.peek()
            p = self.rational()
            self.expect("]")
            if not (0 < p < 1):
                raise ProbabilityOutOfRange(
                    f"line {tok.line}, column {tok.col}: "
                    f"choice weight {format_rational(p)} must lie strictly "
                    "between 0 and 1")
            right = self.term()
            return Choice(p, left, right)
        return left

    def atom(self) -> Term:
        tok = self.peek()
        if self.eat("req"):
            return self.request()
        if self.eat("sum"):
            return self.sum_block()
        if self.eat("each"):
            return self.comprehension()
        if self.eat("iterate"):
            ctx = self.iter_operand()
            count = self.natexpr()
            self.expect("on")
            base = self.iter_operand()
            return IterN(count, ctx, base)
        if self.eat("hole"):
            return Hole()
        if self.eat("("):
            inner = self.term()
            self.expect(")")
            return inner
        self.fail(f"expected a term, found {tok.text!r}", tok)

    def request(self) -> Term:
        sym = self.symref()
        if not self.eat("("):
            return Req(sym, ())
        if self.peek().kind == "NAME" and self.peek(1).text == "=>":
            var = self.name()
            self.expect("=>")
            body = self.term()
            self.expect(")")
            return ReqFam(sym, var, body)
        children = [self.term()]
        while self.eat(","):
            children.append(self.term())
        self.expect(")")
        return Req(sym, tuple(children))

    def comprehension(self) -> Compr:
        self.expect("(")
        var = self.name("comprehension variable")
        self.expect("<=")
        bound = self.natexpr()
        self.expect(")")
        self.expect(":")
        coeff = self.ratlin()
        self.expect(":")
        body = self.term()
        return Compr(var, bound, coeff, body)

    def ratlin(self) -> RatLin:
        num = self.rational()
        if self.at("/") and self.peek(1).text == "(":
            self.next()
            self.expect("(")
            den = self.natexpr()
            self.expect(")")
            return RatLin(num, den)
        return RatLin(num, NatExpr(1, ()))

    def iter_operand(self) -> Term:
        """A context/base slot: a full atom, or a bare operation name.

        The shorthand fills unary operations with the hole and leaves nullary
        ones childless, so `iterate a n on c` reads as written.
        """
        tok = self.peek()
        if tok.kind == "NAME":
            sym = Sym(self.name(), ())
            size = self.sig.arity_size(sym)
            if size == 1:
                return Req(sym, (Hole(),))
            if size == 0:
                return Req(sym, ())
            self.fail(f"operation {sym.base!r} needs explicit children here",
                      tok)
        return self.atom()

    # -- sums -------------------------------------------------------------

    def sum_block(self) -> Sum:
        self.expect("{")
        coeffs: list = []
        branches: list = []
        tail: Optional[PolyGeo] = None
        gen = None
        while not self.at("}"):
            if self.at("tail"):
                if tail is not None:
                    self.fail("a sum may declare at most one tail")
                tail, gen = self.tail_entry()
            else:
                if tail is not None:
                    self.fail("explicit branches must precede the tail")
                coeffs.append(self.rational())
                self.expect(":")
                branches.append(self.term())
            if not self.eat(";"):
                break
        self.expect("}")
        if not coeffs and tail is None:
            self.fail("empty sum")
        return Sum(CoeffFamily(tuple(coeffs), tail), tuple(branches), gen)

    def tail_entry(self) -> Tuple[PolyGeo, object]:
        self.expect("tail")
        self.expect("(")
        var = self.name("tail variable")
        self.expect(">=")
        offset = self.int_()
        self.expect(")")
        self.expect(":")
        tail = self.tail_coeff(var, offset)
        self.expect(":")
        gen = self.genspec(var)
        return tail, gen

    def tail_coeff(self, var: str, offset: int) -> PolyGeo:
        """Product of rational, geometric and polynomial factors in `var`."""
        poly: Tuple[Fraction, ...] = (Fraction(1),)
        ratio: Optional[Fraction] = None
        scale = Fraction(1)
        while True:
            tok = self.peek()
            if tok.text == "(" and tok.kind == "PUNCT":
                poly = _poly_mul(poly, self.poly_factor(var))
            elif tok.kind == "INT":
                q = self.rational()
                if self.eat("^"):
                    base_q, exp = q, self.exponent(var)
                    ratio_part = exp.coeff_of(var)
                    if exp.vars() - {var}:
                        self.fail("tail exponent may only use the tail variable")
                    if ratio_part == 0:
                        scale *= base_q ** exp.const
                    elif ratio_part == 1:
                        if not (0 < base_q < 1):
                            raise ProbabilityOutOfRange(
                                f"line {tok.line}, column {tok.col}: geometric "
                                "base must lie strictly between 0 and 1")
                        ratio = base_q if ratio is None else ratio * base_q
                        scale *= base_q ** exp.const
                    else:
                        self.fail("tail exponent must be linear in the tail "
                                  "variable with unit coefficient")
                else:
                    scale *= q
            else:
                self.fail("expected a tail coefficient factor")
            if not self.eat("*"):
                break
        if ratio is None:
            self.fail("tail coefficient needs a geometric factor r^" + var)
        return PolyGeo(poly=poly, ratio=ratio, scale=scale, offset=offset)

    def exponent(self, var: str) -> NatExpr:
        if self.eat("("):
            e = self.natexpr()
            self.expect(")")
            return e
        tok = self.peek()
        if tok.kind == "INT":
            return NatExpr(self.int_(), ())
        if tok.kind == "NAME":
            return NatExpr(0, ((self.name(), 1),))
        self.fail("expected an exponent")

    def poly_factor(self, var: str) -> Tuple[Fraction, ...]:
        self.expect("(")
        coeffs: dict = {}
        while True:
            c, d = self.monomial(var)
            coeffs[d] = coeffs.get(d, Fraction(0)) + c
            if not self.eat("+"):
                break
        self.expect(")")
        top = max(coeffs)
        return tuple(coeffs.get(d, Fraction(0)) for d in range(top + 1))

    def monomial(self, var: str) -> Tuple[Fraction, int]:
        tok = self.peek()
        coef = Fraction(1)
        deg = 0
        if tok.kind == "INT":
            coef = self.rational()
            if not self.eat("*"):
                if self.peek().kind == "NAME":
                    pass          # implicit product like `2n` is not allowed
                return coef, 0
        name_tok = self.peek()
        if name_tok.kind != "NAME":
            self.fail("expected the tail variable in a polynomial factor")
        if self.name() != var:
            self.fail(f"polynomial factors may only use {var!r}", name_tok)
        deg = 1
        if self.eat("^"):
            deg = self.int_()
        return coef, deg

    def genspec(self, var: str):
        tok = self.peek()
        if self.eat("iterate"):
            ctx = self.iter_operand()
            self.name("iteration variable")     # decorative, usually the tail var
            self.expect("on")
            base = self.iter_operand()
            return IterateGen(ctx, base)
        if self.eat("map"):
            self.expect("(")
            mvar = self.name("branch variable")
            self.expect(")")
            return MapGen(mvar, self.term())
        if self.eat("fold"):
            self.expect("(")
            fvar = self.name("branch variable")
            self.expect(";")
            svar = self.name("step variable")
            self.expect(")")
            step = self.term()
            self.expect("from")
            base = self.term()
            return FoldGen(fvar, svar, step, base)
        self.fail("expected a generator (iterate / map / fold)", tok)


def _poly_mul(a: Tuple[Fraction, ...], b: Tuple[Fraction, ...]) -> tuple:
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, ca in enumerate(a):
        for j, cb in enumerate(b):
            out[i + j] += ca * cb
    return tuple(out)


def parse_program(text: str, sig: Signature) -> Term:
    """Read a program term and validate it against the signature."""
    parser = _Parser(_tokenize(text), sig)
    term = parser.term()
    tok = parser.peek()
    if tok.kind != "EOF":
        parser.fail(f"unexpected trailing input {tok.text!r}", tok)
    validate_term(term, sig)
    return term


# ---------------------------------------------------------------------------
# pretty-printer (parse_program . format_program is the identity)

def _fmt_rat(q: Fraction) -> str:
    return format_rational(q)


def _fmt_poly(poly: tuple, var: str) -> str:
    monos = []
    for deg, c in enumerate(poly):
        if c == 0:
            continue
        if c < 0:
            raise ProgramSyntaxError(
                "cannot print a negative polynomial coefficient")
        if deg == 0:
            monos.append(_fmt_rat(c))
        else:
            head = "" if c == 1 else f"{_fmt_rat(c)}*"
            monos.append(f"{head}{var}" + (f"^{deg}" if deg > 1 else ""))
    return "(" + " + ".join(monos or ["0"]) + ")"


def _fmt_tail(tail: PolyGeo, var: str) -> str:
    parts = []
    poly = tail.poly
    while len(poly) > 1 and poly[-1] == 0:
        poly = poly[:-1]
    if poly != (Fraction(1),):
        parts.append(_fmt_poly(poly, var))
    if tail.scale != 1:
        parts.append(_fmt_rat(tail.scale))
    parts.append(f"{_fmt_rat(tail.ratio)}^{var}")
    return " * ".join(parts)


def _fmt_natexpr(e: NatExpr) -> str:
    return str(e)


def _fmt_ratlin(r: RatLin) -> str:
    if r.den == NatExpr(1, ()):
        return _fmt_rat(r.num)
    return f"{_fmt_rat(r.num)}/({_fmt_natexpr(r.den)})"


def _needs_parens_left(t: Term) -> bool:
    return isinstance(t, (Choice, Compr, IterN))


def format_program(term: Term, indent: int = 0) -> str:
    """Canonical text for a term; parsing it back yields an equal term."""
    pad = " " * indent
    if isinstance(term, Req):
        head = f"req {term.sym}"
        if not term.children:
            return head
        inner = ", ".join(format_program(c, indent) for c in term.children)
        return f"{head}({inner})"
    if isinstance(term, ReqFam):
        return (f"req {term.sym}({term.var} => "
                f"{format_program(term.body, indent)})")
    if isinstance(term, Choice):
        left = format_program(term.left, indent)
        if _needs_parens_left(term.left):
            left = f"({left})"
        right = format_program(term.right, indent)
        return f"{left} +[{_fmt_rat(term.p)}] {right}"
    if isinstance(term, Hole):
        return "hole"
    if isinstance(term, Compr):
        return (f"each({term.var} <= {_fmt_natexpr(term.bound)}) : "
                f"{_fmt_ratlin(term.coeff)} : "
                f"{format_program(term.body, indent)}")
    if isinstance(term, IterN):
        ctx = format_program(term.ctx, indent)
        if _needs_parens_left(term.ctx):
            ctx = f"({ctx})"
        base = format_program(term.base, indent)
        if _needs_parens_left(term.base):
            base = f"({base})"
        return f"iterate {ctx} {_fmt_natexpr(term.count)} on {base}"
    if isinstance(term, Sum):
        if len(term.coeffs.explicit) != len(term.branches):
            raise ProgramSyntaxError(
                "cannot print a sum whose explicit coefficients and branches "
                "have different lengths")
        if term.coeffs.tail is not None and term.gen is None:
            raise ProgramSyntaxError("cannot print a coefficient tail with "
                                     "no generator")
        inner_pad = " " * (indent + 2)
        lines = ["sum {"]
        for q, b in zip(term.coeffs.explicit, term.branches):
            lines.append(f"{inner_pad}{_fmt_rat(q)} : "
                         f"{format_program(b, indent + 2)} ;")
        if term.gen is not None:
            var = getattr(term.gen, "var", "n")
            lines.append(f"{inner_pad}tail({var} >= {term.coeffs.tail.offset})"
                         f" : {_fmt_tail(term.coeffs.tail, var)}"
                         f" : {_fmt_gen(term.gen, var, indent + 2)} ;")
        lines.append(pad + "}")
        return ("\n" + pad).join(lines[:1]) + "\n" + "\n".join(lines[1:-1]) \
            + "\n" + lines[-1]
    raise ProgramSyntaxError(f"cannot print {type(term).__name__}")


def _fmt_gen(gen, var: str, indent: int) -> str:
    if isinstance(gen, IterateGen):
        ctx = format_program(gen.ctx, indent)
        if _needs_parens_left(gen.ctx):
            ctx = f"({ctx})"
        base = format_program(gen.base, indent)
        if _needs_parens_left(gen.base):
            base = f"({base})"
        return f"iterate {ctx} {var} on {base}"
    if isinstance(gen, MapGen):
        return f"map({gen.var}) {format_program(gen.body, indent)}"
    if isinstance(gen, FoldGen):
        return (f"fold({gen.var}; {gen.stepvar}) "
                f"{format_program(gen.step, indent)} from "
                f"{format_program(gen.base, indent)}")
    raise ProgramSyntaxError(f"cannot print generator {type(gen).__name__}")


# ---------------------------------------------------------------------------
# signatures

def parse_signature(text: str) -> Signature:
    """Read `name : (labels...)` / `name : omega` lines, with optional
    `indices K` suffix for indexed symbol families."""
    ops = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = _tokenize(line)
        parser = _Parser(toks, None)      # type: ignore[arg-type]
        try:
            name_tok = parser.next()
            if name_tok.kind not in ("NAME", "KEY"):
                parser.fail("expected an operation name", name_tok)
            if name_tok.kind == "KEY":
                parser.fail(f"{name_tok.text!r} is a reserved word", name_tok)
            parser.expect(":")
            if parser.eat("omega"):
                arity = OmegaArity()
            else:
                parser.expect("(")
                labels = []
                while not parser.at(")"):
                    tok = parser.next()
                    if tok.kind not in ("NAME", "INT"):
                        parser.fail("expected an input label", tok)
                    labels.append(tok.text)
                    if not parser.eat(","):
                        break
                parser.expect(")")
                arity = FiniteArity(tuple(labels))
            index_params = 0
            if parser.eat("indices"):
                index_params = parser.int_()
            if parser.peek().kind != "EOF":
                parser.fail("unexpected trailing input")
            ops.append(OpDecl(name_tok.text, arity, index_params))
        except ProgramSyntaxError as exc:
            raise ProgramSyntaxError(f"signature line {lineno}: {exc}") from None
    if not ops:
        raise ProgramSyntaxError("signature declares no operations")
    return Signature(ops)


def format_signature(sig: Signature) -> str:
    lines = []
    for op in sig:
        if isinstance(op.arity, OmegaArity):
            arity = "omega"
        else:
            arity = "(" + ", ".join(op.arity.labels) + ")"
        suffix = f" indices {op.index_params}" if op.index_params else ""
        lines.append(f"{op.name} : {arity}{suffix}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# config + JSON envelopes

_SCHEMA = "playmix-result/1"


def _q2s(q: Fraction) -> str:
    return format_rational(q)


def _iv(iv) -> Union[str, dict]:
    if iv.is_exact:
        return _q2s(iv.lo)
    return {"lo": _q2s(iv.lo), "hi": _q2s(iv.hi)}


def _load_config(path: Optional[str], epsilon: Optional[str],
                 depth: Optional[int], rounds: Optional[int],
                 spot_checks: Optional[int], seed: Optional[int]) -> Config:
    cfg = Config()
    path = path or os.environ.get("PLAYMIX_CONFIG")
    if path:
        pairs = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ProgramSyntaxError(
                        f"config line {lineno}: expected key=value")
                key, value = (part.strip() for part in line.split("=", 1))
                pairs[key] = value
        cfg = Config.from_pairs(pairs)
    if epsilon is not None:
        cfg.epsilon = parse_rational(epsilon)
    if depth is not None:
        cfg.depth = depth
    if rounds is not None:
        cfg.rounds = rounds
    if spot_checks is not None:
        cfg.spot_checks = spot_checks
    if seed is not None:
        cfg.seed = seed
    if cfg.epsilon <= 0:
        raise ProgramSyntaxError("epsilon must be positive")
    if cfg.depth < 1:
        raise ProgramSyntaxError("depth must be at least 1")
    return cfg


def _config_echo(cfg: Config) -> dict:
    return {
        "epsilon": _q2s(cfg.epsilon),
        "depth": cfg.depth,
        "rounds": cfg.rounds,
        "spot_checks": cfg.spot_checks,
        "seed": cfg.seed,
    }


def _emit(command: str, cfg: Config, payload: dict, started: float,
          code: int = 0) -> None:
    envelope = {
        "schema": _SCHEMA,
        "tool": {"name": "playmix", "version": __version__},
        "command": command,
        "config": _config_echo(cfg),
        "payload": payload,
        "timing_ms": round((time.monotonic() - started) * 1000),
    }
    click.echo(json.dumps(envelope, indent=2, sort_keys=True))
    if code:
        sys.exit(code)


def _diagnose(command: str, cfg: Config, exc: PlaymixError) -> None:
    diagnostic = {
        "schema": _SCHEMA,
        "command": command,
        "config": _config_echo(cfg),
        "diagnostic": {"error": type(exc).__name__, "message": str(exc)},
    }
    click.echo(json.dumps(diagnostic, indent=2, sort_keys=True), err=True)
    sys.exit(2)


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _load(prog_path: str, sig_path: str) -> Tuple[Term, Signature]:
    sig = parse_signature(_read(sig_path))
    return parse_program(_read(prog_path), sig), sig


def _common_options(f):
    for option in reversed([
        click.option("--epsilon", default=None, metavar="A/B",
                     help="certification tolerance (default 1/2^20)"),
        click.option("--depth", default=None, type=int,
                     help="play-depth bound (default 12)"),
        click.option("--rounds", default=None, type=int,
                     help="round budget for iterated constructions (default 6)"),
        click.option("--spot-checks", default=None, type=int,
                     help="generator spot-check bound (default 16)"),
        click.option("--seed", default=None, type=int, help="sampling seed"),
        click.option("--config", "config_path", default=None,
                     type=click.Path(exists=True, dir_okay=False),
                     help="key=value config file (flags win; "
                          "PLAYMIX_CONFIG sets the default path)"),
    ]):
        f = option(f)
    return f


_SIG_OPT = click.option("--sig", "sig_path", required=True,
                        type=click.Path(exists=True, dir_okay=False),
                        help="signature file")
_PROG_ARG = click.argument("prog", type=click.Path(exists=True,
                                                   dir_okay=False))


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="playmix")
def main():
    """Exact analysis of probabilistic input/output programs."""


# ---------------------------------------------------------------------------
# commands

@main.command()
@_PROG_ARG
@_SIG_OPT
@click.option("--play", "play_text", required=True,
              help='play text, e.g. "Happy?1.Happy?0.Bye"')
@_common_options
def trace(prog, sig_path, play_text, config_path, **flags):
    """Certified value of a program at one play."""
    cfg = _load_config(config_path, **flags)
    started = time.monotonic()
    try:
        term, sig = _load(prog, sig_path)
        play = parse_play(play_text, sig)
        value = trace_value(term, play, cfg.epsilon)
    except PlaymixError as exc:
        _diagnose("trace", cfg, exc)
    _emit("trace", cfg, {"play": format_play(play), "value": _iv(value)},
          started)


@main.command()
@_PROG_ARG
@_SIG_OPT
@_common_options
def support(prog, sig_path, config_path, **flags):
    """Enumerate the supported plays up to the depth bound."""
    cfg = _load_config(config_path, **flags)
    started = time.monotonic()
    try:
        term, sig = _load(prog, sig_path)
        entries = support_enum(term, cfg.depth, cfg.epsilon,
                               omega_bound=cfg.spot_checks, sig=sig)
    except PlaymixError as exc:
        _diagnose("support", cfg, exc)
    payload = {
        "depth": cfg.depth,
        "entries": [{"play": format_play(p), "value": _iv(v)}
                    for p, v in entries],
    }
    _emit("support", cfg, payload, started)


@main.command()
@click.argument("left", type=click.Path(exists=True, dir_okay=False))
@click.argument("right", type=click.Path(exists=True, dir_okay=False))
@_SIG_OPT
@click.option("--mode", type=click.Choice(["bisim", "trace", "tensor"]),
              default="trace", show_default=True)
@_common_options
def equiv(left, right, sig_path, mode, config_path, **flags):
    """Equivalence check: exit 0 equivalent/proved, 1 distinguished,
    2 inconclusive."""
    cfg = _load_config(config_path, **flags)
    started = time.monotonic()
    try:
        sig = parse_signature(_read(sig_path))
        t1 = parse_program(_read(left), sig)
        t2 = parse_program(_read(right), sig)
        if mode == "bisim":
            same, _ = bisimilar(t1, t2, sig)
            _emit("equiv", cfg, {"mode": mode, "bisimilar": same}, started,
                  code=0 if same else 1)
        elif mode == "trace":
            verdict = trace_equiv_upto(t1, t2, cfg.depth, cfg.epsilon, sig,
                                       cfg.spot_checks)
            if isinstance(verdict, EquivalentUpTo):
                payload = {"mode": mode, "verdict": "equivalent-up-to",
                           "depth": verdict.depth,
                           "epsilon": _q2s(verdict.epsilon),
                           "plays_checked": verdict.plays_checked}
                _emit("equiv", cfg, payload, started)
            else:
                payload = {"mode": mode, "verdict": "distinguished",
                           "play": format_play(verdict.play),
                           "left": _iv(verdict.left),
                           "right": _iv(verdict.right)}
                _emit("equiv", cfg, payload, started, code=1)
        else:
            s1, _ = steady_nf(t1, sig, eps=cfg.epsilon)
            s2, _ = steady_nf(t2, sig, eps=cfg.epsilon)
            verdict = tensor_equiv_finitary(s1, s2, cfg.rounds, sig,
                                            cfg.epsilon)
            if isinstance(verdict, ProvedEquivalent):
                proof = verdict.proof
                payload = {"mode": mode, "verdict": "proved",
                           "steps": len(proof.steps),
                           "final_cut": proof.final_cut,
                           "residual_bound": _q2s(proof.residual_bound)}
                _emit("equiv", cfg, payload, started)
            elif isinstance(verdict, Distinguished):
                payload = {"mode": mode, "verdict": "distinguished",
                           "play": format_play(verdict.play),
                           "left": _iv(verdict.left),
                           "right": _iv(verdict.right)}
                _emit("equiv", cfg, payload, started, code=1)
            else:
                payload = {"mode": mode, "verdict": "bounded-only",
                           "depth": verdict.depth}
                _emit("equiv", cfg, payload, started, code=2)
    except PlaymixError as exc:
        _diagnose("equiv", cfg, exc)


@main.command()
@_PROG_ARG
@_SIG_OPT
@click.option("--form", required=True,
              type=click.Choice(["shallow", "light", "ff", "wf", "steady"]))
@_common_options
def normalize(prog, sig_path, form, config_path, **flags):
    """Rewrite into the requested normal form (exit 2 when unsupported)."""
    cfg = _load_config(config_path, **flags)
    started = time.monotonic()
    try:
        term, sig = _load(prog, sig_path)
        payload = {"form": form}
        if form == "shallow":
            out = shallow_nf(term, cfg.epsilon)
        elif form == "light":
            out = light_nf(term)
        elif form == "ff":
            out = ff_nf(term)
        elif form == "wf":
            out = wf_nf(term)
        else:
            out, witness = steady_nf(term, sig, eps=cfg.epsilon)
            payload["witness"] = {
                "margins": [_q2s(m) for m in witness.margins],
                "certified_depth": witness.certified_depth,
            }
        payload["program"] = format_program(out)
    except PlaymixError as exc:
        _diagnose("normalize", cfg, exc)
    _emit("normalize", cfg, payload, started)


@main.command("subsplit")
@click.argument("whole", type=click.Path(exists=True, dir_okay=False))
@click.argument("part", type=click.Path(exists=True, dir_okay=False))
@_SIG_OPT
@click.option("--p", "p_text", required=True, metavar="A/B",
              help="weight of the split-off part")
@_common_options
def subsplit_cmd(whole, part, sig_path, p_text, config_path, **flags):
    """Solve  whole = p*part + (1-p)*solution  for the solution term."""
    cfg = _load_config(config_path, **flags)
    started = time.monotonic()
    try:
        sig = parse_signature(_read(sig_path))
        tm = parse_program(_read(whole), sig)
        tl = parse_program(_read(part), sig)
        p = parse_rational(p_text)
        if not (0 < p < 1):
            raise ProbabilityOutOfRange("p must lie strictly between 0 and 1")
        out = subsplit(tm, tl, p, eps=cfg.epsilon)
        verdict = trace_equiv_upto(Choice(p, tl, out), tm, cfg.depth,
                                   cfg.epsilon, sig, cfg.spot_checks)
        payload = {"p": _q2s(p), "program": format_program(out)}
        if isinstance(verdict, EquivalentUpTo):
            payload["certified"] = {"depth": verdict.depth,
                                    "plays_checked": verdict.plays_checked}
            _emit("subsplit", cfg, payload, started)
        else:
            payload["certified"] = {"distinguished-at":
                                    format_play(verdict.play)}
            _emit("subsplit", cfg, payload, started, code=1)
    except PlaymixError as exc:
        _diagnose("subsplit", cfg, exc)


@main.command("impersonate")
@click.argument("left", type=click.Path(exists=True, dir_okay=False))
@click.argument("right", type=click.Path(exists=True, dir_okay=False))
@_SIG_OPT
@_common_options
def impersonate_cmd(left, right, sig_path, config_path, **flags):
    """Build the mixer U with  1/2*left + 1/2*U  ==  1/2*right + 1/2*U."""
    cfg = _load_config(config_path, **flags)
    started = time.monotonic()
    try:
        sig = parse_signature(_read(sig_path))
        t1 = parse_program(_read(left), sig)
        t2 = parse_program(_read(right), sig)
        cert = impersonate(t1, t2, cfg.rounds, depth=min(cfg.depth, 8),
                           eps=cfg.epsilon)
        payload = {
            "rounds": cert.rounds,
            "certified_depth": cert.certified_depth,
            "components": len(cert.components),
            "mixer": format_program(cert.residual),
        }
    except PlaymixError as exc:
        _diagnose("impersonate", cfg, exc)
    _emit("impersonate", cfg, payload, started)


@main.command("play")
@_PROG_ARG
@_SIG_OPT
@click.option("--cs", "cs_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="counterstrategy file (required unless --interactive)")
@click.option("--steps", default=None, type=int,
              help="number of input/output cycles (default: depth)")
@click.option("--interactive", is_flag=True,
              help="sample outputs, read inputs from the terminal")
@_common_options
def play_cmd(prog, sig_path, cs_path, steps, interactive, config_path,
             **flags):
    """Run a program against a counterstrategy (batch ledger or REPL)."""
    cfg = _load_config(config_path, **flags)
    started = time.monotonic()
    try:
        term, sig = _load(prog, sig_path)
        if interactive:
            _interactive_loop(term, sig, cfg, steps or cfg.depth)
            return
        if cs_path is None:
            raise ProgramSyntaxError("--cs is required in batch mode")
        rho = parse_counterstrategy(_read(cs_path), sig)
        horizon = steps if steps is not None else cfg.depth
        playing, failing, unresolved = level_masses(term, rho, horizon,
                                                    cfg.epsilon, sig)
        survival = cont_prob(term, rho, horizon, cfg.epsilon, sig)
        bounds = fail_mass(term, rho, horizon, cfg.epsilon, sig)
        payload = {
            "steps": horizon,
            "levels": [{"cycle": n,
                        "playing": _q2s(playing[n]),
                        "failing": _q2s(failing[n]) if n < len(failing)
                        else None,
                        "unresolved": _q2s(unresolved[n])
                        if n < len(unresolved) else None}
                       for n in range(len(playing))],
            "survival": [_iv(v) for v in survival],
            "eventual_fail_mass": _iv(bounds),
        }
    except PlaymixError as exc:
        _diagnose("play", cfg, exc)
    _emit("play", cfg, payload, started)


def _interactive_loop(term: Term, sig: Signature, cfg: Config,
                      max_steps: int) -> None:
    """Terminal session: the tool samples outputs, the user supplies inputs."""
    rng = random.Random(cfg.seed)
    carried = Fraction(1)
    cur = term
    trail = []
    for _ in range(max_steps):
        heads = [(s, v) for s, v in head_distribution(cur, cfg.epsilon, sig)
                 if v.lo > 0]
        total = sum((v.lo for _, v in heads), Fraction(0))
        if not heads or total == 0:
            click.echo("no outputs remain; session over")
            break
        draw = Fraction(rng.getrandbits(64), 2 ** 64) * total
        acc = Fraction(0)
        sym = heads[-1][0]
        for s, v in heads:
            acc += v.lo
            if draw < acc:
                sym = s
                break
        trail.append(str(sym))
        arity = sig.arity_size(sym)
        click.echo(f"output: {sym}    (play so far: {'.'.join(trail)})")
        if arity == 0:
            click.echo(f"request takes no input; continuation mass "
                       f"{_q2s(carried)}")
            break
        answer = click.prompt(
            f"input for {sym} (0..{arity - 1 if arity else 'omega'}, "
            f"or 'fail')", default="fail", show_default=False)
        if answer.strip() == "fail":
            click.echo(f"refused; failure recorded at mass {_q2s(carried)}")
            break
        i = int(answer)
        if arity is not None and not 0 <= i < arity:
            click.echo("input out of range; treated as a refusal")
            break
        mass, child = cond_term(cur, sym, i, cfg.epsilon)
        if child is None:
            click.echo("that input carries no mass; play is over")
            break
        carried *= mass
        trail[-1] = f"{sym}?{i}"
        click.echo(f"continuation mass so far: {_q2s(carried)}")
        cur = child
    else:
        click.echo("step budget exhausted")


@main.command("victorious")
@_PROG_ARG
@_SIG_OPT
@click.option("--steps", default=None, type=int,
              help="survival horizon (default: depth)")
@_common_options
def victorious_cmd(prog, sig_path, steps, config_path, **flags):
    """Certify that no counterstrategy lets the program play forever."""
    cfg = _load_config(config_path, **flags)
    started = time.monotonic()
    try:
        term, sig = _load(prog, sig_path)
        horizon = steps if steps is not None else cfg.depth
        rho = adversarial_rho(term, depth=horizon, eps=cfg.epsilon, sig=sig)
        survival = cont_prob(term, rho, horizon, cfg.epsilon, sig)
        bounds = fail_mass(term, rho, horizon, cfg.epsilon, sig)
        payload = {
            "steps": horizon,
            "victorious": True,
            "certificate": "every parsed program denotes a countable mixture "
                           "of finite-depth request trees, so its survival "
                           "probability vanishes against every "
                           "counterstrategy",
            "adversary": format_counterstrategy(rho),
            "survival": [_iv(v) for v in survival],
            "eventual_fail_mass": _iv(bounds),
        }
    except PlaymixError as exc:
        _diagnose("victorious", cfg, exc)
    _emit("victorious", cfg, payload, started)


@main.command("sample")
@_PROG_ARG
@_SIG_OPT
@click.option("--cs", "cs_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--runs", default=1, show_default=True, type=int)
@click.option("--max-steps", default=64, show_default=True, type=int)
@_common_options
def sample_cmd(prog, sig_path, cs_path, runs, max_steps, config_path,
               **flags):
    """Sample complete runs of a program against a counterstrategy."""
    cfg = _load_config(config_path, **flags)
    started = time.monotonic()
    try:
        term, sig = _load(prog, sig_path)
        rho = parse_counterstrategy(_read(cs_path), sig)
        results = []
        for r in range(runs):
            play, outcome = sample_play(term, rho, max_steps,
                                        seed=cfg.seed + r, eps=cfg.epsilon,
                                        sig=sig)
            if isinstance(outcome, Failed):
                out = {"kind": "failed", "at": format_play(outcome.at)}
            else:
                out = {"kind": "exhausted"}
            results.append({"play": format_play(play), "outcome": out})
        payload = {"runs": results, "max_steps": max_steps}
    except PlaymixError as exc:
        _diagnose("sample", cfg, exc)
    _emit("sample", cfg, payload, started)


@main.command("selftest")
@click.option("--only", multiple=True, metavar="NAME",
              help="run a subset of the acceptance checks")
@click.option("--json", "as_json", is_flag=True,
              help="emit the result envelope instead of one line per check")
@_common_options
def selftest_cmd(only, as_json, config_path, **flags):
    """Run the acceptance suite; one pass/fail line per criterion."""
    cfg = _load_config(config_path, **flags)
    started = time.monotonic()
    results = acceptance.run_all(list(only) or None)
    ok = all(r.passed for r in results)
    if as_json:
        payload = {
            "results": [{"name": r.name, "passed": r.passed,
                         "detail": r.detail} for r in results],
            "passed": sum(r.passed for r in results),
            "total": len(results),
        }
        _emit("selftest", cfg, payload, started, code=0 if ok else 1)
        return
    for r in results:
        click.echo(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    click.echo(f"{sum(r.passed for r in results)}/{len(results)} "
               "acceptance checks passed")
    if not ok:
        sys.exit(1)


if __name__ == "__main__":
    main()
