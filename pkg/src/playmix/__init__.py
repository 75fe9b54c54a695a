"""playmix: exact trace semantics, equivalence checking, normal forms and
counterstrategy games for probabilistic I/O programs."""

__version__ = "0.1.0"

from .core import (
    ArityMismatch, Choice, CoeffFamily, Compr, Config, DominationFails,
    FiniteArity, FoldGen, GeneratorUnsupported, Hole, Inconclusive,
    InexactValues, InvalidInput, IterN, IterateGen, MapGen, NatExpr,
    NotFinitelyFounded, NotSteady, NotWellFounded, OmegaArity, OpDecl, Play,
    PlaymixError, PolyGeo, ProbabilityOutOfRange, ProgramSyntaxError, RatLin,
    Req, ReqFam, Signature, SignatureNotFinitary, SubtractionUnderflow, Sum,
    Sym, UnknownSymbol, WeightNotOne, WitnessSearchExhausted,
    ZeroProbabilityHead, family_tail, format_play, parse_play, validate_term,
    weight,
)
from .semantics import (
    DiffMeasure, Interval, MeasureView, SumMeasure, TermMeasure, ZeroMeasure,
    condition, head_distribution, measure_add, measure_scale, measure_sub,
    support_enum, term_value, trace_value,
)
from .equivalence import (
    Distinguished, EquivalentUpTo, LawCheck, ProvedEquivalent, RewriteProof,
    bisimilar, canon_bisim, check_law_soundness, law_shape_ok, replay_proof,
    tensor_equiv_finitary, trace_equiv_upto,
)
from .normalforms import (
    ImpersonationCertificate, SteadyWitness, UniformRefutation, UniformWitness,
    ff_nf, impersonate, is_uniformly_below, light_nf, measure_to_wfnf,
    shallow_nf, steady_nf, subsplit, wf_nf,
)
from .games import (
    Adversarial, ConstIndex, Counterstrategy, DefinabilityDecomposition,
    Exhausted, FailPolicy, Failed, ResidualTable, RoundRobin, adversarial_rho,
    cont_prob, definability_decomp, extract_ff, fail_mass,
    format_counterstrategy, level_masses, parse_counterstrategy, residual_table,
    sample_play,
)
