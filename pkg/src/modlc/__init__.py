"""modlc: optimizing source-to-source compiler for a subset of NMODL.

Pipeline: lexer/parser -> AST with scoped symbol tables -> DSL optimization
passes (constant folding, loop unrolling, inlining, localization) -> symbolic
solver lowering (cnexp, sparse, derivimplicit) -> scalar/SPMD/NMODL emission,
with a vectorized reference interpreter certifying every transformation.
"""

from .pipeline import CompileResult, compile_file, compile_source, frontend

__version__ = "0.1.0"

__all__ = ["CompileResult", "compile_file", "compile_source", "frontend", "__version__"]
