"""Command-line driver: compile, analyze, roundtrip and verify subcommands."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .analysis import DEFAULT_THRESHOLD, profile_mechanism, report_json, report_table
from .ast_nodes import dump_json, dump_text, structurally_equal
from .codegen import emit_nmodl, emit_scalar, emit_simd
from .diagnostics import CompileError
from .interp import InterpError, compare_pipelines
from .passes import PASS_ORDER
from .pipeline import compile_file, frontend
from .printer import emit_nmodl_text

VERIFY_TOLERANCE = 1e-12

EXIT_OK = 0
EXIT_DIAGNOSTICS = 1
EXIT_VERIFY_FAILED = 2


def _parse_passes(text: str) -> tuple[str, ...]:
    if text == "all":
        return PASS_ORDER
    if text == "none":
        return ()
    names = tuple(p.strip() for p in text.split(",") if p.strip())
    unknown = [n for n in names if n not in PASS_ORDER]
    if unknown:
        raise argparse.ArgumentTypeError(
            f"unknown pass(es) {', '.join(unknown)}; choose from {', '.join(PASS_ORDER)}"
        )
    return names


def _parse_onoff(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _parse_namelist(text: str) -> tuple[str, ...]:
    return tuple(n.strip() for n in text.split(",") if n.strip())


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modlc",
        description="Optimizing source-to-source compiler for the NMODL subset",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("files", nargs="+", help="input .mod files")
        p.add_argument(
            "--passes",
            type=_parse_passes,
            default=PASS_ORDER,
            help="none | all | comma list of fold,unroll,inline,localize (default: all)",
        )
        p.add_argument(
            "--solver-cse",
            type=_parse_onoff,
            default=True,
            metavar="on|off",
            help="common-subexpression elimination over solver output (default: on)",
        )
        p.add_argument(
            "--pade",
            type=_parse_onoff,
            default=False,
            metavar="on|off",
            help="rational (2+x)/(2-x) stand-in for exp in cnexp updates (default: off)",
        )
        p.add_argument(
            "--observe",
            type=_parse_namelist,
            default=(),
            metavar="NAME[,NAME...]",
            help="variables kept observable: never localized (default: none)",
        )
        p.add_argument("--json-report", metavar="PATH", help="write a JSON run report")
        p.add_argument(
            "--dump-ast",
            choices=("text", "json"),
            help="dump the optimized AST to stdout in the chosen form",
        )

    c = sub.add_parser("compile", help="emit selected backends for each mechanism")
    common(c)
    c.add_argument(
        "--backend",
        default="scalar",
        help="comma list of scalar, simd, nmodl (default: scalar)",
    )
    c.add_argument("--output", default="out", help="output directory (default: out)")

    a = sub.add_parser("analyze", help="print kernel operation census and class")
    common(a)
    a.add_argument(
        "--flop-byte-threshold",
        type=float,
        default=DEFAULT_THRESHOLD,
        help=f"compute/memory-bound split (default: {DEFAULT_THRESHOLD})",
    )

    r = sub.add_parser("roundtrip", help="parse -> emit -> reparse structural check")
    common(r)

    v = sub.add_parser("verify", help="differential interpreter run vs unoptimized pipeline")
    common(v)
    v.add_argument("--steps", type=int, default=100, help="simulation steps (default: 100)")
    v.add_argument("--seed", type=int, default=42, help="initialization seed (default: 42)")
    v.add_argument("--instances", type=int, default=256, help="instance count (default: 256)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    report: dict = {"command": args.command, "files": []}
    exit_code = EXIT_OK
    try:
        if args.command == "compile":
            exit_code = cmd_compile(args, report)
        elif args.command == "analyze":
            exit_code = cmd_analyze(args, report)
        elif args.command == "roundtrip":
            exit_code = cmd_roundtrip(args, report)
        elif args.command == "verify":
            exit_code = cmd_verify(args, report)
    except CompileError as err:
        for d in err.diagnostics:
            print(d.format(), file=sys.stderr)
        exit_code = EXIT_DIAGNOSTICS
    except OSError as err:
        print(f"modlc: {err}", file=sys.stderr)
        exit_code = EXIT_DIAGNOSTICS
    if args.json_report:
        Path(args.json_report).write_text(json.dumps(report, indent=2, default=str) + "\n")
    return exit_code


def _compile_one(path: str, args) -> "CompileResult":
    result = compile_file(
        path,
        passes=args.passes,
        observe=args.observe,
        use_cse=args.solver_cse,
        pade=args.pade,
    )
    for d in result.sink.items:
        print(d.format(), file=sys.stderr)
    if args.dump_ast == "text":
        print(dump_text(result.optimized_ast))
    elif args.dump_ast == "json":
        print(dump_json(result.optimized_ast))
    return result


def cmd_compile(args, report: dict) -> int:
    backends = [b.strip() for b in args.backend.split(",") if b.strip()]
    unknown = [b for b in backends if b not in ("scalar", "simd", "nmodl")]
    if unknown:
        print(f"modlc: unknown backend(s): {', '.join(unknown)}", file=sys.stderr)
        return EXIT_DIAGNOSTICS
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    for path in args.files:
        result = _compile_one(path, args)
        units = []
        for backend in backends:
            if backend == "scalar":
                units.append(emit_scalar(result.layout))
            elif backend == "simd":
                units.append(emit_simd(result.layout, result.sink))
            else:
                units.append(emit_nmodl(result.optimized_ast, result.layout.mechanism))
        written = []
        for unit in units:
            target = outdir / unit.filename
            target.write_text(unit.text)
            written.append(str(target))
            print(f"wrote {target}")
        report["files"].append(
            {
                "file": path,
                "mechanism": result.layout.mechanism,
                "passes": [r.as_dict() for r in result.reports],
                "diagnostics": [d.format() for d in result.sink.items],
                "outputs": written,
            }
        )
    return EXIT_OK


def cmd_analyze(args, report: dict) -> int:
    for path in args.files:
        result = _compile_one(path, args)
        profiles = profile_mechanism(result.layout)
        print(report_table(profiles, args.flop_byte_threshold))
        report["files"].append(
            {
                "file": path,
                "mechanism": result.layout.mechanism,
                "threshold": args.flop_byte_threshold,
                "profiles": json.loads(report_json(profiles, args.flop_byte_threshold)),
                "passes": [r.as_dict() for r in result.reports],
            }
        )
    return EXIT_OK


def cmd_roundtrip(args, report: dict) -> int:
    failures = 0
    for path in args.files:
        source = Path(path).read_text()
        ast1 = frontend(source, path)
        emitted1 = emit_nmodl_text(ast1)
        ast2 = frontend(emitted1, path + "#reparse")
        emitted2 = emit_nmodl_text(ast2)
        ok = structurally_equal(ast1, ast2) and emitted1 == emitted2
        print(f"{path}: {'round-trip ok' if ok else 'ROUND-TRIP FAILED'}")
        report["files"].append({"file": path, "roundtrip_ok": ok})
        failures += 0 if ok else 1
    return EXIT_OK if failures == 0 else EXIT_DIAGNOSTICS


def cmd_verify(args, report: dict) -> int:
    worst_overall = 0.0
    failures = 0
    for path in args.files:
        baseline = compile_file(path, passes=(), use_cse=args.solver_cse, pade=args.pade)
        optimized = compile_file(
            path,
            passes=args.passes,
            observe=args.observe,
            use_cse=args.solver_cse,
            pade=args.pade,
        )
        for d in optimized.sink.items:
            print(d.format(), file=sys.stderr)
        try:
            deviation = compare_pipelines(
                baseline.layout, optimized.layout, args.instances, args.seed, args.steps
            )
        except InterpError as err:
            print(f"{path}: interpreter error: {err}", file=sys.stderr)
            failures += 1
            report["files"].append({"file": path, "error": str(err)})
            continue
        ok = deviation <= VERIFY_TOLERANCE
        failures += 0 if ok else 1
        worst_overall = max(worst_overall, deviation)
        print(
            f"{path}: max relative deviation {deviation:.3e} over {args.steps} steps "
            f"({'PASS' if ok else 'FAIL'} at {VERIFY_TOLERANCE:g})"
        )
        report["files"].append(
            {"file": path, "deviation": deviation, "pass": ok, "steps": args.steps, "seed": args.seed}
        )
    return EXIT_OK if failures == 0 else EXIT_VERIFY_FAILED


if __name__ == "__main__":
    sys.exit(main())
