import json

import pytest

from modlc.cli import main


def run(argv):
    return main([str(a) for a in argv])


def test_compile_writes_all_backends(tmp_path, cat_path):
    out = tmp_path / "out"
    code = run(["compile", cat_path, "--backend", "scalar,simd,nmodl", "--output", out])
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["cat.opt.mod", "cat.scalar.c-like", "cat.simd.c-like"]


def test_compile_missing_file_exits_1(tmp_path, capsys):
    code = run(["compile", tmp_path / "missing.mod"])
    assert code == 1
    assert "missing.mod" in capsys.readouterr().err


def test_compile_rejects_unknown_backend(cat_path, capsys):
    code = run(["compile", cat_path, "--backend", "cuda"])
    assert code == 1
    assert "unknown backend" in capsys.readouterr().err


def test_syntax_error_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.mod"
    bad.write_text("NEURON { SUFFIX }")
    code = run(["compile", bad, "--output", tmp_path / "o"])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_verify_passes_on_corpus_file(cat_path, capsys):
    code = run(["verify", cat_path, "--steps", 20, "--seed", 42, "--instances", 64])
    assert code == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "deviation" in out


def test_verify_identical_invocations_identical_output(cat_path, capsys):
    run(["verify", cat_path, "--steps", 10, "--instances", 32])
    first = capsys.readouterr().out
    run(["verify", cat_path, "--steps", 10, "--instances", 32])
    second = capsys.readouterr().out
    assert first == second


def test_roundtrip_command(corpus, capsys):
    code = run(["roundtrip", *corpus])
    assert code == 0
    out = capsys.readouterr().out
    assert out.count("round-trip ok") == len(corpus)


def test_analyze_with_json_report(tmp_path, cat_path, capsys):
    report = tmp_path / "report.json"
    code = run(["analyze", cat_path, "--json-report", report])
    assert code == 0
    assert "state_update" in capsys.readouterr().out
    payload = json.loads(report.read_text())
    assert payload["command"] == "analyze"
    profiles = payload["files"][0]["profiles"]
    assert any(p["kernel"] == "state_update" for p in profiles)


def test_compile_json_report_records_passes(tmp_path, cat_path):
    report = tmp_path / "run.json"
    code = run(
        ["compile", cat_path, "--output", tmp_path / "o", "--json-report", report]
    )
    assert code == 0
    payload = json.loads(report.read_text())
    info = payload["files"][0]
    assert [p["pass"] for p in info["passes"]] == ["fold", "unroll", "inline", "localize"]
    assert info["mechanism"] == "cat"


def test_pass_selection_none(tmp_path, cat_path):
    report = tmp_path / "run.json"
    code = run(
        [
            "compile",
            cat_path,
            "--output",
            tmp_path / "o",
            "--passes",
            "none",
            "--json-report",
            report,
        ]
    )
    assert code == 0
    assert json.loads(report.read_text())["files"][0]["passes"] == []


def test_observe_flag_blocks_localization(tmp_path, cat_path):
    report = tmp_path / "run.json"
    run(
        [
            "compile",
            cat_path,
            "--output",
            tmp_path / "o",
            "--observe",
            "minf,mtau",
            "--json-report",
            report,
        ]
    )
    passes = json.loads(report.read_text())["files"][0]["passes"]
    localized = next(p for p in passes if p["pass"] == "localize")["symbols_affected"]
    assert "minf" not in localized and "mtau" not in localized


def test_dump_ast_prints_tree(cat_path, capsys):
    run(["analyze", cat_path, "--dump-ast", "text"])
    out = capsys.readouterr().out
    assert "Program" in out and "NeuronBlock" in out


def test_byte_identical_outputs_across_runs(tmp_path, cat_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    run(["compile", cat_path, "--backend", "scalar,simd,nmodl", "--output", out1])
    run(["compile", cat_path, "--backend", "scalar,simd,nmodl", "--output", out2])
    for name in ("cat.scalar.c-like", "cat.simd.c-like", "cat.opt.mod"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_pade_flag_changes_state_kernel(tmp_path, cat_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    run(["compile", cat_path, "--output", out1])
    run(["compile", cat_path, "--output", out2, "--pade", "on"])
    plain = (out1 / "cat.scalar.c-like").read_text()
    pade = (out2 / "cat.scalar.c-like").read_text()
    assert plain != pade
    assert "fabs(2" in pade  # pole guard emitted
