import json
import os

import pytest

from skrefine import cli


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def config(tmp_path, capsys):
    run(capsys, "sample", tmp_path / "src")
    code, out, _ = run(capsys, "gen", tmp_path / "src" / "policy.xml", tmp_path / "cfg")
    assert code == 0 and "wrote" in out
    return tmp_path / "cfg"


def test_gen_writes_artifacts(config):
    for rel in ("policy.xml", "bpolicy.xml", "image.bin", "params.json", "pts/sub1.pt", "pts/sub4.pt"):
        assert (config / rel).exists(), rel


def test_gen_bad_policy_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.xml"
    bad.write_text("<scheduling tick_rate='1'></scheduling>")
    code, _, err = run(capsys, "gen", bad, tmp_path / "out")
    assert code == cli.EXIT_INVALID and "no major frames" in err.lower().replace("-", " ")


def test_gen_missing_policy_exit_3(tmp_path, capsys):
    code, _, _ = run(capsys, "gen", tmp_path / "nope.xml", tmp_path / "out")
    assert code == cli.EXIT_IO


def test_check_clean_with_naive(config, tmp_path, capsys):
    out_json = tmp_path / "r.json"
    code, out, _ = run(capsys, "check", "--config", config, "--naive", "0x1000000", "--json", out_json)
    assert code == 0
    assert "Check Passed" in out and "✓" in out and "✗" not in out
    data = json.loads(out_json.read_text())
    assert data["passed"] and data["naive"]["agree"]
    assert set(data["conditions"]) == {"R1", "R2", "R3", "R4", "R5"}


def test_check_with_five_paths(config, capsys):
    code, _, _ = run(
        capsys,
        "check",
        "--policy", config / "policy.xml",
        "--bpolicy", config / "bpolicy.xml",
        "--ptdir", config / "pts",
        "--image", config / "image.bin",
        "--params", config / "params.json",
    )
    assert code == 0


def test_check_undeclared_sharing_fails_r1(tmp_path, capsys):
    run(capsys, "sample", tmp_path / "src")
    run(capsys, "gen", tmp_path / "src" / "policy.xml", tmp_path / "cfg", "--fault", "undeclared_sharing")
    code, out, _ = run(capsys, "check", "--config", tmp_path / "cfg")
    assert code == cli.EXIT_FAIL
    row = next(line for line in out.splitlines() if line.startswith("R1"))
    assert "✗" in row and "Illegal sharing detected." in out


def test_check_missing_files_exit_3(tmp_path, capsys):
    code, _, _ = run(capsys, "check", "--config", tmp_path)
    assert code == cli.EXIT_IO


def test_check_naive_disagreement_exit_4(config, capsys, monkeypatch):
    from skrefine import checker

    real = checker.naive_check

    def lying(*a, **k):
        rep = real(*a, **k)
        rep.findings.append(checker.Finding("R2", "forced"))
        return rep

    monkeypatch.setattr(checker, "naive_check", lying)
    code, _, _ = run(capsys, "check", "--config", config, "--naive", "0x1000000")
    assert code == cli.EXIT_ORACLE


def test_simulate_clean(config, capsys):
    code, out, _ = run(capsys, "simulate", "--config", config, "--steps", 2000, "--seed", 3)
    assert code == 0 and json.loads(out)["passed"]


def test_simulate_refuses_and_force(tmp_path, capsys):
    run(capsys, "sample", tmp_path / "src")
    run(capsys, "gen", tmp_path / "src" / "policy.xml", tmp_path / "cfg", "--fault", "pt_redirect")
    code, _, _ = run(capsys, "simulate", "--config", tmp_path / "cfg")
    assert code == cli.EXIT_REFUSED
    trace = tmp_path / "t.jsonl"
    trace.write_text('{"op":"exec","cpu":0}\n' * 20)
    dump = tmp_path / "dump"
    code, out, _ = run(capsys, "simulate", "--config", tmp_path / "cfg", "--trace", trace, "--force", "--dump-on-fail", dump)
    assert code == cli.EXIT_FAIL
    assert json.loads(out)["kind"] == "glue"
    assert (dump / "abstract.json").exists() and (dump / "concrete.json").exists()


def test_trace_replay_is_deterministic(config, tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    trace.write_text(
        "\n".join(
            ['{"op":"tick","cpu":0}', '{"op":"exec","cpu":1}', '{"op":"interrupt","cpu":0,"vector":33}']
            + ['{"op":"exec","cpu":1}', '{"op":"tick","cpu":1}'] * 40
        )
    )
    logs = []
    for i in range(2):
        log = tmp_path / f"log{i}.jsonl"
        code, _, _ = run(capsys, "simulate", "--config", config, "--trace", trace, "--log", log)
        assert code == 0
        logs.append(log.read_text())
    assert logs[0] == logs[1]
    first = json.loads(logs[0].splitlines()[0])
    assert first["op"] == "init" and first["glue"]["g1"] is True


def test_bad_trace_exit_3(config, tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    trace.write_text('{"op":"reboot"}\n')
    code, _, _ = run(capsys, "simulate", "--config", config, "--trace", trace)
    assert code == cli.EXIT_IO


def test_seed_env_overrides(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("SKREFINE_SEED", "7")
    run(capsys, "sample", tmp_path / "a", "--kind", "random", "--seed", 1)
    monkeypatch.delenv("SKREFINE_SEED")
    run(capsys, "sample", tmp_path / "b", "--kind", "random", "--seed", 7)
    run(capsys, "sample", tmp_path / "c", "--kind", "random", "--seed", 1)
    a, b, c = ((tmp_path / d / "policy.xml").read_text() for d in "abc")
    assert a == b and a != c


def test_fuzz_clean_and_faults(capsys):
    code, out, _ = run(capsys, "fuzz", "--configs", 4, "--steps", 300, "--seed", 1)
    assert code == 0 and json.loads(out)["passed"] == 4
    code, out, _ = run(capsys, "fuzz", "--configs", 6, "--steps", 100, "--seed", 2, "--inject-random-fault")
    summary = json.loads(out)
    assert code == 0 and summary["unexpected"] == [] and sum(summary["faults"].values()) == 6


def test_fuzz_zero_configs(capsys):
    code, out, _ = run(capsys, "fuzz", "--configs", 0)
    assert code == 0 and json.loads(out)["configs"] == 0


def test_fuzz_workers(capsys):
    code, out, _ = run(capsys, "fuzz", "--configs", 2, "--steps", 100, "--workers", 2)
    assert code == 0 and json.loads(out)["passed"] == 2
