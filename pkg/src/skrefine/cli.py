"""Command-line entry point: sample, gen, check, simulate, fuzz.

Exit codes
  0  success / all checks pass
  1  a check failed or the machines diverged
  2  policy validation or generation error
  3  I/O error reading inputs
  4  fast checker and naive oracle disagree
  5  simulate refused: condition R does not hold (use --force to override)
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import checker, harness, synth, toolchain
from .policy import PolicyError, load_policy, write_policy
from .refinement import OperationCall

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_IO, EXIT_ORACLE, EXIT_REFUSED = 0, 1, 2, 3, 4, 5


def _seed(args) -> int:
    env = os.environ.get("SKREFINE_SEED")
    return int(env) if env not in (None, "") else args.seed


def _err(msg: str):
    print(msg, file=sys.stderr)


# --- sample ---------------------------------------------------------------------------

SAMPLES = {
    "two-cpu": lambda seed: synth.two_cpu_policy(seed),
    "random": lambda seed: synth.random_policy(np.random.default_rng(seed)),
    "throughput": lambda seed: synth.throughput_policy(seed),
}


def cmd_sample(args) -> int:
    p = SAMPLES[args.kind](_seed(args))
    print(write_policy(p, args.outdir))
    return EXIT_OK


# --- gen ------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    try:
        p = load_policy(args.policy)
        art = toolchain.generate(p, args.fault, rng=np.random.default_rng(_seed(args)))
    except PolicyError as exc:
        for d in exc.diagnostics:
            _err(f"{args.policy}: {d}")
        return EXIT_INVALID
    except toolchain.GenerationError as exc:
        _err(f"generation failed: {exc}")
        return EXIT_INVALID
    except OSError as exc:
        _err(f"cannot read input: {exc}")
        return EXIT_IO
    toolchain.write_artifacts(art, args.outdir)
    msg = f"wrote {args.outdir}"
    if art.fault:
        msg += f" with fault {art.fault}: {art.fault_detail}"
    print(msg)
    return EXIT_OK


# --- check ----------------------------------------------------------------------------


def _load(args) -> toolchain.Artifacts:
    if args.config:
        return toolchain.load_config(args.config)
    missing = [f for f in ("policy", "bpolicy", "ptdir", "image", "params") if getattr(args, f) is None]
    if missing:
        raise ValueError(f"missing --{', --'.join(missing)} (or give --config DIR)")
    return toolchain.load_artifacts(args.policy, args.bpolicy, args.ptdir, args.image, args.params)


def _mib(n: int) -> str:
    return f"{n / (1 << 20):.2f}M"


def render_table(art: toolchain.Artifacts, report: checker.ConditionReport, seconds: float) -> str:
    ok = "✓" if report.ok else "✗"
    pmem = sum(c.size for c in art.bpolicy.physical)
    rows = [
        f"{'Sub':>4} {'CPU':>4} {'PMem':>9} {'Image':>9} {'Time':>8}  Check Passed",
        f"{len(art.policy.subjects):>4} {art.policy.ncpus:>4} {_mib(pmem):>9} {_mib(len(art.image)):>9} "
        f"{seconds:>7.2f}s  {ok}",
        "",
        f"{'Cond':<5} {'ms':>9}  Passed  Findings",
    ]
    for cond in report.checked:
        n = sum(f.condition == cond for f in report.findings)
        mark = "✓" if report.passed[cond] else "✗"
        rows.append(f"{cond:<5} {report.millis.get(cond, 0.0):>9.1f}  {mark:^6}  {n}")
    for f in report.findings[:20]:
        rows.append(f"  {f}")
    if len(report.findings) > 20:
        rows.append(f"  ... {len(report.findings) - 20} more")
    return "\n".join(rows)


def cmd_check(args) -> int:
    try:
        art = _load(args)
    except (OSError, ValueError, PolicyError, KeyError) as exc:
        _err(f"cannot load artifacts: {exc}")
        return EXIT_IO
    t0 = time.perf_counter()
    report = checker.check_artifacts(art)
    seconds = time.perf_counter() - t0
    print(render_table(art, report, seconds))
    out = {"passed": report.ok, "seconds": seconds, "conditions": report.to_json()}
    code = EXIT_OK if report.ok else EXIT_FAIL
    if args.naive is not None:
        try:
            naive = checker.naive_check(art.bpolicy, art.pts, art.image, args.naive, art.read_file)
        except ValueError as exc:
            _err(f"naive oracle not applicable: {exc}")
            return EXIT_IO
        agree = all(naive.passed[c] == report.passed[c] for c in naive.checked)
        out["naive"] = {"agree": agree, "conditions": naive.to_json()}
        if not agree:
            _err(f"naive oracle disagrees: fast {report.passed} vs naive {naive.passed}")
            code = EXIT_ORACLE
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(out, fh, indent=1)
    return code


# --- simulate --------------------------------------------------------------------------


def parse_trace(lines) -> list[OperationCall]:
    """JSON lines: {"op": "exec"|"tick", "cpu": c} or {"op": "interrupt", "cpu": c, "vector": v}."""
    calls = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        d = json.loads(line)
        op = d["op"]
        if op in ("exec", "tick"):
            calls.append(OperationCall(op, int(d["cpu"])))
        elif op == "interrupt":
            calls.append(OperationCall("interrupt", (int(d["cpu"]), int(d["vector"]))))
        elif op == "init":
            calls.append(OperationCall("init"))
        else:
            raise ValueError(f"line {n}: unknown op {op!r}")
    return calls


def _call_json(call: OperationCall) -> dict:
    if call.name == "interrupt":
        return {"op": "interrupt", "cpu": call.input[0], "vector": call.input[1]}
    if call.input is None:
        return {"op": call.name}
    return {"op": call.name, "cpu": call.input}


def cmd_simulate(args) -> int:
    try:
        art = toolchain.load_config(args.config)
        trace = None
        if args.trace:
            with open(args.trace) as fh:
                trace = parse_trace(fh)
    except (OSError, ValueError, PolicyError, KeyError) as exc:
        _err(f"cannot load inputs: {exc}")
        return EXIT_IO

    log = None
    if args.log == "-":
        log = sys.stdout
    elif args.log:
        log = open(args.log, "w")

    def observer(k, call, out_a, out_c, report):
        if log is not None:
            rec = {"step": k, **_call_json(call), "abstract": out_a, "concrete": out_c, "glue": report.summary()}
            log.write(json.dumps(rec, sort_keys=True) + "\n")

    machines = []
    try:
        verdict = harness.lockstep_run(
            art,
            trace,
            steps=args.steps,
            seed=_seed(args),
            force=args.force,
            observer=observer,
            machines=machines,
        )
    except harness.ConditionRFailed as exc:
        _err(f"refusing to simulate: {exc}")
        print(json.dumps({"passed": False, "refused": sorted(exc.report.failed_conditions())}))
        return EXIT_REFUSED
    finally:
        if log is not None and log is not sys.stdout:
            log.close()

    summary = {"passed": verdict.passed, "steps": len(verdict.outputs) or None}
    if not verdict:
        summary.update(step=verdict.step, kind=verdict.kind, reason=verdict.reason)
        if args.dump_on_fail:
            os.makedirs(args.dump_on_fail, exist_ok=True)
            for name, m in zip(("abstract", "concrete"), machines):
                with open(os.path.join(args.dump_on_fail, f"{name}.json"), "w") as fh:
                    json.dump(m.state.snapshot(), fh, indent=1, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if verdict else EXIT_FAIL


# --- fuzz ----------------------------------------------------------------------------------


def fuzz_one(seed: int, steps: int, inject: bool) -> dict:
    """gen -> check -> simulate for one random policy; returns a result record."""
    rng = np.random.default_rng(seed)
    p = synth.random_policy(rng)
    fault = None
    art = None
    if inject:
        for name in rng.permutation(toolchain.PRIMARY_FAULTS):
            try:
                art = toolchain.generate(p, str(name), rng=rng)
                fault = str(name)
                break
            except toolchain.FaultNotApplicable:
                continue
    if art is None:
        art = toolchain.generate(p, rng=rng)
    report = checker.check_artifacts(art)
    failed = sorted(report.failed_conditions())
    rec = {"seed": seed, "fault": fault, "failed": failed, "subjects": len(p.subjects), "cpus": p.ncpus}
    if fault is not None:
        rec["expected"] = failed == [toolchain.FAULTS[fault]]
        return rec
    if failed:
        rec["expected"] = False
        return rec
    verdict = harness.lockstep_run(art, steps=steps, seed=seed)
    rec["lockstep"] = str(verdict)
    rec["expected"] = bool(verdict)
    return rec


def cmd_fuzz(args) -> int:
    base = _seed(args)
    seeds = [base * 100_003 + i for i in range(args.configs)]
    if args.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            records = list(pool.map(fuzz_one, seeds, [args.steps] * len(seeds), [args.inject_random_fault] * len(seeds)))
    else:
        records = [fuzz_one(s, args.steps, args.inject_random_fault) for s in seeds]
    unexpected = [r for r in records if not r["expected"]]
    summary = {
        "configs": len(records),
        "passed": sum(r["expected"] for r in records),
        "unexpected": unexpected,
        "faults": {f: sum(r["fault"] == f for r in records) for f in toolchain.PRIMARY_FAULTS} if args.inject_random_fault else {},
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_FAIL if unexpected else EXIT_OK


# --- argument parsing -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="skrefine", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("sample", help="write a ready-made policy and its guest programs")
    sp.add_argument("outdir")
    sp.add_argument("--kind", choices=sorted(SAMPLES), default="two-cpu")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_sample)

    g = sub.add_parser("gen", help="generate artifacts from a policy")
    g.add_argument("policy")
    g.add_argument("outdir")
    g.add_argument("--fault", choices=sorted(toolchain.FAULTS))
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("check", help="check condition R on generated artifacts")
    c.add_argument("--config", help="directory written by gen (alternative to the five paths)")
    c.add_argument("--policy")
    c.add_argument("--bpolicy")
    c.add_argument("--ptdir")
    c.add_argument("--image")
    c.add_argument("--params")
    c.add_argument("--naive", type=lambda s: int(s, 0), metavar="BOUND", help="also run the brute-force oracle below BOUND")
    c.add_argument("--json", metavar="OUT")
    c.set_defaults(func=cmd_check)

    s = sub.add_parser("simulate", help="run both machines in lock-step")
    s.add_argument("--config", required=True)
    s.add_argument("--steps", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trace", help="JSON-lines trace file instead of a random trace")
    s.add_argument("--force", action="store_true", help="run even if condition R fails")
    s.add_argument("--log", help="write a JSON-lines step log here ('-' for stdout)")
    s.add_argument("--dump-on-fail", metavar="DIR", help="write both state snapshots on divergence")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fuzz", help="random policies through gen, check and simulate")
    f.add_argument("--configs", type=int, default=20)
    f.add_argument("--steps", type=int, default=2000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--inject-random-fault", action="store_true")
    f.add_argument("--workers", type=int, default=1)
    f.set_defaults(func=cmd_fuzz)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
