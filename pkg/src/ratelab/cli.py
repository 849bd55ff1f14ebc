"""ratelab command line: generate traces, collect logs, build datasets,
train policies, evaluate, compare, and check for drift.

Every command is deterministic given identical inputs and seeds, exits 0 on
success, and on failure writes a one-line JSON diagnostic to stderr and exits
nonzero. A frozen copy of the resolved configuration is written next to each
command's output.
"""
from __future__ import annotations

import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import corpus, evalkit, telemetry
from .gcc import GccController
from .learner import (TrainHyper, bc_train, load_model, save_model, train,
                      PolicyController)
from .oracle import OracleConfig, OracleController, action_set_from_log
from .sim import SimConfig, SessionLog, read_session_log, run_session
from .traces import (BandwidthTrace, ManifestEntry, SyntheticSpec, TraceError,
                     format_trace_csv, gen_synthetic_trace, load_manifest,
                     load_trace_file, split_corpus, write_manifest)


class CliError(RuntimeError):
    pass


# --- config file -------------------------------------------------------------

def parse_config_file(path: str | Path) -> dict[str, dict[str, str]]:
    """Flat TOML-style `key = value` document with optional [section] headers."""
    sections: dict[str, dict[str, str]] = {"": {}}
    current = ""
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        sections[current][key] = value.strip("\"'")
    return sections


def _coerce(value: str, like) -> object:
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def sim_config_from_section(section: dict[str, str], rtt_ms: int, seed: int) -> SimConfig:
    base = SimConfig(rtt_ms=rtt_ms, session_seed=seed)
    overrides = {}
    valid = {f.name: getattr(base, f.name) for f in fields(SimConfig)}
    for key, value in section.items():
        if key not in valid:
            raise CliError(f"unknown [sim] key {key!r}")
        overrides[key] = _coerce(value, valid[key])
    overrides["rtt_ms"] = overrides.get("rtt_ms", rtt_ms)
    overrides["session_seed"] = overrides.get("session_seed", seed)
    return replace(base, **overrides)


def freeze_run_config(args: argparse.Namespace, out_anchor: Path, extra: dict | None = None) -> str:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    payload = {"command": args.command, "resolved": resolved, **(extra or {})}
    # the digest identifies the producing configuration, not where it lands:
    # reruns into a different path must still be byte-identical
    digest_view = {k: v for k, v in resolved.items() if k not in ("out", "_config")}
    blob = json.dumps({"command": args.command, "resolved": digest_view,
                       "config": getattr(args, "_config", {})},
                      sort_keys=True, default=str)
    digest = hashlib.sha256(blob.encode()).hexdigest()[:12]
    payload["digest"] = digest
    target = out_anchor / "run_config.json" if out_anchor.is_dir() else \
        out_anchor.with_name(out_anchor.name + ".runconfig.json")
    target.write_text(json.dumps(payload, sort_keys=True, indent=1, default=str) + "\n")
    return digest


# --- session helpers ----------------------------------------------------------

def _controller_for(spec: str, trace: BandwidthTrace, ref_log_dir: str | None,
                    model_path: str | None):
    if spec == "gcc":
        return GccController()
    if spec == "model":
        return PolicyController(load_model(model_path))
    if spec == "oracle":
        if not ref_log_dir:
            raise CliError("oracle controller needs --ref-logs DIR with reference logs")
        ref = _find_log(Path(ref_log_dir), trace.id)
        cfg = OracleConfig(action_set=action_set_from_log(read_session_log(ref)))
        return OracleController(trace, cfg)
    raise CliError(f"unknown controller {spec!r}")


def _find_log(log_dir: Path, trace_id: str) -> Path:
    for suffix in (".jsonl.gz", ".jsonl"):
        p = log_dir / f"{trace_id}{suffix}"
        if p.exists():
            return p
    raise CliError(f"no session log for trace {trace_id!r} under {log_dir}")


def _run_one(task) -> tuple[str, str]:
    (trace_path, rtt, seed, controller_spec, ref_log_dir, model_path,
     sim_section, out_dir) = task
    trace = load_trace_file(trace_path)
    config = sim_config_from_section(sim_section, rtt_ms=rtt, seed=seed)
    controller = _controller_for(controller_spec, trace, ref_log_dir, model_path)
    log = run_session(trace, controller, config)
    out = Path(out_dir) / f"{trace.id}.jsonl.gz"
    log.write(out)
    return trace.id, str(out)


def run_sessions(entries: list[ManifestEntry], manifest_dir: Path, controller_spec: str,
                 out_dir: Path, jobs: int, sim_section: dict,
                 ref_log_dir: str | None = None, model_path: str | None = None) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = []
    for e in sorted(entries, key=lambda e: e.path):
        trace_path = (manifest_dir / e.path) if not Path(e.path).is_absolute() else Path(e.path)
        tasks.append((str(trace_path), e.rtt_ms, e.seed, controller_spec,
                      ref_log_dir, model_path, sim_section, str(out_dir)))
    results: list[tuple[str, str]] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    return [Path(p) for _, p in sorted(results)]


# --- commands ------------------------------------------------------------------

def cmd_gen_traces(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = json.loads(Path(args.spec).read_text())
    pairs: list[tuple[BandwidthTrace, int]] = []
    if "random" in spec:
        r = spec["random"]
        pairs = corpus.build_corpus(int(r["count"]), seed=args.seed,
                                    duration_ms=int(r.get("duration_ms", 60_000)))
    elif "traces" in spec:
        rng = np.random.default_rng(args.seed)
        for i, t in enumerate(spec["traces"]):
            s = SyntheticSpec(kind=t["kind"], low_kbps=t["low_kbps"],
                              high_kbps=t["high_kbps"],
                              period_ms=int(t.get("period_ms", 10_000)),
                              duration_ms=int(t.get("duration_ms", 60_000)))
            tr = gen_synthetic_trace(s, seed=int(t.get("seed", i)))
            rtt = int(t.get("rtt_ms", corpus.RTT_CHOICES[i % 3]))
            pairs.append((tr, rtt))
    else:
        raise CliError("trace spec file needs a 'random' or 'traces' block")
    entries = []
    for i, (trace, rtt) in enumerate(pairs):
        fname = f"{trace.id}.csv"
        (out_dir / fname).write_text(format_trace_csv(trace))
        entries.append(ManifestEntry(path=fname, rtt_ms=rtt, seed=args.seed * 100_003 + i))
    write_manifest(entries, out_dir / "manifest.json")
    freeze_run_config(args, out_dir)
    print(f"wrote {len(entries)} traces + manifest.json to {out_dir}")
    return 0


def cmd_collect(args) -> int:
    entries = load_manifest(args.manifest)
    out_dir = Path(args.out)
    sim_section = args._config.get("sim", {})
    logs = run_sessions(entries, Path(args.manifest).parent, args.controller, out_dir,
                        jobs=args.jobs, sim_section=sim_section,
                        ref_log_dir=args.ref_logs, model_path=args.model)
    freeze_run_config(args, out_dir)
    print(f"collected {len(logs)} session logs to {out_dir}")
    return 0


def cmd_dataset_build(args) -> int:
    log_dir = Path(args.logs)
    paths = sorted(log_dir.glob("*.jsonl*"))
    if not paths:
        raise CliError(f"no session logs under {log_dir}")
    logs = [read_session_log(p) for p in paths]
    ds = telemetry.dataset_from_logs(logs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = freeze_run_config(args, out)
    ds.meta = {"run_digest": digest}
    telemetry.write_dataset(ds, out)
    print(f"dataset: {len(ds)} transitions from {len(logs)} logs -> {out}")
    return 0


def _hyper_from_args(args) -> TrainHyper:
    return TrainHyper(
        cql_alpha=args.alpha, n_quantiles=args.quantiles,
        discount_gamma=args.gamma, batch_size=args.batch,
        actor_lr=args.actor_lr, critic_lr=args.critic_lr,
        polyak_tau=args.tau, huber_kappa=args.kappa,
        grad_steps=args.steps, eval_every=args.eval_every, seed=args.seed)


def _val_sessions_from(args) -> list:
    if not args.val_manifest:
        return []
    entries = load_manifest(args.val_manifest)
    base = Path(args.val_manifest).parent
    sim_section = args._config.get("sim", {})
    out = []
    for e in entries:
        trace = load_trace_file(base / e.path)
        out.append((trace, sim_config_from_section(sim_section, e.rtt_ms, e.seed)))
    return out


def _write_curve(curve: list[dict], path: Path) -> None:
    keys: list[str] = []
    for point in curve:
        for k in point:
            if k not in keys:
                keys.append(k)
    lines = [",".join(keys)]
    for point in curve:
        lines.append(",".join(str(point.get(k, "")) for k in keys))
    path.write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    ds = telemetry.read_dataset(args.dataset)
    hyper = _hyper_from_args(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = freeze_run_config(args, out)
    t0 = time.perf_counter()
    if args.command == "train-bc":
        bundle = bc_train(ds, hyper)
    else:
        bundle = train(ds, hyper, val_sessions=_val_sessions_from(args))
    bundle.meta = {"run_digest": digest, "dataset": str(args.dataset)}
    save_model(bundle, out)
    _write_curve(bundle.train_curve, out.with_name(out.name + ".curve.csv"))
    n_params = bundle.policy_param_count()
    print(f"trained {hyper.grad_steps} steps in {time.perf_counter() - t0:.0f}s; "
          f"policy params {n_params} ({out.stat().st_size / 1024:.0f} kB) -> {out}")
    return 0


def cmd_eval(args) -> int:
    entries = load_manifest(args.manifest)
    base = Path(args.manifest).parent
    sim_section = args._config.get("sim", {})
    controller_spec = "model" if args.model else args.controller
    if controller_spec is None:
        raise CliError("pass --model FILE or --controller gcc|oracle")
    reports = []
    tasks = []
    for e in sorted(entries, key=lambda e: e.path):
        trace = load_trace_file(base / e.path)
        config = sim_config_from_section(sim_section, e.rtt_ms, e.seed)
        tasks.append((trace, config, e))
    def _one(item):
        trace, config, e = item
        controller = _controller_for(controller_spec, trace, args.ref_logs, args.model)
        log = run_session(trace, controller, config)
        return evalkit.qoe(log, labels={"rtt_ms": e.rtt_ms})
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_eval_worker,
                                    [(controller_spec, args.ref_logs, args.model,
                                      str(base / e.path), e.rtt_ms, e.seed, sim_section)
                                     for _, _, e in tasks]))
    else:
        reports = [_one(t) for t in tasks]
    reports.sort(key=lambda r: r.trace_id)
    summary = evalkit.summarize(reports, subset_keys=("rtt_ms",))
    out = Path(args.out)
    digest = freeze_run_config(args, out)
    evalkit.write_report(reports, summary, out,
                         meta={"controller": controller_spec, "run_digest": digest})
    if args.per_trace_csv:
        lines = ["trace_id,bitrate_kbps,freeze_rate,fps,frame_delay_ms"]
        for r in reports:
            lines.append(f"{r.trace_id},{r.avg_video_bitrate_kbps:.3f},"
                         f"{r.freeze_rate:.6f},{r.frame_rate_fps:.3f},"
                         f"{r.mean_frame_delay_ms:.3f}")
        Path(args.per_trace_csv).write_text("\n".join(lines) + "\n")
    p50 = summary.percentiles["avg_video_bitrate_kbps"]["P50"]
    print(f"evaluated {len(reports)} sessions; P50 bitrate {p50:.0f} kbps -> {out}")
    return 0


def _eval_worker(task):
    (controller_spec, ref_logs, model_path, trace_path, rtt, seed, sim_section) = task
    trace = load_trace_file(trace_path)
    config = sim_config_from_section(sim_section, rtt, seed)
    controller = _controller_for(controller_spec, trace, ref_logs, model_path)
    log = run_session(trace, controller, config)
    return evalkit.qoe(log, labels={"rtt_ms": rtt})


def cmd_compare(args) -> int:
    _, summary_a = evalkit.read_report(args.a)
    _, summary_b = evalkit.read_report(args.b)
    def as_summary(d) -> evalkit.CorpusSummary:
        return evalkit.CorpusSummary(n_sessions=d["n_sessions"],
                                     percentiles=d["percentiles"], subsets={})
    delta = evalkit.compare(as_summary(summary_a), as_summary(summary_b))
    out = Path(args.out)
    digest = freeze_run_config(args, out)
    out.write_text(json.dumps({"format_version": 1, "kind": "compare_report",
                               "run_digest": digest, "a": str(args.a), "b": str(args.b),
                               "delta": delta}, sort_keys=True, indent=1) + "\n")
    print(f"compare report -> {out}")
    return 0


def cmd_drift(args) -> int:
    ds_a = telemetry.read_dataset(args.a)
    ds_b = telemetry.read_dataset(args.b)
    report = telemetry.drift_score(ds_a, ds_b, threshold=args.threshold)
    out = Path(args.out)
    digest = freeze_run_config(args, out)
    out.write_text(json.dumps({
        "format_version": 1, "kind": "drift_report", "run_digest": digest,
        "per_feature": report.per_feature, "max_statistic": report.max_statistic,
        "threshold": report.threshold, "retrain": report.retrain,
    }, sort_keys=True, indent=1) + "\n")
    print(f"max KS {report.max_statistic:.3f} "
          f"({'retrain' if report.retrain else 'no retrain'}) -> {out}")
    return 0


def cmd_oracle(args) -> int:
    trace = load_trace_file(args.trace)
    ref = read_session_log(args.ref_log)
    cfg = OracleConfig(action_set=action_set_from_log(ref),
                       horizon_ms=args.horizon, safety_factor=args.safety_factor)
    sim_section = args._config.get("sim", {})
    config = sim_config_from_section(sim_section, args.rtt, args.seed)
    log = run_session(trace, OracleController(trace, cfg), config)
    out = Path(args.out)
    log.write(out)
    freeze_run_config(args, out)
    r = evalkit.qoe(log)
    print(f"oracle on {trace.id}: bitrate {r.avg_video_bitrate_kbps:.0f} kbps, "
          f"freeze {r.freeze_rate:.4f} -> {out}")
    return 0


def cmd_split(args) -> int:
    entries = load_manifest(args.manifest)
    base = Path(args.manifest).parent
    traces = [load_trace_file(base / e.path) for e in entries]
    by_id = {t.id: e for t, e in zip(traces, entries)}
    train_t, val_t, test_t = split_corpus(traces, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, group in (("train", train_t), ("val", val_t), ("test", test_t)):
        write_manifest([by_id[t.id] for t in group], out_dir / f"{name}.json")
    freeze_run_config(args, out_dir)
    print(f"split {len(traces)} -> {len(train_t)}/{len(val_t)}/{len(test_t)} "
          f"manifests in {out_dir}")
    return 0


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ratelab",
                                description="rate-control experiment pipeline")
    p.add_argument("--config", help="key=value config file; flags override it")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-traces", help="generate synthetic traces + manifest")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_traces)

    c = sub.add_parser("collect", help="run sessions over a manifest, write logs")
    c.add_argument("--manifest", required=True)
    c.add_argument("--controller", default="gcc", choices=["gcc", "oracle", "model"])
    c.add_argument("--model")
    c.add_argument("--ref-logs")
    c.add_argument("--out", required=True)
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_collect)

    d = sub.add_parser("dataset", help="dataset operations")
    dsub = d.add_subparsers(dest="dataset_command", required=True)
    db = dsub.add_parser("build", help="logs dir -> transition dataset file")
    db.add_argument("--logs", required=True)
    db.add_argument("--out", required=True)
    db.set_defaults(func=cmd_dataset_build)

    for name in ("train", "train-bc"):
        t = sub.add_parser(name, help="train a policy from a dataset")
        t.add_argument("--dataset", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--alpha", type=float, default=0.01)
        t.add_argument("--quantiles", type=int, default=128)
        t.add_argument("--gamma", type=float, default=0.99)
        t.add_argument("--batch", type=int, default=256)
        t.add_argument("--actor-lr", type=float, default=1e-4)
        t.add_argument("--critic-lr", type=float, default=3e-4)
        t.add_argument("--tau", type=float, default=0.005)
        t.add_argument("--kappa", type=float, default=1.0)
        t.add_argument("--steps", type=int, default=50_000)
        t.add_argument("--eval-every", type=int, default=2_500)
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--val-manifest")
        t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a controller over a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--model")
    e.add_argument("--controller", choices=["gcc", "oracle"])
    e.add_argument("--ref-logs")
    e.add_argument("--out", required=True)
    e.add_argument("--per-trace-csv")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    cp = sub.add_parser("compare", help="delta report between two QoE reports")
    cp.add_argument("--a", required=True)
    cp.add_argument("--b", required=True)
    cp.add_argument("--out", required=True)
    cp.set_defaults(func=cmd_compare)

    dr = sub.add_parser("drift", help="KS drift between two datasets")
    dr.add_argument("--a", required=True)
    dr.add_argument("--b", required=True)
    dr.add_argument("--out", required=True)
    dr.add_argument("--threshold", type=float, default=0.2)
    dr.set_defaults(func=cmd_drift)

    o = sub.add_parser("oracle", help="run the oracle controller on one trace")
    o.add_argument("--trace", required=True)
    o.add_argument("--ref-log", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--rtt", type=int, default=100)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--horizon", type=int, default=1000)
    o.add_argument("--safety-factor", type=float, default=0.95)
    o.set_defaults(func=cmd_oracle)

    s = sub.add_parser("split", help="split a manifest 60/20/20")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        config = parse_config_file(known.config) if known.config else {}
        parser = build_parser()
        if config:
            # config sections (named after subcommands) supply defaults; flags
            # given on the command line override them by normal argparse rules
            for action in parser._subparsers._group_actions:
                for name, subp in action.choices.items():
                    section = config.get(name, {})
                    if not section:
                        continue
                    sub_defaults = {a.dest: a.default for a in subp._actions}
                    coerced = {}
                    for key, val in section.items():
                        dest = key.replace("-", "_")
                        if dest in sub_defaults:
                            like = sub_defaults[dest]
                            coerced[dest] = _coerce(val, like if like is not None else "")
                    subp.set_defaults(**coerced)
        args = parser.parse_args(argv)
        args._config = config
        return args.func(args)
    except (CliError, TraceError, ValueError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)})
                         + "\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
