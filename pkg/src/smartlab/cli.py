"""Command-line entry point.

Every run writes ``manifest.json`` into the output directory with the
resolved configuration, seed, timestamps and SHA-256 digests of inputs and
outputs.  Errors are reported on stderr as one JSON object; exit code 1
means a configuration or validation problem, 2 a runtime failure.
"""
import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import os
import platform
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .core import ARMS, Arm, ResponderCategory, read_records, write_records
from .datagen import DgmConfig, TrialData, simulate_arrays
from .dtr import QLearner, optimal_value, policy_value
from .imbalance import METRICS, ImbalanceConfig, run_imbalance
from .lasso import LassoCVCD
from .parallel import resolve_seed
from .power import PRESETS, PowerConfig, confirm_at, run_power
from .randomizer import (CODINGS, STAGE1_FACTORS, AuditLog, SmartRandomizer,
                         config_for_context, read_audit_log, replay_audit_log)

MANIFEST = "manifest.json"
SECTIONS = ("dgm", "power", "imbalance", "randomizer", "estimate", "simulate", "value")
TOP_LEVEL_KEYS = ("seed", "threads")
OWN_KEYS = {
    "randomizer": {"rho": float, "coding": str},
    "estimate": {"pairs": str, "cv_rule": str, "n_folds": int},
    "simulate": {"n": int, "stage1": str},
    "value": {"n_mc": int, "delta": float},
}


class ConfigError(ValueError):
    """Bad flags, config file or input data (exit code 1)."""


class ReplayMismatch(RuntimeError):
    """An audit log or manifest did not verify (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section, table, allowed):
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def load_config(path):
    """Parse a TOML config; unknown sections or keys are errors."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    _check_keys("top level", cfg, TOP_LEVEL_KEYS + SECTIONS)
    allowed = {
        "dgm": _field_names(DgmConfig),
        "power": _field_names(PowerConfig) - {"dgm", "master_seed", "threads"},
        "imbalance": _field_names(ImbalanceConfig) - {"master_seed", "threads"},
        **{k: set(v) for k, v in OWN_KEYS.items()},
    }
    for section in SECTIONS:
        table = cfg.get(section, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        _check_keys(section, table, allowed[section])
    return cfg


@dataclasses.dataclass
class Context:
    args: argparse.Namespace
    cfg: dict
    seed: int
    threads: int
    out_dir: Path
    preset: str
    inputs: list = dataclasses.field(default_factory=list)
    outputs: list = dataclasses.field(default_factory=list)
    resolved: dict = dataclasses.field(default_factory=dict)
    extra: dict = dataclasses.field(default_factory=dict)

    def section(self, name):
        return dict(self.cfg.get(name, {}))

    def own(self, name, key, default):
        value = self.cfg.get(name, {}).get(key, default)
        try:
            return OWN_KEYS[name][key](value) if value is not None else None
        except (TypeError, ValueError):
            raise ConfigError(f"[{name}] {key} has the wrong type: {value!r}") from None

    def path(self, name):
        p = self.out_dir / name
        self.outputs.append(p)
        return p

    def input(self, path):
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"input file not found: {path}")
        self.inputs.append(p)
        return p


def _build(cls, values, what):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{what}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from None


def _dgm(ctx):
    return _build(DgmConfig, ctx.section("dgm"), "[dgm]")


def _parse_arm(text, what):
    text = str(text).strip()
    if text in ("", "-1", "none", "None"):
        return None
    try:
        return Arm(int(text))
    except ValueError:
        pass
    try:
        return Arm[text.upper()]
    except KeyError:
        raise ConfigError(f"{what}: unknown arm {text!r}") from None


# ---------------------------------------------------------------------------
# output helpers


def _write_csv(path, rows, header=None):
    header = header or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# subcommands


def _randomizer_settings(ctx):
    rho = ctx.own("randomizer", "rho", 2.0 / 3.0)
    coding = ctx.own("randomizer", "coding", "own_level")
    if coding not in CODINGS:
        raise ConfigError(f"[randomizer] coding must be one of {CODINGS}, got {coding!r}")
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"[randomizer] rho must lie in (0, 1], got {rho}")
    return rho, coding


def cmd_randomize(ctx):
    rho, coding = _randomizer_settings(ctx)
    src = ctx.input(ctx.args.input)
    with open(src, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("id",) + STAGE1_FACTORS if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{src}: missing column(s) {', '.join(missing)}")
        rows = list(reader)
    rng = np.random.default_rng(ctx.seed)
    audit = AuditLog(ctx.path("audit_log.csv"))
    rand = SmartRandomizer(rng, rho=rho, audit_log=audit, coding=coding)
    out = []
    for i, row in enumerate(rows, start=2):
        where = f"{src}:{i}"
        try:
            pid = int(row["id"])
            site = int(row.get("site") or 0)
            x = tuple(int(row[f]) for f in STAGE1_FACTORS)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        if any(v not in (0, 1) for v in x):
            raise ConfigError(f"{where}: factors are coded 0/1")
        excluded = _parse_arm(row.get("excluded", ""), where)
        responder = (row.get("responder") or "").strip()
        try:
            if not responder:
                a1 = rand.stage1(pid, x, excluded, site)
                out.append({"id": pid, "stage": 1, "a1": int(a1), "a2_kind": "",
                            "a2_new": "", "action": a1.name})
                continue
            a1 = _parse_arm(row.get("a1", ""), where)
            if a1 is None:
                raise ConfigError(f"{where}: stage-2 rows need a1")
            cat = ResponderCategory(int(responder))
            action = rand.stage2(pid, x, a1, cat, excluded, site)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        out.append({"id": pid, "stage": 2, "a1": int(a1), "a2_kind": int(action.kind),
                    "a2_new": "" if action.new_arm is None else int(action.new_arm),
                    "action": str(action)})
    _write_csv(ctx.path("assignments.csv"), out,
               ["id", "stage", "a1", "a2_kind", "a2_new", "action"])
    ctx.resolved = {"rho": rho, "coding": coding, "uniforms_drawn": rand.draws}
    return {"participants": len(out)}


def cmd_replay(ctx):
    if ctx.args.manifest:
        return _replay_manifest(ctx)
    if not ctx.args.audit_log:
        raise ConfigError("replay needs --audit-log or --manifest")
    rho, coding = _randomizer_settings(ctx)
    log = ctx.input(ctx.args.audit_log)
    try:
        rows = read_audit_log(log)
        configs = {ctx_name: config_for_context(ctx_name, rho, coding)
                   for ctx_name in {r["context"] for r in rows}}
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rng = None if ctx.args.no_stream_check else np.random.default_rng(ctx.seed)
    problems = replay_audit_log(rows, configs, rng)
    report = {"rows": len(rows), "verified": not problems, "problems": problems}
    _write_json(ctx.path("replay_report.json"), report)
    ctx.resolved = {"rho": rho, "coding": coding, "stream_checked": rng is not None}
    if problems:
        raise ReplayMismatch(f"{len(problems)} audit-log row(s) failed verification; "
                             f"first: {problems[0]}")
    return report


def _replay_manifest(ctx):
    src = ctx.input(ctx.args.manifest)
    with open(src) as fh:
        man = json.load(fh)
    for rec in man.get("inputs", []):
        if not Path(rec["path"]).is_file() or sha256(rec["path"]) != rec["sha256"]:
            raise ConfigError(f"input {rec['path']} is missing or changed since the run")
    with tempfile.TemporaryDirectory() as tmp:
        argv = (["--seed", str(man["master_seed"]), "--threads", "1", "--out-dir", tmp]
                + man["replay_argv"])
        code = main(argv)
        if code != 0:
            raise RuntimeError(f"re-run of {man['subcommand']} exited with {code}")
        problems = []
        for rec in man.get("outputs", []):
            fresh = Path(tmp) / Path(rec["path"]).name
            if not fresh.is_file():
                problems.append(f"{fresh.name}: not produced")
            elif sha256(fresh) != rec["sha256"]:
                problems.append(f"{fresh.name}: digest differs")
    report = {"manifest": str(src), "outputs": len(man.get("outputs", [])),
              "verified": not problems, "problems": problems}
    _write_json(ctx.path("replay_report.json"), report)
    if problems:
        raise ReplayMismatch(f"manifest replay mismatch: {problems[0]}")
    return report


def cmd_simulate_trial(ctx):
    dgm = _dgm(ctx)
    n = ctx.args.n or ctx.own("simulate", "n", dgm.n_completers)
    stage1 = ctx.args.stage1 or ctx.own("simulate", "stage1", "uniform")
    if stage1 not in ("uniform", "minimization"):
        raise ConfigError(f"[simulate] stage1 must be uniform or minimization, got {stage1!r}")
    data = simulate_arrays(dgm, np.random.default_rng(ctx.seed), n=n, stage1=stage1)
    write_records(ctx.path("trial.csv"), data.to_records())
    ctx.resolved = {"dgm": dgm.to_dict(), "n": n, "stage1": stage1}
    return {"participants": n}


def _learner(ctx, dgm_mode):
    pairs = ctx.args.pairs or ctx.own("estimate", "pairs", "all")
    rule = ctx.own("estimate", "cv_rule", "min")
    folds = ctx.own("estimate", "n_folds", 10)
    if pairs not in ("all", "model"):
        raise ConfigError(f"[estimate] pairs must be all or model, got {pairs!r}")
    if rule not in ("min", "1se"):
        raise ConfigError(f"[estimate] cv_rule must be min or 1se, got {rule!r}")
    ctx.resolved.update({"pairs": pairs, "cv_rule": rule, "n_folds": folds, "mode": dgm_mode})
    return QLearner(estimator=LassoCVCD(n_folds=folds, rule=rule), pairs=pairs, mode=dgm_mode,
                    random_state=ctx.seed)


def _load_trial(ctx, path):
    try:
        return TrialData.from_records(read_records(ctx.input(path)))
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_estimate_dtr(ctx):
    dgm = _dgm(ctx)
    data = _load_trial(ctx, ctx.args.input)
    learner = _learner(ctx, dgm.stage2_mode).fit(data)
    for stage, model in ((1, learner.q1_model_), (2, learner.q2_model_)):
        rows = [{"term": t, "coef": c} for t, c in model.coefficient_table()]
        _write_csv(ctx.path(f"q{stage}_coefficients.csv"), rows, ["term", "coef"])
    with open(ctx.path("policy.txt"), "w") as fh:
        fh.write(learner.policy_.describe() + "\n")
    rec = learner.predict(data.z)
    _write_csv(ctx.path("recommendations.csv"),
               [{"row": i + 1, "a1": ARMS[a].name} for i, a in enumerate(rec)], ["row", "a1"])
    return {"lambda_q1": learner.q1_model_.lam, "lambda_q2": learner.q2_model_.lam}


def cmd_value(ctx):
    dgm = _dgm(ctx)
    n_mc = ctx.args.n_mc or ctx.own("value", "n_mc", 20_000)
    delta = ctx.own("value", "delta", 0.9)
    rng = np.random.default_rng(ctx.seed)
    if ctx.args.input:
        data = _load_trial(ctx, ctx.args.input)
    else:
        data = simulate_arrays(dgm, rng)
    learner = _learner(ctx, dgm.stage2_mode).fit(data)
    v_opt = optimal_value(dgm)
    if not v_opt > 0:
        raise ConfigError(f"optimal regime value is {v_opt:.6g}; ratios need it positive")
    v_hat, se = policy_value(learner.policy_, dgm, n_mc, rng, return_se=True)
    ratio = max(v_hat, 0.0) / v_opt
    report = {"v_hat": v_hat, "v_hat_se": se, "v_opt": v_opt, "ratio": ratio, "delta": delta,
              "success": bool(ratio >= delta), "n_mc": n_mc, "n_trial": len(data)}
    _write_json(ctx.path("value.json"), report)
    ctx.resolved.update({"dgm": dgm.to_dict(), "n_mc": n_mc})
    return report


def cmd_power(ctx):
    values = dict(PRESETS[ctx.preset])
    values.update(ctx.section("power"))
    a = ctx.args
    for key, flag in (("n_grid", a.n_grid), ("n_replicates", a.replicates),
                      ("n_mc_value", a.n_mc), ("delta", a.delta)):
        if flag is not None:
            values[key] = flag
    values.update(dgm=_dgm(ctx), master_seed=ctx.seed, threads=ctx.threads)
    # --confirm alone skips the curve
    run_curve = a.confirm is None or "n_grid" in values
    cfg = _build(PowerConfig, values if run_curve else {**values, "n_grid": (a.confirm,)},
                 "[power]")
    ctx.resolved = {k: v for k, v in values.items() if k not in ("master_seed", "threads")}
    ctx.resolved["dgm"] = values["dgm"].to_dict()

    def progress(point):
        print(json.dumps({"N": point.n, "p_hat": point.p_hat, "mc_se": point.mc_se}),
              file=sys.stderr, flush=True)

    summary = {}
    runtimes = {}
    if run_curve:
        try:
            result = run_power(cfg, progress)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        rows = [{k: v for k, v in r.items() if k != "runtime_s"} for r in result.rows()]
        _write_csv(ctx.path("power.csv"), rows)
        runtimes.update({str(p.n): p.runtime for p in result.points})
        summary["v_opt"] = result.v_opt
        summary["monotone_violations"] = result.monotone_violations()
    if a.confirm is not None:
        try:
            conf = confirm_at(a.confirm, cfg)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        runtimes[f"confirm_{a.confirm}"] = conf.point.runtime
        confirm = {"N": conf.point.n, "replicates": conf.point.n_replicates,
                   "p_hat": conf.point.p_hat, "mc_se": conf.point.mc_se,
                   "lower_2se": conf.lower, "target": conf.target,
                   "confirmed": conf.confirmed}
        _write_json(ctx.path("confirm.json"), confirm)
        summary["confirm"] = confirm
    ctx.extra["runtime_s"] = runtimes
    return summary


def cmd_imbalance(ctx):
    values = ctx.section("imbalance")
    a = ctx.args
    for key, flag in (("n_replicates", a.replicates), ("factor_counts", a.factor_counts),
                      ("exclusion_prevalence", a.exclusion_prevalence), ("rho", a.rho),
                      ("coding", a.coding)):
        if flag is not None:
            values[key] = flag
    values.update(master_seed=ctx.seed, threads=ctx.threads)
    cfg = _build(ImbalanceConfig, values, "[imbalance]")
    report = run_imbalance(cfg)
    _write_csv(ctx.path("imbalance_summary.csv"), report.summary_rows())
    rows = []
    for f, metrics in report.metrics.items():
        for r in range(cfg.n_replicates):
            rows.append({"n_factors": f, "replicate": r,
                         **{m: int(metrics[m][r]) for m in METRICS}})
    _write_csv(ctx.path("imbalance_replicates.csv"), rows)
    ctx.resolved = {k: v for k, v in cfg.to_dict().items() if k not in ("master_seed", "threads")}
    ctx.extra["runtime_s"] = {str(f): t for f, t in report.runtime.items()}
    return {"pooled_p_study_wide_ge_10": report.pooled_p_study_wide_ge(10),
            "medians": {str(f): {m: report.summary(f)[m]["median"] for m in METRICS}
                        for f in report.metrics}}


COMMANDS = {
    "randomize": cmd_randomize,
    "simulate-trial": cmd_simulate_trial,
    "estimate-dtr": cmd_estimate_dtr,
    "value": cmd_value,
    "power": cmd_power,
    "imbalance": cmd_imbalance,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------------------
# parser


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _global_flags(parser):
    s = argparse.SUPPRESS
    parser.add_argument("--seed", type=int, default=s,
                        help="master seed (else $SMARTLAB_SEED, else the config, else 0)")
    parser.add_argument("--config", default=s, help="TOML configuration file")
    parser.add_argument("--threads", type=int, default=s, help="worker processes")
    parser.add_argument("--out-dir", default=s, help="output directory (default: .)")
    parser.add_argument("--preset", choices=sorted(PRESETS), default=s,
                        help="replicate counts for power runs (default: desk)")


def build_parser():
    p = _Parser(prog="smartlab", description="Two-stage SMART design and analysis tools.")
    _global_flags(p)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp)
        return sp

    sp = add("randomize", "assign participants from a factor CSV, writing an audit log")
    sp.add_argument("--input", required=True, help="participant CSV")

    sp = add("simulate-trial", "simulate one trial of completers")
    sp.add_argument("--n", type=int, help="number of completers")
    sp.add_argument("--stage1", choices=("uniform", "minimization"))

    for name, help_ in (("estimate-dtr", "fit the regime by Q-learning"),
                        ("value", "estimate a regime and its value ratio")):
        sp = add(name, help_)
        sp.add_argument("--input", required=(name == "estimate-dtr"), help="trial CSV")
        sp.add_argument("--pairs", choices=("all", "model"))
        if name == "value":
            sp.add_argument("--n-mc", type=int, help="Monte Carlo draws for the value")

    sp = add("power", "success probability over a grid of trial sizes")
    sp.add_argument("--n-grid", type=_int_list, help="comma-separated completer counts")
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--n-mc", type=int)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--confirm", type=int, metavar="N",
                    help="also run the confirmatory replicate count at N")

    sp = add("imbalance", "randomization imbalance simulation")
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--factor-counts", type=_int_list)
    sp.add_argument("--exclusion-prevalence", type=float)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--coding", choices=CODINGS)

    sp = add("replay", "verify an audit log or re-run a manifest")
    sp.add_argument("--audit-log")
    sp.add_argument("--manifest")
    sp.add_argument("--no-stream-check", action="store_true",
                    help="skip checking logged uniforms against the seeded stream")
    return p


def _replay_argv(argv):
    """Subcommand-relative argv with run-specific global flags removed."""
    drop = {"--seed", "--threads", "--out-dir"}
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        key = tok.split("=", 1)[0]
        if key in drop:
            skip = "=" not in tok
            continue
        out.append(tok)
    return out


def _run(argv):
    args = build_parser().parse_args(argv)
    cfg = load_config(getattr(args, "config", None))
    seed_flag = getattr(args, "seed", None)
    if seed_flag is None and os.environ.get("SMARTLAB_SEED") is None and "seed" in cfg:
        seed_flag = cfg["seed"]
    try:
        seed = resolve_seed(seed_flag)
    except ValueError:
        raise ConfigError("seed must be an integer") from None
    if seed < 0:
        raise ConfigError("seed must be >= 0")
    threads = getattr(args, "threads", None) or cfg.get("threads", 1)
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    out_dir = Path(getattr(args, "out_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = Context(args=args, cfg=cfg, seed=seed, threads=threads, out_dir=out_dir,
                  preset=getattr(args, "preset", "desk"))
    started = dt.datetime.now(dt.timezone.utc)
    t0 = time.perf_counter()
    summary = COMMANDS[args.command](ctx)
    finished = dt.datetime.now(dt.timezone.utc)
    manifest = {
        "tool": "smartlab", "version": __version__, "subcommand": args.command,
        "argv": list(argv), "replay_argv": _replay_argv(argv),
        "master_seed": seed, "threads": threads, "preset": ctx.preset,
        "config_file": getattr(args, "config", None), "config": cfg,
        "resolved": ctx.resolved,
        "started": started.isoformat(), "finished": finished.isoformat(),
        "wall_time_s": time.perf_counter() - t0,
        "python": platform.python_version(), "numpy": np.__version__,
        "inputs": [{"path": str(p), "sha256": sha256(p)} for p in ctx.inputs],
        "outputs": [{"path": str(p), "sha256": sha256(p)} for p in ctx.outputs],
        "summary": summary, **ctx.extra,
    }
    _write_json(out_dir / MANIFEST, manifest)
    print(json.dumps({"status": "ok", "subcommand": args.command,
                      "manifest": str(out_dir / MANIFEST)}, default=_json_default))
    return 0


def _fail(code, exc):
    print(json.dumps({"status": "error", "exit_code": code, "error": type(exc).__name__,
                      "message": str(exc)}), file=sys.stderr)
    return code


def _json_warning(message, category, filename, lineno, file=None, line=None):
    print(json.dumps({"status": "warning", "warning": category.__name__,
                      "message": str(message)}), file=sys.stderr)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        with warnings.catch_warnings():
            warnings.showwarning = _json_warning
            return _run(argv)
    except (ConfigError, ReplayMismatch) as exc:
        return _fail(1, exc)
    except Exception as exc:  # noqa: BLE001 - every failure must be reported as JSON
        return _fail(2, exc)


if __name__ == "__main__":
    sys.exit(main())
