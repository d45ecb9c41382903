"""Command-line entry point.

Every command takes ``--config file.json`` (keys are the command's option
names, plus nested blocks where noted), lets individual flags override the
file, prints the effective config, and writes its outputs together with a
``manifest.json`` under ``--out``.

Exit status: 0 on success, 1 on contract/configuration/parse errors,
2 on numerical errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import subprocess
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .consistency import CmPolicy, CtConfig, init_cm_policy, load_cm, make_backbone, save_cm
from .data import NormStats, fit_norm, load_trajs, save_trajs
from .ddpm import DdpmConfig, init_ddpm_policy, load_ddpm, save_ddpm
from .errors import BikcError, ConfigurationError, NumericalError, ParseError
from .experiments import GeneratorConfig, PredictorConfig, bench_latency, fit_generator, fit_predictor
from .keypose import KeyposeRules, extract_keyposes, load_keyposes, load_predictor, save_keyposes, save_predictor
from .runtime import METRIC_COLUMNS, PolicyStack, evaluate, metrics_csv
from .sim import LatencyModel, TaskSpec, generate_demos
from .toy import ToyConfig, mode_report, train_toy

PLOT_COLUMNS = ["task", "algo", "metric", "value", "seed"]
_STAGE_METRICS = ("attempts", "successes", "rate")
_RUN_METRICS = ("nfe_mean", "latency_ms_p50", "duration_ticks_mean")


# ---------------------------------------------------------------------------
# config plumbing


def _from_block(cls, block: dict, what: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(block) - names)
    if unknown:
        raise ConfigurationError(f"unknown {what} keys: {', '.join(unknown)}")
    return cls(**block)


def _task_spec(name: str, block: dict | None) -> TaskSpec:
    return TaskSpec.from_dict({"name": name, **(block or {})})


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return f"unknown-{__version__}"
    out = res.stdout.strip()
    return out if res.returncode == 0 and out else f"unknown-{__version__}"


def write_manifest(out: Path, command: str, cfg: dict, outputs: list[str]) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed"),
        "git_describe": git_describe(),
        "version": __version__,
        "outputs": sorted(outputs),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


# Per-command option defaults. ``None`` marks an option without a default
# (required unless it is optional by nature, see _REQUIRED).
DEFAULTS: dict[str, dict] = {
    "demo-gen": {"task": "transfer", "n": 50, "seed": 0, "styles": None, "task_config": None},
    "keypose-extract": {"demos": None, "seed": 0, "rules": None},
    "train-keypose": {"demos": None, "keyposes": None, "seed": 0, "iters": 10000, "batch_size": 64, "lr": 1e-3,
                      "input_noise": 0.05, "early_margin": 3, "holdout_frac": 0.1, "hidden_widths": [256, 256]},
    "train-traj": {"demos": None, "keyposes": None, "algo": "cm", "keypose": "on", "seed": 0, "iters": 30000,
                   "batch_size": 64, "lr": 2e-3, "eval_steps": 10, "hidden_widths": [256, 256, 256]},
    "eval": {"task": "transfer", "generator": None, "predictor": None, "episodes": 20, "seed": 0,
             "switch_threshold": 0.05, "switch_mask": None, "action_horizon": None, "eval_steps": None,
             "latency": None, "task_config": None},
    "bench-latency": {"algo": "both", "eval_steps": 10, "calls": 20, "seed": 0, "obs_dim": 12,
                      "cm_checkpoint": None, "ddpm_checkpoint": None},
    "toy-train": {"algo": "cm", "dim": 1, "seed": 0, "iters": 20000, "batch_size": 128, "lr": 5e-3,
                  "eval_steps": 10, "samples": 1000},
    "emit-plot-data": {"metrics": None, "seed": 0},
}
_REQUIRED = {
    "keypose-extract": ["demos"],
    "train-keypose": ["demos", "keyposes"],
    "train-traj": ["demos"],
    "eval": ["generator"],
    "emit-plot-data": ["metrics"],
}
_PATH_KEYS = {"demos", "keyposes", "generator", "predictor", "metrics", "task_config", "cm_checkpoint",
              "ddpm_checkpoint"}


def effective_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from None
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigurationError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key in _REQUIRED.get(command, []):
        if cfg.get(key) is None:
            raise ConfigurationError(f"missing required option --{key.replace('_', '-')}")
    for key in _PATH_KEYS & set(cfg):
        if cfg[key] is not None:
            cfg[key] = str(Path(cfg[key]).resolve())
    cfg["out"] = str(Path(args.out).resolve())
    return cfg


def _parse_bool_list(text: str) -> list[bool]:
    vals = [v.strip().lower() for v in text.split(",")]
    bad = [v for v in vals if v not in ("0", "1", "true", "false")]
    if bad:
        raise argparse.ArgumentTypeError(f"mask entries must be 0/1/true/false, got {bad}")
    return [v in ("1", "true") for v in vals]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bikc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)
        return sp

    sp = cmd("demo-gen", "generate scripted demonstrations")
    sp.add_argument("--task", choices=["transfer", "conveyor", "pick-order"])
    sp.add_argument("--n", type=int)
    sp.add_argument("--styles", type=lambda s: s.split(","))
    sp.add_argument("--task-config", help="JSON TaskSpec overrides")

    sp = cmd("keypose-extract", "detect keyposes in demonstrations")
    sp.add_argument("--demos")

    sp = cmd("train-keypose", "train the keypose predictor")
    sp.add_argument("--demos")
    sp.add_argument("--keyposes")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--input-noise", type=float)
    sp.add_argument("--early-margin", type=int)
    sp.add_argument("--holdout-frac", type=float)
    sp.add_argument("--hidden-widths", type=_int_list)

    sp = cmd("train-traj", "train a trajectory generator")
    sp.add_argument("--demos")
    sp.add_argument("--keyposes")
    sp.add_argument("--algo", choices=["cm", "ddpm"])
    sp.add_argument("--keypose", choices=["on", "off"])
    sp.add_argument("--iters", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--eval-steps", type=int)
    sp.add_argument("--hidden-widths", type=_int_list)

    sp = cmd("eval", "evaluate a policy stack in the simulator")
    sp.add_argument("--task", choices=["transfer", "conveyor", "pick-order"])
    sp.add_argument("--generator")
    sp.add_argument("--predictor")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--switch-threshold", type=float)
    sp.add_argument("--switch-mask", type=_parse_bool_list)
    sp.add_argument("--action-horizon", type=int)
    sp.add_argument("--eval-steps", type=int, help="override DDPM sampling steps")
    sp.add_argument("--task-config")

    sp = cmd("bench-latency", "time CM against DDPM inference on identical backbones")
    sp.add_argument("--algo", choices=["cm", "ddpm", "both"])
    sp.add_argument("--eval-steps", type=int)
    sp.add_argument("--calls", type=int)
    sp.add_argument("--obs-dim", type=int)
    sp.add_argument("--cm-checkpoint")
    sp.add_argument("--ddpm-checkpoint")

    sp = cmd("toy-train", "train on a 1-D or 2-D multi-modal toy distribution")
    sp.add_argument("--algo", choices=["cm", "ddpm"])
    sp.add_argument("--dim", type=int, choices=[1, 2])
    sp.add_argument("--iters", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--eval-steps", type=int)
    sp.add_argument("--samples", type=int)

    sp = cmd("emit-plot-data", "reshape a metrics CSV into tidy long format")
    sp.add_argument("--metrics")
    return p


# ---------------------------------------------------------------------------
# tidy plot data


def emit_plot_data(metrics_text: str, seed: int) -> str:
    """Long-format rows ``task,algo,metric,value,seed`` from a metrics CSV.

    For the runtime's per-stage table, stage-level columns become
    ``<stage>/<column>`` metrics and run-level columns are emitted once per
    (task, algo). A table without a ``stage`` column is one row per
    (task, algo) and every other column is a metric.
    """
    reader = csv.DictReader(io.StringIO(metrics_text))
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(PLOT_COLUMNS)
    if reader.fieldnames is None:
        return out.getvalue()
    fields = list(reader.fieldnames)
    staged = "stage" in fields
    need = METRIC_COLUMNS if staged else ["task", "algo"]
    missing = [c for c in need if c not in fields]
    if missing:
        raise ParseError(f"metrics header lacks {missing}", line=1)
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if None in row or any(row[c] is None for c in fields):
            raise ParseError("wrong number of fields", line=lineno)
        key = (row["task"], row["algo"])
        if not staged:
            if key in seen:
                raise ParseError(f"duplicate row for {key}", line=lineno)
            seen.add(key)
            for col in (c for c in fields if c not in ("task", "algo")):
                w.writerow([row["task"], row["algo"], col, row[col], seed])
            continue
        for col in _STAGE_METRICS:
            w.writerow([row["task"], row["algo"], f"{row['stage']}/{col}", row[col], seed])
        if key not in seen:
            seen.add(key)
            for col in _RUN_METRICS:
                w.writerow([row["task"], row["algo"], col, row[col], seed])
    return out.getvalue()


def unemit_plot_data(tidy_text: str) -> str:
    """Inverse of :func:`emit_plot_data` (row and column order follow first appearance)."""
    reader = csv.DictReader(io.StringIO(tidy_text))
    groups: dict = {}
    run_vals: dict = {}
    for lineno, row in enumerate(reader, start=2):
        if None in row or any(row.get(c) is None for c in PLOT_COLUMNS):
            raise ParseError("wrong number of fields", line=lineno)
        key = (row["task"], row["algo"])
        if "/" in row["metric"]:
            stage, col = row["metric"].rsplit("/", 1)
            groups.setdefault(key, {}).setdefault(stage, {})[col] = row["value"]
        else:
            run_vals.setdefault(key, {})[row["metric"]] = row["value"]
    out = io.StringIO()
    if not groups and run_vals:
        cols = list(dict.fromkeys(c for vals in run_vals.values() for c in vals))
        w = csv.DictWriter(out, fieldnames=["task", "algo", *cols], lineterminator="\n")
        w.writeheader()
        for key, vals in run_vals.items():
            w.writerow({"task": key[0], "algo": key[1], **vals})
        return out.getvalue()
    w = csv.DictWriter(out, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for key, stages in groups.items():
        for stage, vals in stages.items():
            w.writerow({"task": key[0], "algo": key[1], "stage": stage, **vals, **run_vals.get(key, {})})
    return out.getvalue()


# ---------------------------------------------------------------------------
# commands


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def _curve_csv(path: Path, curve: list[dict]) -> None:
    if curve:
        _write_csv(path, curve, list(curve[0].keys()))


def _load_generator(path: str, eval_steps: int | None = None):
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"checkpoint not found: {p}")
    with open(p, "rb") as fh:
        head = fh.readline()
    try:
        kind = json.loads(head.decode("utf-8")).get("kind")
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ParseError(f"{p}: bad checkpoint header", line=1) from None
    if kind == "cm":
        return load_cm(p)
    if kind == "ddpm":
        return load_ddpm(p, eval_steps=eval_steps)
    raise ConfigurationError(f"{p} is not a trajectory-generator checkpoint (kind={kind!r})")


def _demo_gen(cfg, out: Path) -> list[str]:
    block = None
    if cfg["task_config"]:
        block = json.loads(Path(cfg["task_config"]).read_text(encoding="utf-8"))
        block.pop("name", None)
    task = _task_spec(cfg["task"], block)
    demos = generate_demos(task, cfg["n"], seed=cfg["seed"], styles=cfg["styles"],
                           log=lambda m: print(m, file=sys.stderr))
    save_trajs(out / "demos.jsonl", demos)
    (out / "task.json").write_text(json.dumps(task.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ["demos.jsonl", "task.json"]


def _keypose_extract(cfg, out: Path) -> list[str]:
    rules = _from_block(KeyposeRules, cfg["rules"] or {}, "keypose rule")
    demos = load_trajs(cfg["demos"])
    kps = [extract_keyposes(d, rules) for d in demos]
    save_keyposes(out / "keyposes.jsonl", demos, kps)
    print(f"{len(demos)} demos, {sum(len(k.indices) for k in kps)} keyposes")
    return ["keyposes.jsonl"]


def _train_keypose(cfg, out: Path) -> list[str]:
    demos = load_trajs(cfg["demos"])
    kps = load_keyposes(cfg["keyposes"])
    stats = fit_norm(demos, kps)
    pc = PredictorConfig(iters=cfg["iters"], batch_size=cfg["batch_size"], lr0=cfg["lr"],
                         hidden_widths=tuple(cfg["hidden_widths"]), input_noise=cfg["input_noise"],
                         early_margin=cfg["early_margin"], holdout_frac=cfg["holdout_frac"], seed=cfg["seed"])
    pred, rep = fit_predictor(demos, kps, stats, pc, demos[0].obs.shape[1])
    save_predictor(out / "predictor.ckpt", pred)
    _curve_csv(out / "curve.csv", rep["curve"])
    summary = {"train_mse": rep["train_mse"], "heldout_mse": rep.get("heldout_mse")}
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return ["predictor.ckpt", "curve.csv", "report.json"]


def _train_traj(cfg, out: Path) -> list[str]:
    use_kp = cfg["keypose"] == "on"
    if use_kp and not cfg["keyposes"]:
        raise ConfigurationError("--keypose on needs --keyposes")
    demos = load_trajs(cfg["demos"])
    kps = load_keyposes(cfg["keyposes"]) if cfg["keyposes"] else None
    stats = fit_norm(demos, kps)
    gc = GeneratorConfig(algo=cfg["algo"], keypose=use_kp, iters=cfg["iters"], batch_size=cfg["batch_size"],
                         lr0=cfg["lr"], hidden_widths=tuple(cfg["hidden_widths"]), eval_steps=cfg["eval_steps"],
                         seed=cfg["seed"])
    gen, curve = fit_generator(demos, kps, stats, gc, demos[0].obs.shape[1])
    if gc.algo == "cm":
        save_cm(out / "generator.ckpt", gen)
    else:
        save_ddpm(out / "generator.ckpt", gen)
    _curve_csv(out / "curve.csv", curve)
    return ["generator.ckpt", "curve.csv"]


def _eval(cfg, out: Path) -> list[str]:
    gen = _load_generator(cfg["generator"], cfg["eval_steps"])
    pred = None
    if cfg["predictor"]:
        if not Path(cfg["predictor"]).exists():
            raise ConfigurationError(f"checkpoint not found: {cfg['predictor']}")
        pred = load_predictor(cfg["predictor"])
    block = None
    if cfg["task_config"]:
        block = json.loads(Path(cfg["task_config"]).read_text(encoding="utf-8"))
        block.pop("name", None)
    task = _task_spec(cfg["task"], block)
    latency = _from_block(LatencyModel, cfg["latency"] or {}, "latency")
    stack = PolicyStack(gen, pred, switch_threshold=cfg["switch_threshold"], action_horizon=cfg["action_horizon"],
                        switch_mask=tuple(cfg["switch_mask"]) if cfg["switch_mask"] else None)
    seeds = range(cfg["seed"], cfg["seed"] + cfg["episodes"])
    rows, reports = evaluate(stack, task, seeds, latency)
    (out / "metrics.csv").write_text(metrics_csv(rows), encoding="utf-8")
    with open(out / "episodes.jsonl", "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    print(metrics_csv(rows), end="")
    return ["metrics.csv", "episodes.jsonl"]


def _bench_latency(cfg, out: Path) -> list[str]:
    if cfg["cm_checkpoint"]:
        cm = _load_generator(cfg["cm_checkpoint"])
    else:
        ct = CtConfig()
        cm = init_cm_policy(make_backbone(ct, 6, cfg["obs_dim"]), ct, None, cfg["seed"])
    if cfg["ddpm_checkpoint"]:
        dp = _load_generator(cfg["ddpm_checkpoint"], cfg["eval_steps"])
    else:
        # same backbone as the CM, different weights role
        dp = init_ddpm_policy(cm.net, DdpmConfig(eval_steps=cfg["eval_steps"]), None, cfg["seed"])
    if not isinstance(cm, CmPolicy) or dp.algo != "ddpm":
        raise ConfigurationError("bench-latency needs a CM and a DDPM checkpoint")
    for gen in (cm, dp):
        if gen.stats is None:
            n = gen.net
            gen.stats = NormStats.identity(n.obs_dim, n.action_dim, 6)
    rows = bench_latency(cm, dp, calls=cfg["calls"], seed=cfg["seed"])
    if cfg["algo"] != "both":
        rows = [r for r in rows if r["algo"] == cfg["algo"]]
    _write_csv(out / "latency.csv", rows, ["algo", "call", "wall_ms", "nfe", "nfe_ratio"])
    for algo in ("cm", "ddpm"):
        sel = [r for r in rows if r["algo"] == algo]
        if sel:
            print(f"{algo}: median {np.median([r['wall_ms'] for r in sel]):.2f} ms, nfe {sel[0]['nfe']}")
    return ["latency.csv"]


def _toy_train(cfg, out: Path) -> list[str]:
    tc = ToyConfig(dim=cfg["dim"], iters=cfg["iters"], batch_size=cfg["batch_size"], lr0=cfg["lr"],
                   eval_steps=cfg["eval_steps"], n_samples=cfg["samples"], seed=cfg["seed"])
    _, curve, samples = train_toy(cfg["algo"], tc)
    rep = mode_report(samples, tc.dim, tc.mode_radius)
    np.savetxt(out / "samples.csv", samples, delimiter=",", header=",".join(f"a{i}" for i in range(tc.dim)),
               comments="")
    _curve_csv(out / "curve.csv", curve)
    (out / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"near_frac": rep["near_frac"], "mode_freq": rep["mode_freq"]}))
    return ["samples.csv", "curve.csv", "report.json"]


def _emit_plot_data(cfg, out: Path) -> list[str]:
    path = Path(cfg["metrics"])
    if not path.exists():
        raise ConfigurationError(f"metrics file not found: {path}")
    (out / "plot_data.csv").write_text(emit_plot_data(path.read_text(encoding="utf-8"), cfg["seed"]), encoding="utf-8")
    return ["plot_data.csv"]


COMMANDS = {
    "demo-gen": _demo_gen,
    "keypose-extract": _keypose_extract,
    "train-keypose": _train_keypose,
    "train-traj": _train_traj,
    "eval": _eval,
    "bench-latency": _bench_latency,
    "toy-train": _toy_train,
    "emit-plot-data": _emit_plot_data,
}


def run_command(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; 2 is reserved for numerical failures here
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = effective_config(args.command, args)
        print("effective config: " + json.dumps(cfg, sort_keys=True, default=str))
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, outputs)
    except NumericalError as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return 2
    except BikcError as exc:
        kind = {ParseError: "parse", ConfigurationError: "config"}.get(type(exc), "contract")
        print(f"error: {kind}: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> None:
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
