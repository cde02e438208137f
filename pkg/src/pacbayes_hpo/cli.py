"""Command-line entry points.

Verbs:

``run``        execute an experiment described by a TOML file (``--set key=value`` overrides)
``privacy``    DP-SGLD step-size certificate or (epsilon, delta) frontier
``bound``      assemble a PAC-Bayes bound report from a regularizer trace
``plot-data``  convert run outputs to gnuplot ``.dat`` files

Exit status: 0 success, 1 invalid configuration or input, 2 runtime
failure, 3 missing dataset.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .bounds import BoundConfig, equal_step_kl_bound, pac_bayes_bound, training_side_bound
from .samplers import PrivacyBudget, PrivacyError, account_privacy, dp_frontier, max_dp_step_size

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DATA = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    """Flat experiment configuration (every field overridable with ``--set``)."""

    experiment: str = "freedman"
    seed: int = 0
    seeds: int = 1
    output_dir: str = "runs/out"
    workers: int = 0
    # freedman
    version: str = "null"
    objectives: list = field(default_factory=lambda: ["eq1", "eq5", "aic"])
    n_total: int = 500
    d: int = 500
    n_test: int = 10_000
    max_p: int = 10
    zeta: float = 0.025
    zeta_reading: str = ""
    chains: int = 50
    ld_eta: float = 0.1
    ld_steps: int = 50
    tau_grid: list = field(default_factory=lambda: [0.1, 1.0, 10.0, 100.0, "n_train"])
    init_std: float = 4.0
    # weight decay
    dataset: str = "bundled_mnist"
    images: str = ""
    labels: str = ""
    csv: str = ""
    model: str = "linear_softmax"
    hidden: int = 32
    zetas: list = field(default_factory=list)
    n_train: int = 50
    n_val: int = 50
    inner_steps: int = 1000
    outer_steps: int = 100
    inner_lr: float = 1e-4
    outer_lr: float = 1e-2
    lam0: float = -2.0
    wd_init_std: float = 0.01
    inner: str = "adam"
    reinit_inner: bool = False
    test_size: int = 0
    mixture_size: int = 5000
    mixture_dim: int = 20
    mixture_noise: float = 2.0

    def validate(self) -> RunConfig:
        checks = {
            "experiment": self.experiment in ("freedman", "weight_decay"),
            "version": self.version in ("null", "signal"),
            "objectives": bool(self.objectives) and all(o in ("eq1", "eq5", "aic") for o in self.objectives),
            "seeds": self.seeds >= 1,
            "n_total": self.n_total >= 2 and self.n_total % 2 == 0,
            "d": self.d >= 2,
            "max_p": 0 <= self.max_p <= self.d,
            "zeta": self.zeta >= 0 and all(z >= 0 for z in self.zetas),
            "zeta_reading": self.zeta_reading in ("", "eta_over_4", "sqrt"),
            "chains": self.chains >= 1,
            "ld_eta": self.ld_eta > 0,
            "ld_steps": self.ld_steps >= 0,
            "init_std": self.init_std >= 0,
            "dataset": self.dataset in ("bundled_mnist", "idx", "csv", "gaussian_mixture"),
            "model": self.model in ("linear_softmax", "mlp"),
            "inner": self.inner in ("adam", "adamw"),
            "inner_steps": self.inner_steps >= 1,
            "outer_steps": self.outer_steps >= 1,
            "inner_lr": self.inner_lr > 0,
            "outer_lr": self.outer_lr > 0,
            "workers": self.workers >= 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ConfigError(f"invalid value for '{name}': {getattr(self, name)!r}")
        for t in self.tau_grid:
            if t != "n_train" and not (isinstance(t, (int, float)) and t > 0):
                raise ConfigError(f"invalid value for 'tau_grid': {t!r}")
        return self


def _coerce(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"field '{name}' expects a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, list):
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            value = [value]
        return value
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"field '{name}' expects {type(default).__name__}, got {value!r}") from None
    return str(value)


def _flatten(table: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in table.items():
        if isinstance(v, dict):
            out.update(_flatten(v, ""))
        else:
            out[k] = v
    return out


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    """Merge a TOML file (sections are flattened) with ``key=value`` overrides.

    A ``.json`` path is read as a run manifest and its recorded configuration is used.
    """
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            if p.suffix == ".json":
                # a run manifest: rerun with its recorded configuration
                raw = dict(json.loads(p.read_text()).get("config", {}))
            else:
                raw = _flatten(tomllib.loads(p.read_text()))
        except (tomllib.TOMLDecodeError, json.JSONDecodeError, AttributeError) as e:
            raise ConfigError(f"malformed config in {p}: {e}") from e
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for k, v in raw.items():
        if k not in known:
            raise ConfigError(f"unknown field '{k}'")
        values[k] = _coerce(k, v, getattr(defaults, k))
    return RunConfig(**values).validate()


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_manifest(out: Path, cfg: RunConfig, artifacts: list[str]) -> None:
    manifest = {
        "config": asdict(cfg),
        "git_describe": _git_describe(),
        "seed": cfg.seed,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "artifacts": sorted(artifacts),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _workers(cfg: RunConfig, jobs: int) -> int:
    return max(1, min(jobs, cfg.workers or os.cpu_count() or 1))


def _map(fn, tasks: list, workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


# -- freedman ----------------------------------------------------------------------


def _freedman_task(args) -> dict:
    from .experiments.freedman import LDConfig, forward_select
    from .models import generate_freedman

    cfg, seed = args
    train, val, test = generate_freedman(cfg["version"], cfg["n_total"], cfg["d"], seed, cfg["n_test"])
    taus = tuple(None if t == "n_train" else float(t) for t in cfg["tau_grid"])
    ld = LDConfig(chains=cfg["chains"], eta=cfg["ld_eta"], steps=cfg["ld_steps"], tau_grid=taus,
                  init_std=cfg["init_std"])
    out = {}
    for obj in cfg["objectives"]:
        path = forward_select(train, val, obj, cfg["max_p"], test, cfg["zeta"], ld, seed)
        out[obj] = [asdict(e) for e in path.entries]
    return {"seed": seed, "paths": out}


def _run_freedman(cfg: RunConfig, out: Path) -> list[str]:
    from scipy.stats import spearmanr

    from .experiments.freedman import freedman_zeta

    if cfg.zeta_reading:
        cfg.zeta = freedman_zeta(cfg.zeta_reading)
    seeds = [cfg.seed + i for i in range(cfg.seeds)]
    payload = asdict(cfg)
    results = _map(_freedman_task, [(payload, s) for s in seeds], _workers(cfg, len(seeds)))
    artifacts, summary = [], []
    cols = ["p", "features", "objective", "val_r2", "val_mse", "test_mse", "aic"]
    for res in sorted(results, key=lambda r: r["seed"]):
        row = {"seed": res["seed"]}
        for obj, entries in res["paths"].items():
            name = f"freedman_{cfg.version}_{obj}_seed{res['seed']}.csv"
            with open(out / name, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(cols)
                for e in entries:
                    w.writerow([e["p"], " ".join(map(str, e["features"])), e["objective"], e["val_r2"],
                                e["val_mse"], e["test_mse"], e["aic"]])
            artifacts.append(name)
            objs = [e["objective"] for e in entries]
            best = entries[int(np.argmin(objs))]
            rho = spearmanr(objs, [e["test_mse"] for e in entries])[0] if len(entries) > 2 else float("nan")
            row[obj] = {"argmin_p": best["p"], "argmin_features": list(best["features"]),
                        "spearman_objective_test_mse": float(rho)}
        summary.append(row)
    (out / "summary.json").write_text(json.dumps({"experiment": "freedman", "runs": summary}, indent=2))
    return artifacts + ["summary.json"]


# -- weight decay ------------------------------------------------------------------


def _load_dataset(cfg: RunConfig):
    from .data_io import load_bundled_mnist, load_mnist_idx, read_csv_dataset
    from .models import generate_gaussian_classes

    if cfg.dataset == "bundled_mnist":
        return load_bundled_mnist()
    if cfg.dataset == "idx":
        if not cfg.images or not cfg.labels:
            raise ConfigError("dataset 'idx' needs the 'images' and 'labels' fields")
        return load_mnist_idx(cfg.images, cfg.labels)
    if cfg.dataset == "csv":
        if not cfg.csv:
            raise ConfigError("dataset 'csv' needs the 'csv' field")
        return read_csv_dataset(cfg.csv, label_dtype=np.int64)
    return generate_gaussian_classes(cfg.mixture_size, cfg.mixture_dim, noise=cfg.mixture_noise, seed=cfg.seed)


def _wd_task(args):
    from .experiments.weight_decay import WeightDecayConfig, run_weight_decay_experiment

    cfg, data, zeta, seed = args
    wcfg = WeightDecayConfig(n_train=cfg["n_train"], n_val=cfg["n_val"], inner_steps=cfg["inner_steps"],
                             outer_steps=cfg["outer_steps"], inner_lr=cfg["inner_lr"], outer_lr=cfg["outer_lr"],
                             lam0=cfg["lam0"], init_std=cfg["wd_init_std"], hidden=cfg["hidden"],
                             test_size=cfg["test_size"] or None, inner=cfg["inner"],
                             reinit_inner=cfg["reinit_inner"])
    objective = "eq5" if zeta > 0 else "eq1"
    return run_weight_decay_experiment(data, cfg["model"], objective, zeta, [seed], wcfg)[0]


def _run_weight_decay(cfg: RunConfig, out: Path) -> list[str]:
    from .experiments.analysis import correlation_by_seed, generalization_gap, regularizer_generalization_correlation
    from .experiments.weight_decay import min_weight_norm_baseline
    from .hyperopt import write_history_csv

    data = _load_dataset(cfg)
    zetas = [float(z) for z in cfg.zetas] if cfg.zetas else [cfg.zeta]
    seeds = [cfg.seed + i for i in range(cfg.seeds)]
    payload = asdict(cfg)
    tasks = [(payload, data, z, s) for z in zetas for s in seeds]
    runs = _map(_wd_task, tasks, _workers(cfg, len(tasks)))
    artifacts, summary = [], []
    for run in sorted(runs, key=lambda r: (r.zeta, r.seed)):
        name = f"weight_decay_{run.model_kind}_{run.objective}_zeta{run.zeta:g}_seed{run.seed}.csv"
        write_history_csv(out / name, run.records)
        artifacts.append(name)
        last = run.records[-1]
        entry = {"zeta": run.zeta, "seed": run.seed, "objective": run.objective,
                 "final_val_acc": last.val_acc, "final_test_acc": last.test_acc,
                 "final_sqrt_Y": last.sqrt_Y, "generalization_gap": generalization_gap(run)}
        if run.objective == "eq1":
            base = min_weight_norm_baseline(run)
            entry["min_weight_norm_baseline"] = {"outer_step": base.outer_step, "test_acc": base.test_acc,
                                                 "val_acc": base.val_acc}
        summary.append(entry)
    report = {"experiment": "weight_decay", "runs": summary}
    if len(set(zetas)) >= 3:
        corr = regularizer_generalization_correlation(runs)
        report["correlation"] = {"pearson": corr.pearson, "spearman": corr.spearman, "degenerate": corr.degenerate}
        if len(seeds) > 1:
            report["correlation_by_seed"] = {
                str(s): {"pearson": c.pearson, "spearman": c.spearman, "degenerate": c.degenerate}
                for s, c in correlation_by_seed(runs).items()
            }
    (out / "summary.json").write_text(json.dumps(report, indent=2))
    return artifacts + ["summary.json"]


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set or [])
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.experiment == "freedman":
        artifacts = _run_freedman(cfg, out)
    else:
        artifacts = _run_weight_decay(cfg, out)
    _write_manifest(out, cfg, artifacts)
    print(json.dumps({"output_dir": str(out), "artifacts": sorted(artifacts)}))
    return EXIT_OK


# -- privacy and bounds --------------------------------------------------------------


def cmd_privacy(args) -> int:
    if args.eta is None and (args.eps is None or args.delta is None):
        raise ConfigError("give either --eta or both --eps and --delta")
    if args.gamma <= 0:
        raise ConfigError("invalid value for 'gamma': must be positive")
    if args.eta is None:
        try:
            budget = PrivacyBudget(args.eps, args.delta, args.h, args.s, args.chains)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        eta = max_dp_step_size(budget, args.gamma)
        eps_c, delta_c = account_privacy(budget, args.chains)
        result = {"eta_max": eta, "epsilon": args.eps, "delta": args.delta, "h": args.h, "s": args.s,
                  "gamma": args.gamma, "chains": args.chains, "total_epsilon": eps_c, "total_delta": delta_c}
        text = (f"eta_max = {eta:.6g}  (h={args.h}, s={args.s}, eps={args.eps}, delta={args.delta}, "
                f"gamma={args.gamma})\nC={args.chains} chains: ({eps_c:.6g}, {delta_c:.6g})")
    else:
        if args.eta <= 0 or not 1 <= args.h <= args.s:
            raise ConfigError("invalid value for 'eta' or 'h'")
        rows = dp_frontier(args.eta, args.h, args.s, args.gamma)
        for r in rows:
            r["total_epsilon"], r["total_delta"] = r["epsilon"] * args.chains, r["delta"] * args.chains
        result = {"eta": args.eta, "chains": args.chains, "frontier": rows}
        lines = [f"{'delta':>12} {'epsilon':>12} {'C*eps':>12} {'C*delta':>12} valid"]
        lines += [f"{r['delta']:12.3e} {r['epsilon']:12.6g} {r['total_epsilon']:12.6g} {r['total_delta']:12.3e} "
                  f"{r['valid']}" for r in rows]
        text = "\n".join(lines)
    print(json.dumps(result) if args.json else text)
    return EXIT_OK


def _read_trace(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"trace file not found: {p}")
    try:
        if p.suffix == ".json":
            data = json.loads(p.read_text())
            d2 = [float(v) for v in data["d2"]]
            emp = float(data.get("emp_risk", 0.0))
            return {"d2": d2, "emp_risk": emp, "eta": data.get("eta"), "n": data.get("n")}
        with open(p, newline="") as fh:
            rows = list(csv.DictReader(fh))
        d2 = [float(r["d2"]) for r in rows]
        emp = float(rows[-1]["emp_risk"]) if rows and "emp_risk" in rows[0] else 0.0
        return {"d2": d2, "emp_risk": emp, "eta": None, "n": None}
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
        raise ConfigError(f"malformed trace file {p}: {e}") from e


def cmd_bound(args) -> int:
    trace = _read_trace(args.trace)
    if any(v < 0 or not math.isfinite(v) for v in trace["d2"]):
        raise ConfigError("malformed trace: d2 summands must be finite and non-negative")
    n = args.n or trace["n"]
    eta = args.eta if args.eta is not None else trace["eta"]
    if not n or eta is None:
        raise ConfigError("need the sample size (--n) and step size (--eta), in the trace or as flags")
    kl = equal_step_kl_bound(sum(trace["d2"]), float(eta), int(n))
    loss_range = (args.a, args.b) if args.kind == "bounded" else None
    try:
        cfg = BoundConfig(confidence=args.confidence, c1=args.c1, c2=args.c2, c_beta=args.c_beta,
                          kappa=args.kappa, gamma_lip=args.gamma_lip, loss_range=loss_range,
                          form="general" if args.kind == "general" else "simplified")
        if args.kind == "training":
            report = training_side_bound(trace["emp_risk"], kl, int(n), args.eps, args.delta, cfg)
        else:
            report = pac_bayes_bound(trace["emp_risk"], kl, int(n), args.eps, args.delta, cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    print(report.to_json(indent=2))
    return EXIT_OK


# -- plot data ------------------------------------------------------------------------


def cmd_plot_data(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise ConfigError(f"input directory not found: {src}")
    out = Path(args.out or src)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in sorted(src.glob("freedman_*.csv")):
        with open(f, newline="") as fh:
            rows = list(csv.DictReader(fh))
        target = out / (f.stem + ".dat")
        with open(target, "w") as fh:
            fh.write("# p objective test_mse val_r2\n")
            for r in rows:
                fh.write(f"{r['p']} {r['objective']} {r['test_mse']} {r['val_r2']}\n")
        written.append(target.name)
    for f in sorted(src.glob("weight_decay_*.csv")):
        with open(f, newline="") as fh:
            rows = list(csv.DictReader(fh))
        target = out / (f.stem + ".dat")
        with open(target, "w") as fh:
            fh.write("# outer_step test_acc val_acc sqrt_Y\n")
            for r in rows:
                fh.write(f"{r['outer_step']} {r['test_acc']} {r['val_acc']} {r['sqrt_Y']}\n")
        written.append(target.name)
    summary = src / "summary.json"
    if summary.exists():
        data = json.loads(summary.read_text())
        if data.get("experiment") == "weight_decay":
            target = out / "generalization_vs_regularizer.dat"
            with open(target, "w") as fh:
                fh.write("# final_sqrt_Y generalization_gap zeta seed\n")
                for r in data["runs"]:
                    fh.write(f"{r['final_sqrt_Y']} {r['generalization_gap']} {r['zeta']} {r['seed']}\n")
            written.append(target.name)
    print(json.dumps({"written": written}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pacbayes-hpo", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run an experiment from a TOML config")
    r.add_argument("--config", help="TOML configuration file or a run manifest (.json)")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.set_defaults(fn=cmd_run)

    p = sub.add_parser("privacy", help="DP-SGLD step-size certificate")
    p.add_argument("--h", type=int, required=True, help="minibatch size")
    p.add_argument("--s", type=int, required=True, help="dataset size")
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--gamma", type=float, default=1.0, help="clip radius")
    p.add_argument("--eta", type=float, help="step size; prints the (epsilon, delta) frontier")
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_privacy)

    b = sub.add_parser("bound", help="PAC-Bayes bound report from a regularizer trace")
    b.add_argument("--trace", required=True, help="JSON {d2, emp_risk, eta, n} or CSV with d2[, emp_risk] columns")
    b.add_argument("--kind", choices=["simplified", "general", "bounded", "training"], default="simplified")
    b.add_argument("--n", type=int)
    b.add_argument("--eta", type=float)
    b.add_argument("--eps", type=float, default=0.0)
    b.add_argument("--delta", type=float, default=0.0)
    b.add_argument("--confidence", type=float, default=0.05)
    b.add_argument("--c1", type=float, default=1.0)
    b.add_argument("--c2", type=float, default=1.0)
    b.add_argument("--c-beta", type=float, default=1.0)
    b.add_argument("--a", type=float, default=0.0)
    b.add_argument("--b", type=float, default=1.0)
    b.add_argument("--kappa", type=float)
    b.add_argument("--gamma-lip", type=float)
    b.set_defaults(fn=cmd_bound)

    d = sub.add_parser("plot-data", help="write gnuplot .dat files from a run directory")
    d.add_argument("--input", required=True)
    d.add_argument("--out")
    d.set_defaults(fn=cmd_plot_data)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, OverflowError, PrivacyError, ArithmeticError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
