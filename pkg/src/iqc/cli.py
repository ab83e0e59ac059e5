"""Batch front-end: ``iqc run | validate | plot | eta-cache``.

Configuration is a flat ``key = value`` file; any key can be overridden
with ``--set key=value``.  Exit codes: 0 success, 1 numerical failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import sys
import traceback
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .algebra import channel_labels
from .dynamics import PulseSchedule
from .errors import IQCError, NumericalError
from .objective import ControlProblem
from .optimize import OptimizationRun, OptimizerConfig, minimize, smooth_and_restart, validate

log = logging.getLogger("iqc")

SCHEMA_VERSION = 1
TASKS = ("cluster", "ghz", "measure", "zz-robust")
TAU_G = 2 * math.pi  # interaction timescale for g = 1


class UsageError(IQCError):
    """Invalid command line or configuration."""


@dataclass(frozen=True)
class TaskConfig:
    task: str = "cluster"
    n: int = 3
    noise_level: float = 0.0
    bins: int = 0  # 0 selects the task default
    duration: float = 0.0  # 0 selects n pi / 2
    optimize_duration: bool = True
    max_iterations: int = 1000
    resample_every: int = 50
    train_samples: int = 60
    validate_every: int = 50
    validate_samples: int = 100
    final_validate_samples: int = 1000
    tolerance: float = 1e-4
    seed: int = 0
    gradient_order: int = 2
    memory: int = 10
    workers: int = 1
    amplitude_init: float = 1.0
    duration_fd_step: float = 1e-5
    smooth_cutoff: float = 0.0  # 0 disables the smoothing restart
    smooth_restarts: int = 0
    compare_reference: bool = False
    sweep_levels: str = ""
    constraint_weight: float = 0.0  # 0 selects 1 / C of the reference pulse
    constraint_substeps: int = 1
    reference_iterations: int = 0  # 0 reuses max_iterations
    reference_tolerance: float = 1e-5
    eta_cache: str = ""
    output: str = "iqc-run"

    def __post_init__(self):
        if self.task not in TASKS:
            raise UsageError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.n < 2:
            raise UsageError("n must be at least 2")
        if self.task == "ghz" and self.n < 2:
            raise UsageError("ghz needs n >= 2")

    @property
    def base_task(self) -> str:
        return "cluster" if self.task == "zz-robust" else self.task

    @property
    def resolved_bins(self) -> int:
        if self.bins:
            return self.bins
        return 40 if self.task == "zz-robust" else 10 * self.n

    @property
    def resolved_duration(self) -> float:
        return self.duration or self.n * math.pi / 2

    def levels(self) -> list[float]:
        return [float(v) for v in self.sweep_levels.replace(";", ",").split(",") if v.strip()]

    def optimizer(self, **over) -> OptimizerConfig:
        base = dict(max_iterations=self.max_iterations, resample_every=self.resample_every,
                    train_samples=self.train_samples, validate_every=self.validate_every,
                    validate_samples=self.validate_samples,
                    final_validate_samples=self.final_validate_samples, bins=self.resolved_bins,
                    initial_duration=self.resolved_duration, optimize_duration=self.optimize_duration,
                    duration_fd_step=self.duration_fd_step, amplitude_scale=self.amplitude_init,
                    tolerance=self.tolerance,
                    noise_level=0.0 if self.task == "zz-robust" else self.noise_level,
                    seed=self.seed, gradient_order=self.gradient_order, memory=self.memory,
                    workers=self.workers)
        base.update(over)
        return OptimizerConfig(**base)

    def digest(self) -> str:
        """Hash of every setting that influences results (not output paths or workers)."""
        d = {k: v for k, v in asdict(self).items() if k not in ("output", "workers", "eta_cache")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except (KeyError, ValueError):
        raise UsageError(f"bad value {raw!r} for {name}") from None


_KINDS = {f.name: type(f.default) for f in fields(TaskConfig)}


def parse_config(text: str = "", overrides=()) -> TaskConfig:
    """Build a TaskConfig from flat ``key = value`` text plus ``key=value`` overrides."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string("[iqc]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config: {exc}") from None
    items = dict(cp["iqc"])
    for ov in overrides:
        key, sep, val = ov.partition("=")
        if not sep:
            raise UsageError(f"override {ov!r} is not key=value")
        items[key.strip().lower().replace("-", "_")] = val
    kw = {}
    for key, raw in items.items():
        key = key.replace("-", "_")
        if key not in _KINDS:
            raise UsageError(f"unknown config key {key!r}")
        kw[key] = _coerce(key, raw, _KINDS[key])
    try:
        return TaskConfig(**kw)
    except UsageError:
        raise
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def load_config(path, overrides=()) -> TaskConfig:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} not found")
    return parse_config(p.read_text(), overrides)


# pulse files

def pulse_to_dict(pulse: PulseSchedule, task: str, provenance: dict | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "n": pulse.n,
        "task": task,
        "channel_labels": list(channel_labels(pulse.n)),
        "bins": pulse.bins,
        "duration": pulse.duration,
        "amplitudes": [[float(a) for a in row] for row in pulse.amplitudes],
        "provenance": provenance or {},
    }


def dumps_pulse(pulse: PulseSchedule, task: str, provenance: dict | None = None) -> str:
    # json writes floats with repr, which round-trips doubles exactly
    return json.dumps(pulse_to_dict(pulse, task, provenance), indent=1, sort_keys=True) + "\n"


def save_pulse(path, pulse: PulseSchedule, task: str, provenance: dict | None = None):
    Path(path).write_text(dumps_pulse(pulse, task, provenance))


def load_pulse(path) -> tuple[PulseSchedule, dict]:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read pulse file {path}: {exc}") from None
    if d.get("schema_version") != SCHEMA_VERSION:
        raise UsageError(f"unsupported pulse schema {d.get('schema_version')!r}")
    n = int(d["n"])
    if list(d["channel_labels"]) != list(channel_labels(n)):
        raise UsageError("channel labels do not match this version's channel order")
    amp = np.array(d["amplitudes"], dtype=float)
    pulse = PulseSchedule(n, amp, float(d["duration"]))
    if pulse.bins != int(d["bins"]):
        raise UsageError("bin count does not match amplitude matrix")
    return pulse, d


# runs

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _optimize_with_restarts(problem, cfg: TaskConfig, opt: OptimizerConfig, initial=None,
                            constraint=None, validator=None) -> OptimizationRun:
    run = minimize(problem, opt, initial=initial, constraint=constraint, validator=validator)
    for k in range(cfg.smooth_restarts):
        if cfg.smooth_cutoff <= 0:
            break
        start = smooth_and_restart(run.best, cfg.smooth_cutoff)
        nxt = minimize(problem, replace(opt, seed=opt.seed + k + 1), initial=start,
                       constraint=constraint, validator=validator)
        if nxt.best_validated.mean <= run.best_validated.mean:
            run = nxt
    return run


def _provenance(cfg: TaskConfig, run: OptimizationRun, extra=None) -> dict:
    v = run.best_validated
    p = {"seed": cfg.seed, "config_hash": cfg.digest(), "status": run.status,
         "validated_mean": v.mean, "validated_std": v.std, "validated_samples": v.samples}
    p.update(extra or {})
    return p


def pulse_shape_rows(pulse: PulseSchedule):
    """Bin-centre times in units of tau_g and every channel's amplitude."""
    t = (np.arange(pulse.bins) + 0.5) * pulse.dt / TAU_G
    return [[float(t[q])] + [float(a) for a in pulse.amplitudes[:, q]] for q in range(pulse.bins)]


def _eta_path(cfg: TaskConfig, out: Path) -> Path:
    return Path(cfg.eta_cache) if cfg.eta_cache else out / "eta_cache.tsv"


def build_eta_cache(cfg: TaskConfig, out: Path | None = None):
    from .perturb import EtaTensor, build_eta, zz_spec

    problem = ControlProblem.for_task(cfg.base_task, cfg.n)
    spec = zz_spec(problem.basis)
    out = Path(cfg.output) if out is None else out
    path = _eta_path(cfg, out)
    if path.is_file():
        try:
            return problem, spec, EtaTensor.load(path, problem.basis), path
        except IQCError:
            log.warning("stale eta cache %s, rebuilding", path)
    eta = build_eta(problem.basis, problem.init, spec, task=cfg.task)
    path.parent.mkdir(parents=True, exist_ok=True)
    eta.save(path)
    return problem, spec, eta, path


def run_task(cfg: TaskConfig) -> dict:
    """Optimize, validate and write every artifact for one task configuration."""
    from filelock import FileLock, Timeout

    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".iqc.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise UsageError(f"output directory {out} is locked by another run") from None
    try:
        if cfg.task == "zz-robust":
            return _run_zz(cfg, out)
        return _run_standard(cfg, out)
    finally:
        lock.release()


def _run_standard(cfg: TaskConfig, out: Path) -> dict:
    problem = ControlProblem.for_task(cfg.task, cfg.n)
    opt = cfg.optimizer()
    results = {}
    series = []
    if cfg.compare_reference and cfg.noise_level > 0:
        ref = _optimize_with_restarts(problem, cfg, cfg.optimizer(
            noise_level=0.0, tolerance=cfg.reference_tolerance,
            max_iterations=cfg.reference_iterations or cfg.max_iterations))
        save_pulse(out / "pulse_reference.json", ref.best, cfg.task, _provenance(cfg, ref))
        ref.write_history(out / "history_reference.csv")
        run = _optimize_with_restarts(problem, cfg, opt, initial=ref.best)
        series.append(("non-robust", ref.best))
    else:
        run = _optimize_with_restarts(problem, cfg, opt)
    series.insert(0, ("robust" if cfg.noise_level > 0 else "pulse", run.best))
    run.write_history(out / "history.csv")
    final = validate(run.best, problem, cfg.noise_level, cfg.final_validate_samples,
                     _validation_seed(cfg))
    _write_csv(out / "validation.csv", ["sample_index", "infidelity"],
               [[i, float(v)] for i, v in enumerate(final.values)])
    summary = {"task": cfg.task, "n": cfg.n, "level": cfg.noise_level, **final.to_dict(),
               "status": run.status, "iterations": run.iterations, "duration": run.best.duration}
    if cfg.task != "measure":
        from .verify import transported_state_infidelity

        if cfg.n <= 10:
            summary["state_infidelity"] = transported_state_infidelity(run.best, cfg.task)
    _write_json(out / "validation.json", summary)
    save_pulse(out / "pulse.json", run.best, cfg.task,
               _provenance(cfg, run, {"final_validated_mean": final.mean,
                                      "final_validated_std": final.std}))
    _write_csv(out / "pulse_shapes.csv", ["t_over_tau_g"] + list(channel_labels(cfg.n)),
               pulse_shape_rows(run.best))
    levels = cfg.levels()
    if levels:
        rows = []
        for label, pulse in series:
            for lv in levels:
                s = validate(pulse, problem, lv, cfg.final_validate_samples, _validation_seed(cfg))
                rows.append([label, lv, s.mean, s.std])
        _write_csv(out / "sweep.csv", ["series", "x", "y", "yerr"], rows)
    results.update(summary)
    return results


def _validation_seed(cfg: TaskConfig) -> int:
    return int(np.random.SeedSequence(cfg.seed, spawn_key=(7,)).generate_state(1)[0])


def _run_zz(cfg: TaskConfig, out: Path) -> dict:
    from .verify import robustness_report

    problem, spec, eta, _ = build_eta_cache(cfg, out)
    from .perturb import constraint

    sub = cfg.constraint_substeps
    ref = _optimize_with_restarts(problem, cfg, cfg.optimizer(
        tolerance=cfg.reference_tolerance,
        max_iterations=cfg.reference_iterations or cfg.max_iterations))
    C0 = constraint(ref.best, problem.gens, spec, eta, sub).value
    w = cfg.constraint_weight or (1.0 / C0 if C0 > 0 else 1.0)
    run = _optimize_with_restarts(problem, cfg, cfg.optimizer(), initial=ref.best,
                                  constraint=(spec, eta, w, sub))
    C1 = constraint(run.best, problem.gens, spec, eta, sub).value
    J1 = problem.infidelity(run.best)
    run.write_history(out / "history.csv")
    ref.write_history(out / "history_reference.csv")
    level = cfg.noise_level
    rep = robustness_report(run.best, "zz-robust", level, cfg.final_validate_samples,
                            _validation_seed(cfg), kind="parasitic")
    rep_ref = robustness_report(ref.best, "zz-robust", level, cfg.final_validate_samples,
                                _validation_seed(cfg), kind="parasitic")
    rep.write(out / "validation.csv")
    rep_ref.write(out / "validation_reference.csv")
    summary = {"task": cfg.task, "n": cfg.n, "level": level, "mean": rep.mean, "std": rep.std,
               "samples": len(rep.infidelities), "reference_mean": rep_ref.mean,
               "reference_std": rep_ref.std, "C0": C0, "C1": C1, "C_ratio": C1 / C0 if C0 else math.nan,
               "J": J1, "weight": w, "status": run.status, "iterations": run.iterations,
               "duration": run.best.duration}
    _write_json(out / "validation.json", summary)
    prov = {"C": C1, "C0": C0, "J": J1}
    save_pulse(out / "pulse.json", run.best, cfg.task, _provenance(cfg, run, prov))
    save_pulse(out / "pulse_reference.json", ref.best, cfg.task, _provenance(cfg, ref, {"C": C0}))
    _write_csv(out / "pulse_shapes.csv", ["t_over_tau_g"] + list(channel_labels(cfg.n)),
               pulse_shape_rows(run.best))
    levels = cfg.levels()
    if levels:
        rows = []
        for label, pulse in (("robust", run.best), ("non-robust", ref.best)):
            for lv in levels:
                r = robustness_report(pulse, "zz-robust", lv, cfg.final_validate_samples,
                                      _validation_seed(cfg), kind="parasitic")
                rows.append([label, lv, r.mean, r.std])
        _write_csv(out / "sweep.csv", ["series", "x", "y", "yerr"], rows)
    return summary


# plots

REQUIRED_ARTIFACTS = ("pulse.json", "history.csv")


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plots(run_dir) -> list[Path]:
    """Per-figure CSV (series, x, y, yerr) and static SVG from a run directory."""
    run_dir = Path(run_dir)
    missing = [f for f in REQUIRED_ARTIFACTS if not (run_dir / f).is_file()]
    if missing:
        raise UsageError(f"missing artifacts in {run_dir}: expected {', '.join(REQUIRED_ARTIFACTS)}; "
                         f"not found: {', '.join(missing)}")
    written = []
    pulse, meta = load_pulse(run_dir / "pulse.json")
    labels = meta["channel_labels"]
    rows = []
    for r in pulse_shape_rows(pulse):
        for lab, v in zip(labels, r[1:]):
            rows.append([lab, r[0], v, 0.0])
    written.append(_figure(run_dir / "fig_pulse", rows, "t / tau_g", "amplitude / g", log_y=False,
                           step=True))
    hist = _read_rows(run_dir / "history.csv")
    rows = [["objective", int(h["iteration"]), float(h["objective"]), 0.0] for h in hist]
    rows += [["validated", int(h["iteration"]), float(h["validated_mean"]),
              float(h["validated_std"] or 0.0)] for h in hist if h["validated_mean"]]
    written.append(_figure(run_dir / "fig_history", rows, "iteration", "infidelity", log_y=True))
    if (run_dir / "sweep.csv").is_file():
        rows = [[r["series"], float(r["x"]), float(r["y"]), float(r["yerr"])]
                for r in _read_rows(run_dir / "sweep.csv")]
        written.append(_figure(run_dir / "fig_sweep", rows, "error level", "mean infidelity",
                               log_y=True))
    return [p for pair in written for p in pair]


def _figure(stem: Path, rows, xlabel, ylabel, log_y: bool, step: bool = False):
    _write_csv(stem.with_suffix(".csv"), ["series", "x", "y", "yerr"], rows)
    svg = stem.with_suffix(".svg")
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", svg.name)
        return (stem.with_suffix(".csv"),)
    plt.rcParams["svg.hashsalt"] = "iqc"
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(dict.fromkeys(r[0] for r in rows))
    for name in names:
        pts = np.array([r[1:] for r in rows if r[0] == name], dtype=float)
        if step:
            ax.step(pts[:, 0], pts[:, 1], where="mid", label=name, lw=1)
        elif np.any(pts[:, 2] > 0):
            ax.errorbar(pts[:, 0], pts[:, 1], yerr=pts[:, 2], marker="o", ms=3, capsize=2, label=name)
        else:
            ax.plot(pts[:, 0], pts[:, 1], marker="o" if len(pts) < 30 else None, ms=3, label=name)
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(names) > 1:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(svg, format="svg", metadata={"Date": None})
    plt.close(fig)
    return stem.with_suffix(".csv"), svg


# command line

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iqc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="optimize a task and write artifacts")
    r.add_argument("config")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    v = sub.add_parser("validate", help="validate a pulse file over random errors")
    v.add_argument("pulse")
    v.add_argument("--level", type=float, default=0.05)
    v.add_argument("--samples", type=int, default=1000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--kind", choices=("coupling", "parasitic"), default="coupling")
    v.add_argument("--exact", action="store_true", help="dense state infidelities instead of operator")
    v.add_argument("--out", help="directory for the CSV and JSON report")
    pl = sub.add_parser("plot", help="emit figure CSV and SVG files for a run directory")
    pl.add_argument("run_dir")
    e = sub.add_parser("eta-cache", help="precompute the commutator table for a config")
    e.add_argument("config")
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return p


def _cmd_validate(args) -> dict:
    pulse, meta = load_pulse(args.pulse)
    task = meta["task"]
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    if args.exact or args.kind == "parasitic":
        from .verify import robustness_report

        rep = robustness_report(pulse, task, args.level, args.samples, args.seed, kind=args.kind)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            rep.write(Path(args.out) / "report.csv", Path(args.out) / "report.json")
        return rep.summary()
    base = "cluster" if task == "zz-robust" else task
    problem = ControlProblem.for_task(base, pulse.n)
    s = validate(pulse, problem, args.level, args.samples, args.seed)
    summary = {"task": task, "level": args.level, **s.to_dict()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "report.csv", ["sample_index", "infidelity"],
                   [[i, float(x)] for i, x in enumerate(s.values)])
        _write_json(out / "report.json", summary)
    return summary


def _diagnostic(cfg_out: str | None, exc: BaseException):
    if not cfg_out:
        return None
    path = Path(cfg_out) / "diagnostic.txt"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(traceback.format_exception(type(exc), exc, exc.__traceback__)))
    except OSError:
        return None
    return path


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = None
    try:
        if args.command == "run":
            cfg = load_config(args.config, args.set)
            out_dir = cfg.output
            summary = run_task(cfg)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "validate":
            print(json.dumps(_cmd_validate(args), sort_keys=True))
        elif args.command == "plot":
            for p in emit_plots(args.run_dir):
                print(p)
        elif args.command == "eta-cache":
            cfg = load_config(args.config, args.set)
            out_dir = cfg.output
            _, _, eta, path = build_eta_cache(cfg)
            print(json.dumps({"path": str(path), "product_words": len(eta.product_words),
                              "bq_words": len(eta.bq_words), "records": len(eta.rec_p)}))
        return 0
    except UsageError as exc:
        print(f"iqc: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        diag = _diagnostic(out_dir, exc)
        print(f"iqc: numerical failure: {exc}" + (f" (details in {diag})" if diag else ""),
              file=sys.stderr)
        return 1
    except IQCError as exc:
        print(f"iqc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
