"""Experiment orchestration: configuration, problem construction, multi-start
benchmark runs and CSV output."""
import configparser
import csv
import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from mfopt.fem import assemble, build_geometry, triangulate
from mfopt.fom import build_fom
from mfopt.optimizer import VARIANTS, TrConfig, run_variant

RUNS_HEADER = ["variant", "start_index", "mu0_1", "mu0_2", "mu_1", "mu_2", "J", "outer_iters",
               "fom_evals", "rb_evals", "ml_evals", "fom_time_s", "rb_time_s", "ml_time_s",
               "total_time_s", "status"]
EVALS_HEADER = ["variant", "start_index", "query_index", "fidelity", "time_s"]
TABLE_HEADER = ["variant", "mean_time_s", "speedup", "mean_fom_evals", "mean_rb_evals", "mean_ml_evals"]
HISTORY_HEADER = ["i", "l", "fidelity", "J", "criticality", "eps_L", "alpha_L"]

# config section/key -> TrConfig field
_TR_KEYS = {("optimizer", f.name): f.name for f in dataclasses.fields(TrConfig)
            if not f.name.startswith("kernel_") and f.name != "n_train"}
_TR_KEYS.update({("kernel", "width"): "kernel_width", ("kernel", "eta"): "kernel_eta",
                 ("kernel", "n_train"): "n_train"})


def _floats(text):
    return tuple(float(x) for x in str(text).split(","))


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: str = "default"
    nx: int = 64
    ny: int = 32
    K: int = 200
    dt: float = 0.1
    mu_hat: tuple = (0.05, 0.05)
    lam: float = 0.5e-3
    lower: tuple = (0.01, 0.01)
    upper: tuple = (0.1, 0.1)
    reference_parameter: tuple = (0.05, 0.05)
    output_weight: float = 5000.0
    solver: str = "direct"
    tr: TrConfig = field(default_factory=TrConfig)
    starts: int = 10
    seed: int = 0
    out: str = "results"
    workers: int = 1
    validate_nx: int = 32
    validate_ny: int = 16
    validate_K: int = 100

    def __post_init__(self):
        for name in ("nx", "ny", "K", "starts", "workers", "validate_nx", "validate_ny", "validate_K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dt <= 0 or self.lam < 0 or self.output_weight <= 0:
            raise ValueError("dt and output_weight must be positive, lam nonnegative")
        P = len(self.mu_hat)
        if not (len(self.lower) == len(self.upper) == len(self.reference_parameter) == P):
            raise ValueError("mu_hat, bounds and reference parameter need equal lengths")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("every lower bound must lie below its upper bound")

    @property
    def bounds(self):
        return np.array([self.lower, self.upper], dtype=float)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path):
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        cp.optionxform = str
        if not cp.read(path):
            raise FileNotFoundError(f"cannot read config file {path}")
        return cls.from_parser(cp)

    @classmethod
    def from_parser(cls, cp):
        kw, tr = {}, {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        sections = {"problem": "", "experiment": "", "validate": "validate_"}
        for sec, prefix in sections.items():
            if sec not in cp:
                continue
            for key, raw in cp[sec].items():
                name = prefix + key
                if name not in types:
                    raise ValueError(f"unknown key [{sec}] {key}")
                kw[name] = _convert(types[name], raw)
        tr_types = {f.name: f.type for f in dataclasses.fields(TrConfig)}
        for sec in ("optimizer", "kernel"):
            if sec not in cp:
                continue
            for key, raw in cp[sec].items():
                name = _TR_KEYS.get((sec, key))
                if name is None:
                    raise ValueError(f"unknown key [{sec}] {key}")
                tr[name] = _convert(tr_types[name], raw)
        return cls(tr=TrConfig(**tr), **kw)

    @classmethod
    def load(cls, path=None, scale="desk"):
        if path is not None:
            return cls.from_file(path)
        if scale not in ("desk", "paper"):
            raise ValueError(f"unknown scale {scale!r}")
        with resources.as_file(resources.files("mfopt") / "data" / f"{scale}.cfg") as p:
            return cls.from_file(p)


def _convert(kind, raw):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "tuple":
        return _floats(raw)
    return str(raw).strip()


@dataclass
class Problem:
    config: ExperimentConfig
    geometry: object
    mesh: object
    forms: object
    fom: object


def build_problem(config, reduced=False, cache_dir=None):
    """Geometry, mesh, affine forms and the FOM (with ``g_ref``) for `config`.

    With ``reduced=True`` the smaller mesh and horizon of the ``[validate]``
    section are used.
    """
    nx, ny, K = ((config.validate_nx, config.validate_ny, config.validate_K) if reduced
                 else (config.nx, config.ny, config.K))
    geometry = build_geometry(config.geometry)
    mesh = triangulate(nx, ny, geometry.domain)
    forms = assemble(geometry, mesh, config.reference_parameter, output_weight=config.output_weight)
    fom = build_fom(forms, K, config.dt, config.mu_hat, config.lam, config.bounds,
                    solver=config.solver, cache_dir=cache_dir)
    return Problem(config, geometry, mesh, forms, fom)


def sample_starts(config):
    """Start points drawn uniformly from the parameter box; shared by all variants."""
    rng = np.random.default_rng(config.seed)
    return rng.uniform(config.lower, config.upper, size=(config.starts, len(config.lower)))


# -- running ---------------------------------------------------------------------

@dataclass
class RunOutcome:
    variant: str
    start_index: int
    mu0: np.ndarray
    record: object = None
    error: str | None = None

    @property
    def status(self):
        if self.error is not None:
            return f"error: {self.error}"
        return self.record.status


def _run_one(problem, variant, index, mu0):
    try:
        rec = run_variant(problem.fom, variant, mu0, problem.config.tr)
        return RunOutcome(variant, index, np.asarray(mu0), rec)
    except Exception as exc:   # recorded, never aborts the batch
        return RunOutcome(variant, index, np.asarray(mu0), error=f"{type(exc).__name__}: {exc}")


_WORKER_PROBLEM = None


def _worker_init(config, cache_dir):
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = build_problem(config, cache_dir=cache_dir)


def _worker_run(variant, index, mu0):
    return _run_one(_WORKER_PROBLEM, variant, index, mu0)


def run_benchmark(config, variants=VARIANTS, problem=None, starts=None, progress=None, cache_dir=None):
    """Run every variant from every start point.  Returns a list of
    :class:`RunOutcome` ordered by variant, then start index."""
    starts = sample_starts(config) if starts is None else np.atleast_2d(starts)
    jobs = [(v, j, mu0) for v in variants for j, mu0 in enumerate(starts)]
    outcomes = []
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers, initializer=_worker_init,
                                 initargs=(config, cache_dir)) as pool:
            futures = [pool.submit(_worker_run, *job) for job in jobs]
            for fut in futures:
                outcomes.append(fut.result())
                if progress:
                    progress(outcomes[-1])
    else:
        if problem is None:
            problem = build_problem(config, cache_dir=cache_dir)
        for job in jobs:
            outcomes.append(_run_one(problem, *job))
            if progress:
                progress(outcomes[-1])
    return outcomes


# -- tables and CSV ----------------------------------------------------------------

def _param_columns(prefix, n):
    return [f"{prefix}_{j + 1}" for j in range(n)]


def runs_rows(outcomes):
    rows = []
    for o in outcomes:
        P = o.mu0.size
        row = {"variant": o.variant, "start_index": o.start_index}
        row.update(zip(_param_columns("mu0", P), o.mu0.tolist()))
        rec = o.record
        if rec is None:
            row.update(zip(_param_columns("mu", P), [math.nan] * P))
            row.update(J=math.nan, outer_iters=0, fom_evals=0, rb_evals=0, ml_evals=0,
                       fom_time_s=0.0, rb_time_s=0.0, ml_time_s=0.0, total_time_s=math.nan)
        else:
            row.update(zip(_param_columns("mu", P), rec.mu.tolist()))
            row.update(J=rec.J, outer_iters=rec.outer_iters,
                       fom_evals=rec.count("FOM"), rb_evals=rec.count("RB"), ml_evals=rec.count("ML"),
                       fom_time_s=rec.time("FOM"), rb_time_s=rec.time("RB"), ml_time_s=rec.time("ML"),
                       total_time_s=rec.total_time)
        row["status"] = o.status
        rows.append(row)
    return rows


def evals_rows(outcomes):
    rows = []
    for o in outcomes:
        if o.record is None:
            continue
        for q, (fidelity, seconds) in enumerate(o.record.queries):
            rows.append({"variant": o.variant, "start_index": o.start_index,
                         "query_index": q, "fidelity": fidelity, "time_s": seconds})
    return rows


@dataclass(frozen=True)
class TableRow:
    variant: str
    mean_time_s: float
    speedup: float
    mean_fom_evals: float
    mean_rb_evals: float
    mean_ml_evals: float


@dataclass(frozen=True)
class BenchmarkTable:
    rows: tuple

    @classmethod
    def from_runs(cls, runs):
        """Aggregate runs.csv-style rows (dicts) per variant, in first-seen order."""
        order, groups = [], {}
        for r in runs:
            v = r["variant"]
            if v not in groups:
                order.append(v)
                groups[v] = []
            groups[v].append(r)

        def mean(v, key):
            return float(np.mean([float(r[key]) for r in groups[v]]))

        base = mean("FomOpt", "total_time_s") if "FomOpt" in groups else math.nan
        rows = []
        for v in order:
            t = mean(v, "total_time_s")
            rows.append(TableRow(v, t, base / t if t > 0 else math.nan, mean(v, "fom_evals"),
                                 mean(v, "rb_evals"), mean(v, "ml_evals")))
        return cls(tuple(rows))

    def row(self, variant):
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def as_dicts(self):
        return [dataclasses.asdict(r) for r in self.rows]

    def format(self):
        lines = [f"{'variant':<18} {'time [s]':>9} {'speed-up':>9} {'FOM':>7} {'RB':>8} {'ML':>8}"]
        for r in self.rows:
            lines.append(f"{r.variant:<18} {r.mean_time_s:9.2f} {r.speedup:9.2f} {r.mean_fom_evals:7.1f} "
                         f"{r.mean_rb_evals:8.1f} {r.mean_ml_evals:8.1f}")
        return "\n".join(lines)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in header})


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_run(config, out_dir=None, variants=VARIANTS, progress=None, cache_dir=None):
    """Benchmark all variants and write runs.csv, evals.csv and table.csv."""
    out = Path(out_dir if out_dir is not None else config.out)
    outcomes = run_benchmark(config, variants, progress=progress, cache_dir=cache_dir)
    runs = runs_rows(outcomes)
    P = len(config.lower)
    header = RUNS_HEADER if P == 2 else (
        RUNS_HEADER[:2] + _param_columns("mu0", P) + _param_columns("mu", P) + RUNS_HEADER[6:])
    write_csv(out / "runs.csv", header, runs)
    write_csv(out / "evals.csv", EVALS_HEADER, evals_rows(outcomes))
    table = BenchmarkTable.from_runs(runs)
    write_csv(out / "table.csv", TABLE_HEADER, table.as_dicts())
    return outcomes, table


def record_to_dict(rec):
    def clean(x):
        if isinstance(x, np.ndarray):
            return x.tolist()
        if isinstance(x, (np.floating, np.integer)):
            return x.item()
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, float) and not math.isfinite(x):
            return None
        return x

    d = {f.name: getattr(rec, f.name) for f in dataclasses.fields(rec) if f.name != "queries"}
    d["counts"] = {f: rec.count(f) for f in ("FOM", "RB", "ML")}
    d["times"] = {f: rec.time(f) for f in ("FOM", "RB", "ML")}
    return clean(d)


def cmd_single(config, variant, mu0, out_dir=None, problem=None):
    """One run with its full event log: record.json and history.csv."""
    problem = build_problem(config) if problem is None else problem
    t = time.perf_counter()
    rec = run_variant(problem.fom, variant, mu0, config.tr)
    out = Path(out_dir if out_dir is not None else config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "history.csv", HISTORY_HEADER, rec.history)
    dump = record_to_dict(rec)
    dump["wall_time_s"] = time.perf_counter() - t
    (out / "record.json").write_text(json.dumps(dump, indent=1))
    return rec


def gradient_check(fom, mus, h=1e-5):
    """Adjoint gradient against central differences; one dict per parameter."""
    rows = []
    for mu in np.atleast_2d(mus):
        _, g, _, _ = fom.eval_output(mu)
        fd = np.empty_like(g)
        for i in range(g.size):
            e = np.zeros_like(g)
            e[i] = h
            up = fom.objective(mu + e, fom.solve_primal(mu + e))
            dn = fom.objective(mu - e, fom.solve_primal(mu - e))
            fd[i] = (up - dn) / (2.0 * h)
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), np.finfo(float).tiny)
        rows.append({"mu": np.asarray(mu), "adjoint": g, "fd": fd, "rel_error": rel})
    return rows
