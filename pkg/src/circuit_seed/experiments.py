"""Experiment runners behind the command-line interface.

Every runner takes an :class:`ExperimentConfig`, writes CSV/JSON under
``config.out / config.experiment`` and returns the in-memory results so
tests and demos can use them without touching disk.

Seeding: seed index ``i`` of a config with master seed ``s`` uses the
integer ``s + i`` for the task, discovery and training streams (each
module keys its own sub-streams off that integer). Cells with the same
seed index therefore share one task, which keeps method comparisons paired.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core_math import make_rng
from .diagnostics import (
    KNOCKOUT_FRACTIONS, KNOCKOUT_SEED, StructureReport, adapter_update, init_gradient_trace,
    knockout_sweep, random_mask, sign_consistency, signal_retention, svd_alignment, top_k_mask,
    write_knockout_csv,
)
from .discovery import (
    METHODS, ROW_METHODS, Circuit, GradStats, accumulate, discover, overlap, perturb_a,
    random_circuit, score, select_top_k,
)
from .lora_mlp import backward
from .tasks import DENSE, SPARSE, TargetSpec, make_task, sample_batch
from .training import CLEAN, NOISY, DivergedError, TrainConfig, train, update_energy, write_metrics_csv

SCHEMA_VERSION = 1
B_SIZE = 1024
LORA = "lora"
PAIRED_REGIME = {DENSE: CLEAN, SPARSE: NOISY}
PAIRED_TASK = {CLEAN: DENSE, NOISY: SPARSE}
FRACTION_NOTE = "k = round_half_even(fraction * 1024)"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = ""  # output subdirectory; empty means the runner's own name
    task: str = SPARSE
    methods: tuple = ("s_hat", "random", LORA)
    budgets: tuple = (0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
    regime: str = "auto"  # auto pairs dense->clean, sparse->noisy
    seeds: int = 10
    seed: int = 0
    steps: int | None = None
    lr: float | None = None
    batch: int | None = None
    eval_every: int | None = None
    noise_std: float | None = None
    clip_norm: float | None = None
    n_passes: int = 100
    score_batch: int = 128
    k: int = 51
    residual_factor_std: float = 0.3
    sparse_fraction: float = 0.05
    large_std: float = 0.3
    small_std: float = 0.01
    stability_ns: tuple = (10, 25, 50)
    reference_n: int = 100
    epsilons: tuple = (0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0)
    knockout_fractions: tuple = KNOCKOUT_FRACTIONS
    knockout_method: str = "f_hat"
    knockout_seed: int = KNOCKOUT_SEED
    trace_mode: str = "init"  # init | trajectory
    trace_every: int = 10
    trace_len: int = 50
    rank_kind: str = "participation"
    pairing: str = "paired"  # paired | same (task used by each regime in diagnose)
    energy_k: int = 51
    alignment_r: int = 2
    warmup_steps: int = 50
    write_cells: bool = True
    jobs: int = 1
    out: str = "runs"

    def __post_init__(self):
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if self.task not in (DENSE, SPARSE):
            raise ConfigError(f"unknown task kind {self.task!r}")
        if self.regime not in ("auto", CLEAN, NOISY):
            raise ConfigError(f"unknown regime {self.regime!r}")
        for m in self.methods:
            if m not in METHODS and m != LORA:
                raise ConfigError(f"unknown method {m!r}")
        for b in self.budgets:
            k = budget_to_k(b)
            if not 0 <= k <= B_SIZE:
                raise ConfigError(f"budget {b} outside [0, {B_SIZE}]")
        if self.trace_mode not in ("init", "trajectory"):
            raise ConfigError(f"unknown trace_mode {self.trace_mode!r}")
        if self.pairing not in ("paired", "same"):
            raise ConfigError(f"unknown pairing {self.pairing!r}")

    def seed_values(self) -> list[int]:
        return [self.seed + i for i in range(self.seeds)]

    def resolved_regime(self, task: str | None = None) -> str:
        return PAIRED_REGIME[task or self.task] if self.regime == "auto" else self.regime

    def target_spec(self, seed: int, kind: str | None = None, base_seed: int | None = None) -> TargetSpec:
        return TargetSpec(kind=kind or self.task, sparse_fraction=self.sparse_fraction,
                          large_std=self.large_std, small_std=self.small_std,
                          residual_factor_std=self.residual_factor_std, seed=seed,
                          base_seed=base_seed)

    def train_config(self, regime: str, seed: int, **extra) -> TrainConfig:
        overrides = {name: getattr(self, name) for name in
                     ("steps", "lr", "batch", "eval_every", "noise_std", "clip_norm")
                     if getattr(self, name) is not None}
        overrides.update(extra)
        return TrainConfig.for_regime(regime, seed=seed, **overrides)

    def outdir(self, default: str = "sweep") -> Path:
        return Path(self.out) / (self.experiment or default)

    def to_dict(self) -> dict:
        return asdict(self)


def budget_to_k(budget, size: int = B_SIZE) -> int:
    """Integers are absolute k; values with a fractional part (or written as floats) are fractions."""
    if isinstance(budget, (int, np.integer)) and not isinstance(budget, bool):
        return int(budget)
    b = float(budget)
    if b <= 1.0:
        return int(round(b * size))  # round() is half-to-even
    if not b.is_integer():
        raise ConfigError(f"budget {budget} is neither a fraction in [0, 1] nor an integer k")
    return int(b)


def budget_fraction(budget, size: int = B_SIZE) -> float:
    """Nominal fraction for a budget entry; the rounded k is reported alongside it."""
    if isinstance(budget, (int, np.integer)) and not isinstance(budget, bool):
        return int(budget) / size
    b = float(budget)
    return b if b <= 1.0 else b / size


def _parse_budget(text: str):
    text = text.strip()
    if any(c in text for c in ".eE"):
        return float(text)
    return int(text)


_TUPLE_PARSERS = {
    "methods": lambda s: tuple(x.strip() for x in s.split(",") if x.strip()),
    "budgets": lambda s: tuple(_parse_budget(x) for x in s.split(",") if x.strip()),
    "stability_ns": lambda s: tuple(int(x) for x in s.split(",") if x.strip()),
    "epsilons": lambda s: tuple(float(x) for x in s.split(",") if x.strip()),
    "knockout_fractions": lambda s: tuple(float(x) for x in s.split(",") if x.strip()),
}


def _coerce(name: str, value: str):
    if name in _TUPLE_PARSERS:
        return _TUPLE_PARSERS[name](value)
    default = {f.name: f.default for f in fields(ExperimentConfig)}[name]
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(default, int) or name in ("steps", "batch", "eval_every"):
        return int(value)
    if isinstance(default, float) or name in ("lr", "noise_std", "clip_norm"):
        return float(value)
    return value


def parse_config_text(text: str) -> dict:
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return values


def load_config(path=None, **overrides) -> ExperimentConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _write_csv(path: Path, header, rows, comment: str | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def _fmt_budget(fraction: float) -> str:
    return f"{fraction:g}"


# ---------------------------------------------------------------- discover

def run_discover(config: ExperimentConfig) -> dict:
    """Circuits for every (method, budget, seed) plus a score histogram CSV."""
    out = config.outdir("discover")
    circuits = {}
    hist_rows = []
    for seed in config.seed_values():
        task = make_task(config.target_spec(seed))
        model = task.fresh_model()
        stats = accumulate(model, task, config.n_passes, config.score_batch, make_rng(seed))
        for method in config.methods:
            if method == LORA:
                continue
            if method != "random":
                sc = score(stats, method, model)
                hist_rows.extend(_score_histogram(method, seed, sc))
            for budget in config.budgets:
                k = budget_to_k(budget)
                if method == "random":
                    circ = random_circuit(k, make_rng(seed, 99, k), model.b.shape, discovery_seed=seed)
                else:
                    circ = select_top_k(sc, k, method, model.rank, discovery_seed=seed,
                                        n_passes=stats.n)
                circuits[(method, k, seed)] = circ
                path = out / method / str(k) / str(seed) / "circuit.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                circ.save(path)
    _write_csv(out / "score_histogram.csv",
               ["method", "seed", "bin_lo", "bin_hi", "count", "median", "max"], hist_rows,
               comment="log10-spaced bins of element scores; heavy tails show up as max >> median")
    return circuits


def _score_histogram(method: str, seed: int, scores: np.ndarray, bins: int = 20):
    vals = np.ravel(scores)
    pos = vals[vals > 0]
    if pos.size == 0:
        return []
    edges = np.logspace(np.log10(pos.min()), np.log10(pos.max()), bins + 1)
    counts, _ = np.histogram(pos, edges)
    med, mx = float(np.median(vals)), float(vals.max())
    return [(method, seed, float(lo), float(hi), int(c), med, mx)
            for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


# ---------------------------------------------------------------- sweep

@dataclass
class SweepRow:
    method: str
    fraction: float
    k: int
    seed: int
    relative_mse: float
    status: str = "ok"


@dataclass
class SweepTable:
    rows: list = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        groups = defaultdict(list)
        order = []
        for r in self.rows:
            key = (r.method, r.fraction, r.k)
            if key not in groups:
                order.append(key)
            groups[key].append(r)
        out = []
        for key in order:
            rows = groups[key]
            ok = [r.relative_mse for r in rows if r.status == "ok"]
            out.append({
                "method": key[0], "fraction": key[1], "k": key[2],
                "mean": float(np.mean(ok)) if ok else float("nan"),
                "min": float(np.min(ok)) if ok else float("nan"),
                "max": float(np.max(ok)) if ok else float("nan"),
                "n_ok": len(ok), "n_failed": len(rows) - len(ok),
            })
        return out

    def mean(self, method: str, fraction: float) -> float:
        for a in self.aggregate():
            if a["method"] == method and math.isclose(a["fraction"], fraction):
                return a["mean"]
        raise KeyError((method, fraction))

    @property
    def has_failures(self) -> bool:
        return any(r.status != "ok" for r in self.rows)

    def write(self, outdir: Path) -> None:
        _write_csv(outdir / "sweep.csv", ["method", "fraction", "k", "seed", "relative_mse", "status"],
                   [(r.method, r.fraction, r.k, r.seed, r.relative_mse, r.status) for r in self.rows],
                   comment=FRACTION_NOTE)
        agg = self.aggregate()
        _write_csv(outdir / "sweep_aggregate.csv",
                   ["method", "fraction", "k", "mean", "min", "max", "n_ok", "n_failed"],
                   [(a["method"], a["fraction"], a["k"], a["mean"], a["min"], a["max"],
                     a["n_ok"], a["n_failed"]) for a in agg],
                   comment=FRACTION_NOTE)
        _write_json(outdir / "sweep.json", {"fraction_rule": FRACTION_NOTE,
                                            "rows": [asdict(r) for r in self.rows],
                                            "aggregate": agg})


def _run_key(method: str, k: int, seed: int):
    # every masked method at the full budget trains the same all-ones mask
    if method == LORA:
        return (LORA, None, seed)
    if k == B_SIZE:
        return ("full_b", B_SIZE, seed)
    return (method, k, seed)


def _execute_run(config: ExperimentConfig, method: str, k: int, seed: int, keep_model: bool = False):
    task = make_task(config.target_spec(seed))
    regime = config.resolved_regime()
    circuit = None
    try:
        if method == LORA:
            report = train(task, None, config.train_config(regime, seed, train_a=True))
        else:
            if k == B_SIZE:
                circuit = select_top_k(np.zeros(task.base.b.shape), B_SIZE, "s_hat")
            elif method == "random":
                circuit = random_circuit(k, make_rng(seed, 99, k), task.base.b.shape, discovery_seed=seed)
            else:
                circuit = discover(task, method, k, config.n_passes, config.score_batch, seed)
            report = train(task, circuit, config.train_config(regime, seed))
    except DivergedError as exc:
        return {"status": "diverged", "relative_mse": float("nan"), "error": str(exc),
                "circuit": circuit, "manifest": task.manifest(), "report": None, "model": None}
    return {"status": "ok", "relative_mse": report.final_relative_mse, "circuit": circuit,
            "manifest": task.manifest(), "report": report.to_dict(),
            "records": report.records, "model": report.model if keep_model else None}


def _execute_run_star(args):
    return _execute_run(*args)


def run_sweep(config: ExperimentConfig, keep_models: bool = False) -> SweepTable:
    """Cartesian (method x budget x seed) of discover -> train -> evaluate.

    Identical runs (full-budget masks, the budget-independent LoRA baseline)
    are executed once and shared across their rows.
    """
    cells = []
    for method in config.methods:
        for budget in config.budgets:
            k = budget_to_k(budget)
            if method in ROW_METHODS and k % 16:
                raise ConfigError(f"row method {method} needs budgets that are whole rows (k % 16 == 0)")
            for seed in config.seed_values():
                cells.append((method, budget, k, seed))
    unique = []
    seen = set()
    for method, _, k, seed in cells:
        key = _run_key(method, k, seed)
        if key not in seen:
            seen.add(key)
            unique.append((key, method, k, seed))

    jobs = max(1, int(config.jobs))
    args = [(config, method, k, seed, keep_models) for _, method, k, seed in unique]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute_run_star, args))
    else:
        results = [_execute_run(*a) for a in args]
    by_key = {key: res for (key, *_), res in zip(unique, results)}

    table = SweepTable()
    out = config.outdir()
    for method, budget, k, seed in cells:
        res = by_key[_run_key(method, k, seed)]
        fraction = budget_fraction(budget)
        table.rows.append(SweepRow(method, fraction, k, seed, res["relative_mse"], res["status"]))
        if config.write_cells:
            _write_cell(out / method / _fmt_budget(fraction) / str(seed), res)
    table.write(out)
    if keep_models:
        table.models = {key: res["model"] for key, res in by_key.items()}
    return table


def _write_cell(cell: Path, res: dict) -> None:
    cell.mkdir(parents=True, exist_ok=True)
    _write_json(cell / "task_manifest.json", res["manifest"])
    if res["circuit"] is not None:
        res["circuit"].save(cell / "circuit.json")
    if res["report"] is not None:
        _write_json(cell / "report.json", res["report"])
        write_metrics_csv(res["records"], cell / "metrics.csv")
    else:
        _write_json(cell / "report.json", {"status": res["status"], "error": res.get("error")})


def run_train(config: ExperimentConfig) -> SweepTable:
    """A single-method, single-budget sweep (one cell per seed)."""
    return run_sweep(replace(config, methods=config.methods[:1], budgets=config.budgets[:1]))


# ---------------------------------------------------------------- stability

def run_stability(config: ExperimentConfig) -> dict:
    """Monte-Carlo convergence, A-perturbation sensitivity and cross-target overlap."""
    k = config.k
    method = config.methods[0] if config.methods[0] not in (LORA, "random") else "s_hat"
    n_rows, eps_rows, cross_rows = [], [], []
    seeds = config.seed_values()
    for seed in seeds:
        task = make_task(config.target_spec(seed))
        model = task.fresh_model()

        def circuit_for(m, n):
            st = accumulate(m, task, n, config.score_batch, make_rng(seed))
            return select_top_k(score(st, method, m), k, method, m.rank)

        ref = circuit_for(model, config.reference_n)
        for n in tuple(config.stability_ns) + (config.reference_n,):
            n_rows.append((seed, n, overlap(circuit_for(model, n), ref)))
        for eps in (0.0,) + tuple(config.epsilons):
            pert = perturb_a(model, eps, make_rng(seed, 3, int(round(eps * 1e6))))
            eps_rows.append((seed, eps, overlap(circuit_for(pert, config.reference_n), ref)))

    # cross-target: same base network, independently drawn targets
    base_seed = seeds[0]
    cross = []
    for seed in seeds:
        task = make_task(config.target_spec(seed, base_seed=base_seed))
        m = task.fresh_model()
        st = accumulate(m, task, config.reference_n, config.score_batch, make_rng(seed))
        cross.append(select_top_k(score(st, method, m), k, method, m.rank))
    for i in range(len(cross)):
        for j in range(i + 1, len(cross)):
            cross_rows.append((seeds[i], seeds[j], overlap(cross[i], cross[j]), k / B_SIZE))

    out = config.outdir("stability")
    _write_csv(out / "mc_convergence.csv", ["seed", "n_passes", "overlap"], n_rows)
    _write_csv(out / "a_perturbation.csv", ["seed", "epsilon", "overlap"], eps_rows)
    _write_csv(out / "cross_target.csv", ["seed_a", "seed_b", "overlap", "chance"], cross_rows)
    summary = {
        "k": k, "method": method,
        "mc_convergence": {str(n): float(np.mean([o for _, nn, o in n_rows if nn == n]))
                           for n in tuple(config.stability_ns) + (config.reference_n,)},
        "a_perturbation": {repr(e): float(np.mean([o for _, ee, o in eps_rows if ee == e]))
                           for e in (0.0,) + tuple(config.epsilons)},
        "cross_target": {"mean_overlap": float(np.mean([r[2] for r in cross_rows])) if cross_rows else None,
                         "chance": k / B_SIZE},
    }
    _write_json(out / "stability.json", summary)
    return summary


# ---------------------------------------------------------------- diagnose

def _regime_task(config: ExperimentConfig, regime: str) -> str:
    return PAIRED_TASK[regime] if config.pairing == "paired" else config.task


def diagnose_seed(config: ExperimentConfig, regime: str, seed: int, full_b_model=None,
                  lora_model=None) -> dict:
    """All per-seed diagnostics for one regime. Trained models may be passed in to reuse runs."""
    kind = _regime_task(config, regime)
    task = make_task(config.target_spec(seed, kind=kind))
    model = task.fresh_model()
    tcfg = config.train_config(regime, seed)

    if config.trace_mode == "init":
        trace = init_gradient_trace(task, tcfg, config.trace_len)
    else:
        run = train(task, None, replace(tcfg, trace_every=config.trace_every, trace_len=config.trace_len))
        trace = run.gradient_log
        full_b_model = full_b_model or run.model
    structure = StructureReport.from_trace(trace, config.rank_kind)

    stats, samples = accumulate(model, task, config.n_passes, config.score_batch, make_rng(seed),
                                keep_samples=True)
    k = config.energy_k
    g0 = stats.mean
    rnd = random_mask(g0.shape, k, make_rng(seed, 77))
    retention = {
        "k": k,
        "informed": signal_retention(g0, top_k_mask(g0, k)),
        "random": signal_retention(g0, rnd),
        "expected_random": k / g0.size,
    }
    retention["amplification"] = retention["informed"] / retention["random"] if retention["random"] else None

    if full_b_model is None:
        full_b_model = train(task, None, tcfg).model
    circ = select_top_k(score(stats, "s_hat", model), k, "s_hat")
    energy = update_energy(full_b_model.b, circ.mask(), rnd)

    if lora_model is None:
        lora_model = train(task, None, replace(tcfg, train_a=True)).model
    ko_scores = score(stats, config.knockout_method, model)
    fractions = (0.0,) + tuple(config.knockout_fractions) + (1.0,)
    c_curve, r_curve = knockout_sweep(lora_model, ko_scores, fractions, task, config.knockout_seed)

    per_example = []
    pe_rng = make_rng(seed, 8)
    for _ in range(config.n_passes):
        per_example.append(backward(model, sample_batch(task, 1, pe_rng)).d_b)
    consistency = sign_consistency(per_example)
    sign = {"mean": float(consistency.mean()),
            "circuit": float(consistency[circ.mask()].mean()),
            "outside_circuit": float(consistency[~circ.mask()].mean())}
    if task.large_mask is not None:
        sign["true_support"] = float(consistency[task.large_mask].mean())
        sign["off_support"] = float(consistency[~task.large_mask].mean())

    left, spectral = svd_alignment(adapter_update(full_b_model), model.w1, config.alignment_r)
    return {
        "regime": regime, "task": kind, "seed": seed,
        "structure": structure.to_dict(),
        "retention": retention,
        "update_energy": {"k": k, "circuit_over_random": energy},
        "knockout": [{"fraction": c.fraction_zeroed, "circuit_mse": c.relative_mse,
                      "random_mse": r.relative_mse} for c, r in zip(c_curve, r_curve)],
        "sign_consistency": sign,
        "alignment": {"r": config.alignment_r, "left_align": left, "spectral_ratio": spectral},
    }


def run_diagnose(config: ExperimentConfig, regimes=(CLEAN, NOISY)) -> dict:
    out = config.outdir("diagnose")
    per_seed = {r: [diagnose_seed(config, r, s) for s in config.seed_values()] for r in regimes}
    summary = {}
    for regime, reports in per_seed.items():
        summary[regime] = _summarise_diagnostics(reports)
        ko = summary[regime]["knockout"]
        _write_csv(out / f"knockout_{regime}.csv", ["fraction", "circuit_mse", "random_mse"],
                   [(p["fraction"], p["circuit_mse"], p["random_mse"]) for p in ko])
    _write_csv(out / "structure.csv", ["regime", "seed", "effective_rank", "mean_cosine",
                                        "accumulation_efficiency"],
               [(r["regime"], r["seed"], r["structure"]["effective_rank"], r["structure"]["mean_cosine"],
                 r["structure"]["accumulation_efficiency"]) for reps in per_seed.values() for r in reps])
    _write_json(out / "diagnostics.json", {"summary": summary, "per_seed": per_seed,
                                           "config": config.to_dict()})
    return {"summary": summary, "per_seed": per_seed}


def _summarise_diagnostics(reports: list[dict]) -> dict:
    def mean_of(path):
        vals = []
        for r in reports:
            v = r
            for p in path:
                v = v[p]
            vals.append(v)
        return float(np.mean(vals))

    ko = []
    for i, point in enumerate(reports[0]["knockout"]):
        ko.append({"fraction": point["fraction"],
                   "circuit_mse": float(np.mean([r["knockout"][i]["circuit_mse"] for r in reports])),
                   "random_mse": float(np.mean([r["knockout"][i]["random_mse"] for r in reports]))})
    sign_keys = reports[0]["sign_consistency"].keys()
    return {
        "structure": {k: mean_of(("structure", k)) for k in reports[0]["structure"]},
        "retention": {k: mean_of(("retention", k)) for k in ("informed", "random", "expected_random")},
        "update_energy": {"circuit_over_random": mean_of(("update_energy", "circuit_over_random"))},
        "knockout": ko,
        "sign_consistency": {k: mean_of(("sign_consistency", k)) for k in sign_keys},
        "alignment": {k: mean_of(("alignment", k)) for k in ("left_align", "spectral_ratio")},
    }


# ---------------------------------------------------------------- knockout

def run_knockout(config: ExperimentConfig) -> dict:
    """F-hat (or other score) ordered vs random knockout on full-LoRA models."""
    regime = config.resolved_regime()
    fractions = (0.0,) + tuple(config.knockout_fractions) + (1.0,)
    curves = []
    for seed in config.seed_values():
        task = make_task(config.target_spec(seed))
        model = task.fresh_model()
        stats = accumulate(model, task, config.n_passes, config.score_batch, make_rng(seed))
        lora = train(task, None, config.train_config(regime, seed, train_a=True)).model
        c, r = knockout_sweep(lora, score(stats, config.knockout_method, model), fractions, task,
                              config.knockout_seed)
        curves.append((c, r))
        if config.write_cells:
            write_knockout_csv(c, r, _mkdir(config.outdir("knockout") / "seeds" / str(seed)) / "knockout.csv")
    mean = [{"fraction": f,
             "circuit_mse": float(np.mean([c[i].relative_mse for c, _ in curves])),
             "random_mse": float(np.mean([r[i].relative_mse for _, r in curves]))}
            for i, f in enumerate(fractions)]
    out = config.outdir("knockout")
    _write_csv(out / "knockout.csv", ["fraction", "circuit_mse", "random_mse"],
               [(p["fraction"], p["circuit_mse"], p["random_mse"]) for p in mean])
    _write_json(out / "knockout.json", {"regime": regime, "method": config.knockout_method,
                                        "random_seed": config.knockout_seed, "curve": mean})
    return {"curve": mean, "per_seed": curves}


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- A+B ablation

def ab_masks(task, config: ExperimentConfig, k: int, seed: int):
    """B-half and A-half masks for the A+B split at total budget k.

    B entries come from the init-point scores. A has zero gradient at B = 0,
    so A entries are scored after ``warmup_steps`` of B-only training on the
    B-half mask.
    """
    if k % 2:
        raise ConfigError(f"A+B split needs an even budget, got k = {k}")
    model = task.fresh_model()
    method = config.methods[0] if config.methods[0] in METHODS and config.methods[0] != "random" else "s_hat"
    stats_b = accumulate(model, task, config.n_passes, config.score_batch, make_rng(seed))
    b_mask = select_top_k(score(stats_b, method, model), k // 2, method).mask()
    regime = config.resolved_regime()
    warm = train(task, b_mask, config.train_config(regime, seed, steps=config.warmup_steps,
                                                   eval_every=config.warmup_steps)).model
    rng = make_rng(seed, 31)
    stats_a = GradStats.zeros(model.a.shape)
    for _ in range(config.n_passes):
        stats_a.add(backward(warm, sample_batch(task, config.score_batch, rng)).d_a)
    a_scores = score(stats_a, "f_hat" if method == "f_hat" else "s_hat")
    a_circ = select_top_k(a_scores, k // 2, "s_hat")
    return b_mask, a_circ.mask()


def run_ablate_ab(config: ExperimentConfig) -> dict:
    regime = config.resolved_regime()
    rows = []
    for budget in config.budgets:
        k = budget_to_k(budget)
        for seed in config.seed_values():
            task = make_task(config.target_spec(seed))
            method = config.methods[0] if config.methods[0] in METHODS and config.methods[0] != "random" else "s_hat"
            tcfg = config.train_config(regime, seed)
            if k == B_SIZE:
                b_only = train(task, None, tcfg)
            else:
                b_only = train(task, discover(task, method, k, config.n_passes, config.score_batch, seed), tcfg)
            b_mask, a_mask = ab_masks(task, config, k, seed)
            ab = train(task, b_mask, tcfg, a_mask=a_mask)
            rows.append((k, k / B_SIZE, seed, b_only.final_relative_mse, ab.final_relative_mse))
    out = config.outdir("ablate-ab")
    _write_csv(out / "ablate_ab.csv", ["k", "fraction", "seed", "b_only_mse", "ab_mse"], rows)
    summary = []
    for k in sorted({r[0] for r in rows}):
        sel = [r for r in rows if r[0] == k]
        summary.append({"k": k, "b_only_mean": float(np.mean([r[3] for r in sel])),
                        "ab_mean": float(np.mean([r[4] for r in sel]))})
    _write_json(out / "ablate_ab.json", {"regime": regime, "summary": summary})
    return {"rows": rows, "summary": summary}


# ---------------------------------------------------------------- compare

def compare_circuits(paths) -> dict:
    circuits = [Circuit.load(p) for p in paths]
    pairs = []
    for i in range(len(circuits)):
        for j in range(i + 1, len(circuits)):
            a, b = circuits[i], circuits[j]
            pairs.append({"a": str(paths[i]), "b": str(paths[j]), "k": a.k,
                          "overlap": overlap(a, b), "chance": a.k / (a.shape[0] * a.shape[1])})
    return {"pairs": pairs}


def default_jobs() -> int:
    return max(1, (os.cpu_count() or 1))
