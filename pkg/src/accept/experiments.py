"""Experiment orchestration: config resolution, run directories, sweeps.

A JSON experiment config names a backbone (checkpoint path or an inline
pretraining recipe), train/eval datasets (generator parameters or JSONL
paths), the prompt components with their parameter budgets, the run
schedule, and the initialization strategy.  Every run lands in its own
directory keyed by a hash of the resolved config, holding config.json,
history.csv, a best/ prompt checkpoint, and summary.json.

CSV bodies are byte-reproducible for a fixed config and seed: floats are
written with repr (shortest round-trip form), rows end with LF, and
wall-clock values stay out of CSVs except in the length sweep, where the
time column is inherently host-dependent and documented as such.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, BackboneModel, PretrainConfig, pretrain_backbone
from .factorization import (
    PromptDims,
    param_count,
    solve_rank,
    validate_partition,
)
from .metrics import fewshot_report
from .tasks import Dataset, FewShotSpec, fewshot_sample, gen_task, load_jsonl
from .tensor import Tensor
from .training import (
    DirectPrompt,
    FactorizedPrompt,
    InitStrategy,
    PromptSet,
    RunConfig,
    RunHistory,
    apply_init,
    evaluate,
    save_checkpoint,
    train,
)

__all__ = [
    "ConfigError",
    "run_experiment",
    "run_sweep_granularity",
    "sweep_granularity_rows",
    "run_ablate",
    "run_fewshot",
    "run_length_sweep",
    "load_config",
    "canonical_json",
    "run_id_for",
    "write_csv",
    "read_csv_rows",
    "runs_root_from_env",
]


class ConfigError(ValueError):
    """An experiment config is malformed or inconsistent."""


# -- primitives -----------------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_id_for(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:12]


def runs_root_from_env(explicit: str | None = None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get("ACCEPT_RUNS_DIR", "runs"))


def _fmt(v) -> str:
    if isinstance(v, bool):
        raise ConfigError(f"boolean {v!r} has no CSV representation")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: list[str], rows: list[tuple]) -> None:
    """Comma-separated, LF endings, repr-formatted floats: byte-stable."""
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ConfigError(f"row {row} does not match header {header}")
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv_rows(path) -> tuple[list[str], list[list[str]]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.split("\n") if ln]
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {p} is not valid JSON: {err}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return obj


# -- config resolution -------------------------------------------------------------


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"{where}: missing required field {key!r}")
    return obj[key]


def parse_dataset(obj, where: str, split: str) -> Dataset:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: dataset spec must be an object")
    if "jsonl" in obj:
        return load_jsonl(
            obj["jsonl"],
            num_classes=obj.get("num_classes"),
            vocab_size=obj.get("vocab_size"),
            split=split,
        )
    kind = _require(obj, "kind", where)
    return gen_task(
        kind,
        n=_require(obj, "n", where),
        length=_require(obj, "length", where),
        vocab_size=_require(obj, "vocab_size", where),
        seed=_require(obj, "seed", where),
        split=split,
    )


def parse_backbone(obj, where: str = "backbone") -> BackboneModel:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: must be an object with 'path' or 'config'+'pretrain'")
    if "path" in obj:
        return BackboneModel.load(obj["path"])
    cfg_obj = _require(obj, "config", where)
    pre_obj = _require(obj, "pretrain", where)
    cache = obj.get("cache_dir")
    if cache and Path(cache, "arch.json").exists():
        return BackboneModel.load(cache)
    try:
        config = BackboneConfig(**cfg_obj)
    except TypeError as err:
        raise ConfigError(f"{where}.config: {err}") from None
    task_specs = _require(pre_obj, "tasks", f"{where}.pretrain")
    tasks = [
        parse_dataset(t, f"{where}.pretrain.tasks[{i}]", split="pretrain")
        for i, t in enumerate(task_specs)
    ]
    pre_fields = {k: v for k, v in pre_obj.items() if k != "tasks"}
    try:
        pre = PretrainConfig(**pre_fields)
    except TypeError as err:
        raise ConfigError(f"{where}.pretrain: {err}") from None
    model, _ = pretrain_backbone(config, tasks, pre)
    if cache:
        model.save(cache)
    return model


@dataclass(frozen=True)
class PromptPlan:
    """One component's resolved dimensions plus its declared budget."""

    dims: PromptDims
    budget: int | None

    @property
    def params(self) -> int:
        return self.dims.param_count()


def parse_prompt_block(obj, d: int, component: str, positions: int | None = None) -> PromptPlan:
    """Resolve {m?, K, budget?, r?} into concrete dimensions.

    positions comes from the block's 'm' for prepended prompts and from
    the model grid for added prompts.  When r is omitted it is solved
    from the budget; an explicit r is still checked against the budget.
    """
    if not isinstance(obj, dict):
        raise ConfigError(f"{component}: must be an object")
    K = _require(obj, "K", component)
    validate_partition(d, K)
    if positions is None:
        positions = _require(obj, "m", component)
    budget = obj.get("budget")
    r = obj.get("r")
    if r is None:
        if budget is None:
            raise ConfigError(f"{component}: need 'r' or 'budget'")
        r = solve_rank(budget, d, positions, K)
        if r < 1:
            raise ConfigError(
                f"{component}: budget {budget} cannot afford rank 1 "
                f"(one codeword set costs {d + positions * K})"
            )
    dims = PromptDims(positions=positions, d=d, K=K, r=r)
    return PromptPlan(dims=dims, budget=budget)


def check_budget(plan: PromptPlan, component: str, allow_over: bool) -> None:
    if plan.budget is not None and plan.params > plan.budget and not allow_over:
        raise ConfigError(
            f"{component}: param count {plan.params} exceeds budget {plan.budget} "
            f"(pass --allow-over-budget to run anyway)"
        )


@dataclass
class ResolvedExperiment:
    raw: dict
    model: BackboneModel
    train_set: Dataset
    eval_set: Dataset
    run_config: RunConfig
    init: InitStrategy
    scpp: PromptPlan | None
    scap: PromptPlan | None
    direct_prepend: int | None  # row count for a plain prompt-tuning component

    def param_total(self) -> int:
        total = 0
        if self.scpp is not None:
            total += self.scpp.params
        if self.scap is not None:
            total += self.scap.params
        if self.direct_prepend is not None:
            total += self.direct_prepend * self.model.config.d
        return total


def resolve_experiment(spec: dict, allow_over_budget: bool = False) -> ResolvedExperiment:
    model = parse_backbone(_require(spec, "backbone", "experiment"))
    d = model.config.d
    train_set = parse_dataset(_require(spec, "train_set", "experiment"), "train_set", "train")
    eval_set = parse_dataset(_require(spec, "eval_set", "experiment"), "eval_set", "eval")
    if train_set.num_classes != eval_set.num_classes:
        raise ConfigError(
            f"train/eval class counts differ: {train_set.num_classes} vs {eval_set.num_classes}"
        )
    try:
        run_config = RunConfig(**spec.get("run", {}))
    except TypeError as err:
        raise ConfigError(f"run: {err}") from None

    scpp = scap = None
    direct = None
    if "scpp" in spec:
        scpp = parse_prompt_block(spec["scpp"], d, "scpp")
        check_budget(scpp, "scpp", allow_over_budget)
    if "scap" in spec:
        scap = parse_prompt_block(spec["scap"], d, "scap", positions=model.config.max_len)
        check_budget(scap, "scap", allow_over_budget)
    if "direct_prepend" in spec:
        block = spec["direct_prepend"]
        if not isinstance(block, dict) or "m" not in block:
            raise ConfigError("direct_prepend: must be an object with 'm'")
        if scpp is not None:
            raise ConfigError("direct_prepend and scpp are mutually exclusive")
        direct = int(block["m"])
        if direct < 1:
            raise ConfigError(f"direct_prepend.m must be >= 1, got {direct}")
    if scpp is None and scap is None and direct is None:
        raise ConfigError("experiment needs at least one of scpp, scap, direct_prepend")

    init_obj = spec.get("init", {"kind": "random"})
    try:
        init = InitStrategy(**init_obj)
    except TypeError as err:
        raise ConfigError(f"init: {err}") from None

    return ResolvedExperiment(
        raw=spec,
        model=model,
        train_set=train_set,
        eval_set=eval_set,
        run_config=run_config,
        init=init,
        scpp=scpp,
        scap=scap,
        direct_prepend=direct,
    )


def build_prompts(resolved: ResolvedExperiment) -> PromptSet:
    dims_p = resolved.scpp.dims if resolved.scpp else None
    dims_a = resolved.scap.dims if resolved.scap else None
    dtype = resolved.run_config.np_dtype
    seed = resolved.run_config.seed
    if dims_p is not None or dims_a is not None:
        prompts = apply_init(resolved.init, dims_p, dims_a, seed=seed, dtype=dtype)
    else:
        prompts = None
    if resolved.direct_prepend is not None:
        rng = np.random.default_rng((seed, 2))
        rows = rng.normal(0.0, 0.1, size=(resolved.direct_prepend, resolved.model.config.d))
        direct = DirectPrompt(Tensor(rows.astype(dtype), trainable=True, name="pt_rows"))
        if prompts is None:
            prompts = PromptSet(prepended=direct)
        else:
            if prompts.prepended is not None:
                raise ConfigError("cannot combine scpp with direct_prepend")
            prompts = PromptSet(prepended=direct, added=prompts.added)
    return prompts


# -- single run --------------------------------------------------------------------


@dataclass
class RunResult:
    run_id: str
    run_dir: Path
    history: RunHistory
    summary: dict


def run_experiment(
    spec: dict,
    runs_root,
    allow_over_budget: bool = False,
) -> RunResult:
    """Resolve, train, evaluate, and persist one experiment run."""
    run_id = run_id_for(spec)
    run_dir = Path(runs_root) / run_id
    resolved = resolve_experiment(spec, allow_over_budget)
    prompts = build_prompts(resolved)

    started = time.perf_counter()
    prompts, history = train(
        resolved.run_config, resolved.model, prompts, resolved.train_set, resolved.eval_set
    )
    wall = time.perf_counter() - started
    final_metric = evaluate(
        resolved.model, prompts, resolved.eval_set, resolved.run_config.metric
    )

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(spec, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    write_csv(
        run_dir / "history.csv",
        ["step", "train_loss", "eval_metric"],
        [(r.step, r.train_loss, r.eval_metric) for r in history.records],
    )
    # Persist the best prompts when the run is factorized end to end;
    # a direct component exists only for baseline comparisons.
    best_dir = run_dir / "best"
    can_persist = all(
        isinstance(comp, FactorizedPrompt) for _, comp in prompts.components()
    )
    if can_persist and history.best_snapshot is not None:
        final_state = prompts.snapshot()
        prompts.load_snapshot(history.best_snapshot)
        save_checkpoint(best_dir, prompts, history)
        prompts.load_snapshot(final_state)

    counts = {
        "scpp": resolved.scpp.params if resolved.scpp else 0,
        "scap": resolved.scap.params if resolved.scap else 0,
        "direct_prepend": (
            resolved.direct_prepend * resolved.model.config.d if resolved.direct_prepend else 0
        ),
    }
    counts["total"] = sum(counts.values())
    trainable = prompts.trainable_count()
    summary = {
        "run_id": run_id,
        "config_hash": hashlib.sha256(canonical_json(spec).encode()).hexdigest(),
        "name": spec.get("name", ""),
        "metric_name": resolved.run_config.metric,
        "best_metric": history.best.metric if history.best else None,
        "best_step": history.best.step if history.best else None,
        "final_metric": float(final_metric),
        "params": counts,
        "trainable_params": trainable,
        "backbone_hash": resolved.model.hash_params(),
        "wall_time_s": wall,
        "created_unix": time.time(),
    }
    (run_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return RunResult(run_id=run_id, run_dir=run_dir, history=history, summary=summary)


# -- granularity sweep ----------------------------------------------------------------


def sweep_granularity_rows(
    budget: int,
    d: int,
    positions: int,
    t_values: list[int],
    complement: int = 0,
) -> tuple[list[tuple], list[str]]:
    """Pure arithmetic of the granularity sweep: one row per subspace width.

    The component under sweep gets budget - complement; the complement is
    the fixed cost of the other (non-swept) part and is added back into
    the reported total so totals stay comparable across configurations.

    Returns (rows, notes): rows are (t, K, r, params, total_params) and
    notes describe skipped widths that do not divide d.
    """
    if complement < 0 or complement >= budget:
        raise ConfigError(f"complement {complement} must lie in [0, budget {budget})")
    effective = budget - complement
    rows = []
    notes = []
    for t in t_values:
        if t < 1 or d % t != 0:
            notes.append(f"t={t} skipped: does not divide d={d}")
            continue
        K = d // t
        r = solve_rank(effective, d, positions, K)
        if r < 1:
            notes.append(f"t={t} skipped: effective budget {effective} affords no codewords")
            continue
        params = param_count(r, d, positions, K)
        rows.append((t, K, r, params, params + complement))
    return rows, notes


def run_sweep_granularity(
    base_spec: dict,
    component: str,
    budget: int,
    t_values: list[int],
    runs_root,
    complement: int = 0,
    positions: int | None = None,
    jobs: int = 1,
) -> tuple[list[tuple], list[str]]:
    """Train one run per granularity; returns (rows, notes).

    Rows are (t, K, r, params, total_params, metric), metric being the
    run's best eval value.
    """
    if component not in ("scpp", "scap"):
        raise ConfigError(f"component must be scpp or scap, got {component!r}")
    model = parse_backbone(_require(base_spec, "backbone", "experiment"))
    d = model.config.d
    if component == "scpp":
        if positions is None:
            positions = _require(_require(base_spec, "scpp", "experiment"), "m", "scpp")
    else:
        positions = model.config.max_len
    plan_rows, notes = sweep_granularity_rows(budget, d, positions, t_values, complement)

    cell_specs = []
    for t, K, r, params, total in plan_rows:
        spec = json.loads(json.dumps(base_spec))
        spec.pop("scpp", None)
        spec.pop("scap", None)
        spec.pop("direct_prepend", None)
        if component == "scpp":
            spec["scpp"] = {"m": positions, "K": K, "r": r}
        else:
            spec["scap"] = {"K": K, "r": r}
        spec["name"] = f"granularity-{component}-t{t}"
        cell_specs.append(spec)

    results = _run_cells(cell_specs, runs_root, jobs)
    rows = [
        plan + (res.summary["best_metric"],) for plan, res in zip(plan_rows, results)
    ]
    return rows, notes


def _run_cell(args):
    spec, runs_root = args
    return run_experiment(spec, runs_root)


def _run_cells(cell_specs: list[dict], runs_root, jobs: int) -> list[RunResult]:
    tagged = [(spec, str(runs_root)) for spec in cell_specs]
    if jobs <= 1 or len(cell_specs) <= 1:
        return [_run_cell(t) for t in tagged]
    for spec in cell_specs:
        if "path" not in spec.get("backbone", {}):
            raise ConfigError("parallel cells require a backbone checkpoint path")
    ctx = get_context("spawn")
    with ctx.Pool(processes=min(jobs, len(cell_specs))) as pool:
        return pool.map(_run_cell, tagged)


# -- ablation grid ------------------------------------------------------------------------


ABLATION_CELLS = ("pp", "pp+lc", "pp+lc+ps", "pp+ap", "pp+lc+ap", "pp+lc+ps+ap")


def run_ablate(
    base_spec: dict,
    axes: list[str],
    runs_root,
    jobs: int = 1,
) -> tuple[list[tuple], list[str]]:
    """Toggle grid over {learnable codebook, subdivision, added prompts}.

    Every cell spends the same total budget (scpp budget + scap budget
    from the base spec).  pp alone is plain prompt tuning; lc swaps in a
    K=1 codebook; ps restores the configured K; ap adds the second
    component at its own budget.  Cells whose toggles are outside the
    requested axes are omitted; infeasible cells are skipped with a note.
    """
    allowed = {"pp", "lc", "ps", "ap"}
    bad = set(axes) - allowed
    if bad:
        raise ConfigError(f"unknown ablation axes {sorted(bad)}; choose from {sorted(allowed)}")
    if "pp" not in axes:
        raise ConfigError("ablation grid is anchored on prepended prompts; include 'pp'")
    model = parse_backbone(_require(base_spec, "backbone", "experiment"))
    d = model.config.d
    scpp_block = _require(base_spec, "scpp", "ablate")
    scap_block = _require(base_spec, "scap", "ablate")
    m = _require(scpp_block, "m", "scpp")
    full_k = _require(scpp_block, "K", "scpp")
    scpp_budget = _require(scpp_block, "budget", "scpp")
    scap_budget = _require(scap_block, "budget", "scap")
    total_budget = scpp_budget + scap_budget

    cell_specs = []
    plan = []
    notes = []
    for cell in ABLATION_CELLS:
        toggles = set(cell.split("+"))
        if not toggles <= set(axes):
            continue
        spec = json.loads(json.dumps(base_spec))
        spec.pop("scpp", None)
        spec.pop("scap", None)
        spec.pop("direct_prepend", None)
        spec["name"] = f"ablate-{cell}"
        budget_pp = total_budget if "ap" not in toggles else scpp_budget
        if "lc" in toggles:
            K = full_k if "ps" in toggles else 1
            r = solve_rank(budget_pp, d, m, K)
            if r < 1:
                notes.append(f"{cell} skipped: budget {budget_pp} affords no codewords at K={K}")
                continue
            spec["scpp"] = {"m": m, "K": K, "r": r, "budget": budget_pp}
            params_pp = param_count(r, d, m, K)
        else:
            rows = budget_pp // d
            if rows < 1:
                notes.append(f"{cell} skipped: budget {budget_pp} affords no prompt rows")
                continue
            spec["direct_prepend"] = {"m": rows}
            params_pp = rows * d
        params_ap = 0
        if "ap" in toggles:
            spec["scap"] = dict(scap_block)
            ap_plan = parse_prompt_block(spec["scap"], d, "scap", positions=model.config.max_len)
            params_ap = ap_plan.params
        plan.append((cell, params_pp, params_ap, params_pp + params_ap))
        cell_specs.append(spec)

    results = _run_cells(cell_specs, runs_root, jobs)
    rows = [
        (cell, pp_params, ap_params, total, res.summary["best_metric"])
        for (cell, pp_params, ap_params, total), res in zip(plan, results)
    ]
    return rows, notes


# -- few-shot protocol ----------------------------------------------------------------------


def run_fewshot(
    base_spec: dict,
    gammas: list[int],
    num_seeds: int,
    runs_root,
) -> dict:
    """Per-gamma few-shot runs plus mean/std aggregation.

    Re-reads every per-run value out of the written CSV before
    aggregating, so the summary provably matches the files.
    """
    if num_seeds < 1:
        raise ConfigError(f"need at least one seed, got {num_seeds}")
    if any(g < 1 for g in gammas):
        raise ConfigError(f"gammas must be positive, got {gammas}")
    resolved = resolve_experiment(base_spec)
    root = Path(runs_root)
    sweep_dir = root / f"fewshot-{run_id_for(base_spec)}"
    sweep_dir.mkdir(parents=True, exist_ok=True)

    per_gamma_files = {}
    for gamma in gammas:
        spec_seeded = FewShotSpec(
            gamma=gamma, num_seeds=num_seeds, base_seed=resolved.run_config.seed
        )
        rows = []
        for seed_index in range(num_seeds):
            subset = fewshot_sample(resolved.train_set, spec_seeded, seed_index)
            run_cfg = replace(resolved.run_config, seed=resolved.run_config.seed + seed_index)
            prompts = build_prompts(replace(resolved, run_config=run_cfg, train_set=subset))
            prompts, history = train(run_cfg, resolved.model, prompts, subset, resolved.eval_set)
            score = (
                history.best.metric
                if history.best is not None
                else evaluate(resolved.model, prompts, resolved.eval_set, run_cfg.metric)
            )
            rows.append((run_cfg.metric, float(score), seed_index))
        path = sweep_dir / f"gamma{gamma}.csv"
        write_csv(path, ["metric", "value", "seed"], rows)
        per_gamma_files[gamma] = path

    # Aggregate strictly from what the per-run files say.
    agg_rows = []
    for gamma in gammas:
        _, raw_rows = read_csv_rows(per_gamma_files[gamma])
        values = [float(row[1]) for row in raw_rows]
        mean, std = fewshot_report(values)
        agg_rows.append((gamma, mean, std, len(values)))
    agg_path = sweep_dir / "summary.csv"
    write_csv(agg_path, ["gamma", "mean", "std", "n_seeds"], agg_rows)
    return {
        "dir": sweep_dir,
        "per_gamma": per_gamma_files,
        "summary": agg_path,
        "rows": agg_rows,
    }


# -- prompt-length sweep -----------------------------------------------------------------------


def run_length_sweep(
    base_spec: dict,
    lengths: list[int],
    runs_root,
    jobs: int = 1,
) -> list[tuple]:
    """Metric and relative wall time per prompt length at a fixed budget.

    The rank is re-solved per length; length 0 drops the prepended
    component entirely.  Wall times are normalized to the largest
    requested length, whose entry is exactly 1.0.  The time column is the
    one deliberately non-reproducible output: it measures this host.
    """
    if not lengths:
        raise ConfigError("need at least one length")
    if any(m < 0 for m in lengths):
        raise ConfigError(f"lengths must be >= 0, got {lengths}")
    if len(set(lengths)) != len(lengths):
        raise ConfigError(f"duplicate lengths in {lengths}")
    model = parse_backbone(_require(base_spec, "backbone", "experiment"))
    d = model.config.d
    scpp_block = _require(base_spec, "scpp", "length sweep")
    K = _require(scpp_block, "K", "scpp")
    budget = _require(scpp_block, "budget", "scpp")

    cell_specs = []
    kept = []
    for m in lengths:
        spec = json.loads(json.dumps(base_spec))
        spec.pop("scpp", None)
        spec.pop("direct_prepend", None)
        spec["name"] = f"length-m{m}"
        if m == 0:
            if "scap" not in spec:
                raise ConfigError("length 0 needs a scap block to train")
        else:
            r = solve_rank(budget, d, m, K)
            if r < 1:
                raise ConfigError(f"budget {budget} affords no codewords at m={m}")
            spec["scpp"] = {"m": m, "K": K, "r": r, "budget": budget}
        cell_specs.append(spec)
        kept.append(m)

    results = _run_cells(cell_specs, runs_root, jobs)
    reference = max(kept)
    ref_time = None
    for m, res in zip(kept, results):
        if m == reference:
            ref_time = res.summary["wall_time_s"]
    rows = []
    for m, res in zip(kept, results):
        rel = res.summary["wall_time_s"] / ref_time
        rows.append((m, res.summary["best_metric"], rel))
    return rows
