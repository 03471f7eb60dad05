"""Adaptation loop: optimize prompt factors against a frozen backbone.

A PromptSet carries up to two components: rows prepended before the token
embeddings and rows added onto the embedding grid.  Each component is
either factorized (codebook plus combination weights) or a direct matrix
of free vectors; the direct form exists so plain prompt tuning can run
through the identical loop for comparisons.

The optimizer touches prompt parameters only.  Backbone tensors are
read-only throughout, which the tests pin down by hashing.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import BackboneModel
from .checkpoint import load_prompts, save_prompts
from .factorization import Codebook, InitError, PromptDims, WeightSet, compose, init_random
from .metrics import METRIC_NAMES, metric as compute_metric
from .optim import AdamW, ParamRef, TrainingError, warmup_lr
from .tasks import Dataset
from .tensor import Tensor

__all__ = [
    "ContractError",
    "RunConfig",
    "InitStrategy",
    "EvalRecord",
    "BestRecord",
    "RunHistory",
    "FactorizedPrompt",
    "DirectPrompt",
    "PromptSet",
    "train",
    "evaluate",
    "lr_grid_search",
    "apply_init",
    "save_checkpoint",
    "load_checkpoint",
]


class ContractError(ValueError):
    """Inputs violate a precondition of the training loop."""


_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class RunConfig:
    steps: int = 2000
    batch_size: int = 16
    warmup_steps: int = 120
    weight_decay: float = 0.01
    eval_interval: int = 100
    lr_scpp: float = 0.4
    lr_scap: float = 1e-3
    # Learning rate for an optionally unfrozen classifier head.
    lr_head: float = 1e-3
    seed: int = 0
    dtype: str = "f32"
    metric: str = "accuracy"
    # Optional early stop: halt at the first evaluation reaching this value.
    stop_at_metric: float | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ContractError(f"steps={self.steps}, batch_size={self.batch_size} invalid")
        if self.eval_interval < 1:
            raise ContractError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.steps > 0 and self.steps < self.eval_interval:
            raise ContractError(
                f"steps={self.steps} smaller than eval_interval={self.eval_interval}"
            )
        if self.steps > 0 and not 0 <= self.warmup_steps <= self.steps:
            raise ContractError(
                f"warmup_steps={self.warmup_steps} outside [0, steps={self.steps}]"
            )
        if self.dtype not in _DTYPES:
            raise ContractError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        if self.metric not in METRIC_NAMES:
            raise ContractError(f"metric must be one of {METRIC_NAMES}, got {self.metric!r}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


@dataclass(frozen=True)
class InitStrategy:
    kind: str = "random"
    path: str | None = None

    def __post_init__(self):
        kinds = ("random", "intermediate_task", "target_task")
        if self.kind not in kinds:
            raise ContractError(f"init kind must be one of {kinds}, got {self.kind!r}")
        if self.kind != "random" and not self.path:
            raise ContractError(f"init kind {self.kind!r} requires a checkpoint path")


@dataclass(frozen=True)
class EvalRecord:
    step: int
    train_loss: float
    eval_metric: float


@dataclass(frozen=True)
class BestRecord:
    step: int
    metric: float
    checkpoint_id: str


@dataclass
class RunHistory:
    records: list[EvalRecord] = field(default_factory=list)
    best: BestRecord | None = None
    # Loss at every optimization step, for trajectory-level comparisons.
    step_losses: list[float] = field(default_factory=list)
    # Prompt arrays snapshotted at the best evaluation.
    best_snapshot: dict | None = None


# -- prompt containers ---------------------------------------------------------


class FactorizedPrompt:
    """One prompt component as codebook entries mixed by weights."""

    def __init__(self, codebook: Codebook, weights: WeightSet):
        if codebook.K != weights.K or codebook.r != weights.r:
            raise ContractError(
                f"codebook (K={codebook.K}, r={codebook.r}) does not match "
                f"weights (K={weights.K}, r={weights.r})"
            )
        self.codebook = codebook
        self.weights = weights

    @property
    def positions(self) -> int:
        return self.weights.positions

    @property
    def d(self) -> int:
        return self.codebook.d

    def rows(self) -> Tensor:
        return compose(self.codebook, self.weights)

    def param_refs(self, lr_key: str) -> list[ParamRef]:
        refs = []
        if self.codebook.entries.trainable:
            refs.append(
                ParamRef(
                    lambda: self.codebook.entries,
                    lambda t: setattr(self.codebook, "entries", t),
                    lr_key,
                    f"{lr_key}.codebook",
                )
            )
        if self.weights.entries.trainable:
            refs.append(
                ParamRef(
                    lambda: self.weights.entries,
                    lambda t: setattr(self.weights, "entries", t),
                    lr_key,
                    f"{lr_key}.weights",
                )
            )
        return refs

    def trainable_count(self) -> int:
        return sum(
            t.size for t in (self.codebook.entries, self.weights.entries) if t.trainable
        )

    def snapshot(self) -> dict:
        return {
            "codebook": self.codebook.entries.data.copy(),
            "weights": self.weights.entries.data.copy(),
        }

    def load_snapshot(self, snap: dict) -> None:
        cb = self.codebook.entries
        ws = self.weights.entries
        self.codebook.entries = Tensor(
            snap["codebook"], trainable=cb.trainable, name=cb.name, dtype=cb.dtype
        )
        self.weights.entries = Tensor(
            snap["weights"], trainable=ws.trainable, name=ws.name, dtype=ws.dtype
        )


class DirectPrompt:
    """One prompt component as a plain free matrix (vanilla prompt tuning)."""

    def __init__(self, matrix: Tensor):
        if matrix.ndim != 2:
            raise ContractError(f"direct prompt must be a (positions, d) matrix, got {matrix.shape}")
        self.matrix = matrix

    @property
    def positions(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def rows(self) -> Tensor:
        return self.matrix

    def param_refs(self, lr_key: str) -> list[ParamRef]:
        if not self.matrix.trainable:
            return []
        return [
            ParamRef(
                lambda: self.matrix,
                lambda t: setattr(self, "matrix", t),
                lr_key,
                f"{lr_key}.matrix",
            )
        ]

    def trainable_count(self) -> int:
        return self.matrix.size if self.matrix.trainable else 0

    def snapshot(self) -> dict:
        return {"matrix": self.matrix.data.copy()}

    def load_snapshot(self, snap: dict) -> None:
        m = self.matrix
        self.matrix = Tensor(snap["matrix"], trainable=m.trainable, name=m.name, dtype=m.dtype)


@dataclass
class PromptSet:
    """The trainable prompt state: prepended rows and/or added rows."""

    prepended: FactorizedPrompt | DirectPrompt | None = None
    added: FactorizedPrompt | DirectPrompt | None = None

    def __post_init__(self):
        if self.prepended is None and self.added is None:
            raise ContractError("prompt set needs at least one component")

    def components(self):
        out = []
        if self.prepended is not None:
            out.append(("scpp", self.prepended))
        if self.added is not None:
            out.append(("scap", self.added))
        return out

    def param_refs(self) -> list[ParamRef]:
        refs = []
        for key, comp in self.components():
            refs.extend(comp.param_refs(key))
        return refs

    def trainable_count(self) -> int:
        return sum(comp.trainable_count() for _, comp in self.components())

    def snapshot(self) -> dict:
        return {key: comp.snapshot() for key, comp in self.components()}

    def load_snapshot(self, snap: dict) -> None:
        for key, comp in self.components():
            comp.load_snapshot(snap[key])


# -- forward plumbing ----------------------------------------------------------


def _check_dims(model: BackboneModel, prompts: PromptSet) -> None:
    d = model.config.d
    for key, comp in prompts.components():
        if comp.d != d:
            raise ContractError(f"{key} prompt is {comp.d}-dimensional, model wants {d}")
    if prompts.added is not None and prompts.added.positions != model.config.max_len:
        raise ContractError(
            f"added prompt covers {prompts.added.positions} positions, "
            f"model grid is {model.config.max_len}"
        )


def _batch_logits(model: BackboneModel, prompts: PromptSet, examples) -> Tensor:
    e, mask = model.embed_batch([ex.tokens for ex in examples])
    prepend = prompts.prepended.rows() if prompts.prepended is not None else None
    added = prompts.added.rows() if prompts.added is not None else None
    asm = model.assemble_input(e, mask, prompt=prepend, added=added)
    return model.forward(asm)


def _batch_loss(model: BackboneModel, prompts: PromptSet, examples, num_classes: int) -> Tensor:
    logits = _batch_logits(model, prompts, examples)
    if num_classes == 1:
        targets = np.array([ex.label for ex in examples], dtype=logits.dtype)
        return T.mean_squared_error(logits, targets)
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return T.softmax_cross_entropy(logits, labels)


def evaluate(
    model: BackboneModel,
    prompts: PromptSet,
    dataset: Dataset,
    metric_name: str = "accuracy",
    batch_size: int = 64,
) -> float:
    """Metric of the current prompts over a whole dataset, deterministically."""
    preds = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.examples[start : start + batch_size]
        logits = _batch_logits(model, prompts, chunk)
        if dataset.num_classes == 1:
            preds.extend(np.asarray(logits.data).reshape(-1).tolist())
        else:
            preds.extend(np.argmax(logits.data, axis=-1).tolist())
    return compute_metric(metric_name, preds, list(dataset.labels()))


# -- the loop -------------------------------------------------------------------


def train(
    config: RunConfig,
    model: BackboneModel,
    prompts: PromptSet,
    train_set: Dataset,
    eval_set: Dataset,
) -> tuple[PromptSet, RunHistory]:
    """Adapt prompt parameters on a frozen model.

    Evaluates every eval_interval steps, recording the mean train loss
    since the previous evaluation; retains the first-seen best snapshot.
    Deterministic for a fixed config and seed.
    """
    if not model.frozen and not all(
        n.startswith("head.") for n, _ in model.trainable_params()
    ):
        raise ContractError("model must be frozen before adaptation (head may stay trainable)")
    _check_dims(model, prompts)
    if model.config.np_dtype != config.np_dtype:
        raise ContractError(
            f"config dtype {config.dtype} does not match model dtype {model.config.dtype}"
        )
    history = RunHistory()
    if config.steps == 0:
        return prompts, history

    refs = prompts.param_refs() + model.param_refs("head")
    if not refs:
        raise ContractError("nothing to train: every prompt tensor is frozen")
    opt = AdamW(refs, weight_decay=config.weight_decay)
    rng = np.random.default_rng((config.seed,))
    window: list[float] = []
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(train_set), size=config.batch_size)
        batch = [train_set.examples[int(j)] for j in idx]
        try:
            loss = _batch_loss(model, prompts, batch, train_set.num_classes)
            grads = T.backward(loss)
        except T.NonFiniteError as err:
            raise TrainingError(f"loss diverged at step {step}: {err}") from None
        lr_now = {
            "scpp": warmup_lr(config.lr_scpp, step, config.warmup_steps),
            "scap": warmup_lr(config.lr_scap, step, config.warmup_steps),
            "head": warmup_lr(config.lr_head, step, config.warmup_steps),
        }
        opt.step(grads, lr_now)
        value = float(loss.data)
        history.step_losses.append(value)
        window.append(value)
        if step % config.eval_interval == 0:
            score = evaluate(model, prompts, eval_set, config.metric)
            record = EvalRecord(
                step=step,
                train_loss=float(np.mean(window)),
                eval_metric=float(score),
            )
            history.records.append(record)
            window = []
            if history.best is None or score > history.best.metric:
                history.best = BestRecord(
                    step=step, metric=float(score), checkpoint_id=f"step{step:06d}"
                )
                history.best_snapshot = prompts.snapshot()
            if config.stop_at_metric is not None and score >= config.stop_at_metric:
                break
    return prompts, history


# -- grid search ------------------------------------------------------------------


def lr_grid_search(
    grids: dict[str, list[float]],
    config: RunConfig,
    model: BackboneModel,
    make_prompts,
    train_set: Dataset,
    eval_set: Dataset,
) -> tuple[tuple[float, float], list[tuple[float, float, float]]]:
    """Train every (lr_scpp, lr_scap) pair; return the argmax and the table.

    make_prompts() must build a fresh PromptSet per cell.  Ties go to the
    earliest pair in grid order (scpp-major).
    """
    scpp_grid = list(grids.get("scpp", []))
    scap_grid = list(grids.get("scap", []))
    if not scpp_grid or not scap_grid:
        raise ContractError("both grids must be non-empty")
    table = []
    best_pair = None
    best_score = -np.inf
    for lr_p in scpp_grid:
        for lr_a in scap_grid:
            cell_cfg = replace(config, lr_scpp=lr_p, lr_scap=lr_a)
            prompts = make_prompts()
            _, hist = train(cell_cfg, model, prompts, train_set, eval_set)
            if hist.best is not None:
                score = hist.best.metric
            else:
                score = evaluate(model, prompts, eval_set, config.metric)
            table.append((lr_p, lr_a, float(score)))
            if score > best_score:
                best_score = score
                best_pair = (lr_p, lr_a)
    return best_pair, table


# -- initialization ----------------------------------------------------------------


def apply_init(
    strategy: InitStrategy,
    dims_scpp: PromptDims | None,
    dims_scap: PromptDims | None,
    seed: int,
    dtype=np.float32,
) -> PromptSet:
    """Build the initial PromptSet for a run.

    random draws fresh factors; the checkpoint-backed kinds load previously
    trained factors and require exactly matching dimensions.
    """
    if dims_scpp is None and dims_scap is None:
        raise ContractError("at least one prompt component must be configured")
    if strategy.kind == "random":
        prepended = added = None
        if dims_scpp is not None:
            c, w = init_random(dims_scpp, seed=(seed, 0), dtype=dtype)
            prepended = FactorizedPrompt(c, w)
        if dims_scap is not None:
            c, w = init_random(dims_scap, seed=(seed, 1), dtype=dtype)
            added = FactorizedPrompt(c, w)
        return PromptSet(prepended=prepended, added=added)

    loaded = load_prompts(strategy.path, trainable=True)

    def pick(label: str, dims: PromptDims | None):
        if dims is None:
            return None
        pair = loaded.get(label)
        if pair is None:
            raise InitError(f"checkpoint {strategy.path} has no {label} component")
        comp = FactorizedPrompt(*pair)
        got = PromptDims(positions=comp.positions, d=comp.d, K=comp.codebook.K, r=comp.codebook.r)
        if got != dims:
            raise InitError(f"{label} checkpoint dims {got} do not match configured {dims}")
        return comp

    return PromptSet(prepended=pick("scpp", dims_scpp), added=pick("scap", dims_scap))


# -- persistence --------------------------------------------------------------------


def save_checkpoint(dirpath, prompts: PromptSet, history: RunHistory | None = None) -> None:
    """Write factorized prompt components (and optionally the history)."""
    for key, comp in prompts.components():
        if not isinstance(comp, FactorizedPrompt):
            raise ContractError(f"only factorized prompts persist; {key} is direct")
    pairs = {key: (comp.codebook, comp.weights) for key, comp in prompts.components()}
    save_prompts(dirpath, scpp=pairs.get("scpp"), scap=pairs.get("scap"))
    if history is not None:
        payload = {
            "records": [dataclasses.asdict(r) for r in history.records],
            "best": dataclasses.asdict(history.best) if history.best else None,
        }
        Path(dirpath, "history.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )


def load_checkpoint(dirpath, trainable: bool = True) -> tuple[PromptSet, RunHistory | None]:
    """Read prompts (and history, when present) written by save_checkpoint."""
    loaded = load_prompts(dirpath, trainable=trainable)
    prepended = FactorizedPrompt(*loaded["scpp"]) if loaded.get("scpp") else None
    added = FactorizedPrompt(*loaded["scap"]) if loaded.get("scap") else None
    prompts = PromptSet(prepended=prepended, added=added)
    history = None
    hpath = Path(dirpath, "history.json")
    if hpath.exists():
        payload = json.loads(hpath.read_text(encoding="utf-8"))
        history = RunHistory(
            records=[EvalRecord(**r) for r in payload["records"]],
            best=BestRecord(**payload["best"]) if payload["best"] else None,
        )
    return prompts, history
