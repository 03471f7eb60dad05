"""Small frozen transformer classifier that learned prompts steer.

Pre-norm encoder: token embedding, a stack of attention + MLP blocks,
final norm, masked mean pooling over content rows, linear head.  Prompt
rows are prepended raw while token rows receive sinusoidal position
encodings inside forward, so a prompt of any length faces the same token
geometry.  Padding rows are excluded both as attention keys and from
pooling, which makes their contents unobservable from the logits.

Pretraining teaches the backbone a mixture of generator tasks, each cued
by a single steering row (the embedding of that task's reserved slot id).
Adaptation later swaps the steering row for a learned prompt, so the
frozen weights already know how to be steered by a prefix.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointFormatError, read_fragment, write_fragment
from .optim import AdamW, ParamRef, TrainingError, warmup_lr
from .tasks import N_TASK_SLOTS, PAD_ID, TASK_SLOT_BASE, Dataset
from .tensor import Tensor

__all__ = [
    "ArchitectureError",
    "VocabError",
    "AssemblyError",
    "BackboneConfig",
    "AssembledInput",
    "BackboneModel",
    "PretrainConfig",
    "pretrain_backbone",
    "sinusoidal_rows",
]


class ArchitectureError(ValueError):
    """Invalid model configuration or parameter set."""


class VocabError(ValueError):
    """Token id outside the configured vocabulary."""


class AssemblyError(ValueError):
    """Inputs that cannot be assembled into a forward pass."""


_DTYPES = {"f32": np.float32, "f64": np.float64}

# Additive attention bias for masked-out keys; large enough that exp()
# underflows to exactly 0.0 after the softmax max-shift in both dtypes.
_MASK_BIAS = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    vocab_size: int = 128
    max_len: int = 32
    ffn_mult: int = 4
    num_classes: int = 2
    emb_std: float = 0.1
    pe_scale: float = 0.1
    dtype: str = "f32"

    def __post_init__(self):
        for field in ("d", "layers", "heads", "vocab_size", "max_len", "ffn_mult", "num_classes"):
            v = getattr(self, field)
            if not isinstance(v, int) or v < 1:
                raise ArchitectureError(f"{field} must be a positive int, got {v!r}")
        if self.d % self.heads != 0:
            raise ArchitectureError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.vocab_size <= PAD_ID:
            raise ArchitectureError(f"vocab_size={self.vocab_size} leaves no room for padding")
        if self.dtype not in _DTYPES:
            raise ArchitectureError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.d * self.ffn_mult

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


def sinusoidal_rows(n: int, d: int, dtype=np.float64) -> np.ndarray:
    """Classic interleaved sin/cos position table, shape (n, d)."""
    if n < 1 or d < 1:
        raise ArchitectureError(f"position table needs n,d >= 1, got ({n}, {d})")
    pos = np.arange(n, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def _param_specs(cfg: BackboneConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter, in a fixed order."""
    d, f, c = cfg.d, cfg.ffn_dim, cfg.num_classes
    specs: list[tuple[str, tuple[int, ...], str]] = [("emb", (cfg.vocab_size, d), "emb")]
    for i in range(cfg.layers):
        p = f"layer{i}"
        specs += [
            (f"{p}.ln1.g", (d,), "ones"),
            (f"{p}.ln1.b", (d,), "zeros"),
            (f"{p}.attn.wq", (d, d), "proj"),
            (f"{p}.attn.bq", (d,), "zeros"),
            (f"{p}.attn.wk", (d, d), "proj"),
            (f"{p}.attn.bk", (d,), "zeros"),
            (f"{p}.attn.wv", (d, d), "proj"),
            (f"{p}.attn.bv", (d,), "zeros"),
            (f"{p}.attn.wo", (d, d), "proj"),
            (f"{p}.attn.bo", (d,), "zeros"),
            (f"{p}.ln2.g", (d,), "ones"),
            (f"{p}.ln2.b", (d,), "zeros"),
            (f"{p}.ffn.w1", (d, f), "proj"),
            (f"{p}.ffn.b1", (f,), "zeros"),
            (f"{p}.ffn.w2", (f, d), "proj"),
            (f"{p}.ffn.b2", (d,), "zeros"),
        ]
    specs += [
        ("lnf.g", (d,), "ones"),
        ("lnf.b", (d,), "zeros"),
        ("head.w", (d, c), "proj"),
        ("head.b", (c,), "zeros"),
    ]
    return specs


@dataclass
class AssembledInput:
    """Forward-ready sequence: prompt rows, then (possibly shifted) tokens.

    values is (s, d) for one example or (B, s, d) for a batch; mask marks
    attendable rows (prompt rows and real tokens, not padding) and the
    first prompt_len rows are always prompt rows.
    """

    values: Tensor
    mask: np.ndarray
    prompt_len: int


class BackboneModel:
    def __init__(self, config: BackboneConfig, params: dict[str, Tensor]):
        specs = _param_specs(config)
        expected = {name: shape for name, shape, _ in specs}
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ArchitectureError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, t in params.items():
            if t.shape != expected[name]:
                raise ArchitectureError(
                    f"parameter {name!r} has shape {t.shape}, expected {expected[name]}"
                )
            if t.dtype != config.np_dtype:
                raise ArchitectureError(
                    f"parameter {name!r} has dtype {t.dtype}, config wants {config.dtype}"
                )
        self.config = config
        self.params = dict(params)
        self._pe = sinusoidal_rows(config.max_len, config.d, config.np_dtype) * config.np_dtype(
            config.pe_scale
        )

    @classmethod
    def random_init(cls, config: BackboneConfig, seed: int) -> "BackboneModel":
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        params: dict[str, Tensor] = {}
        for name, shape, kind in _param_specs(config):
            if kind == "emb":
                arr = rng.normal(0.0, config.emb_std, size=shape)
            elif kind == "proj":
                arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            elif kind == "ones":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            params[name] = Tensor(arr.astype(dt), trainable=True, name=name)
        return cls(config, params)

    # -- parameter plumbing ------------------------------------------------

    def freeze(self, head_trainable: bool = False) -> None:
        """Make every parameter non-trainable (optionally sparing the head)."""
        for name, t in self.params.items():
            keep = head_trainable and name.startswith("head.")
            if t.trainable != keep:
                self.params[name] = Tensor(t.data, trainable=keep, name=name, dtype=t.dtype)

    @property
    def frozen(self) -> bool:
        return not any(t.trainable for t in self.params.values())

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in sorted(self.params.items()) if t.trainable]

    def param_refs(self, lr_key: str = "backbone") -> list[ParamRef]:
        refs = []
        for name, _ in self.trainable_params():
            def getter(n=name):
                return self.params[n]

            def setter(t, n=name):
                self.params[n] = t

            refs.append(ParamRef(getter, setter, lr_key, name))
        return refs

    def hash_params(self) -> str:
        """Order-independent digest of every parameter's exact bytes."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            t = self.params[name]
            h.update(name.encode("utf-8"))
            h.update(repr(t.shape).encode("ascii"))
            h.update(t.data.tobytes())
        return h.hexdigest()

    # -- input pipeline ----------------------------------------------------

    def _check_ids(self, tokens) -> list[int]:
        out = []
        v = self.config.vocab_size
        for t in tokens:
            t = int(t)
            if t < 0 or t >= v:
                raise VocabError(f"token id {t} outside vocabulary of size {v}")
            out.append(t)
        return out

    def embed(self, tokens) -> tuple[Tensor, np.ndarray]:
        """One example -> ((max_len, d) rows, (max_len,) real-token mask).

        Sequences longer than max_len are truncated; shorter ones are
        padded with the padding id, whose rows the mask excludes.
        """
        ids_list = self._check_ids(tokens)[: self.config.max_len]
        ids = np.full(self.config.max_len, PAD_ID, dtype=np.int64)
        ids[: len(ids_list)] = ids_list
        mask = np.zeros(self.config.max_len, dtype=bool)
        mask[: len(ids_list)] = True
        return T.gather_rows(self.params["emb"], ids), mask

    def embed_batch(self, token_seqs) -> tuple[Tensor, np.ndarray]:
        """Batch of examples -> ((B, max_len, d) rows, (B, max_len) mask)."""
        seqs = list(token_seqs)
        if not seqs:
            raise AssemblyError("embed_batch needs at least one sequence")
        l = self.config.max_len
        ids = np.full((len(seqs), l), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(seqs), l), dtype=bool)
        for b, seq in enumerate(seqs):
            row = self._check_ids(seq)[:l]
            ids[b, : len(row)] = row
            mask[b, : len(row)] = True
        return T.gather_rows(self.params["emb"], ids), mask

    def assemble_input(
        self,
        e: Tensor,
        mask: np.ndarray,
        prompt: Tensor | None = None,
        added: Tensor | None = None,
    ) -> AssembledInput:
        """Combine token rows with optional prepended/added prompts.

        added must match one example's token grid (max_len, d) and is
        summed onto every example's token rows; prompt is (m, d) and is
        prepended (replicated across the batch), extending the mask with
        m attendable rows.
        """
        if e.ndim not in (2, 3) or e.shape[-1] != self.config.d:
            raise AssemblyError(f"token rows must be (..., {self.config.d}), got {e.shape}")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != e.shape[:-1]:
            raise AssemblyError(f"mask shape {mask.shape} does not match rows {e.shape}")
        vals = e
        if added is not None:
            if added.shape != e.shape[-2:]:
                raise AssemblyError(
                    f"added prompt must be shape {e.shape[-2:]}, got {added.shape}"
                )
            vals = T.add(vals, added)
        m = 0
        if prompt is not None:
            if prompt.ndim != 2 or prompt.shape[1] != self.config.d:
                raise AssemblyError(
                    f"prepended prompt must be (m, {self.config.d}), got {prompt.shape}"
                )
            m = prompt.shape[0]
            block = prompt if vals.ndim == 2 else T.expand_leading(prompt, vals.shape[0])
            vals = T.concat_rows(block, vals)
            ones = np.ones(mask.shape[:-1] + (m,), dtype=bool)
            mask = np.concatenate([ones, mask], axis=-1)
        return AssembledInput(values=vals, mask=mask, prompt_len=m)

    # -- forward -----------------------------------------------------------

    def position_grid(self, s: int, prompt_len: int) -> np.ndarray:
        """Additive position rows for a length-s sequence.

        Prompt rows stay raw (zeros); token rows get the sinusoidal table
        starting at position 0, so tokens keep the same geometry no matter
        how long the prompt in front of them is.
        """
        if not 0 <= prompt_len <= s:
            raise AssemblyError(f"prompt_len {prompt_len} outside sequence of length {s}")
        n_tok = s - prompt_len
        if n_tok > self.config.max_len:
            raise AssemblyError(f"{n_tok} token rows exceed max_len {self.config.max_len}")
        grid = np.zeros((s, self.config.d), dtype=self.config.np_dtype)
        grid[prompt_len:] = self._pe[:n_tok]
        return grid

    def forward(self, assembled: AssembledInput) -> Tensor:
        """Logits for an assembled input: (num_classes,) or (B, num_classes)."""
        cfg = self.config
        vals = assembled.values
        mask = np.asarray(assembled.mask, dtype=bool)
        single = vals.ndim == 2
        if single:
            vals = T.reshape(vals, (1,) + vals.shape)
            mask = mask[None, :]
        if vals.ndim != 3 or vals.shape[-1] != cfg.d:
            raise AssemblyError(f"values must be (B, s, {cfg.d}), got {assembled.values.shape}")
        bsz, s, _ = vals.shape
        if mask.shape != (bsz, s):
            raise AssemblyError(f"mask shape {mask.shape} does not match values {vals.shape}")
        m = int(assembled.prompt_len)
        x = T.add(vals, Tensor(self.position_grid(s, m), dtype=cfg.np_dtype))

        bias = np.where(mask, 0.0, _MASK_BIAS).astype(cfg.np_dtype)  # (B, s) keys
        bias_full = np.broadcast_to(
            bias[:, None, None, :], (bsz, cfg.heads, s, s)
        ).copy()
        bias_t = Tensor(bias_full, dtype=cfg.np_dtype)

        for i in range(cfg.layers):
            try:
                x = self._block(x, i, bias_t, bsz, s)
            except T.NonFiniteError as err:
                raise T.NonFiniteError(f"layer {i}: {err}") from None
        x = T.layer_norm(x, self.params["lnf.g"], self.params["lnf.b"])

        pool_mask = mask.copy()
        pool_mask[:, :m] = False
        if (pool_mask.sum(axis=1) == 0).any():
            raise AssemblyError("an example has no real token rows to pool")
        pooled = T.masked_mean_rows(x, pool_mask)
        logits = T.add(T.matmul(pooled, self.params["head.w"]), self.params["head.b"])
        if single:
            logits = T.reshape(logits, (cfg.num_classes,))
        return logits

    def _block(self, x: Tensor, i: int, bias_t: Tensor, bsz: int, s: int) -> Tensor:
        cfg = self.config
        p = self.params
        hd = cfg.head_dim

        def heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (bsz, s, cfg.heads, hd)), (0, 2, 1, 3))

        pre = T.layer_norm(x, p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])
        q = heads(T.add(T.matmul(pre, p[f"layer{i}.attn.wq"]), p[f"layer{i}.attn.bq"]))
        k = heads(T.add(T.matmul(pre, p[f"layer{i}.attn.wk"]), p[f"layer{i}.attn.bk"]))
        v = heads(T.add(T.matmul(pre, p[f"layer{i}.attn.wv"]), p[f"layer{i}.attn.bv"]))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        probs = T.softmax(T.add(scores, bias_t))
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (bsz, s, cfg.d))
        attn = T.add(T.matmul(ctx, p[f"layer{i}.attn.wo"]), p[f"layer{i}.attn.bo"])
        x = T.add(x, attn)

        pre2 = T.layer_norm(x, p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"])
        h = T.gelu(T.add(T.matmul(pre2, p[f"layer{i}.ffn.w1"]), p[f"layer{i}.ffn.b1"]))
        out = T.add(T.matmul(h, p[f"layer{i}.ffn.w2"]), p[f"layer{i}.ffn.b2"])
        return T.add(x, out)

    # -- persistence ---------------------------------------------------------

    def save(self, dirpath) -> None:
        """Write arch.json plus one f32 fragment per parameter."""
        d = Path(dirpath)
        d.mkdir(parents=True, exist_ok=True)
        if self.config.dtype != "f32":
            raise CheckpointFormatError("checkpoint format stores f32 models only")
        arch = asdict(self.config)
        (d / "arch.json").write_text(json.dumps(arch, sort_keys=True, indent=2) + "\n")
        for name, t in sorted(self.params.items()):
            manifest = {
                "kind": "tensor",
                "name": name,
                "shape": list(t.shape),
                "dtype": "f32",
                "byte_order": "little",
            }
            write_fragment(d, name, manifest, t.data)

    @classmethod
    def load(cls, dirpath, trainable: bool = False) -> "BackboneModel":
        d = Path(dirpath)
        apath = d / "arch.json"
        if not apath.exists():
            raise CheckpointFormatError(f"no arch.json under {d}")
        config = BackboneConfig(**json.loads(apath.read_text(encoding="utf-8")))
        params = {}
        for name, shape, _ in _param_specs(config):
            _, arr = read_fragment(d, name, shape)
            params[name] = Tensor(arr, trainable=trainable, name=name, dtype=config.np_dtype)
        return cls(config, params)


# -- pretraining -------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1200
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    weight_decay: float = 0.01
    seed: int = 0
    eval_examples: int = 256

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ArchitectureError("pretraining needs steps >= 1 and batch_size >= 1")


def _slot_prompt(model: BackboneModel, task_index: int) -> Tensor:
    """The single steering row for one source task: emb[slot id], (1, d)."""
    slot = TASK_SLOT_BASE + task_index
    return T.gather_rows(model.params["emb"], np.array([slot], dtype=np.int64))


def _batch_logits(model: BackboneModel, examples, task_index: int) -> Tensor:
    e, mask = model.embed_batch([ex.tokens for ex in examples])
    assembled = model.assemble_input(e, mask, prompt=_slot_prompt(model, task_index))
    return model.forward(assembled)


def _slot_accuracy(model: BackboneModel, ds: Dataset, task_index: int, limit: int) -> float:
    n = min(limit, len(ds))
    hits = 0
    for start in range(0, n, 64):
        chunk = ds.examples[start : min(start + 64, n)]
        logits = _batch_logits(model, chunk, task_index)
        preds = np.argmax(logits.data, axis=-1)
        hits += int(sum(int(p) == ex.label for p, ex in zip(preds, chunk)))
    return hits / n


def pretrain_backbone(
    config: BackboneConfig,
    datasets: list[Dataset],
    pre: PretrainConfig | None = None,
) -> tuple[BackboneModel, dict[str, float]]:
    """Train a fresh backbone on a task mixture, then freeze it.

    Each source task is cued by its own steering row so the network learns
    to read instructions from a prefix.  Returns the frozen model and a
    per-task accuracy report measured after freezing.
    """
    pre = pre or PretrainConfig()
    if not 1 <= len(datasets) <= N_TASK_SLOTS:
        raise ArchitectureError(
            f"need between 1 and {N_TASK_SLOTS} source tasks, got {len(datasets)}"
        )
    kinds = [ds.kind for ds in datasets]
    if len(set(kinds)) != len(kinds):
        raise ArchitectureError(f"duplicate source task kinds: {kinds}")
    for ds in datasets:
        if ds.num_classes != config.num_classes:
            raise ArchitectureError(
                f"source task {ds.kind!r} has {ds.num_classes} classes, "
                f"backbone head has {config.num_classes}"
            )

    model = BackboneModel.random_init(config, pre.seed)
    opt = AdamW(model.param_refs("backbone"), weight_decay=pre.weight_decay)
    rng = np.random.default_rng((pre.seed, len(datasets)))
    for step in range(1, pre.steps + 1):
        task_index = (step - 1) % len(datasets)
        ds = datasets[task_index]
        idx = rng.integers(0, len(ds), size=pre.batch_size)
        batch = [ds.examples[int(j)] for j in idx]
        try:
            logits = _batch_logits(model, batch, task_index)
            labels = np.array([ex.label for ex in batch], dtype=np.int64)
            loss = T.softmax_cross_entropy(logits, labels)
            grads = T.backward(loss)
        except T.NonFiniteError as err:
            raise TrainingError(f"pretraining diverged at step {step}: {err}") from None
        opt.step(grads, {"backbone": warmup_lr(pre.lr, step, pre.warmup)})

    model.freeze()
    report = {
        ds.kind: _slot_accuracy(model, ds, i, pre.eval_examples)
        for i, ds in enumerate(datasets)
    }
    return model, report
