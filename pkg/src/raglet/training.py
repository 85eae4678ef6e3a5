"""Joint training loop: generator + embedder + bias scalar on planned batches.

One seeded Philox stream drives parameter init, plan shuffles and k-means, so
a (config, corpus, seed) triple fixes every logged number. Embeddings and the
kNN index are rebuilt every `refresh_interval` steps; before the first refresh
batches come from cold-start (same-sample) plans.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import batching, retrieval
from .autodiff import Tensor, backward
from .corpus import Corpus
from .errors import CheckpointError, NumericError, UsageError
from .model import ModelConfig, init_params
from .model import forward_subbatch
from .storage import prng_state_from_json, prng_state_to_json, read_container, write_container

METRICS_HEADER = "step,loss,beta,lr,null_source_frac,same_doc_src_frac,epoch"
REFRESH_HEADER = "epoch,step,mean_pair_cosine,plan_sub_batches"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    refresh_interval: int = 200
    subbatches_per_step: int = 4
    m: int = 4
    k: int = 4
    base_lr: float = 3e-4
    warmup_steps: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 1.0
    seed: int = 0
    dtype: str = "float32"
    index_mode: str = "exact"
    n_probe: int = 8
    kmeans_iters: int = 25
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.refresh_interval < 1:
            raise UsageError("refresh_interval must be >= 1")
        if self.warmup_steps > self.steps:
            raise UsageError(f"warmup_steps ({self.warmup_steps}) must not exceed steps ({self.steps})")
        if min(self.steps, self.subbatches_per_step, self.m, self.k) < 1:
            raise UsageError("steps, subbatches_per_step, m and k must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise UsageError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.index_mode not in ("exact", "ivf"):
            raise UsageError(f"index_mode must be exact or ivf, got {self.index_mode}")

    @property
    def segment_len(self) -> int:
        return self.model.segment_len


_ALIASES = {"n": "segment_len", "i": "refresh_interval", "b": "subbatches_per_step",
            "lr": "b" "ase_lr"}
_ALIASES["lr"] = "base_lr"
_MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "model"}


def _parse_value(raw, typ):
    if isinstance(raw, (int, float)):
        return raw
    text = str(raw).strip()
    if typ is int or typ == "int":
        return int(text)
    if typ is float or typ == "float":
        return float(text)
    return text


def config_from_mapping(mapping: dict) -> TrainConfig:
    """Build a TrainConfig from flat key=value pairs; unknown keys are errors."""
    train_kw: dict = {}
    model_kw: dict = {}
    for key, raw in mapping.items():
        name = _ALIASES.get(key, key)
        if name in _TRAIN_FIELDS:
            train_kw[name] = _parse_value(raw, _TRAIN_FIELDS[name])
        elif name in _MODEL_FIELDS:
            model_kw[name] = _parse_value(raw, _MODEL_FIELDS[name])
        else:
            raise UsageError(f"unknown config key {key!r}")
    return TrainConfig(model=ModelConfig(**model_kw), **train_kw)


def config_to_flat(cfg: TrainConfig) -> dict:
    flat = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(TrainConfig) if f.name != "model"}
    flat.update({f.name: getattr(cfg.model, f.name) for f in dataclasses.fields(ModelConfig)})
    return flat


@dataclass
class TrainState:
    cfg: TrainConfig
    corpus: Corpus
    params: dict[str, Tensor]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    rng: np.random.Generator
    plan: batching.BatchPlan
    cursor: int = 0
    step: int = 0
    table: retrieval.EmbeddingTable | None = None
    index: retrieval.Index | None = None
    index_seed: int | None = None
    metrics: list[str] = field(default_factory=list)
    refresh_log: list[str] = field(default_factory=list)

    @property
    def epoch(self) -> int:
        return self.table.epoch if self.table is not None else 0

    def beta_value(self) -> float:
        return float(self.params["beta"].data)


def _draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def init_train_state(cfg: TrainConfig, corpus: Corpus) -> TrainState:
    if corpus.n_segments < 2:
        raise UsageError("training needs a corpus with at least 2 segments")
    if cfg.model.segment_len != corpus.segment_len:
        raise UsageError(f"model segment_len {cfg.model.segment_len} != corpus segment_len {corpus.segment_len}")
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    params = init_params(cfg.model, seed=_draw_seed(rng), dtype=cfg.dtype)
    plan = batching.cold_start_plan(corpus, cfg.m, seed=_draw_seed(rng))
    return TrainState(
        cfg=cfg, corpus=corpus, params=params,
        adam_m={n: np.zeros_like(p.data) for n, p in params.items()},
        adam_v={n: np.zeros_like(p.data) for n, p in params.items()},
        rng=rng, plan=plan)


def _mean_pair_cosine(plan: batching.BatchPlan, table: retrieval.EmbeddingTable) -> float:
    rows = table.row_of()
    total, count = 0.0, 0
    for sb in plan.sub_batches:
        for i, s in enumerate(sb.sources):
            for j, t in enumerate(sb.targets):
                if not sb.mask[i, j]:
                    total += float(table.vectors[rows[s.ref]] @ table.vectors[rows[t.ref]])
                    count += 1
    return total / count if count else 0.0


def _refresh(state: TrainState, step: int) -> None:
    cfg = state.cfg
    index_seed = _draw_seed(state.rng)
    plan_seed = _draw_seed(state.rng)
    state.table = retrieval.refresh_embeddings(state.params, cfg.model, state.corpus, state.table)
    assert state.table.epoch == step // cfg.refresh_interval
    state.index = retrieval.build_index(state.table, mode=cfg.index_mode,
                                        n_probe=cfg.n_probe, iters=cfg.kmeans_iters,
                                        seed=index_seed)
    state.index_seed = index_seed
    state.plan = batching.knn_plan(state.index, state.corpus, cfg.m, cfg.k,
                                   plan_seed, epoch=state.table.epoch)
    state.cursor = 0
    cos = _mean_pair_cosine(state.plan, state.table)
    state.refresh_log.append(f"{state.table.epoch},{step},{cos!r},{len(state.plan.sub_batches)}")


def _next_plan(state: TrainState) -> None:
    seed = _draw_seed(state.rng)
    if state.index is None:
        state.plan = batching.cold_start_plan(state.corpus, state.cfg.m, seed)
    else:
        state.plan = batching.knn_plan(state.index, state.corpus, state.cfg.m,
                                       state.cfg.k, seed, epoch=state.table.epoch)
    state.cursor = 0


def _take_subbatches(state: TrainState, count: int) -> list[batching.SubBatch]:
    subs: list[batching.SubBatch] = []
    while len(subs) < count:
        if state.cursor >= len(state.plan.sub_batches):
            _next_plan(state)
        subs.append(state.plan.sub_batches[state.cursor])
        state.cursor += 1
    return subs


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    return cfg.base_lr


def step(state: TrainState, subbatches: list[batching.SubBatch]) -> dict:
    """One optimizer step over the given sub-batches; returns step metrics."""
    cfg = state.cfg
    step_no = state.step + 1
    for p in state.params.values():
        p.zero_grad()

    loss_sum: Tensor | None = None
    token_count = 0
    n_targets = n_null = pairs_same = pairs_total = 0
    for sb in subbatches:
        losses = forward_subbatch(state.params, cfg.model, sb)
        part = losses.sum()
        loss_sum = part if loss_sum is None else loss_sum + part
        token_count += losses.size
        n_targets += sb.m
        n_null += int(sb.null_source.sum())
        unmasked = ~sb.mask
        pairs_total += int(unmasked.sum())
        same = np.array([s.sample_id for s in sb.sources])[:, None] == \
            np.array([t.sample_id for t in sb.targets])[None, :]
        pairs_same += int((unmasked & same).sum())
    loss = loss_sum * (1.0 / token_count)
    loss_value = float(loss.data)
    if not np.isfinite(loss_value):
        raise NumericError(f"non-finite loss {loss_value} at step {step_no}")
    backward(loss)

    grads = {n: p.grad_or_zero() for n, p in state.params.items()}
    gnorm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if cfg.clip_norm > 0 and gnorm > cfg.clip_norm:
        scale = cfg.clip_norm / gnorm
        grads = {n: g * np.asarray(scale, dtype=g.dtype) for n, g in grads.items()}

    lr = learning_rate(cfg, step_no)
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** step_no
    c2 = 1.0 - b2 ** step_no
    for name, p in state.params.items():
        g = grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.data.dtype)

    state.step = step_no
    metrics = {
        "step": step_no,
        "loss": loss_value,
        "beta": state.beta_value(),
        "lr": lr,
        "null_source_frac": n_null / n_targets if n_targets else 0.0,
        "same_doc_src_frac": pairs_same / pairs_total if pairs_total else 0.0,
        "epoch": state.epoch,
        "grad_norm": gnorm,
    }
    state.metrics.append(
        f"{step_no},{loss_value!r},{metrics['beta']!r},{lr!r},"
        f"{metrics['null_source_frac']!r},{metrics['same_doc_src_frac']!r},{state.epoch}")
    return metrics


def train(cfg: TrainConfig, corpus: Corpus, state: TrainState | None = None,
          out_dir: str | Path | None = None,
          log_every: int = 0) -> TrainState:
    """Run (or resume) training to cfg.steps; returns the final state.

    On a non-finite loss the state is dumped next to the outputs (when
    out_dir is given) and the error propagates.
    """
    if state is None:
        state = init_train_state(cfg, corpus)
    try:
        while state.step < cfg.steps:
            next_step = state.step + 1
            if next_step % cfg.refresh_interval == 0:
                _refresh(state, next_step)
            subs = _take_subbatches(state, cfg.subbatches_per_step)
            metrics = step(state, subs)
            if log_every and next_step % log_every == 0:
                print(f"step {metrics['step']} loss {metrics['loss']:.4f} "
                      f"beta {metrics['beta']:.4f} epoch {metrics['epoch']}")
    except NumericError:
        if out_dir is not None:
            save_checkpoint(state, Path(out_dir) / "nan_dump.ckpt")
        raise
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, out / "checkpoint.ckpt")
        write_metrics(state, out / "metrics.csv")
        write_refresh_log(state, out / "refresh.csv")
    return state


def write_metrics(state: TrainState, path: str | Path) -> None:
    Path(path).write_text("\n".join([METRICS_HEADER, *state.metrics]) + "\n")


def write_refresh_log(state: TrainState, path: str | Path) -> None:
    Path(path).write_text("\n".join([REFRESH_HEADER, *state.refresh_log]) + "\n")


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_VERSION = 1


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Bit-exact dump: params, optimizer moments, PRNG state, plan position."""
    meta = {
        "kind": "checkpoint",
        "version": CHECKPOINT_VERSION,
        "train_config": config_to_flat(state.cfg),
        "step": state.step,
        "corpus_id": state.corpus.corpus_id,
        "prng": prng_state_to_json(state.rng.bit_generator.state),
        "plan_kind": state.plan.kind,
        "plan_seed": state.plan.seed,
        "plan_cursor": state.cursor,
        "index_seed": state.index_seed,
        "epoch": state.epoch,
        "metrics": state.metrics,
        "refresh_log": state.refresh_log,
    }
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        arrays[f"param/{name}"] = p.data
    for name in state.params:
        arrays[f"adam_m/{name}"] = state.adam_m[name]
        arrays[f"adam_v/{name}"] = state.adam_v[name]
    if state.table is not None:
        arrays["table/vectors"] = state.table.vectors
    write_container(path, meta, arrays)


def _require(meta: dict, key: str):
    if key not in meta:
        raise CheckpointError(f"checkpoint missing field {key!r}")
    return meta[key]


def load_checkpoint(path: str | Path, corpus: Corpus) -> TrainState:
    """Rebuild a resumable TrainState; the index and plan are reconstructed
    deterministically from their stored seeds."""
    meta, arrays = read_container(path)
    if _require(meta, "kind") != "checkpoint":
        raise CheckpointError(f"not a checkpoint: kind={meta['kind']!r}")
    if _require(meta, "version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta['version']!r}")
    cfg = config_from_mapping(_require(meta, "train_config"))
    if _require(meta, "corpus_id") != corpus.corpus_id:
        raise CheckpointError(f"corpus_id mismatch: checkpoint has {meta['corpus_id']!r}, "
                              f"got corpus {corpus.corpus_id!r}")

    params: dict[str, Tensor] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        group, _, pname = name.partition("/")
        if group == "param":
            params[pname] = Tensor(arr.copy(), requires_grad=True)
        elif group == "adam_m":
            adam_m[pname] = arr.copy()
        elif group == "adam_v":
            adam_v[pname] = arr.copy()
    if set(adam_m) != set(params) or set(adam_v) != set(params):
        raise CheckpointError("checkpoint missing field 'adam moments'")

    rng = np.random.Generator(np.random.Philox(0))
    rng.bit_generator.state = prng_state_from_json(_require(meta, "prng"))

    table = index = None
    if "table/vectors" in arrays:
        table = retrieval.EmbeddingTable(vectors=arrays["table/vectors"].copy(),
                                         refs=corpus.refs(), epoch=int(_require(meta, "epoch")))
        index = retrieval.build_index(table, mode=cfg.index_mode, n_probe=cfg.n_probe,
                                      iters=cfg.kmeans_iters, seed=int(_require(meta, "index_seed")))

    plan_kind = _require(meta, "plan_kind")
    plan_seed = int(_require(meta, "plan_seed"))
    if plan_kind == "cold":
        plan = batching.cold_start_plan(corpus, cfg.m, plan_seed)
    else:
        if index is None:
            raise CheckpointError("checkpoint missing field 'table/vectors' for a knn plan")
        plan = batching.knn_plan(index, corpus, cfg.m, cfg.k, plan_seed, epoch=table.epoch)

    return TrainState(
        cfg=cfg, corpus=corpus, params=params, adam_m=adam_m, adam_v=adam_v,
        rng=rng, plan=plan, cursor=int(_require(meta, "plan_cursor")),
        step=int(_require(meta, "step")), table=table, index=index,
        index_seed=meta.get("index_seed"),
        metrics=list(meta.get("metrics", [])), refresh_log=list(meta.get("refresh_log", [])))


@dataclass
class ModelCheckpoint:
    """Read-only view of a checkpoint for evaluation."""
    params: dict[str, Tensor]
    cfg: TrainConfig
    step: int
    epoch: int
    corpus_id: str
    model_id: str


def load_model(path: str | Path) -> ModelCheckpoint:
    import hashlib

    meta, arrays = read_container(path)
    if _require(meta, "kind") != "checkpoint":
        raise CheckpointError(f"not a checkpoint: kind={meta['kind']!r}")
    cfg = config_from_mapping(_require(meta, "train_config"))
    params: dict[str, Tensor] = {}
    digest = hashlib.sha256()
    for name, arr in arrays.items():
        group, _, pname = name.partition("/")
        if group == "param":
            params[pname] = Tensor(arr.copy(), requires_grad=True)
            digest.update(pname.encode())
            digest.update(arr.tobytes())
    return ModelCheckpoint(params=params, cfg=cfg, step=int(_require(meta, "step")),
                           epoch=int(_require(meta, "epoch")),
                           corpus_id=str(_require(meta, "corpus_id")),
                           model_id=digest.hexdigest()[:16])
