"""End-to-end training: epochs, loss assembly, model selection, checkpoints.

Each step builds both-direction targets for a shuffled mini-batch, runs the
taped forward/backward pass in training mode, and applies Adam with the
per-epoch decayed learning rate. Validation runs at the configured cadence
and the checkpoint with the best validation MRR is retained. The metrics
log is a list of JSON-serializable events, one per evaluation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TripleStore, batches, build_filter_index, load_triples
from .errors import CheckpointError, ConfigError, DivergenceError
from .evaluation import MetricsReport, evaluate
from .model import ModelConfig, ModelParams
from .objective import LossWeights, build_targets, total_loss
from .optim import Adam, LrSchedule, lr_at
from .tensor import GradTape, backward

CKPT_MAGIC = b"MEIMCKPT"
CKPT_VERSION = 1

# hyperparameters that reproduce the published per-dataset settings
PRESETS = {
    "wn18rr": dict(k=3, ce=100, cr=100, sampling="kvsall", input_dropout=0.71,
                   hidden_dropout=0.67, lambda_ortho=1e-1, lambda_unitnorm=5e-4,
                   p_norm=3, base_lr=3e-3, lr_decay=0.99775, batch_size=1024, epochs=1000),
    "fb15k-237": dict(k=3, ce=100, cr=100, sampling="1vsall", input_dropout=0.66,
                      hidden_dropout=0.67, lambda_ortho=0.0, lambda_unitnorm=0.0,
                      p_norm=3, base_lr=3e-3, lr_decay=0.99775, batch_size=1024, epochs=1000),
    "yago3-10": dict(k=5, ce=100, cr=100, sampling="1vsall", input_dropout=0.1,
                     hidden_dropout=0.15, lambda_ortho=1e-3, lambda_unitnorm=0.0,
                     p_norm=3, base_lr=3e-3, lr_decay=0.995, batch_size=1024, epochs=1000),
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    base_lr: float = 3e-3
    lr_decay: float = 1.0
    batch_size: int = 1024
    epochs: int = 1000
    data_dir: str | None = None
    checkpoint_path: str | None = None
    log_path: str | None = None
    eval_every: int = 20
    eval_split: str = "valid"
    tie_policy: str = "average"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        LrSchedule(self.base_lr, self.lr_decay)  # validates both

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = asdict(self.model)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        data["model"] = ModelConfig(**data["model"])
        return cls(**data)


@dataclass
class Checkpoint:
    run_config: dict
    arrays: dict[str, np.ndarray]
    adam_t: int
    epoch: int
    best_val_mrr: float
    version: int = CKPT_VERSION

    @classmethod
    def capture(cls, config: RunConfig, params: ModelParams, adam: Adam, epoch: int,
                best_val_mrr: float) -> "Checkpoint":
        arrays = {k: v.copy() for k, v in params.state_arrays().items()}
        arrays.update({k: v.copy() for k, v in adam.state_arrays().items()})
        return cls(config.to_dict(), arrays, adam.t, epoch, best_val_mrr)

    def restore(self) -> tuple[RunConfig, ModelParams, Adam]:
        config = RunConfig.from_dict(self.run_config)
        params = ModelParams(config.model)
        params.load_state_arrays(self.arrays)
        adam = Adam()
        adam.load_state_arrays(self.arrays, self.adam_t)
        return config, params, adam


def save_checkpoint(ckpt: Checkpoint, path):
    """Binary format: magic, version u16, JSON meta block, length-prefixed
    named tensors of little-endian float64."""
    meta = json.dumps(
        {"run_config": ckpt.run_config, "epoch": ckpt.epoch,
         "best_val_mrr": ckpt.best_val_mrr, "adam_t": ckpt.adam_t}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", ckpt.version))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(ckpt.arrays)))
        for name, arr in ckpt.arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
        (version,) = struct.unpack_from("<H", blob, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack_from("<I", blob, 10)
        meta = json.loads(blob[14:14 + meta_len].decode("utf-8"))
        offset = 14 + meta_len
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            nbytes = int(np.prod(shape)) * 8 if ndim else 8
            if offset + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated tensor payload for {name!r}")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8,
                                         offset=offset).reshape(shape).copy()
            offset += nbytes
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from exc
    return Checkpoint(meta["run_config"], arrays, meta["adam_t"], meta["epoch"],
                      meta["best_val_mrr"])


@dataclass
class TrainResult:
    params: ModelParams
    best_checkpoint: Checkpoint | None
    metrics_log: list[dict] = field(default_factory=list)
    best_val_mrr: float = float("-inf")
    last_report: MetricsReport | None = None


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream, epoch)))


def train(config: RunConfig, store: TripleStore | None = None, resume_from=None,
          progress=None) -> TrainResult:
    """Run the full training loop and return the best checkpoint and log.

    `progress`, if given, is called with each metrics-log event (useful for
    CLI output). Resuming restores parameters and optimizer state from a
    checkpoint and continues the epoch numbering and learning-rate schedule.
    """
    if store is None:
        if config.data_dir is None:
            raise ConfigError("train needs either a data_dir or an in-memory store")
        store = load_triples(config.data_dir)
    mc = config.model
    if mc.num_entities != store.num_entities or mc.num_relations != store.num_relations:
        raise ConfigError(
            f"model sized for {mc.num_entities}x{mc.num_relations} but store has "
            f"{store.num_entities} entities and {store.num_relations} relations"
        )

    start_epoch = 0
    best_mrr = float("-inf")
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        _, params, adam = ckpt.restore()
        start_epoch = ckpt.epoch + 1
        best_mrr = ckpt.best_val_mrr
    else:
        params = ModelParams(mc)
        adam = Adam()

    schedule = LrSchedule(config.base_lr, config.lr_decay)
    weights = LossWeights.from_config(mc)
    target_index = build_filter_index(store, ("train",))  # k-vs-all answer sets
    eval_index = build_filter_index(store, ("train", "valid", "test"))
    leaves = params.leaves()
    leaf_tensors = [t for _, t in leaves]

    result = TrainResult(params, None, best_val_mrr=best_mrr)
    log_file = open(config.log_path, "a") if config.log_path else None
    last_finite = None
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at(schedule, epoch)
            drop_rng = _epoch_rng(config.seed, epoch, stream=29)
            shuffle_seed = config.seed * 1_000_003 + epoch
            epoch_loss = []
            epoch_ortho = []
            for i, batch in enumerate(batches(store, "train", config.batch_size, shuffle_seed)):
                tail_targets = build_targets(batch, "tail", target_index, mc.sampling,
                                             mc.num_entities)
                head_targets = build_targets(batch, "head", target_index, mc.sampling,
                                             mc.num_entities)
                with GradTape() as tape:
                    loss, parts = total_loss(params, batch, tail_targets, head_targets,
                                             weights, training=True, rng=drop_rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"non-finite loss {value} at epoch {epoch} batch {i}; "
                        f"last finite loss was {last_finite}"
                    )
                last_finite = value
                grads = backward(tape, loss, leaf_tensors)
                adam.step(leaves, grads, lr)
                epoch_loss.append(value)
                epoch_ortho.append(parts["ortho"])

            if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
                report = evaluate(params, store, config.eval_split, eval_index,
                                  config.tie_policy)
                event = {
                    "epoch": epoch,
                    "lr": lr,
                    "train_loss": float(np.mean(epoch_loss)),
                    "ortho_loss": float(np.mean(epoch_ortho)),
                    "val_mrr": report.mrr,
                    "val_hits1": report.hits[1],
                    "val_hits3": report.hits[3],
                    "val_hits10": report.hits[10],
                }
                result.metrics_log.append(event)
                result.last_report = report
                if log_file:
                    log_file.write(json.dumps(event) + "\n")
                    log_file.flush()
                if progress:
                    progress(event)
                if report.mrr > result.best_val_mrr:
                    result.best_val_mrr = report.mrr
                    result.best_checkpoint = Checkpoint.capture(
                        config, params, adam, epoch, report.mrr
                    )
                    if config.checkpoint_path:
                        save_checkpoint(result.best_checkpoint, config.checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    return result


def config_from_preset(preset: str | None, store: TripleStore, overrides: dict) -> RunConfig:
    """RunConfig from an optional named preset plus explicit flag overrides.

    Overrides with value None are ignored, so only flags the user actually
    passed take precedence over the preset.
    """
    base = dict(PRESETS[preset]) if preset else {}
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    model_keys = ("k", "ce", "cr", "core_mode", "input_dropout", "hidden_dropout",
                  "lambda_ortho", "lambda_unitnorm", "p_norm", "sampling", "batchnorm",
                  "bn_per_partition", "seed")
    model_kwargs = {k: merged[k] for k in model_keys if k in merged}
    model = ModelConfig(store.num_entities, store.num_relations, **model_kwargs)
    run_keys = ("base_lr", "lr_decay", "batch_size", "epochs", "data_dir", "checkpoint_path",
                "log_path", "eval_every", "eval_split", "tie_policy", "seed")
    run_kwargs = {k: merged[k] for k in run_keys if k in merged}
    return RunConfig(model=model, **run_kwargs)
