"""Multi-partition bilinear interaction model.

Entity and relation embeddings are stored as per-partition matrices. A
relation-specific mapping matrix is generated for each partition by
contracting that partition's core tensor with the relation partition; the
triple score is the sum of per-partition quadratic forms. The core bank
holds either one tensor reused by every partition ("shared") or one
tensor per partition ("independent").
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, IdLookupError
from .tensor import BatchNorm, Tensor, n_mode_product

CORE_MODES = ("shared", "independent")
SAMPLING_MODES = ("1vsall", "kvsall")
SCORE_MODES = ("bilinear", "blockterm")


@dataclass(frozen=True)
class ModelConfig:
    num_entities: int
    num_relations: int
    k: int  # number of partitions
    ce: int  # entity partition size
    cr: int  # relation partition size
    core_mode: str = "independent"
    input_dropout: float = 0.0
    hidden_dropout: float = 0.0
    lambda_ortho: float = 0.0
    lambda_unitnorm: float = 0.0
    p_norm: int = 3
    sampling: str = "kvsall"
    batchnorm: bool = True
    bn_per_partition: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("num_entities", "num_relations", "k", "ce", "cr", "p_norm"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        for name in ("input_dropout", "hidden_dropout"):
            if not (0.0 <= getattr(self, name) < 1.0):
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        for name in ("lambda_ortho", "lambda_unitnorm"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.core_mode not in CORE_MODES:
            raise ConfigError(f"core_mode must be one of {CORE_MODES}, got {self.core_mode!r}")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")

    @property
    def entity_dim(self) -> int:
        return self.k * self.ce

    @property
    def relation_dim(self) -> int:
        return self.k * self.cr

    @property
    def num_cores(self) -> int:
        return self.k if self.core_mode == "independent" else 1


@dataclass(frozen=True)
class MappingMatrices:
    """Per-example, per-partition bilinear maps, shape (batch, K, Ce, Ce)."""

    m: Tensor


def count_params(config: ModelConfig) -> int:
    """Trainable parameter count of the embedding tables and core bank.

    Batch-norm affine parameters and optimizer state are excluded.
    """
    return (
        config.num_entities * config.k * config.ce
        + config.num_relations * config.k * config.cr
        + config.num_cores * config.ce * config.ce * config.cr
    )


def partition(flat, k: int, c: int) -> Tensor:
    """View a flat embedding vector as K contiguous partitions of size C."""
    flat = T.as_tensor(flat)
    if flat.ndim != 1:
        raise ConfigError(f"partition expects a flat vector, got shape {flat.shape}")
    if flat.shape[0] != k * c:
        raise ConfigError(f"cannot split a length-{flat.shape[0]} vector into {k} x {c}")
    return flat.reshape((k, c))


class ModelParams:
    """The full trainable state: embeddings, core bank, normalization layers.

    Tables are initialized uniform in [-b, b] with b = sqrt(6 / (fan_in +
    fan_out)) per slice: partition rows use fan_in = fan_out = C, and each
    core tensor is treated as a map from the relation partition (Cr) to a
    Ce x Ce matrix.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 core_override: Tensor | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed) if rng is None else rng

        def uniform(bound, shape):
            return rng.uniform(-bound, bound, size=shape)

        self.entity_emb = Tensor(
            uniform(np.sqrt(3.0 / config.ce), (config.num_entities, config.k, config.ce)),
            requires_grad=True,
        )
        self.relation_emb = Tensor(
            uniform(np.sqrt(3.0 / config.cr), (config.num_relations, config.k, config.cr)),
            requires_grad=True,
        )
        core_shape = (config.num_cores, config.ce, config.ce, config.cr)
        if core_override is not None:
            if tuple(core_override.shape) != core_shape:
                raise ConfigError(
                    f"core override shape {tuple(core_override.shape)} does not match {core_shape}"
                )
            self.core = core_override
        else:
            bound = np.sqrt(6.0 / (config.cr + config.ce * config.ce))
            self.core = Tensor(uniform(bound, core_shape), requires_grad=True)

        features = config.ce if config.bn_per_partition else config.entity_dim
        self.bn_input = BatchNorm(features)
        self.bn_hidden = BatchNorm(features)

    def leaves(self) -> list[tuple[str, Tensor]]:
        """Named trainable tensors, in a stable order."""
        out = [("entity_emb", self.entity_emb), ("relation_emb", self.relation_emb)]
        if self.core.requires_grad:
            out.append(("core", self.core))
        if self.config.batchnorm:
            out += [
                ("bn_input.gamma", self.bn_input.gamma),
                ("bn_input.beta", self.bn_input.beta),
                ("bn_hidden.gamma", self.bn_hidden.gamma),
                ("bn_hidden.beta", self.bn_hidden.beta),
            ]
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array needed to reconstruct the model state bitwise."""
        out = {
            "entity_emb": self.entity_emb.data,
            "relation_emb": self.relation_emb.data,
            "core": self.core.data,
        }
        for prefix, bn in (("bn_input", self.bn_input), ("bn_hidden", self.bn_hidden)):
            for key, arr in bn.state_arrays().items():
                out[f"{prefix}.{key}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.entity_emb.data = np.array(arrays["entity_emb"], dtype=np.float64)
        self.relation_emb.data = np.array(arrays["relation_emb"], dtype=np.float64)
        self.core.data = np.array(arrays["core"], dtype=np.float64)
        for prefix, bn in (("bn_input", self.bn_input), ("bn_hidden", self.bn_hidden)):
            bn.load_state_arrays(
                {key: arrays[f"{prefix}.{key}"] for key in ("gamma", "beta", "running_mean", "running_var")}
            )

def _check_ids(ids: np.ndarray, limit: int, kind: str):
    if ids.size and (ids.min() < 0 or ids.max() >= limit):
        bad = ids[(ids < 0) | (ids >= limit)][0]
        raise IdLookupError(f"{kind} id {bad} outside vocabulary of size {limit}")


def generate_mappings(params: ModelParams, relation_ids) -> MappingMatrices:
    """Mapping matrices for a batch of relations: m[n,k,i,j] = sum_l W[k,i,j,l] r[n,k,l].

    In shared core mode the single core tensor is broadcast over partitions.
    """
    rel_ids = np.asarray(relation_ids, dtype=np.int64)
    _check_ids(rel_ids, params.config.num_relations, "relation")
    rel_part = T.gather_rows(params.relation_emb, rel_ids)  # (B, K, Cr)
    return MappingMatrices(_mappings_from_partitions(params, rel_part))


def _mappings_from_partitions(params: ModelParams, rel_part: Tensor) -> Tensor:
    cfg = params.config
    b = rel_part.shape[0]
    flat_core = params.core.reshape((cfg.num_cores, cfg.ce * cfg.ce, cfg.cr))
    m = T.matmul(flat_core, rel_part.reshape((b, cfg.k, cfg.cr, 1)))  # (B, K, Ce*Ce, 1)
    return m.reshape((b, cfg.k, cfg.ce, cfg.ce))


def _normalize_and_drop(params: ModelParams, x: Tensor, layer: BatchNorm, drop_rate: float,
                        training: bool, rng) -> Tensor:
    """Batch norm (if enabled) then inverted dropout over (B, K, Ce) rows."""
    cfg = params.config
    b = x.shape[0]
    if cfg.batchnorm:
        if cfg.bn_per_partition:
            x = layer(x.reshape((b * cfg.k, cfg.ce)), training)
        else:
            x = layer(x.reshape((b, cfg.entity_dim)), training)
    x = T.dropout(x, drop_rate, rng, training)
    return x.reshape((b, cfg.k, cfg.ce))


def _hidden_rows(params: ModelParams, x: Tensor, mappings: Tensor, training: bool, rng) -> Tensor:
    """(dropout o bn)(x) mapped through M, then (dropout o bn) of the result."""
    cfg = params.config
    b = x.shape[0]
    x = _normalize_and_drop(params, x, params.bn_input, cfg.input_dropout, training, rng)
    hidden = T.matmul(x.reshape((b, cfg.k, 1, cfg.ce)), mappings)  # (B, K, 1, Ce)
    hidden = hidden.reshape((b, cfg.k, cfg.ce))
    hidden = _normalize_and_drop(params, hidden, params.bn_hidden, cfg.hidden_dropout, training, rng)
    return hidden.reshape((b, cfg.entity_dim))


def all_entity_logits(params: ModelParams, entity_ids, relation_ids, direction: str,
                      training: bool = False, rng=None) -> Tensor:
    """Scores of every entity for a batch of (known entity, relation) queries.

    direction "tail" scores h^T M_r e over all e; direction "head" scores
    e^T M_r t over all e via the transposed mapping. Returns (B, |E|).
    """
    ent_ids = np.asarray(entity_ids, dtype=np.int64)
    cfg = params.config
    _check_ids(ent_ids, cfg.num_entities, "entity")
    if direction not in ("tail", "head"):
        raise ValueError(f"direction must be 'tail' or 'head', got {direction!r}")
    m = generate_mappings(params, relation_ids).m
    if direction == "head":
        m = m.swapaxes(-1, -2)
    x = T.gather_rows(params.entity_emb, ent_ids)
    hidden = _hidden_rows(params, x, m, training, rng)
    ent = params.entity_emb.reshape((cfg.num_entities, cfg.entity_dim))
    return T.matmul(hidden, ent.swapaxes(0, 1))


def bidirectional_logits(params: ModelParams, h_ids, t_ids, r_ids, training: bool = False,
                         rng=None) -> tuple[Tensor, Tensor, Tensor]:
    """One stacked forward pass for both prediction directions of a batch.

    Rows 0..B-1 of the result are tail-direction logits (known head), rows
    B..2B-1 head-direction logits (known tail). The two directions share
    the normalization layers, so they are normalized as one batch. Also
    returns the mapping matrices and relation partitions of the batch for
    the regularization terms.
    """
    cfg = params.config
    h_ids = np.asarray(h_ids, dtype=np.int64)
    t_ids = np.asarray(t_ids, dtype=np.int64)
    r_ids = np.asarray(r_ids, dtype=np.int64)
    _check_ids(h_ids, cfg.num_entities, "entity")
    _check_ids(t_ids, cfg.num_entities, "entity")
    _check_ids(r_ids, cfg.num_relations, "relation")

    rel_part = T.gather_rows(params.relation_emb, r_ids)  # (B, K, Cr)
    mappings = _mappings_from_partitions(params, rel_part)  # (B, K, Ce, Ce)
    m_stack = T.concat_rows(mappings, mappings.swapaxes(-1, -2))  # (2B, K, Ce, Ce)
    x = T.concat_rows(T.gather_rows(params.entity_emb, h_ids),
                      T.gather_rows(params.entity_emb, t_ids))
    hidden = _hidden_rows(params, x, m_stack, training, rng)
    ent = params.entity_emb.reshape((cfg.num_entities, cfg.entity_dim))
    logits = T.matmul(hidden, ent.swapaxes(0, 1))  # (2B, |E|)
    return logits, mappings, rel_part


def score_all_tails(params: ModelParams, h_id: int, r_id: int, training_mode: bool = False,
                    rng=None) -> Tensor:
    """score(h_id, e, r_id) for every entity e, as one vector."""
    out = all_entity_logits(params, [h_id], [r_id], "tail", training_mode, rng)
    return out.reshape((params.config.num_entities,))


def score_all_heads(params: ModelParams, t_id: int, r_id: int, training_mode: bool = False,
                    rng=None) -> Tensor:
    """score(e, t_id, r_id) for every entity e, via the transposed mapping."""
    out = all_entity_logits(params, [t_id], [r_id], "head", training_mode, rng)
    return out.reshape((params.config.num_entities,))


def score(params: ModelParams, h_id: int, t_id: int, r_id: int, mode: str = "bilinear") -> float:
    """Interaction score of one triple in deterministic evaluation mode.

    "bilinear" generates the mapping matrix for each partition and applies
    the quadratic form; "blockterm" contracts the core with the head
    partition first. Both orders compute the same sum of per-partition
    scores and agree to float accumulation noise.
    """
    cfg = params.config
    ids = np.asarray([h_id, t_id], dtype=np.int64)
    _check_ids(ids, cfg.num_entities, "entity")
    _check_ids(np.asarray([r_id], dtype=np.int64), cfg.num_relations, "relation")
    if mode not in SCORE_MODES:
        raise ValueError(f"mode must be one of {SCORE_MODES}, got {mode!r}")

    hp = Tensor(params.entity_emb.data[h_id])  # (K, Ce)
    tp = params.entity_emb.data[t_id]
    rp = params.relation_emb.data[r_id]  # (K, Cr)
    hp = _normalize_and_drop(params, hp.reshape((1, cfg.k, cfg.ce)), params.bn_input,
                             0.0, training=False, rng=None).reshape((cfg.k, cfg.ce))

    if cfg.batchnorm or mode == "bilinear":
        # materialize the hidden row vector h^T M per partition
        rows = []
        for k in range(cfg.k):
            core_k = Tensor(params.core.data[min(k, cfg.num_cores - 1)])
            if mode == "bilinear":
                m_k = n_mode_product(core_k, Tensor(rp[k]), mode=3)  # (Ce, Ce)
                u_k = T.matmul(Tensor(hp.data[k]).reshape((1, cfg.ce)), m_k)
            else:
                a_k = n_mode_product(core_k, Tensor(hp.data[k]), mode=1)  # (Ce, Cr)
                u_k = T.matmul(a_k, Tensor(rp[k]).reshape((cfg.cr, 1))).swapaxes(0, 1)
            rows.append(u_k.data.reshape(cfg.ce))
        hidden = Tensor(np.stack(rows))  # (K, Ce)
        hidden = _normalize_and_drop(params, hidden.reshape((1, cfg.k, cfg.ce)),
                                     params.bn_hidden, 0.0, training=False, rng=None)
        return float(np.sum(hidden.data.reshape(cfg.k, cfg.ce) * tp))

    # pure block-term order: core x1 h x2 t x3 r, summed over partitions
    parts = np.zeros(cfg.k)
    for k in range(cfg.k):
        core_k = Tensor(params.core.data[min(k, cfg.num_cores - 1)])
        a_k = n_mode_product(core_k, Tensor(hp.data[k]), mode=1)  # (Ce, Cr), axes (t, r)
        v_k = T.matmul(Tensor(tp[k]).reshape((1, cfg.ce)), a_k)  # (1, Cr)
        parts[k] = float(v_k.data.reshape(cfg.cr) @ rp[k])
    return float(np.sum(parts))


def mean_orthogonality_gap(params: ModelParams) -> float:
    """Mean over relations and partitions of ||M_k^T M_k - I||_F."""
    cfg = params.config
    m = generate_mappings(params, np.arange(cfg.num_relations)).m.data
    gram = np.einsum("rkij,rkil->rkjl", m, m)
    gram -= np.eye(cfg.ce)
    return float(np.sqrt((gram**2).sum(axis=(2, 3))).mean())


def make_special_case(kind: str, num_entities: int, num_relations: int, k: int = 1,
                      ce: int | None = None) -> tuple[ModelConfig, Tensor]:
    """Config plus a constant core reproducing a classic bilinear model.

    "distmult" uses scalar partitions (Ce = Cr = 1) and an identity core,
    so the score is the trilinear sum over partitions. "complex" uses
    2-dimensional partitions with the rotation-scaling pattern
    [[r0, -r1], [r1, r0]]. "rescal" uses a single partition whose mapping
    matrix is the relation vector reshaped to Ce x Ce (so Cr = Ce^2).
    The returned core is non-trainable.
    """
    if kind == "distmult":
        if ce not in (None, 1):
            raise ConfigError(f"distmult requires Ce = Cr = 1, got ce={ce}")
        config = ModelConfig(num_entities, num_relations, k=k, ce=1, cr=1,
                             core_mode="shared", batchnorm=False)
        core = np.ones((1, 1, 1, 1))
    elif kind == "complex":
        if ce not in (None, 2):
            raise ConfigError(f"complex requires Ce = Cr = 2, got ce={ce}")
        config = ModelConfig(num_entities, num_relations, k=k, ce=2, cr=2,
                             core_mode="shared", batchnorm=False)
        core = np.zeros((1, 2, 2, 2))
        core[0, 0, 0, 0] = 1.0  # m[0,0] = r0
        core[0, 0, 1, 1] = -1.0  # m[0,1] = -r1
        core[0, 1, 0, 1] = 1.0  # m[1,0] = r1
        core[0, 1, 1, 0] = 1.0  # m[1,1] = r0
    elif kind == "rescal":
        if k != 1:
            raise ConfigError(f"rescal requires a single partition, got k={k}")
        if ce is None or ce < 1:
            raise ConfigError("rescal requires an explicit entity partition size")
        config = ModelConfig(num_entities, num_relations, k=1, ce=ce, cr=ce * ce,
                             core_mode="shared", batchnorm=False)
        core = np.zeros((1, ce, ce, ce * ce))
        for i in range(ce):
            for j in range(ce):
                core[0, i, j, i * ce + j] = 1.0  # m = relation vector reshaped row-major
    else:
        raise ConfigError(f"unknown special case {kind!r}")
    return config, Tensor(core, requires_grad=False)


def shared_as_independent(config: ModelConfig) -> ModelConfig:
    """The same model with the core bank widened to one tensor per partition."""
    return replace(config, core_mode="independent")
