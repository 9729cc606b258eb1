"""Training objective: link-prediction cross-entropy plus soft orthogonality.

Each batch of triples is scored against all entities in both prediction
directions; the cross-entropy targets are either one-hot on the triple's
answer ("1vsall") or uniform over every known-true answer of the query
("kvsall"). The regularizer pushes the batch's mapping matrices toward
the Stiefel manifold and, optionally, the relation partitions toward unit
norm. Both terms are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import MappingMatrices, ModelConfig, ModelParams, bidirectional_logits
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_ortho: float = 0.0
    lambda_unitnorm: float = 0.0
    p: int = 3

    def __post_init__(self):
        if self.lambda_ortho < 0 or self.lambda_unitnorm < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.p < 1:
            raise ConfigError(f"unit-norm exponent must be a positive integer, got {self.p}")

    @classmethod
    def from_config(cls, config: ModelConfig) -> "LossWeights":
        return cls(config.lambda_ortho, config.lambda_unitnorm, config.p_norm)


class TargetDistribution:
    """Sparse categorical rows over all entities; every row sums to one."""

    def __init__(self, num_entities: int, rows: list[tuple[np.ndarray, np.ndarray]]):
        self.num_entities = num_entities
        self.rows = rows

    def __len__(self) -> int:
        return len(self.rows)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((len(self.rows), self.num_entities))
        for n, (ids, weights) in enumerate(self.rows):
            out[n, ids] = weights
        return out


def build_targets(triples: np.ndarray, direction: str, filter_index, sampling: str,
                  num_entities: int) -> TargetDistribution:
    """Groundtruth rows for the (known entity, relation) queries of a batch.

    direction "tail" answers (h, r) queries with tail entities, "head"
    answers (t, r) queries with head entities. "1vsall" puts all mass on
    the batch triple's own answer; "kvsall" spreads it uniformly over the
    query's full answer set in `filter_index` (built from training triples,
    so the set is never empty for training queries).
    """
    triples = np.asarray(triples)
    rows = []
    for h, t, r in triples:
        if direction == "tail":
            answer, known = int(t), int(h)
        elif direction == "head":
            answer, known = int(h), int(t)
        else:
            raise ValueError(f"direction must be 'tail' or 'head', got {direction!r}")
        if sampling == "1vsall":
            rows.append((np.array([answer]), np.array([1.0])))
        elif sampling == "kvsall":
            answers = (filter_index.tails(known, int(r)) if direction == "tail"
                       else filter_index.heads(known, int(r)))
            assert answers.size > 0, "k-vs-all query with no known answers"
            rows.append((answers, np.full(answers.size, 1.0 / answers.size)))
        else:
            raise ValueError(f"sampling must be '1vsall' or 'kvsall', got {sampling!r}")
    return TargetDistribution(num_entities, rows)


def ortho_loss(mappings: MappingMatrices | Tensor, rel_partitions: Tensor,
               weights: LossWeights) -> Tensor:
    """Soft orthogonality penalty, averaged over the batch.

    Per example: lambda_ortho * ( sum_k ||M_k^T M_k - I||_F^2
    + lambda_unitnorm * sum_k |r_k^T r_k - 1|^p ). Note the nesting: the
    unit-norm term is scaled by both lambdas.
    """
    m = mappings.m if isinstance(mappings, MappingMatrices) else mappings
    batch, _, ce, _ = m.shape
    gram = T.matmul(m.swapaxes(-1, -2), m)  # (B, K, Ce, Ce)
    gap = gram - np.eye(ce)
    per_example = T.square(gap).sum(axis=(1, 2, 3))  # (B,)
    if weights.lambda_unitnorm > 0.0:
        sq_norm = T.square(rel_partitions).sum(axis=2)  # (B, K)
        unit = T.abs_pow(sq_norm - 1.0, weights.p).sum(axis=1)
        per_example = per_example + weights.lambda_unitnorm * unit
    return per_example.sum() * (weights.lambda_ortho / batch)


def link_prediction_loss(params: ModelParams, triples: np.ndarray,
                         tail_targets: TargetDistribution, head_targets: TargetDistribution,
                         training: bool = False, rng=None) -> Tensor:
    """Both-direction softmax cross-entropy, averaged over the batch."""
    triples = np.asarray(triples)
    logits, _, _ = bidirectional_logits(params, triples[:, 0], triples[:, 1], triples[:, 2],
                                        training, rng)
    return _stacked_cross_entropy(logits, tail_targets, head_targets, len(triples))


def _stacked_cross_entropy(logits: Tensor, tail_targets, head_targets, batch: int) -> Tensor:
    rows = list(tail_targets.rows) + list(head_targets.rows)
    return T.softmax_cross_entropy_sparse(logits, rows) * (1.0 / batch)


def total_loss(params: ModelParams, triples: np.ndarray, tail_targets: TargetDistribution,
               head_targets: TargetDistribution, weights: LossWeights,
               training: bool = False, rng=None) -> tuple[Tensor, dict]:
    """Link-prediction loss plus soft orthogonality; returns (loss, parts).

    With lambda_ortho = 0 the regularizer is skipped entirely, so the total
    is exactly the link-prediction term. `parts` carries the float value of
    each term for logging.
    """
    triples = np.asarray(triples)
    logits, mappings, rel_part = bidirectional_logits(
        params, triples[:, 0], triples[:, 1], triples[:, 2], training, rng
    )
    loss = _stacked_cross_entropy(logits, tail_targets, head_targets, len(triples))
    parts = {"link_prediction": loss.item(), "ortho": 0.0}
    if weights.lambda_ortho > 0.0:
        penalty = ortho_loss(mappings, rel_part, weights)
        parts["ortho"] = penalty.item()
        loss = loss + penalty
    return loss, parts
