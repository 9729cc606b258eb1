"""Filtered link-prediction evaluation: ranks, MRR, Hits@{1,3,10}.

For each triple both directions are scored against every entity; all other
known-true answers of the query are removed from the candidate list before
ranking (the target itself is always kept). Ties are resolved by the
configured policy, "average" by default.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError
from .model import ModelParams, all_entity_logits

TIE_POLICIES = ("average", "optimistic", "pessimistic")
HITS_AT = (1, 3, 10)


@dataclass
class RankRecord:
    relation: int
    direction: str
    rank: float  # unrounded; tie policy already applied


@dataclass
class MetricsReport:
    mrr: float
    hits: dict[int, float]
    per_relation: dict[int, float]
    per_direction: dict[str, dict]
    triple_count: int
    records: list[RankRecord] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "hits1": self.hits[1],
            "hits3": self.hits[3],
            "hits10": self.hits[10],
            "per_relation": {str(k): v for k, v in sorted(self.per_relation.items())},
            "per_direction": self.per_direction,
            "triple_count": self.triple_count,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def format_table(self, relation_names: list[str] | None = None) -> str:
        lines = [
            f"{'':10s} {'MRR':>8s} {'H@1':>8s} {'H@3':>8s} {'H@10':>8s}",
            f"{'overall':10s} {self.mrr:8.4f} {self.hits[1]:8.4f} {self.hits[3]:8.4f} {self.hits[10]:8.4f}",
        ]
        for direction in ("tail", "head"):
            d = self.per_direction[direction]
            lines.append(
                f"{direction:10s} {d['mrr']:8.4f} {d['hits1']:8.4f} {d['hits3']:8.4f} {d['hits10']:8.4f}"
            )
        lines.append(f"triples: {self.triple_count}")
        if self.per_relation:
            lines.append("per-relation MRR:")
            for rel, mrr in sorted(self.per_relation.items()):
                name = relation_names[rel] if relation_names else str(rel)
                lines.append(f"  {name:40s} {mrr:8.4f}")
        return "\n".join(lines)


def _rank_value(scores: np.ndarray, true_id: int, filter_ids, tie_policy: str) -> float:
    if tie_policy not in TIE_POLICIES:
        raise ValueError(f"tie_policy must be one of {TIE_POLICIES}, got {tie_policy!r}")
    if np.isnan(scores).any():
        raise EvaluationError("NaN score encountered during ranking")
    keep = np.ones(scores.shape[0], dtype=bool)
    filter_ids = np.asarray(filter_ids, dtype=np.int64)
    if filter_ids.size:
        keep[filter_ids] = False
    keep[true_id] = True  # the target itself is never filtered
    candidates = scores[keep]
    s_true = scores[true_id]
    better = int(np.count_nonzero(candidates > s_true))
    equal_others = int(np.count_nonzero(candidates == s_true)) - 1
    if tie_policy == "optimistic":
        return 1.0 + better
    if tie_policy == "pessimistic":
        return 1.0 + better + equal_others
    return 1.0 + better + equal_others / 2.0


def filtered_rank(scores, true_id: int, filter_ids, tie_policy: str = "average") -> int:
    """Rank of `true_id` among entities not in `filter_ids` (1 is best).

    The integer report rounds the average-tie rank half up; use
    `_rank_value` for the unrounded value that MRR is computed from.
    """
    scores = np.asarray(scores, dtype=np.float64)
    return int(math.floor(_rank_value(scores, true_id, filter_ids, tie_policy) + 0.5))


def _metrics(ranks: np.ndarray) -> dict:
    return {
        "mrr": float((1.0 / ranks).mean()),
        **{f"hits{k}": float((ranks <= k).mean()) for k in HITS_AT},
    }


def per_relation_report(records: list[RankRecord]) -> dict[int, float]:
    """MRR restricted to each relation, both directions pooled."""
    by_rel: dict[int, list[float]] = {}
    for rec in records:
        by_rel.setdefault(rec.relation, []).append(1.0 / rec.rank)
    return {rel: float(np.mean(vals)) for rel, vals in by_rel.items()}


def evaluate(params: ModelParams, store, split: str, filter_index,
             tie_policy: str = "average", batch_size: int = 512) -> MetricsReport:
    """Filtered metrics over one split, in deterministic evaluation mode."""
    triples = store.splits[split]
    if len(triples) == 0:
        raise EvaluationError(f"split {split!r} is empty, nothing to rank")
    records: list[RankRecord] = []
    for start in range(0, len(triples), batch_size):
        chunk = triples[start:start + batch_size]
        tail_scores = all_entity_logits(params, chunk[:, 0], chunk[:, 2], "tail").data
        head_scores = all_entity_logits(params, chunk[:, 1], chunk[:, 2], "head").data
        for row, (h, t, r) in enumerate(chunk):
            h, t, r = int(h), int(t), int(r)
            known_tails = filter_index.tails(h, r)
            rank_t = _rank_value(tail_scores[row], t, known_tails[known_tails != t], tie_policy)
            records.append(RankRecord(r, "tail", rank_t))
            known_heads = filter_index.heads(t, r)
            rank_h = _rank_value(head_scores[row], h, known_heads[known_heads != h], tie_policy)
            records.append(RankRecord(r, "head", rank_h))

    all_ranks = np.array([rec.rank for rec in records])
    per_direction = {
        direction: _metrics(np.array([rec.rank for rec in records if rec.direction == direction]))
        for direction in ("tail", "head")
    }
    return MetricsReport(
        mrr=float((1.0 / all_ranks).mean()),
        hits={k: float((all_ranks <= k).mean()) for k in HITS_AT},
        per_relation=per_relation_report(records),
        per_direction=per_direction,
        triple_count=len(triples),
        records=records,
    )
