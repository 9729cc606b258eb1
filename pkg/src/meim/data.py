"""Benchmark triple files, integer vocabularies, and the filter index.

Datasets are directories with train.txt / valid.txt / test.txt, one triple
per line as "head<TAB>relation<TAB>tail". Vocabularies are assigned in
first-seen order scanning train, then valid, then test, which makes id
assignment deterministic and text round trips exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ParseError

SPLIT_FILES = {"train": "train.txt", "valid": "valid.txt", "test": "test.txt"}

_CACHE_MAGIC = b"MEIMTRPL"
_CACHE_VERSION = 1


@dataclass
class TripleStore:
    """Integer-encoded triples (h, t, r) for all splits plus vocabularies."""

    entity_names: list[str]
    relation_names: list[str]
    splits: dict[str, np.ndarray]
    entity_ids: dict[str, int] = field(init=False)
    relation_ids: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.entity_ids = {name: i for i, name in enumerate(self.entity_names)}
        self.relation_ids = {name: i for i, name in enumerate(self.relation_names)}

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def split(self, name: str) -> np.ndarray:
        return self.splits[name]

    @classmethod
    def from_ids(cls, num_entities: int, num_relations: int,
                 splits: dict[str, np.ndarray]) -> "TripleStore":
        """Store over anonymous vocabularies, e.g. loaded from a binary cache."""
        return cls(
            entity_names=[f"e{i}" for i in range(num_entities)],
            relation_names=[f"r{i}" for i in range(num_relations)],
            splits={k: np.asarray(v, dtype=np.int32).reshape(-1, 3) for k, v in splits.items()},
        )


def _parse_file(path: Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(
                    f"{path.name}:{lineno}: expected head<TAB>relation<TAB>tail, got {len(fields)} fields"
                )
            rows.append((fields[0], fields[1], fields[2]))
    return rows


def load_triples(directory) -> TripleStore:
    """Load a benchmark directory into an integer-encoded store.

    Raises FileNotFoundError for missing split files, ParseError for
    malformed lines, and ParseError for duplicate triples within a split
    (benchmark files contain none, so duplicates signal corruption).
    """
    directory = Path(directory)
    raw = {}
    for split, fname in SPLIT_FILES.items():
        path = directory / fname
        if not path.exists():
            raise FileNotFoundError(f"missing split file {path}")
        raw[split] = _parse_file(path)

    entity_names: list[str] = []
    relation_names: list[str] = []
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}

    def ent(name: str) -> int:
        if name not in ent_ids:
            ent_ids[name] = len(entity_names)
            entity_names.append(name)
        return ent_ids[name]

    def rel(name: str) -> int:
        if name not in rel_ids:
            rel_ids[name] = len(relation_names)
            relation_names.append(name)
        return rel_ids[name]

    splits = {}
    for split in ("train", "valid", "test"):
        seen = set()
        ids = np.empty((len(raw[split]), 3), dtype=np.int32)
        for i, (h, r, t) in enumerate(raw[split]):
            if (h, r, t) in seen:
                raise ParseError(f"duplicate triple in {split}: {h}\t{r}\t{t}")
            seen.add((h, r, t))
            ids[i] = (ent(h), ent(t), rel(r))
        splits[split] = ids
    return TripleStore(entity_names, relation_names, splits)


def save_triples(store: TripleStore, directory):
    """Write the store back as benchmark text files (inverse of load_triples)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, fname in SPLIT_FILES.items():
        with open(directory / fname, "w", encoding="utf-8") as fh:
            for h, t, r in store.splits[split]:
                fh.write(f"{store.entity_names[h]}\t{store.relation_names[r]}\t{store.entity_names[t]}\n")


class FilterIndex:
    """Bidirectional answer index: (h, r) -> true tails and (t, r) -> true heads."""

    def __init__(self, tail_map: dict, head_map: dict):
        self._tails = tail_map
        self._heads = head_map
        self._empty = np.empty(0, dtype=np.int32)

    def tails(self, h: int, r: int) -> np.ndarray:
        return self._tails.get((h, r), self._empty)

    def heads(self, t: int, r: int) -> np.ndarray:
        return self._heads.get((t, r), self._empty)


def build_filter_index(store: TripleStore, splits=("train", "valid", "test")) -> FilterIndex:
    """Exact answer sets over the union of the given splits, sorted ascending."""
    tails: dict[tuple[int, int], set] = {}
    heads: dict[tuple[int, int], set] = {}
    for split in splits:
        for h, t, r in store.splits[split]:
            tails.setdefault((int(h), int(r)), set()).add(int(t))
            heads.setdefault((int(t), int(r)), set()).add(int(h))
    return FilterIndex(
        {k: np.array(sorted(v), dtype=np.int32) for k, v in tails.items()},
        {k: np.array(sorted(v), dtype=np.int32) for k, v in heads.items()},
    )


def batches(store: TripleStore, split: str, batch_size: int, seed: int):
    """Seeded shuffle of one split, yielded in batches; the short tail batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    triples = store.splits[split]
    order = np.random.default_rng(seed).permutation(len(triples))
    for start in range(0, len(triples), batch_size):
        yield triples[order[start:start + batch_size]]


def save_cache(store: TripleStore, path):
    """Binary id-triple cache: magic, version, counts, then int32 LE triples."""
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<H", _CACHE_VERSION))
        fh.write(struct.pack("<II", store.num_entities, store.num_relations))
        for split in ("train", "valid", "test"):
            fh.write(struct.pack("<I", len(store.splits[split])))
        for split in ("train", "valid", "test"):
            fh.write(store.splits[split].astype("<i4").tobytes())


def load_dataset(path) -> TripleStore:
    """Load either a dataset directory or a binary cache file."""
    p = Path(path)
    if p.is_file():
        return load_cache(p)
    return load_triples(p)


def load_cache(path) -> TripleStore:
    """Read a binary cache; names are anonymous (the cache stores ids only)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CACHE_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a triple cache")
    (version,) = struct.unpack_from("<H", blob, 8)
    if version != _CACHE_VERSION:
        raise CheckpointError(f"{path}: unsupported cache version {version}")
    num_entities, num_relations = struct.unpack_from("<II", blob, 10)
    counts = struct.unpack_from("<III", blob, 18)
    offset = 30
    splits = {}
    for split, count in zip(("train", "valid", "test"), counts):
        nbytes = count * 3 * 4
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated cache payload")
        arr = np.frombuffer(blob, dtype="<i4", count=count * 3, offset=offset)
        splits[split] = arr.reshape(count, 3).astype(np.int32)
        offset += nbytes
    return TripleStore.from_ids(num_entities, num_relations, splits)
