"""Training batch construction.

Batches never contain two queries with the same gold entity. Conflicting
draws are rejected and the whole batch is redrawn; after ``max_attempts``
failures the colliding slots are swapped for random non-colliding queries.
Hard-negative groups bias batches toward confusable entities.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from groundgen.errors import EmptyGroupsWarning, InfeasibleBatchError
from groundgen.kb import KnowledgeBase, QueryRecord

log = logging.getLogger(__name__)

VISION_HARD = "vision-hard"
KB_HARD = "kb-hard"
HARD_KINDS = (VISION_HARD, KB_HARD)


@dataclass(frozen=True)
class HardNegativeGroups:
    kind: str
    groups: dict[str, list[str]]

    def __len__(self) -> int:
        return len(self.groups)


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 32
    p_hard: float = 0.5
    max_attempts: int = 100
    seed: int = 0


@dataclass
class BatchPlan:
    query_indices: list[int]
    entity_ids: list[str]
    provenance: list[str]
    attempts: int = 1
    fallback: bool = False

    def to_json(self) -> dict:
        return {
            "query_indices": self.query_indices,
            "entity_ids": self.entity_ids,
            "provenance": self.provenance,
            "attempts": self.attempts,
            "fallback": self.fallback,
        }


def build_groups(kb: KnowledgeBase, kind: str) -> HardNegativeGroups:
    """One group per metadata label shared by at least two entities."""
    if kind not in HARD_KINDS:
        raise ValueError(f"kind must be one of {HARD_KINDS}")
    members: dict[str, list[str]] = defaultdict(list)
    any_meta = False
    for e in kb:
        labels = e.vision_classes if kind == VISION_HARD else e.kb_parents
        any_meta = any_meta or bool(labels)
        for label in dict.fromkeys(labels):
            members[label].append(e.entity_id)
    groups = {g: ids for g, ids in sorted(members.items()) if len(ids) >= 2}
    if not any_meta:
        warnings.warn(f"no {kind} metadata in knowledge base; sampling is random", EmptyGroupsWarning, stacklevel=2)
    return HardNegativeGroups(kind, groups)


class BatchSampler:
    """Stateful sampler owning its RNG; successive ``sample`` calls form a stream."""

    def __init__(
        self,
        queries: Sequence[QueryRecord],
        groups: HardNegativeGroups | None,
        config: SamplerConfig,
        rng: np.random.Generator | None = None,
    ) -> None:
        self.queries = list(queries)
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.gold = [q.gold_entity_id for q in self.queries]
        by_entity: dict[str, list[int]] = defaultdict(list)
        for i, g in enumerate(self.gold):
            by_entity[g].append(i)
        self.by_entity = dict(by_entity)
        if len(self.by_entity) < config.batch_size:
            raise InfeasibleBatchError(
                f"batch size {config.batch_size} exceeds the {len(self.by_entity)} distinct gold entities"
            )
        self.hard: list[tuple[str, list[str]]] = []
        if groups is not None:
            for gid, ids in groups.groups.items():
                present = [e for e in ids if e in self.by_entity]
                if len(present) >= 2:
                    self.hard.append((gid, present))
        self.fallbacks = 0

    def _draw(self) -> tuple[list[int], list[str]]:
        n_slots = self.config.batch_size
        idx: list[int] = []
        prov: list[str] = []
        if self.hard and self.rng.random() < self.config.p_hard:
            gid, ids = self.hard[int(self.rng.integers(len(self.hard)))]
            take = min(n_slots, len(ids))
            for j in self.rng.choice(len(ids), size=take, replace=False):
                pool = self.by_entity[ids[j]]
                idx.append(pool[int(self.rng.integers(len(pool)))])
                prov.append(f"hard:{gid}")
        rest = n_slots - len(idx)
        if rest:
            idx.extend(int(i) for i in self.rng.choice(len(self.queries), size=rest, replace=False))
            prov.extend(["random"] * rest)
        return idx, prov

    def _repair(self, idx: list[int]) -> list[int]:
        used: set[str] = set()
        out = list(idx)
        clash = []
        for slot, qi in enumerate(out):
            if self.gold[qi] in used:
                clash.append(slot)
            else:
                used.add(self.gold[qi])
        for slot in clash:
            free = [i for i in range(len(self.queries)) if self.gold[i] not in used]
            qi = free[int(self.rng.integers(len(free)))]
            out[slot] = qi
            used.add(self.gold[qi])
        return out

    def sample(self) -> BatchPlan:
        n_slots = self.config.batch_size
        for attempt in range(1, self.config.max_attempts + 1):
            idx, prov = self._draw()
            golds = [self.gold[i] for i in idx]
            if len(set(golds)) == n_slots:
                return BatchPlan(idx, golds, prov, attempts=attempt)
        self.fallbacks += 1
        log.info("rejection sampling exhausted %d attempts; swap-repairing", self.config.max_attempts)
        idx = self._repair(idx)
        golds = [self.gold[i] for i in idx]
        prov = [p if self.gold[i] == g else "random" for p, i, g in zip(prov, idx, golds)]
        assert len(set(golds)) == n_slots
        return BatchPlan(idx, golds, prov, attempts=self.config.max_attempts, fallback=True)


def sample_batch(
    queries: Sequence[QueryRecord],
    groups: HardNegativeGroups | None,
    config: SamplerConfig,
) -> BatchPlan:
    return BatchSampler(queries, groups, config).sample()


def weighted_subsample(queries: Sequence[QueryRecord], fraction: float, seed: int) -> list[QueryRecord]:
    """Draw ceil(fraction * n) queries without replacement.

    Each draw picks a gold entity with probability proportional to its
    remaining occurrence count, then one of its remaining queries uniformly,
    so the subsample keeps the entity frequency profile of the full set.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    m = math.ceil(fraction * len(queries))
    remaining: dict[str, list[int]] = defaultdict(list)
    for i, q in enumerate(queries):
        remaining[q.gold_entity_id].append(i)
    entities = sorted(remaining)
    counts = np.array([len(remaining[e]) for e in entities], dtype=np.float64)
    out: list[QueryRecord] = []
    for _ in range(m):
        j = int(rng.choice(len(entities), p=counts / counts.sum()))
        pool = remaining[entities[j]]
        out.append(queries[pool.pop(int(rng.integers(len(pool))))])
        counts[j] -= 1
    return out


def entity_frequencies(queries: Sequence[QueryRecord]) -> Counter:
    return Counter(q.gold_entity_id for q in queries)
