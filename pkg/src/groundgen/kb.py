"""Entity and query records, plus their JSON Lines loaders and writers."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterator, Mapping, Sequence

import numpy as np

from groundgen import binfmt
from groundgen.errors import (
    DuplicateEntityError,
    ParseError,
    ReferentialError,
    ReferentialWarning,
    SchemaError,
)

SPLIT_TAGS = ("seen", "unseen")
SUBSET_TAGS = ("entity", "query")

Vector = tuple[float, ...]


@dataclass(frozen=True)
class EntityRecord:
    entity_id: str
    identifier: str
    description: str = ""
    image_feature: Vector | None = None
    text_feature: Vector | None = None
    kb_parents: tuple[str, ...] = ()
    vision_classes: tuple[str, ...] = ()

    def to_json(self) -> dict:
        row: dict = {
            "entity_id": self.entity_id,
            "identifier": self.identifier,
            "description": self.description,
        }
        if self.image_feature is not None:
            row["image_feature"] = list(self.image_feature)
        if self.text_feature is not None:
            row["text_feature"] = list(self.text_feature)
        if self.kb_parents:
            row["kb_parents"] = list(self.kb_parents)
        if self.vision_classes:
            row["vision_classes"] = list(self.vision_classes)
        return row


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    question: str
    image_feature: Vector
    gold_entity_id: str
    split_tag: str = "seen"
    subset_tag: str = "entity"

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "question": self.question,
            "image_feature": list(self.image_feature),
            "gold_entity_id": self.gold_entity_id,
            "split_tag": self.split_tag,
            "subset_tag": self.subset_tag,
        }


@dataclass(frozen=True)
class KnowledgeBase:
    """Immutable entity collection iterated in ascending entity_id order."""

    entities: Mapping[str, EntityRecord]
    d_img: int | None = None
    d_txt: int | None = None
    _order: tuple[str, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        order = tuple(sorted(self.entities))
        frozen = MappingProxyType({eid: self.entities[eid] for eid in order})
        object.__setattr__(self, "entities", frozen)
        object.__setattr__(self, "_order", order)

    @classmethod
    def from_records(cls, records: Sequence[EntityRecord]) -> "KnowledgeBase":
        return _assemble(records, d_img=None, d_txt=None, where=lambda i: f"record {i}")

    def __len__(self) -> int:
        return len(self._order)

    def __iter__(self) -> Iterator[EntityRecord]:
        return (self.entities[eid] for eid in self._order)

    def __contains__(self, entity_id: object) -> bool:
        return entity_id in self.entities

    def __getitem__(self, entity_id: str) -> EntityRecord:
        return self.entities[entity_id]

    @property
    def ids(self) -> tuple[str, ...]:
        return self._order

    def identifier(self, entity_id: str) -> str:
        return self.entities[entity_id].identifier


def _vector(value, name: str, where: str) -> Vector | None:
    if value is None:
        return None
    if not isinstance(value, list) or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
    ):
        raise SchemaError(f"{where}: {name} must be an array of numbers")
    vec = tuple(float(x) for x in value)
    if not all(math.isfinite(x) for x in vec):
        raise SchemaError(f"{where}: {name} contains non-finite values")
    return vec


def _str_list(value, name: str, where: str) -> tuple[str, ...]:
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
        raise SchemaError(f"{where}: {name} must be an array of strings")
    return tuple(value)


def _require_str(row: dict, key: str, where: str) -> str:
    value = row.get(key)
    if not isinstance(value, str):
        raise SchemaError(f"{where}: field {key!r} missing or not a string")
    return value


def _iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(row, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, row


def entity_from_json(row: dict, where: str) -> EntityRecord:
    identifier = _require_str(row, "identifier", where)
    if not identifier:
        raise SchemaError(f"{where}: identifier must be non-empty")
    description = row.get("description", "")
    if not isinstance(description, str):
        raise SchemaError(f"{where}: description must be a string")
    return EntityRecord(
        entity_id=_require_str(row, "entity_id", where),
        identifier=identifier,
        description=description,
        image_feature=_vector(row.get("image_feature"), "image_feature", where),
        text_feature=_vector(row.get("text_feature"), "text_feature", where),
        kb_parents=_str_list(row.get("kb_parents"), "kb_parents", where),
        vision_classes=_str_list(row.get("vision_classes"), "vision_classes", where),
    )


def _assemble(records, d_img, d_txt, where) -> KnowledgeBase:
    entities: dict[str, EntityRecord] = {}
    for i, rec in enumerate(records):
        if rec.entity_id in entities:
            raise DuplicateEntityError(f"{where(i)}: duplicate entity_id {rec.entity_id!r}")
        if not rec.identifier:
            raise SchemaError(f"{where(i)}: identifier must be non-empty")
        for name, vec in (("image_feature", rec.image_feature), ("text_feature", rec.text_feature)):
            if vec is None:
                continue
            declared = d_img if name == "image_feature" else d_txt
            if declared is None:
                declared = len(vec)
                if name == "image_feature":
                    d_img = declared
                else:
                    d_txt = declared
            if len(vec) != declared:
                raise SchemaError(
                    f"{where(i)}: {name} has length {len(vec)}, declared dimension is {declared}"
                )
        entities[rec.entity_id] = rec
    return KnowledgeBase(entities, d_img=d_img, d_txt=d_txt)


def load_kb(
    path: str | Path,
    *,
    d_img: int | None = None,
    d_txt: int | None = None,
    image_sidecar: str | Path | None = None,
) -> KnowledgeBase:
    """Load an entity JSONL file.

    Dimensions not passed explicitly are fixed by the first vector seen.
    ``image_sidecar`` points at a ``GGFM`` matrix whose rows supply the image
    features of the entities in file order.
    """
    lines: list[int] = []
    records: list[EntityRecord] = []
    for lineno, row in _iter_jsonl(path):
        records.append(entity_from_json(row, f"{path}:{lineno}"))
        lines.append(lineno)
    if image_sidecar is not None:
        mat = binfmt.read_matrix(image_sidecar)
        if mat.shape[0] != len(records):
            raise SchemaError(
                f"{image_sidecar}: sidecar has {mat.shape[0]} rows for {len(records)} entities"
            )
        patched = []
        for lineno, rec, row in zip(lines, records, mat.astype(np.float64)):
            if rec.image_feature is not None:
                raise SchemaError(f"{path}:{lineno}: image_feature given inline and in sidecar")
            patched.append(replace(rec, image_feature=tuple(row.tolist())))
        records = patched
    return _assemble(records, d_img, d_txt, where=lambda i: f"{path}:{lines[i]}")


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    write_jsonl(path, (e.to_json() for e in kb))


def load_queries(path: str | Path, kb: KnowledgeBase, *, strict: bool = True) -> list[QueryRecord]:
    """Load query JSONL, validated against ``kb``; file order is preserved.

    With ``strict=False`` unknown gold entities emit a ReferentialWarning
    instead of raising, which suits inference-only runs.
    """
    out: list[QueryRecord] = []
    d_img = kb.d_img
    for lineno, row in _iter_jsonl(path):
        where = f"{path}:{lineno}"
        image = _vector(row.get("image_feature"), "image_feature", where)
        if image is None:
            raise SchemaError(f"{where}: image_feature is required")
        if d_img is None:
            d_img = len(image)
        if len(image) != d_img:
            raise SchemaError(f"{where}: image_feature has length {len(image)}, expected {d_img}")
        split = row.get("split_tag", "seen")
        subset = row.get("subset_tag", "entity")
        if split not in SPLIT_TAGS:
            raise SchemaError(f"{where}: split_tag must be one of {SPLIT_TAGS}")
        if subset not in SUBSET_TAGS:
            raise SchemaError(f"{where}: subset_tag must be one of {SUBSET_TAGS}")
        q = QueryRecord(
            query_id=_require_str(row, "query_id", where),
            question=_require_str(row, "question", where),
            image_feature=image,
            gold_entity_id=_require_str(row, "gold_entity_id", where),
            split_tag=split,
            subset_tag=subset,
        )
        if q.gold_entity_id not in kb:
            msg = f"{where}: gold_entity_id {q.gold_entity_id!r} not in knowledge base"
            if strict:
                raise ReferentialError(msg)
            warnings.warn(msg, ReferentialWarning, stacklevel=2)
        out.append(q)
    return out


def save_queries(queries: Sequence[QueryRecord], path: str | Path) -> None:
    write_jsonl(path, (q.to_json() for q in queries))


def write_jsonl(path: str | Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
