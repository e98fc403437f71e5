"""Synthetic knowledge bases with confusable entity clusters."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from groundgen.errors import SynthError
from groundgen.kb import EntityRecord, KnowledgeBase, QueryRecord, save_kb, save_queries
from groundgen.seeding import substream

_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
_NOUNS = ("aircraft", "bird", "car", "tower", "flower", "ship", "bridge", "lizard", "train", "lamp")
_ADJ = ("small", "large", "red", "grey", "old", "modern", "striped", "tall", "round", "bright")
_ENTITY_QUESTIONS = (
    "what is this?",
    "what is shown in the image?",
    "which entity is this?",
)
_QUERY_QUESTIONS = (
    "what is the name of the object in the middle?",
    "which model is visible here?",
    "what is the specific kind of this thing?",
)


@dataclass(frozen=True)
class SynthConfig:
    n_entities: int = 200
    n_train: int = 2000
    n_eval: int = 400
    d_img: int = 32
    n_clusters: int = 20
    unseen_fraction: float = 0.2
    cluster_spread: float = 0.6
    query_noise: float = 0.25
    seed: int = 0


@dataclass
class SynthFixture:
    kb: KnowledgeBase
    train: list[QueryRecord]
    eval: list[QueryRecord]
    unseen_ids: list[str]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "kb": out / "entities.jsonl",
            "train": out / "train.jsonl",
            "eval": out / "eval.jsonl",
        }
        save_kb(self.kb, paths["kb"])
        save_queries(self.train, paths["train"])
        save_queries(self.eval, paths["eval"])
        return paths


def _identifier(rng: np.random.Generator, taken: set[str]) -> str:
    while True:
        n = int(rng.integers(3, 21))
        chars = [_ALPHABET[int(i)] for i in rng.integers(len(_ALPHABET), size=n)]
        # an interior space now and then keeps identifiers name-like
        if n >= 6 and rng.random() < 0.5:
            chars[int(rng.integers(2, n - 2))] = " "
        text = "".join(chars)
        if text not in taken:
            taken.add(text)
            return text


def _round6(v: np.ndarray) -> tuple[float, ...]:
    return tuple(float(x) for x in np.round(v, 6))


def synth_fixture(config: SynthConfig = SynthConfig()) -> SynthFixture:
    if config.n_entities < 2:
        raise SynthError("need at least two entities")
    n_unseen = round(config.n_entities * config.unseen_fraction)
    if not 0.0 <= config.unseen_fraction < 1.0 or n_unseen >= config.n_entities:
        raise SynthError(f"unseen_fraction {config.unseen_fraction} leaves no seen entities")
    n_seen = config.n_entities - n_unseen
    if config.n_train < n_seen:
        raise SynthError(f"{config.n_train} training queries cannot cover {n_seen} seen entities")
    if n_unseen and round(config.n_eval * config.unseen_fraction) < 1:
        raise SynthError("evaluation split too small to hold any unseen query")
    rng = substream(config.seed, "synth")
    k = max(1, min(config.n_clusters, config.n_entities))
    centers = rng.standard_normal((k, config.d_img))
    taken: set[str] = set()
    entities: list[EntityRecord] = []
    feats = []
    width = len(str(config.n_entities))
    for i in range(config.n_entities):
        c = i % k
        feat = centers[c] + config.cluster_spread * rng.standard_normal(config.d_img)
        feats.append(feat)
        noun = _NOUNS[c % len(_NOUNS)]
        adj = _ADJ[int(rng.integers(len(_ADJ)))]
        entities.append(
            EntityRecord(
                entity_id=f"E{i:0{width}d}",
                identifier=_identifier(rng, taken),
                description=f"a {adj} {noun} from family {c}",
                image_feature=_round6(feat),
                kb_parents=(f"parent_{c // 2}",),
                vision_classes=(f"class_{c}",),
            )
        )
    order = rng.permutation(config.n_entities)
    unseen = sorted(int(i) for i in order[:n_unseen])
    seen = sorted(int(i) for i in order[n_unseen:])
    # Zipf-like popularity so frequency-weighted subsampling has something to preserve
    pop = 1.0 / np.arange(1, n_seen + 1) ** 0.25
    pop = rng.permutation(pop)
    pop /= pop.sum()

    def make_query(qid: str, ent: int, split: str, j: int) -> QueryRecord:
        subset = "entity" if j % 2 == 0 else "query"
        pool = _ENTITY_QUESTIONS if subset == "entity" else _QUERY_QUESTIONS
        noise = config.query_noise * rng.standard_normal(config.d_img)
        return QueryRecord(
            query_id=qid,
            question=pool[int(rng.integers(len(pool)))],
            image_feature=_round6(feats[ent] + noise),
            gold_entity_id=entities[ent].entity_id,
            split_tag=split,
            subset_tag=subset,
        )

    train_ents = list(seen) + [seen[int(i)] for i in rng.choice(n_seen, size=config.n_train - n_seen, p=pop)]
    train_ents = [train_ents[int(i)] for i in rng.permutation(len(train_ents))]
    train = [make_query(f"T{j:06d}", e, "seen", j) for j, e in enumerate(train_ents)]

    n_eval_unseen = round(config.n_eval * config.unseen_fraction) if n_unseen else 0
    eval_ents = [(unseen[j % n_unseen], "unseen") for j in range(n_eval_unseen)]
    eval_ents += [(seen[int(i)], "seen") for i in rng.choice(n_seen, size=config.n_eval - n_eval_unseen, p=pop)]
    eval_ents = [eval_ents[int(i)] for i in rng.permutation(len(eval_ents))]
    evalq = [make_query(f"V{j:06d}", e, split, j) for j, (e, split) in enumerate(eval_ents)]
    return SynthFixture(
        KnowledgeBase.from_records(entities),
        train,
        evalq,
        [entities[i].entity_id for i in unseen],
    )
