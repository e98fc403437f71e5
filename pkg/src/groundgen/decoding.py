"""Trie-constrained and free autoregressive decoding, and the retrieve-then-decode pipeline."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from groundgen.errors import DegenerateEmbeddingError
from groundgen.kb import KnowledgeBase, QueryRecord
from groundgen.scorer import ScorerInterface
from groundgen.tokenizer import BYTE_OFFSET, EOS, VOCAB_SIZE, decode, decode_lossy, encode
from groundgen.trie import TokenTrie, TrieNode, build_trie, resolve
from groundgen.vindex import DEFAULT_K, VectorIndex, topk

CONSTRAINED_RETRIEVED = "constrained-retrieved"
CONSTRAINED_FULL_KB = "constrained-full-kb"
UNCONSTRAINED = "unconstrained"
MODES = (CONSTRAINED_RETRIEVED, CONSTRAINED_FULL_KB, UNCONSTRAINED)

_FREE_TOKENS = np.array([EOS, *range(BYTE_OFFSET, VOCAB_SIZE)], dtype=np.int64)


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 1
    max_len: int = 128
    mode: str = CONSTRAINED_RETRIEVED

    def __post_init__(self) -> None:
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


def beam_search(
    scorer: ScorerInterface,
    context: object,
    width: int,
    max_len: int,
    allowed: Callable[[object], np.ndarray],
    advance: Callable[[object, int], object],
    start: object,
) -> Hypothesis:
    """Generic beam search over states with per-state allowed-token sets.

    Log-probabilities come from a softmax over the full vocabulary; tokens
    outside ``allowed(state)`` are simply never expanded, which is the same as
    masking them to -inf. Equal scores are broken toward the lexicographically
    smaller token sequence.
    """
    live: list[tuple[float, tuple[int, ...], object]] = [(0.0, (), start)]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(max_len):
        cands: list[tuple[float, tuple[int, ...], object]] = []
        for lp, toks, state in live:
            scores = log_softmax(scorer.score_next(context, toks))
            ids = allowed(state)
            sub = scores[ids]
            # only the best `width` tokens from one hypothesis can survive
            order = np.lexsort((ids, -sub))[:width]
            for j in order:
                cands.append((lp + float(sub[j]), toks + (int(ids[j]),), state))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for lp, toks, state in cands[:width]:
            if toks[-1] == EOS:
                finished.append((lp, toks[:-1]))
            else:
                live.append((lp, toks, advance(state, toks[-1])))
        if not live:
            break
        if finished and max(f[0] for f in finished) >= live[0][0]:
            break
    if finished:
        lp, toks = min(finished, key=lambda f: (-f[0], f[1]))
        return Hypothesis(toks, lp, True)
    lp, toks, _ = live[0]
    return Hypothesis(toks, lp, False)


@dataclass(frozen=True)
class DecodeResult:
    identifier: str
    entity_ids: list[str]
    logprob: float
    tokens: tuple[int, ...]
    truncated: bool = False


def constrained_decode(
    scorer: ScorerInterface, context: object, trie: TokenTrie, config: DecodeConfig = DecodeConfig()
) -> DecodeResult:
    """Beam search confined to the trie; the result is always an inserted identifier."""

    def allowed(node: TrieNode) -> np.ndarray:
        return np.array(node.allowed(), dtype=np.int64)

    def advance(node: TrieNode, t: int) -> TrieNode:
        return node.children[t]

    # a path can never outgrow the longest identifier, so truncation is impossible
    hyp = beam_search(scorer, context, config.beam_width, trie.longest + 1, allowed, advance, trie.root)
    if not hyp.finished:
        raise AssertionError("constrained beam search ended without a terminal hypothesis")
    return DecodeResult(decode(hyp.tokens), resolve(trie, hyp.tokens), hyp.logprob, hyp.tokens)


def unconstrained_decode(
    scorer: ScorerInterface, context: object, config: DecodeConfig = DecodeConfig(mode=UNCONSTRAINED)
) -> DecodeResult:
    """Beam search over every byte token and EOS until EOS or ``max_len`` tokens."""
    hyp = beam_search(
        scorer, context, config.beam_width, config.max_len,
        lambda _: _FREE_TOKENS, lambda s, _t: s, None,
    )
    return DecodeResult(decode_lossy(hyp.tokens), [], hyp.logprob, hyp.tokens, truncated=not hyp.finished)


@dataclass
class Prediction:
    query_id: str
    identifier: str
    entity_ids: list[str]
    retrieved_ids: list[str]
    retrieved_scores: list[float]
    logprob: float
    retrieval_miss: bool
    grounded: bool
    truncated: bool = False

    def to_json(self, audit_top: int = 20) -> dict:
        return {
            "query_id": self.query_id,
            "identifier": self.identifier,
            "entity_ids": self.entity_ids,
            "retrieved_ids": self.retrieved_ids[:audit_top],
            "retrieved_scores": [round(s, 7) for s in self.retrieved_scores[:audit_top]],
            "logprob": self.logprob,
            "retrieval_miss": self.retrieval_miss,
            "grounded": self.grounded,
            "truncated": self.truncated,
        }


class Predictor:
    """Runs retrieval and decoding for many queries against one index and KB."""

    def __init__(
        self,
        scorer: ScorerInterface,
        index: VectorIndex,
        kb: KnowledgeBase,
        k: int = DEFAULT_K,
        config: DecodeConfig = DecodeConfig(),
    ) -> None:
        if k < 1:
            raise ValueError("k must be >= 1")
        self.scorer = scorer
        self.index = index
        self.kb = kb
        self.k = k
        self.config = config
        self.tokens = {e.entity_id: encode(e.identifier) for e in kb}
        self.by_identifier: dict[str, list[str]] = {}
        for e in kb:
            self.by_identifier.setdefault(e.identifier, []).append(e.entity_id)
        self._full_trie: TokenTrie | None = None

    @property
    def full_trie(self) -> TokenTrie:
        if self._full_trie is None:
            self._full_trie = build_trie(self.tokens.items())
        return self._full_trie

    def retrieve(self, query: QueryRecord):
        context = self.scorer.encode_context(query.image_feature, query.question)
        vec = np.asarray(self.scorer.retrieval_vector(context), dtype=np.float64)
        norm = np.linalg.norm(vec)
        if norm == 0.0 or not np.isfinite(norm):
            raise DegenerateEmbeddingError(f"query {query.query_id!r}: degenerate retrieval vector")
        return context, topk(self.index, vec / norm, self.k, precise=True)

    def predict(self, query: QueryRecord) -> Prediction:
        context, result = self.retrieve(query)
        retrieved = result.ids
        mode = self.config.mode
        if mode == CONSTRAINED_RETRIEVED:
            trie = build_trie((eid, self.tokens[eid]) for eid in retrieved)
            out = constrained_decode(self.scorer, context, trie, self.config)
            miss = query.gold_entity_id not in set(retrieved)
        elif mode == CONSTRAINED_FULL_KB:
            out = constrained_decode(self.scorer, context, self.full_trie, self.config)
            miss = query.gold_entity_id not in self.kb
        else:
            out = unconstrained_decode(self.scorer, context, self.config)
            out = DecodeResult(
                out.identifier, sorted(self.by_identifier.get(out.identifier, [])),
                out.logprob, out.tokens, out.truncated,
            )
            miss = query.gold_entity_id not in set(retrieved)
        return Prediction(
            query_id=query.query_id,
            identifier=out.identifier,
            entity_ids=list(out.entity_ids),
            retrieved_ids=retrieved,
            retrieved_scores=result.scores,
            logprob=out.logprob,
            retrieval_miss=miss,
            grounded=bool(out.entity_ids),
            truncated=out.truncated,
        )

    def predict_all(self, queries: Sequence[QueryRecord], jobs: int = 1) -> list[Prediction]:
        if jobs > 1:
            _ = self.full_trie if self.config.mode == CONSTRAINED_FULL_KB else None
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                return list(pool.map(self.predict, queries))
        return [self.predict(q) for q in queries]


def retrieve_then_decode(
    scorer: ScorerInterface,
    query: QueryRecord,
    index: VectorIndex,
    kb: KnowledgeBase,
    k: int = DEFAULT_K,
    config: DecodeConfig = DecodeConfig(),
) -> Prediction:
    return Predictor(scorer, index, kb, k, config).predict(query)
