"""Next-token scorers.

``ToyScorer`` is a bag model. The context vector is the projected image
feature plus the mean embedding of the question tokens and ``<ret>``; the
retrieval vector is a linear map of that context. Step t adds the mean
embedding of BOS plus the first t target tokens and a position embedding,
passes the sum through tanh, and projects to vocabulary logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from groundgen.tokenizer import BOS, RET, VOCAB_SIZE, encode

MAX_POSITIONS = 64


class ScorerInterface(Protocol):
    vocab_size: int

    def encode_context(self, image_feature: Sequence[float], question: str) -> object: ...

    def score_next(self, context: object, prefix: Sequence[int]) -> np.ndarray: ...

    def retrieval_vector(self, context: object) -> np.ndarray: ...


@dataclass
class ToyScorerParams:
    token_embed: np.ndarray  # V x d_e
    img_proj: np.ndarray  # d_img x d_e
    pos_embed: np.ndarray  # P x d_e
    output: np.ndarray  # d_e x V
    out_bias: np.ndarray  # V
    ret_proj: np.ndarray  # d_e x d

    NAMES = ("token_embed", "img_proj", "pos_embed", "output", "out_bias", "ret_proj")

    @classmethod
    def init(
        cls,
        d_img: int,
        d: int,
        rng: np.random.Generator,
        *,
        d_e: int = 128,
        positions: int = MAX_POSITIONS,
    ) -> "ToyScorerParams":
        return cls(
            token_embed=0.1 * rng.standard_normal((VOCAB_SIZE, d_e)),
            img_proj=rng.standard_normal((d_img, d_e)) / np.sqrt(d_img),
            pos_embed=0.1 * rng.standard_normal((positions, d_e)),
            output=0.1 * rng.standard_normal((d_e, VOCAB_SIZE)) / np.sqrt(d_e),
            out_bias=np.zeros(VOCAB_SIZE),
            ret_proj=rng.standard_normal((d_e, d)) / np.sqrt(d_e),
        )

    @property
    def d_img(self) -> int:
        return self.img_proj.shape[0]

    @property
    def d_e(self) -> int:
        return self.token_embed.shape[1]

    @property
    def d(self) -> int:
        return self.ret_proj.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.NAMES}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "ToyScorerParams":
        return cls(**{name: np.array(t[name], dtype=np.float64) for name in cls.NAMES})

    def copy(self) -> "ToyScorerParams":
        return ToyScorerParams(**{name: getattr(self, name).copy() for name in self.NAMES})


@dataclass(frozen=True)
class ToyContext:
    ctx: np.ndarray


class ToyScorer:
    vocab_size = VOCAB_SIZE

    def __init__(self, params: ToyScorerParams) -> None:
        self.params = params

    def encode_context(self, image_feature, question: str) -> ToyContext:
        return ToyContext(context_vector(self.params, np.asarray(image_feature, dtype=np.float64), question))

    def retrieval_vector(self, context: ToyContext) -> np.ndarray:
        return context.ctx @ self.params.ret_proj

    def score_next(self, context: ToyContext, prefix: Sequence[int]) -> np.ndarray:
        p = self.params
        tokens = [BOS, *prefix]
        pooled = p.token_embed[tokens].mean(axis=0)
        pos = p.pos_embed[min(len(prefix), p.pos_embed.shape[0] - 1)]
        h = np.tanh(context.ctx + pooled + pos)
        return h @ p.output + p.out_bias


def question_tokens(question: str) -> list[int]:
    return [*encode(question), RET]


def context_vector(params: ToyScorerParams, image_feature: np.ndarray, question: str) -> np.ndarray:
    q = question_tokens(question)
    return image_feature @ params.img_proj + params.token_embed[q].mean(axis=0)


@dataclass
class ScorerCache:
    X: np.ndarray
    q_tokens: list[list[int]]
    ctx: np.ndarray
    inp: np.ndarray
    pos_idx: np.ndarray
    h: np.ndarray


def forward_batch(
    params: ToyScorerParams,
    X: np.ndarray,
    q_tokens: list[list[int]],
    inp: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, ScorerCache]:
    """Teacher-forced forward over a padded batch.

    ``inp`` is B x T: BOS followed by the target tokens shifted right. Returns
    (retrieval vectors B x d, logits B x T x V, cache).
    """
    p = params
    B, T = inp.shape
    q_mean = np.stack([p.token_embed[q].mean(axis=0) for q in q_tokens])
    ctx = X @ p.img_proj + q_mean
    ret = ctx @ p.ret_proj
    emb = p.token_embed[inp]
    pooled = np.cumsum(emb, axis=1) / np.arange(1, T + 1)[None, :, None]
    pos_idx = np.minimum(np.arange(T), p.pos_embed.shape[0] - 1)
    h = np.tanh(ctx[:, None, :] + pooled + p.pos_embed[pos_idx][None, :, :])
    logits = h @ p.output + p.out_bias
    return ret, logits, ScorerCache(X, q_tokens, ctx, inp, pos_idx, h)


def backward_batch(
    params: ToyScorerParams,
    cache: ScorerCache,
    d_ret: np.ndarray,
    d_logits: np.ndarray,
) -> dict[str, np.ndarray]:
    p = params
    B, T = cache.inp.shape
    d_e = p.d_e
    h = cache.h
    g = {name: np.zeros_like(getattr(p, name)) for name in ToyScorerParams.NAMES}
    g["output"] = h.reshape(-1, d_e).T @ d_logits.reshape(-1, VOCAB_SIZE)
    g["out_bias"] = d_logits.sum(axis=(0, 1))
    dz = (d_logits @ p.output.T) * (1.0 - h * h)
    np.add.at(g["pos_embed"], cache.pos_idx, dz.sum(axis=0))
    # pooled[t] averages emb[0..t]; emb[j] collects dz[t]/(t+1) for every t >= j
    scaled = dz / np.arange(1, T + 1)[None, :, None]
    d_emb = np.flip(np.cumsum(np.flip(scaled, axis=1), axis=1), axis=1)
    np.add.at(g["token_embed"], cache.inp.reshape(-1), d_emb.reshape(-1, d_e))
    d_ctx = dz.sum(axis=1) + d_ret @ p.ret_proj.T
    g["ret_proj"] = cache.ctx.T @ d_ret
    g["img_proj"] = cache.X.T @ d_ctx
    for i, q in enumerate(cache.q_tokens):
        np.add.at(g["token_embed"], q, np.broadcast_to(d_ctx[i] / len(q), (len(q), d_e)))
    return g
