"""Entity and query encoders.

The toy encoder blends a linear projection of the image feature with a
linear projection of a hashed bag of words, then L2-normalizes. It is small
enough that every gradient is written out by hand and can be checked
against finite differences.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from groundgen.errors import DegenerateEmbeddingError, DimensionError, MissingFeatureError
from groundgen.kb import EntityRecord, QueryRecord

HASH_DIM = 256
HASH_SEED = 0x9E3779B1
_KNUTH = 2654435761
_WORD = re.compile(r"[a-z0-9]+")


class EncoderInterface(Protocol):
    output_dim: int

    def entity_encode(self, entity: EntityRecord) -> np.ndarray: ...

    def query_encode(
        self, question: str, image_feature: Sequence[float], hidden: np.ndarray | None = None
    ) -> np.ndarray: ...


def _fnv1a(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h = ((h ^ b) * 0x01000193) & 0xFFFFFFFF
    return h


def hash_bucket(word: str, dim: int = HASH_DIM) -> int:
    h = ((_fnv1a(word.encode("utf-8")) ^ HASH_SEED) * _KNUTH) & 0xFFFFFFFF
    return (h * dim) >> 32


def hash_bow(text: str, dim: int = HASH_DIM) -> np.ndarray:
    """Count vector of lowercased alphanumeric words hashed into ``dim`` buckets."""
    out = np.zeros(dim)
    for word in _WORD.findall(text.lower()):
        out[hash_bucket(word, dim)] += 1.0
    return out


def l2_normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize; returns (unit rows, norms). Raises on zero rows."""
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateEmbeddingError("zero or non-finite vector cannot be normalized")
    return v / norms, norms


def l2_normalize_backward(unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    radial = np.sum(unit * d_unit, axis=-1, keepdims=True)
    return (d_unit - unit * radial) / norms


@dataclass
class ToyEncoderParams:
    proj_img: np.ndarray
    proj_txt: np.ndarray
    blend: float = 0.5
    trainable: dict[str, bool] = field(
        default_factory=lambda: {"proj_img": True, "proj_txt": True, "blend": True}
    )

    @classmethod
    def init(
        cls, d_img: int, d: int, rng: np.random.Generator, *, blend: float = 0.8
    ) -> "ToyEncoderParams":
        proj_img = rng.standard_normal((d_img, d)) / np.sqrt(max(d_img, 1))
        proj_txt = rng.standard_normal((HASH_DIM, d)) / np.sqrt(HASH_DIM)
        return cls(proj_img=proj_img, proj_txt=proj_txt, blend=float(blend))

    @property
    def d_img(self) -> int:
        return self.proj_img.shape[0]

    @property
    def output_dim(self) -> int:
        return self.proj_img.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"proj_img": self.proj_img, "proj_txt": self.proj_txt, "blend": np.array(self.blend)}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "ToyEncoderParams":
        return cls(
            proj_img=np.array(t["proj_img"], dtype=np.float64),
            proj_txt=np.array(t["proj_txt"], dtype=np.float64),
            blend=float(t["blend"]),
        )

    def copy(self) -> "ToyEncoderParams":
        return ToyEncoderParams(
            self.proj_img.copy(), self.proj_txt.copy(), self.blend, dict(self.trainable)
        )


@dataclass
class EncodeCache:
    img: np.ndarray
    bow: np.ndarray
    mix: np.ndarray
    img_part: np.ndarray
    txt_part: np.ndarray
    unit: np.ndarray
    norms: np.ndarray


def encode_batch(
    params: ToyEncoderParams, img: np.ndarray, has_img: np.ndarray, bow: np.ndarray
) -> tuple[np.ndarray, EncodeCache]:
    """Encode N rows. ``img`` rows with ``has_img`` false are ignored.

    Rows carrying both sources mix them with ``blend``; rows with a single
    source use it alone.
    """
    has_img = np.asarray(has_img, dtype=bool)
    has_txt = np.any(bow != 0, axis=1)
    missing = ~(has_img | has_txt)
    if np.any(missing):
        raise MissingFeatureError(f"row {int(np.argmax(missing))} has neither image nor text")
    if img.shape[1] != params.d_img and np.any(has_img):
        raise DimensionError(f"image feature dim {img.shape[1]} != encoder d_img {params.d_img}")
    mix = np.where(has_img & has_txt, params.blend, np.where(has_img, 1.0, 0.0))
    img_part = img @ params.proj_img if img.shape[1] == params.d_img else np.zeros(
        (img.shape[0], params.output_dim)
    )
    img_part = np.where(has_img[:, None], img_part, 0.0)
    txt_part = bow @ params.proj_txt
    raw = mix[:, None] * img_part + (1.0 - mix)[:, None] * txt_part
    unit, norms = l2_normalize(raw)
    return unit, EncodeCache(img, bow, mix, img_part, txt_part, unit, norms)


def encode_backward(
    params: ToyEncoderParams, cache: EncodeCache, d_unit: np.ndarray
) -> dict[str, np.ndarray]:
    d_raw = l2_normalize_backward(cache.unit, cache.norms, d_unit)
    d_img_part = cache.mix[:, None] * d_raw
    d_txt_part = (1.0 - cache.mix)[:, None] * d_raw
    both = (cache.mix != 0.0) & (cache.mix != 1.0)
    # rows using a single source do not depend on blend
    d_blend = np.sum(both[:, None] * d_raw * (cache.img_part - cache.txt_part))
    grads = {
        "proj_img": cache.img.T @ d_img_part if cache.img.shape[1] == params.d_img
        else np.zeros_like(params.proj_img),
        "proj_txt": cache.bow.T @ d_txt_part,
        "blend": np.array(d_blend),
    }
    return grads


def entity_inputs(entities: Sequence[EntityRecord], d_img: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    img = np.zeros((len(entities), d_img))
    has_img = np.zeros(len(entities), dtype=bool)
    for i, e in enumerate(entities):
        if e.image_feature is not None:
            if len(e.image_feature) != d_img:
                raise DimensionError(
                    f"entity {e.entity_id!r}: image feature dim {len(e.image_feature)} != {d_img}"
                )
            img[i] = e.image_feature
            has_img[i] = True
    bow = np.stack([hash_bow(e.description) for e in entities]) if entities else np.zeros((0, HASH_DIM))
    return img, has_img, bow


def toy_entity_encode(params: ToyEncoderParams, entity: EntityRecord) -> np.ndarray:
    img, has_img, bow = entity_inputs([entity], params.d_img)
    try:
        unit, _ = encode_batch(params, img, has_img, bow)
    except MissingFeatureError as exc:
        raise MissingFeatureError(f"entity {entity.entity_id!r} has no image feature or description") from exc
    return unit[0]


def toy_query_encode(params: ToyEncoderParams, query: QueryRecord) -> np.ndarray:
    img = np.asarray(query.image_feature, dtype=np.float64)[None, :]
    unit, _ = encode_batch(params, img, np.array([True]), hash_bow(query.question)[None, :])
    return unit[0]


class ToyEncoder:
    """EncoderInterface adapter around ToyEncoderParams."""

    def __init__(self, params: ToyEncoderParams) -> None:
        self.params = params

    @property
    def output_dim(self) -> int:
        return self.params.output_dim

    def entity_encode(self, entity: EntityRecord) -> np.ndarray:
        return toy_entity_encode(self.params, entity)

    def query_encode(self, question, image_feature, hidden=None) -> np.ndarray:
        # the toy query path is purely feature based; a scorer hidden state is unused
        img = np.asarray(image_feature, dtype=np.float64)[None, :]
        unit, _ = encode_batch(self.params, img, np.array([True]), hash_bow(question)[None, :])
        return unit[0]
