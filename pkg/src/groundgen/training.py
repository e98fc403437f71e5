"""Joint training: masked LM loss plus weighted query-to-entity InfoNCE."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from groundgen.encoders import (
    ToyEncoderParams,
    encode_backward,
    encode_batch,
    entity_inputs,
    l2_normalize,
    l2_normalize_backward,
)
from groundgen.binfmt import read_tensors, write_tensors
from groundgen.errors import DataError, DegenerateEmbeddingError, DivergenceError, NumericError
from groundgen.kb import KnowledgeBase, QueryRecord
from groundgen.losses import (
    DEFAULT_LAMBDA_R,
    LossReport,
    Temperature,
    combined_loss,
    infonce_loss,
    masked_lm_loss,
)
from groundgen.sampler import BatchPlan, BatchSampler, HardNegativeGroups, SamplerConfig
from groundgen.scorer import ToyScorerParams, backward_batch, forward_batch, question_tokens
from groundgen.tokenizer import BOS, EOS, PAD, encode

log = logging.getLogger(__name__)


@dataclass
class TrainBatch:
    """Arrays for one batch: query side, gold entity side, teacher-forcing targets."""

    X: np.ndarray
    q_tokens: list[list[int]]
    inp: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    ent_img: np.ndarray
    ent_has_img: np.ndarray
    ent_bow: np.ndarray
    entity_ids: list[str] = field(default_factory=list)


def make_batch(queries: Sequence[QueryRecord], kb: KnowledgeBase, d_img: int) -> TrainBatch:
    entities = [kb[q.gold_entity_id] for q in queries]
    seqs = [[*encode(e.identifier), EOS] for e in entities]
    T = max(len(s) for s in seqs)
    B = len(queries)
    targets = np.full((B, T), PAD, dtype=np.int64)
    inp = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for i, s in enumerate(seqs):
        targets[i, : len(s)] = s
        inp[i, : len(s)] = [BOS, *s[:-1]]
        mask[i, : len(s)] = True
    ent_img, ent_has_img, ent_bow = entity_inputs(entities, d_img)
    return TrainBatch(
        X=np.array([q.image_feature for q in queries], dtype=np.float64),
        q_tokens=[question_tokens(q.question) for q in queries],
        inp=inp,
        targets=targets,
        mask=mask,
        ent_img=ent_img,
        ent_has_img=ent_has_img,
        ent_bow=ent_bow,
        entity_ids=[e.entity_id for e in entities],
    )


def loss_and_grads(
    scorer: ToyScorerParams,
    encoder: ToyEncoderParams,
    batch: TrainBatch,
    temp: Temperature,
    lambda_r: float = DEFAULT_LAMBDA_R,
) -> LossReport:
    """Total loss and gradients keyed ``scorer.*``, ``encoder.*`` and ``log_tau``."""
    ret, logits, s_cache = forward_batch(scorer, batch.X, batch.q_tokens, batch.inp)
    Q, q_norms = l2_normalize(ret)
    E, e_cache = encode_batch(encoder, batch.ent_img, batch.ent_has_img, batch.ent_bow)
    B, T, V = logits.shape
    lm, lm_g = masked_lm_loss(logits.reshape(B * T, V), batch.targets.reshape(-1), batch.mask.reshape(-1))
    con, con_g = infonce_loss(Q, E, temp.log_tau)
    total = combined_loss(lm, con, lambda_r)
    d_ret = l2_normalize_backward(Q, q_norms, lambda_r * con_g["Q"])
    grads = {
        f"scorer.{k}": v
        for k, v in backward_batch(scorer, s_cache, d_ret, lm_g["logits"].reshape(B, T, V)).items()
    }
    for k, v in encode_backward(encoder, e_cache, lambda_r * con_g["E"]).items():
        grads[f"encoder.{k}"] = v
    grads["log_tau"] = lambda_r * con_g["log_tau"]
    return LossReport(lm, con, total, lambda_r, temp.tau, grads)


def train_step(
    scorer: ToyScorerParams,
    encoder: ToyEncoderParams,
    batch: TrainBatch,
    temp: Temperature,
    lambda_r: float = DEFAULT_LAMBDA_R,
    lr: float = 0.1,
    *,
    train_tau: bool = True,
    lr_scale: Mapping[str, float] | None = None,
) -> tuple[ToyScorerParams, ToyEncoderParams, Temperature, LossReport]:
    """One plain SGD update on every trainable tensor; inputs are not mutated.

    ``lr_scale`` multiplies the step for individual scorer tensors, keyed by
    tensor name.
    """
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            report = loss_and_grads(scorer, encoder, batch, temp, lambda_r)
    except (NumericError, DegenerateEmbeddingError) as exc:
        raise DivergenceError(f"{exc.args[0]}; reduce the learning rate") from exc
    if not math.isfinite(report.total):
        raise DivergenceError(f"non-finite loss {report.total}; reduce the learning rate")
    scale = lr_scale or {}
    new_scorer = scorer.copy()
    for name in ToyScorerParams.NAMES:
        step = lr * scale.get(name, 1.0)
        setattr(new_scorer, name, getattr(scorer, name) - step * report.grads[f"scorer.{name}"])
    new_encoder = encoder.copy()
    if encoder.trainable.get("proj_img", True):
        new_encoder.proj_img = encoder.proj_img - lr * report.grads["encoder.proj_img"]
    if encoder.trainable.get("proj_txt", True):
        new_encoder.proj_txt = encoder.proj_txt - lr * report.grads["encoder.proj_txt"]
    if encoder.trainable.get("blend", True):
        new_encoder.blend = float(np.clip(encoder.blend - lr * float(report.grads["encoder.blend"]), 0.0, 1.0))
    new_temp = Temperature(temp.log_tau - lr * float(report.grads["log_tau"]) if train_tau else temp.log_tau)
    return new_scorer, new_encoder, new_temp, report


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 2.0
    lambda_r: float = DEFAULT_LAMBDA_R
    batch_size: int = 32
    p_hard: float = 0.5
    hard_kind: str = "vision-hard"
    max_attempts: int = 100
    d: int = 32
    d_e: int = 128
    # embedding rows only receive gradient from the few positions using them,
    # so their step is enlarged to keep pace with the dense tensors
    embed_lr_scale: float = 100.0
    train_encoder: bool = True
    seed: int = 0

    @property
    def lr_scale(self) -> dict[str, float]:
        return {"token_embed": self.embed_lr_scale, "pos_embed": self.embed_lr_scale}


@dataclass
class TrainResult:
    scorer: ToyScorerParams
    encoder: ToyEncoderParams
    temp: Temperature
    history: list[dict] = field(default_factory=list)
    fallbacks: int = 0


def train(
    kb: KnowledgeBase,
    queries: Sequence[QueryRecord],
    config: TrainConfig,
    *,
    scorer: ToyScorerParams,
    encoder: ToyEncoderParams,
    groups: HardNegativeGroups | None,
    sampler_rng: np.random.Generator,
    temp: Temperature | None = None,
    log_every: int = 100,
) -> TrainResult:
    temp = temp or Temperature()
    if not config.train_encoder:
        encoder = encoder.copy()
        encoder.trainable = {k: False for k in encoder.trainable}
    sampler = BatchSampler(
        queries,
        groups,
        SamplerConfig(config.batch_size, config.p_hard, config.max_attempts, config.seed),
        rng=sampler_rng,
    )
    d_img = scorer.d_img
    history = []
    for step in range(config.steps):
        plan: BatchPlan = sampler.sample()
        batch = make_batch([queries[i] for i in plan.query_indices], kb, d_img)
        scorer, encoder, temp, report = train_step(
            scorer, encoder, batch, temp, config.lambda_r, config.lr, lr_scale=config.lr_scale
        )
        history.append(
            {
                "step": step,
                "lm_loss": report.lm_loss,
                "contrastive_loss": report.contrastive_loss,
                "total": report.total,
                "tau": report.tau,
            }
        )
        if log_every and step % log_every == 0:
            log.info(
                "step %d total %.4f lm %.4f con %.4f tau %.4f",
                step, report.total, report.lm_loss, report.contrastive_loss, report.tau,
            )
    return TrainResult(scorer, encoder, temp, history, sampler.fallbacks)


def save_params(
    path, scorer: ToyScorerParams, encoder: ToyEncoderParams, temp: Temperature
) -> None:
    tensors = {f"scorer.{k}": v for k, v in scorer.tensors().items()}
    tensors.update({f"encoder.{k}": v for k, v in encoder.tensors().items()})
    tensors["log_tau"] = np.array(temp.log_tau)
    write_tensors(path, tensors)


def load_params(path) -> tuple[ToyScorerParams, ToyEncoderParams, Temperature]:
    t = read_tensors(path)
    try:
        scorer = ToyScorerParams.from_tensors({k[7:]: v for k, v in t.items() if k.startswith("scorer.")})
        encoder = ToyEncoderParams.from_tensors({k[8:]: v for k, v in t.items() if k.startswith("encoder.")})
        temp = Temperature(float(t["log_tau"]))
    except KeyError as exc:
        raise DataError(f"{path}: parameter file lacks tensor {exc}") from exc
    return scorer, encoder, temp
