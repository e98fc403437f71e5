"""In-process synth -> index -> train -> decode -> eval run with the CLI's seeding."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from groundgen.decoding import CONSTRAINED_RETRIEVED, UNCONSTRAINED, DecodeConfig, Prediction, Predictor
from groundgen.encoders import ToyEncoder, ToyEncoderParams
from groundgen.evaluation import DEFAULT_KS, EvalReport, gold_identifiers, report, recall_at_k
from groundgen.sampler import build_groups
from groundgen.scorer import ToyScorer, ToyScorerParams
from groundgen.seeding import substream
from groundgen.synth import SynthConfig, SynthFixture, synth_fixture
from groundgen.training import TrainConfig, TrainResult, train
from groundgen.vindex import build_index


@dataclass
class ExperimentResult:
    fixture: SynthFixture
    training: TrainResult
    reports: dict[str, EvalReport]
    predictions: dict[str, list[Prediction]]
    recall: dict[int, float]
    seconds: float
    extra: dict = field(default_factory=dict)

    @property
    def loss_drop(self) -> float:
        h = self.training.history
        return 1.0 - h[-1]["total"] / h[0]["total"]


def run_experiment(
    synth: SynthConfig = SynthConfig(),
    config: TrainConfig = TrainConfig(),
    *,
    k: int = 5,
    modes: tuple[str, ...] = (CONSTRAINED_RETRIEVED, UNCONSTRAINED),
    jobs: int = 1,
    recall_ks: tuple[int, ...] = DEFAULT_KS,
) -> ExperimentResult:
    """Train on the synthetic fixture and score every decode mode on its eval split.

    With ``config.train_encoder`` the index is built from the trained encoder;
    otherwise from the seeded initial encoder, as ``build-index`` does without
    ``--params``.
    """
    start = time.perf_counter()
    fx = synth_fixture(synth)
    d_img = synth.d_img
    seed = config.seed
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        groups = build_groups(fx.kb, config.hard_kind) if config.p_hard > 0 else None
    encoder0 = ToyEncoderParams.init(d_img, config.d, substream(seed, "init.encoder"))
    result = train(
        fx.kb, fx.train, config,
        scorer=ToyScorerParams.init(d_img, config.d, substream(seed, "init.scorer"), d_e=config.d_e),
        encoder=encoder0,
        groups=groups,
        sampler_rng=substream(seed, "sampler"),
        log_every=0,
    )
    encoder = result.encoder if config.train_encoder else encoder0
    index = build_index(fx.kb, ToyEncoder(encoder), jobs=jobs)
    scorer = ToyScorer(result.scorer)
    golds = gold_identifiers(fx.eval, fx.kb)

    wide = Predictor(scorer, index, fx.kb, k=max(recall_ks))
    retrievals = {q.query_id: wide.retrieve(q)[1].ids for q in fx.eval}
    recall = recall_at_k(retrievals, {q.query_id: q.gold_entity_id for q in fx.eval}, recall_ks)

    reports, predictions = {}, {}
    for mode in modes:
        preds = Predictor(scorer, index, fx.kb, k=k, config=DecodeConfig(mode=mode)).predict_all(fx.eval, jobs=jobs)
        predictions[mode] = preds
        reports[mode] = report({p.query_id: p.identifier for p in preds}, fx.eval, golds)
    return ExperimentResult(fx, result, reports, predictions, recall, time.perf_counter() - start)


def ungrounded_count(preds: list[Prediction]) -> int:
    return int(np.sum([not p.grounded for p in preds]))
