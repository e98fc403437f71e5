"""Command-line entry point.

Subcommands: synth, build-index, train-toy, retrieve, decode, eval, dump-trie.
Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric/divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from groundgen.decoding import MODES, CONSTRAINED_RETRIEVED, DecodeConfig, Predictor
from groundgen.encoders import ToyEncoder, ToyEncoderParams
from groundgen.errors import GroundGenError, ParseError
from groundgen.evaluation import DEFAULT_KS, gold_identifiers, report
from groundgen.kb import KnowledgeBase, load_kb, load_queries, write_jsonl
from groundgen.sampler import HARD_KINDS, build_groups, weighted_subsample
from groundgen.scorer import ToyScorer, ToyScorerParams
from groundgen.seeding import substream
from groundgen.synth import SynthConfig, synth_fixture
from groundgen.tokenizer import encode
from groundgen.training import TrainConfig, load_params, save_params, train
from groundgen.trie import build_trie
from groundgen.vindex import DEFAULT_K, VectorIndex, build_index

log = logging.getLogger("groundgen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_ENV = "GROUNDGEN_LOG_LEVEL"
CONFIG_KEYS = ("batch_size", "p_hard", "hard_kind", "max_attempts", "seed", "fraction",
               "steps", "lr", "lambda_r", "d", "d_e", "embed_lr_scale")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--log-level", default=None, help=f"overrides ${LOG_ENV} (default WARNING)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="groundgen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic KB with train/eval queries")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-entities", type=int, default=200)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-eval", type=int, default=400)
    p.add_argument("--d-img", type=int, default=32)
    p.add_argument("--n-clusters", type=int, default=20)
    p.add_argument("--unseen-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("build-index", help="encode every entity into the vector index")
    p.add_argument("--kb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="trained parameter file; default is the seeded initial encoder")
    p.add_argument("--d", type=int, default=32, help="embedding dimension of the initial encoder")
    p.add_argument("--d-img", type=int, help="image feature dimension if the KB carries none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train-toy", help="train the toy scorer on the joint objective")
    p.add_argument("--kb", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with keys " + ", ".join(CONFIG_KEYS))
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--lambda-r", type=float, default=TrainConfig.lambda_r)
    p.add_argument("--embed-lr-scale", type=float, default=TrainConfig.embed_lr_scale,
                   help="step multiplier for the token and position embedding tables")
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--p-hard", type=float, default=TrainConfig.p_hard)
    p.add_argument("--hard-kind", choices=HARD_KINDS, default=TrainConfig.hard_kind)
    p.add_argument("--max-attempts", type=int, default=TrainConfig.max_attempts)
    p.add_argument("--fraction", type=float, default=1.0, help="frequency-weighted subsample of the queries")
    p.add_argument("--d", type=int, default=TrainConfig.d)
    p.add_argument("--d-e", type=int, default=TrainConfig.d_e)
    p.add_argument("--train-encoder", action="store_true",
                   help="also update the entity encoder (rebuild the index with --params afterwards)")
    p.add_argument("--figures", help="directory for history.tsv and loss_curve.png")

    for name, helptext in (("retrieve", "write top-k retrievals per query"),
                           ("decode", "retrieve, build tries and decode identifiers")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--index", required=True)
        p.add_argument("--kb", required=True)
        p.add_argument("--queries", required=True)
        p.add_argument("--scorer", required=True, help="parameter file written by train-toy")
        p.add_argument("--k", type=int, default=DEFAULT_K)
        p.add_argument("--out", required=True)
        p.add_argument("--lenient", action="store_true", help="warn instead of failing on unknown gold ids")
        if name == "decode":
            p.add_argument("--mode", choices=MODES, default=CONSTRAINED_RETRIEVED)
            p.add_argument("--beam-width", type=int, default=1)
            p.add_argument("--max-len", type=int, default=128)
            p.add_argument("--audit-top", type=int, default=20)
            p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("eval", help="score predictions")
    p.add_argument("--preds", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kb", help="score on identifier strings; without it, gold must be among entity_ids")
    p.add_argument("--ks", default=",".join(str(k) for k in DEFAULT_KS))
    p.add_argument("--figures", help="directory for cells.tsv and PNG figures")

    p = sub.add_parser("dump-trie", help="print a trie as indented text")
    p.add_argument("--kb", required=True)
    p.add_argument("--ids", help="comma-separated entity ids (default: whole KB)")
    p.add_argument("--out")

    for action in sub.choices.values():
        _add_common(action)
    return parser


def _setup_logging(level: str | None) -> None:
    name = (level or os.environ.get(LOG_ENV) or "WARNING").upper()
    log.setLevel(getattr(logging, name, logging.WARNING))
    if not any(getattr(h, "_groundgen", False) for h in log.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        handler._groundgen = True
        log.addHandler(handler)


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser, argv) -> None:
    with open(args.config, encoding="utf-8") as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - set(CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    given = {a.split("=")[0] for a in argv if a.startswith("--")}
    for key, value in cfg.items():
        if "--" + key.replace("_", "-") not in given:
            setattr(args, key, value)


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_entities=args.n_entities, n_train=args.n_train, n_eval=args.n_eval, d_img=args.d_img,
        n_clusters=args.n_clusters, unseen_fraction=args.unseen_fraction, seed=args.seed,
    )
    paths = synth_fixture(cfg).write(args.out_dir)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return EXIT_OK


def _initial_encoder(d_img: int, d: int, seed: int) -> ToyEncoderParams:
    return ToyEncoderParams.init(d_img, d, substream(seed, "init.encoder"))


def _kb_d_img(kb: KnowledgeBase, override: int | None) -> int:
    d_img = override or kb.d_img
    if d_img is None:
        raise UsageError("KB has no image features; pass --d-img")
    return d_img


def cmd_build_index(args) -> int:
    kb = load_kb(args.kb)
    if args.params:
        _, enc, _ = load_params(args.params)
    else:
        enc = _initial_encoder(_kb_d_img(kb, args.d_img), args.d, args.seed)
    index = build_index(kb, ToyEncoder(enc), jobs=args.jobs)
    index.save(args.out)
    log.info("index n=%d d=%d written to %s", index.n, index.d, args.out)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    kb = load_kb(args.kb)
    queries = load_queries(args.queries, kb)
    if args.fraction < 1.0:
        queries = weighted_subsample(queries, args.fraction, args.seed)
    d_img = _kb_d_img(kb, None)
    cfg = TrainConfig(
        steps=args.steps, lr=args.lr, lambda_r=args.lambda_r, batch_size=args.batch_size,
        p_hard=args.p_hard, hard_kind=args.hard_kind, max_attempts=args.max_attempts,
        d=args.d, d_e=args.d_e, embed_lr_scale=args.embed_lr_scale, train_encoder=args.train_encoder, seed=args.seed,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        groups = build_groups(kb, cfg.hard_kind) if cfg.p_hard > 0 else None
    result = train(
        kb, queries, cfg,
        scorer=ToyScorerParams.init(d_img, cfg.d, substream(args.seed, "init.scorer"), d_e=cfg.d_e),
        encoder=_initial_encoder(d_img, cfg.d, args.seed),
        groups=groups,
        sampler_rng=substream(args.seed, "sampler"),
    )
    save_params(args.out, result.scorer, result.encoder, result.temp)
    first, last = result.history[0]["total"], result.history[-1]["total"]
    print(f"steps\t{cfg.steps}\ninitial_total\t{first:.6f}\nfinal_total\t{last:.6f}\nfallbacks\t{result.fallbacks}")
    if args.figures:
        from groundgen.plotting import write_training_figures

        write_training_figures(result.history, args.figures)
    return EXIT_OK


def _load_inference(args):
    kb = load_kb(args.kb)
    queries = load_queries(args.queries, kb, strict=not args.lenient)
    index = VectorIndex.load(args.index)
    scorer_params, _, _ = load_params(args.scorer)
    if scorer_params.d != index.d:
        raise GroundGenError(f"scorer retrieval dim {scorer_params.d} != index dim {index.d}")
    return kb, queries, index, ToyScorer(scorer_params)


def cmd_retrieve(args) -> int:
    kb, queries, index, scorer = _load_inference(args)
    predictor = Predictor(scorer, index, kb, args.k)
    rows = []
    for q in queries:
        _, result = predictor.retrieve(q)
        rows.append({"query_id": q.query_id, "retrieved_ids": result.ids,
                     "scores": [round(s, 7) for s in result.scores]})
    write_jsonl(args.out, rows)
    return EXIT_OK


def cmd_decode(args) -> int:
    kb, queries, index, scorer = _load_inference(args)
    config = DecodeConfig(beam_width=args.beam_width, max_len=args.max_len, mode=args.mode)
    preds = Predictor(scorer, index, kb, args.k, config).predict_all(queries, jobs=args.jobs)
    write_jsonl(args.out, (p.to_json(args.audit_top) for p in preds))
    return EXIT_OK


def _read_preds(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
    return rows


def cmd_eval(args) -> int:
    rows = _read_preds(args.preds)
    preds = {r["query_id"]: r["identifier"] for r in rows}
    retrievals = {r["query_id"]: r.get("retrieved_ids", []) for r in rows}
    if args.kb:
        kb = load_kb(args.kb)
        queries = load_queries(args.queries, kb)
        golds = gold_identifiers(queries, kb)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            queries = load_queries(args.queries, KnowledgeBase({}), strict=False)
        # without a KB the gold identifier is known only when decoding resolved to the gold entity
        resolved = {r["query_id"]: r for r in rows}
        golds = {
            q.query_id: resolved[q.query_id]["identifier"]
            for q in queries
            if q.query_id in resolved and q.gold_entity_id in resolved[q.query_id].get("entity_ids", [])
        }
    audit = max((len(v) for v in retrievals.values()), default=0)
    ks = [k for k in (int(x) for x in args.ks.split(",") if x) if k <= audit]
    rep = report(preds, queries, golds, retrievals if ks else None, ks)
    rep.write(args.out)
    if args.figures:
        from groundgen.plotting import write_report_figures

        write_report_figures(rep, args.figures)
    print(f"hm_overall\t{rep.hm_overall}")
    return EXIT_OK


def cmd_dump_trie(args) -> int:
    kb = load_kb(args.kb)
    ids = args.ids.split(",") if args.ids else list(kb.ids)
    missing = [i for i in ids if i not in kb]
    if missing:
        raise UsageError(f"unknown entity ids: {missing}")
    text = build_trie((i, encode(kb.identifier(i))) for i in ids).dump() + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "build-index": cmd_build_index,
    "train-toy": cmd_train_toy,
    "retrieve": cmd_retrieve,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "dump-trie": cmd_dump_trie,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            _apply_config_file(args, parser, argv)
        _setup_logging(args.log_level)
        log.info("resolved config: %s", json.dumps(vars(args), sort_keys=True, default=str))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except GroundGenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: [io] {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
