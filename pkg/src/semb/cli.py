"""Command-line interface: generate, train, eval, compare.

Exit codes: 0 success, 1 runtime error, 2 usage error.  ``SEMB_LOG`` selects
log verbosity (error, info, debug).  ``--config FILE`` supplies flag values
from a JSON object keyed by option name; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import FeatureFileError, generate_corpus, load_features, save_corpus, split_speakers
from .encoder import ModelEncoder
from .evaluation import (
    InsufficientDataError,
    embed_pool,
    eval_pool,
    roc,
    same_different,
    si_task,
    sv_task,
    write_repeats_csv,
    write_roc_csv,
)
from .experiment import EvalPlan, run_comparison, write_comparison_csv
from .losses import DistanceKind
from .sampler import EpisodeSpec, SamplingError
from .trainer import (
    CheckpointError,
    LossKind,
    TrainConfig,
    TrainingError,
    ValidationSpec,
    checkpoint_load,
    checkpoint_save,
    train,
    write_history_csv,
)

log = logging.getLogger("semb")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
RUNTIME_ERRORS = (
    OSError,
    FeatureFileError,
    CheckpointError,
    InsufficientDataError,
    SamplingError,
    TrainingError,
    FloatingPointError,
)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument types


def _bounded(kind, lo=None, hi=None, lo_open=False):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}") from None
        if lo is not None and (value < lo or (lo_open and value == lo)):
            raise argparse.ArgumentTypeError(f"{value} must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and value > hi:
            raise argparse.ArgumentTypeError(f"{value} must be <= {hi}")
        return value

    return parse


positive = _bounded(int, 1)
non_negative = _bounded(int, 0)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=non_negative, default=0)
    p.add_argument("--threads", type=positive, default=1, help="worker cap for parallel jobs")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--config", type=Path, help="JSON file of flag values")


def _add_corpus(p: argparse.ArgumentParser) -> None:
    # required, but checked after --config is merged
    p.add_argument("--corpus", type=Path, default=None, help="corpus directory or .seqf file (required)")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dist", choices=["euc", "cos"], default="euc")
    p.add_argument("--shot", type=positive, default=3)
    p.add_argument("--query", type=positive, default=5)
    p.add_argument("--kway", type=_bounded(int, 2), default=15)
    p.add_argument("--epochs", type=positive, default=100)
    p.add_argument("--episodes-per-epoch", type=non_negative, default=None)
    p.add_argument("--crop", type=positive, default=200, help="training segment length in frames")
    p.add_argument("--lr", type=_bounded(float, 0.0, lo_open=True), default=1e-3)
    p.add_argument("--margin", type=_bounded(float, 0.0), default=0.2)
    p.add_argument("--hidden", type=positive, default=16)
    p.add_argument("--embedding", type=positive, default=16)
    p.add_argument("--val-kway", type=positive, default=5)
    p.add_argument("--val-repeats", type=non_negative, default=10, help="0 disables validation")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="semb", description="Speaker embeddings: prototypical vs triplet training.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic corpus")
    gen.add_argument("--speakers", type=positive, default=25)
    gen.add_argument("--utterances", type=positive, default=40)
    gen.add_argument("--frames", type=positive, default=400)
    gen.add_argument("--dim", type=positive, default=20)
    gen.add_argument("--difficulty", type=_bounded(float, 0.0, 1.0, lo_open=True), default=0.5)
    gen.add_argument("--unseen", type=non_negative, default=0, help="speakers held out entirely")
    gen.add_argument("--val-fraction", type=_bounded(float, 0.0, 1.0), default=0.2)
    gen.add_argument("--test-fraction", type=_bounded(float, 0.0, 1.0), default=0.2)
    _add_common(gen)

    tr = sub.add_parser("train", help="train an encoder")
    _add_corpus(tr)
    tr.add_argument("--loss", choices=["pnl", "tl"], default="pnl")
    tr.add_argument("--mining", choices=["naive", "semi"], default="semi")
    _add_training(tr)
    _add_common(tr)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("protocol", choices=["samediff", "si", "sv"])
    _add_corpus(ev)
    ev.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint (required)")
    ev.add_argument("--split", choices=["test", "unseen", "validation"], default="test")
    ev.add_argument("--dist", choices=["euc", "cos"], default=None, help="default: the training distance")
    ev.add_argument("--segment", type=positive, default=None, help="segment frames (default: training crop)")
    ev.add_argument("--repeats", type=positive, default=10)
    ev.add_argument("--kway", type=positive, default=5)
    ev.add_argument("--enroll", type=positive, default=3)
    ev.add_argument("--query", type=positive, default=5)
    ev.add_argument("--enroll-frames", type=positive, default=None, help="sv enrollment duration (default: 3 segments)")
    ev.add_argument("--pos", type=positive, default=10, help="sv positive trials per speaker")
    ev.add_argument("--neg", type=positive, default=None, help="sv negative trials per speaker (default: --pos)")
    ev.add_argument("--pairs", type=positive, default=500, help="samediff pairs per class")
    _add_common(ev)

    cmp_ = sub.add_parser("compare", help="PNL vs TL over seed replicates")
    _add_corpus(cmp_)
    cmp_.add_argument("--mining", choices=["naive", "semi"], default="semi")
    cmp_.add_argument("--seeds", type=positive, default=5, help="number of seed replicates")
    cmp_.add_argument("--si-kway", type=positive, default=5)
    cmp_.add_argument("--si-enroll", type=positive, default=3)
    cmp_.add_argument("--si-query", type=positive, default=5)
    cmp_.add_argument("--si-repeats", type=positive, default=100)
    cmp_.add_argument("--sv-repeats", type=positive, default=10)
    cmp_.add_argument("--sv-pos", type=positive, default=10)
    cmp_.add_argument("--eval-seed", type=non_negative, default=12345)
    _add_training(cmp_)
    _add_common(cmp_)
    return parser, dict(sub.choices)


def parse_args(argv=None) -> argparse.Namespace:
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    sub = subparsers[args.command]
    if args.config is not None:
        args = _merge_config(parser, sub, args, argv)
    for dest in ("corpus", "checkpoint"):
        if dest in vars(args) and getattr(args, dest) is None:
            sub.error(f"the following arguments are required: --{dest}")
    return args


def _merge_config(parser, sub, args, argv) -> argparse.Namespace:
    try:
        overrides = json.loads(args.config.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        sub.error(f"cannot read --config {args.config}: {exc}")
    if not isinstance(overrides, dict):
        sub.error("--config must contain a JSON object")
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        action = known.get(dest)
        if action is None or dest in ("config", "help", "protocol"):
            sub.error(f"--config: unknown option {key!r}")
        # run through the flag's own type and choices checks
        if value is not None and action.type is not None:
            try:
                value = action.type(str(value))
            except argparse.ArgumentTypeError as exc:
                sub.error(f"--config {key}: {exc}")
        if action.choices is not None and value not in action.choices:
            sub.error(f"--config {key}: {value!r} not in {sorted(action.choices)}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# commands


def _train_config(args, loss_kind: LossKind) -> TrainConfig:
    validation = None
    if args.val_repeats:
        validation = ValidationSpec(args.val_kway, args.shot, args.query, args.val_repeats)
    try:
        return TrainConfig(
            loss_kind=loss_kind,
            dist=args.dist,
            episode=EpisodeSpec(args.kway, args.shot, args.query, args.seed),
            margin=args.margin,
            learning_rate=args.lr,
            epochs=args.epochs,
            episodes_per_epoch=args.episodes_per_epoch,
            crop_frames=args.crop,
            hidden_dim=args.hidden,
            embedding_dim=args.embedding,
            seed=args.seed,
            validation=validation,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_corpus(path: Path):
    feats = path / "corpus.seqf" if path.is_dir() else path
    if not feats.exists():
        raise FileNotFoundError(f"corpus not found: {feats}")
    return load_features(feats)


def cmd_generate(args) -> int:
    try:
        dataset, manifest = generate_corpus(
            args.speakers, args.utterances, args.frames, args.dim, args.difficulty, args.seed
        )
        manifest = split_speakers(manifest, args.unseen, args.seed, args.val_fraction, args.test_fraction)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    feats, man = save_corpus(args.out, dataset, manifest)
    print(f"wrote {feats} and {man}")
    for split in ("train", "validation", "test", "unseen"):
        print(f"  {split:<10} {len(manifest.speaker_ids(split)):>4} speakers {len(manifest.indices(split)):>6} utterances")
    return 0


def cmd_train(args) -> int:
    kind = LossKind.PNL if args.loss == "pnl" else LossKind.TL_NAIVE if args.mining == "naive" else LossKind.TL_SEMIHARD
    config = _train_config(args, kind)
    dataset, manifest = _load_corpus(args.corpus)
    result = train(dataset, manifest, config)
    args.out.mkdir(parents=True, exist_ok=True)
    checkpoint_save(result.params, config, args.out / "model.semc")
    write_history_csv(args.out / "history.csv", result.history)
    last = result.history[-1]
    print(f"{config.label}: {len(result.history)} epochs, best epoch {result.best_epoch}, final loss {last.train_loss:.5f}")
    print(f"wrote {args.out / 'model.semc'} and {args.out / 'history.csv'}")
    return 0


def cmd_eval(args) -> int:
    params, train_cfg = checkpoint_load(args.checkpoint)
    dataset, manifest = _load_corpus(args.corpus)
    if dataset.feature_dim != params.config.input_dim:
        raise FeatureFileError(f"corpus dim {dataset.feature_dim} != model input dim {params.config.input_dim}")
    dist = DistanceKind.parse(args.dist or (train_cfg.dist.value if train_cfg else "euc"))
    segment = args.segment or (train_cfg.crop_frames if train_cfg else 200)
    rng = np.random.default_rng(args.seed)
    emb = embed_pool(eval_pool(dataset, manifest, args.split, segment), ModelEncoder(params))
    args.out.mkdir(parents=True, exist_ok=True)
    curves = None
    if args.protocol == "si":
        report = si_task(emb, args.kway, args.enroll, args.query, None, dist, args.repeats, rng, args.split)
    elif args.protocol == "sv":
        enroll = args.enroll_frames or args.enroll * segment
        report, trials = sv_task(emb, enroll, segment, args.pos, args.neg, None, dist, args.repeats, rng, args.split)
        curves = [roc(t) for t in trials]
    else:
        report, curves = same_different(emb, args.pairs, None, dist, args.repeats, rng, args.split)
    report.save(args.out / "report.json")
    write_repeats_csv(args.out / "repeats.csv", report)
    if curves is not None:
        write_roc_csv(args.out / "roc.csv", curves)
    print(f"{args.protocol} {args.split}: {report.metric} {report.mean:.4f} +- {report.std:.4f} over {report.repeats} repeats")
    return 0


def cmd_compare(args) -> int:
    mining = LossKind.TL_NAIVE if args.mining == "naive" else LossKind.TL_SEMIHARD
    configs = [_train_config(args, LossKind.PNL), _train_config(args, mining)]
    dataset, manifest = _load_corpus(args.corpus)
    seeds = list(range(args.seed, args.seed + args.seeds))
    plan = EvalPlan(
        si_k_way=args.si_kway,
        si_enroll=args.si_enroll,
        si_query=args.si_query,
        si_repeats=args.si_repeats,
        sv_repeats=args.sv_repeats,
        sv_pos=args.sv_pos,
        seed=args.eval_seed,
    )
    cells = run_comparison(dataset, manifest, configs, seeds, plan, threads=args.threads)
    args.out.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(args.out / "comparison.csv", cells, seeds)
    for c in cells:
        if len(set(c.hashes)) != 1:
            raise RuntimeError(f"evaluation draws differ across runs for {c.config} {c.metric} {c.split}")
        log.info("%s %s %s draws %s", c.config, c.metric, c.split, c.hashes[0])
        print(f"{c.config:<18} {c.metric:<8} {c.split:<7} {c.mean:.4f} +- {c.std:.4f}  draws {c.hashes[0]}")
    print(f"wrote {args.out / 'comparison.csv'}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare}


def _configure_logging() -> None:
    name = os.environ.get("SEMB_LOG", "error").lower()
    level = LOG_LEVELS.get(name)
    if level is None:
        print(f"semb: ignoring unknown SEMB_LOG={name!r}", file=sys.stderr)
        level = logging.ERROR
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv=None) -> int:
    _configure_logging()
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"semb {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS + (RuntimeError, ValueError) as exc:
        print(f"semb {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
