"""Command-line entry points wiring the library into batch workflows.

Subcommands:
  make-synth          generate the self-contained synthetic offline corpus
  simulate            transmit an offline manifest through channel profiles
  build-corpus        partition + simulate every subset with its platforms
  train               train a detector under one regime
  eval                score a manifest, write reports; optional sweeps
  analyze-similarity  offline/online feature similarity at both levels

Every run writes resolved_config.json next to its outputs. A JSON file
passed via --config supplies defaults for any long flag (keys use the flag
name with dashes or underscores); explicit command-line flags win.
"""

import argparse
import json
import logging
import os
import sys

from . import __version__
from .channel import builtin_profiles
from .corpus import (Manifest, partition, published_scheme, read_manifest,
                     write_manifest)
from .errors import ConfigError, RtcSpoofError, UndefinedMetricError
from .evaluation import (breakdown, lambda_sweep, render_report,
                         render_stability, save_json, stability_report,
                         trials_from_scores, write_report, write_scores,
                         write_stability, write_sweep, write_sweep_plotdata)
from .synth import make_synth_corpus
from .training import (TrainConfig, evaluate_eer, export_history,
                       features_for, load_checkpoint, save_checkpoint,
                       score_record, train)

log = logging.getLogger(__name__)

ALL_PROFILE_IDS = tuple(p.profile_id for p in builtin_profiles())
DEFAULT_TRAIN_PROFILES = "P01,P02"
DEFAULT_DEV_PROFILES = "P01,P02,P03"
DEFAULT_EVAL_PROFILES = ",".join(ALL_PROFILE_IDS)


def _csv(text: str):
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _profiles_by_ids(ids):
    table = {p.profile_id: p for p in builtin_profiles()}
    missing = [i for i in ids if i not in table]
    if missing:
        raise ConfigError(f"unknown profile ids: {', '.join(missing)}")
    return [table[i] for i in ids]


def _write_resolved_config(args, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items())
                if k not in ("func",) and not k.startswith("_")}
    save_json(resolved, os.path.join(out_dir, "resolved_config.json"))


def _add_train_flags(sp, with_regime=True):
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--weight-decay", type=float, default=1e-4)
    sp.add_argument("--max-epochs", type=int, default=30)
    sp.add_argument("--patience", type=int, default=8)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--hidden", type=int, default=32)
    if with_regime:
        sp.add_argument("--regime", default="mix",
                        choices=["off", "on", "mix", "pcl", "fcl"])
        sp.add_argument("--lambda", dest="lam", type=float, default=0.0,
                        help="consistency weight (pcl/fcl only)")


def _train_config(args, regime=None, lam=None, seed=None) -> TrainConfig:
    return TrainConfig(
        lr=args.lr, weight_decay=args.weight_decay,
        max_epochs=args.max_epochs, patience=args.patience,
        lam=args.lam if lam is None else lam,
        regime=args.regime if regime is None else regime,
        batch_size=args.batch_size, hidden=args.hidden,
        seed=args.seed if seed is None else seed)


def cmd_make_synth(args) -> int:
    manifest, splits = make_synth_corpus(
        args.out_dir, seed=args.seed,
        n_train_speakers=args.train_speakers,
        n_dev_speakers=args.dev_speakers,
        n_eval_speakers=args.eval_speakers,
        utts_bona=args.utts_bona, utts_fake=args.utts_fake,
        duration=args.duration, noise_ids=_csv(args.noises))
    save_json(splits, os.path.join(args.out_dir, "splits.json"))
    _write_resolved_config(args, args.out_dir)
    print(f"wrote {len(manifest)} offline utterances to {args.out_dir}")
    return 0


def _report_pass_rates(offline_manifest, online_manifest, profile_ids):
    n_src = len(offline_manifest)
    for pid in profile_ids:
        n_ok = sum(1 for r in online_manifest.records if r.platform_id == pid)
        rate = n_ok / n_src if n_src else 0.0
        print(f"{pid}: {n_ok}/{n_src} verified ({rate:.1%})")


def cmd_simulate(args) -> int:
    from .corpus import build_online_corpus
    root = args.root if args.root is not None else os.path.dirname(args.manifest)
    offline = read_manifest(args.manifest, subset=args.subset)
    profiles = _profiles_by_ids(_csv(args.profiles))
    online = build_online_corpus(
        offline, profiles, batch_size=args.batch_size, out_dir=args.out_dir,
        gap_ms=args.gap_ms, threshold=args.threshold, workers=args.workers,
        root=root)
    write_manifest(online, os.path.join(args.out_dir, "online_manifest.tsv"))
    _write_resolved_config(args, args.out_dir)
    _report_pass_rates(offline, online, [p.profile_id for p in profiles])
    return 0


def cmd_build_corpus(args) -> int:
    from .corpus import build_online_corpus
    corpus_dir = args.corpus_dir
    manifest_path = args.manifest or os.path.join(corpus_dir,
                                                  "offline_manifest.tsv")
    splits_path = args.splits or os.path.join(corpus_dir, "splits.json")
    offline = read_manifest(manifest_path)
    with open(splits_path, encoding="utf-8") as fh:
        splits = json.load(fh)
    scheme = published_scheme(splits["train"], splits["dev"], splits["eval"])
    subsets = dict(zip(("train", "dev", "eval"),
                       partition(offline.records, scheme)))
    profile_sets = {"train": _csv(args.train_profiles),
                    "dev": _csv(args.dev_profiles),
                    "eval": _csv(args.eval_profiles)}
    for name, offline_subset in subsets.items():
        profiles = _profiles_by_ids(profile_sets[name])
        online = build_online_corpus(
            offline_subset, profiles, batch_size=args.batch_size,
            out_dir=corpus_dir, gap_ms=args.gap_ms, threshold=args.threshold,
            workers=args.workers, root=corpus_dir)
        merged = Manifest(list(offline_subset.records) + list(online.records),
                          subset=name)
        write_manifest(merged, os.path.join(corpus_dir,
                                            f"{name}_manifest.tsv"))
        print(f"{name}: {len(offline_subset)} offline + {len(online)} online")
        _report_pass_rates(offline_subset, online,
                           [p.profile_id for p in profiles])
    _write_resolved_config(args, corpus_dir)
    return 0


def cmd_train(args) -> int:
    if args.lam != 0.0 and args.regime not in ("pcl", "fcl"):
        print(f"warning: --lambda has no effect under regime "
              f"{args.regime!r}", file=sys.stderr)
    config = _train_config(args)
    train_manifest = read_manifest(args.train_manifest, subset="train")
    dev_manifest = read_manifest(args.dev_manifest, subset="dev")
    state, history = train(train_manifest, dev_manifest, config,
                           root=args.root)
    os.makedirs(args.out_dir, exist_ok=True)
    save_checkpoint(state.model, os.path.join(args.out_dir, "checkpoint.bin"))
    export_history(history, os.path.join(args.out_dir, "history.tsv"))
    _write_resolved_config(args, args.out_dir)
    print(f"trained {args.regime} for {len(history)} epochs; "
          f"best dev EER {state.best_dev_eer:.4f}")
    return 0


def _sweep_train_fn(args):
    train_manifest = read_manifest(args.train_manifest, subset="train")
    dev_manifest = read_manifest(args.dev_manifest, subset="dev")
    eval_manifest = read_manifest(args.manifest, subset="eval")
    cache = {}

    def run(regime, lam, seed):
        config = _train_config(args, regime=regime, lam=lam, seed=seed)
        state, _ = train(train_manifest, dev_manifest, config,
                         root=args.root, cache=cache)
        return evaluate_eer(state.model, eval_manifest, root=args.root,
                            cache=cache)
    return run


def cmd_eval(args) -> int:
    manifest = read_manifest(args.manifest, subset="eval")
    os.makedirs(args.out_dir, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    cache = {}
    scores = [score_record(model, features_for(r, args.root, cache))
              for r in manifest.records]
    trials = trials_from_scores(manifest.records, scores)
    report = breakdown(trials)
    write_scores(trials, os.path.join(args.out_dir, "scores.tsv"))
    write_report(report, os.path.join(args.out_dir, "report.tsv"))
    print(render_report(report), end="")
    if args.stability:
        stab = stability_report(manifest, root=args.root)
        write_stability(stab, os.path.join(args.out_dir, "stability.tsv"))
        print(render_stability(stab), end="")
    if args.sweep_lambda:
        if not (args.train_manifest and args.dev_manifest):
            raise ConfigError("--sweep-lambda needs --train-manifest and "
                              "--dev-manifest")
        lambdas = [float(v) for v in _csv(args.sweep_lambda)]
        seeds = [int(v) for v in _csv(args.seeds)]
        rows = lambda_sweep(_sweep_train_fn(args), lambdas, seeds,
                            regimes=_csv(args.sweep_regimes),
                            workers=args.workers)
        write_sweep(rows, os.path.join(args.out_dir, "sweep_table.tsv"))
        write_sweep_plotdata(rows, args.out_dir)
    _write_resolved_config(args, args.out_dir)
    return 0


def cmd_analyze_similarity(args) -> int:
    manifest = read_manifest(args.manifest, subset="eval")
    report = stability_report(manifest, root=args.root,
                              min_seg_frames=args.min_seg_frames)
    os.makedirs(args.out_dir, exist_ok=True)
    write_stability(report, os.path.join(args.out_dir, "stability.tsv"))
    _write_resolved_config(args, args.out_dir)
    print(render_stability(report), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtcspoof",
        description="Simulated RTC transmission and consistency-trained "
                    "spoof detection.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("make-synth", help="generate the synthetic corpus")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--train-speakers", type=int, default=4)
    sp.add_argument("--dev-speakers", type=int, default=2)
    sp.add_argument("--eval-speakers", type=int, default=4)
    sp.add_argument("--utts-bona", type=int, default=3)
    sp.add_argument("--utts-fake", type=int, default=3)
    sp.add_argument("--duration", type=float, default=2.0)
    sp.add_argument("--noises", default="S01",
                    help="comma list of noise ids cycled over utterances")
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_make_synth)

    sp = sub.add_parser("simulate", help="transmit a manifest through profiles")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--root", default=None,
                    help="directory audio paths are relative to "
                         "(default: the manifest's directory)")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--profiles", default=DEFAULT_EVAL_PROFILES)
    sp.add_argument("--subset", default="train",
                    choices=["train", "dev", "eval"])
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--gap-ms", type=float, default=200.0)
    sp.add_argument("--threshold", type=float, default=0.6)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("build-corpus",
                        help="partition and simulate all three subsets")
    sp.add_argument("--corpus-dir", required=True,
                    help="directory holding the offline corpus; online data "
                         "and subset manifests are written here too")
    sp.add_argument("--manifest", default=None)
    sp.add_argument("--splits", default=None)
    sp.add_argument("--train-profiles", default=DEFAULT_TRAIN_PROFILES)
    sp.add_argument("--dev-profiles", default=DEFAULT_DEV_PROFILES)
    sp.add_argument("--eval-profiles", default=DEFAULT_EVAL_PROFILES)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--gap-ms", type=float, default=200.0)
    sp.add_argument("--threshold", type=float, default=0.6)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_build_corpus)

    sp = sub.add_parser("train", help="train one detector")
    sp.add_argument("--train-manifest", required=True)
    sp.add_argument("--dev-manifest", required=True)
    sp.add_argument("--root", default="")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, default=0)
    _add_train_flags(sp)
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a manifest against a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--root", default="")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--stability", action="store_true")
    sp.add_argument("--sweep-lambda", default=None,
                    help="comma list of lambda values; retrains per cell")
    sp.add_argument("--sweep-regimes", default="fcl,pcl")
    sp.add_argument("--seeds", default="0",
                    help="comma list of training seeds for the sweep")
    sp.add_argument("--train-manifest", default=None)
    sp.add_argument("--dev-manifest", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--workers", type=int, default=1)
    _add_train_flags(sp, with_regime=True)
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze-similarity",
                        help="frame vs phoneme level pair similarity")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--root", default="")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--min-seg-frames", type=int, default=3)
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_analyze_similarity)
    return parser


def _apply_config_file(args, argv) -> None:
    if not getattr(args, "config", None):
        return
    with open(args.config, encoding="utf-8") as fh:
        overrides = json.load(fh)
    if not isinstance(overrides, dict):
        raise ConfigError("config file must hold a JSON object")
    valid = set(vars(args))
    explicit = {token.split("=", 1)[0] for token in argv
                if token.startswith("--")}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in valid:
            raise ConfigError(f"unknown config key {key!r}")
        if f"--{dest.replace('_', '-')}" in explicit:
            continue        # explicit flags win
        setattr(args, dest, value)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_config_file(args, argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UndefinedMetricError as exc:
        print(f"error: UndefinedMetricError: {exc}", file=sys.stderr)
        return 1
    except RtcSpoofError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
