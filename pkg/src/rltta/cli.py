"""Command-line entry point: ``rltta {gen,train,train-agent,eval,ablate,report}``.

Exit codes: 0 success, 2 bad config or usage, 3 missing artifact,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from . import nn_core, pipeline, synthdata

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("rltta")


def _per_seed(stage):
    def run(cfg, args):
        out = []
        for seed in cfg.seeds:
            log.info("%s: seed %d", args.command, seed)
            out += stage(cfg, seed, args)
        return out
    return run


def _gen(cfg, seed, args):
    return pipeline.generate_data(cfg, seed, force=args.force)


def _train(cfg, seed, args):
    paths = pipeline.train_classifier(cfg, seed)
    log.info("classifier -> %s", paths[0])
    return paths


def _train_agent(cfg, seed, args):
    paths = pipeline.train_rl_agent(cfg, seed)
    log.info("%s agent -> %s", cfg.agent.kind, paths[0])
    return paths


def _eval(cfg, seed, args):
    modes = (args.mode,) if args.mode else pipeline.MODES
    rows, paths = pipeline.evaluate(cfg, seed, modes)
    for r in rows:
        rep = r["report"]
        print(f"seed {seed}  {r['train_domain']}->{r['eval_domain']}  {r['mode']:<7} k={r['k']}  "
              f"AUC {rep.auc:.4f}  pAUC {rep.pauc:.4f}  EER {rep.eer:.4f}")
    return paths


def _ablate(cfg, seed, args):
    rows, paths = pipeline.ablate(cfg, seed, range(args.k_min, args.k_max + 1))
    print(paths[1].read_text(), end="")
    return paths


def _report(cfg, args):
    text, paths = pipeline.report(cfg)
    print(text, end="")
    return paths


COMMANDS = {
    "gen": (_per_seed(_gen), "render the synthetic domains and write a data manifest"),
    "train": (_per_seed(_train), "train the real/fake classifier on the training domain"),
    "train-agent": (_per_seed(_train_agent), "train the augmentation-selection agent"),
    "eval": (_per_seed(_eval), "score eval domains with no / random / learned TTA"),
    "ablate": (_per_seed(_ablate), "learned-TTA metrics for a range of top-k"),
    "report": (_report, "aggregate eval and ablation CSVs over seeds"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run configuration")
    common.add_argument("--seed", type=int, metavar="N", help="run a single seed instead of the config's list")
    common.add_argument("--agent", choices=("dqn", "ppo"), help="agent kind")
    common.add_argument("--k", type=int, metavar="N", help="top-k for TTA")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite generated data")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rltta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "eval":
            p.add_argument("--mode", choices=pipeline.MODES, help="one mode (default: all three)")
        if name == "ablate":
            p.add_argument("--k-min", type=int, default=1)
            p.add_argument("--k-max", type=int, default=5)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    started = time.time()
    try:
        cfg = pipeline.load_config(args.config, seed=args.seed, agent=args.agent, k=args.k, out=args.out)
        if args.command == "ablate" and not 1 <= args.k_min <= args.k_max:
            raise pipeline.ConfigError("need 1 <= --k-min <= --k-max")
    except pipeline.ConfigError as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING

    run, _ = COMMANDS[args.command]
    try:
        outputs = run(cfg, args)
    except pipeline.ArtifactExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.ConfigError as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, OSError, nn_core.CheckpointError, synthdata.DatasetFormatError) as exc:
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        pipeline.record_run(cfg, args.command, argv, started, f"failed: {exc}", [])
        return EXIT_RUNTIME
    pipeline.record_run(cfg, args.command, argv, started, "ok", outputs)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
