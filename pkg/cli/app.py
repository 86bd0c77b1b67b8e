import argparse
from typing import Optional, Sequence

from cli.handlers import cmd_ablate, cmd_dump_tasks, cmd_golden, cmd_plot, cmd_stats, cmd_train
from core.config import PRESETS, Algorithm
from core.settings import Settings


def _add_config_options(parser: argparse.ArgumentParser, required: bool = False) -> None:
    parser.add_argument("--config", required=required, help="JSON (or YAML) TrainConfig document")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path override, e.g. --set model.embed_dim=16 (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=None, help="overrides SRPO_SEED and the config seed")


def create_parser(settings: Settings) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srpo-lab",
        description="Sample-routed policy optimization on toy verifiable-reward tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training job")
    _add_config_options(train)
    train.add_argument("--preset", choices=sorted(PRESETS), default=None)
    train.add_argument("--algorithm", choices=[a.value for a in Algorithm], default=None)
    train.add_argument("--out", default=None, help=f"run directory (default under {settings.runs_dir}/)")
    train.add_argument("--resume", action="store_true", help="continue from checkpoints/latest.ckpt")
    train.add_argument("--from-manifest", dest="from_manifest", default=None, help="re-run a manifest's config")
    train.set_defaults(handler=cmd_train)

    ablate = sub.add_parser("ablate", help="sweep algorithm variants over seeds")
    _add_config_options(ablate)
    ablate.add_argument("--preset", choices=sorted(PRESETS), default=None)
    ablate.add_argument("--out", required=True)
    ablate.add_argument("--seeds", type=int, default=3)
    ablate.add_argument("--variants", default=None, help="comma-separated algorithms")
    ablate.add_argument("--workers", type=int, default=1)
    ablate.set_defaults(handler=cmd_ablate)

    stats = sub.add_parser("stats", help="recompute routing fractions from a rollout log")
    stats.add_argument("--rollouts", required=True)
    stats.add_argument("--metrics", default=None, help="metrics.csv to cross-check against")
    stats.set_defaults(handler=cmd_stats)

    plot = sub.add_parser("plot", help="render SVG curves from one or more metrics files")
    plot.add_argument("--metrics", nargs="+", required=True)
    plot.add_argument("--out", required=True)
    plot.set_defaults(handler=cmd_plot)

    golden = sub.add_parser("golden", help="write the worked-example fixtures")
    golden.add_argument("--out", required=True)
    golden.set_defaults(handler=cmd_golden)

    dump = sub.add_parser("dump-tasks", help="write sampled tasks as JSONL")
    _add_config_options(dump)
    dump.add_argument("--count", type=int, required=True)
    dump.add_argument("--out", required=True)
    dump.set_defaults(handler=cmd_dump_tasks)
    return parser


def run(argv: Optional[Sequence[str]], settings: Settings) -> int:
    args = create_parser(settings).parse_args(argv)
    return args.handler(args, settings)
