"""
Command-line entry point: ``python -m dama <verb> [options]``.

Every verb accepts ``--config`` (a KEY=VALUE file), repeatable
``--set KEY=VALUE`` overrides and ``--out``. The resolved configuration is
written next to the outputs as ``resolved_config.env``.
"""
import argparse
import logging
import sys
import uuid
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dama.cli import commands
from dama.cli.error_handler import run_guarded
from dama.core.config import settings
from dama.core.exceptions import ConfigurationError
from dama.core.logging_config import set_run_id, setup_logging
from dama.schemas.experiment import ExperimentConfig
from dama.services.experiment_service import DEFAULT_LOWRES_FRACTIONS

logger = logging.getLogger(__name__)


def parse_overrides(pairs: Sequence[str]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"override '{pair}' is not KEY=VALUE")
        overrides[key.strip().upper()] = value.strip()
    return overrides


def _floats(text: str) -> List[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _names(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="KEY=VALUE experiment config file")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override one config value, e.g. ADAPTATION__SCHEDULE__R_HIGH=16 (repeatable)",
    )
    common.add_argument("--out", type=str, default=None, help="Output directory (default: OUTPUT_DIR)")
    common.add_argument("--log-level", type=str, default=None)

    parser = argparse.ArgumentParser(
        prog="dama", description="Depth-aware low-rank adaptation experiments on a toy ASR model"
    )
    verbs = parser.add_subparsers(dest="verb", required=True)

    verbs.add_parser("generate", parents=[common], help="Write the synthetic seen/unseen corpus")

    pretrain = verbs.add_parser("pretrain", parents=[common], help="Train the base model on seen languages")
    pretrain.add_argument("--corpus", type=Path, required=True)

    probe = verbs.add_parser("probe", parents=[common], help="Layer-wise language-ID probe profile")
    probe.add_argument("--checkpoint", type=Path, required=True)
    probe.add_argument("--corpus", type=Path, required=True)
    probe.add_argument("--group", choices=commands.GROUPS, default="all")

    adapt = verbs.add_parser("adapt", parents=[common], help="Adapt a base checkpoint to unseen languages")
    adapt.add_argument("--checkpoint", type=Path, required=True)
    adapt.add_argument("--corpus", type=Path, required=True)
    adapt.add_argument("--budget", type=float, default=None, help="Fraction of adaptation data to use")

    evaluate = verbs.add_parser("eval", parents=[common], help="Greedy-decode the test split and score WER")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--corpus", type=Path, required=True)
    evaluate.add_argument("--group", choices=commands.GROUPS, default="unseen")

    forget = verbs.add_parser("forget", parents=[common], help="Seen-language WER before/after adaptation")
    forget.add_argument("--base", type=Path, required=True)
    forget.add_argument("--adapted", type=Path, action="append", required=True)
    forget.add_argument("--corpus", type=Path, required=True)

    count = verbs.add_parser("count", parents=[common], help="Trainable-parameter and MAC accounting")
    count.add_argument("--preset", choices=("whisper-large-v2", "toy"), default="whisper-large-v2")
    count.add_argument("--geometry", type=Path, default=None, help="ModelGeometry JSON file")

    ablate = verbs.add_parser("ablate", parents=[common], help="Schedule x BPP x init ablation grid")
    ablate.add_argument("--checkpoint", type=Path, required=True)
    ablate.add_argument("--corpus", type=Path, required=True)

    lowres = verbs.add_parser("lowres", parents=[common], help="Adaptation-data budget sweep")
    lowres.add_argument("--checkpoint", type=Path, required=True)
    lowres.add_argument("--corpus", type=Path, required=True)
    lowres.add_argument(
        "--fractions", type=_floats, default=list(DEFAULT_LOWRES_FRACTIONS), help="Comma-separated"
    )
    lowres.add_argument("--modes", type=_names, default=["lora_uniform", "dama"], help="Comma-separated")
    return parser


def dispatch(args: argparse.Namespace) -> Dict[str, Path]:
    config = ExperimentConfig.load(args.config, parse_overrides(args.overrides))
    out: Optional[str] = args.out
    if args.verb == "generate":
        return commands.cmd_generate(config, out)
    if args.verb == "pretrain":
        return commands.cmd_pretrain(config, args.corpus, out)
    if args.verb == "probe":
        return commands.cmd_probe(config, args.checkpoint, args.corpus, args.group, out)
    if args.verb == "adapt":
        return commands.cmd_adapt(config, args.checkpoint, args.corpus, args.budget, out)
    if args.verb == "eval":
        return commands.cmd_eval(config, args.checkpoint, args.corpus, args.group, out)
    if args.verb == "forget":
        return commands.cmd_forget(config, args.base, args.adapted, args.corpus, out)
    if args.verb == "count":
        return commands.cmd_count(config, args.preset, args.geometry, out)
    if args.verb == "ablate":
        return commands.cmd_ablate(config, args.checkpoint, args.corpus, out)
    if args.verb == "lowres":
        return commands.cmd_lowres(config, args.checkpoint, args.corpus, args.fractions, args.modes, out)
    raise ConfigurationError(f"unknown verb '{args.verb}'")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    set_run_id(str(uuid.uuid4()))
    logger.info(f"{settings.PROJECT_NAME}: {args.verb}")

    def command():
        written = dispatch(args)
        for name, path in written.items():
            logger.info(f"Wrote {name}: {path}")

    return run_guarded(command)


if __name__ == "__main__":
    sys.exit(main())
