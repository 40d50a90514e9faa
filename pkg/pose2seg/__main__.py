import argparse
import json
import sys
from pathlib import Path
from typing import Any, NoReturn

from .core.errors import ConfigError, Pose2SegError
from .pipeline import build_config, execute

SUPPRESS = argparse.SUPPRESS


class _Parser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they share the JSON error channel."""

    def error(self, message: str) -> NoReturn:
        raise ConfigError(message)


def _flags(parser: argparse.ArgumentParser, *names: str) -> None:
    options: dict[str, dict[str, Any]] = {
        "templates": {"type": Path, "help": "Template bank JSON."},
        "image_dir": {"type": Path, "help": "Directory holding the images' file_name."},
        "predictions": {"type": Path, "help": "COCO results JSON to evaluate."},
        "manifest": {"type": Path, "help": "Published {val, test} image-id manifest."},
        "size": {"type": int, "help": "Aligned window side S. Default: 64."},
        "k": {"type": int, "help": "Number of pose templates. Default: 3."},
        "seed": {"type": int, "help": "Random seed. Default: 0."},
        "max_iter": {"type": int, "help": "Maximum K-means iterations. Default: 300."},
        "maxiou_mode": {"choices": ["bbox", "mask"], "help": "MaxIoU over boxes or masks."},
        "threshold": {"type": float, "help": "Keep MaxIoU strictly above. Default: 0.5."},
        "expand": {"type": float, "help": "Keypoint box growth factor. Default: 0."},
        "expands": {"type": float, "nargs": "+", "help": "Expand factors to sweep."},
        "format": {"choices": ["json", "table"], "help": "Report format. Default: json."},
        "bins": {"choices": ["occlusion", "size"], "help": "AP bins. Default: occlusion."},
        "val_fraction": {"type": float, "help": "Share of images in val. Default: 0.5."},
        "strategy": {"choices": ["pose", "bbox", "kpt-bbox"], "help": "Alignment strategy."},
        "units": {"type": int, "nargs": "+", "help": "Residual unit counts. Default: 5 10 15 20."},
        "residual_convs": {"type": int, "help": "Convs per residual unit. Default: 1."},
        "residual_kernel": {"type": int, "help": "Kernel of residual convs. Default: 3."},
        "sigma": {"type": float, "help": "Confidence map spread. Default: 0.06*S."},
        "limb_width": {"type": float, "help": "PAF half-width. Default: 0.03*S."},
        "dilation": {"type": int, "help": "Baseline dilation radius. Default: 3."},
        "workers": {"type": int, "help": "Threads for per-image work."},
    }
    switches = {
        "previews": "Also write per-channel PNG previews.",
        "include_crowd": "Let crowd regions take part in MaxIoU.",
    }
    for name in names:
        flag = "--" + name.replace("_", "-")
        if name in switches:
            parser.add_argument(
                flag, dest=name, action="store_true", default=SUPPRESS, help=switches[name]
            )
        elif name == "exclude_small":
            parser.add_argument(
                "--keep-small",
                dest=name,
                action="store_false",
                default=SUPPRESS,
                help="Keep small persons in size-binned evaluation.",
            )
        else:
            parser.add_argument(flag, dest=name, default=SUPPRESS, **options[name])


SUBCOMMANDS: dict[str, tuple[str, tuple[str, ...]]] = {
    "cluster": ("Cluster training poses into templates.", ("k", "seed", "max_iter", "workers")),
    "align": ("Write aligned crops and transform sidecars.", ("templates", "image_dir", "size")),
    "skeleton": (
        "Rasterize skeleton features in the aligned frame.",
        ("templates", "size", "sigma", "limb_width", "previews"),
    ),
    "stats": (
        "Occlusion statistics of an annotation set.",
        ("maxiou_mode", "include_crowd", "format", "workers"),
    ),
    "filter": (
        "Keep instances above a MaxIoU threshold.",
        ("threshold", "maxiou_mode", "include_crowd", "format", "workers"),
    ),
    "split": ("Split images into val and test.", ("seed", "val_fraction", "manifest")),
    "segment": (
        "Segment persons with the baseline segmenter.",
        ("templates", "strategy", "size", "expand", "sigma", "limb_width", "dilation", "workers"),
    ),
    "evaluate": (
        "Mask AP of predictions.",
        (
            "predictions",
            "bins",
            "exclude_small",
            "maxiou_mode",
            "include_crowd",
            "format",
            "workers",
        ),
    ),
    "rf": (
        "Receptive field of the segmentation module.",
        ("units", "residual_convs", "residual_kernel", "format"),
    ),
    "ablation": (
        "Box-versus-pose alignment grid.",
        (
            "templates",
            "expands",
            "bins",
            "exclude_small",
            "maxiou_mode",
            "size",
            "sigma",
            "limb_width",
            "dilation",
            "format",
            "workers",
        ),
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="pose2seg", description="Pose-based human instance segmentation toolkit."
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for command, (description, names) in SUBCOMMANDS.items():
        sub = commands.add_parser(command, help=description, description=description)
        sub.add_argument(
            "--config", type=Path, default=None, help="JSON config; flags win over it."
        )
        if command != "rf":
            sub.add_argument(
                "--input", type=Path, nargs="+", default=SUPPRESS, help="COCO annotation JSON."
            )
        sub.add_argument("--output", type=Path, default=SUPPRESS, help="Output file or directory.")
        _flags(sub, *names)
    return parser


def run(argv: list[str] | None = None) -> int:
    """Run one subcommand; errors go to stderr as JSON with a distinct exit code."""
    try:
        args = vars(build_parser().parse_args(argv))
        command = args.pop("command")
        config_file = args.pop("config")
        output = execute(build_config(command, args, config_file))
    except SystemExit as e:  # --help
        return e.code if isinstance(e.code, int) else 0
    except Pose2SegError as e:
        print(json.dumps(e.to_dict(), default=str), file=sys.stderr)
        return e.exit_code
    if output:
        print(output)
    return 0


def cli() -> None:
    sys.exit(run())


if __name__ == "__main__":
    cli()
