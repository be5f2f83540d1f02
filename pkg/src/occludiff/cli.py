"""Command-line pipeline driver.

Exit codes: 0 success, 1 configuration/validation problem (bad flags, bad
config file, missing or malformed artifacts), 2 runtime failure.
"""

import argparse
import sys

from .config import (
    ConfigError,
    apply_preset,
    default_config,
    load_config,
    validate_config,
    PRESETS,
)
from .datasynth import MASK_KINDS, ContainerError
from .manifest import ManifestError
from .nncore import CheckpointError
from . import pipeline


class CliError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route through our own
    # error type so bad flags count as validation failures (exit 1)
    def error(self, message):
        raise CliError(message)


def _add_common(sp):
    sp.add_argument("--config", metavar="PATH", default=None,
                    help="key=value config file applied over the preset")
    sp.add_argument("--seed", metavar="U64", type=int, default=None,
                    help="override the root seed")
    sp.add_argument("--out", metavar="DIR", default="occludiff-out",
                    help="artifact directory (default: occludiff-out)")
    sp.add_argument("--preset", choices=PRESETS, default="desk",
                    help="desk (fast defaults) or paper (published scales)")


def build_parser():
    p = _Parser(prog="occludiff",
                description="occluded-recognition pipeline: diffusion inpainting "
                            "experts fused by a learned identity gate")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, desc in (
        ("gen-data", "generate the synthetic corpus and its gallery/probe splits"),
        ("train-denoiser", "fit the diffusion noise predictor on the gallery split"),
        ("train-embedder", "fit the identity embedder on the gallery split"),
        ("train-gate", "fit the expert-fusion gate (needs denoiser and embedder)"),
        ("repaint", "inpaint the occluded probe split with every expert"),
        ("eval", "score probes and write the metrics report"),
        ("sweep-experts", "evaluate the gated method across expert counts"),
        ("sweep-occlusions", "evaluate all methods across occlusion kinds"),
    ):
        sp = sub.add_parser(name, help=desc, description=desc)
        _add_common(sp)
        if name == "repaint":
            sp.add_argument("--png", metavar="N", type=int, default=0,
                            help="also export the first N probes as PNGs")
        if name == "eval":
            sp.add_argument("--method", default="all",
                            choices=list(pipeline.METHODS) + ["all"],
                            help="which fusion method(s) to report")
        if name == "sweep-experts":
            sp.add_argument("--n-values", metavar="LIST", default="0,1,2,3,4,5",
                            help="comma-separated expert counts")
            sp.add_argument("--seeds", metavar="LIST", default=None,
                            help="comma-separated root seeds (default: config seed)")
        if name == "sweep-occlusions":
            sp.add_argument("--kinds", metavar="LIST", default=",".join(MASK_KINDS),
                            help="comma-separated occlusion kinds")
            sp.add_argument("--seeds", metavar="LIST", default=None,
                            help="comma-separated root seeds (default: config seed)")
    return p


def _int_list(text, what):
    try:
        return [int(tok.strip(), 0) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise CliError(f"cannot parse {what} list {text!r}") from None


def _load_cfg(args):
    cfg = default_config()
    apply_preset(cfg, args.preset)
    if args.config is not None:
        try:
            cfg = load_config(args.config, cfg)
        except FileNotFoundError:
            raise CliError(f"config file not found: {args.config}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    validate_config(cfg)
    return cfg


def _dispatch(args):
    cfg = _load_cfg(args)
    out = args.out
    if args.command == "gen-data":
        result = pipeline.stage_gen_data(cfg, out)
        for path in result.values():
            print(f"wrote {path}")
    elif args.command == "train-denoiser":
        result = pipeline.stage_train_denoiser(cfg, out)
        print(f"wrote {result['checkpoint']}")
        print(f"wrote {result['loss_log']}")
    elif args.command == "train-embedder":
        result = pipeline.stage_train_embedder(cfg, out)
        print(f"wrote {result['checkpoint']}")
        print(f"wrote {result['loss_log']}")
    elif args.command == "train-gate":
        result = pipeline.stage_train_gate(cfg, out)
        print(f"wrote {result['checkpoint']}")
        print(f"wrote {result['loss_log']}")
    elif args.command == "repaint":
        if args.png < 0:
            raise CliError(f"--png must be >= 0, got {args.png}")
        result = pipeline.stage_repaint(cfg, out, png_count=args.png)
        for path in result.values():
            print(f"wrote {path}")
    elif args.command == "eval":
        methods = list(pipeline.METHODS) if args.method == "all" else [args.method]
        result = pipeline.stage_eval(cfg, out, methods)
        print(f"wrote {result['report']}")
        for method in methods:
            rep = result["reports"][method]
            print(f"{method}: top1={rep.top1:.2f}% top5={rep.top5:.2f}% "
                  f"eer={rep.eer:.4f} acc={rep.acc:.2f}%")
    elif args.command == "sweep-experts":
        n_values = _int_list(args.n_values, "expert-count")
        if not n_values:
            raise CliError("--n-values is empty")
        seeds = _int_list(args.seeds, "seed") if args.seeds else [cfg.seed]
        result = pipeline.stage_sweep_experts(cfg, out, n_values, seeds)
        print(f"wrote {result['report']}")
    elif args.command == "sweep-occlusions":
        kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
        bad = [k for k in kinds if k not in MASK_KINDS]
        if bad or not kinds:
            raise CliError(f"bad occlusion kind list {args.kinds!r}; "
                           f"valid kinds: {', '.join(MASK_KINDS)}")
        seeds = _int_list(args.seeds, "seed") if args.seeds else [cfg.seed]
        result = pipeline.stage_sweep_occlusions(cfg, out, kinds, seeds)
        print(f"wrote {result['report']}")
    else:  # unreachable with required=True
        raise CliError(f"unknown command {args.command!r}")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _dispatch(args)
    except (CliError, ConfigError, ContainerError, CheckpointError, ManifestError,
            pipeline.MissingArtifactError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
