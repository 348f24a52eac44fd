"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error (including a failed
gradient check). ``--json`` switches every subcommand to one JSON object per
output line.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import container
from .bench import eval_nll, speed_bench
from .config import ConfigError, RunConfig, SamplerConfig, load_run_config
from .generation import generate_images
from .pipeline import build_dataset, gradcheck_problem, run_training
from .training import gradcheck, load_checkpoint, load_dataset, save_checkpoint, save_dataset

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _emit(args, record: dict, text: str | None = None):
    if args.json:
        print(json.dumps(record, sort_keys=True), flush=True)
    else:
        print(text if text is not None else " ".join(f"{k}={v}" for k, v in record.items()), flush=True)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    log_file = open(cfg.paths.log, "w") if cfg.paths.log else None

    def log(event):
        if log_file:
            log_file.write(json.dumps(event) + "\n")
            log_file.flush()
        _emit(args, event)

    try:
        ckpt = run_training(cfg, log)
    finally:
        if log_file:
            log_file.close()
    save_checkpoint(ckpt, args.out)
    _emit(args, {"event": "done", "checkpoint": args.out, "num_parameters": ckpt.meta["num_parameters"]})
    return 0


def cmd_sample(args) -> int:
    sampler = SamplerConfig(temperature=args.temperature, cfg_scale=args.cfg_scale, seed=args.seed,
                            class_label=args.class_label, num_images=args.num)
    images = generate_images(args.ckpt, sampler, args.out)
    _emit(args, {"event": "sample", "num_images": len(images), "out": args.out,
                 "temperature": sampler.temperature, "cfg_scale": sampler.cfg_scale})
    return 0


def cmd_eval_nll(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset, _ = load_dataset(args.data)
    nll = eval_nll(ckpt, dataset)
    _emit(args, {"event": "eval_nll", "nll": nll, "n": len(dataset)}, f"nll={nll:.6f} nats/feature (n={len(dataset)})")
    return 0


def cmd_bench(args) -> int:
    report = speed_bench(args.ckpt, args.images, args.stub_steps)
    _emit(args, {"event": "bench", **dataclasses.asdict(report)})
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    params, tokens, labels = gradcheck_problem(cfg)
    err = gradcheck(params, cfg.model, tokens, labels, epsilon=args.epsilon, n_coords=args.coords,
                    seed=cfg.train.seed)
    ok = err < GRADCHECK_TOLERANCE
    _emit(args, {"event": "gradcheck", "max_rel_error": err, "tolerance": GRADCHECK_TOLERANCE, "passed": ok})
    return 0 if ok else 2


def cmd_make_data(args) -> int:
    cfg = load_run_config(args.config)
    dataset, meta = build_dataset(cfg.data, cfg.model)
    save_dataset(args.out, dataset, meta)
    _emit(args, {"event": "make_data", "out": args.out, "n": len(dataset),
                 "shape": list(dataset.tokens.shape)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="emit JSON lines")
    parser = _Parser(prog="arinar", description="Bi-level autoregressive model with GMM feature heads.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="generate PPM images from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class", dest="class_label", type=int, required=True)
    p.add_argument("--num", type=int, default=1)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--cfg-scale", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval-nll", parents=[common], help="held-out NLL in nats per feature")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval_nll)

    p = sub.add_parser("bench", parents=[common], help="generation speed vs an iterative-head stub")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--stub-steps", type=int, default=100)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--config")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=200)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("make-data", parents=[common], help="write a dataset container")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_data)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help().rstrip())
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (ConfigError, container.FormatError, OSError, ValueError, RuntimeError, KeyError) as e:
        if getattr(args, "json", False):
            print(json.dumps({"event": "error", "type": type(e).__name__, "message": str(e)}), flush=True)
        print(f"arinar {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
