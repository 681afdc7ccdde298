"""Command-line entry points: attack, bench, evalgrad, synth, serve-oracle, make-model.

Exit codes: 0 success, 2 attack failed within budget, 3 configuration error,
4 I/O or protocol error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .attack import attack_targeted, attack_untargeted
from .harness import (build_attack_config, eval_gradient_quality,
                      load_benchmark_spec, run_benchmark, save_dataset,
                      synth_dataset, write_gradient_quality_csv)
from .models import (DEFAULT_CONV_FILTERS, DEFAULT_FEAT_FILTERS, ModelBundle)
from .oracle import OracleUnavailable, TcpOracleServer, open_oracle, serve_stdio
from .tensor import Shape, read_vtf, write_vtf

EXIT_OK = 0
EXIT_ATTACK_FAILED = 2
EXIT_CONFIG = 3
EXIT_IO = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2, which we reserve
        self.print_usage(sys.stderr)
        raise SystemExit_(EXIT_CONFIG, message)


class SystemExit_(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parse_shape(text: str) -> Shape:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"shape must be N,H,W,C, got {text!r}")
    return Shape(*parts)


def _parse_grid(text: str) -> tuple[int, int]:
    rows, _, cols = text.lower().partition("x")
    if not rows.isdigit() or not cols.isdigit():
        raise ValueError(f"grid must look like 8x8, got {text!r}")
    return int(rows), int(cols)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vidattack",
                     description="Query-limited black-box attacks on the toy video classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-model", help="create a seeded model checkpoint")
    p.add_argument("--shape", default="8,32,32,3")
    p.add_argument("--classes", type=int, default=harness.DESK_CLASSES)
    p.add_argument("--conv-filters", type=int, default=DEFAULT_CONV_FILTERS)
    p.add_argument("--feat-filters", type=int, default=DEFAULT_FEAT_FILTERS)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a confident synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--shape", default="8,32,32,3")
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("attack", help="run one attack against an oracle")
    p.add_argument("--mode", choices=["untargeted", "targeted"], required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--target-class", type=int)
    p.add_argument("--target-video")
    p.add_argument("--oracle", required=True,
                   help="builtin:PATH.vbm | exec:CMD | tcp:HOST:PORT")
    p.add_argument("--surrogates", help="model bundle supplying transfer surrogates "
                                        "(defaults to the builtin oracle bundle)")
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--queries", type=int, default=300_000)
    p.add_argument("--pop", type=int, default=48)
    p.add_argument("--sigma", type=float)
    p.add_argument("--grid", default="8x8")
    p.add_argument("--tentative", choices=["static", "random", "single", "ensemble"],
                   default="ensemble")
    p.add_argument("--partition", choices=["uniform", "random", "pixel"], default="uniform")
    p.add_argument("--estimator", choices=["nes", "fd"], default="nes")
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--eps-decay", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write a result summary JSON here")
    p.add_argument("--log", help="write the per-step trajectory JSONL here")
    p.add_argument("--save-adv", help="write the final adversarial video here (.vtf)")

    p = sub.add_parser("bench", help="run a benchmark spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir")

    p = sub.add_parser("evalgrad", help="gradient-estimate quality table")
    p.add_argument("--model", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--population", type=int, default=48)
    p.add_argument("--sigma", type=float, default=1e-3)
    p.add_argument("--exact", action="store_true",
                   help="use exact projection weights instead of NES estimates")

    p = sub.add_parser("serve-oracle", help="serve the line protocol for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--listen", default="stdio", help="stdio or HOST:PORT")
    return parser


def _cmd_make_model(args) -> int:
    shape = _parse_shape(args.shape)
    bundle = ModelBundle.seeded(shape, args.classes, args.conv_filters,
                                args.feat_filters, args.seed)
    bundle.save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    bundle = ModelBundle.load(args.model)
    shape = _parse_shape(args.shape)
    if shape != bundle.config.shape:
        raise ValueError(f"shape {shape.as_tuple()} does not match model "
                         f"{bundle.config.shape.as_tuple()}")
    rng = np.random.default_rng(args.seed)
    samples = synth_dataset(args.count, shape, bundle.classifier, rng)
    save_dataset(args.out_dir, samples, bundle.classifier, args.seed)
    labels = sorted({label for _, label in samples})
    print(f"wrote {len(samples)} samples to {args.out_dir} (classes: {labels})")
    return EXIT_OK


def _cmd_attack(args) -> int:
    video = read_vtf(args.video)
    oracle = open_oracle(args.oracle)
    surrogate_path = args.surrogates
    if surrogate_path is None and args.oracle.startswith("builtin:"):
        surrogate_path = args.oracle.partition(":")[2]
    bundle = None
    if args.tentative in ("single", "ensemble"):
        if surrogate_path is None:
            raise ValueError("transferred tentative perturbations need --surrogates "
                             "when the oracle is not builtin")
        bundle = ModelBundle.load(surrogate_path)
    sigma = args.sigma
    if sigma is None:
        sigma = (harness.DESK_SIGMA_TARGETED if args.mode == "targeted"
                 else harness.DESK_SIGMA_UNTARGETED)
    cfg = build_attack_config(
        args.mode, bundle,
        tentative=args.tentative, partition=args.partition, estimator=args.estimator,
        population=args.pop, sigma=sigma, grid=_parse_grid(args.grid),
        shape=Shape.of(video),
        eps_adv=args.eps, budget=args.queries, step_size=args.step_size,
        eps_decay=args.eps_decay,
    )
    rng = np.random.default_rng(args.seed)
    if args.mode == "targeted":
        if args.target_class is None or args.target_video is None:
            raise ValueError("targeted mode needs --target-class and --target-video")
        target_video = read_vtf(args.target_video)
        result = attack_targeted(video, args.target_class, target_video, oracle, cfg,
                                 rng, traj_path=args.log)
    else:
        result = attack_untargeted(video, args.label, oracle, cfg, rng,
                                   traj_path=args.log)
    linf = float(np.max(np.abs(result.x_adv.astype(np.float64) - video.astype(np.float64))))
    summary = {
        "mode": args.mode,
        "success": result.success,
        "queries_used": result.queries_used,
        "steps": result.steps,
        "final_epsilon": result.epsilon,
        "final_linf": linf,
        "label": args.label,
        "target_class": args.target_class,
    }
    if args.save_adv:
        write_vtf(args.save_adv, result.x_adv)
        summary["adv_video"] = args.save_adv
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    if hasattr(oracle, "close"):
        oracle.close()
    return EXIT_OK if result.success else EXIT_ATTACK_FAILED


def _cmd_bench(args) -> int:
    spec = load_benchmark_spec(args.spec)
    if args.out_dir:
        import dataclasses
        spec = dataclasses.replace(spec, out_dir=args.out_dir)
    summary = run_benchmark(spec)
    for arm, trials, successes, sr, anq in summary.per_arm():
        anq_text = f"{anq:.1f}" if anq is not None else "-"
        print(f"{arm}: SR {sr:.2%} ({successes}/{trials}), ANQ {anq_text}")
    return EXIT_OK


def _cmd_evalgrad(args) -> int:
    bundle = ModelBundle.load(args.model)
    rng = np.random.default_rng(args.seed)
    rows = eval_gradient_quality(bundle, args.trials, rng, population=args.population,
                                 sigma=args.sigma, exact=args.exact)
    write_gradient_quality_csv(args.out, rows)
    for row in rows:
        print(f"{row.name}: tentative {row.tentative_cosine:+.4f}, "
              f"rectified {row.rectified_cosine:+.4f}")
    return EXIT_OK


def _cmd_serve_oracle(args) -> int:
    bundle = ModelBundle.load(args.model)
    if args.listen == "stdio":
        serve_stdio(bundle.classifier)
        return EXIT_OK
    host, _, port = args.listen.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"--listen must be stdio or HOST:PORT, got {args.listen!r}")
    server = TcpOracleServer(bundle.classifier, host, int(port))
    print(f"serving on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


_COMMANDS = {
    "make-model": _cmd_make_model,
    "synth": _cmd_synth,
    "attack": _cmd_attack,
    "bench": _cmd_bench,
    "evalgrad": _cmd_evalgrad,
    "serve-oracle": _cmd_serve_oracle,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit_ as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OracleUnavailable, OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
