"""Command-line interface.

Subcommands: gen-data, train, eval, visualize, gradcheck, oracle-check,
bench. Every command is reproducible from its flags plus the seed; exit
codes are 0 on success, 1 on check failure, 2 on usage or configuration
errors. The --threads flag sizes the worker pool for the parallel kernels
before they are loaded; --threads 1 guarantees bitwise determinism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time


def _configure_threads(threads: int | None) -> None:
    # Must run before numba is first imported anywhere in the process.
    if threads is not None and "numba" not in sys.modules:
        os.environ["NUMBA_NUM_THREADS"] = str(max(1, threads))


def _set_threads(threads: int | None) -> int:
    import numba

    if threads is None:
        return numba.get_num_threads()
    limit = numba.config.NUMBA_NUM_THREADS
    clamped = max(1, min(threads, limit))
    if clamped != threads:
        print(f"warning: requested {threads} threads, using {clamped} "
              f"(process limit {limit})", file=sys.stderr)
    numba.set_num_threads(clamped)
    return clamped


def _parse_window(text: str):
    from .stss import WindowSpec

    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"window must be L,U,V, got {text!r}")
    return WindowSpec(*parts)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    from .synthdata import gen_motion_dataset, save_dataset

    clips = gen_motion_dataset(args.per_class, seed=args.seed,
                               frames=args.frames, height=args.canvas,
                               width=args.canvas)
    manifest = save_dataset(clips, args.out)
    print(json.dumps({"clips": len(clips), "manifest": manifest}))
    return 0


def cmd_train(args) -> int:
    _set_threads(args.threads)
    from .module import MossConfig, config_from_json
    from .synthdata import load_dataset
    from .train import TrainConfig, train_config_from_json, train_loop

    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    if "moss" in doc:
        moss_cfg = config_from_json(doc["moss"])
    else:
        moss_cfg = MossConfig(channels=16, width=16)
    train_cfg = train_config_from_json(doc.get("train", {}))

    clips = load_dataset(args.data)
    n_eval = max(1, int(len(clips) * args.eval_frac))
    eval_clips = clips[-n_eval:] if args.holdout else []
    train_clips = clips[:-n_eval] if args.holdout else clips

    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    with open(metrics_path, "w") as metrics_fh:
        def on_metric(record):
            line = json.dumps(record)
            print(line)
            metrics_fh.write(line + "\n")

        result = train_loop(train_clips, eval_clips, moss_cfg, train_cfg,
                            out_dir=args.out, on_metric=on_metric)
    print(json.dumps({"checkpoint": result.checkpoint_path,
                      "final": result.metrics[-1]}))
    return 0


def cmd_eval(args) -> int:
    _set_threads(args.threads)
    from .synthdata import load_dataset
    from .train import evaluate, load_checkpoint

    store, moss_cfg, _, _ = load_checkpoint(args.checkpoint)
    clips = load_dataset(args.data)
    acc, per_class = evaluate(clips, moss_cfg, store)
    print(json.dumps({"accuracy": acc,
                      "per_class": {str(k): v for k, v in per_class.items()},
                      "clips": len(clips)}))
    return 0


def cmd_visualize(args) -> int:
    _set_threads(args.threads)
    import numpy as np

    from .module import MossConfig, high_order_stss
    from .synthdata import load_dataset, make_patch_embed, patch_embed
    from .train import embed_from_store, load_checkpoint
    from .viz import (QuerySelector, l2norm_map, norm_map_name, query_map_name,
                      stss_query_maps, write_ppm)

    clips = load_dataset(args.data)
    clip = next((c for c in clips if c.index == args.index), None)
    if clip is None:
        print(f"error: no clip with index {args.index}", file=sys.stderr)
        return 2
    orders = tuple(int(n) for n in args.orders.split(","))
    window = _parse_window(args.window)
    if args.checkpoint:
        store, moss_cfg, _, _ = load_checkpoint(args.checkpoint)
        f_map = patch_embed(clip.pixels, embed_from_store(store))
        outputs = high_order_stss(f_map, moss_cfg, store,
                                  up_to=max(orders), mode="eval")
    else:
        embed = make_patch_embed(args.channels, clip.seed)
        f_map = patch_embed(clip.pixels, embed)
        cfg = MossConfig(channels=f_map.shape[-1], orders=orders,
                         window=window)
        outputs = high_order_stss(f_map, cfg, up_to=max(orders),
                                  encoder_kind="vectorize")
    t, h, w = (int(p) for p in args.query.split(","))
    os.makedirs(args.out, exist_ok=True)
    hl = window.L // 2
    written = []
    for n in orders:
        q = QuerySelector(t, h, w, n)
        for li, heat in enumerate(stss_query_maps(outputs, q)):
            name = query_map_name(args.prefix, n, q, li - hl)
            write_ppm(heat, os.path.join(args.out, name))
            written.append(name)
        norm = l2norm_map(outputs.m[n].data, t)
        name = norm_map_name(args.prefix, n, t)
        write_ppm(norm, os.path.join(args.out, name))
        written.append(name)
    print(json.dumps({"written": written, "out": args.out}))
    return 0


def cmd_gradcheck(args) -> int:
    _set_threads(args.threads)
    from .verify import gradient_suite

    results = gradient_suite(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err <= args.tol else "FAIL"
        print(f"{name:24s} max rel err {err:.3e}  {status}")
        worst = max(worst, err)
    print(f"worst: {worst:.3e} (tolerance {args.tol:g})")
    return 0 if worst <= args.tol else 1


def cmd_oracle_check(args) -> int:
    _set_threads(args.threads)
    from .verify import oracle_sweep

    report = oracle_sweep(seed=args.seed, instances=args.instances,
                          include_large=not args.small_only)
    print(f"instances: {len(report['cases'])}")
    print(f"max abs diff: {report['max_diff']:.3e} (tolerance {args.tol:g})")
    return 0 if report["max_diff"] <= args.tol else 1


def cmd_bench(args) -> int:
    import numpy as np

    threads_list = [int(t) for t in args.threads.split(",")]
    from .stss import stss_forward, stss_oracle  # noqa: F401  (loads numba)
    import numba

    window = _parse_window(args.window)
    rng = np.random.default_rng(args.seed)
    print("shape,window,variant,threads,ms,gflops")
    rows = []
    for shape_text in args.shapes.split():
        shape = tuple(int(p) for p in shape_text.split("x"))
        f = rng.uniform(-1, 1, size=shape).astype(np.float32)
        flops = (shape[0] * shape[1] * shape[2] * window.L * window.U
                 * window.V * 2 * shape[3])

        def timed(fn, repeats):
            best = float("inf")
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            return best * 1e3

        if not args.skip_naive:
            ms = timed(lambda: stss_oracle(f, window), 1)
            rows.append((shape_text, "naive", 1, ms, flops / ms / 1e6))
        stss_forward(f, window)  # compile before timing
        for threads in threads_list:
            used = _set_threads(threads)
            variant = "blocked" if used == 1 else "parallel"
            ms = timed(lambda: stss_forward(f, window), args.repeats)
            rows.append((shape_text, variant, used, ms, flops / ms / 1e6))
    for shape_text, variant, threads, ms, gflops in rows:
        print(f"{shape_text},{window.L}x{window.U}x{window.V},{variant},"
              f"{threads},{ms:.3f},{gflops:.3f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moss",
        description="Multi-order space-time self-similarity toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the motion dataset")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--canvas", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the motion classifier")
    p.add_argument("--config", help="JSON file with 'moss' and 'train' sections")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout", action="store_true",
                   help="keep the tail of the dataset for evaluation")
    p.add_argument("--eval-frac", type=float, default=0.2)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="emit similarity and norm heatmaps")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--query", default="0,4,4", help="t,h,w on the feature grid")
    p.add_argument("--orders", default="1,2")
    p.add_argument("--window", default="5,9,9")
    p.add_argument("--channels", type=int, default=16,
                   help="embedding channels when no checkpoint is given")
    p.add_argument("--out", required=True)
    p.add_argument("--prefix", default="stss")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle-check",
                       help="blocked kernel vs loop reference sweep")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--small-only", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser(
        "bench",
        help="time naive vs blocked vs parallel kernels; prints CSV with "
             "columns shape,window,variant,threads,ms,gflops (nominal FLOPs "
             "= T*H*W*L*U*V*2C)")
    p.add_argument("--shapes", default="8x14x14x64",
                   help="space-separated TxHxWxC list")
    p.add_argument("--window", default="5,9,9")
    p.add_argument("--threads", default="1,8", help="comma-separated counts")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-naive", action="store_true")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # Thread sizing must precede the first numba import.
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            requested = argv[i + 1].split(",")
            try:
                _configure_threads(max(int(r) for r in requested))
            except ValueError:
                pass
            break
        if arg.startswith("--threads="):
            try:
                _configure_threads(
                    max(int(r) for r in arg.split("=", 1)[1].split(",")))
            except ValueError:
                pass
            break
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
