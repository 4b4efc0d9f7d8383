"""``bhvit`` command line: train, eval, verify, count-ops, bench-gemm, observe."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .errors import BHViTError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _data_dir(arg: str | None) -> Path:
    from .data import DATA_ENV, default_data_dir

    if arg is None:
        env = default_data_dir()
        if env is None:
            raise UsageError(f"--data not given and {DATA_ENV} is unset")
        arg = str(env)
    return _existing(arg, "data directory")


def _load_configs(path: Path):
    from .model import ModelConfig
    from .training import TrainConfig

    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: expected a mapping")
    train_raw = raw.pop("train", {}) or {}
    return ModelConfig.from_dict(raw), TrainConfig.from_dict(train_raw)


# -- commands ------------------------------------------------------------------
def cmd_train(args) -> int:
    from .data import load_dataset, read_teacher_logits
    from .model import BHViT
    from .training import train

    cfg_path = _existing(args.config, "config file")
    data = _data_dir(args.data)
    model_cfg, train_cfg = _load_configs(cfg_path)
    if args.seed is not None:
        train_cfg.seed = args.seed
        model_cfg.seed = args.seed
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if args.subset is not None:
        train_cfg.train_subset = args.subset
    train_cfg.validate()
    teacher = None
    if args.teacher_logits:
        teacher = read_teacher_logits(_existing(args.teacher_logits, "teacher logits"))
    elif train_cfg.lam > 0:
        print("no teacher logits given; distillation weight set to 0", file=sys.stderr)
    train_ds = load_dataset(data, "train")
    if train_cfg.train_subset:
        train_ds = train_ds.subset(train_cfg.train_subset, seed=train_cfg.seed)
    try:
        eval_ds = load_dataset(data, "test")
        if train_cfg.eval_subset:
            eval_ds = eval_ds.subset(train_cfg.eval_subset, seed=train_cfg.seed)
    except FileNotFoundError:
        eval_ds = None
    model = BHViT(model_cfg)
    out = Path(args.out)
    result = train(model, train_ds, train_cfg, eval_ds=eval_ds, teacher_logits=teacher, out_dir=out,
                   on_record=lambda r: print(json.dumps(r), flush=True))
    if args.figure:
        from .plots import render

        render("training", result.history, args.figure)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .layers import bit_kernels
    from .training import evaluate

    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    ds = load_dataset(_data_dir(args.data), args.split)
    if args.limit:
        ds = ds.subset(args.limit, seed=0)
    t0 = time.perf_counter()
    if args.bits:
        with bit_kernels():
            res = evaluate(ckpt.model, ds)
    else:
        res = evaluate(ckpt.model, ds)
    res.update({"samples": len(ds), "epoch": ckpt.epoch, "bits": bool(args.bits),
                "seconds": round(time.perf_counter() - t0, 3)})
    print(json.dumps(res))
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    results = verify.run(args.suite, seed=args.seed)
    print(verify.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_count_ops(args) -> int:
    from .model import ModelConfig, count_ops

    if args.config:
        cfg = ModelConfig.load(_existing(args.config, "config file"))
    else:
        cfg = ModelConfig.preset_config(args.preset)
    if args.fdl:
        cfg.fdl = True
    rep = count_ops(cfg, args.input_size)
    d = rep.as_dict()
    if args.json:
        d["breakdown"] = rep.breakdown
        print(json.dumps(d, indent=2))
        return EXIT_OK
    print(f"model      {cfg.preset or 'custom'}{' (FDL)' if cfg.fdl else ''} @ {args.input_size or cfg.input_size}px")
    print(f"BOPs       {rep.bops:.4e}")
    print(f"FLOPs      {rep.flops:.4e}")
    print(f"OPs        {rep.ops:.4e}")
    print(f"binary     {rep.binary_params} params (1 bit)")
    print(f"real       {rep.real_params} params (32 bit)")
    print(f"size       {rep.size_mb:.3f} MB")
    return EXIT_OK


def cmd_bench_gemm(args) -> int:
    from . import bitpack

    rng = np.random.default_rng(args.seed)
    print("m,k,n,xnor_gops,float_gops,ratio")
    for spec in args.sizes.split(","):
        try:
            m, k, n = (int(v) for v in spec.lower().split("x"))
        except ValueError:
            raise UsageError(f"size {spec!r} is not MxKxN") from None
        a = np.where(rng.random((m, k)) < 0.5, -1, 1).astype(np.int8)
        b = np.where(rng.random((k, n)) < 0.5, -1, 1).astype(np.int8)
        pa, pbt = bitpack.pack(a), bitpack.pack(np.ascontiguousarray(b.T))
        fa, fb = a.astype(np.float32), b.astype(np.float32)
        tx = _best_time(lambda: bitpack.xnor_gemm_nt(pa, pbt), args.repeat)
        tf = _best_time(lambda: fa @ fb, args.repeat)
        ops = 2.0 * m * k * n / 1e9
        print(f"{m},{k},{n},{ops / tx:.3f},{ops / tf:.3f},{tf / tx:.3f}")
    return EXIT_OK


def _best_time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(max(repeat, 1)):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return max(best, 1e-9)


def cmd_observe(args) -> int:
    from . import observations as ob

    kwargs = {}
    if args.experiment == "entropy":
        kwargs = {"trials": args.trials or 1000, "seed": args.seed}
        if args.logit_scale is not None:
            kwargs["logit_scale"] = args.logit_scale
    elif args.experiment == "demoivre":
        kwargs = {"seed": args.seed}
    elif args.experiment == "gradient":
        kwargs = {"trials": args.trials or 100, "seed": args.seed}
    elif args.experiment == "adam":
        kwargs = {"t_max": args.t_max}
    rows = ob.EXPERIMENTS[args.experiment](**kwargs)
    if args.out:
        ob.write_csv(rows, args.out)
    else:
        import csv

        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    if args.figure:
        from .plots import render

        render(args.experiment, rows, args.figure)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bhvit", description="Binary hybrid vision transformer toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True, help="YAML/JSON model config, optional 'train' section")
    t.add_argument("--data", help="dataset directory (default: $BHVIT_DATA)")
    t.add_argument("--out", required=True, help="output directory for checkpoint and metrics")
    t.add_argument("--teacher-logits", help="teacher logits file")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--subset", type=int, help="train on a stratified subset of this size")
    t.add_argument("--figure", help="write a flip-count figure here")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default: $BHVIT_DATA)")
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--limit", type=int)
    e.add_argument("--bits", action="store_true", help="run binary layers on packed kernels")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run property self-checks")
    v.add_argument("--suite", default="all", choices=["bitpack", "quant", "model", "all"])
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("count-ops", help="print BOPs/FLOPs/OPs and model size")
    c.add_argument("--config")
    c.add_argument("--preset", default="small", choices=["tiny", "small", "micro"])
    c.add_argument("--input-size", type=int)
    c.add_argument("--fdl", action="store_true", help="full-precision downsampling")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_count_ops)

    b = sub.add_parser("bench-gemm", help="xnor/popcount vs float GEMM throughput")
    b.add_argument("--sizes", default="64x256x64,256x1024x256,512x2048x512")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench_gemm)

    o = sub.add_parser("observe", help="run an observation experiment to CSV")
    o.add_argument("--experiment", required=True, choices=["entropy", "adam", "gradient", "demoivre"])
    o.add_argument("--out", help="CSV path (default: stdout)")
    o.add_argument("--figure", help="also render a figure (png/pdf/svg)")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--trials", type=int)
    o.add_argument("--logit-scale", type=float)
    o.add_argument("--t-max", type=int, default=10000)
    o.set_defaults(func=cmd_observe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bhvit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        name = getattr(exc, "path", None) or exc.filename or str(exc)
        print(f"bhvit {args.command}: file not found: {name}", file=sys.stderr)
        return EXIT_USAGE
    except BHViTError as exc:
        print(f"bhvit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
