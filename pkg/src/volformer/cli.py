"""``volformer`` command line: synth, degrade, train, infer, eval, selftest.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure,
5 self-test failure. ``VOLFORMER_NUM_THREADS`` caps BLAS threads.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_SELFTEST = 0, 2, 3, 4, 5
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_env():
    # must run before numpy is imported
    n = os.environ.get("VOLFORMER_NUM_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = n


def _triple(text):
    parts = [p for p in text.replace("x", ",").split(",") if p]
    try:
        values = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or N,N,N, got {text!r}") from None
    if len(values) == 1:
        values *= 3
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected N or N,N,N, got {text!r}")
    return values


def build_parser():
    p = argparse.ArgumentParser(prog="volformer", description="Volumetric transformer super-resolution.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-step timing to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic phantom volumes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=_triple, default=(32, 32, 32), help="N or H,W,D (>= 16)")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out", type=Path, required=True)

    d = sub.add_parser("degrade", help="simulate a low-resolution acquisition")
    d.add_argument("--in", dest="input", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--factors", type=_triple, default=(2, 2, 1))

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--model-config", type=Path)
    t.add_argument("--train-config", type=Path)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--resume", nargs="?", const=True, default=None, metavar="CKPT",
                   help="continue from CKPT, or from OUT/latest.ckpt when no path is given")

    i = sub.add_parser("infer", help="super-resolve one volume")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--in", dest="input", type=Path, required=True)
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--model-config", type=Path, help="must match the checkpoint's config hash")
    i.add_argument("--tile", type=_triple, default=None, help="tiled inference with 8-voxel overlap")

    e = sub.add_parser("eval", help="score a checkpoint or precomputed predictions")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--pred", type=Path, help="directory of SR volumes named like the HR ones")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--report", type=Path, required=True)
    e.add_argument("--model-config", type=Path)
    e.add_argument("--tile", type=_triple, default=None)

    st = sub.add_parser("selftest", help="run built-in checks")
    st.add_argument("--full", action="store_true", help="include the overfit run")
    return p


def _echo(title, items):
    print(f"[{title}]")
    for key, value in items.items():
        print(f"{key} = {value}")
    sys.stdout.flush()


def _cmd_synth(args):
    from .errors import ConfigError
    from .volume import save_volume, synth_phantom

    if args.count < 1:
        raise ConfigError("--count must be at least 1")
    _echo("synth", {"seed": args.seed, "size": args.size, "count": args.count, "out": args.out})
    try:
        sample = synth_phantom(args.seed, args.size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    args.out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        vol = sample if k == 0 else synth_phantom(args.seed + k, args.size)
        path = args.out / f"phantom_{args.seed + k:04d}.vol"
        save_volume(vol, path)
        print(f"wrote {path}")


def _cmd_degrade(args):
    from .degrade import degrade
    from .volume import load_volume, save_volume

    _echo("degrade", {"in": args.input, "out": args.out, "factors": args.factors})
    hr = load_volume(args.input)
    lr = degrade(hr, args.factors)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(lr, args.out)
    print(f"wrote {args.out}")


def _model_config(path):
    from .config import ModelConfig, load_config

    return ModelConfig() if path is None else load_config(ModelConfig, path)


def _cmd_train(args):
    from .config import TrainConfig, load_config, to_text
    from .swin3d import param_count
    from .train import train

    model_cfg = _model_config(args.model_config)
    train_cfg = TrainConfig() if args.train_config is None else load_config(TrainConfig, args.train_config)
    print("[model]\n" + to_text(model_cfg) + f"# params = {param_count(model_cfg)}, hash = {model_cfg.hash()}")
    print("[train]\n" + to_text(train_cfg), end="")
    _echo("run", {"data": args.data, "out": args.out, "resume": args.resume})
    resume = args.resume if args.resume in (None, True) else Path(args.resume)
    trainer = train(model_cfg, train_cfg, args.data, args.out, resume=resume)
    print(f"done at step {trainer.step}; log {args.out / 'metrics.log'}")


def _load_for_inference(args):
    from .checkpoint import load_checkpoint
    from .config import to_text

    expect = None if args.model_config is None else _model_config(args.model_config)
    ckpt = load_checkpoint(args.checkpoint, expect_model=expect)
    print("[model]\n" + to_text(ckpt.model_config) + f"# hash = {ckpt.config_hash}, step = {ckpt.step}")
    return ckpt


def _cmd_infer(args):
    from .autodiff import Tensor
    from .inference import predict
    from .volume import load_volume, save_volume

    ckpt = _load_for_inference(args)
    _echo("infer", {"in": args.input, "out": args.out, "tile": args.tile})
    lr = load_volume(args.input)
    params = {k: Tensor(v) for k, v in ckpt.params.items()}
    sr = predict(lr, params, ckpt.model_config, tile=args.tile)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(sr, args.out)
    print(f"wrote {args.out}")


def _cmd_eval(args):
    from .inference import evaluate, evaluate_predictions

    if args.pred is not None:
        _echo("eval", {"pred": args.pred, "data": args.data, "report": args.report})
        report = evaluate_predictions(args.pred, args.data)
    else:
        ckpt = _load_for_inference(args)
        _echo("eval", {"data": args.data, "report": args.report, "tile": args.tile})
        report = evaluate(ckpt, args.data, tile=args.tile)
    text = report.to_text()
    args.report.parent.mkdir(parents=True, exist_ok=True)
    args.report.write_text(text)
    print(text, end="")


def _cmd_selftest(args):
    from .selftest import CORRUPT_ENV, run

    _echo("selftest", {"full": args.full, "corrupt": os.environ.get(CORRUPT_ENV, "")})
    if not run(full=args.full):
        print("selftest FAILED")
        return EXIT_SELFTEST
    print("selftest passed")


COMMANDS = {
    "synth": _cmd_synth,
    "degrade": _cmd_degrade,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "selftest": _cmd_selftest,
}


def main(argv=None):
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    from .errors import ConfigError, DataError, NumericError

    try:
        code = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
