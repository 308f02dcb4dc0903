"""Command-line entry point: ``rac <subcommand> [options]``.

Exit codes: 0 success, 1 failed check or runtime error, 2 usage or filesystem
error, 3 corrupt or incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig, load_config
from .data import PpmError, load_dataset, load_ppm, save_ppm
from .evaluation import (compute_metrics, pca_trajectories, roundtrip_eval, step_sweep,
                         write_pca_csv, write_sweep_csv)
from .gradcheck import check_all_ops, check_full_loss
from .state import normalize_image
from .teacher import teacher_pretrain
from .tensor import Tensor, no_grad
from .trainer import (from_checkpoint, make_optimizer, teacher_checkpoint,
                      teacher_from_checkpoint, train_loop)
from .model import RacModel

log = logging.getLogger("racflow")


class UsageError(Exception):
    pass


def _thread_limit():
    limit = os.environ.get("RAC_THREADS")
    if not limit:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(limit))


def _overrides(args) -> dict[str, str]:
    values = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        values["train.seed"] = str(args.seed)
    if getattr(args, "iterations", None) is not None:
        key = "teacher.iterations" if args.command == "teacher-pretrain" else "train.iterations"
        values[key] = str(args.iterations)
    return values


def _echo_config(config: RunConfig) -> None:
    print("# effective configuration")
    sys.stdout.write(config.dumps())
    sys.stdout.flush()


def _load_model(args) -> RacModel:
    ck = ckpt_io.load_checkpoint(args.ckpt)
    config = RunConfig.from_flat(ck.config).override(_overrides(args))
    model, _, _ = from_checkpoint(ck, config)
    _echo_config(config)
    return model


def _ensure_dir(path: str | Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {path} is not writable: {exc}") from exc
    return path


# -- subcommands -------------------------------------------------------------------

def cmd_teacher_pretrain(args) -> int:
    config = load_config(args.config, {**_overrides(args), "teacher.mode": "learned"})
    _echo_config(config)
    images = load_dataset(config)
    teacher, curve = teacher_pretrain(images, config.state, config.teacher,
                                      seed=config.seed_for("teacher"))
    out = Path(args.out)
    _ensure_dir(out.parent)
    ckpt_io.save_checkpoint(out, teacher_checkpoint(teacher, config))
    with open(out.with_suffix(".csv"), "w") as fh:
        fh.write("iter,recon\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(curve))
    if curve:
        print(f"final reconstruction MSE {curve[-1]:.6g}")
    return 0


def cmd_train(args) -> int:
    out = _ensure_dir(args.out_dir)
    start, model, optimizer = 0, None, None
    if args.resume:
        ck = ckpt_io.load_checkpoint(args.resume)
        config = RunConfig.from_flat(ck.config).override(_overrides(args))
        model, state, start = from_checkpoint(ck, config)
        optimizer = make_optimizer(model)
        if state is not None:
            optimizer.state = state
    else:
        config = load_config(args.config, _overrides(args))
        if config.teacher.mode == "learned":
            if not config.teacher.checkpoint:
                raise UsageError("teacher.mode=learned needs teacher.checkpoint "
                                 "(run teacher-pretrain first)")
            teacher = teacher_from_checkpoint(
                ckpt_io.load_checkpoint(config.teacher.checkpoint), config)
            model = RacModel.build(config, teacher)
    _echo_config(config)
    (out / "config.txt").write_text(config.dumps(), encoding="utf-8")
    images = load_dataset(config)
    result = train_loop(images, config, out, model=model, optimizer=optimizer, start=start)
    if result.history:
        print(f"final total loss {result.history[-1].total:.6g}")
    print(f"wrote {out / 'ckpt_final.rack'}")
    return 0


def _teacher_latent(model: RacModel, image: np.ndarray) -> Tensor:
    with no_grad():
        return model.teacher.encode(normalize_image(Tensor(image)))


def cmd_decode(args) -> int:
    model = _load_model(args)
    source = None
    if args.image:
        source = load_ppm(args.image)
        z = _teacher_latent(model, source)
    elif args.latent:
        z = Tensor(ckpt_io.load_tensor(args.latent))
    else:
        raise UsageError("decode needs --image or --latent")
    with no_grad():
        x_hat, _ = model.decode(z, args.steps)
    save_ppm(args.out, x_hat.data)
    if source is not None:
        m = compute_metrics(x_hat, source)
        print(f"steps={args.steps} mse={m.mse:.6g} psnr={m.psnr:.3f}")
    return 0


def cmd_encode(args) -> int:
    model = _load_model(args)
    image = load_ppm(args.image)
    with no_grad():
        z, _ = model.encode(Tensor(image), args.steps)
    ckpt_io.save_tensor(args.out, "latent", z.data, steps=args.steps)
    print(f"latent shape {'x'.join(map(str, z.shape))}")
    return 0


def cmd_roundtrip(args) -> int:
    model = _load_model(args)
    value = roundtrip_eval(model, load_dataset(model.config), args.steps)
    print(f"roundtrip_relative_error={value!r}")
    if args.max_error is not None and not value <= args.max_error:
        print(f"FAIL: round-trip error {value:.6g} exceeds {args.max_error:.6g}")
        return 1
    return 0


def cmd_sweep(args) -> int:
    model = _load_model(args)
    steps = [int(s) for s in args.steps.split(",") if s.strip()]
    rows = step_sweep(model, load_dataset(model.config), steps)
    write_sweep_csv(args.out, rows)
    for K, m in rows:
        print(f"K={K} mse={m.mse:.6g} psnr={m.psnr:.3f}")
    return 0


def cmd_pca(args) -> int:
    model = _load_model(args)
    images = load_dataset(model.config)
    image = load_ppm(args.image) if args.image else images[args.index]
    export = pca_trajectories(model, image, args.positions, model.config.seed_for("pca"),
                              steps=args.steps, pool_images=images if args.pool else None)
    write_pca_csv(args.out, export)
    ratio = ", ".join(f"{r:.4f}" for r in export.pca.explained_ratio)
    print(f"explained variance ratios: {ratio}; rows={export.coords.shape[0] * export.coords.shape[1]}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    config = RunConfig()
    _echo_config(config)
    results = check_all_ops(seed) + check_full_loss(seed)
    failed = 0
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name} rel_err={r.rel_err:.3e} tol={r.tol:.0e}")
        failed += not r.ok
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 1 if failed else 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (train.seed)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="rac", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("teacher-pretrain", parents=[common], help="fit the learned teacher")
    p.add_argument("--out", required=True, help="teacher checkpoint path")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_teacher_pretrain)

    p = sub.add_parser("train", parents=[common], help="train the velocity field")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", parents=[common], help="decode a latent or re-decode an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", help="PPM image to teacher-encode and decode")
    p.add_argument("--latent", help="latent container written by encode")
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--out", required=True, help="output PPM")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("encode", parents=[common], help="encode an image by reversed flow")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--out", required=True, help="latent container path")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("roundtrip", parents=[common], help="relative round-trip error")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--max-error", type=float, help="exit 1 if the error exceeds this")
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("sweep", parents=[common], help="decode quality per step count")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--steps", default="1,2,4,8,16", help="comma-separated step counts")
    p.add_argument("--out", required=True, help="CSV path (K,mse,psnr)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pca", parents=[common], help="2D PCA of decoding trajectories")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", help="PPM image (default: a corpus image)")
    p.add_argument("--index", type=int, default=0, help="corpus image index")
    p.add_argument("--positions", type=int, default=16)
    p.add_argument("--steps", type=int)
    p.add_argument("--pool", action="store_true", help="fit PCA over the whole corpus")
    p.add_argument("--out", required=True, help="CSV path (pos_id,step,t,pc1,pc2)")
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ckpt_io.CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ConfigError, FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PpmError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
