"""Command-line entry point: data generation, pretraining, fine-tuning, coding, evaluation, curves.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import subprocess
import sys
from pathlib import Path
from typing import Sequence

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _version() -> str:
    from . import __version__

    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(where: Path, args: argparse.Namespace, outputs: Sequence[Path] = ()) -> Path:
    """Echo the command, every flag and output digests to ``run.manifest`` (key = value)."""
    where.mkdir(parents=True, exist_ok=True)
    lines = [f"command = {args.command}", f"version = {_version()}"]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "func", "verbose"):
            continue
        if isinstance(value, list):
            value = " ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    for p in outputs:
        lines.append(f"sha256.{p.name} = {_sha256(p)}")
    path = where / "run.manifest"
    path.write_text("\n".join(lines) + "\n")
    return path


def _beside(out: str) -> Path:
    p = Path(out)
    return p if p.is_dir() else p.parent


def _load_scenes(data: str, limit: int | None):
    from . import task as K

    scenes = K.load_dataset(data)
    return scenes[:limit] if limit else scenes


def _codec_q(meta: dict[str, str], default: int = 1) -> int:
    return int(meta.get("q", default))


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from . import task as K

    out = Path(args.out)
    K.save_dataset(K.generate_dataset(args.n, args.seed), out)
    write_manifest(out, args, [out / K.ANNOTATION_FILE])
    return 0


def cmd_pretrain_codec(args) -> int:
    from . import codec as C
    from . import regimes as R
    from .params import save_checkpoint

    if args.q not in C.LAMBDA_TABLE:
        raise UsageError(f"--q must be one of {sorted(C.LAMBDA_TABLE)}")
    scenes = _load_scenes(args.data, args.limit)
    cfg = R.PretrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    params, report = R.pretrain_codec(args.q, scenes, cfg)
    out = Path(args.out)
    save_checkpoint(out, params, meta={"q": str(args.q), "diverged": str(report.diverged)})
    write_manifest(_beside(args.out), args, [out])
    print(f"codec q={args.q}: {len(report.epochs)} epochs, final {report.epochs[-1] if report.epochs else '-'}")
    return 2 if report.diverged else 0


def cmd_pretrain_task(args) -> int:
    from . import regimes as R
    from .params import save_checkpoint

    scenes = _load_scenes(args.data, args.limit)
    cfg = R.PretrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    params, report = R.pretrain_task(scenes, cfg)
    out = Path(args.out)
    save_checkpoint(out, params)
    write_manifest(_beside(args.out), args, [out])
    print(f"task: {len(report.epochs)} epochs, final {report.epochs[-1] if report.epochs else '-'}")
    return 0


def cmd_finetune(args) -> int:
    from . import regimes as R
    from . import task as K
    from .params import load_checkpoint

    config = R.RegimeConfig.load(args.config)
    if not config.out_dir:
        raise R.ConfigError("out_dir is required")
    if not config.dataset_dir or not (Path(config.dataset_dir) / K.ANNOTATION_FILE).exists():
        raise R.ConfigError(f"dataset_dir {config.dataset_dir!r} has no {K.ANNOTATION_FILE}")
    codec, task = R.load_inputs(config)
    q_meta = load_checkpoint(config.init_codec)[2].get("q")
    if q_meta is not None and int(q_meta) != config.q:
        raise R.ConfigError(f"q = {config.q} but {config.init_codec} was pretrained at q = {q_meta}")
    scenes = K.load_dataset(config.dataset_dir)
    report, _, _ = R.run_regime(config, scenes, codec, task)
    out = Path(config.out_dir)
    (out / "config.cfg").write_text(config.to_text())
    write_manifest(out, args, [out / "codec.mckpt", out / "task.mckpt", out / "config.cfg"])
    for i, e in enumerate(report.epochs, 1):
        print(f"epoch {i}: L_T {e.task_loss:.4f}  L_R {e.bpp:.4f} bpp  total {e.total:.4f}")
    return 0


def cmd_encode(args) -> int:
    from . import coder as B
    from . import ppm
    from .params import load_checkpoint

    params, _, meta = load_checkpoint(args.codec)
    image = ppm.to_nchw(ppm.load_ppm(args.image))
    q = args.q if args.q is not None else _codec_q(meta)
    bs = B.serialize(image, params, q)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(bs.to_bytes())
    write_manifest(_beside(args.out), args, [out])
    print(f"{len(bs)} bytes, {8 * len(bs) / (bs.width * bs.height):.4f} bpp")
    return 0


def cmd_decode(args) -> int:
    from . import coder as B
    from . import ppm
    from .params import load_checkpoint

    params, _, _ = load_checkpoint(args.codec)
    rec = B.deserialize(Path(args.stream).read_bytes(), params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ppm.save_ppm(out, ppm.to_hwc(rec[0]))
    write_manifest(_beside(args.out), args, [out])
    return 0


def cmd_eval(args) -> int:
    from . import metrics as M
    from .params import load_checkpoint

    codec, _, meta = load_checkpoint(args.codec)
    task, _, _ = load_checkpoint(args.task)
    scenes = _load_scenes(args.data, args.limit)
    q = args.q if args.q is not None else _codec_q(meta)
    point = M.evaluate_point(scenes, codec, task, args.regime, q, args.beta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    M.write_curve_csv(out, [point])
    write_manifest(_beside(args.out), args, [out])
    print(f"{point.regime} q={point.q} beta={point.beta}: {point.bpp:.4f} bpp, mAP@0.5 {point.map50:.4f}, "
          f"mAP@.5:.95 {point.map5095:.4f}, PSNR {point.psnr_db:.2f} dB, MS-SSIM {point.msssim:.4f}")
    return 0


def cmd_curves(args) -> int:
    from . import metrics as M

    points = []
    for path in args.inputs:
        points.extend(M.read_curve_csv(path))
    paths = M.build_curves(points, args.out)
    write_manifest(Path(args.out), args, sorted(paths.values()))
    for p in sorted(paths.values()):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="machina", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate a synthetic-shapes dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain-codec", help="rate-distortion pretraining at one quality")
    s.add_argument("--data", required=True)
    s.add_argument("--q", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--limit", type=int, default=None, help="use only the first N scenes")
    s.set_defaults(func=cmd_pretrain_codec)

    s = sub.add_parser("pretrain-task", help="train the detector on uncompressed scenes")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--limit", type=int, default=None)
    s.set_defaults(func=cmd_pretrain_task)

    s = sub.add_parser("finetune", help="run one fine-tuning regime from a config file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("encode", help="compress a PPM image to a bitstream")
    s.add_argument("--image", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--q", type=int, default=None)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="reconstruct a PPM image from a bitstream")
    s.add_argument("--stream", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", help="rate, fidelity and detection accuracy of a codec/detector pair")
    s.add_argument("--data", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--out", required=True, help="CSV file with one curve point")
    s.add_argument("--regime", default="BASELINE")
    s.add_argument("--q", type=int, default=None)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--limit", type=int, default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("curves", help="merge evaluated points into per-regime curves and a delta summary")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_curves)
    return p


def _cap_threads() -> None:
    n = os.environ.get("MACHINA_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, n)


def main(argv: Sequence[str] | None = None) -> int:
    _cap_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    from .regimes import ConfigError

    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"machina {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure after validation is a runtime error
        print(f"machina {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
