"""Command-line entry point: ``epl <command> [flags]`` (or ``python3 -m epl``).

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric error.
Diagnostics go to stderr; machine-readable results go to stdout or files.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import evidence as ev
from . import model as M
from . import tensor as T
from . import volume_io
from .errors import ConflictError, EPLError, FormatError, NumericError, ShapeError
from .synth import PhantomSpec, load_dataset, make_dataset, save_dataset
from .trainer import ConfigError, TrainConfig, evaluate_params, run
from .uncertainty import dual_uncertainty, normalize01

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
AXES = {"z": 0, "y": 1, "x": 2}


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_gen_data(args) -> int:
    spec = PhantomSpec()
    if args.spec:
        with open(args.spec) as fh:
            spec = PhantomSpec.from_dict(json.load(fh))
    spec = replace(spec, seed=args.seed)
    ds = make_dataset(spec, args.count, args.labeled_ratio, seed=args.seed, test_count=args.test_count)
    meta = {"count": args.count, "labeled_ratio": args.labeled_ratio, "seed": args.seed, "test_count": args.test_count}
    path = save_dataset(ds, args.out, meta)
    _err(f"{len(ds.labeled)} labeled, {len(ds.unlabeled)} unlabeled, {len(ds.test)} test")
    print(path)
    return EXIT_OK


def load_config(path: str) -> TrainConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except ValueError as exc:
            raise FormatError(f"config is not valid JSON: {exc}") from exc
    return TrainConfig.from_dict(doc, strict=True)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset = load_dataset(args.data)

    def progress(step, report):
        if args.log_every and (step % args.log_every == 0 or step + 1 == cfg.iterations):
            _err(f"step {step}: total={report.total:.5f} seg={report.seg:.5f}")

    res = run(cfg, dataset, out_dir=args.out, progress=progress)
    _err(json.dumps(res.metrics["mean"]))
    print(res.metrics_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    student, teacher, header = M.load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(header["config"], strict=False)
    params = teacher if args.model == "teacher" and teacher else student
    dataset = load_dataset(args.data)
    with T.default_dtype(np.dtype(cfg.dtype)):
        metrics = evaluate_params(params, cfg, getattr(dataset, args.split))
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        print(args.out)
    else:
        print(text)
    return EXIT_OK


def _read_mass(path: str) -> ev.MassField:
    arr = volume_io.read(path)
    if arr.dtype == np.uint8:
        raise FormatError(f"{path}: mass files must hold floats")
    m = ev.MassField.from_array(arr.astype(np.float64))
    m.validate(tol=1e-6)
    return m


def cmd_fuse(args) -> int:
    with T.default_dtype(np.float64):
        masses = [_read_mass(p) for p in args.inputs]
        fused = ev.fuse(masses, args.mode)
    volume_io.write(args.out, fused.to_array())
    print(args.out)
    return EXIT_OK


def cmd_uncertainty(args) -> int:
    with T.default_dtype(np.float64):
        u = dual_uncertainty(_read_mass(args.input)).data
    out = normalize01(u) if args.normalize else u
    volume_io.write(args.out, np.asarray(out, dtype=np.float64))
    print(args.out)
    return EXIT_OK


def render_slice(vol: np.ndarray, axis: str, index: int) -> np.ndarray:
    """8-bit slice scaled by the volume-wide range; a constant volume renders as zeros."""
    vol = np.asarray(vol, dtype=np.float64)
    while vol.ndim > 3 and vol.shape[0] == 1:
        vol = vol[0]
    if vol.ndim != 3:
        raise ShapeError(f"render needs a 3D volume, got shape {vol.shape}")
    ax = AXES[axis]
    if not 0 <= index < vol.shape[ax]:
        raise ShapeError(f"index {index} outside 0..{vol.shape[ax] - 1} on axis {axis}")
    lo, hi = float(vol.min()), float(vol.max())
    sl = np.take(vol, index, axis=ax)
    if hi == lo:
        return np.zeros(sl.shape, dtype=np.uint8)
    return np.rint((sl - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: str, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def cmd_render(args) -> int:
    img = render_slice(volume_io.read(args.input), args.axis, args.index)
    write_pgm(args.out, img)
    print(args.out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    ok = run_selftest(seed=args.seed, out=print)
    print("selftest: " + ("ok" if ok else "FAILED"))
    return EXIT_OK if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="epl", description="Evidential prototype learning toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    p.add_argument("--spec", help="phantom spec JSON (defaults used when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--labeled-ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-count", type=int, default=10)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["test", "labeled", "unlabeled"], default="test")
    p.add_argument("--model", choices=["student", "teacher"], default="student")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="fuse mass-field files")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["dempster", "average"], default="dempster")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("uncertainty", help="dual uncertainty of a mass-field file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("render", help="write one slice of a volume as a PGM image")
    p.add_argument("--input", required=True)
    p.add_argument("--axis", choices=sorted(AXES), default="z")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("selftest", help="run the built-in oracle suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_DATA
    except (NumericError, ConflictError) as exc:
        _err(f"numeric error: {exc}")
        return EXIT_NUMERIC
    except (EPLError, OSError, ValueError, KeyError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
