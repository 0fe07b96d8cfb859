"""Command-line entry point: ``nlrn <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file-format
error, 3 numerical failure (non-finite values, failed gradient check).
Every run echoes its resolved configuration as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from . import gradcheck as gc
from .checkpoint import CheckpointFormatError
from .classic import GroupDenoiser, NonLocalMeans
from .imaging import ImageFormatError, bicubic_resize, load_png, multi_view_restore, psnr, save_png, ssim
from .model import forward, restore
from .nonlocal_module import NonLocalWeights, correlation_map, dense_nonlocal_forward, nonlocal_forward
from .training import split_config, train, train_config_dict
from .validation import NumericalError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo(config: dict) -> None:
    print(json.dumps(config, sort_keys=True, default=str), file=sys.stderr)


def _quality(out, ref, crop=0) -> dict:
    report = {"psnr": psnr(out, ref, crop)}
    if min(ref.shape) - 2 * crop >= 11:
        c = slice(crop, ref.shape[0] - crop), slice(crop, ref.shape[1] - crop)
        report["ssim"] = ssim(out[c], ref[c])
    return report


def _pngs(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(d.glob("*.png"))


# ----------------------------------------------------------------------------
# subcommands


def cmd_denoise_classic(args) -> int:
    sigma = args.sigma / 255.0
    if args.method == "nlm":
        est = NonLocalMeans(p=args.p or 7, q=args.q or 21, h=args.h, sigma=sigma)
    else:
        est = GroupDenoiser(
            mode=args.method, p=args.p or 5, q=args.q or 15, K=args.k or 32, sigma=sigma, c=args.c
        )
    _echo({"command": "denoise-classic", "in": args.input, "out": args.output, **est.get_params()})
    noisy = load_png(args.input)
    clean = est.fit_transform(noisy)
    save_png(args.output, clean)
    if args.ref:
        ref = load_png(args.ref)
        report = _quality(np.clip(clean, 0, 1), ref)
        report["input_psnr"] = psnr(noisy, ref)
        report["gain_db"] = report["psnr"] - report["input_psnr"]
        print(json.dumps(report))
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {args.config} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.steps is not None:
        doc["steps"] = args.steps
    train_cfg, model_cfg = split_config(doc)
    log_path = args.log or f"{args.output}.log.jsonl"
    _echo({
        "command": "train", "data": args.data, "out": args.output, "log": log_path,
        "resume": args.resume, "train": train_config_dict(train_cfg), "model": model_cfg.to_dict(),
    })
    files = _pngs(args.data)
    if not files:
        raise FileNotFoundError(f"no training images in {args.data}")
    corpus = [load_png(f) for f in files]
    result = train(corpus, train_cfg, model_cfg, out=args.output, log_path=log_path, resume=args.resume)
    if result.log:
        print(json.dumps({"steps": len(result.log), "first_loss": result.log[0]["loss"],
                          "final_loss": result.log[-1]["loss"]}))
    return EXIT_OK


def _prepare(img, args):
    if args.task == "sr":
        return bicubic_resize(img, float(args.factor))
    return img


def _run_model(params, img, multi_view: bool):
    if multi_view:
        return np.clip(multi_view_restore(img, lambda v: restore(v, params, clamp=False)), 0, 1)
    return restore(img, params)


def cmd_restore(args) -> int:
    _echo({"command": "restore", "ckpt": args.ckpt, "in": args.input, "out": args.output,
           "multi_view": args.multi_view, "task": args.task, "factor": args.factor})
    params = ckpt.load_params(args.ckpt)
    img = _prepare(load_png(args.input), args)
    out = _run_model(params, img, args.multi_view)
    save_png(args.output, out)
    if args.ref:
        ref = load_png(args.ref)
        crop = int(args.factor) if args.task == "sr" else 0
        report = _quality(out, ref, crop)
        report["input_psnr"] = psnr(np.clip(img, 0, 1), ref, crop)
        print(json.dumps(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    _echo({"command": "eval", "ckpt": args.ckpt, "in": args.input, "ref": args.ref,
           "multi_view": args.multi_view, "task": args.task, "factor": args.factor})
    params = ckpt.load_params(args.ckpt)
    files = _pngs(args.input)
    if not files:
        raise FileNotFoundError(f"no images in {args.input}")
    crop = int(args.factor) if args.task == "sr" else 0
    rows = []
    for f in files:
        ref_path = Path(args.ref) / f.name
        if not ref_path.exists():
            raise FileNotFoundError(f"no reference for {f.name} in {args.ref}")
        img = _prepare(load_png(f), args)
        ref = load_png(ref_path)
        out = _run_model(params, img, args.multi_view)
        row = {"image": f.name, **_quality(out, ref, crop), "input_psnr": psnr(np.clip(img, 0, 1), ref, crop)}
        rows.append(row)
        print(json.dumps(row))
    summary = {"image": "mean", "psnr": float(np.mean([r["psnr"] for r in rows])),
               "input_psnr": float(np.mean([r["input_psnr"] for r in rows]))}
    if all("ssim" in r for r in rows):
        summary["ssim"] = float(np.mean([r["ssim"] for r in rows]))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _echo({"command": "gradcheck", "module": args.module, "seed": args.seed,
           "step": gc.STEP, "tolerance": gc.TOLERANCE})
    results = gc.run_checks(args.module, seed=args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<32} {r.group:<9} max_rel_err={r.max_error:.3e} {status}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results)} ops checked, {len(failed)} failed")
    if failed:
        print("gradcheck failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _parse_loc(text: str):
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--loc must be Y,X, got {text!r}") from None
    return y, x


def cmd_corrmap(args) -> int:
    y, x = _parse_loc(args.loc)
    _echo({"command": "corrmap", "ckpt": args.ckpt, "in": args.input, "loc": [y, x],
           "out_prefix": args.out_prefix})
    params = ckpt.load_params(args.ckpt)
    img = load_png(args.input)
    h, w = img.shape
    if not (0 <= y < h and 0 <= x < w):
        raise ValueError(f"location ({y}, {x}) outside the {h}x{w} image")
    _, record = forward(img, params, mode="infer")
    files, sums = [], []
    for t, state in enumerate(record.states[1:], start=1):
        cmap = correlation_map(state.corr, y, x, params.config.metric)
        sums.append(float(cmap.sum()))
        lo, hi = cmap.min(), cmap.max()
        shown = (cmap - lo) / (hi - lo) if hi > lo else np.full_like(cmap, 0.5)
        path = f"{args.out_prefix}_state{t}.png"
        save_png(path, shown)
        files.append(path)
    print(json.dumps({"files": files, "sums": sums}))
    return EXIT_OK


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from None


def cmd_bench(args) -> int:
    qs, ms = _int_list(args.q), _int_list(args.m)
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must be HxW, got {args.size!r}") from None
    _echo({"command": "bench", "q": qs, "m": ms, "size": [h, w], "l": args.l,
           "repeats": args.repeats, "metric": args.metric, "seed": args.seed})
    rng = np.random.default_rng(args.seed)
    print("q,m,l,H,W,ms_per_call")
    for m in ms:
        l = args.l or max(1, m // 2)
        for q in qs:
            x = rng.normal(size=(m, h, w)) * 0.5
            weights = NonLocalWeights(
                rng.normal(size=(m, l)) / np.sqrt(m), rng.normal(size=(m, l)) / np.sqrt(m),
                rng.normal(size=(m, m)) / np.sqrt(m), metric=args.metric,
            )
            if q >= max(h, w):
                out, _, _ = nonlocal_forward(x, weights, q)
                ref, _ = dense_nonlocal_forward(x, weights, q)
                err = float(np.abs(out - ref).max())
                if not err <= 1e-10:
                    raise NumericalError(f"q={q}, m={m}: dense oracle mismatch {err:.3e}")
            xs = x[None].astype(np.float32)
            w32 = NonLocalWeights(*(a.astype(np.float32) for a in (weights.w_theta, weights.w_psi, weights.w_g)),
                                  metric=args.metric)
            times = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                nonlocal_forward(xs, w32, q)
                times.append(time.perf_counter() - t0)
            print(f"{q},{m},{l},{h},{w},{1000 * float(np.median(times)):.4f}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nlrn", description="Non-local image restoration toolkit.")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("denoise-classic", help="denoise with a classic non-local method")
    p.add_argument("--method", choices=["nlm", "wnnm", "wiener", "lssc"], required=True)
    p.add_argument("--sigma", type=float, required=True, help="noise std in 8-bit units")
    p.add_argument("--in", dest="input", required=True, help="noisy PNG")
    p.add_argument("--out", dest="output", required=True, help="output PNG")
    p.add_argument("--ref", help="clean PNG; prints PSNR/SSIM when given")
    p.add_argument("--q", type=int, help="search window side (nlm 21, group filters 15)")
    p.add_argument("--p", type=int, help="patch side (nlm 7, group filters 5)")
    p.add_argument("--k", type=int, help="patches per group (32)")
    p.add_argument("--h", type=float, help="nlm filtering parameter (default sigma * p)")
    p.add_argument("--c", type=float, help="shrinkage constant (wnnm 2.8, wiener 2.7, lssc 1.5)")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the method is deterministic")
    p.set_defaults(func=cmd_denoise_classic)

    p = sub.add_parser("train", help="train a network on a folder of PNGs")
    p.add_argument("--config", required=True, help="JSON with training and model fields")
    p.add_argument("--data", required=True, help="folder of clean training PNGs")
    p.add_argument("--out", dest="output", required=True, help="checkpoint path")
    p.add_argument("--log", help="metrics log (default <out>.log.jsonl)")
    p.add_argument("--resume", action="store_true", help="continue from <out> and <out>.state")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--steps", type=int, help="overrides the config step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore one image with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--ref", help="clean PNG; prints PSNR/SSIM when given")
    p.add_argument("--multi-view", action="store_true", help="average the 8 flipped/rotated views")
    p.add_argument("--task", choices=["denoise", "sr"], default="denoise")
    p.add_argument("--factor", type=int, default=2, help="sr: bicubic upscale factor of the input")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; inference is deterministic")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="PSNR/SSIM over a folder, paired with references by file name")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="folder of degraded PNGs")
    p.add_argument("--ref", required=True, help="folder of clean PNGs with the same names")
    p.add_argument("--multi-view", action="store_true")
    p.add_argument("--task", choices=["denoise", "sr"], default="denoise")
    p.add_argument("--factor", type=int, default=2)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; inference is deterministic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all backward passes")
    p.add_argument("--module", choices=["all", *gc.GROUPS], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("corrmap", help="dump the correlation map of one location per recurrent state")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--loc", required=True, help="Y,X pixel location")
    p.add_argument("--out-prefix", required=True, help="writes <prefix>_state<t>.png")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; inference is deterministic")
    p.set_defaults(func=cmd_corrmap)

    p = sub.add_parser("bench", help="time the confined non-local forward pass")
    p.add_argument("--q", required=True, help="comma-separated window sides")
    p.add_argument("--m", required=True, help="comma-separated channel counts")
    p.add_argument("--size", required=True, help="feature map size HxW")
    p.add_argument("--l", type=int, help="embedding width (default m // 2)")
    p.add_argument("--metric", default="embedded_gaussian")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ImageFormatError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
