"""Command-line entry point: ``eyeopen <command> ...``.

Exit codes: 0 ok, 2 configuration/data error, 3 I/O error, 4 numeric failure.
Every command that writes files also writes ``<output>.run.json`` describing
how to reproduce it.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as M
from . import net as N
from . import scene as S
from .dataset import load_dataset, read_image, write_manifest, write_pgm
from .errors import ConfigError, DataError, EyeOpenError
from .trainer import (TrainConfig, finetune, format_config, gradcheck_suite, make_config,
                      parse_config_text, train)

log = logging.getLogger("eyeopen")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _read_config_file(path):
    if not path:
        return {}
    try:
        return parse_config_text(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e


def _train_config(args, **forced) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(TrainConfig)}
    overrides.update(forced)
    return make_config(_read_config_file(args.config), **overrides)


def _run_path(output):
    return Path(str(output) + ".run.json")


def _write_run_manifest(dest, command, args, config, inputs, outputs, seeds, started):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": [str(o) for o in outputs],
        "seeds": seeds,
        "version": __version__,
        "wall_seconds": round(time.time() - started, 3),
    }
    Path(dest).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _load_ckpt(path):
    return N.load_checkpoint(path)


def _pair_list(items, what):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"{what} entries must look like name=path, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

GRID_KEYS = {"stratified": bool, "real_jitter": float, "camera_max": float}


def cmd_gen(args):
    started = time.time()
    if args.count is None or args.count < 1:
        raise ConfigError("--count must be >= 1")
    grid_values = {}
    for k, v in _read_config_file(args.config).items():
        if k not in GRID_KEYS:
            raise ConfigError(f"unknown generator config key {k!r}")
        grid_values[k] = v.lower() in ("1", "true", "yes", "on") if GRID_KEYS[k] is bool else GRID_KEYS[k](v)
    if args.unstratified:
        grid_values["stratified"] = False
    grid = S.GridSpec(**grid_values)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {out}: {e}") from e
    if args.domain == "blink":
        style = S.STYLES[args.style]
        seq = S.render_blink_sequence(args.subject, args.pattern, args.count, style, seed=args.seed)
        (out / "images").mkdir(exist_ok=True)
        rels = []
        for i, r in enumerate(seq):
            rel = f"images/{i:06d}.pgm"
            write_pgm(out / rel, r.image)
            rels.append(rel)
        write_manifest(out / "manifest.jsonl", S.blink_records(seq, rels))
    else:
        S.sample_dataset(args.domain, args.count, out, args.seed, grid, workers=args.workers)
    config = {"domain": args.domain, "count": args.count, "seed": args.seed,
              "grid": {"stratified": grid.stratified, "real_jitter": grid.real_jitter,
                       "camera_max": grid.camera_max}}
    if args.domain == "blink":
        config.update(subject=args.subject, pattern=args.pattern, style=args.style)
    _write_run_manifest(out / "run.json", "gen", args, config, {}, [out / "manifest.jsonl"],
                        {"dataset_seed": args.seed}, started)
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def cmd_train(args):
    started = time.time()
    cfg = _train_config(args)
    if cfg.mode == "finetune":
        raise ConfigError("use the finetune command for fine-tuning")
    if cfg.mode in ("joint", "real_only") and not args.real:
        raise ConfigError(f"--real is required for mode {cfg.mode}")
    if cfg.mode in ("joint", "syn_only") and not args.syn:
        raise ConfigError(f"--syn is required for mode {cfg.mode}")
    syn = load_dataset(args.syn) if args.syn and cfg.mode != "real_only" else None
    real = load_dataset(args.real) if args.real and cfg.mode != "syn_only" else None
    params = N.init_params(N.PRESETS[cfg.net](), cfg.seed)
    out = Path(args.out)
    log_path = Path(str(out) + ".log.jsonl")
    params, history = train(params, syn, real, cfg, log_path,
                            progress=lambda e: print(f"epoch {e.epoch}: total={e.total:.4f} "
                                                     f"l1={e.loss1:.3f} l2={e.loss2:.3f} l3={e.loss3:.4f}",
                                                     flush=True))
    N.save_checkpoint(params, out)
    outputs = [out, Path(str(out) + ".net.json"), log_path]
    if history:
        from .plotting import plot_training_log

        fig = Path(str(out) + ".loss.svg")
        plot_training_log(history, fig)
        outputs.append(fig)
    _write_run_manifest(_run_path(out), "train", args, cfg.to_dict(), {"syn": args.syn, "real": args.real},
                        outputs, {"seed": cfg.seed}, started)
    print(f"saved checkpoint to {out}")
    return EXIT_OK


def cmd_finetune(args):
    started = time.time()
    cfg = _train_config(args, mode="finetune")
    params = _load_ckpt(args.ckpt)
    data = load_dataset(args.data)
    syn = load_dataset(args.syn) if args.syn else None
    out = Path(args.out)
    log_path = Path(str(out) + ".log.jsonl")
    new, history, test = finetune(params, data, cfg, syn, log_path)
    N.save_checkpoint(new, out)
    report = M.evaluate(new, test, cfg.ot)
    before = M.evaluate(params, test, cfg.ot)
    summary = {"test_samples": len(test), "before": before.to_dict(), "after": report.to_dict()}
    Path(str(out) + ".eval.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _write_run_manifest(_run_path(out), "finetune", args, cfg.to_dict(), {"ckpt": args.ckpt, "data": args.data,
                        "syn": args.syn}, [out, log_path, Path(str(out) + ".eval.json")],
                        {"seed": cfg.seed}, started)
    print(f"held-out degree MSE: {before.degree_mse:.3f} -> {report.degree_mse:.3f}")
    return EXIT_OK


def cmd_eval(args):
    started = time.time()
    params = _load_ckpt(args.ckpt)
    ds = load_dataset(args.data)
    rep = M.evaluate(params, ds, args.ot, args.tol)
    Path(args.out).write_text(rep.to_json())
    _write_run_manifest(_run_path(args.out), "eval", args, {"ot": args.ot, "tol": args.tol},
                        {"ckpt": args.ckpt, "data": args.data}, [args.out], {}, started)
    print(rep.to_json(), end="")
    return EXIT_OK


def cmd_matrix(args):
    started = time.time()
    ckpt_paths = _pair_list(args.ckpts, "--ckpts")
    data_paths = _pair_list(args.data, "--data")
    modes = [m for m in ("syn", "joint", "real") if m in ckpt_paths] if not args.modes else args.modes
    ckpts = {m: _load_ckpt(p) for m, p in ckpt_paths.items()}
    tests = {k: load_dataset(v) for k, v in data_paths.items()}
    try:
        rows = M.cross_domain_matrix(ckpts, tests, modes, args.ot)
    except EyeOpenError:
        raise
    prefix = Path(args.out)
    Path(str(prefix) + ".json").write_text(M.matrix_json(rows))
    text = M.matrix_text(rows)
    Path(str(prefix) + ".txt").write_text(text)
    _write_run_manifest(_run_path(prefix), "matrix", args, {"ot": args.ot, "modes": list(modes)},
                        {**{f"ckpt:{k}": v for k, v in ckpt_paths.items()},
                         **{f"data:{k}": v for k, v in data_paths.items()}},
                        [str(prefix) + ".json", str(prefix) + ".txt"], {}, started)
    print(text, end="")
    return EXIT_OK


def cmd_infer(args):
    started = time.time()
    params = _load_ckpt(args.ckpt)
    img = read_image(args.image)
    if args.landmarks:
        from .preprocess import load_landmarks, preprocess_face

        crop = preprocess_face(img, load_landmarks(args.landmarks))
    else:
        if img.ndim == 3:
            from .preprocess import to_grayscale

            img = to_grayscale(img)
        if img.shape != (S.HEIGHT, S.WIDTH):
            raise DataError(f"image is {img.shape}, expected a {S.HEIGHT}x{S.WIDTH} crop (or pass --landmarks)")
        crop = img.astype(np.float32)
    degree, raw = N.infer_degree(params, crop.astype(np.float32))
    result = {"degree": degree, "raw": raw, "state": N.classify_open(raw, args.ot),
              "band": M.state_band(degree)}
    text = json.dumps(result, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        _write_run_manifest(_run_path(args.out), "infer", args, {"ot": args.ot},
                            {"ckpt": args.ckpt, "image": args.image, "landmarks": args.landmarks},
                            [args.out], {}, started)
    print(text)
    return EXIT_OK


def cmd_curve(args):
    started = time.time()
    params = _load_ckpt(args.ckpt)
    ds = load_dataset(args.seq)
    if any("frame_index" in r for r in ds.records):
        order = np.argsort([r.get("frame_index", i) for i, r in enumerate(ds.records)], kind="stable")
        ds = ds.subset(order)
    gt = ds.degrees()
    if gt is None:
        raise DataError("curve analysis needs a sequence with ground-truth degrees")
    pred = np.maximum(N.predict(params, ds.images), 0.0)
    rep = M.u_curve(pred, gt, args.window)
    prefix = Path(args.out)
    csv_path, svg_path, json_path = (Path(str(prefix) + ext) for ext in (".csv", ".svg", ".json"))
    M.write_curve_csv(rep, csv_path)
    from .plotting import plot_curve

    plot_curve(rep, svg_path)
    summary = {k: v for k, v in rep.to_dict().items() if k != "frames"}
    summary["frames"] = len(rep.frames)
    summary["gt_minima_states"] = [N.classify_open(float(pred[i]), args.ot) for i in rep.gt_minima]
    json_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _write_run_manifest(_run_path(prefix), "curve", args, {"window": args.window, "ot": args.ot},
                        {"ckpt": args.ckpt, "seq": args.seq}, [csv_path, svg_path, json_path], {}, started)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args):
    started = time.time()
    rep = gradcheck_suite(args.seed, args.points)
    for e in rep.entries:
        print(f"{'PASS' if e.passed else 'FAIL'}  {e.component:<10} max rel err {e.max_rel_error:.3e}")
    if args.out:
        Path(args.out).write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
        _write_run_manifest(_run_path(args.out), "gradcheck", args, {"points": args.points}, {}, [args.out],
                            {"seed": args.seed}, started)
    return EXIT_OK if rep.passed else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--config", help="flat key=value config file; flags override it")
    for f in fields(TrainConfig):
        if f.name == "mode":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, default=None, type=lambda s: s,
                           help=f"true/false (default: {f.default})")
        else:
            typ = {"int": int, "float": float}.get(f.type, str)
            p.add_argument(flag, dest=f.name, type=typ, default=None, help=f"(default: {f.default})")


def build_parser():
    parser = _Parser(prog="eyeopen", description="Weakly-supervised eye-openness estimation toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="render a synthetic, pseudo-real or blink dataset")
    p.add_argument("--domain", choices=("syn", "real", "realprime", "blink"), required=True)
    p.add_argument("--count", type=int, help="samples (frames for blink)")
    p.add_argument("--seed", type=int, default=0, help="(default: 0)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value file with stratified / real_jitter / camera_max")
    p.add_argument("--unstratified", action="store_true", help="draw openness states at random")
    p.add_argument("--workers", type=int, default=1, help="(default: 1)")
    p.add_argument("--subject", type=int, default=S.REAL_SUBJECTS[0], help="blink subject id")
    p.add_argument("--pattern", choices=tuple(S.PATTERNS), default="close-open-close-open")
    p.add_argument("--style", choices=tuple(S.STYLES), default="real", help="blink rendering style")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train from scratch")
    p.add_argument("--mode", choices=("joint", "syn", "real"), default=None,
                   help="training source (default: joint)")
    p.add_argument("--syn", help="synthetic dataset directory")
    p.add_argument("--real", help="binary-labelled real dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune on degree-labelled real data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="degree-labelled real dataset")
    p.add_argument("--syn", help="optional synthetic pool mixed in per finetune_syn_fraction")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--ot", type=float, default=15.0, help="(default: 15.0)")
    p.add_argument("--tol", type=float, default=8.0, help="(default: 8.0)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="training-source x test-domain table")
    p.add_argument("--ckpts", nargs="+", required=True, help="mode=path, modes syn/joint/real")
    p.add_argument("--data", nargs="+", required=True, help="domain=dir, domains syn/real")
    p.add_argument("--modes", nargs="+", choices=("syn", "joint", "real"))
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--ot", type=float, default=15.0, help="(default: 15.0)")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("infer", help="degree of openness for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="PGM/PPM crop, or face image with --landmarks")
    p.add_argument("--landmarks", help='JSON {"left":[x,y],"right":[x,y]}')
    p.add_argument("--ot", type=float, default=15.0, help="(default: 15.0)")
    p.add_argument("--out", help="optional result JSON path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("curve", help="blink-sequence curve analysis (CSV + SVG)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--window", type=int, default=5, help="(default: 5)")
    p.add_argument("--ot", type=float, default=15.0, help="(default: 15.0)")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("gradcheck", help="finite-difference check of every kernel and loss")
    p.add_argument("--seed", type=int, default=0, help="(default: 0)")
    p.add_argument("--points", type=int, default=10, help="(default: 10)")
    p.add_argument("--out", help="optional report JSON path")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EyeOpenError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
