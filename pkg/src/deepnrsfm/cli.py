"""Command-line interface: ``deepnrsfm {synth,train,infer,eval,plot}``.

Every subcommand accepts ``--config file.json`` whose keys are the option
names below (underscored); explicit flags override the file. Exit codes:
0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as data_mod
from . import predictions
from .checkpoint import load_params, save_params
from .errors import (AllOccluded, ConfigError, MissingBBox, NonFiniteError, NonFiniteLoss,
                     NonPositiveDepth, NonPositiveTz, RegimeMismatch, SchemaError, ShapeError,
                     ZeroCode, ZeroCodeWarning)
from .geometry import Camera, as_camera
from .metrics import evaluate
from .model import lift_batch
from .training import TrainConfig, TrainState, scale_correct, train, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("deepnrsfm")


class UsageError(Exception):
    pass


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    try:
        return [int(x) for x in str(text).replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _floats(text):
    try:
        return [float(x) for x in str(text).split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _merge(args, keys, defaults=None):
    """Options from ``--config`` overlaid by explicit flags (flags are ``None`` when absent)."""
    merged = dict(defaults or {})
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(cfg) - set(keys)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(cfg)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


# -- synth -------------------------------------------------------------------

SYNTH_FLAGS = {
    "P": ("--points", int), "N": ("--samples", int), "dict_sizes": ("--dict-sizes", _ints),
    "code_sparsity": ("--code-sparsity", int), "column_sparsity": ("--column-sparsity", int),
    "camera": ("--regime", str), "radius": ("--radius", float),
    "depth_ratio": ("--depth-ratio", _floats), "translation_xy": ("--translation-xy", float),
    "occlusion_rate": ("--occlusion-rate", float), "min_visible": ("--min-visible", int),
    "noise_std": ("--noise-std", float), "tz_jitter": ("--tz-jitter", float),
    "seed": ("--seed", int),
}


def cmd_synth(args) -> int:
    opts = _merge(args, list(SYNTH_FLAGS) + ["unit_code_norm"])
    if args.unit_code_norm:
        opts["unit_code_norm"] = True
    cfg = data_mod.SynthConfig.from_dict(opts)
    dataset, truth = data_mod.generate(cfg)
    out = Path(args.out)
    data_mod.save(dataset, out)
    with open(_sidecar(out, ".truth.json"), "w", encoding="utf-8") as fh:
        json.dump(data_mod.truth_to_json(truth), fh)
    save_params(_sidecar(out, ".truth.ckpt"), truth.params(cfg.camera),
                {"source": "generator", "generator": cfg.to_dict()})
    vis = np.array([r.vis for r in dataset.records])
    print(f"wrote {len(dataset)} samples (P={cfg.P}, camera={as_camera(cfg.camera).value}, "
          f"dict sizes {list(cfg.dict_sizes)}, visible {vis.mean():.1%}) to {out}")
    print(f"ground truth: {_sidecar(out, '.truth.json')}, {_sidecar(out, '.truth.ckpt')}")
    return EXIT_OK


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# -- train -------------------------------------------------------------------

TRAIN_FLAGS = {
    "camera": ("--regime", str), "dict_sizes": ("--dict-sizes", _ints),
    "iterations": ("--iters", int), "lr": ("--lr", float), "batch_size": ("--batch", int),
    "seed": ("--seed", int), "scale_correct": ("--scale-correct", int),
    "scale_correct_iters": ("--scale-correct-iters", int), "lam_init": ("--lam-init", float),
    "checkpoint_every": ("--checkpoint-every", int), "log_every": ("--log-every", int),
    "lr_decay": ("--lr-decay", float), "decay_every": ("--decay-every", int),
}
TRAIN_SWITCHES = {"relu_encoder": "--relu-encoder", "cold_start": "--cold-start"}


def _observations(dataset, camera, tz_rule=None, tz_value=None):
    camera = as_camera(camera)
    if camera is Camera.PERSPECTIVE and any(r.t_z is None for r in dataset.records):
        rule = tz_rule or "inv_max_bbox"
        for r in dataset.records:
            if r.t_z is None:
                data_mod.init_tz(r, rule, tz_value)
    return dataset.observations(camera)


def cmd_train(args) -> int:
    keys = list(TRAIN_FLAGS) + list(TRAIN_SWITCHES)
    opts = _merge(args, keys)
    for k in TRAIN_SWITCHES:
        if getattr(args, k):
            opts[k] = True
    dataset = data_mod.load(args.data)
    resume_cfg = None
    state = None
    if args.resume:
        state, resume_cfg = TrainState.load(args.resume)
    base = resume_cfg.to_dict() if resume_cfg is not None else {}
    base.update(opts)
    if "camera" not in base and "camera" in dataset.header_extra:
        base["camera"] = dataset.header_extra["camera"]
    config = TrainConfig.from_dict(base)
    if state is not None and state.params.config.camera is not as_camera(config.camera):
        raise RegimeMismatch("checkpoint regime differs from --regime")
    obs = _observations(dataset, config.camera, args.tz_rule, args.tz_value)
    ckpt = Path(args.ckpt_out)
    start = time.perf_counter()

    def progress(s):
        log.info("iter %d  loss %.6g", s.iteration, s.history[-1][1])

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroCodeWarning)
        state = train(obs, config, state, ckpt, progress=progress)
        if config.scale_correct:
            if as_camera(config.camera) is not Camera.PERSPECTIVE:
                raise UsageError("--scale-correct needs --regime persp")
            obs, state = scale_correct(obs, state, config, skeleton=dataset.skeleton,
                                       checkpoint_path=ckpt)
            for rec, tz in zip(dataset.records, obs.t_z):
                rec.t_z = float(tz)
            out = Path(args.data_out) if args.data_out else _sidecar(ckpt, ".corrected.jsonl")
            data_mod.save(dataset, out)
            print(f"scale-corrected dataset: {out}")
    loss_csv = Path(args.loss_csv) if args.loss_csv else _sidecar(ckpt, ".loss.csv")
    write_loss_csv(state, loss_csv)
    final = state.history[-1][1] if state.history else float("nan")
    print(f"trained {state.iteration} iterations in {time.perf_counter() - start:.1f}s; "
          f"final loss {final:.6g}; checkpoint {ckpt}; loss curve {loss_csv}")
    return EXIT_OK


# -- infer -------------------------------------------------------------------

def cmd_infer(args) -> int:
    params, manifest, _ = load_params(args.ckpt)
    dataset = data_mod.load(args.data)
    camera = params.config.camera
    declared = dataset.header_extra.get("camera")
    if args.regime and as_camera(args.regime) is not camera:
        raise RegimeMismatch(f"checkpoint was trained for the {camera.value} camera, "
                             f"--regime asks for {as_camera(args.regime).value}")
    if declared and as_camera(declared) is not camera and args.strict_regime:
        raise RegimeMismatch(f"dataset declares the {as_camera(declared).value} camera but the "
                             f"checkpoint is {camera.value}")
    if dataset.P != params.config.P:
        raise ShapeError(f"dataset has P={dataset.P}, checkpoint expects P={params.config.P}")
    obs = _observations(dataset, camera, args.tz_rule, args.tz_value)
    poses, losses = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroCodeWarning)
        warnings.simplefilter("ignore", RuntimeWarning)
        for start in range(0, len(obs), 512):
            idx = np.arange(start, min(start + 512, len(obs)))
            for out in lift_batch(obs[idx], params, strict=False):
                poses.append(None if out is None else out.pose)
                losses.append(np.nan if out is None else out.loss)
    predictions.save(args.out, camera, params.config.P, poses, losses)
    failed = sum(p is None for p in poses)
    print(f"wrote {len(poses)} predictions to {args.out}" + (f" ({failed} failed)" if failed else ""))
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def _load_skeleton(arg, dataset):
    if arg is None:
        return dataset.skeleton
    text = Path(arg).read_text(encoding="utf-8") if os.path.exists(arg) else arg
    try:
        edges = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--skeleton must be a JSON edge list or a file holding one: {exc}") from exc
    return [tuple(map(int, e)) for e in edges]


def cmd_eval(args) -> int:
    _, poses, _ = predictions.load(args.pred)
    dataset = data_mod.load(args.gt)
    if len(poses) != len(dataset):
        raise SchemaError(f"{len(poses)} predictions for {len(dataset)} samples")
    if any(r.gt3d is None for r in dataset.records):
        raise SchemaError("ground-truth dataset lacks gt3d on some records")
    gts = dataset.ground_truth()
    preds = [None if p is None else p.camera_shape() for p in poses]
    report = evaluate(preds, gts, _load_skeleton(args.skeleton, dataset))
    if args.out:
        report.write_json(args.out)
    if args.csv:
        report.write_csv(args.csv)
    width = max(len(k) for k in report.summary())
    for k, v in report.summary().items():
        print(f"{k:<{width}}  {v:.6g}" if isinstance(v, float) else f"{k:<{width}}  {v}")
    return EXIT_OK


# -- plot --------------------------------------------------------------------

def cmd_plot(args) -> int:
    from . import plotting

    header, poses, reproj = predictions.load(args.pred)
    if not 0 <= args.sample < len(poses):
        raise UsageError(f"--sample must lie in [0, {len(poses) - 1}]")
    pose = poses[args.sample]
    if pose is None:
        raise ZeroCode(f"sample {args.sample} has no prediction")
    kwargs = {"pred3d": pose.camera_shape(), "pred2d": reproj[args.sample],
              "title": f"sample {args.sample} ({header.get('camera')})"}
    if args.gt:
        dataset = data_mod.load(args.gt)
        rec = dataset.records[args.sample]
        obs = dataset.observations(Camera.ORTHOGONAL, [args.sample])
        kwargs.update(points2d=obs.W[0], vis=rec.vis)
        if rec.gt3d is not None:
            kwargs["gt3d"] = rec.gt3d
    plotting.save_svg(args.out, **kwargs)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepnrsfm",
                                description="Unsupervised 2D-to-3D lifting with block-sparse codes.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS threads (default: $NRSFM_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    for key, (flag, typ) in SYNTH_FLAGS.items():
        s.add_argument(flag, dest=key, type=typ, default=None)
    s.add_argument("--unit-code-norm", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--ckpt-out", required=True)
    t.add_argument("--resume")
    t.add_argument("--loss-csv")
    t.add_argument("--data-out", help="where to write scale-corrected t_z")
    t.add_argument("--tz-rule", choices=["inv_max_bbox", "inv_min_bbox", "fixed"])
    t.add_argument("--tz-value", type=float)
    for key, (flag, typ) in TRAIN_FLAGS.items():
        t.add_argument(flag, dest=key, type=typ, default=None)
    for key, flag in TRAIN_SWITCHES.items():
        t.add_argument(flag, dest=key, action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="lift every sample of a dataset")
    i.add_argument("--config")
    i.add_argument("--data", required=True)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--regime", help="expected regime; errors if the checkpoint differs")
    i.add_argument("--strict-regime", action="store_true", default=True,
                   help="refuse datasets whose header declares another regime")
    i.add_argument("--no-strict-regime", dest="strict_regime", action="store_false")
    i.add_argument("--tz-rule", choices=["inv_max_bbox", "inv_min_bbox", "fixed"])
    i.add_argument("--tz-value", type=float)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--skeleton")
    e.add_argument("--out")
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("plot", help="write an SVG figure for one sample")
    g.add_argument("--pred", required=True)
    g.add_argument("--gt")
    g.add_argument("--sample", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_plot)
    return p


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("NRSFM_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"NRSFM_THREADS must be an integer, got {env!r}") from exc
    return None


DATA_ERRORS = (SchemaError, MissingBBox, AllOccluded, RegimeMismatch, ShapeError,
               NonPositiveTz, NonPositiveDepth, FileNotFoundError, IsADirectoryError)
NUMERIC_ERRORS = (NonFiniteLoss, NonFiniteError, ZeroCode, FloatingPointError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        threads = _threads(args.threads)
        if threads is not None and threads < 1:
            raise UsageError("--threads must be positive")
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
