"""``lle`` command line: synth, train, enhance, gridsearch, ablate, eval.

Settings resolve as defaults < ``--config`` JSON < ``LLE_*`` environment
variables < command-line flags. Every command writes its effective config to
``<out>/config.json``; a failed command leaves an ``INVALID`` marker there.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_dataset, make_pairs, read_manifest, synth_scenes, write_dataset
from .downstream import make_task
from .harness import (
    ALL_ORDERS,
    SUBSETS,
    GridSpec,
    TrainConfig,
    ablate,
    evaluate,
    fmt,
    format_table,
    grid_search,
    psnr,
    train,
)
from .image import TIERS, DegradeConfig, center_crop, fit_attenuation, load_image, random_crop, save_image
from .isp import LLEParams, PipelineSpec, pipeline_apply, set_num_threads, squash
from .predictor import load_checkpoint, predict, save_checkpoint

log = logging.getLogger("lle")

ENV_PREFIX = "LLE_"

DEFAULTS = {
    "seed": 0,
    "order": "EGS",
    "window": 2,
    "repeats": 3,
    "threads": 1,
    "lr": 1e-4,
    "epochs": 10,
    "batch_size": 8,
    "crop_size": 256,
    "task": {"task": "ref_mse", "seed": 0},
}

# key -> type used when reading LLE_<KEY> from the environment
_ENV_TYPES = {"seed": int, "order": str, "window": int, "repeats": int, "threads": int, "lr": float,
              "epochs": int, "batch_size": int, "crop_size": int, "out": str}


class CliError(Exception):
    pass


def effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
    for key, typ in _ENV_TYPES.items():
        val = os.environ.get(ENV_PREFIX + key.upper())
        if val is not None:
            cfg[key] = typ(val)
    for key, val in vars(args).items():
        if key in ("config", "func", "verbose") or val is None:
            continue
        cfg[key] = val
    if "task" in cfg and isinstance(cfg["task"], str):
        cfg["task"] = {"task": cfg["task"], "seed": cfg.get("seed", 0)}
    if not cfg.get("out"):
        raise CliError("--out is required")
    return cfg


def _spec(cfg) -> PipelineSpec:
    return PipelineSpec.parse(cfg["order"], cfg["window"])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n")


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       crop_size=cfg["crop_size"], seed=cfg["seed"], spec=_spec(cfg), task=cfg["task"],
                       train_data=cfg.get("train"), test_data=cfg.get("test"), threads=cfg["threads"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg, out: Path):
    if cfg.get("bright"):
        src = Path(cfg["bright"])
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".ppm")) if src.is_dir() else []
        if not files:
            raise CliError(f"{src}: no decodable images found")
        brights = [load_image(p) for p in files]
        names = [p.stem for p in files]
        metas = None
    elif cfg.get("scenes"):
        scenes = synth_scenes(cfg["scenes"], cfg.get("size") or 128, cfg["seed"])
        brights = [s[0] for s in scenes]
        names = None
        metas = [{"blobs": s[1]} for s in scenes]
    else:
        raise CliError("synth needs --bright DIR or --scenes N")
    tier = cfg.get("tier") or "LL-E"
    if cfg.get("alpha") is not None:
        alpha, tier = float(cfg["alpha"]), None
    else:
        if tier not in TIERS:
            raise CliError(f"unknown tier {tier!r}; choose from {sorted(TIERS)}")
        alpha = fit_attenuation(brights, TIERS[tier])
    degrade = DegradeConfig(alpha, cfg.get("noise") or 0.0, 8, cfg["seed"])
    samples = make_pairs(brights, degrade, names=names, metas=metas)
    write_dataset(out, samples, degrade, tier)
    print(f"wrote {len(samples)} pairs to {out} (tier {tier}, attenuation {fmt(alpha)})")


def cmd_train(cfg, out: Path):
    tcfg = _train_config(cfg)
    if not tcfg.train_data:
        raise CliError("train needs --train DATASET_DIR")
    print("effective training config: " + json.dumps(
        {"lr": tcfg.lr, "epochs": tcfg.epochs, "batch_size": tcfg.batch_size, "crop_size": tcfg.crop_size,
         "seed": tcfg.seed, "order": tcfg.spec.name, "window": tcfg.spec.w}))
    model, history = train(tcfg, progress=lambda r: print(f"epoch {r['epoch']}: train loss {fmt(r['train_loss'])}"))
    save_checkpoint(model, out / "checkpoint.json")
    _write_json(out / "history.json", history)
    if tcfg.test_data:
        rep = evaluate(model, tcfg.test_data, tcfg.task, tcfg.spec, repeats=cfg["repeats"],
                       crop_size=tcfg.crop_size, seed=tcfg.seed)
        (out / "report.json").write_text(rep.to_json())
        (out / "report.txt").write_text(rep.table())
        print(rep.table(), end="")


def _parse_params(text: str) -> LLEParams:
    """``a,gamma,s1,s2`` (sigmas shared) or 8 comma-separated values or a JSON object/file."""
    if text.strip().startswith("{"):
        return LLEParams.from_dict(json.loads(text))
    if Path(text).is_file():
        return LLEParams.from_dict(json.loads(Path(text).read_text()))
    vals = [float(v) for v in text.split(",")]
    if len(vals) == 4:
        return LLEParams(vals[0], vals[1], (vals[2],) * 3, (vals[3],) * 3)
    if len(vals) == 8:
        return LLEParams.from_vector(np.array(vals))
    raise CliError("--params takes 4 (a,gamma,sigma1,sigma2) or 8 comma-separated values")


def _inputs(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".ppm")))
        elif p.exists():
            files.append(p)
        else:
            raise CliError(f"{p}: no such input")
    if not files:
        raise CliError("no input images")
    return files


def cmd_enhance(cfg, out: Path):
    spec = _spec(cfg)
    model = fixed = None
    if cfg.get("params"):
        fixed = _parse_params(cfg["params"])
        if not fixed.in_bounds():
            raise CliError(f"parameters out of bounds: {fixed.to_dict()}")
    elif cfg.get("checkpoint"):
        ckpt = Path(cfg["checkpoint"])
        if not ckpt.is_file():
            raise CliError(f"{ckpt}: checkpoint not found")
        model = load_checkpoint(ckpt)
    else:
        raise CliError("enhance needs --checkpoint or --params")
    for i, path in enumerate(_inputs(cfg["inputs"])):
        img = load_image(path)
        if model is not None:
            crop = random_crop(img, cfg["crop_size"], cfg["seed"] + i) if cfg.get("random_crop") \
                else center_crop(img, cfg["crop_size"])
            params = squash(predict(model, crop)[0])[0]
        else:
            params = fixed
        result = pipeline_apply(img, params, spec)
        save_image(result, out / f"{path.stem}.png")
        side = {"input": str(path), "params": params.to_dict(), "spec": spec.to_json()}
        if cfg.get("reference"):
            side["psnr"] = psnr(result, load_image(Path(cfg["reference"]) / path.name))
        _write_json(out / f"{path.stem}.json", side)
        print(f"{path.name}: a={fmt(params.a)} gamma={fmt(params.gamma)}")


def _grid_from(cfg) -> GridSpec:
    if cfg.get("grid"):
        return GridSpec(**cfg["grid"])
    return GridSpec()


def cmd_gridsearch(cfg, out: Path):
    if not cfg.get("data"):
        raise CliError("gridsearch needs --data DATASET_DIR")
    spec, task, grid = _spec(cfg), make_task(cfg["task"]), _grid_from(cfg)
    set_num_threads(cfg["threads"])
    rows, records = [], []
    for s in load_dataset(cfg["data"]):
        target = task.target(s.bright, s.meta)
        params, loss = grid_search(s.dark, target, task, grid, spec)
        ident = task.loss(pipeline_apply(s.dark, LLEParams.identity(), spec), target)[0]
        records.append({"name": s.name, "params": params.to_dict(), "loss": loss, "identity_loss": ident})
        rows.append([s.name, fmt(params.a), fmt(params.gamma), fmt(params.sigma1[0]), fmt(params.sigma2[0]),
                     fmt(loss), fmt(ident)])
    _write_json(out / "gridsearch.json", {"grid": grid.to_dict(), "spec": spec.to_json(), "images": records})
    table = format_table(["image", "a", "gamma", "sigma1", "sigma2", "loss", "identity_loss"], rows)
    (out / "gridsearch.txt").write_text(table)
    print(table, end="")


def cmd_ablate(cfg, out: Path):
    tcfg = _train_config(cfg)
    if not tcfg.train_data or not cfg.get("test"):
        raise CliError("ablate needs --train DIR and --test [TIER=]DIR")
    tests = {}
    for item in cfg["test"] if isinstance(cfg["test"], list) else [cfg["test"]]:
        if "=" in item:
            name, path = item.split("=", 1)
        else:
            path = item
            name = read_manifest(path).get("tier") or Path(path).name
        tests[name] = path
    which = cfg.get("orders") or "all"
    if which == "all":
        variants = ALL_ORDERS
    elif which == "subsets":
        variants = SUBSETS
    else:
        variants = [PipelineSpec.parse(o, cfg["window"]) for o in which.split(",")]
    variants = [PipelineSpec(v.order, cfg["window"]) for v in variants]
    table = ablate(tcfg.train_data, tests, tcfg, variants, repeats=cfg.get("ablate_repeats") or 1,
                   progress=lambda n, v: print(f"{n}: {' '.join(fmt(x) for x in v)}"))
    _write_json(out / "ablation.json", table.to_dict())
    (out / "ablation.txt").write_text(table.text())
    print(table.text(), end="")


def cmd_eval(cfg, out: Path):
    if not cfg.get("data"):
        raise CliError("eval needs --data DATASET_DIR")
    model = None
    if cfg.get("checkpoint"):
        if not Path(cfg["checkpoint"]).is_file():
            raise CliError(f"{cfg['checkpoint']}: checkpoint not found")
        model = load_checkpoint(cfg["checkpoint"])
    set_num_threads(cfg["threads"])
    rep = evaluate(model, cfg["data"], cfg["task"], _spec(cfg), repeats=cfg["repeats"], crop_size=cfg["crop_size"],
                   seed=cfg["seed"], oracle=_grid_from(cfg) if cfg.get("oracle") else None)
    (out / "report.json").write_text(rep.to_json())
    (out / "report.txt").write_text(rep.table())
    print(rep.table(), end="")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override it)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--order", help='operator order, e.g. "EGS"')
    common.add_argument("--window", type=int, help="bilateral half-width w (window 2w+1)")
    common.add_argument("--repeats", type=int, help="random-crop evaluations to average")
    common.add_argument("--threads", type=int, help="bilateral kernel threads")
    common.add_argument("--task", choices=["ref_mse", "feature_mse", "blob_heatmap"])
    common.add_argument("-v", "--verbose", action="count", default=0)

    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--lr", type=float)
    train_opts.add_argument("--epochs", type=int)
    train_opts.add_argument("--batch-size", dest="batch_size", type=int)
    train_opts.add_argument("--crop-size", dest="crop_size", type=int)

    parser = argparse.ArgumentParser(prog="lle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="build a paired dark/bright dataset")
    p.add_argument("--bright", help="directory of bright PNG/PPM images")
    p.add_argument("--scenes", type=int, help="generate N synthetic bright scenes instead")
    p.add_argument("--size", type=int, help="synthetic scene side length (default 128)")
    p.add_argument("--tier", choices=sorted(TIERS), help="severity tier to fit (default LL-E)")
    p.add_argument("--alpha", type=float, help="fixed attenuation instead of a tier fit")
    p.add_argument("--noise", type=float, help="read-noise sigma in [0,1] units")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, train_opts], help="train the parameter predictor")
    p.add_argument("--train", help="training dataset directory")
    p.add_argument("--test", help="optional test dataset directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", parents=[common, train_opts], help="enhance images")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--checkpoint")
    p.add_argument("--params", help="a,gamma,sigma1,sigma2 | 8 values | JSON")
    p.add_argument("--random-crop", dest="random_crop", action="store_true", default=None,
                   help="predict from a seeded random crop instead of the center crop")
    p.add_argument("--reference", help="directory of references (same names) for PSNR")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("gridsearch", parents=[common], help="per-image exhaustive parameter search")
    p.add_argument("--data", help="dataset directory")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("ablate", parents=[common, train_opts], help="operator order / subset ablation")
    p.add_argument("--train", help="training dataset directory")
    p.add_argument("--test", action="append", help="[TIER=]DIR test set (repeatable)")
    p.add_argument("--orders", help='"all" (6 orders), "subsets", or comma list like "EGS,GES"')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", parents=[common, train_opts], help="evaluate a checkpoint")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="omit to report only the identity baseline")
    p.add_argument("--oracle", action="store_true", default=None, help="include the grid-search oracle")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        cfg = effective_config(args)
        cfg["command"] = args.command
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "INVALID").unlink(missing_ok=True)
        _write_json(out / "config.json", cfg)
        set_num_threads(cfg["threads"])
        args.func(cfg, out)
    except Exception as exc:  # report every failure on stderr with a nonzero exit
        if args.verbose:
            log.exception("command failed")
        print(f"lle {args.command}: error: {exc}", file=sys.stderr)
        if out is not None and out.is_dir():
            (out / "INVALID").write_text(f"{type(exc).__name__}: {exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
