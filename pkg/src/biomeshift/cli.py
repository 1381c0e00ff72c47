"""``biomeshift`` command line.

Every subcommand resolves its configuration (defaults, then ``--config``, then
``--set`` and dedicated flags), runs single-threaded, and writes a
``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import TransferGrid, calibration_report, run_transfer_grid
from .checkpoint import load_partial_checkpoint, read_checkpoint, write_checkpoint
from .config import RunConfig, parse_config
from .data import biome_family, generate_biome, load_biome_dir, make_splits, to_images, write_dataset
from .errors import (BiomeShiftError, ConfigError, DataError, FormatError, ParameterError, ShapeError)
from .mae import PretrainConfig, channel_stats, pretrain, safe_std
from .report import emit_heatmap, read_matrix_csv, render_heatmap_svg, write_manifest, write_matrix_csv
from .seeding import derive_rng
from .shift import MEASURES, biome_stats, build_shift_report
from .stages import SegModel, StagePlan, run_plan
from .vit import ViTConfig, ViTEncoder

log = logging.getLogger("biomeshift")

EXIT_CODES = (
    (ConfigError, 2),
    (FormatError, 3),
    (DataError, 4),
    (ShapeError, 5),
    (ParameterError, 5),
    (BiomeShiftError, 1),
    (OSError, 6),
)
TRACE_SUFFIX = "_trace.csv"


# ------------------------------------------------------------------ helpers

def _vit_config(cfg: RunConfig) -> ViTConfig:
    m = cfg.section("model")
    if m["image_size"] != cfg["data.crop"]:
        raise ConfigError(f"model.image_size ({m['image_size']}) must equal data.crop ({cfg['data.crop']})")
    return ViTConfig(image_size=m["image_size"], patch=m["patch"], channels=m["channels"], depth=m["depth"],
                     width=m["width"], heads=m["heads"], ffn_mult=m["ffn_mult"])


def _biomes(cfg: RunConfig, only=None):
    data_dir = Path(cfg["data.dir"])
    datasets = load_biome_dir(data_dir)
    if only:
        if only not in datasets:
            raise DataError(f"biome {only!r} not found in {data_dir}")
        datasets = {only: datasets[only]}
    inputs = sorted(data_dir.glob("*.svds"))
    return datasets, inputs


def _splits(cfg: RunConfig, datasets):
    out = {}
    for bid, ds in datasets.items():
        tr, va = make_splits(ds, cfg["data.train_fraction"], cfg["run.seed"])
        crop = cfg["data.crop"]
        out[bid] = (to_images(tr, crop), to_images(va, crop), to_images(ds, crop))
    return out


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg["run.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(cfg: RunConfig, command: str, out: Path, inputs, outputs, extra=None) -> None:
    path = write_manifest(out / "manifest.json", command, cfg.to_dict(), cfg["run.seed"], inputs,
                          [str(p) for p in outputs], extra)
    print(f"{command}: wrote {len(list(outputs))} artifacts; manifest {path}")


def _grid_to_json(grid: TransferGrid) -> dict:
    return {
        "label": grid.label, "biomes": list(grid.biomes), "temperatures": list(grid.temperatures),
        "accuracy": grid.accuracy.tolist(), "confidence": grid.confidence.tolist(),
        "labeled": grid.labeled.tolist(), "correct": grid.correct.tolist(),
    }


def _grid_from_json(path: Path) -> TransferGrid:
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
        return TransferGrid(d["biomes"], tuple(d["temperatures"]), np.array(d["accuracy"]),
                            np.array(d["confidence"]), np.array(d["labeled"]), np.array(d["correct"]),
                            d.get("label", ""))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: not a transfer grid file ({exc})") from None


def _temp_tag(t: float) -> str:
    return f"T{t:g}".replace(".", "p")


# ------------------------------------------------------------------ commands

def cmd_synth(cfg: RunConfig, args) -> None:
    s = cfg.section("synth")
    out = Path(cfg["data.dir"])
    out.mkdir(parents=True, exist_ok=True)
    params = biome_family(s["n_biomes"], n_classes=s["n_classes"], channels=s["channels"],
                          offset_step=s["offset_step"], tilt_step=s["tilt_step"], noise_scale=s["noise_scale"],
                          smoothness=s["smoothness"], unlabeled_fraction=s["unlabeled_fraction"],
                          tile_mix=s["tile_mix"], seed=cfg["run.seed"])
    outputs = []
    for p in params:
        path = out / f"{p.biome_id}.svds"
        write_dataset(generate_biome(p, s["n_tiles"], s["tile_size"]), path)
        outputs.append(path)
    _finish(cfg, "synth", out, [], outputs)


def cmd_pretrain(cfg: RunConfig, args) -> None:
    vit = _vit_config(cfg)
    datasets, inputs = _biomes(cfg)
    pool = np.concatenate([to_images(ds, cfg["data.crop"]).images for ds in datasets.values()])
    p = cfg.section("pretrain")
    pc = PretrainConfig(epochs=p["epochs"], batch_size=p["batch_size"], max_lr=p["max_lr"],
                        batch_repetition=p["batch_repetition"], mask_ratio=p["mask_ratio"], augment=p["augment"],
                        warmup_fraction=p["warmup_fraction"], max_steps=p["steps"], seed=cfg["run.seed"],
                        decoder_width=p["decoder_width"], decoder_heads=p["decoder_heads"],
                        decoder_depth=p["decoder_depth"], norm_pix_loss=p["norm_pix_loss"])
    init = None
    if p["init"]:
        init = read_checkpoint(p["init"])
        inputs = list(inputs) + [Path(p["init"])]
    out = _out(cfg)
    res = pretrain(pool, pc, vit, init=init, out_dir=out)
    trace = write_matrix_csv(np.array(res.loss_trace)[:, None], [str(i) for i in range(len(res.loss_trace))],
                             ["loss"], out / f"loss{TRACE_SUFFIX}")
    extra = {"steps": res.steps}
    if res.load_report is not None:
        extra["init_load"] = {"loaded": res.load_report.loaded, "skipped": res.load_report.skipped}
    _finish(cfg, "pretrain", out, inputs, list(res.checkpoint_paths) + [trace], extra)


def _train_sources(cfg: RunConfig, regime: str, only=None, out=None):
    """Train one model per source biome; returns ``(models, inputs, outputs, extra)``."""
    datasets, inputs = _biomes(cfg, only)
    splits = _splits(cfg, datasets)
    vit = _vit_config(cfg)
    t = cfg.section("train")
    ckpt_path = t["checkpoint"]
    if regime in ("probe", "lpft") and not ckpt_path:
        raise ConfigError(f"{regime} needs a pretrained encoder: pass --checkpoint or set train.checkpoint")
    ckpt = None
    if ckpt_path:
        ckpt = read_checkpoint(ckpt_path)
        inputs = list(inputs) + [Path(ckpt_path)]
    plan = StagePlan(regime=regime, probe_epochs=t["probe_epochs"], finetune_epochs=t["finetune_epochs"],
                     batch_size=t["batch_size"], lr=t["lr"], probe_lr=t["probe_lr"], augment=t["augment"],
                     seed=cfg["run.seed"])
    models, outputs, extra = {}, [], {}
    for bid, (tr, va, _full) in splits.items():
        enc = ViTEncoder(vit, derive_rng(cfg["run.seed"], "finetune/encoder-init"))
        if ckpt is not None:
            rep = load_partial_checkpoint(ckpt, enc)
            mean = np.asarray(ckpt.metadata["channel_mean"])
            std = np.asarray(ckpt.metadata["channel_std"])
            extra.setdefault("init_load", {"loaded": rep.loaded, "skipped": rep.skipped})
        else:
            mean, std = channel_stats(tr.images)
            std = safe_std(std)
        bdir = out / bid if out is not None else None
        model, reports = run_plan(plan, enc, tr, va, mean, std, bdir)
        failed = [r.error for r in reports if r.error]
        if failed:
            raise ParameterError(f"{bid}: {failed[0]}")
        models[bid] = model
        if bdir is not None:
            mpath = bdir / "model.svck"
            write_checkpoint(model.checkpoint({"regime": regime, "biome": bid}), mpath)
            stages = [r.stage for r in reports for _ in r.val_accuracy]
            hist = np.array([[l, a] for r in reports for l, a in zip(r.train_loss, r.val_accuracy)])
            hpath = write_matrix_csv(hist, [f"{s}:{i}" for i, s in enumerate(stages)], ["train_loss", "val_accuracy"],
                                     bdir / f"history{TRACE_SUFFIX}")
            outputs += [mpath, hpath] + [Path(r.checkpoint_path) for r in reports if r.checkpoint_path]
            extra[bid] = {"best_epochs": [r.best_epoch for r in reports],
                          "best_val_accuracy": [r.best_val_accuracy for r in reports]}
    return models, inputs, outputs, extra


def _cmd_regime(regime: str):
    def run(cfg: RunConfig, args) -> None:
        out = _out(cfg)
        _, inputs, outputs, extra = _train_sources(cfg, regime, getattr(args, "biome", None), out)
        _finish(cfg, regime, out, inputs, outputs, extra)
    return run


def cmd_grid(cfg: RunConfig, args) -> None:
    out = _out(cfg)
    datasets, inputs = _biomes(cfg)
    splits = _splits(cfg, datasets)
    outputs = []
    if args.models:
        models = {}
        for bid in datasets:
            mpath = Path(args.models) / bid / "model.svck"
            models[bid] = SegModel.from_checkpoint(read_checkpoint(mpath))
            inputs = list(inputs) + [mpath]
        label = Path(args.models).name
    else:
        models, more_inputs, outputs, _ = _train_sources(cfg, cfg["train.regime"], None, out / "models")
        inputs = more_inputs
        label = cfg["train.regime"]
    temps = cfg["eval.temperatures"]
    grid = run_transfer_grid(models, {b: s[1] for b, s in splits.items()}, {b: s[2] for b, s in splits.items()},
                             temps, cfg["eval.batch_size"], label=str(label))
    gpath = out / "grid.json"
    gpath.write_text(json.dumps(_grid_to_json(grid), indent=1) + "\n", encoding="utf-8")
    outputs.append(gpath)
    names = list(grid.biomes)
    outputs += emit_heatmap(grid.accuracy, names, names, out / "grid_accuracy", "overall accuracy (source x target)")
    for i, t in enumerate(temps):
        outputs += emit_heatmap(grid.confidence[..., i], names, names, out / f"grid_confidence_{_temp_tag(t)}",
                                f"mean confidence at T={t:g}")
    _finish(cfg, "grid", out, inputs, outputs,
            {"mean_id_accuracy": grid.mean_id_accuracy(), "mean_ood_accuracy": grid.mean_ood_accuracy()})


def cmd_calibrate(cfg: RunConfig, args) -> None:
    out = _out(cfg)
    gpath = Path(args.grid) / "grid.json"
    grid = _grid_from_json(gpath)
    rep = calibration_report(grid, cfg["eval.include_id"])
    cols = [f"T={t:g}" for t in rep.temperatures]
    outputs = list(emit_heatmap(np.array([rep.pearson]), [grid.label or "model"], cols, out / "calibration_pearson",
                                "Pearson r: accuracy vs mean confidence"))
    best = rep.best_temperature() if np.isfinite(rep.pearson).any() else None
    _finish(cfg, "calibrate", out, [gpath], outputs, {"best_temperature": best, "n_cells": rep.n_cells})


def cmd_shift(cfg: RunConfig, args) -> None:
    out = _out(cfg)
    datasets, inputs = _biomes(cfg)
    gpath = Path(args.grid) / "grid.json"
    grid = _grid_from_json(gpath)
    inputs = list(inputs) + [gpath]
    unknown = [m for m in cfg["shift.measures"] if m not in MEASURES]
    if unknown:
        raise ConfigError(f"shift.measures: unknown measures {unknown}")
    crop = cfg["data.crop"]
    diag = cfg["shift.diagonal_features"]
    encoder = mean = std = None
    if args.checkpoint:
        ck = read_checkpoint(args.checkpoint)
        encoder = ViTEncoder(ViTConfig.from_dict(ck.metadata["vit"]), np.random.default_rng(0))
        rep = load_partial_checkpoint(ck, encoder)
        if rep.skipped or rep.missing:
            raise ShapeError(f"feature encoder checkpoint does not match its own architecture: {rep.skipped}")
        mean, std = np.asarray(ck.metadata["channel_mean"]), np.asarray(ck.metadata["channel_std"])
        inputs.append(Path(args.checkpoint))
    stats = {}
    for bid, ds in datasets.items():
        ims = to_images(ds, crop)
        stats[bid] = biome_stats(ims.images, ims.labels, ds.n_classes, encoder, mean, std, diag)
    report = build_shift_report(stats, grid, diag)
    wanted = [m for m in cfg["shift.measures"] if m in report.similarity]
    names = list(report.biomes)
    outputs = []
    for m in wanted:
        outputs += emit_heatmap(report.similarity[m], names, names, out / f"similarity_{m}", f"{m} similarity")
    label = grid.label or "model"
    rho = report.spearman[grid.label]
    row = np.array([rho[m] for m in wanted])
    outputs += emit_heatmap(np.stack([row, row ** 2]), [f"{label} rho", f"{label} rho^2"], wanted,
                            out / "spearman", "Spearman rho (and rho^2): similarity vs OOD accuracy")
    per = report.per_source[grid.label]
    outputs += emit_heatmap(np.array([per[m] for m in wanted]), wanted, names, out / "spearman_per_source",
                            "Spearman rho per source biome")
    _finish(cfg, "shift", out, inputs, outputs, {"notes": report.notes})


def cmd_report(cfg: RunConfig, args) -> None:
    out = _out(cfg)
    csvs = []
    for item in args.inputs:
        p = Path(item)
        found = sorted(p.rglob("*.csv")) if p.is_dir() else [p]
        csvs += [c for c in found if not c.name.endswith(TRACE_SUFFIX) and c.parent.resolve() != out.resolve()]
    if not csvs:
        raise DataError("report found no matrix CSV files in its inputs")
    outputs = []
    for c in csvs:
        m, rows, cols = read_matrix_csv(c)
        stem = f"{c.parent.name}_{c.stem}"
        outputs.append(write_matrix_csv(m, rows, cols, out / f"{stem}.csv"))
        outputs.append(render_heatmap_svg(m, rows, cols, out / f"{stem}.svg", c.stem))
    _finish(cfg, "report", out, csvs, outputs)


COMMANDS = {
    "synth": (cmd_synth, "generate a family of synthetic biomes"),
    "pretrain": (cmd_pretrain, "masked-autoencoder pretraining on every biome's images"),
    "probe": (_cmd_regime("probe"), "train a linear head on a frozen pretrained encoder"),
    "finetune": (_cmd_regime("finetune"), "train encoder and head (from scratch without --checkpoint)"),
    "lpft": (_cmd_regime("lpft"), "linear probe, then fine-tune from the probe's best head"),
    "grid": (cmd_grid, "evaluate every source model on every target biome"),
    "calibrate": (cmd_calibrate, "temperature sweep and accuracy/confidence Pearson r"),
    "shift": (cmd_shift, "shift measures and their Spearman rho with OOD accuracy"),
    "report": (cmd_report, "render matrix CSV files to SVG heatmaps"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biomeshift", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"biomeshift {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="plain-text 'section.key = value' file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--seed", type=int, help="shortcut for run.seed")
        p.add_argument("--out", help="output directory (run.out_dir; data.dir for synth)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "synth":
            p.add_argument("--data", help="directory of .svds biome datasets (data.dir)")
        if name in ("probe", "finetune", "lpft", "grid", "shift"):
            p.add_argument("--checkpoint", help="pretrained checkpoint (train.checkpoint)")
        if name in ("probe", "finetune", "lpft"):
            p.add_argument("--biome", help="train a single source biome")
        if name == "grid":
            p.add_argument("--models", help="directory of <biome>/model.svck from a training command")
        if name in ("calibrate", "shift"):
            p.add_argument("--grid", required=True, help="directory containing grid.json")
        if name == "report":
            p.add_argument("inputs", nargs="+", help="CSV files or directories to render")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out:
        overrides.append(f"{'data.dir' if args.command == 'synth' else 'run.out_dir'}={args.out}")
    if getattr(args, "data", None):
        overrides.append(f"data.dir={args.data}")
    if getattr(args, "checkpoint", None) and args.command != "shift":
        overrides.append(f"train.checkpoint={args.checkpoint}")
    return parse_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from threadpoolctl import threadpool_limits

    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=1):
            COMMANDS[args.command][0](cfg, args)
    except Exception as exc:  # one line per failure class, no traceback
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"biomeshift {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
