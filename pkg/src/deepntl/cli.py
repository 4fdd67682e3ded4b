"""Command-line front end.

Exit status: 0 success, 1 usage error, 2 data error, 3 internal error.
Each run writes the fully resolved configuration next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import calib, dataset, metrics, model, pipeline, train
from .config import RunConfig, quad
from .errors import ConfigError, DataError, TrainingError
from .raster import Raster, TileRef, export_pgm, load_raster, save_raster

log = logging.getLogger("deepntl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
CONFIG_NAME = "run_config.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default,
                        help="key=value configuration file")
    parser.add_argument("--seed", type=int, default=default, help="seed for all randomness")
    parser.add_argument("--threads", type=int, default=default, help="worker threads")
    parser.add_argument("--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    p = _Parser(prog="deepntl", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def cmd(name, helptext, parent=sub):
        return parent.add_parser(name, help=helptext, description=helptext, parents=[common])

    s = cmd("synth", "generate a synthetic DMSP/VIIRS scene (or a multi-frame series)")
    s.add_argument("--rows", type=int, required=True)
    s.add_argument("--cols", type=int, required=True)
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--out", required=True, help="output directory")

    s = cmd("calibrate", "calibration fields, quadratic fits and calibrated rasters")
    s.add_argument("--input", action="append", required=True, metavar="PRODUCT=PATH",
                   help="e.g. 1999F12=dmsp_1999.ntlr; repeat for every product")
    s.add_argument("--out", required=True, help="output directory")

    s = cmd("tlv", "total light value per raster")
    s.add_argument("--input", action="append", required=True, metavar="PRODUCT=PATH")
    s.add_argument("--out", required=True, help="CSV path")

    s = cmd("sample", "draw lit tile anchors on the reference pair")
    s.add_argument("--dmsp-ref", required=True)
    s.add_argument("--viirs-ref", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--out", required=True, help="points CSV path")

    ds = cmd("dataset", "build or split a training manifest")
    dsub = ds.add_subparsers(dest="dataset_command", parser_class=_Parser, metavar="ACTION")
    dsub.required = True
    s = cmd("build", "extract example tiles for every (point, target product)", dsub)
    s.add_argument("--points", required=True)
    s.add_argument("--dmsp-ref", required=True)
    s.add_argument("--viirs-ref", required=True)
    s.add_argument("--target", action="append", required=True,
                   metavar="PRODUCT=DMSP_PATH,VIIRS_PATH")
    s.add_argument("--out", required=True, help="output directory")
    s = cmd("split", "assign train/val labels", dsub)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output manifest CSV")
    s.add_argument("--train-frac", type=float)
    s.add_argument("--by-point", action="store_true", default=None)

    s = cmd("train", "train a model on a split manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--epochs", type=int)

    s = cmd("infer", "reconstruct a target-year VIIRS-like raster")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dmsp-ref", required=True)
    s.add_argument("--dmsp-tgt", required=True)
    s.add_argument("--viirs-ref", required=True)
    s.add_argument("--out", required=True, help="output NTLR path")

    s = cmd("eval", "r / PSNR / SSIM between ground truth and reconstruction")
    s.add_argument("--gt", required=True)
    s.add_argument("--sr", required=True)
    s.add_argument("--max", type=float, dest="max_val")
    s.add_argument("--label", default="")
    s.add_argument("--out", help="CSV path (default: stdout only)")

    b = cmd("baseline", "baseline reconstructions")
    bsub = b.add_subparsers(dest="baseline_command", parser_class=_Parser, metavar="MODEL")
    bsub.required = True
    s = cmd("bilinear", "2x bilinear upsampling", bsub)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)

    s = cmd("pgm", "export a raster as 16-bit PGM for viewing")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--vmin", type=float)
    s.add_argument("--vmax", type=float)
    return p


# --------------------------------------------------------------------------

def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for flag, key in (("seed", "seed"), ("threads", "threads"), ("n", "n_points"),
                      ("train_frac", "train_frac"), ("by_point", "split_by_point"),
                      ("epochs", "epochs"), ("max_val", "metric_max")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    return cfg.update(overrides, "command line")


def _write_config(cfg: RunConfig, out: Path, is_dir: bool):
    path = out / CONFIG_NAME if is_dir else out.with_name(out.name + ".config.txt")
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg.write(path)


def _products(specs):
    out = []
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"expected PRODUCT=PATH, got {spec!r}")
        key, path = spec.split("=", 1)
        out.append((calib.ProductId.parse(key), path))
    return out


def _model_config(cfg: RunConfig, h: int, w: int) -> model.ModelConfig:
    return model.ModelConfig(h, w, cfg.model_c, model.ResNetConfig(*quad(cfg.f3)),
                             model.ResNetConfig(*quad(cfg.hstar)),
                             model.ResNetConfig(*quad(cfg.gstar)),
                             model.RCANConfig(*quad(cfg.f1)), cfg.model_variant,
                             cfg.dmsp_scale, 496.0 if cfg.viirs_scale == "auto"
                             else _positive(cfg.viirs_scale, "viirs_scale"))


def _positive(text, key):
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key!r}") from None
    if not v > 0:
        raise ConfigError(f"{key} must be positive, got {text!r}")
    return v


def cmd_synth(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = dataset.synth_series(cfg.seed, args.rows, args.cols, args.frames)
    for k, (d, v) in enumerate(series):
        suffix = "" if args.frames == 1 else f"_{k}"
        save_raster(out / f"dmsp{suffix}.ntlr", d)
        save_raster(out / f"viirs{suffix}.ntlr", v)
    _write_config(cfg, out, True)


def cmd_calibrate(args, cfg):
    items = _products(args.input)
    stack = calib.CalibrationStack([p for p, _ in items], [load_raster(f) for _, f in items])
    cf, fits, calibrated = calib.calibrate_stack(stack, calib.ProductId.parse(cfg.base_product),
                                                 cfg.spatial_quantile, cfg.temporal_quantile)
    out = Path(args.out)
    (out / "calibrated").mkdir(parents=True, exist_ok=True)
    save_raster(out / "cf.ntlr", Raster(cf.bits.astype(np.float32), *_geo(stack.rasters[0])))
    (out / "fits.csv").write_text(calib.fits_to_csv(fits))
    for p, r in zip(stack.products, calibrated):
        save_raster(out / "calibrated" / f"{p}.ntlr", r)
    _write_config(cfg, out, True)
    log.info("calibration fields: %d pixels", cf.count())


def _geo(r: Raster):
    return r.x0, r.y0, r.dx, r.dy, r.nodata


def cmd_tlv(args, cfg):
    items = _products(args.input)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(calib.tlv_to_csv([p for p, _ in items], [load_raster(f) for _, f in items]))
    _write_config(cfg, out, False)


def cmd_sample(args, cfg):
    d, v = load_raster(args.dmsp_ref), load_raster(args.viirs_ref)
    pts = dataset.sample_points(d, v, cfg.n_points, cfg.tile_h, cfg.tile_w, cfg.min_lit,
                                cfg.seed, cfg.max_attempts_per_point * cfg.n_points)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("anchor_row", "anchor_col", "height", "width"))
    for t in pts:
        w.writerow((t.anchor_row, t.anchor_col, t.height, t.width))
    out.write_text(buf.getvalue())
    _write_config(cfg, out, False)


def _read_points(path) -> list[TileRef]:
    rows = csv.DictReader(io.StringIO(Path(path).read_text()))
    return [TileRef(int(r["anchor_row"]), int(r["anchor_col"]), int(r["height"]),
                    int(r["width"])) for r in rows]


def cmd_dataset_build(args, cfg):
    targets = []
    for spec in args.target:
        if "=" not in spec or "," not in spec.split("=", 1)[1]:
            raise UsageError(f"expected PRODUCT=DMSP_PATH,VIIRS_PATH, got {spec!r}")
        key, paths = spec.split("=", 1)
        dpath, vpath = paths.split(",", 1)
        targets.append((calib.ProductId.parse(key), load_raster(dpath),
                        dataset.clean_viirs(load_raster(vpath), cfg.viirs_floor, cfg.viirs_ceil)))
    ref_v = dataset.clean_viirs(load_raster(args.viirs_ref), cfg.viirs_floor, cfg.viirs_ceil)
    m = dataset.build_examples(_read_points(args.points), load_raster(args.dmsp_ref), ref_v,
                               targets)
    out = Path(args.out)
    dataset.save_manifest(m, out)
    _write_config(cfg, out, True)


def cmd_dataset_split(args, cfg):
    src = Path(args.manifest)
    rows = list(csv.DictReader(io.StringIO(src.read_text())))
    if not rows:
        raise DataError(f"manifest {src} is empty")
    m = dataset.load_manifest(src)
    split = dataset.split_manifest(m, cfg.train_frac, cfg.seed, cfg.split_by_point)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=dataset.MANIFEST_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row, label in zip(rows, split.splits):
        row["split"] = label
        for k in dataset.MANIFEST_COLUMNS[6:]:
            absolute = (src.parent / row[k]).resolve()
            row[k] = Path(os.path.relpath(absolute, out.parent.resolve())).as_posix()
        w.writerow(row)
    out.write_text(buf.getvalue())
    _write_config(cfg, out, False)


def cmd_train(args, cfg):
    m = dataset.load_manifest(args.manifest)
    if not len(m):
        raise DataError("manifest has no examples")
    h, w = m.examples[0].dmsp_ref.shape
    mcfg = _model_config(cfg, h, w)
    if cfg.viirs_scale == "auto":
        mcfg = train.with_target_scale(mcfg, m.subset("train"))
    tcfg = train.TrainConfig(cfg.lr0, cfg.decay, cfg.patience, cfg.batch_size, cfg.epochs,
                             cfg.seed, cfg.beta1, cfg.beta2, cfg.adam_eps)
    result = train.train_loop(m, mcfg, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoint.ntlc").write_bytes(model.save_checkpoint(result.params, mcfg))
    (out / "last.ntlc").write_bytes(model.save_checkpoint(result.last_params, mcfg))
    (out / "loss_log.csv").write_text(train.log_to_csv(result.log))
    _write_config(cfg, out, True)


def cmd_infer(args, cfg):
    payload = Path(args.checkpoint).read_bytes()
    out_r = pipeline.reconstruct_year(
        payload, load_raster(args.dmsp_ref), load_raster(args.dmsp_tgt),
        load_raster(args.viirs_ref), ceil=cfg.viirs_ceil, batch_size=cfg.infer_batch,
        threads=cfg.threads, overlap=cfg.overlap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_raster(out, out_r)
    _write_config(cfg, out, False)


def cmd_eval(args, cfg):
    report = metrics.evaluate_pair(load_raster(args.gt), load_raster(args.sr), cfg.metric_max,
                                   args.label)
    text = metrics.reports_to_csv([report])
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_config(cfg, out, False)


def cmd_bilinear(args, cfg):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_raster(out, pipeline.bilinear_upsample2x(load_raster(args.input)))
    _write_config(cfg, out, False)


def cmd_pgm(args, cfg):
    export_pgm(load_raster(args.input), args.out, args.vmin, args.vmax)


_COMMANDS = {
    ("synth",): cmd_synth, ("calibrate",): cmd_calibrate, ("tlv",): cmd_tlv,
    ("sample",): cmd_sample, ("dataset", "build"): cmd_dataset_build,
    ("dataset", "split"): cmd_dataset_split, ("train",): cmd_train, ("infer",): cmd_infer,
    ("eval",): cmd_eval, ("baseline", "bilinear"): cmd_bilinear, ("pgm",): cmd_pgm,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    key = tuple(k for k in (args.command, getattr(args, "dataset_command", None),
                            getattr(args, "baseline_command", None)) if k)
    try:
        cfg = _resolve(args)
        _COMMANDS[key](args, cfg)
    except UsageError as exc:
        sys.stderr.write(f"deepntl: {exc}\n")
        return EXIT_USAGE
    except (DataError, TrainingError, OSError) as exc:
        sys.stderr.write(f"deepntl {' '.join(key)}: error: {exc}\n")
        return EXIT_DATA
    except Exception:  # noqa: BLE001 - last-resort reporting
        sys.stderr.write("deepntl: internal error\n")
        traceback.print_exc()
        return EXIT_INTERNAL
    return EXIT_OK


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
