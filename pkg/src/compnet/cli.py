"""``compnet`` command line: gen-data, train, eval, crossval, predict, gradcheck, overlay.

Reports go to stdout as tab-separated tables; files (checkpoints, CSVs,
PGM/PPM images, PNG figures) go under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import gradcheck, phantom, pnm, render
from .autograd import ShapeError
from .experiment import EXPERIMENT_TRAIN
from .losses import write_metrics_csv
from .models import VARIANTS, NetworkConfig, build_model
from .train import FoldSplit, NumericalError, TrainConfig, cross_validate, evaluate, predict, train, write_loss_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("compnet")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig("optimal-compnet", width_scale=0.25))
    train: TrainConfig = field(default_factory=lambda: EXPERIMENT_TRAIN)
    data_dir: str | None = None
    out_dir: str = "out"
    n_per_fold: int = 100
    data_seed: int = 0
    train_fold: int = 0
    eval_fold: int = 1
    eval_rendering: str = "clean"
    eval_mode: str = "per_volume"
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["network"] = self.network.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "network" in d:
                d["network"] = NetworkConfig.from_dict(_tuples(d["network"]))
            if "train" in d:
                d["train"] = TrainConfig.from_dict(d["train"])
            cfg = cls(**d)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def validate(self):
        self.network.validate()
        self.train.validate()
        if self.n_per_fold < 1:
            raise ConfigError(f"n_per_fold must be >= 1, got {self.n_per_fold}")
        if self.train_fold not in (0, 1) or self.eval_fold not in (0, 1):
            raise ConfigError("folds are 0 or 1")
        if self.eval_rendering not in ("clean", "pathological"):
            raise ConfigError(f"eval_rendering must be clean or pathological, got {self.eval_rendering!r}")
        if self.eval_mode not in ("per_slice", "per_volume"):
            raise ConfigError(f"eval_mode must be per_slice or per_volume, got {self.eval_mode!r}")

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> RunConfig:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# ----------------------------------------------------------------- plumbing

def _emit(header: list[str], rows: list[list]) -> None:
    print("\t".join(header))
    for r in rows:
        print("\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in r))


def _resolve(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror}") from exc
        cfg = RunConfig.loads(text)
    net, tr = cfg.network, cfg.train
    if args.variant is not None:
        net = replace(net, variant=args.variant)
    if args.width_scale is not None:
        net = replace(net, width_scale=args.width_scale)
    if args.seed is not None:
        net = replace(net, seed=args.seed)
        tr = replace(tr, seed=args.seed)
        cfg = replace(cfg, data_seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        tr = replace(tr, epochs=args.epochs)
    cfg = replace(cfg, network=net, train=tr)
    for flag, key in (("out", "out_dir"), ("data", "data_dir"), ("checkpoint", "checkpoint"), ("n", "n_per_fold"),
                      ("rendering", "eval_rendering"), ("mode", "eval_mode"), ("fold", None)):
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "fold":
            key = "train_fold" if args.command == "train" else "eval_fold"
        cfg = replace(cfg, **{key: value})
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _dataset(cfg: RunConfig) -> phantom.Dataset:
    if cfg.data_dir:
        return phantom.load_dataset(cfg.data_dir)
    return phantom.build_dataset(cfg.n_per_fold, seed=cfg.data_seed)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError("this command needs --checkpoint")
    model, _, _ = ckpt_io.load_checkpoint(cfg.checkpoint)
    return model


# ----------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, args) -> int:
    ds = phantom.build_dataset(cfg.n_per_fold, seed=cfg.data_seed)
    out = phantom.save_dataset(ds, _out(cfg))
    rows = [[fold, rendering, len(ds.select(fold, rendering))] for fold in (0, 1) for rendering in ("clean", "pathological")]
    _emit(["fold", "rendering", "samples"], [r for r in rows if r[2]])
    log.info("wrote dataset to %s", out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    samples = ds.samples(cfg.train_fold, "clean")
    model = build_model(cfg.network)
    result = train(model, samples, cfg.train)
    out = _out(cfg)
    ckpt_io.save_checkpoint(out / "checkpoint.cmpn", model, result.state, cfg.train)
    write_loss_csv(out / "loss.csv", result.history)
    (out / "run_config.json").write_text(cfg.dumps())
    render.plot_loss_curve(out / "loss.png", result.history, f"{cfg.network.variant} training loss")
    _emit(["epoch", "mean_loss", "dice_term", "comp_term", "recon_term"],
          [[h.epoch, h.mean_loss, h.dice_term, h.comp_term, h.recon_term] for h in result.history])
    return EXIT_OK


def _eval_rows(name: str, ev) -> list:
    s = ev.summary
    return [name, len(ev.metrics), s["dice"][0], s["dice"][1], s["sensitivity"][0], s["specificity"][0]]


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _load_model(cfg)
    ds = _dataset(cfg)
    records = ds.select(cfg.eval_fold, cfg.eval_rendering)
    if not records:
        raise ConfigError(f"fold {cfg.eval_fold} has no {cfg.eval_rendering} samples")
    ev = evaluate(model, [r.sample for r in records], cfg.eval_mode, ids=[f"{r.id:04d}" for r in records])
    out = _out(cfg)
    write_metrics_csv(out / "metrics.csv", ev.rows)
    _emit(["set", "n", "dice_mean", "dice_std", "sensitivity_mean", "specificity_mean"],
          [_eval_rows(f"fold{cfg.eval_fold}-{cfg.eval_rendering}", ev)])
    return EXIT_OK


def cmd_crossval(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    records = ds.select(0, "clean") + ds.select(1, "clean")
    half = len(ds.select(0, "clean"))
    splits = [
        FoldSplit(0, tuple(range(half, len(records))), tuple(range(half))),
        FoldSplit(1, tuple(range(half)), tuple(range(half, len(records)))),
    ]
    result = cross_validate([r.sample for r in records], cfg.network, cfg.train, splits, cfg.eval_mode)
    out = _out(cfg)
    rows = []
    for f in result.folds:
        write_metrics_csv(out / f"metrics_fold{f.split.fold}.csv", f.evaluation.rows)
        rows.append(_eval_rows(f"fold{f.split.fold}", f.evaluation))
    pooled = result.pooled
    rows.append(["pooled", len(result.tested_ids), pooled["dice"][0], pooled["dice"][1],
                 pooled["sensitivity"][0], pooled["specificity"][0]])
    _emit(["set", "n", "dice_mean", "dice_std", "sensitivity_mean", "specificity_mean"], rows)
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    model = _load_model(cfg)
    volume = pnm.read_pgm(args.input, stack=True).astype(np.float32) / np.float32(255.0)
    pred = predict(model, np.stack(phantom.slice_volume(volume)))
    out = _out(cfg)
    seg = phantom.stack_masks(list(pred.seg >= 0.5))
    pnm.write_pgm(out / "seg.pgm", seg.astype(np.uint8) * 255)
    written = ["seg.pgm"]
    if pred.comp is not None:
        pnm.write_pgm(out / "comp.pgm", (pred.comp >= 0.5).astype(np.uint8) * 255)
        written.append("comp.pgm")
    if pred.recon is not None:
        pnm.write_pgm(out / "recon.pgm", pred.recon)
        written.append("recon.pgm")
    mid = len(volume) // 2
    render.plot_outputs(out / "outputs.png", volume[mid], pred.seg[mid],
                        None if pred.comp is None else pred.comp[mid],
                        None if pred.recon is None else pred.recon[mid])
    _emit(["output", "slices"], [[w, len(volume)] for w in written])
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = gradcheck.run_primitive_suite() + gradcheck.run_loss_suite()
    rows = [[r.name, r.max_error, r.tolerance, "pass" if r.passed else "FAIL"] for r in results]
    spot = gradcheck.model_spot_check(gradcheck.tiny_model_config(cfg.network.variant), n_params=args.n_params)
    worst = max(e for _, _, e in spot)
    ok_model = bool(np.isfinite(worst) and worst < 1e-3)
    rows.append([f"model[{cfg.network.variant}] x{len(spot)}", worst, 1e-3, "pass" if ok_model else "FAIL"])
    _emit(["check", "max_rel_error", "tolerance", "status"], rows)
    failed = [r[0] for r in rows if r[3] != "pass"]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_overlay(cfg: RunConfig, args) -> int:
    image = pnm.read_pgm(args.image).astype(np.float32) / 255.0
    truth = pnm.read_pgm(args.true) > 127
    pred = pnm.read_pgm(args.pred) > 127
    out = Path(args.output) if args.output else _out(cfg) / "overlay.ppm"
    out.parent.mkdir(parents=True, exist_ok=True)
    render.write_overlay(out, image, truth, pred)
    _emit(["pixels", "true_only", "pred_only", "overlap"],
          [[truth.size, int((truth & ~pred).sum()), int((pred & ~truth).sum()), int((truth & pred).sum())]])
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "crossval": cmd_crossval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "overlay": cmd_overlay,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--width-scale", type=float, metavar="F")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="compnet", description="Complementary segmentation networks on synthetic head phantoms.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("gen-data", parents=[common], help="write a two-fold phantom dataset")
    p.add_argument("--n", type=int, help="phantoms per fold")
    for name, helptext in (("train", "train on a fold's clean phantoms"), ("crossval", "two-fold cross-validation")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", metavar="DIR", help="dataset directory (default: generate in memory)")
        p.add_argument("--n", type=int)
        p.add_argument("--epochs", type=int)
        if name == "train":
            p.add_argument("--fold", type=int, choices=(0, 1))
        else:
            p.add_argument("--mode", choices=("per_slice", "per_volume"))
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a fold")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--n", type=int)
    p.add_argument("--fold", type=int, choices=(0, 1))
    p.add_argument("--rendering", choices=("clean", "pathological"))
    p.add_argument("--mode", choices=("per_slice", "per_volume"))
    p = sub.add_parser("predict", parents=[common], help="segment a PGM image or volume")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--input", required=True, metavar="PGM")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the autodiff engine")
    p.add_argument("--n-params", type=int, default=24)
    p = sub.add_parser("overlay", parents=[common], help="render truth/prediction overlay as PPM")
    p.add_argument("--image", required=True)
    p.add_argument("--true", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--output", metavar="PPM")
    return parser


def _threads() -> int:
    raw = os.environ.get("COMPNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"COMPNET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"COMPNET_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = _resolve(args)
        with threadpool_limits(limits=_threads()):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, pnm.PNMError, ckpt_io.CheckpointError, ShapeError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
