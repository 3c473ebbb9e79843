"""Command-line entry point: ``sednet <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical abort.
Failures print one ``sednet: error=<kind> reason=<text>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (FingerprintError, FormatError, load_dataset, load_model, read_weights,
                     save_dataset, save_weights, synth_generate)
from .metrics import CLASSES, evaluate
from .model import ConfigError, ModelConfig, build, predict, trainable_count
from .objectives import VARIANTS, LossConfig, LossValidationError
from .preprocess import PreprocessConfig, PreprocessError, run_pipeline, to_arrays
from .trainer import NumericalAbort, TrainConfig, reports_to_csv, split, train, transfer_train

log = logging.getLogger("sednet")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
OVERLAY_COLORS = ((255, 0, 0), (0, 255, 0), (0, 0, 255))  # NTC, ED, ET


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, code: int, msg) -> int:
    reason = " ".join(str(msg).split())
    print(f"sednet: error={kind} reason={reason}", file=sys.stderr)
    return code


# -- config plumbing -------------------------------------------------------

TRAIN_DEFAULTS = {
    "seed": 0, "loss": "wbcesd-p", "wa": None, "wb": None, "lr": 3e-4, "epochs": 50,
    "batch_slices": 23, "batching": "sample", "size": None, "base_filters": 32,
    "deterministic": False, "plateau_factor": 0.3, "plateau_patience": 2, "epsilon": 1e-6,
}


def _resolve(args, defaults: dict) -> dict:
    """defaults < --config JSON < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    return cfg


def _loss_cfg(c: dict) -> LossConfig:
    return LossConfig(variant=c["loss"], epsilon=c["epsilon"], w_a=c["wa"], w_b=c["wb"])


def _train_cfg(c: dict, **over) -> TrainConfig:
    return TrainConfig(initial_lr=c["lr"], epochs=c["epochs"], batch_slices=c["batch_slices"],
                       batching=c["batching"], loss=_loss_cfg(c), seed=c["seed"],
                       plateau_factor=c["plateau_factor"], plateau_patience=c["plateau_patience"],
                       deterministic=bool(c["deterministic"]), **over)


def _samples(volumes, size):
    out = []
    for v in volumes:
        if len(v) == 0:
            continue
        x, y = to_arrays(v, size)
        out.append((x, y))
    return out


def _write_manifest(out: Path, args, config: dict, started: str, artifacts) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "config": config,
        "seed": config.get("seed"),
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "artifacts": sorted(str(Path(a).relative_to(out)) for a in artifacts),
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _split_volumes(volumes, seed):
    if len(volumes) < 3:
        return volumes, volumes, volumes
    tr, va, te = split(volumes, (0.8, 0.1, 0.1), seed)
    # small sets: floor allocation leaves val/test empty, so lend them one sample each
    if not va:
        va, tr = tr[-1:], tr[:-1]
    if not te:
        te, tr = tr[-1:], tr[:-1]
    return tr, va, te


def _data_size(volumes) -> int:
    return int(volumes[0].images.shape[1])


# -- commands --------------------------------------------------------------

def cmd_synth(args, out: Path):
    vols = synth_generate(args.seed, args.samples, args.slices, args.size, args.size,
                          empty_rate=args.empty_rate)
    paths = save_dataset(out, vols)
    cfg = {"seed": args.seed, "samples": args.samples, "slices": args.slices,
           "size": args.size, "empty_rate": args.empty_rate}
    print(f"wrote {len(paths)} volumes to {out}")
    return cfg, paths


def cmd_preprocess(args, out: Path):
    cfg = PreprocessConfig(target_size=args.target_size, area_threshold=args.threshold_T,
                           close_repeats=args.close_repeats, apply_phase2_3=not args.no_equalize,
                           truncate_mode=args.truncate)
    res = run_pipeline(load_dataset(args.data), cfg)
    paths = save_dataset(out, res.volumes)
    mpath = out / "preprocess.json"
    mpath.write_text(json.dumps(res.manifest, indent=2) + "\n")
    print(f"kept {sum(len(v) for v in res.volumes)} slices over {len(res.volumes)} samples; "
          f"least_num={res.manifest['least_num']}")
    return res.manifest["config"], [*paths, mpath]


def _train_common(args, out: Path, transfer: bool):
    defaults = dict(TRAIN_DEFAULTS, epochs=30 if transfer else 50)
    c = _resolve(args, defaults)
    volumes = load_dataset(args.data)
    tr, va, te = _split_volumes(volumes, c["seed"])
    split_ids = {"train": [v.sample_id for v in tr], "val": [v.sample_id for v in va],
                 "test": [v.sample_id for v in te]}
    if transfer:
        header, _ = read_weights(args.weights)
        mcfg = ModelConfig.from_dict(header["config"])
    else:
        size = c["size"] or _data_size(volumes)
        mcfg = ModelConfig(input_height=size, input_width=size, base_filters=c["base_filters"],
                           seed=c["seed"])
    size = mcfg.input_height
    train_s, val_s = _samples(tr, size), _samples(va, size)
    tcfg = _train_cfg(c)
    csv_path = out / "epochs.csv"
    lines = []

    def stream(report):
        lines.append(report)
        csv_path.write_text(reports_to_csv(lines))
        print(f"epoch {report.epoch:3d}  train {report.train_loss:.5f}  val {report.val_loss:.5f}  "
              f"dice {' '.join(f'{d:.4f}' for d in report.dice)}  lr {report.lr:.3g}", flush=True)

    if transfer:
        res = transfer_train(args.weights, train_s, val_s, tcfg, mcfg, out_dir=out, on_epoch=stream)
        print(f"trainable parameters: {res.trainable}; frozen checksum {res.checksum_after[:16]} "
              f"({'unchanged' if res.checksum_after == res.checksum_before else 'CHANGED'})")
    else:
        model = build(mcfg)
        res = train(model, train_s, val_s, tcfg, out_dir=out, on_epoch=stream)
    final = save_weights(out / "final.sedw", res.model)
    csv_path.write_text(reports_to_csv(res.reports))
    config = {"train": tcfg.to_dict(), "model": mcfg.to_dict(), "data": str(args.data),
              "split": split_ids}
    if transfer:
        config["weights"] = str(args.weights)
        config["frozen_checksum"] = res.checksum_after
        config["trainable"] = res.trainable
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    arts = [csv_path, final, out / "config.json"]
    if res.best_path is not None and res.best_path.exists():
        arts.append(res.best_path)
    return dict(config, seed=c["seed"]), arts


def cmd_train(args, out):
    return _train_common(args, out, transfer=False)


def cmd_transfer(args, out):
    return _train_common(args, out, transfer=True)


def _eval_arrays(args, model):
    volumes = load_dataset(args.data)
    tr, va, te = _split_volumes(volumes, args.seed)
    chosen = {"train": tr, "val": va, "test": te, "all": volumes}[args.split]
    samples = _samples(chosen, model.config.input_height)
    if not samples:
        raise PreprocessError(f"split {args.split!r} has no slices")
    x = np.concatenate([s[0] for s in samples])
    y = np.concatenate([s[1] for s in samples])
    return chosen, x, y


def cmd_eval(args, out: Path):
    model = load_model(args.weights)
    _, x, y = _eval_arrays(args, model)
    report = evaluate(model, x, y, split=args.split, tau=args.tau, spacing=args.spacing)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.json").write_text(report.to_json() + "\n")
    for c in report.classes:
        print(f"{c.name:4s} dice {c.dice:.4f}  hd {c.hausdorff:.4f} mm  "
              f"(slices {c.n_slices}, hd undefined {c.n_hd_undefined})")
    cfg = {"weights": str(args.weights), "data": str(args.data), "split": args.split,
           "seed": args.seed, "tau": args.tau, "spacing": args.spacing}
    return cfg, [out / "metrics.csv", out / "metrics.json"]


def write_pgm(path: Path, img: np.ndarray) -> None:
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.asarray(img, np.uint8).tobytes())


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.asarray(rgb, np.uint8).tobytes())


def overlay(image: np.ndarray, masks: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    gray = np.clip(image, 0, 1) * 255.0
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    for c, color in enumerate(OVERLAY_COLORS[:masks.shape[-1]]):
        m = masks[..., c].astype(bool)
        rgb[m] = (1 - alpha) * rgb[m] + alpha * np.asarray(color, dtype=np.float64)
    return np.round(rgb).astype(np.uint8)


def cmd_predict(args, out: Path):
    model = load_model(args.weights)
    volumes = load_dataset(args.data)
    size = model.config.input_height
    arts = []
    for v in volumes:
        if len(v) == 0:
            continue
        x, _ = to_arrays(v, size)
        x = x[:args.limit] if args.limit else x
        masks = predict(model, x) >= args.tau
        for i in range(len(x)):
            stem = f"{v.sample_id}_s{int(v.slice_ids[i]):03d}"
            for c, name in enumerate(CLASSES):
                p = out / f"{stem}_{name}.pgm"
                write_pgm(p, masks[i, ..., c].astype(np.uint8) * 255)
                arts.append(p)
            p = out / f"{stem}_overlay.ppm"
            write_ppm(p, overlay(x[i, ..., 0], masks[i]))
            arts.append(p)
    print(f"wrote {len(arts)} images to {out}")
    return {"weights": str(args.weights), "data": str(args.data), "tau": args.tau,
            "limit": args.limit}, arts


def cmd_summary(args, out):
    if args.weights:
        model = load_model(args.weights)
    else:
        model = build(ModelConfig(input_height=args.size, input_width=args.size,
                                  base_filters=args.base_filters))
    print(model.summary())
    return None, []


def cmd_losses_compare(args, out: Path):
    c = _resolve(args, dict(TRAIN_DEFAULTS, epochs=5))
    volumes = load_dataset(args.data)
    tr, va, te = _split_volumes(volumes, c["seed"])
    size = c["size"] or _data_size(volumes)
    mcfg = ModelConfig(input_height=size, input_width=size, base_filters=c["base_filters"],
                       seed=c["seed"])
    train_s, val_s, test_s = _samples(tr, size), _samples(va, size), _samples(te, size)
    x = np.concatenate([s[0] for s in test_s])
    y = np.concatenate([s[1] for s in test_s])
    rows = []
    for variant in VARIANTS:
        cv = dict(c, loss=variant, wa=None, wb=None)
        res = train(build(mcfg), train_s, val_s, _train_cfg(cv))
        rep = evaluate(res.model, x, y, split="test")
        rows.append([variant, *(repr(d) for d in rep.dice)])
        print(f"{variant:9s} " + " ".join(f"{d:.4f}" for d in rep.dice), flush=True)
    path = out / "loss_comparison.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["loss", "dice_ntc", "dice_ed", "dice_et"])
        w.writerows(rows)
    return {"train": _train_cfg(c).to_dict(), "model": mcfg.to_dict(), "seed": c["seed"],
            "variants": list(VARIANTS)}, [path]


# -- parser ----------------------------------------------------------------

def _train_flags(p, epochs_help):
    p.add_argument("--data", required=True, type=Path, help="directory of .sedvol files")
    p.add_argument("--config", help="JSON file of defaults, overridden by flags")
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=VARIANTS)
    p.add_argument("--wa", type=float, help="cross-entropy weight for weighted variants")
    p.add_argument("--wb", type=float, help="soft dice weight for weighted variants")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, help=epochs_help)
    p.add_argument("--batch-slices", dest="batch_slices", type=int)
    p.add_argument("--batching", choices=("sample", "fixed"))
    p.add_argument("--plateau-factor", dest="plateau_factor", type=float)
    p.add_argument("--plateau-patience", dest="plateau_patience", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--deterministic", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sednet", description="SEDNet training and evaluation engine")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--slices", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--empty-rate", dest="empty_rate", type=float, default=0.3)

    p = sub.add_parser("preprocess", help="filter and equalize training slices")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threshold-T", dest="threshold_T", type=int, default=64)
    p.add_argument("--target-size", dest="target_size", type=int, default=128)
    p.add_argument("--close-repeats", dest="close_repeats", type=int, default=2)
    p.add_argument("--truncate", choices=("first", "center"), default="first")
    p.add_argument("--no-equalize", dest="no_equalize", action="store_true")

    p = sub.add_parser("train", help="train SEDNet")
    _train_flags(p, "default 50")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--size", type=int, help="input size (default: data slice size)")
    p.add_argument("--base-filters", dest="base_filters", type=int)

    p = sub.add_parser("transfer", help="retrain only the output head from saved weights")
    _train_flags(p, "default 30")
    p.add_argument("--weights", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    for name, helptext in (("eval", "write a metrics report"), ("predict", "write mask images")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--weights", required=True, type=Path)
        p.add_argument("--data", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--seed", type=int, default=0, help="split seed (match training)")
        p.add_argument("--tau", type=float, default=0.5, help="probability threshold")
        if name == "eval":
            p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
            p.add_argument("--spacing", type=float, default=1.0, help="pixel spacing in mm")
        else:
            p.add_argument("--limit", type=int, default=0, help="max slices per sample (0 = all)")

    p = sub.add_parser("summary", help="print the layer table and parameter count")
    p.add_argument("--weights", type=Path)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--base-filters", dest="base_filters", type=int, default=32)

    p = sub.add_parser("losses-compare", help="short run per loss variant, Dice per class")
    _train_flags(p, "per variant, default 5")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--size", type=int)
    p.add_argument("--base-filters", dest="base_filters", type=int)
    return ap


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
    "transfer": cmd_transfer, "eval": cmd_eval, "predict": cmd_predict,
    "summary": cmd_summary, "losses-compare": cmd_losses_compare,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; see --help")
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    args.argv = list(argv) if argv is not None else None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    out = getattr(args, "out", None)
    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        config, artifacts = COMMANDS[args.command](args, out)
        if out is not None:
            _write_manifest(out, args, config, started, artifacts)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (ConfigError, LossValidationError) as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except NumericalAbort as exc:
        return _fail("numerical", EXIT_NUMERIC, exc)
    except (FormatError, FingerprintError, PreprocessError, FileNotFoundError, ValueError) as exc:
        return _fail("data", EXIT_DATA, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
