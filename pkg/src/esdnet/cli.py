"""``esdnet`` command line: every pipeline stage reads and writes files.

Exit status is 0 on success, 1 on a validation error (bad flags, bad input
files, invalid configs) and 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .evalkit import (
    KNOBS,
    ablation_csv,
    ablation_run,
    extract_features,
    few_shot_curve,
    fit_predict_probe,
    recon_metrics,
    reconstruct_all,
    spike_suite_score,
)
from .fsq import LEVELS_BY_CODEBOOK
from .model import ESDNet, ModelConfig
from .synthdata import (
    CLASS_NAMES,
    DatasetConfig,
    SyntheticDataset,
    generate_dataset,
    load_dataset,
    save_dataset_files,
)
from .tensor_core import ShapeError
from .tilestore import GB, MB, EmbeddingTile, TileFormatError, read_tile, unpack_tile, volume_report, write_tile
from .training import DESK_PRESET, TrainConfig, TrainingError, metrics_csv, save_training_config, train

log = logging.getLogger("esdnet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers --------------------------------------------------------------
def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, data: bytes | str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.write_bytes(data)
    return path


def _write_manifest(out: Path, args: argparse.Namespace, outputs: list[Path], extra: dict | None = None) -> None:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    manifest = {
        "tool": "esdnet",
        "version": __version__,
        "subcommand": args.command,
        "seed": args.seed,
        "config": resolved,
        "outputs": {p.relative_to(out).as_posix() if p.is_relative_to(out) else str(p): _sha256(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    _write(out / f"manifest.{args.command}.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _load_data(path) -> SyntheticDataset:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"dataset file not found: {p}")
    return load_dataset(p.read_bytes())


def _load_model(path) -> ESDNet:
    root = Path(path)
    ckpt, man = (root / "model.esdc", root / "model.json") if root.is_dir() else (root, root.with_suffix(".json"))
    if not ckpt.is_file() or not man.is_file():
        raise FileNotFoundError(f"model checkpoint/manifest not found at {root}")
    return ESDNet.from_files(ckpt.read_bytes(), man.read_text())


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ValueError(f"expected a comma-separated integer list, got {text!r}") from None


def _classes(spec: str) -> tuple[str, ...]:
    if spec.isdigit():
        n = int(spec)
        if not 1 <= n <= len(CLASS_NAMES):
            raise ValueError(f"--classes must be between 1 and {len(CLASS_NAMES)}")
        return CLASS_NAMES[:n]
    return tuple(s.strip() for s in spec.split(",") if s.strip())


# -- subcommands ----------------------------------------------------------
def cmd_gen_data(args) -> int:
    out = Path(args.out)
    cfg = DatasetConfig(_classes(args.classes), args.per_class, args.val_per_class or args.per_class, args.seed,
                        args.noise)
    train_ds, val_ds = generate_dataset(cfg)
    paths = []
    for name, ds in (("train", train_ds), ("val", val_ds)):
        p = out / f"{name}.esds"
        p.parent.mkdir(parents=True, exist_ok=True)
        save_dataset_files(ds, p, cfg)
        paths += [p, p.with_suffix(".esds.json")]
    print(f"wrote {len(train_ds)} train / {len(val_ds)} val samples to {out}")
    _write_manifest(out, args, paths, {"generator": cfg.to_dict()})
    return EXIT_OK


def _model_config(args) -> ModelConfig:
    levels = LEVELS_BY_CODEBOOK.get(args.codebook)
    if levels is None:
        raise ValueError(f"--codebook must be one of {sorted(LEVELS_BY_CODEBOOK)}")
    return ModelConfig(hidden=args.hidden, t_lat=args.t_lat, n_res=args.n_res, levels=levels, seed=args.seed)


def _train_config(args) -> TrainConfig:
    base = DESK_PRESET if args.preset == "desk" else TrainConfig()
    over = {k: getattr(args, k) for k in ("alpha", "beta", "gamma", "lr", "batch_size", "epochs", "head_lr_scale",
                                          "lr_schedule")
            if getattr(args, k, None) is not None}
    cfg = replace(base, seed=args.seed, **over)
    if getattr(args, "unsupervised", False):
        cfg = replace(cfg, beta=0.0, gamma=0.0)
    return cfg


def cmd_train(args) -> int:
    out = Path(args.out)
    train_ds = _load_data(Path(args.data) / "train.esds" if Path(args.data).is_dir() else args.data)
    val_path = Path(args.data) / "val.esds" if Path(args.data).is_dir() else args.val
    val_ds = _load_data(val_path) if val_path else None
    mcfg, tcfg = _model_config(args), _train_config(args)
    model, hist = train(train_ds, tcfg, mcfg, val=val_ds)
    paths = [
        _write(out / "model.esdc", model.to_checkpoint()),
        _write(out / "model.json", model.manifest() + "\n"),
        _write(out / "metrics.csv", metrics_csv(hist)),
        _write(out / "train_config.json", save_training_config(tcfg, mcfg) + "\n"),
    ]
    last = hist[-1] if hist else None
    print(f"trained {model.n_parameters()} parameters; final total loss {last.total if last else float('nan'):.6f}")
    _write_manifest(out, args, paths)
    return EXIT_OK


def cmd_encode(args) -> int:
    model = _load_model(args.model)
    ds = _load_data(args.data)
    codes = model.encode(ds.reflectance, ds.static)  # [N, T]
    n = len(ds)
    width = args.width or n
    if n % width:
        raise ValueError(f"{n} samples do not fill rows of width {width}")
    grid = codes.T.reshape(model.config.t_lat, n // width, width)
    tile = EmbeddingTile(args.tile_id, args.year, grid, model.config.levels)
    path = write_tile(args.out, tile, compress=not args.raw)
    print(f"encoded {n} pixels into {path} ({path.stat().st_size} bytes)")
    _write_manifest(Path(args.out), args, [path])
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    tile = read_tile(args.tile)
    if tuple(tile.levels) != tuple(model.config.levels) or tile.shape[0] != model.config.t_lat:
        raise ValueError(f"tile levels {tile.levels} / T={tile.shape[0]} do not match the model")
    T, H, W = tile.shape
    rec = model.decode(tile.codes.reshape(T, H * W).T)
    out = Path(args.out)
    p = out / f"{tile.tile_id}.reconstruction.npy"
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("wb") as fh:
        np.save(fh, rec.astype(np.float32))
    print(f"decoded {H * W} pixels to {p}")
    _write_manifest(out, args, [p])
    return EXIT_OK


def cmd_pack_tile(args) -> int:
    codes = np.load(args.codes)
    if codes.ndim != 3:
        raise ValueError(f"codes array must be [T, H, W], got {codes.shape}")
    levels = tuple(_parse_ints(args.levels)) if args.levels else LEVELS_BY_CODEBOOK[65536]
    tile = EmbeddingTile(args.tile_id, args.year, codes, levels)
    path = write_tile(args.out, tile, compress=not args.raw)
    print(f"packed {path} ({path.stat().st_size} bytes)")
    _write_manifest(Path(args.out), args, [path])
    return EXIT_OK


def cmd_unpack_tile(args) -> int:
    tile = unpack_tile(Path(args.tile).read_bytes())
    out = Path(args.out)
    p = out / f"{tile.tile_id}.codes.npy"
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("wb") as fh:
        np.save(fh, tile.codes)
    info = {"tile_id": tile.tile_id, "year": tile.year, "shape": list(tile.shape), "levels": list(tile.levels)}
    print(json.dumps(info, sort_keys=True))
    _write_manifest(out, args, [p], {"tile": info})
    return EXIT_OK


def cmd_eval_recon(args) -> int:
    model = _load_model(args.model)
    ds = _load_data(args.data)
    m = recon_metrics(ds.clean, reconstruct_all(model, ds.reflectance, ds.static))
    out = Path(args.out)
    p = _write(out / "recon.csv", m.to_csv())
    print(m.to_csv(), end="")
    summary = {"mean_mae": m.mean_mae, "mean_rmse": m.mean_rmse, "mean_cc": m.mean_cc}
    if args.max_mae is not None:
        summary["below_threshold"] = bool(m.mean_mae < args.max_mae)
        print(f"mean MAE {m.mean_mae:.6f} {'<' if summary['below_threshold'] else '>='} threshold {args.max_mae}")
    _write_manifest(out, args, [p], {"metrics": summary})
    return EXIT_OK


ALGO_FLAGS = {"linear": ("linear", {}), "ridge": ("ridge", {}), "knn1": ("knn", {"k": 1}), "knn3": ("knn", {"k": 3}),
              "rf": ("random_forest", {})}


def _features(model, tr, va, sources):
    out = {}
    for s in sources:
        mode = "codes" if s == "esd" else s
        out[s] = (extract_features(tr, model if mode in ("codes", "pooled") else None, mode),
                  extract_features(va, model if mode in ("codes", "pooled") else None, mode))
    return out


def cmd_eval_transfer(args) -> int:
    model = _load_model(args.model)
    tr, va = _load_data(args.train), _load_data(args.val)
    if args.task not in tr.labels or args.task == "water":
        raise ValueError(f"unknown pooled task {args.task!r}")
    ytr, yte = tr.labels[args.task], va.labels[args.task]
    k = int(max(ytr.max(), yte.max()) + 1)
    feats = _features(model, tr, va, args.features.split(","))
    out = Path(args.out)
    rows, paths = [["algorithm", "features", "OA", "precision", "recall", "F1"]], []
    names = CLASS_NAMES if args.task == "annual_class" else None
    for flag in args.algorithms.split(","):
        if flag not in ALGO_FLAGS:
            raise ValueError(f"unknown algorithm {flag!r}; choose from {sorted(ALGO_FLAGS)}")
        algo, hyper = ALGO_FLAGS[flag]
        if algo == "random_forest":
            hyper = {"seed": args.seed}
        for src, (Xtr, Xte) in feats.items():
            r = fit_predict_probe(Xtr, ytr, Xte, yte, algo, k, src, names, **hyper)
            rows.append([flag, src, f"{100 * r.oa:.2f}", f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}"])
            paths.append(_write(out / f"confusion_{flag}_{src}.csv", r.confusion.to_csv()))
    text = "\n".join(",".join(map(str, r)) for r in rows) + "\n"
    paths.append(_write(out / "transfer.csv", text))
    print(text, end="")
    _write_manifest(out, args, paths)
    return EXIT_OK


def cmd_few_shot(args) -> int:
    model = _load_model(args.model)
    tr, va = _load_data(args.train), _load_data(args.val)
    ytr, yte = tr.labels[args.task], va.labels[args.task]
    sizes = _parse_ints(args.sizes)
    feats = _features(model, tr, va, args.features.split(","))
    curves = few_shot_curve(feats, ytr, yte, sizes, repeats=args.repeats, seed=args.seed)
    lines = ["size," + ",".join(curves)]
    for i, n in enumerate(sizes):
        lines.append(f"{n}," + ",".join(f"{100 * curves[s][i]:.2f}" for s in curves))
    text = "\n".join(lines) + "\n"
    out = Path(args.out)
    p = _write(out / "few_shot.csv", text)
    print(text, end="")
    _write_manifest(out, args, [p])
    return EXIT_OK


def cmd_ablate(args) -> int:
    tr = _load_data(Path(args.data) / "train.esds")
    va = _load_data(Path(args.data) / "val.esds")
    values = args.values.split(",")
    if args.knob == "supervision":
        values = [v.strip() for v in values]
    rows = ablation_run(args.knob, values, _model_config(args), _train_config(args), tr, va, task=args.task)
    text = ablation_csv(args.knob, rows)
    out = Path(args.out)
    p = _write(out / f"ablation_{args.knob}.csv", text)
    print(text, end="")
    _write_manifest(out, args, [p])
    return EXIT_OK


def cmd_volume_report(args) -> int:
    r = volume_report(args.tile_mb * MB, args.region_tiles, args.global_tiles, args.baseline_gb * GB)
    print(r.to_text())
    out = Path(args.out)
    rows = r.rows() + [("compression ratio", f"{r.ratio:.2f}", "", "")]
    p = _write(out / "volume.csv", "\n".join(",".join(row) for row in rows) + "\n")
    _write_manifest(out, args, [p], {"ratio": r.ratio, "global_stored_bytes": r.global_stored_bytes})
    return EXIT_OK


def cmd_denoise_test(args) -> int:
    model = _load_model(args.model)
    ds = _load_data(args.data)
    ratio, n_days = spike_suite_score(model, ds, args.rate, args.seed)
    print(f"spike attenuation ratio {ratio:.4f} over {n_days} corrupted days")
    out = Path(args.out)
    p = _write(out / "denoise.csv", f"rate,ratio\n{args.rate},{ratio:.6f}\n")
    _write_manifest(out, args, [p], {"ratio": ratio})
    return EXIT_OK


# -- parser ---------------------------------------------------------------
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file whose keys override flags")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=("desk", "default"), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--head-lr-scale", type=float)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"))
    p.add_argument("--t-lat", type=int, default=12)
    p.add_argument("--codebook", type=int, default=65536)
    p.add_argument("--n-res", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="esdnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"esdnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic train/val pair")
    _common(p)
    p.add_argument("--classes", default="9", help="count (first N classes) or comma-separated names")
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--val-per-class", type=int)
    p.add_argument("--noise", type=float, default=0.02)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train ESDNet on a dataset directory or file")
    _common(p)
    p.add_argument("--data", required=True, help="directory with train.esds/val.esds, or a train file")
    p.add_argument("--val", help="validation file when --data is a file")
    p.add_argument("--unsupervised", action="store_true", help="reconstruction only (beta = gamma = 0)")
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a dataset into an ESD1 tile")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tile-id", default="tile")
    p.add_argument("--year", type=int, default=2024)
    p.add_argument("--width", type=int, help="tile width; samples fill rows")
    p.add_argument("--raw", action="store_true", help="store the payload without DEFLATE")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a tile back to reflectance")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--tile", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("pack-tile", help="pack a [T,H,W] .npy code array into an ESD1 tile")
    _common(p)
    p.add_argument("--codes", required=True)
    p.add_argument("--tile-id", required=True)
    p.add_argument("--year", type=int, required=True)
    p.add_argument("--levels", help="comma-separated level counts (default 16,16,16,16)")
    p.add_argument("--raw", action="store_true")
    p.set_defaults(func=cmd_pack_tile)

    p = sub.add_parser("unpack-tile", help="unpack an ESD1 tile to a .npy code array")
    _common(p)
    p.add_argument("--tile", required=True)
    p.set_defaults(func=cmd_unpack_tile)

    p = sub.add_parser("eval-recon", help="per-band MAE/RMSE/CC against clean signals")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-mae", type=float, help="acceptance threshold on mean MAE")
    p.set_defaults(func=cmd_eval_recon)

    for name, fn, hlp in (("eval-transfer", cmd_eval_transfer, "frozen-feature probes"),
                          ("few-shot", cmd_few_shot, "probe OA versus training-set size")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        p.add_argument("--model", required=True)
        p.add_argument("--train", required=True)
        p.add_argument("--val", required=True)
        p.add_argument("--task", default="static_class")
        p.add_argument("--features", default="esd,raw,composite")
        if name == "eval-transfer":
            p.add_argument("--algorithms", default="linear,ridge,knn1,knn3,rf")
        else:
            p.add_argument("--sizes", default="100,300")
            p.add_argument("--repeats", type=int, default=5)
        p.set_defaults(func=fn)

    p = sub.add_parser("ablate", help="train once per knob value and tabulate")
    _common(p)
    p.add_argument("--knob", required=True, choices=KNOBS)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--data", required=True, help="directory with train.esds/val.esds")
    p.add_argument("--task", default="static_class")
    _training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("volume-report", help="per-tile, regional and global data volumes")
    _common(p)
    p.add_argument("--baseline-gb", type=float, required=True)
    p.add_argument("--tile-mb", type=float, required=True)
    p.add_argument("--global-tiles", type=int, required=True)
    p.add_argument("--region-tiles", type=int, default=1224)
    p.set_defaults(func=cmd_volume_report)

    p = sub.add_parser("denoise-test", help="spike attenuation on cloud-injected series")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rate", type=float, default=0.05)
    p.set_defaults(func=cmd_denoise_test)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    if not args.config:
        return
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read --config {args.config}: {exc}") from None
    if not isinstance(overrides, dict):
        raise ValueError("--config must hold a JSON object")
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest in ("command", "func") or not hasattr(args, dest):
            raise ValueError(f"--config key {key!r} is not a flag of {args.command}")
        setattr(args, dest, value)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_file(parser, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"esdnet: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    limit = contextlib.nullcontext()
    if args.threads is not None:
        if args.threads < 1:
            print("esdnet: error: --threads must be >= 1", file=sys.stderr)
            return EXIT_INVALID
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(args.threads)
    try:
        with limit:
            return args.func(args)
    except (ValueError, ShapeError, TileFormatError, FileNotFoundError, KeyError) as exc:
        print(f"esdnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, OSError, RuntimeError, FloatingPointError, MemoryError) as exc:
        print(f"esdnet {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
