"""Command-line entry point: ``geoformer <subcommand> ...``.

Every subcommand writes ``run_config.json`` (the fully resolved settings,
their provenance and the tool version) into its output directory. Settings
resolve as: command-line flag, else ``--config`` file, else built-in default.
Exit codes: 0 ok, 2 usage/config, 3 data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .ccap import CcapConfig, event_compare, select_threshold, write_ccap_outputs, write_event_csv, write_event_json
from .dataset_store import (
    CHANNELS,
    PX,
    CityStack,
    NormStats,
    SynthParams,
    compute_norm_stats,
    read_container,
    resample_bilinear,
    synth_cities,
    write_container,
)
from .diffcore import CheckpointError
from .errors import ConfigError, DataError, GeoFormerError
from .evaluation import (
    ABLATIONS,
    AblationSpec,
    ablation_rows,
    ablation_table,
    metrics,
    rollup,
    run_ablation,
    stratified,
    trim_outliers,
    write_reports_csv,
    write_reports_json,
)
from .geosplit import apply_split_manifest, geosplit, read_split_manifest, write_split_manifest
from .grid_labeling import KEPT, FishnetGrid, aggregate, filter_reason, read_footprints
from .model import ModelConfig, load_model, read_model_config
from .trainer import TrainConfig, TrainData, init_model, make_data, predict_split, resume, train

log = logging.getLogger("geoformer")

RUN_CONFIG = "run_config.json"
DATA_INFO = "data.json"
SPLIT_FILE = "split.csv"

MODEL_FLAGS = {"variant": "variant", "k": "k", "embed_dim": "embed_dim", "n_heads": "n_heads",
               "n_blocks": "n_blocks", "window": "window", "mlp_ratio": "mlp_ratio", "head_hidden": "head_hidden"}
TRAIN_FLAGS = {"epochs": "max_epochs", "lr": "lr", "batch": "batch", "patience": "patience",
               "warmup": "warmup_epochs", "weight_decay": "weight_decay", "grad_clip": "grad_clip"}
CCAP_FLAGS = {"lam_lo": "lam_lo", "lam_hi": "lam_hi", "steps": "n_steps", "bh_floor": "bh_floor",
              "connectivity": "connectivity", "penalty": "penalty", "probabilities": "probabilities"}
RUN_CONFIG_KEYS = {"model", "train", "ccap", "seed", "tool", "version", "command", "paths", "options", "provenance"}


# -- configuration ---------------------------------------------------------------------

def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(doc) - RUN_CONFIG_KEYS
    if unknown:
        raise ConfigError(f"config file {path}: unknown section(s) {sorted(unknown)}")
    return doc


def _merge(section: dict, args: argparse.Namespace, flags: dict) -> tuple[dict, dict]:
    merged = dict(section)
    overrides = {}
    for flag, key in flags.items():
        v = getattr(args, flag, None)
        if v is not None:
            merged[key] = v
            overrides[flag] = v
    return merged, overrides


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults into one plain dict."""
    doc = _load_config_file(getattr(args, "config", None))
    seed = args.seed if getattr(args, "seed", None) is not None else int(doc.get("seed", 0))
    out = {"tool": "geoformer", "version": __version__, "command": args.command, "seed": seed}
    overrides = {"seed": args.seed} if getattr(args, "seed", None) is not None else {}
    if args.command in ("train", "eval", "ablate"):
        m, o = _merge(doc.get("model", {}), args, MODEL_FLAGS)
        overrides.update(o)
        if m.get("variant") == "cnn_baseline" and "k" not in m:
            m["k"] = 1
        ablation = getattr(args, "ablation", None) or doc.get("options", {}).get("ablation")
        if ablation:
            m["capacity_scale"] = AblationSpec.named(ablation).capacity_scale
        out["model"] = ModelConfig.from_dict(m).resolved()
        t, o = _merge(doc.get("train", {}), args, TRAIN_FLAGS)
        overrides.update(o)
        t["seed"] = seed
        out["train"] = asdict(TrainConfig.from_dict(t))
    if args.command in ("ccap", "compare-events"):
        c, o = _merge(doc.get("ccap", {}), args, CCAP_FLAGS)
        overrides.update(o)
        out["ccap"] = asdict(CcapConfig.from_dict(c))
    options = {}
    for k, v in sorted(vars(args).items()):
        if k in ("command", "func", "config", "seed", "threads") or k in MODEL_FLAGS or k in TRAIN_FLAGS \
                or k in CCAP_FLAGS:
            continue
        options[k] = str(v) if isinstance(v, Path) else v
    out["options"] = options
    out["provenance"] = {"config_file": str(args.config) if getattr(args, "config", None) else None,
                         "overrides": overrides, "threads": getattr(args, "threads", None)}
    return out


def write_run_config(out_dir: Path, run: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    p = out_dir / RUN_CONFIG
    p.write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
    return p


# -- data helpers --------------------------------------------------------------------

def _load_split(container: Path, split_path):
    stacks, samples = read_container(container)
    if split_path is None:
        raise ConfigError("--split is required (a manifest CSV or a directory holding split.csv)")
    p = Path(split_path)
    if p.is_dir():
        p = p / SPLIT_FILE
    samples = apply_split_manifest(samples, read_split_manifest(p))
    return stacks, samples


def _model_label(cfg: ModelConfig, ablation: str | None = None) -> str:
    name = "CNN baseline" if cfg.variant == "cnn_baseline" else f"GeoFormer {cfg.k}x{cfg.k}"
    return f"{name} ({ablation})" if ablation and ablation != "full" else name


def _data_info(stats: NormStats, keep, ablation: str | None) -> dict:
    return {"norm_stats": stats.to_dict(), "channel_keep": [bool(v) for v in keep], "ablation": ablation}


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(args, run) -> None:
    out = Path(args.out)
    stacks = synth_cities(run["seed"], args.cities, args.rows, args.cols, SynthParams())
    write_container(stacks, None, out)
    write_run_config(out, run)
    print(f"wrote {len(stacks)} synthetic cities to {out}")


def _read_raster(path: Path) -> np.ndarray:
    try:
        a = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise DataError(f"raster {path} not found") from None
    except ValueError as exc:
        raise DataError(f"raster {path} unreadable ({exc})") from None
    if a.ndim != 2:
        raise DataError(f"raster {path} must be 2-D, got shape {a.shape}")
    return a.astype(np.float64)


def cmd_ingest(args, run) -> None:
    """Footprints -> labels; ``<raster_dir>/<CHANNEL>.npy`` -> 10 m channel stack.

    Channels must cover the grid at 10 m; DEM may be coarser (e.g. 30 m) and
    is bilinearly resampled to 10 m.
    """
    rdir = Path(args.rasters)
    polys = read_footprints(args.footprints)
    first = _read_raster(rdir / f"{CHANNELS[0]}.npy")
    if first.shape[0] % PX or first.shape[1] % PX:
        raise DataError(f"channel rasters {first.shape} are not a whole number of {PX}-pixel cells")
    rows, cols = first.shape[0] // PX, first.shape[1] // PX
    chans = []
    for name in CHANNELS:
        a = first if name == CHANNELS[0] else _read_raster(rdir / f"{name}.npy")
        if a.shape != first.shape:
            if name != "DEM":
                raise DataError(f"{name}.npy has shape {a.shape}, expected {first.shape}")
            a = resample_bilinear(a, first.shape)
        chans.append(a)
    channels = np.stack(chans).astype(np.float32)
    grid = FishnetGrid(args.x0, args.y0, rows, cols)
    labels = aggregate(polys, grid)
    bh = labels.h_ave.astype(np.float32)
    bf = labels.lambda_p.astype(np.float32)
    finite = np.all(np.isfinite(channels.reshape(len(CHANNELS), rows, PX, cols, PX)), axis=(0, 2, 4))
    valid = (filter_reason(bh, bf) == KEPT) & finite
    stack = CityStack(args.city, args.year, grid, channels, bh, bf, valid,
                      {"generator": "ingest", "footprints": Path(args.footprints).name})
    out = Path(args.out)
    write_container([stack], None, out)
    write_run_config(out, run)
    print(f"{args.city}: {int(valid.sum())} of {rows * cols} cells kept; container at {out}")


def cmd_split(args, run) -> None:
    if len(args.ratios) != 3:
        raise ConfigError("--ratios takes three values (train val test)")
    stacks, samples = read_container(args.container)
    tagged, splits = geosplit(stacks, samples, tuple(args.ratios), seed=run["seed"], k=args.k)
    out = Path(args.out)
    write_run_config(out, run)
    write_split_manifest(out / SPLIT_FILE, tagged, splits)
    counts = {s: sum(1 for x in tagged if x.split == s) for s in ("train", "val", "test", "purged")}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_train(args, run) -> None:
    out = Path(args.out)
    mcfg = ModelConfig.from_dict(run["model"])
    tcfg = TrainConfig.from_dict(run["train"])
    ablation = args.ablation or "full"
    spec = AblationSpec.named(ablation)
    stacks, samples = _load_split(args.container, args.split)
    stats = compute_norm_stats(stacks, samples)
    data = make_data(stacks, samples, mcfg.k, stats=stats, channel_keep=spec.channel_keep)
    write_run_config(out, run)
    (out / DATA_INFO).write_text(json.dumps(_data_info(stats, spec.channel_keep, ablation), indent=1) + "\n")
    if args.resume:
        res = resume(out / "last.ckpt", data, tcfg, out_dir=out, expect=mcfg)
    else:
        res = train(init_model(mcfg, data, seed=run["seed"]), data, tcfg, out_dir=out)
    print(f"best epoch {res.best_epoch} (val score {res.best_score:.4f}); "
          f"{'early stop' if res.stopped_early else 'finished'} at epoch {res.last_epoch}")


def _eval_data(ckpt: Path, params, stacks, samples) -> TrainData:
    info_path = ckpt.parent / DATA_INFO
    if info_path.exists():
        info = json.loads(info_path.read_text())
        stats = NormStats.from_dict(info["norm_stats"])
        keep = info["channel_keep"]
    else:
        stats, keep = compute_norm_stats(stacks, samples), None
    return make_data(stacks, samples, params.config.k, stats=stats, channel_keep=keep)


def cmd_eval(args, run) -> None:
    ckpt = Path(args.checkpoint)
    stored = read_model_config(ckpt)
    overrides = {f: getattr(args, f) for f in ("k", "variant") if getattr(args, f, None) is not None}
    expect = stored.with_(**overrides) if overrides else None
    params, _, _ = load_model(ckpt, expect=expect)
    run["model"] = params.config.resolved()
    stacks, samples = _load_split(args.container, args.split)
    data = _eval_data(ckpt, params, stacks, samples)
    info = json.loads((ckpt.parent / DATA_INFO).read_text()) if (ckpt.parent / DATA_INFO).exists() else {}
    label = _model_label(params.config, info.get("ablation"))
    out = Path(args.out)
    write_run_config(out, run)

    reports, preds = [], {}
    for split in ("train", "val", "test"):
        sd = data[split]
        if len(sd.cells) < 2:
            continue
        bh, bf = predict_split(params, data, split)
        preds[split] = (bh, bf)
        reports.append(metrics(bh, sd.bh, "bh", label, split))
        reports.append(metrics(bf, sd.bf, "bf", label, split))
    if "test" not in preds:
        raise DataError("the split manifest leaves fewer than two test samples")
    write_reports_csv(out / "metrics.csv", reports)
    write_reports_json(out / "metrics.json", reports, {"checkpoint": ckpt.name, "config_hash": params.config.hash})
    (out / "rollup.txt").write_text(rollup(reports))

    test = data["test"]
    bh, bf = preds["test"]
    labels = (test.bh, test.bf)
    for task, p, t in (("bh", bh, test.bh), ("bf", bf, test.bf)):
        write_reports_csv(out / f"stratified_{task}.csv", stratified(p, t, labels, task=task, model=label))
    trim = {}
    for task, p, t in (("bh", bh, test.bh), ("bf", bf, test.bf)):
        tr = trim_outliers(p, t, q=args.trim_q, task=task, model=label)
        trim[task] = {"q": args.trim_q, "dropped": int(tr.dropped.size),
                      "before": {"rmse": tr.before.rmse, "r2": tr.before.r2},
                      "after": {"rmse": tr.after.rmse, "r2": tr.after.r2}}
    (out / "trim.json").write_text(json.dumps(trim, indent=1, sort_keys=True) + "\n")
    with (out / "predictions.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["city", "row", "col", "bh_true", "bh_pred", "bf_true", "bf_pred"])
        for (city, r, c), a, b, x, y in zip(test.cells, test.bh, bh, test.bf, bf):
            w.writerow([city, r, c, repr(float(a)), repr(float(b)), repr(float(x)), repr(float(y))])
    print(rollup([r for r in reports if r.stratum == "test"]), end="")


def cmd_ablate(args, run) -> None:
    mcfg = ModelConfig.from_dict(run["model"])
    tcfg = TrainConfig.from_dict(run["train"])
    names = args.only or list(ABLATIONS)
    stacks, samples = _load_split(args.container, args.split)
    out = Path(args.out)
    write_run_config(out, run)
    results = {}
    for name in names:
        log.info("ablation %s", name)
        results[name] = run_ablation(AblationSpec.named(name), stacks, samples,
                                     mcfg.with_(capacity_scale=1), tcfg, seed=run["seed"], out_dir=out)
    (out / "ablation_structural.txt").write_text(ablation_table(results, "structural"))
    (out / "ablation_modality.txt").write_text(ablation_table(results, "modality"))
    rows = ablation_rows(results)
    with (out / "ablation.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n")
    print(ablation_table(results, "structural") + "\n" + ablation_table(results, "modality"), end="")


def cmd_ccap(args, run) -> None:
    cfg = CcapConfig(**run["ccap"])
    res = select_threshold(_read_raster(Path(args.bf)), _read_raster(Path(args.bh)), cfg)
    out = Path(args.out)
    write_run_config(out, run)
    write_ccap_outputs(out, res, cfg)
    print(f"lambda* = {res.lam_star:.4f}; {res.n_clusters} clusters, {int(res.mask.sum())} urban cells")


def cmd_compare_events(args, run) -> None:
    cfg = CcapConfig(**run["ccap"])
    if not args.case:
        raise ConfigError("at least one --case is required")
    rows = []
    for city, pbf, pbh, qbf, qbh, r, c in args.case:
        try:
            center = (float(r), float(c))
        except ValueError:
            raise ConfigError(f"{city}: centre row/col must be numbers, got {r!r} {c!r}") from None
        pre = (_read_raster(Path(pbf)), _read_raster(Path(pbh)))
        post = (_read_raster(Path(qbf)), _read_raster(Path(qbh)))
        rows.append(event_compare(pre, post, center, args.radius, cfg, city=city, cell_size=args.cell_size))
    out = Path(args.out)
    write_run_config(out, run)
    write_event_csv(out / "events.csv", rows)
    write_event_json(out / "events.json", rows)
    print((out / "events.csv").read_text(), end="")


# -- parser --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--config", type=Path, help="JSON config (sections: model, train, ccap, seed)")
    p.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads (1 for bit-reproducible training)")
    if seed:
        p.add_argument("--seed", type=int, help="master seed (default 0)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=("geoformer", "cnn_baseline"))
    p.add_argument("--k", type=int, help="context cells per side (odd)")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--mlp-ratio", type=int)
    p.add_argument("--head-hidden", type=int)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--warmup", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--grad-clip", type=float)


def _ccap_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lam-lo", type=float)
    p.add_argument("--lam-hi", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--bh-floor", type=float)
    p.add_argument("--connectivity", type=int, choices=(4, 8))
    p.add_argument("--penalty", type=float)
    p.add_argument("--probabilities", choices=("area", "size_histogram"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geoformer", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"geoformer {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="footprints + channel rasters -> container")
    _common(p, seed=False)
    p.add_argument("--footprints", required=True, type=Path, help="NDJSON polygon features")
    p.add_argument("--rasters", required=True, type=Path, help="directory with <CHANNEL>.npy files")
    p.add_argument("--city", required=True)
    p.add_argument("--year", type=int, default=2022)
    p.add_argument("--x0", type=float, required=True, help="grid upper-left x (m)")
    p.add_argument("--y0", type=float, required=True, help="grid upper-left y (m)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="seeded synthetic cities -> container")
    _common(p)
    p.add_argument("--cities", type=int, default=3)
    p.add_argument("--rows", type=int, default=56)
    p.add_argument("--cols", type=int, default=56)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="radial-sector split manifest with boundary purge")
    _common(p)
    p.add_argument("--container", required=True, type=Path)
    p.add_argument("--k", type=int, default=5, help="context size the purge protects")
    p.add_argument("--ratios", type=float, nargs="+", default=[0.8, 0.1, 0.1])
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--container", required=True, type=Path)
    p.add_argument("--split", type=Path, help="split manifest CSV or its directory")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics, strata and trimming for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--container", required=True, type=Path)
    p.add_argument("--split", type=Path)
    p.add_argument("--k", type=int, help="expected context size; must match the checkpoint")
    p.add_argument("--variant", choices=("geoformer", "cnn_baseline"))
    p.add_argument("--trim-q", type=float, default=0.001)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the five ablations and emit both tables")
    _common(p)
    p.add_argument("--container", required=True, type=Path)
    p.add_argument("--split", type=Path)
    p.add_argument("--only", nargs="+", choices=ABLATIONS)
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ccap", help="urban mask and threshold from BF/BH rasters")
    _common(p, seed=False)
    p.add_argument("--bf", required=True, type=Path, help="BF grid (.npy)")
    p.add_argument("--bh", required=True, type=Path, help="BH grid (.npy)")
    _ccap_flags(p)
    p.set_defaults(func=cmd_ccap)

    p = sub.add_parser("compare-events", help="pre/post masked means per city")
    _common(p, seed=False)
    p.add_argument("--case", nargs=7, action="append",
                   metavar=("CITY", "PRE_BF", "PRE_BH", "POST_BF", "POST_BH", "ROW", "COL"))
    p.add_argument("--radius", type=float, default=1500.0, help="metres around the centre cell")
    p.add_argument("--cell-size", type=float, default=100.0)
    _ccap_flags(p)
    p.set_defaults(func=cmd_compare_events)
    return ap


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, GeoFormerError):
        return exc.exit_code
    if isinstance(exc, (CheckpointError, FileNotFoundError)):
        return 3
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "threads", None) is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run = resolve(args)
        with threadpool_limits(limits=args.threads):
            args.func(args, run)
    except (GeoFormerError, CheckpointError, FileNotFoundError) as exc:
        print(f"geoformer {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
