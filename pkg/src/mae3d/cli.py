"""Command-line entry point: ``mae3d <subcommand> [flags]``.

Exit codes: 0 success, 1 configuration / usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import data as dio
from . import downstream as ds
from . import geometry as geo
from . import autodiff as ad
from .config import ConfigError, load_configs, to_flat
from .model import MAE3D
from .training import evaluate_reconstruction, pretrain, prepare_batch

log = logging.getLogger("mae3d")

DEFAULT_CLASSES = "sphere,cube,cylinder,torus"
DEFAULT_RATIOS = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; we reserve 2 for runtime failures
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs", help="parent directory for the run directory")
    p.add_argument("--mask-strategy", choices=("random", "block"))
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser():
    parser = _Parser(prog="mae3d", description="Masked autoencoding for point clouds.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a synthetic dataset cache + manifest")
    _common(p)
    p.add_argument("--classes", default=DEFAULT_CLASSES)
    p.add_argument("--n", type=int, default=50, help="samples per class")
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--test-fraction", type=float, default=0.25)

    p = sub.add_parser("pretrain", help="masked point modeling pretraining")
    _common(p)
    p.add_argument("--data", help="directory written by synth-data (train split is used)")
    p.add_argument("--classes", default=DEFAULT_CLASSES, help="synthetic classes when --data is absent")
    p.add_argument("--n", type=int, default=2, help="synthetic samples per class when --data is absent")

    p = sub.add_parser("reconstruct", help="mask + reconstruct one cloud")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help=".xyz point file")
    p.add_argument("--force", action="store_true", help="skip the config hash check")

    for name, help_ in (("finetune", "fine-tune a classifier"), ("probe", "frozen linear probe"),
                        ("fewshot", "K-way N-shot linear probes")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--data", required=True, help="directory written by synth-data")
        p.add_argument("--ckpt", help="pretrained checkpoint (random init when absent)")
        p.add_argument("--subset", choices=("extractor",), default="extractor")
        if name == "fewshot":
            p.add_argument("--way", type=int, default=5)
            p.add_argument("--shot", type=int, default=10)
            p.add_argument("--episodes", type=int, default=10)

    p = sub.add_parser("ablate-masking", help="sweep masking strategy x ratio")
    _common(p)
    p.add_argument("--data", required=True, help="directory written by synth-data")
    p.add_argument("--ratios", default=DEFAULT_RATIOS)
    p.add_argument("--strategies", default="random,block")
    return parser


def _overrides(args):
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in (("seed", "seed"), ("mask_strategy", "mask_strategy"), ("mask_ratio", "mask_ratio"),
                      ("alpha", "alpha"), ("epochs", "epochs")):
        val = getattr(args, flag, None)
        if val is not None:
            out[key] = val
    return out


def resolve_configs(args):
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    return load_configs(text, _overrides(args))


def make_run_dir(parent, command, seed) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(parent) / f"{command}-{stamp}-{seed}"
    run, i = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}.{i}")
        i += 1
    run.mkdir(parents=True)
    return run


def _snapshot(run: Path, pre, down):
    (run / "config.txt").write_text(to_flat(pre, pre.model, down))


# ------------------------------------------------------------------ data helpers

def load_split(data_dir, split=None):
    """(clouds, labels) from a synth-data directory, optionally filtered by split."""
    d = Path(data_dir)
    clouds = dio.cache_read(d / "cache.bin")
    entries = dio.read_manifest(d / "manifest.csv")
    if len(entries) != len(clouds):
        raise dio.DataFormatError(f"manifest lists {len(entries)} samples, cache holds {len(clouds)}")
    keep = [i for i, e in enumerate(entries) if split is None or e.split == split]
    return [clouds[i] for i in keep], np.array([entries[i].label for i in keep], dtype=np.int64)


def _downstream_arrays(args, down):
    train, ytr = load_split(args.data, "train")
    test, yte = load_split(args.data, "test")
    return ds.as_batch(train, down.downstream_points), ytr, ds.as_batch(test, down.downstream_points), yte


def _load_ckpt(args, pre, down):
    """Extractor weights from ``--ckpt`` plus the model config they were trained with."""
    if not args.ckpt:
        return None, pre.model, "random"
    ck = ckpt_io.load(args.ckpt, subset="extractor+pos" if down.transfer_pos_embed else args.subset)
    model_cfg = load_configs(ck.config_text)[0].model if ck.config_text else pre.model
    return ck, model_cfg, "pretrained"


# ------------------------------------------------------------------ commands

def cmd_synth_data(args, pre, down, run):
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    clouds, manifest = dio.synth_dataset(classes, args.n, args.points, rng=pre.seed)
    train, _ = dio.split_dataset(clouds, args.test_fraction, rng=[pre.seed, 1])
    train_ids = {id(c) for c in train}
    for c, e in zip(clouds, manifest):
        e.split = "train" if id(c) in train_ids else "test"
    dio.cache_write(clouds, run / "cache.bin")
    dio.write_manifest(manifest, run / "manifest.csv")
    print(f"wrote {len(clouds)} clouds ({len(train)} train) to {run}")


def _first_points(clouds, n):
    """Keep the first ``n`` points of each cloud (stored clouds are in random order)."""
    out = []
    for c in clouds:
        if c.points.shape[0] < n:
            raise ValueError(f"cloud has {c.points.shape[0]} points, n_points is {n}")
        out.append(geo.PointCloud(c.points[:n], c.label))
    return out


def _pretrain_clouds(args, pre):
    if args.data:
        clouds, _ = load_split(args.data, "train")
        return _first_points(clouds, pre.n_points)
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    return dio.synth_dataset(classes, args.n, pre.n_points, rng=pre.seed)[0]


def cmd_pretrain(args, pre, down, run):
    clouds = _pretrain_clouds(args, pre)
    res = pretrain(clouds, pre, metrics_path=run / "metrics.csv",
                   progress=lambda e, row: log.info("epoch %d loss %.5f", e, row["loss_total"]))
    ckpt_io.save(run / "last.ckpt", res.model, to_flat(pre, pre.model), pre.model.hash(), pre.epochs,
                 res.optimizer, {"alpha": pre.alpha})
    ev = evaluate_reconstruction(res.model, clouds, pre, seed=pre.seed)
    (run / "summary.json").write_text(json.dumps(ev, indent=1) + "\n")
    print(f"final cd_center {ev['cd_center']:.6g} cd_fine {ev['cd_fine']:.6g}; checkpoint {run / 'last.ckpt'}")


def _model_from_ckpt(path, force, overrides):
    ck = ckpt_io.load(path)
    pre, _ = load_configs(ck.config_text, overrides)
    model = MAE3D(pre.model, seed=pre.seed)
    ckpt_io.restore(model, ck, force=force)
    return model, pre


def cmd_reconstruct(args, pre, down, run):
    model, pre = _model_from_ckpt(args.ckpt, args.force, _overrides(args))
    _snapshot(run, pre, down)
    raw = dio.read_xyz(args.input).points
    if raw.shape[0] < pre.n_points:
        raise ValueError(f"{args.input} has {raw.shape[0]} points, the model expects {pre.n_points}")
    cloud = raw[:pre.n_points]
    rng = np.random.default_rng([pre.seed, 4])
    batch = prepare_batch([cloud], pre, rng, None)
    model.eval()
    with ad.no_grad():
        out = model(batch)
    output = out.pred_points.data[0].astype(np.float64)
    gt = batch.points[0]
    vis = batch.local_patches[0, batch.visible[0]] + batch.centers[0, batch.visible[0]][:, None, :]
    dio.write_xyz(cloud, run / "input.xyz")
    dio.write_xyz(vis.reshape(-1, 3), run / "visible.xyz")
    dio.write_xyz(output, run / "output.xyz")
    dio.write_xyz(gt, run / "ground_truth.xyz")
    cd = geo.chamfer_distance(output, gt)
    (run / "reconstruction.json").write_text(json.dumps(
        {"cd_fine": cd, "mask_strategy": pre.mask_strategy, "mask_ratio": pre.mask_ratio,
         "visible_patches": batch.visible[0].tolist()}, indent=1) + "\n")
    print(f"cd_fine {cd:.6g}; outputs in {run}")


def _emit(run, rows):
    ds.write_results(run / "results.csv", rows)
    print(ds.summary_table(rows))


def cmd_finetune(args, pre, down, run):
    ck, model_cfg, init = _load_ckpt(args, pre, down)
    xtr, ytr, xte, yte = _downstream_arrays(args, down)
    if args.epochs is not None:
        down.finetune_epochs = args.epochs
    res = ds.finetune_run(xtr, ytr, xte, yte, model_cfg, down, ck)
    with open(run / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "accuracy"])
        for i, (l, a) in enumerate(zip(res.losses, res.accuracies)):
            w.writerow([i, repr(l), repr(a)])
    _emit(run, [{"run": run.name, "scheme": "finetune", "init": init, "accuracy": res.best}])


def cmd_probe(args, pre, down, run):
    ck, model_cfg, init = _load_ckpt(args, pre, down)
    xtr, ytr, xte, yte = _downstream_arrays(args, down)
    bb = ds.build_backbone(model_cfg, down.seed, ck, down.transfer_pos_embed)
    res = ds.linear_probe_run(xtr, ytr, xte, yte, bb, down)
    _emit(run, [{"run": run.name, "scheme": "linear_probe", "init": init, "accuracy": res.accuracy}])


def cmd_fewshot(args, pre, down, run):
    ck, model_cfg, init = _load_ckpt(args, pre, down)
    clouds, labels = load_split(args.data)
    bb = ds.build_backbone(model_cfg, down.seed, ck, down.transfer_pos_embed)
    feats = ds.extract_features(bb, ds.as_batch(clouds, down.downstream_points))
    res = ds.fewshot_eval(feats, labels, args.way, args.shot, down, episodes=args.episodes, seed=pre.seed)
    scheme = f"{args.way}way{args.shot}shot"
    rows = [{"run": f"{run.name}/ep{i}", "scheme": scheme, "init": init, "accuracy": a}
            for i, a in enumerate(res.accuracies)]
    _emit(run, rows)
    print(f"{scheme} {init}: {res}")


def cmd_ablate_masking(args, pre, down, run):
    try:
        ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    except ValueError:
        raise ConfigError(f"bad --ratios {args.ratios!r}") from None
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    train, _ = load_split(args.data, "train")
    test, yte = load_split(args.data, "test")
    ytr = np.array([c.label for c in train], dtype=np.int64)
    xtr, xte = ds.as_batch(train, down.downstream_points), ds.as_batch(test, down.downstream_points)
    rows = []
    for strategy in strategies:
        for ratio in ratios:
            cfg = load_configs(to_flat(pre, pre.model), {"mask_strategy": strategy, "mask_ratio": ratio})[0]
            res = pretrain(_first_points(train, cfg.n_points), cfg)
            cd = evaluate_reconstruction(res.model, _first_points(test, cfg.n_points), cfg, seed=cfg.seed)["cd_fine"]
            bb = ds.build_backbone(cfg.model, down.seed)
            bb.extractor.load_state_dict(res.model.extractor.state_dict())
            acc = ds.linear_probe_run(xtr, ytr, xte, yte, bb, down).accuracy
            rows.append({"strategy": strategy, "ratio": ratio, "cd_fine": cd, "probe_accuracy": acc})
            log.info("%s %.2f cd %.5f probe %.3f", strategy, ratio, cd, acc)
    with open(run / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["strategy", "ratio", "cd_fine", "probe_accuracy"])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    for r in rows:
        print(f"{r['strategy']:<7} {r['ratio']:.2f}  cd {r['cd_fine']:.5f}  probe {100 * r['probe_accuracy']:.1f}%")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "reconstruct": cmd_reconstruct,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "fewshot": cmd_fewshot,
    "ablate-masking": cmd_ablate_masking,
}


def _thread_limit():
    raw = os.environ.get("MAE3D_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MAE3D_THREADS must be an integer, got {raw!r}") from None
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    logging.basicConfig(level=os.environ.get("MAE3D_LOG", "WARNING").upper(), format="%(message)s")
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "mae3d: error: a subcommand is required")
        pre, down = resolve_configs(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        with _thread_limit():
            run = make_run_dir(args.out, args.command, pre.seed)
            _snapshot(run, pre, down)
            COMMANDS[args.command](args, pre, down, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure inside a run is reported, not raised
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
