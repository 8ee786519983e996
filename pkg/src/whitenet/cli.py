"""Experiment driver.

Commands:
  train            one training run -> metrics.csv, config.json,
                   manifest.json, checkpoint.bin
  diagnose-fisher  conditioning experiment: sgd / rmsprop / prong runs with
                   per-layer condition-number series and before/after
                   middle-layer Fisher heatmaps
  grid             Cartesian product over the config's "grid" axes
  replay           merge metrics files into plot-ready LOCF tables
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, data as data_mod, fisher, net
from .checkpoint import save_checkpoint
from .config import (
    PRESETS,
    build_train_config,
    config_hash,
    resolve_config,
    set_dotted,
    validate_config,
)
from .errors import ConfigError, DivergenceError, SingularMatrixError
from .metrics import read_metrics, replay, write_metrics, write_table
from .optim import train as run_train


def build_dataset(cfg: dict):
    """Materialize (train, val, name) from the dataset section. MNIST kinds
    fall back to the seeded synthetic generators when the IDX files are not
    configured and ``fallback_synthetic`` is set."""
    d = cfg["dataset"]
    kind = d["kind"]
    autoencode = d.get("autoencode", False)
    seed = d.get("seed", 0)
    n = d.get("n", 4096)

    if kind in ("mnist", "mnist10x10"):
        images, labels = d.get("images"), d.get("labels")
        if images and labels and Path(images).exists() and Path(labels).exists():
            ds = data_mod.load_idx(images, labels)
            if kind == "mnist10x10":
                ds = data_mod.downsample(ds)
            if autoencode:
                ds = data_mod.Dataset(ds.inputs, ds.inputs.copy(), name=ds.name)
            elif d.get("n_classes", 10) == 2:
                # binary heads: digits 5-9 vs 0-4
                digit = ds.targets.argmax(axis=1)
                ds = data_mod.Dataset(
                    ds.inputs, (digit >= 5).astype(float)[:, None], name=ds.name + "-binary"
                )
        elif d.get("fallback_synthetic", False):
            side = d.get("side", 10)
            if autoencode:
                ds = data_mod.synthetic_images(n, side, seed)
            else:
                ds = data_mod.synthetic_classification(
                    n,
                    side * side,
                    seed,
                    spectrum_decay=d.get("spectrum_decay", 1.0),
                    n_classes=d.get("n_classes", 2),
                )
        else:
            raise ConfigError(
                f"dataset kind {kind!r} needs 'images'/'labels' paths "
                "(or fallback_synthetic: true)"
            )
    elif kind == "synthetic_images":
        ds = data_mod.synthetic_images(n, d.get("side", 10), seed)
    elif kind == "synthetic_gaussian":
        dim = d.get("dim", 16)
        ds = data_mod.synthetic_gaussian(n, dim, 0.0, np.eye(dim), seed)
    else:  # synthetic_classification
        ds = data_mod.synthetic_classification(
            n,
            d.get("dim", 16),
            seed,
            spectrum_decay=d.get("spectrum_decay", 1.0),
            n_classes=d.get("n_classes", 2),
        )
    if autoencode and not np.array_equal(ds.targets, ds.inputs):
        ds = data_mod.Dataset(ds.inputs, ds.inputs.copy(), name=ds.name)
    val_size = d.get("val_size", 0)
    train_ds, val_ds = data_mod.split_train_val(ds, min(val_size, ds.n - 1), seed)
    return train_ds, val_ds, ds.name


def build_model(cfg: dict) -> net.Model:
    m = cfg["model"]
    spec = net.NetSpec.mlp(m["sizes"], hidden=m.get("hidden", "tanh"), head=m.get("head", "sigmoid"))
    seed = cfg["train"].get("seed", 0)
    theta = net.init_fan_in(spec, seed)
    optimizer = cfg["optimizer"]
    if optimizer in ("prong", "prong_plus"):
        phi = net.WhiteningCoeffs.identity(spec)
        return net.Model.whitened(spec, net.project_to_whitened(theta, phi), phi)
    if optimizer == "bn":
        return net.Model.batch_norm(spec, theta)
    return net.Model.canonical(spec, theta)


def _write_manifest(out, cfg, *, seed, status, result=None, extra=None):
    manifest = {
        "version": __version__,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "status": status,
    }
    if result is not None:
        manifest["timing"] = result.timing
        manifest["reparam_steps"] = result.reparam_steps
        if result.divergence:
            manifest["divergence"] = result.divergence
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _run_one(cfg: dict, out: Path, *, row_callback=None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    train_ds, val_ds, ds_name = build_dataset(cfg)
    model = build_model(cfg)
    tcfg = build_train_config(cfg)
    loss_kind = cfg["model"].get("loss", "squared_error")
    status, result = "completed", None
    try:
        result = run_train(
            model,
            train_ds,
            tcfg,
            optimizer=cfg["optimizer"],
            loss_kind=loss_kind,
            val_data=val_ds,
            row_callback=row_callback,
        )
    except DivergenceError as exc:
        status = "diverged"
        result = exc.result
    write_metrics(out / "metrics.csv", result.rows)
    save_checkpoint(out / "checkpoint.bin", model, seed=tcfg.seed, step=tcfg.max_updates)
    _write_manifest(out, cfg, seed=tcfg.seed, status=status, result=result,
                    extra={"dataset": ds_name})
    return status, result


def cmd_train(cfg: dict, out: Path) -> int:
    status, result = _run_one(cfg, out)
    last = result.rows[-1] if result.rows else None
    if last is not None:
        print(
            f"{cfg['name']}: {status} at step {last.step}, train_loss "
            f"{last.train_loss:.6g}, eval_loss {last.eval_loss:.6g}"
        )
    frac = result.timing.get("reparam_fraction", 0.0)
    if frac:
        print(f"whitening reparametrization fraction of runtime: {frac:.1%}")
    return 0 if status == "completed" else 2


def cmd_diagnose_fisher(cfg: dict, out: Path) -> int:
    """Conditioning experiment across sgd, rmsprop and prong.

    Every run starts from the same seeded model. Condition numbers are
    measured on a fixed probe subset, relative to the initial (pre-whitening)
    values; prong metrics rows also carry the middle-layer ratio."""
    out.mkdir(parents=True, exist_ok=True)
    train_ds, val_ds, ds_name = build_dataset(cfg)
    probe = train_ds.inputs[: min(512, train_ds.n)]
    baseline_model = build_model({**cfg, "optimizer": "sgd"})
    kinds = ("factorized",)
    baseline_rows = fisher.conditioning_report(baseline_model, probe, kinds=kinds)
    baselines = {(r.layer, r.kind): r.cond for r in baseline_rows}
    middle = baseline_model.spec.depth // 2

    # Fig-style heatmaps: exact middle-layer block before/after whitening
    before_block = fisher.exact_fisher_block(baseline_model, probe, middle)
    np.savetxt(out / "fisher_middle_before.csv", before_block.matrix, delimiter=",")
    white = build_model({**cfg, "optimizer": "prong"})
    from .optim import prong_reparametrize

    prong_reparametrize(
        white.params, white.phi, white.spec, probe, cfg["train"].get("eigen_epsilon", 0.0)
    )
    after_block = fisher.exact_fisher_block(white, probe, middle)
    np.savetxt(out / "fisher_middle_after.csv", after_block.matrix, delimiter=",")

    summary = {}
    for optimizer in ("sgd", "rmsprop", "prong"):
        run_cfg = validate_config({**cfg, "optimizer": optimizer, "name": f"{cfg['name']}-{optimizer}"})
        if optimizer != "prong":
            run_cfg["train"]["momentum"] = 0.0
        series = []

        def on_row(model, step, _series=series):
            rows = fisher.conditioning_report(model, probe, kinds=kinds, baselines=baselines)
            for r in rows:
                _series.append((step, r))
            mid = [r for r in rows if r.layer == middle][0]
            return {"cond_ratio": mid.cond_ratio}

        status, _ = _run_one(run_cfg, out / optimizer, row_callback=on_row)
        header = ["step", "layer", "kind", "lambda_max", "lambda_min", "cond",
                  "cond_ratio_to_initial"]
        table = [
            [step, r.layer, r.kind, r.lambda_max, r.lambda_min, r.cond, r.cond_ratio]
            for step, r in series
        ]
        write_table(out / f"conditioning_{optimizer}.csv", header, table)
        mid_ratios = [r.cond_ratio for step, r in series
                      if r.layer == middle and r.cond_ratio is not None]
        summary[optimizer] = min(mid_ratios) if mid_ratios else None
        print(f"{optimizer}: best middle-layer cond ratio "
              f"{summary[optimizer]:.3e}" if summary[optimizer] is not None else optimizer)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return 0


def cmd_grid(cfg: dict, out: Path) -> int:
    axes = cfg.get("grid") or {}
    if not axes:
        raise ConfigError("grid command needs a non-empty 'grid' section")
    keys = sorted(axes)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    best = None
    for i, values in enumerate(itertools.product(*(axes[k] for k in keys))):
        cell_cfg = {k: v for k, v in cfg.items() if k != "grid"}
        cell_cfg = json.loads(json.dumps(cell_cfg))  # deep copy
        for key, value in zip(keys, values):
            set_dotted(cell_cfg, key, value)
        cell_cfg["name"] = f"{cfg['name']}-cell{i}"
        cell_cfg = validate_config(cell_cfg)
        cell_out = out / f"cell_{i}"
        try:
            status, result = _run_one(cell_cfg, cell_out)
        except ConfigError:
            raise
        train_losses = [r.train_loss for r in result.rows] or [float("nan")]
        record = {
            "cell": i,
            **dict(zip(keys, values)),
            "final_train_loss": train_losses[-1],
            "best_train_loss": min(train_losses),
            "final_eval_loss": result.rows[-1].eval_loss if result.rows else float("nan"),
            "diverged": int(status == "diverged"),
            "out_dir": str(cell_out),
        }
        rows.append(record)
        if not record["diverged"] and (best is None or record["best_train_loss"] < best["best_train_loss"]):
            best = record
    header = list(rows[0].keys())
    write_table(out / "summary.csv", header, [[r[k] for k in header] for r in rows])
    (out / "best.json").write_text(json.dumps(best, indent=2))
    if best is not None:
        axis_desc = ", ".join(f"{k}={best[k]}" for k in keys)
        print(f"best cell {best['cell']}: {axis_desc} "
              f"(best train loss {best['best_train_loss']:.6g})")
    return 0


def cmd_replay(paths, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    runs = [(Path(p).parent.name or Path(p).stem, read_metrics(p)) for p in paths]
    by_step, by_time = replay(runs)
    write_table(out / "replay_by_step.csv", by_step[0], by_step[1])
    write_table(out / "replay_by_wallclock.csv", by_time[0], by_time[1])
    print(f"merged {len(runs)} runs -> {out}/replay_by_step.csv, replay_by_wallclock.csv")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(
        prog="whitenet",
        description="Whitened-network training lab: amortized natural-gradient "
        "descent, first-order baselines, and Fisher conditioning diagnostics.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file (merged over --preset)")
            p.add_argument("--preset", choices=sorted(PRESETS), help="named preset")
            p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("train", help="run one training configuration"))
    common(sub.add_parser("diagnose-fisher", help="conditioning experiment"))
    common(sub.add_parser("grid", help="grid search over config['grid'] axes"))
    rp = sub.add_parser("replay", help="merge metrics.csv files")
    rp.add_argument("inputs", nargs="+", help="metrics.csv paths")
    common(rp, config=False)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return cmd_replay(args.inputs, Path(args.out))
        overrides = {}
        if args.seed is not None:
            overrides["train.seed"] = args.seed
        cfg = resolve_config(args.preset, args.config, overrides)
        out = Path(args.out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "diagnose-fisher":
            return cmd_diagnose_fisher(cfg, out)
        if args.command == "grid":
            return cmd_grid(cfg, out)
        raise AssertionError(args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SingularMatrixError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
