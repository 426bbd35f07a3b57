"""Command-line surface.

Commands: ``search``, ``derive``, ``train``, ``eval``, ``synth-data``,
``gradcheck``, ``export-dot``.  Shared flags: ``--config <path>``,
``--seed <u64>``, ``--out <dir>``, ``--workers <n>``.  Verbosity comes
from the ``SPDNAS_LOG`` environment variable (error|info|debug).

Exit codes: 0 success, 1 gradcheck failure, 2 configuration error,
3 data error, 4 numeric abort.

Artifact-producing commands write a ``manifest.json`` embedding the exact
configuration, seed, and version string; re-running with
``--config manifest.json`` reproduces genotype and metrics files
bit-for-bit.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, bilevel, checks, data, search_space as ss
from .errors import (ConfigError, ContractError, DataError, DomainError,
                     NumericError, ShapeError, SpdnasError)
from .simplex import apply_activation

log = logging.getLogger("spdnas")

DEFAULT_CONFIG = {
    "seed": 0,
    "workers": 0,  # 0 = number of cores
    "data": {
        "path": None,
        "synth": {"classes": 3, "dim": 20, "per_class": 300, "sigma": 0.5},
        "split": {"fractions": [0.5, 0.25, 0.25], "seed": None},
    },
    "model": {
        "input_dim": 20,
        "stem_dim": 20,
        "classes": 3,
        "channels": 1,
        "node_count": 5,
        "cells": ["reduction", "normal"],
        "reduction_factor": 2,
        "reeig_eps": 1e-4,
        "bn_momentum": 0.9,
        "wrp_activation": "softmax",
    },
    "search": {
        "epochs": 10,
        "batch_size": 30,
        "eta": 0.025,
        "alpha_lr": 3e-4,
        "alpha_betas": [0.5, 0.999],
        "alpha_weight_decay": 1e-3,
        "order": "second",
        "topk": 2,
        "activation": "sparsemax",
        "wfm_iters": 2,
        "wfm_tol": 1e-6,
        "momentum": 0.9,
        "delta_norm": "tangent",
    },
    "train": {
        "epochs": 50,
        "batch_size": 30,
        "lr": 0.025,
        "momentum": 0.9,
        "wfm_iters": 2,
        "wfm_tol": 1e-6,
    },
}


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("SPDNAS_LOG", "info"))
    if level is None:
        raise ConfigError(
            f"SPDNAS_LOG must be error|info|debug, got {os.environ['SPDNAS_LOG']!r}"
        )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"spdnas-{__version__}+g{out.stdout.strip()}"
    except OSError:
        pass
    return f"spdnas-{__version__}"


# ---------------------------------------------------------------------------
# configuration

def _merge(base: dict, override: dict, path: str, problems: list) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            problems.append(f"unknown config field {path}{key!r}")
            continue
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{path}{key}.", problems)
        else:
            out[key] = val
    return out


def load_config(path: str | None, seed_override: int | None = None,
                workers_override: int | None = None) -> dict:
    """Load, default-fill, and validate a run configuration.

    A manifest file (recognized by its embedded "config" key) can be passed
    directly; its configuration is extracted so runs are replayable.  All
    invalid fields are reported together.
    """
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at byte {e.pos}") from e
        if "config" in user and isinstance(user["config"], dict):
            user = user["config"]  # manifest replay
    problems: list[str] = []
    cfg = _merge(DEFAULT_CONFIG, user, "", problems)
    if seed_override is not None:
        cfg["seed"] = seed_override
    if workers_override is not None:
        cfg["workers"] = workers_override

    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        problems.append("seed must be a nonnegative integer")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 0:
        problems.append("workers must be a nonnegative integer")
    try:
        data.SplitSpec(tuple(cfg["data"]["split"]["fractions"]), 0)
    except (ContractError, TypeError) as e:
        problems.append(f"data.split: {e}")
    sy = cfg["data"]["synth"]
    if sy["classes"] < 2 or sy["dim"] < 2 or sy["per_class"] < 1:
        problems.append("data.synth needs classes >= 2, dim >= 2, per_class >= 1")
    try:
        model_config(cfg).cell_dims()
    except (ConfigError, TypeError) as e:
        problems.append(f"model: {e}")
    try:
        search_config(cfg)
    except (ConfigError, TypeError) as e:
        problems.append(f"search: {e}")
    try:
        train_config(cfg)
    except (ConfigError, TypeError) as e:
        problems.append(f"train: {e}")
    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(problems))
    return cfg


def model_config(cfg: dict) -> ss.ModelConfig:
    m = cfg["model"]
    return ss.ModelConfig(
        input_dim=m["input_dim"], stem_dim=m["stem_dim"], classes=m["classes"],
        channels=m["channels"], node_count=m["node_count"],
        cells=tuple(m["cells"]), reduction_factor=m["reduction_factor"],
        reeig_eps=m["reeig_eps"], bn_momentum=m["bn_momentum"],
        wrp_activation=m["wrp_activation"])


def resolved_workers(cfg: dict) -> int:
    return cfg["workers"] if cfg["workers"] > 0 else (os.cpu_count() or 1)


def search_config(cfg: dict) -> bilevel.SearchConfig:
    s = cfg["search"]
    return bilevel.SearchConfig(
        eta=s["eta"], alpha_lr=s["alpha_lr"], alpha_betas=tuple(s["alpha_betas"]),
        alpha_weight_decay=s["alpha_weight_decay"], order=s["order"],
        epochs=s["epochs"], batch_size=s["batch_size"], topk=s["topk"],
        activation=s["activation"], seed=cfg["seed"], wfm_iters=s["wfm_iters"],
        wfm_tol=s["wfm_tol"], momentum=s["momentum"], delta_norm=s["delta_norm"],
        workers=resolved_workers(cfg))


def train_config(cfg: dict) -> bilevel.TrainConfig:
    t = cfg["train"]
    return bilevel.TrainConfig(
        lr=t["lr"], momentum=t["momentum"], epochs=t["epochs"],
        batch_size=t["batch_size"], seed=cfg["seed"],
        wfm_iters=t["wfm_iters"], wfm_tol=t["wfm_tol"],
        workers=resolved_workers(cfg))


def load_splits(cfg: dict) -> data.Splits:
    d = cfg["data"]
    if d["path"]:
        samples = data.load_dataset(d["path"], workers=resolved_workers(cfg))
        if not samples:
            raise DataError(f"{d['path']}: dataset is empty")
    else:
        sy = d["synth"]
        samples = data.synth_generate(sy["classes"], sy["dim"], sy["per_class"],
                                      sy["sigma"], cfg["seed"])
    split_seed = d["split"].get("seed")
    spec = data.SplitSpec(tuple(d["split"]["fractions"]),
                          cfg["seed"] if split_seed is None else split_seed)
    return data.split_dataset(samples, spec)


# ---------------------------------------------------------------------------
# artifact writing

def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _fmt(x) -> str:
    return repr(float(x))


def _write_metrics_csv(path: Path, rows) -> None:
    lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
    for r in rows:
        lines.append(",".join([str(r["epoch"]), _fmt(r["train_loss"]),
                               _fmt(r["train_acc"]), _fmt(r["val_loss"]),
                               _fmt(r["val_acc"])]))
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_alpha_history(path: Path, history, model, activation: str) -> None:
    lines = ["epoch,cell_kind,edge_src,edge_dst,op,logit,weight"]
    specs = {s.kind: s for s in model.cell_specs}
    for snap in history:
        for kind in sorted(snap["alphas"]):
            spec = specs[kind]
            edges = spec.edges()
            for e_idx, logits in enumerate(snap["alphas"][kind]):
                i, j = edges[e_idx]
                w = apply_activation(activation, logits)
                for t, tag in enumerate(spec.edge_candidates(i, j)):
                    lines.append(",".join([str(snap["epoch"]), kind, str(i),
                                           str(j), tag, _fmt(logits[t]),
                                           _fmt(w[t])]))
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_alphas_json(path: Path, model) -> None:
    payload = {kind: [p.value.tolist() for p in plist]
               for kind, plist in model.alphas.items()}
    _write_json(path, payload)


def _manifest(command: str, cfg: dict, wall: float, extra: dict) -> dict:
    out = {
        "command": command,
        "version": version_string(),
        "seed": cfg["seed"],
        "config": cfg,
        "wall_time_s": wall,
    }
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_search(args) -> int:
    cfg = load_config(args.config, args.seed, args.workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = load_splits(cfg)
    mcfg = model_config(cfg)
    scfg = search_config(cfg)
    if splits.train and splits.train[0].matrix.shape[0] != mcfg.input_dim:
        raise ConfigError(
            f"data dimension {splits.train[0].matrix.shape[0]} does not match "
            f"model input_dim {mcfg.input_dim}"
        )
    net = ss.Supernet(mcfg, data.substream(cfg["seed"], "init"), scfg.activation)
    t0 = time.time()
    genotype, history, metrics = bilevel.search_loop(splits, net, scfg)
    wall = time.time() - t0
    _write_json(out_dir / "genotype.json", genotype.to_json_dict())
    _write_alpha_history(out_dir / "alpha_history.csv", history, net, scfg.activation)
    _write_alphas_json(out_dir / "alphas.json", net)
    report = ss.param_report(net.weight_params())
    manifest = _manifest("search", cfg, wall, {
        "metrics": metrics,
        "genotype": genotype.to_json_dict(),
        "param_report": report,
        "artifacts": {"genotype": "genotype.json",
                      "alpha_history": "alpha_history.csv",
                      "alphas": "alphas.json"},
    })
    _write_json(out_dir / "manifest.json", manifest)
    log.info("search finished in %.1fs; artifacts in %s", wall, out_dir)
    print(f"genotype written to {out_dir / 'genotype.json'}")
    return 0


def cmd_derive(args) -> int:
    cfg = load_config(args.config, args.seed, args.workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        alphas = json.loads(Path(args.alphas).read_text())
    except OSError as e:
        raise DataError(f"cannot read alphas {args.alphas}: {e}") from e
    mcfg = model_config(cfg)
    scfg = search_config(cfg)
    net = ss.Supernet(mcfg, data.substream(cfg["seed"], "init"), scfg.activation)
    for kind, plist in net.alphas.items():
        if kind not in alphas or len(alphas[kind]) != len(plist):
            raise ConfigError(f"alphas file does not cover cell kind {kind!r}")
        for p, vals in zip(plist, alphas[kind]):
            arr = np.asarray(vals, dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ConfigError(f"alpha vector for {p.name} has shape {arr.shape}")
            p.value = arr
    genotype = net.derive_genotype(scfg.topk, scfg.activation)
    _write_json(out_dir / "genotype.json", genotype.to_json_dict())
    print(f"genotype written to {out_dir / 'genotype.json'}")
    return 0


def _load_genotype(path: str) -> ss.Genotype:
    try:
        blob = json.loads(Path(path).read_text())
    except OSError as e:
        raise DataError(f"cannot read genotype {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at byte {e.pos}") from e
    return ss.Genotype.from_json_dict(blob)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed, args.workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    genotype = _load_genotype(args.genotype)
    splits = load_splits(cfg)
    tcfg = train_config(cfg)
    mcfg = ss.model_config_from_genotype(
        genotype,
        reeig_eps=cfg["model"]["reeig_eps"],
        bn_momentum=cfg["model"]["bn_momentum"],
        wrp_activation=cfg["model"]["wrp_activation"])
    if splits.train and splits.train[0].matrix.shape[0] != mcfg.input_dim:
        raise ConfigError(
            f"data dimension {splits.train[0].matrix.shape[0]} does not match "
            f"genotype input dim {mcfg.input_dim}"
        )
    net = ss.DiscreteNet(mcfg, genotype, data.substream(cfg["seed"], "train-init"))
    t0 = time.time()
    metrics, test_loss, test_acc = bilevel.train_loop(splits, net, tcfg)
    wall = time.time() - t0
    _write_metrics_csv(out_dir / "metrics.csv", metrics)
    bilevel.save_checkpoint(out_dir / "checkpoint.bin", bilevel.model_state(net))
    manifest = _manifest("train", cfg, wall, {
        "metrics": metrics,
        "test_loss": test_loss,
        "test_accuracy": test_acc,
        "genotype": genotype.to_json_dict(),
        "param_report": ss.param_report(net.weight_params()),
        "artifacts": {"metrics": "metrics.csv", "checkpoint": "checkpoint.bin"},
    })
    _write_json(out_dir / "manifest.json", manifest)
    print(f"test_accuracy {test_acc!r}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed, args.workers)
    genotype = _load_genotype(args.genotype)
    splits = load_splits(cfg)
    tcfg = train_config(cfg)
    mcfg = ss.model_config_from_genotype(genotype)
    net = ss.DiscreteNet(mcfg, genotype, data.substream(cfg["seed"], "train-init"))
    bilevel.load_model_state(net, bilevel.load_checkpoint(args.checkpoint))
    test_loss, test_acc = bilevel.evaluate(net, splits.test, tcfg)
    print(f"test_loss {test_loss!r}")
    print(f"test_accuracy {test_acc!r}")
    return 0


def cmd_synth_data(args) -> int:
    cfg = load_config(args.config, args.seed, args.workers)
    out_dir = Path(args.out)
    sy = cfg["data"]["synth"]
    t0 = time.time()
    samples = data.synth_generate(sy["classes"], sy["dim"], sy["per_class"],
                                  sy["sigma"], cfg["seed"])
    data.save_dataset(samples, out_dir, classes=sy["classes"])
    manifest = _manifest("synth-data", cfg, time.time() - t0, {
        "artifacts": {"index": "index.json"},
        "n_samples": len(samples),
    })
    _write_json(out_dir / "manifest.json", manifest)
    print(f"wrote {len(samples)} samples to {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    ok, results = checks.run_suite(seed=args.seed if args.seed is not None else 0)
    for name, rep in results:
        status = "PASS" if rep.ok(checks.DEFAULT_TOL) else "FAIL"
        print(f"{status} {name}: worst rel err {rep.max_rel_err:.3e}")
    if not ok:
        failing = [n for n, r in results if not r.ok(checks.DEFAULT_TOL)]
        print(f"gradcheck FAILED for: {', '.join(failing)}")
        return 1
    return 0


def cmd_export_dot(args) -> int:
    genotype = _load_genotype(args.genotype)
    text = ss.export_dot(genotype)
    if args.out_file:
        _atomic_write(Path(args.out_file), text)
        print(f"DOT written to {args.out_file}")
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spdnas", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config or manifest")
        sp.add_argument("--seed", type=int, default=None, help="master seed override")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--workers", type=int, default=None,
                        help="batch-evaluation fan-out (default: cores)")

    sp = sub.add_parser("search", help="run the bi-level architecture search")
    common(sp)
    sp.set_defaults(fn=cmd_search)

    sp = sub.add_parser("derive", help="derive a genotype from saved logits")
    common(sp)
    sp.add_argument("--alphas", required=True, help="alphas.json from a search run")
    sp.set_defaults(fn=cmd_derive)

    sp = sub.add_parser("train", help="train a derived genotype from scratch")
    common(sp)
    sp.add_argument("--genotype", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(sp)
    sp.add_argument("--genotype", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("synth-data", help="generate a synthetic dataset")
    common(sp)
    sp.set_defaults(fn=cmd_synth_data)

    sp = sub.add_parser("gradcheck", help="run the gradient verification suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("export-dot", help="render a genotype as DOT text")
    sp.add_argument("--genotype", required=True)
    sp.add_argument("--out-file", default=None)
    sp.set_defaults(fn=cmd_export_dot)
    return p


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (ConfigError, ContractError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (NumericError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except SpdnasError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
