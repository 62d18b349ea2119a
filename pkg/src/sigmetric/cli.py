"""Command line entry point.

    sigmetric {encode,train,eval,ablate,export-embeddings} --config PATH
              [--override KEY=VALUE ...] [--out PATH] [--seed N]

The config file (JSON or TOML) holds the training options at top level
(``weights``, ``lr``, ``batch_size`` ...) plus data locations:

    manifest     JSON-lines dataset manifest
    protocol     split protocol JSON file, or "ntu" for the built-in split
    aux_keep     optional: keep only this many auxiliary classes
    checkpoint   model file written by ``train`` and read by ``eval``
    signals      list of signal CSV files for ``encode`` (fused when >1)
    modalities   optional modality tag per signal file (default: file stem)
    history_csv  optional per-epoch loss CSV written by ``train``
    pca_out      optional 2-d projection TSV written by ``export-embeddings``

Exit status: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

from .config import TrainConfig
from .encoder import encode, export_png
from .errors import ConfigError, SigmetricError
from .oneshot import (
    evaluate,
    export_embeddings,
    load_protocol,
    ntu_oneshot_split,
    pca_project,
    reduced_aux_split,
)
from .signal_io import fuse_all, load_manifest, load_signal_csv
from .trainer import ImageCache, load_checkpoint, save_checkpoint, save_tensor_container, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

COMMANDS = ("encode", "train", "eval", "ablate", "export-embeddings")
IO_DEFAULTS = {
    "manifest": None,
    "protocol": None,
    "aux_keep": None,
    "checkpoint": None,
    "signals": [],
    "modalities": [],
    "history_csv": None,
    "pca_out": None,
}
ABLATION_WEIGHTS = ((1.0, 0.0), (0.0, 1.0), (0.5, 0.5))
ABLATION_MINERS = ("standard", "literal-eq3")


class UsageError(Exception):
    pass


def default_config() -> dict:
    cfg = TrainConfig().to_dict()
    cfg.update(copy.deepcopy(IO_DEFAULTS))
    return cfg


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    # relative data paths are relative to the config file
    for key in ("manifest", "protocol", "checkpoint", "history_csv", "pca_out"):
        value = data.get(key)
        if isinstance(value, str) and value != "ntu" and not Path(value).is_absolute():
            data[key] = str(path.parent / value)
    if isinstance(data.get("signals"), list):
        data["signals"] = [s if Path(s).is_absolute() else str(path.parent / s)
                           for s in data["signals"]]
    return data


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise UsageError(f"unknown config key {prefix + key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = merge(out[key], value, prefix + key + ".")
        else:
            out[key] = value
    return out


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise UsageError(f"override must look like KEY=VALUE, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def resolve(args) -> dict:
    cfg = default_config()
    if args.config:
        cfg = merge(cfg, read_config_file(args.config))
    for item in args.override or []:
        apply_override(cfg, item)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    fields = {k: v for k, v in cfg.items() if k not in IO_DEFAULTS}
    try:
        return TrainConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _require(cfg: dict, key: str):
    if not cfg.get(key):
        raise UsageError(f"config key {key!r} is required for this command")
    return cfg[key]


def _protocol(cfg: dict):
    spec = _require(cfg, "protocol")
    proto = ntu_oneshot_split() if spec == "ntu" else load_protocol(spec)
    if cfg.get("aux_keep"):
        proto = reduced_aux_split(proto, int(cfg["aux_keep"]), cfg["seed"])
    return proto


def _digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _trained_or_loaded(cfg: dict, manifest, proto, cache):
    """Load the configured checkpoint if it exists, otherwise train now."""
    tcfg = train_config(cfg)
    ckpt = cfg.get("checkpoint")
    if ckpt and Path(ckpt).is_file():
        params, saved = load_checkpoint(ckpt, expected_num_labels=len(proto.aux_classes))
        return params, saved
    params, history = train(manifest, proto.aux_classes, tcfg, cache)
    return params, TrainConfig.from_dict(history.metadata["config"])


def cmd_encode(cfg, args) -> dict:
    signals = _require(cfg, "signals")
    out = args.out or _fail_usage("encode needs --out")
    mods = cfg.get("modalities") or [Path(s).stem for s in signals]
    if len(mods) != len(signals):
        raise UsageError("modalities must list one tag per signal file")
    mats = [load_signal_csv(s, modality=m) for s, m in zip(signals, mods)]
    img = encode(fuse_all(mats), train_config(cfg).target_width, source_id="|".join(signals))
    if out.lower().endswith(".png"):
        export_png(img, out)
    else:
        save_tensor_container(out, {"image": img.pixels}, {"source_id": img.source_id})
    return {"out": out, "shape": list(img.pixels.shape)}


def cmd_train(cfg, args) -> dict:
    manifest = load_manifest(_require(cfg, "manifest"))
    proto = _protocol(cfg)
    params, history = train(manifest, proto.aux_classes, train_config(cfg))
    tcfg = TrainConfig.from_dict(history.metadata["config"])
    out = args.out or _require(cfg, "checkpoint")
    save_checkpoint(params, tcfg, out, classes=history.metadata["classes"])
    if cfg.get("history_csv"):
        history.to_csv(cfg["history_csv"])
    last = history.records[-1]
    return {"checkpoint": out, "epochs": len(history.records),
            "first_loss": history.records[0].mean_total_loss,
            "final_loss": last.mean_total_loss, "config_digest": _digest(cfg)}


def cmd_eval(cfg, args) -> dict:
    manifest = load_manifest(_require(cfg, "manifest"))
    proto = _protocol(cfg)
    cache = ImageCache()
    params, tcfg = _trained_or_loaded(cfg, manifest, proto, cache)
    report = evaluate(params, manifest, proto, tcfg, cache)
    result = report.to_dict(_digest(cfg))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2), encoding="utf-8")
    return result


def cmd_export(cfg, args) -> dict:
    manifest = load_manifest(_require(cfg, "manifest"))
    proto = _protocol(cfg)
    out = args.out or _fail_usage("export-embeddings needs --out")
    cache = ImageCache()
    params, tcfg = _trained_or_loaded(cfg, manifest, proto, cache)
    report = export_embeddings(params, manifest, proto, tcfg, out, cache)
    if cfg.get("pca_out"):
        proj = pca_project(report.query_vectors)
        with open(cfg["pca_out"], "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["path", "label", "pc1", "pc2"])
            for (src, label, _, _), (a, b) in zip(report.predictions, proj):
                w.writerow([src, label, repr(float(a)), repr(float(b))])
    return {"out": out, "rows": len(report.predictions), "accuracy": report.accuracy}


def ablate(cfg: dict) -> list[dict]:
    """Train and evaluate every (miner, alpha, beta) cell with a shared seed."""
    manifest = load_manifest(_require(cfg, "manifest"))
    proto = _protocol(cfg)
    cache = ImageCache()
    rows = []
    for miner in ABLATION_MINERS:
        for alpha, beta in ABLATION_WEIGHTS:
            cell = copy.deepcopy(cfg)
            cell["miner_mode"] = miner
            cell["weights"]["alpha"] = alpha
            cell["weights"]["beta"] = beta
            tcfg = train_config(cell)
            params, history = train(manifest, proto.aux_classes, tcfg, cache)
            tcfg = TrainConfig.from_dict(history.metadata["config"])
            report = evaluate(params, manifest, proto, tcfg, cache)
            rows.append({"miner": miner, "alpha": alpha, "beta": beta,
                         "accuracy": report.accuracy,
                         "final_loss": history.records[-1].mean_total_loss})
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["miner", "alpha", "beta", "accuracy"])
    for r in rows:
        w.writerow([r["miner"], r["alpha"], r["beta"], repr(r["accuracy"])])
    return buf.getvalue()


def cmd_ablate(cfg, args) -> dict:
    text = ablation_csv(ablate(cfg))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return {"out": args.out, "rows": text.count("\n") - 1, "config_digest": _digest(cfg)}


def _fail_usage(msg):
    raise UsageError(msg)


HANDLERS = {
    "encode": cmd_encode,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sigmetric",
                                     description="Signal-level metric learning for one-shot action recognition")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH")
    parser.add_argument("--override", metavar="KEY=VALUE", action="append", default=[])
    parser.add_argument("--out", metavar="PATH")
    parser.add_argument("--seed", metavar="N", type=int)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        result = HANDLERS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"sigmetric: error: {exc}", file=sys.stderr)
        return 2
    except (SigmetricError, OSError, ValueError) as exc:
        print(f"sigmetric: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
