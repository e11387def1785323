"""Command-line workflow around the toolkit.

Subcommands: simulate (config -> native trace files), train (config ->
checkpoint), attack (checkpoint + traces -> log-probability file), rank
(log-probabilities + plaintexts + true key -> rank curve and score table),
importance (forest checkpoint -> feature ranking), and report (merge rank
summaries into one comparison table).

Exit codes: 0 success, 1 usage error (flags, malformed config), 2 data or
format error. All artifacts are deterministic for a fixed config and seed;
timestamps only ever land in run.log.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import struct
import sys
import time

import numpy as np

from . import forest, keyrank, template, traces
from .nn import model as nn_model
from .nn.train import TrainConfig, train as fit_net
from .simulate import SimConfig, simulate
from .traces import Scaler, ScatError, TraceSet

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

_CKPT_MAGIC = b"SCMD"
_CKPT_VERSION = 1
_KIND_CODES = {"template": 1, "rf": 2, "cnn": 3, "resnet": 4}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

SEED_ENV = "SCAFORGE_SEED"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config document

_TOP_KEYS = {"dataset", "preprocessing", "model", "attack", "output"}
_SIM_KEYS = {"trace_len", "leak_points", "leak_model", "amplitude", "noise_sigma",
             "baseline", "key_mode", "key", "byte_index", "seed",
             "n_profiling", "n_attack"}
_PREP_KEYS = {"standardize", "feature_file", "top_k"}
_MODEL_KEYS = {"kind", "forest", "net", "train"}
_ATTACK_KEYS = {"n_traces", "step", "epsilon", "true_key"}
_FOREST_KEYS = {"n_trees", "max_depth", "min_samples_leaf", "max_features", "seed"}
_NET_KEYS = {"channels", "kernel", "dense_hidden", "dropout_p"}
_TRAIN_KEYS = {"lr", "weight_decay", "decay_rate", "eps", "batch_size",
               "epochs", "seed", "validation_fraction"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise UsageError(f"unknown config keys in {where}: {sorted(unknown)}")


def load_config(path) -> dict:
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed config: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config")
    dataset = cfg.get("dataset")
    if not isinstance(dataset, dict):
        raise UsageError("config needs a dataset section")
    _check_keys(dataset, {"path", "simulator"}, "dataset")
    if ("path" in dataset) == ("simulator" in dataset):
        raise UsageError("dataset needs exactly one of path or simulator")
    if "simulator" in dataset:
        _check_keys(dataset["simulator"], _SIM_KEYS, "dataset.simulator")
    prep = cfg.get("preprocessing", {})
    _check_keys(prep, _PREP_KEYS, "preprocessing")
    if "feature_file" in prep and "top_k" in prep:
        raise UsageError("preprocessing takes feature_file or top_k, not both")
    model = cfg.get("model", {})
    _check_keys(model, _MODEL_KEYS, "model")
    if model and model.get("kind") not in _KIND_CODES:
        raise UsageError(f"model.kind must be one of {sorted(_KIND_CODES)}")
    _check_keys(model.get("forest", {}), _FOREST_KEYS, "model.forest")
    _check_keys(model.get("net", {}), _NET_KEYS, "model.net")
    _check_keys(model.get("train", {}), _TRAIN_KEYS, "model.train")
    _check_keys(cfg.get("attack", {}), _ATTACK_KEYS, "attack")
    _check_keys(cfg.get("output", {}), {"directory"}, "output")
    return cfg


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        seed = int(raw)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
    if seed < 0:
        raise UsageError(f"{SEED_ENV} must be non-negative")
    return seed


def _parse_hex_bytes(text: str, n_bytes: int, what: str) -> bytes:
    clean = text.lower().removeprefix("0x")
    try:
        data = bytes.fromhex(clean)
    except ValueError as exc:
        raise UsageError(f"{what} must be hex, got {text!r}") from exc
    if len(data) != n_bytes:
        raise UsageError(f"{what} must be {n_bytes} byte(s), got {len(data)}")
    return data


def _sim_config(cfg: dict) -> tuple[SimConfig, int, int]:
    section = cfg["dataset"].get("simulator")
    if section is None:
        raise UsageError("this command needs a dataset.simulator section")
    section = dict(section)
    n_prof = section.pop("n_profiling", None)
    n_attack = section.pop("n_attack", None)
    if not isinstance(n_prof, int) or n_prof < 1:
        raise UsageError("dataset.simulator.n_profiling must be a positive integer")
    if not isinstance(n_attack, int) or n_attack < 1:
        raise UsageError("dataset.simulator.n_attack must be a positive integer")
    if isinstance(section.get("key"), str):
        section["key"] = _parse_hex_bytes(section["key"], 16, "simulator key")
    env = _env_seed()
    if env is not None:
        section["seed"] = env
    if section.get("seed", 0) < 0:
        raise UsageError("seeds must be non-negative")
    try:
        sim = SimConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid simulator config: {exc}") from exc
    return sim, n_prof, n_attack


# ---------------------------------------------------------------------------
# checkpoint container: preprocessing state + one embedded model

def write_checkpoint(path, kind: str, scaler: Scaler | None,
                     features: np.ndarray | None, blob: bytes) -> None:
    flags = (1 if scaler is not None else 0) | (2 if features is not None else 0)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHBB", _CKPT_MAGIC, _CKPT_VERSION,
                             _KIND_CODES[kind], flags))
        if scaler is not None:
            fh.write(struct.pack("<I", scaler.mean.size))
            fh.write(scaler.mean.astype("<f8").tobytes())
            fh.write(scaler.std.astype("<f8").tobytes())
        if features is not None:
            fh.write(struct.pack("<I", features.size))
            fh.write(np.asarray(features, dtype="<i8").tobytes())
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def read_checkpoint(path):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        magic, version, kind_code, flags = struct.unpack_from("<4sHBB", raw)
    except struct.error as exc:
        raise DataError(f"checkpoint too short: {path}") from exc
    if magic != _CKPT_MAGIC:
        raise DataError(f"not a scaforge checkpoint: magic {magic!r}")
    if version != _CKPT_VERSION or kind_code not in _KIND_NAMES:
        raise DataError("unsupported checkpoint version or model kind")
    off = struct.calcsize("<4sHBB")
    scaler = None
    if flags & 1:
        (length,) = struct.unpack_from("<I", raw, off)
        off += 4
        mean = np.frombuffer(raw, dtype="<f8", count=length, offset=off).astype(np.float64)
        off += length * 8
        std = np.frombuffer(raw, dtype="<f8", count=length, offset=off).astype(np.float64)
        off += length * 8
        scaler = Scaler(mean=mean, std=std)
    features = None
    if flags & 2:
        (k,) = struct.unpack_from("<I", raw, off)
        off += 4
        features = np.frombuffer(raw, dtype="<i8", count=k, offset=off).astype(np.int64)
        off += k * 8
    (blob_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    blob = raw[off:off + blob_len]
    if len(blob) != blob_len or off + blob_len != len(raw):
        raise DataError("checkpoint payload length mismatch")
    return _KIND_NAMES[kind_code], scaler, features, blob


def _load_model(kind: str, blob: bytes):
    try:
        if kind == "template":
            return template.parse_templates(blob)
        if kind == "rf":
            return forest.parse_forest(blob)
        return nn_model.parse_net(blob)
    except (ValueError, struct.error) as exc:
        raise DataError(f"corrupt {kind} checkpoint: {exc}") from exc


def _predict(kind: str, model, samples: np.ndarray) -> np.ndarray:
    if kind == "template":
        return template.predict_log_proba(model, samples)
    if kind == "rf":
        return forest.predict_log_proba(model, samples)
    return nn_model.predict_log_proba(model, samples)


# ---------------------------------------------------------------------------
# shared pipeline pieces

def _load_traces(path) -> TraceSet:
    if not os.path.exists(path):
        raise DataError(f"trace file not found: {path}")
    try:
        return traces.load_native(path)
    except ScatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_profiling(cfg: dict) -> TraceSet:
    dataset = cfg["dataset"]
    if "path" in dataset:
        return _load_traces(dataset["path"])
    sim, n_prof, _ = _sim_config(cfg)
    return simulate(sim, n_prof)


def _read_feature_file(path) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"feature file not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
        idx = np.asarray(doc["indices"], dtype=np.int64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed feature file {path}: {exc}") from exc
    if idx.ndim != 1 or idx.size == 0 or len(np.unique(idx)) != idx.size:
        raise DataError(f"feature file {path} must list distinct indices")
    return idx


def _forest_config(cfg: dict) -> forest.ForestConfig:
    section = dict(cfg.get("model", {}).get("forest", {}))
    env = _env_seed()
    if env is not None:
        section["seed"] = env
    try:
        return forest.ForestConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid forest config: {exc}") from exc


def _train_config(cfg: dict) -> TrainConfig:
    section = dict(cfg.get("model", {}).get("train", {}))
    env = _env_seed()
    if env is not None:
        section["seed"] = env
    try:
        return TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc


def _net_config(cfg: dict, trace_len: int, residual: bool) -> nn_model.NetConfig:
    section = cfg.get("model", {}).get("net", {})
    try:
        return nn_model.desk_config(
            trace_len=trace_len,
            residual=residual,
            channels=tuple(section.get("channels", (64, 128, 256, 512))),
            dense_hidden=section.get("dense_hidden", 4096),
            kernel=section.get("kernel", 11),
            dropout_p=section.get("dropout_p", 0.5),
        )
    except ValueError as exc:
        raise UsageError(f"invalid net config: {exc}") from exc


def _log(outdir: str, message: str) -> None:
    stamp = time.strftime("%Y-%m-%d %H:%M:%S")
    with open(os.path.join(outdir, "run.log"), "a") as fh:
        fh.write(f"{stamp} {message}\n")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sim, n_prof, n_attack = _sim_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    profiling = simulate(sim, n_prof)
    attack_cfg = SimConfig(**{**sim.__dict__, "seed": sim.seed + 1})
    attack = simulate(attack_cfg, n_attack)
    traces.save_native(profiling, os.path.join(args.out, "profiling.scat"))
    traces.save_native(attack, os.path.join(args.out, "attack.scat"))
    _log(args.out, f"simulate: {n_prof} profiling / {n_attack} attack traces, "
         f"len {sim.trace_len}, seed {sim.seed}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    model_section = cfg.get("model")
    if not model_section:
        raise UsageError("config needs a model section for train")
    kind = model_section["kind"]

    data = _load_profiling(cfg)
    if data.labels is None:
        raise DataError("profiling set has no labels")

    prep = cfg.get("preprocessing", {})
    scaler = None
    if prep.get("standardize", True):
        scaler = traces.fit_scaler(data)
        data = traces.apply_scaler(scaler, data)

    features = None
    if "feature_file" in prep:
        features = _read_feature_file(prep["feature_file"])
    elif "top_k" in prep:
        k = prep["top_k"]
        if not isinstance(k, int) or k < 1:
            raise UsageError("preprocessing.top_k must be a positive integer")
        ranking_model = forest.fit_forest(data.samples, data.labels, _forest_config(cfg))
        features = forest.top_k(forest.gini_importance(ranking_model), k)
    if features is not None:
        try:
            data = traces.select_features(data, features)
        except IndexError as exc:
            raise DataError(f"feature indices out of range: {exc}") from exc

    os.makedirs(args.out, exist_ok=True)
    blob = io.BytesIO()
    if kind == "template":
        model = template.fit_templates(data.samples, data.labels)
        template.dump_templates(model, blob)
    elif kind == "rf":
        model = forest.fit_forest(data.samples, data.labels, _forest_config(cfg))
        forest.dump_forest(model, blob)
        ranking = forest.gini_importance(model)
        _write_importance_csv(os.path.join(args.out, "importance.csv"), ranking)
    else:
        net_cfg = _net_config(cfg, data.trace_len, residual=(kind == "resnet"))
        train_cfg = _train_config(cfg)
        net = nn_model.NetModel(net_cfg, seed=train_cfg.seed)
        net, history = fit_net(net, data.samples, data.labels, train_cfg)
        nn_model.dump_net(net, blob)
        _write_json(os.path.join(args.out, "loss_history.json"),
                    {"train_loss": history.train_loss, "val_loss": history.val_loss})

    write_checkpoint(os.path.join(args.out, "model.bin"), kind, scaler,
                     features, blob.getvalue())
    _write_json(os.path.join(args.out, "train_meta.json"),
                {"model": kind, "features": int(data.trace_len),
                 "n_profiling": int(data.n_traces)})
    _log(args.out, f"train: kind {kind} on {data.n_traces} x {data.trace_len}")
    return EXIT_OK


def _apply_checkpoint_preprocessing(scaler, features, tset: TraceSet) -> np.ndarray:
    if scaler is not None:
        try:
            tset = traces.apply_scaler(scaler, tset)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    if features is not None:
        try:
            tset = traces.select_features(tset, features)
        except IndexError as exc:
            raise DataError(str(exc)) from exc
    return tset.samples


def cmd_attack(args) -> int:
    kind, scaler, features, blob = read_checkpoint(args.model)
    model = _load_model(kind, blob)
    tset = _load_traces(args.traces)
    samples = _apply_checkpoint_preprocessing(scaler, features, tset)
    try:
        probs = _predict(kind, model, samples)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    keyrank.save_logprobs(probs, args.out)
    return EXIT_OK


def cmd_rank(args) -> int:
    if not os.path.exists(args.logprobs):
        raise DataError(f"log-probability file not found: {args.logprobs}")
    try:
        probs = keyrank.load_logprobs(args.logprobs)
    except ScatError as exc:
        raise DataError(f"{args.logprobs}: {exc}") from exc
    tset = _load_traces(args.traces)
    if probs.shape[0] != tset.n_traces:
        raise DataError(f"{probs.shape[0]} probability rows vs "
                        f"{tset.n_traces} traces")
    true_key = _parse_hex_bytes(args.true_key, 1, "--true-key")[0]
    byte_index = tset.byte_index if args.byte_index is None else args.byte_index
    if not 0 <= byte_index <= 15:
        raise UsageError("--byte-index must be in 0..15")
    if args.step < 1:
        raise UsageError("--step must be >= 1")
    try:
        cfg = keyrank.KeyRankConfig(epsilon=args.epsilon)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    pts = tset.plaintexts[:, byte_index]
    table = keyrank.score_keys(probs, pts, byte_index, cfg)
    curve = keyrank.rank_curve(probs, pts, byte_index, true_key, step=args.step, cfg=cfg)
    reached = keyrank.traces_to_rank0(curve)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "score_table.csv"), "w") as fh:
        fh.write(keyrank.score_table_csv(table))
    with open(os.path.join(args.out, "score_table.json"), "w") as fh:
        fh.write(keyrank.score_table_json(table))
    with open(os.path.join(args.out, "rank_curve.csv"), "w") as fh:
        fh.write(keyrank.rank_curve_csv(curve))
    with open(os.path.join(args.out, "rank_curve.json"), "w") as fh:
        fh.write(keyrank.rank_curve_json(curve))
    _write_json(os.path.join(args.out, "summary.json"), {
        "n_traces": int(tset.n_traces),
        "byte_index": int(byte_index),
        "true_key": int(true_key),
        "final_rank": int(curve.points[-1][1]),
        "traces_to_rank0": None if reached is None else int(reached),
    })
    _log(args.out, f"rank: true key {true_key:#04x}, final rank {curve.points[-1][1]}")
    return EXIT_OK


def _write_importance_csv(path, ranking: forest.FeatureRanking) -> None:
    with open(path, "w") as fh:
        fh.write("feature,importance\n")
        for feat in ranking.order:
            fh.write(f"{int(feat)},{float(ranking.importances[feat])!r}\n")


def cmd_importance(args) -> int:
    kind, _, _, blob = read_checkpoint(args.model)
    if kind != "rf":
        raise DataError(f"importance needs an rf checkpoint, got {kind}")
    model = _load_model(kind, blob)
    ranking = forest.gini_importance(model)
    if not 1 <= args.top_k <= model.n_features:
        raise UsageError(f"--top-k must be in 1..{model.n_features}")
    os.makedirs(args.out, exist_ok=True)
    _write_importance_csv(os.path.join(args.out, "importance.csv"), ranking)
    picked = forest.top_k(ranking, args.top_k)
    _write_json(os.path.join(args.out, "top_k.json"),
                {"indices": [int(i) for i in picked]})
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for indir in args.inputs:
        summary_path = os.path.join(indir, "summary.json")
        if not os.path.exists(summary_path):
            raise DataError(f"no summary.json in {indir}")
        with open(summary_path) as fh:
            summary = json.load(fh)
        meta = {}
        meta_path = os.path.join(indir, "train_meta.json")
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                meta = json.load(fh)
        reached = summary.get("traces_to_rank0")
        rows.append((os.path.basename(os.path.normpath(indir)),
                     meta.get("model", ""), meta.get("features", ""),
                     "" if reached is None else reached,
                     summary.get("final_rank", "")))
    with open(args.out, "w") as fh:
        fh.write("run,model,features,traces_to_rank0,final_rank\n")
        for row in rows:
            fh.write(",".join(str(c) for c in row) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="scaforge",
                     description="profiled side-channel attack toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate profiling and attack trace files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit a classifier and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="emit per-trace class log-probabilities")
    p.add_argument("--model", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("rank", help="score key hypotheses and rank the true key")
    p.add_argument("--logprobs", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--true-key", required=True)
    p.add_argument("--byte-index", type=int, default=None)
    p.add_argument("--step", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=1e-40)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("importance", help="rank features of a forest checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--top-k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("report", help="merge rank summaries into one table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"scaforge: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"scaforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ScatError, OSError, ValueError) as exc:
        print(f"scaforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
