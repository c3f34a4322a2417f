"""Command-line entry point: ``deers <command> [options]``.

Every option may also come from a ``--config`` file of ``key = value``
lines (keys use the long option name, dashes or underscores).  A flag on the
command line beats the config file, which beats the built-in default.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from deers import checkpoint as ckpt
from deers.catalog import build_neighbor_index, known_initial_state, read_catalog, train_embeddings, write_catalog
from deers.evaluator import (
    offline_evaluate,
    online_evaluate,
    random_offline_baseline,
    summary_table,
    write_offline_report,
    write_online_report,
    write_plot_data,
)
from deers.qnetwork import Architecture, ConfigError, Hyperparameters, QVariant, TrainingAborted
from deers.session import read_sessions, write_sessions
from deers.simulator import SimulatorConfig, SplitManifest, split_sessions, train_simulator
from deers.trainer import TrainerConfig, refuse_latents, train, write_trace
from deers.world import SyntheticWorld, feedback_frequencies, generate_world, write_latents

log = logging.getLogger("deers")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 2."""


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str = ""

    @property
    def key(self) -> str:
        return self.name.replace("-", "_")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise ValueError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise ValueError(f"expected a nonnegative integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise ValueError(f"expected a positive number, got {text}")
    return v


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"expected a number in [0, 1], got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise ValueError(f"expected a nonnegative number, got {text}")
    return v


def _variant(text: str) -> str:
    return QVariant(text).value


def _choice(*allowed: str):
    def parse(text: str) -> str:
        if text not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {text}")
        return text

    parse.__name__ = "choice"
    return parse


def _widths(text: str) -> tuple[int, ...]:
    return tuple(_positive_int(t) for t in str(text).split(",") if t.strip())


def _values(text: str) -> tuple[float, ...]:
    vals = tuple(float(t) for t in str(text).split(",") if t.strip())
    if not vals:
        raise ValueError("empty value list")
    return vals


ARCH_OPTS = [
    Opt("window", _positive_int, 10, "state window length N"),
    Opt("hidden", _positive_int, 50, "GRU hidden size"),
    Opt("stream-widths", _widths, (64, 32, 16), "widths of the separated layers"),
    Opt("joint-widths", _widths, (16,), "widths of the joint hidden layers"),
]

TRAIN_OPTS = ARCH_OPTS + [
    Opt("sessions", str, None, "training session JSONL"),
    Opt("catalog", str, None, "catalog file"),
    Opt("variant", _variant, "deers", "deers, deers-p, deers-f, deers-t or deers-r"),
    Opt("alpha", _nonneg_float, 0.1, "pairwise regulariser weight"),
    Opt("gamma", _unit_float, 0.95, "discount factor"),
    Opt("learning-rate", _positive_float, 0.005, "SGD step size"),
    Opt("gradient-clip", _positive_float, 5.0, "global gradient norm cap"),
    Opt("batch-size", _positive_int, 32, "minibatch size"),
    Opt("sync-interval", _positive_int, 1000, "updates between target syncs"),
    Opt("recall-k", _positive_int, 20, "neighbours recalled per liked item"),
    Opt("max-sessions", _nonneg_int, None, "train on the first sessions only"),
    Opt("passes", _positive_int, 1, "passes over the session log"),
    Opt("log-interval", _positive_int, 100, "updates per metrics row"),
]

COMMAND_OPTS: dict[str, list[Opt]] = {
    "gen-data": [
        Opt("items", _positive_int, 200, "catalog size"),
        Opt("categories", _positive_int, 10, "number of categories"),
        Opt("latent-dim", _positive_int, 8, "latent dimension"),
        Opt("users", _positive_int, 1000, "number of users"),
        Opt("sessions-per-user", _positive_int, 10, "sessions per user"),
        Opt("length", _positive_int, 20, "events per session"),
        Opt("boredom", _nonneg_float, SyntheticWorld.boredom, "penalty per recent same-category skip"),
        Opt("click-threshold", float, SyntheticWorld.click_threshold, "score above which users click"),
        Opt("order-threshold", float, SyntheticWorld.order_threshold, "score above which users order"),
        Opt("noise", _nonneg_float, SyntheticWorld.noise, "feedback noise scale"),
        Opt("preference-share", _unit_float, SyntheticWorld.preference_share, "share of preference-following logged picks"),
    ],
    "train-embeddings": [
        Opt("sessions", str, None, "session JSONL"),
        Opt("dim", _positive_int, 50, "embedding dimension"),
        Opt("epochs", _positive_int, 5, "skip-gram epochs"),
        Opt("neighbors", _positive_int, 20, "neighbour list length"),
    ],
    "train-simulator": ARCH_OPTS
    + [
        Opt("sessions", str, None, "simulator-split session JSONL"),
        Opt("catalog", str, None, "catalog file"),
        Opt("splits", str, None, "split manifest to check disjointness against"),
        Opt("epochs", _positive_int, 5, "training epochs"),
        Opt("batch-size", _positive_int, 64, "minibatch size"),
        Opt("learning-rate", _positive_float, 0.05, "SGD step size"),
        Opt("holdout", _unit_float, 0.2, "fraction of sessions held out for accuracy"),
    ],
    "train": TRAIN_OPTS,
    "eval": [
        Opt("checkpoint", str, None, "trained Q-network checkpoint"),
        Opt("variant", _variant, None, "expected variant (checked against the checkpoint)"),
        Opt("mode", _choice("offline", "online"), "offline", "offline rerank or online simulator rollout"),
        Opt("sessions", str, None, "evaluation session JSONL"),
        Opt("catalog", str, None, "catalog file"),
        Opt("simulator", str, None, "simulator checkpoint (online mode)"),
        Opt("T", _positive_int, 100, "steps per online session"),
        Opt("M", _positive_int, 100, "online sessions"),
        Opt("k", _positive_int, 40, "NDCG cutoff"),
        Opt("feedback", _choice("argmax", "sample"), "argmax", "simulator feedback mode"),
        Opt("recall-k", _positive_int, 20, "neighbours recalled per liked item"),
    ],
    "sweep": TRAIN_OPTS
    + [
        Opt("param", _choice("alpha", "N"), None, "swept parameter"),
        Opt("values", _values, None, "comma-separated values"),
        Opt("eval-sessions", str, None, "evaluation session JSONL"),
        Opt("k", _positive_int, 40, "NDCG cutoff"),
    ],
}

GLOBAL_OPTS = [
    Opt("seed", int, 0, "random seed"),
    Opt("out", str, "out", "output directory"),
]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Merge flag > config file > default, validating config-file values."""
    file_cfg = read_config_file(args.config) if args.config else {}
    opts = GLOBAL_OPTS + COMMAND_OPTS[command]
    known = {o.key for o in opts}
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    resolved = {}
    for o in opts:
        flag = getattr(args, o.key)
        if flag is not None:
            resolved[o.key] = flag
        elif o.key in file_cfg:
            try:
                resolved[o.key] = o.type(file_cfg[o.key])
            except ValueError as exc:
                raise UsageError(f"config key {o.key}: {exc}") from None
        else:
            resolved[o.key] = o.default
    return resolved


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _arch(cfg: dict, embedding_dim: int, output_dim: int = 1) -> Architecture:
    return Architecture(
        embedding_dim=embedding_dim,
        hidden_dim=cfg["hidden"],
        window=cfg["window"],
        stream_widths=tuple(cfg["stream_widths"]),
        joint_widths=tuple(cfg["joint_widths"]),
        output_dim=output_dim,
    )


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, float) and not np.isfinite(v):
        return repr(v)
    return v


def verify_input(path) -> None:
    """Check ``path`` against any manifest in its directory that produced it."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    for mf in sorted(path.parent.glob("manifest-*.json")):
        try:
            record = json.loads(mf.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            continue
        expected = record.get("output_digests", {}).get(path.name)
        if expected is not None and expected != file_digest(path):
            raise RuntimeError(f"{path} no longer matches the digest recorded in {mf.name}")


def write_manifest(command: str, cfg: dict, inputs: dict[str, str], outputs: list[Path], started: float) -> Path:
    out_dir = Path(cfg["out"])
    config = {k: _jsonable(v) for k, v in sorted(cfg.items())}
    input_digests = {k: file_digest(p) for k, p in sorted(inputs.items()) if p is not None}
    output_digests = {p.name: file_digest(p) for p in outputs}
    run_id = hashlib.sha1(
        json.dumps([command, config, input_digests], sort_keys=True).encode("utf-8")
    ).hexdigest()[:12]
    record = {
        "run_id": run_id,
        "command": command,
        "config": config,
        "seeds": {"seed": cfg["seed"]},
        "inputs": {k: str(p) for k, p in sorted(inputs.items()) if p is not None},
        "input_digests": input_digests,
        "outputs": [str(p) for p in outputs],
        "output_digests": output_digests,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    path = out_dir / f"manifest-{command}.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_sessions(path):
    refuse_latents(path)
    verify_input(path)
    return read_sessions(path)


def _load_catalog(path, k=None):
    verify_input(path)
    return read_catalog(path, k)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> tuple[dict, list[Path]]:
    world = SyntheticWorld(
        n_items=cfg["items"],
        n_categories=cfg["categories"],
        latent_dim=cfg["latent_dim"],
        boredom=cfg["boredom"],
        click_threshold=cfg["click_threshold"],
        order_threshold=cfg["order_threshold"],
        noise=cfg["noise"],
        preference_share=cfg["preference_share"],
        seed=cfg["seed"],
    )
    sessions = generate_world(world, cfg["users"], cfg["sessions_per_user"], cfg["length"])
    out = Path(cfg["out"])
    train_s, sim_s, eval_s, manifest = split_sessions(sessions)
    paths = {
        "sessions.jsonl": sessions,
        "train.jsonl": train_s,
        "simulator.jsonl": sim_s,
        "eval.jsonl": eval_s,
    }
    written = []
    for name, ss in paths.items():
        write_sessions(out / name, ss)
        written.append(out / name)
    manifest.save(out / "splits.json")
    write_latents(out / "latents.json", world, cfg["users"])
    written += [out / "splits.json", out / "latents.json"]
    freqs = feedback_frequencies(sessions)
    print(f"{len(sessions)} sessions, {sum(len(s) for s in sessions)} events; "
          + ", ".join(f"{k} {v:.3f}" for k, v in freqs.items()))
    return {}, written


def cmd_train_embeddings(cfg: dict) -> tuple[dict, list[Path]]:
    _require(cfg, "sessions")
    sessions = _load_sessions(cfg["sessions"])
    catalog = train_embeddings(sessions, dim=cfg["dim"], epochs=cfg["epochs"], seed=cfg["seed"])
    catalog = build_neighbor_index(catalog, cfg["neighbors"])
    path = Path(cfg["out"]) / "catalog.txt"
    write_catalog(path, catalog)
    print(f"{len(catalog)} items embedded in {catalog.dim} dimensions")
    return {"sessions": cfg["sessions"]}, [path]


def cmd_train_simulator(cfg: dict) -> tuple[dict, list[Path]]:
    _require(cfg, "sessions", "catalog")
    sessions = _load_sessions(cfg["sessions"])
    catalog = _load_catalog(cfg["catalog"])
    manifest = None
    if cfg["splits"]:
        verify_input(cfg["splits"])
        manifest = SplitManifest.load(cfg["splits"])
    config = SimulatorConfig(
        arch=_arch(cfg, catalog.dim, 3),
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        holdout_fraction=cfg["holdout"],
        seed=cfg["seed"],
    )
    model = train_simulator(sessions, catalog, config, manifest)
    path = Path(cfg["out"]) / "simulator.ckpt"
    ckpt.save_simulator(model, path, cfg["seed"])
    print(summary_table([
        ("held-out accuracy", f"{model.accuracy:.4f}"),
        ("majority baseline", f"{model.majority_rate:.4f}"),
        *((f"precision[{k}]", f"{v:.4f}") for k, v in model.per_class_precision.items()),
    ]))
    inputs = {"sessions": cfg["sessions"], "catalog": cfg["catalog"], "splits": cfg["splits"]}
    return inputs, [path]


def _trainer_config(cfg: dict, embedding_dim: int, **overrides) -> TrainerConfig:
    settings = {
        "alpha": cfg["alpha"],
        "window": cfg["window"],
    }
    settings.update(overrides)
    hyper = Hyperparameters(
        gamma=cfg["gamma"],
        alpha=settings["alpha"],
        learning_rate=cfg["learning_rate"],
        gradient_clip=cfg["gradient_clip"],
        seed=cfg["seed"],
    )
    arch = _arch({**cfg, "window": settings["window"]}, embedding_dim)
    return TrainerConfig(
        variant=QVariant(cfg["variant"]),
        hyper=hyper,
        arch=arch,
        batch_size=cfg["batch_size"],
        target_sync_interval=cfg["sync_interval"],
        recall_k=cfg["recall_k"],
        max_sessions=cfg["max_sessions"],
        passes=cfg["passes"],
        log_interval=cfg["log_interval"],
        sessions_path=cfg["sessions"],
        catalog_path=cfg["catalog"],
        debug_dir=cfg["out"],
    )


def cmd_train(cfg: dict) -> tuple[dict, list[Path]]:
    _require(cfg, "sessions", "catalog")
    sessions = _load_sessions(cfg["sessions"])
    catalog = _load_catalog(cfg["catalog"])
    config = _trainer_config(cfg, catalog.dim)
    result = train(config, sessions, catalog)
    out = Path(cfg["out"])
    model_path = out / "model.ckpt"
    metrics_path = out / "metrics.csv"
    ckpt.save_checkpoint(result.params, config.variant, config.hyper, model_path)
    write_trace(metrics_path, result.trace)
    final = result.trace[-1].mean_loss if result.trace else float("nan")
    print(f"{result.updates} updates; final mean loss {final:.6f}")
    return {"sessions": cfg["sessions"], "catalog": cfg["catalog"]}, [model_path, metrics_path]


def cmd_eval(cfg: dict) -> tuple[dict, list[Path]]:
    _require(cfg, "checkpoint", "catalog")
    verify_input(cfg["checkpoint"])
    params, variant, _ = ckpt.load_checkpoint(cfg["checkpoint"], cfg["variant"])
    catalog = _load_catalog(cfg["catalog"], cfg["recall_k"] if cfg["mode"] == "online" else None)
    out = Path(cfg["out"])
    inputs = {"checkpoint": cfg["checkpoint"], "catalog": cfg["catalog"]}
    if cfg["mode"] == "offline":
        _require(cfg, "sessions")
        sessions = _load_sessions(cfg["sessions"])
        report = offline_evaluate(sessions, params, variant, catalog, cfg["k"])
        baseline = random_offline_baseline([s for s in sessions if s.session_id in set(report.session_ids)], cfg["seed"], k=cfg["k"])
        path = out / "offline.csv"
        write_offline_report(path, report)
        rows = [
            ("sessions", str(report.count)),
            ("excluded", str(report.excluded)),
            ("MAP", f"{report.map:.6f}"),
            (f"NDCG@{cfg['k']}", f"{report.mean_ndcg:.6f}"),
            ("random MAP", f"{baseline.map:.6f}"),
            (f"random NDCG@{cfg['k']}", f"{baseline.mean_ndcg:.6f}"),
        ]
        inputs["sessions"] = cfg["sessions"]
    else:
        _require(cfg, "simulator")
        verify_input(cfg["simulator"])
        simulator = ckpt.load_simulator(cfg["simulator"])
        starts = None
        if cfg["sessions"]:
            starts = [known_initial_state(s, catalog, params.arch.window) for s in _load_sessions(cfg["sessions"])]
            inputs["sessions"] = cfg["sessions"]
        report = online_evaluate(
            params, variant, simulator, catalog, cfg["T"], cfg["M"], cfg["seed"], starts, cfg["recall_k"], cfg["feedback"]
        )
        path = out / "online.csv"
        write_online_report(path, report)
        rows = [
            ("sessions", str(len(report.rewards))),
            ("T", str(report.session_length)),
            ("mean accumulated reward", f"{report.mean:.6f}"),
            ("std accumulated reward", f"{report.std:.6f}"),
            *((f"feedback[{k}]", str(v)) for k, v in report.feedback_counts.items()),
        ]
        inputs["simulator"] = cfg["simulator"]
    table = summary_table(rows)
    summary = out / f"summary-{cfg['mode']}.txt"
    summary.write_text(table + "\n", encoding="utf-8")
    print(table)
    return inputs, [path, summary]


def cmd_sweep(cfg: dict) -> tuple[dict, list[Path]]:
    _require(cfg, "sessions", "catalog", "param", "values", "eval_sessions")
    sessions = _load_sessions(cfg["sessions"])
    eval_sessions = _load_sessions(cfg["eval_sessions"])
    catalog = _load_catalog(cfg["catalog"])
    rows = []
    for value in cfg["values"]:
        if cfg["param"] == "N":
            if value != int(value) or value < 1:
                raise UsageError(f"window length must be a positive integer, got {value}")
            config = _trainer_config(cfg, catalog.dim, window=int(value))
            label = str(int(value))
        else:
            if value < 0:
                raise UsageError(f"alpha must be nonnegative, got {value}")
            config = _trainer_config(cfg, catalog.dim, alpha=value)
            label = repr(float(value))
        result = train(config, sessions, catalog)
        report = offline_evaluate(eval_sessions, result.params, config.variant, catalog, cfg["k"])
        rows.append((label, report.map, report.mean_ndcg))
        log.info("%s=%s MAP %.4f NDCG %.4f", cfg["param"], label, report.map, report.mean_ndcg)
    out = Path(cfg["out"])
    table_path = out / "sweep.csv"
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(f"{cfg['param']},map,ndcg@{cfg['k']}\n")
        for label, m, n in rows:
            fh.write(f"{label},{m!r},{n!r}\n")
    plot_path = out / "sweep-plot.csv"
    write_plot_data(plot_path, [r[0] for r in rows], [r[1] for r in rows], cfg["param"], "map")
    print(summary_table([(f"{cfg['param']}={label}", f"MAP {m:.4f}  NDCG {n:.4f}") for label, m, n in rows]))
    inputs = {"sessions": cfg["sessions"], "eval_sessions": cfg["eval_sessions"], "catalog": cfg["catalog"]}
    return inputs, [table_path, plot_path]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-embeddings": cmd_train_embeddings,
    "train-simulator": cmd_train_simulator,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def _cli_type(o: Opt):
    def parse(text: str):
        try:
            return o.type(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    parse.__name__ = o.key
    return parse


def _global_options(default) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default, help="key = value config file")
    for o in GLOBAL_OPTS:
        common.add_argument(f"--{o.name}", type=_cli_type(o), default=default, help=f"{o.help} (default {o.default})")
    return common


def build_parser() -> argparse.ArgumentParser:
    """Global flags are accepted before or after the command name."""
    parser = argparse.ArgumentParser(
        prog="deers", description="Dual-stream DQN recommender toolkit", parents=[_global_options(None)]
    )
    sub = parser.add_subparsers(dest="command", required=True)
    # suppressed defaults keep a subcommand from erasing flags given before it
    after = _global_options(argparse.SUPPRESS)
    for name, opts in COMMAND_OPTS.items():
        p = sub.add_parser(name, parents=[after])
        for o in opts:
            p.add_argument(f"--{o.name}", dest=o.key, type=_cli_type(o), default=None, help=f"{o.help} (default {o.default})")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("DEERS_LOG_LEVEL", "warn").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"DEERS_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _configure_logging()
        cfg = resolve(args.command, args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"deers: error: {exc}", file=sys.stderr)
        return 2
    started = time.time()
    Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
    try:
        inputs, outputs = COMMANDS[args.command](cfg)
        write_manifest(args.command, cfg, inputs, outputs, started)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"deers: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, ConfigError, ckpt.CheckpointError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"deers: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
