"""Command-line entry point: flat key=value configs, checkpoints and output files.

Commands: ``train``, ``embed``, ``eval``, ``similarity``, ``ablate``. Every
command reads ``--config FILE`` and accepts ``--set key=value`` overrides.

Exit codes: 0 success, 1 dataset or I/O failure, 2 usage or configuration
error, 3 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig, ModelParams
from .errors import ConfigError, ShapeError
from .graph import DatasetError, GraphDataset, parse_tudataset
from .probe import linear_probe_cv
from .sampler import VIEW_RATIO_PRESETS
from .trainer import (
    MetricsTrace,
    NonFiniteLossError,
    ProbeNetConfig,
    TrainConfig,
    ablate,
    embed_dataset,
    similarity_experiment,
    train,
)

log = logging.getLogger(__name__)

COMMANDS = ("train", "embed", "eval", "similarity", "ablate")
MAGIC = b"MSSGCL1"
TRACE_COLUMNS = ("epoch", "step", "l_gg", "l_gl", "l_ll", "psi", "total")
EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NONFINITE = 0, 1, 2, 3


def fmt(x: float) -> str:
    return format(float(x), ".17g")


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    dataset_path: Path
    dataset_name: str
    output_dir: Path
    checkpoint: Path | None = None
    folds: int = 10
    label_fraction: float = 1.0
    ratios: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    # Seeds for similarity and ablate; empty means just ``train.seed``.
    seeds: tuple[int, ...] = ()
    probe: ProbeNetConfig = field(default_factory=ProbeNetConfig)

    @property
    def checkpoint_path(self) -> Path:
        return self.checkpoint if self.checkpoint is not None else self.output_dir / "model.ckpt"

    @property
    def run_seeds(self) -> tuple[int, ...]:
        return self.seeds or (self.train.seed,)


_TRAIN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
_PROBE_DEFAULTS = {f"probe_{f.name}": f.default for f in dataclasses.fields(ProbeNetConfig)}
_RUN_KEYS = {
    "dataset_path": str,
    "dataset_name": str,
    "output_dir": str,
    "checkpoint": str,
    "folds": int,
    "label_fraction": float,
    "ratios": "floats",
    "seeds": "ints",
    "view_preset": str,
}
REQUIRED_KEYS = ("dataset_path", "dataset_name", "output_dir")


def _key_types() -> dict:
    types = {k: type(v) for k, v in {**_TRAIN_DEFAULTS, **_PROBE_DEFAULTS}.items()}
    types.update(_RUN_KEYS)
    return types


def _convert(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "floats":
            return tuple(float(t) for t in raw.split(",") if t.strip())
        if kind == "ints":
            return tuple(int(t) for t in raw.split(",") if t.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_assignments(lines: Sequence[tuple[str, str]]) -> dict:
    """Parse ``(origin, text)`` lines into typed values; origin prefixes diagnostics."""
    types = _key_types()
    values: dict = {}
    for origin, text in lines:
        body = text.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{origin}: expected key=value, got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in types:
            raise ConfigError(f"{origin}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw, types[key])
        except ConfigError as exc:
            raise ConfigError(f"{origin}: {exc}") from None
    return values


def build_run_config(values: dict) -> RunConfig:
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r}")
    chosen = {k: values[k] for k in _TRAIN_DEFAULTS if k in values}
    if "view_preset" in values:
        if values["view_preset"] not in VIEW_RATIO_PRESETS:
            raise ConfigError(f"view_preset must be one of {sorted(VIEW_RATIO_PRESETS)}, got {values['view_preset']!r}")
        g, l = VIEW_RATIO_PRESETS[values["view_preset"]]
        # Explicit ratios override the preset.
        chosen = {"g_ratio": g, "l_ratio": l, **chosen}
    train_cfg = TrainConfig(**chosen)
    train_cfg.validate()
    probe = ProbeNetConfig(**{k[len("probe_"):]: values[k] for k in _PROBE_DEFAULTS if k in values})
    for name in ("num_layers", "hidden_dim", "epochs", "batch_size"):
        if getattr(probe, name) < 1 or (name == "batch_size" and probe.batch_size < 2):
            raise ConfigError(f"probe_{name} is out of range: {getattr(probe, name)}")
    if not probe.lr > 0:
        raise ConfigError(f"probe_lr must be > 0, got {probe.lr}")
    cfg = RunConfig(
        train=train_cfg,
        dataset_path=Path(values["dataset_path"]),
        dataset_name=values["dataset_name"],
        output_dir=Path(values["output_dir"]),
        checkpoint=Path(values["checkpoint"]) if "checkpoint" in values else None,
        folds=values.get("folds", 10),
        label_fraction=values.get("label_fraction", 1.0),
        ratios=values.get("ratios", (0.2, 0.4, 0.6, 0.8)),
        seeds=values.get("seeds", ()),
        probe=probe,
    )
    if cfg.folds < 2:
        raise ConfigError(f"folds must be >= 2, got {cfg.folds}")
    if not 0 < cfg.label_fraction <= 1:
        raise ConfigError(f"label_fraction must be in (0, 1], got {cfg.label_fraction}")
    if not cfg.ratios or any(not 0 < r <= 1 for r in cfg.ratios):
        raise ConfigError(f"ratios must be a non-empty list in (0, 1], got {cfg.ratios}")
    return cfg


def load_run_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    lines = [(f"{path.name}:{n}", line) for n, line in enumerate(text.splitlines(), start=1)]
    lines += [(f"--set {o}", o) for o in overrides]
    return build_run_config(parse_assignments(lines))


# --- checkpoints ---------------------------------------------------------------


class CheckpointError(Exception):
    """Unreadable or corrupted checkpoint file."""


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


def _config_echo(config: TrainConfig, feature_dim: int) -> list[str]:
    items = {**dataclasses.asdict(config), "feature_dim": feature_dim}
    return [f"{k}={items[k]!r}" for k in sorted(items)]


def save_checkpoint(path, params: ModelParams, config: TrainConfig) -> Path:
    path = Path(path)
    arrays = params.state_arrays()
    names = sorted(arrays)
    header = [MAGIC.decode(), "[config]"]
    header += _config_echo(config, params.config.feature_dim)
    header.append("[manifest]")
    for name in names:
        header.append(f"{name}\t{','.join(str(d) for d in arrays[name].shape)}")
    header.append("[payload]")
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names)
    blob = ("\n".join(header) + "\n").encode() + payload + struct.pack("<Q", fnv1a64(payload))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


@dataclass
class Checkpoint:
    config: dict[str, str]
    arrays: dict[str, np.ndarray]

    def train_config(self) -> TrainConfig:
        lines = [(f"checkpoint config {k}", f"{k}={v}") for k, v in self.config.items() if k != "feature_dim"]
        return TrainConfig(**parse_assignments(lines))

    def encoder_config(self) -> EncoderConfig:
        return self.train_config().encoder_config(int(self.config["feature_dim"]))

    def params(self, expected: EncoderConfig | None = None) -> ModelParams:
        """Rebuild parameters; ShapeError when they do not fit ``expected``."""
        return ModelParams.from_arrays(expected or self.encoder_config(), self.arrays)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    marker = b"[payload]\n"
    cut = blob.find(marker)
    if not blob.startswith(MAGIC + b"\n") or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or missing payload marker)")
    lines = blob[:cut].decode().splitlines()[1:]
    payload, tail = blob[cut + len(marker) : -8], blob[-8:]
    try:
        section = None
        config: dict[str, str] = {}
        manifest: list[tuple[str, tuple[int, ...]]] = []
        for line in lines:
            if line in ("[config]", "[manifest]"):
                section = line
            elif section == "[config]":
                key, value = line.split("=", 1)
                config[key] = value
            elif section == "[manifest]":
                name, shape = line.split("\t")
                manifest.append((name, tuple(int(d) for d in shape.split(",") if d)))
            else:
                raise ValueError(line)
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed header line {exc}") from None
    expected_len = 8 * sum(int(np.prod(s)) for _, s in manifest)
    if len(tail) != 8 or len(payload) != expected_len:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest needs {expected_len}")
    if struct.unpack("<Q", tail)[0] != fnv1a64(payload):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays, offset = {}, 0
    for name, shape in manifest:
        size = int(np.prod(shape))
        arrays[name] = flat[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    return Checkpoint(config, arrays)


# --- output writers -------------------------------------------------------------


def write_trace(path: Path, trace: MetricsTrace) -> None:
    rows = ["\t".join(TRACE_COLUMNS)]
    for r in trace.records:
        rows.append("\t".join([str(r.epoch), str(r.step)] + [fmt(getattr(r, c)) for c in TRACE_COLUMNS[2:]]))
    path.write_text("\n".join(rows) + "\n")


def write_embeddings(path: Path, values: np.ndarray, labels: np.ndarray) -> None:
    header = ["graph_id", "label"] + [f"e{k}" for k in range(values.shape[1])]
    rows = [",".join(header)]
    for i, (row, label) in enumerate(zip(values, labels)):
        rows.append(",".join([str(i), "" if label < 0 else str(int(label))] + [fmt(v) for v in row]))
    path.write_text("\n".join(rows) + "\n")


# --- commands ------------------------------------------------------------------


def _dataset(cfg: RunConfig) -> GraphDataset:
    return parse_tudataset(cfg.dataset_path, cfg.dataset_name)


def _trained_params(cfg: RunConfig) -> ModelParams:
    return load_checkpoint(cfg.checkpoint_path).params()


def cmd_train(cfg: RunConfig) -> int:
    dataset = _dataset(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    try:
        params, trace = train(dataset, cfg.train)
    except NonFiniteLossError as exc:
        write_trace(cfg.output_dir / "trace.tsv", exc.trace)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    write_trace(cfg.output_dir / "trace.tsv", trace)
    save_checkpoint(cfg.checkpoint_path, params, cfg.train)
    return EXIT_OK


def cmd_embed(cfg: RunConfig) -> int:
    dataset = _dataset(cfg)
    emb = embed_dataset(dataset, _trained_params(cfg))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_embeddings(cfg.output_dir / "embeddings.csv", emb.values, emb.labels)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    dataset = _dataset(cfg)
    emb = embed_dataset(dataset, _trained_params(cfg))
    mean, std = linear_probe_cv(emb, folds=cfg.folds, label_fraction=cfg.label_fraction, seed=cfg.train.seed)
    print(f"{fmt(mean)}\t{fmt(std)}")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    report = [
        f"dataset={dataset.name}",
        f"graphs={len(dataset)}",
        f"folds={cfg.folds}",
        f"label_fraction={fmt(cfg.label_fraction)}",
        f"accuracy_mean={fmt(mean)}",
        f"accuracy_std={fmt(std)}",
    ]
    (cfg.output_dir / "eval_report.txt").write_text("\n".join(report) + "\n")
    return EXIT_OK


def cmd_similarity(cfg: RunConfig) -> int:
    dataset = _dataset(cfg)
    rows = ["seed,ratio,mean,variance"] if len(cfg.run_seeds) > 1 else ["ratio,mean,variance"]
    for seed in cfg.run_seeds:
        for r, mean, var in similarity_experiment(dataset, cfg.ratios, cfg.probe, seed=seed):
            cells = [fmt(r), fmt(mean), fmt(var)]
            rows.append(",".join(([str(seed)] if len(cfg.run_seeds) > 1 else []) + cells))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "similarity.csv").write_text("\n".join(rows) + "\n")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    dataset = _dataset(cfg)
    rows = ["variant\tseed\taccuracy_mean\taccuracy_std"]
    per_variant: dict[str, list[float]] = {}
    for seed in cfg.run_seeds:
        run = dataclasses.replace(cfg.train, seed=seed)
        try:
            results = ablate(dataset, run, folds=cfg.folds, label_fraction=cfg.label_fraction)
        except NonFiniteLossError as exc:
            print(f"error: seed {seed}: {exc}", file=sys.stderr)
            return EXIT_NONFINITE
        for res in results:
            rows.append(f"{res.variant}\t{seed}\t{fmt(res.accuracy_mean)}\t{fmt(res.accuracy_std)}")
            per_variant.setdefault(res.variant, []).append(res.accuracy_mean)
    for variant, accs in per_variant.items():
        rows.append(f"{variant}\tmean\t{fmt(np.mean(accs))}\t{fmt(np.std(accs))}")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "ablation.tsv").write_text("\n".join(rows) + "\n")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "similarity": cmd_similarity,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mssgcl", description="Multi-scale subgraph contrastive learning.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="flat key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return HANDLERS[args.command](cfg)
    except (DatasetError, CheckpointError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run_command())
