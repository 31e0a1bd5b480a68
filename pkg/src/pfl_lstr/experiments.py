"""Four-way comparison harness and report export.

Variants: ``pfl-lstr``, ``fedavg``, ``local`` and ``pfl-lstr-2cams`` (the
personalized model trained and tested without the rear-view block).
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .federation import (DESK_RATES, FederationConfig, make_client, run_fedavg_baseline,
                         run_local_baseline, run_training)
from .lstr import ModelConfig
from .memory import MemoryConfig
from .metrics import MetricsReport, evaluate
from .synth import ablate_rear_view, benchmark_styles, make_clients

log = logging.getLogger(__name__)

VARIANTS = ("pfl-lstr", "fedavg", "local", "pfl-lstr-2cams")
COLUMNS = ("variant", "client", "seed", "lk_precision", "llc_precision", "rlc_precision",
           "fp_rate", "macro_precision")
_NUMERIC = COLUMNS[3:]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    sequences: int = 90  # per client
    train_ratio: float = 0.5
    noise: float = 0.1
    length: int = 0  # frames per sequence; 0 means work + long slots


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        m, mem = self.model, self.memory
        if (m.work_slots, m.long_slots) != (mem.work_slots, mem.long_slots):
            raise ConfigError(
                f"model slots (work {m.work_slots}, long {m.long_slots}) do not match memory "
                f"config (work {mem.work_slots}, long {mem.long_slots})"
            )

    @property
    def sequence_length(self) -> int:
        return self.data.length or self.memory.work_slots + self.memory.long_slots

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, federation=replace(self.federation, seed=seed))


def published_config() -> ExperimentConfig:
    """Published settings: 4 fps over 3 s / 12 s memories, 100 rounds, published learning rates."""
    return ExperimentConfig()


def desk_config() -> ExperimentConfig:
    """Small benchmark that trains in seconds; one learning rate for every phase."""
    memory = MemoryConfig(fps=1, work_seconds=3, long_seconds=12)
    model = ModelConfig(feature_dim=8, embed_dim=16, heads=2, latent_tokens=4, encoder_layers=1,
                        decoder_layers=1, ff_dim=32, long_slots=memory.long_slots,
                        work_slots=memory.work_slots)
    federation = FederationConfig(rounds=20, select_fraction=0.67, local_epochs=60,
                                  **DESK_RATES)
    return ExperimentConfig(model, memory, federation, DataConfig())


PRESETS = {"desk": desk_config, "published": published_config}

_SECTIONS = {"model": ModelConfig, "memory": MemoryConfig, "federation": FederationConfig,
             "data": DataConfig}


def _coerce(cls, key: str, text: str):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise ConfigError(f"unknown key {key!r} for [{cls.__name__}]")
    kind = types[key]
    try:
        if kind in ("int", int):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read an INI file with [model], [memory], [federation] and [data] sections.

    Keys are the dataclass field names; missing keys keep ``base`` values.
    When [memory] changes, model slot counts follow unless set explicitly.
    """
    base = base or desk_config()
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        current = asdict(getattr(base, name))
        if parser.has_section(name):
            for key, text in parser.items(name):
                current[key] = _coerce(cls, key, text)
        parts[name] = current
    try:
        mem = MemoryConfig(**parts["memory"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for key in ("work_slots", "long_slots"):
        if not parser.has_option("model", key):
            parts["model"][key] = getattr(mem, key)
    try:
        return ExperimentConfig(**{name: cls(**parts[name]) for name, cls in _SECTIONS.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    for name in _SECTIONS:
        parser[name] = {k: repr(v) for k, v in asdict(getattr(cfg, name)).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# ------------------------------------------------------------------ datasets

def benchmark_clients(cfg: ExperimentConfig, seed: int):
    """The standard three-driver heterogeneous benchmark for one seed."""
    return make_clients(benchmark_styles(cfg.data.noise), cfg.data.sequences, seed,
                        cfg.model.feature_dim, cfg.sequence_length, cfg.memory.fps,
                        cfg.data.train_ratio)


def split_fingerprint(datasets) -> str:
    """Hash of every client's split and labels; invariant under rear-view ablation."""
    h = hashlib.sha256()
    for ds in datasets:
        h.update(f"{ds.client_id}|{ds.train_idx}|{ds.test_idx}|".encode())
        h.update("".join(f"{s.label}{s.scenario}" for s in ds.sequences).encode())
    return h.hexdigest()[:16]


# ------------------------------------------------------------------ variants

def train_variant(variant: str, cfg: ExperimentConfig, datasets) -> dict:
    """Train ``variant`` and return client id -> parameter set for its test split."""
    fed, model, mem = cfg.federation, cfg.model, cfg.memory
    if variant == "pfl-lstr-2cams":
        datasets = [ablate_rear_view(d) for d in datasets]
    clients = [make_client(d, mem) for d in datasets]
    if variant in ("pfl-lstr", "pfl-lstr-2cams"):
        res = run_training(fed, model, clients)
        return {c.client_id: res.personalized(c.client_id).params for c in clients}
    if variant == "fedavg":
        res = run_fedavg_baseline(fed, model, clients)
        merged = res.encoder.merge(res.decoders[clients[0].client_id])
        return {c.client_id: merged for c in clients}
    if variant == "local":
        return {cid: params for cid, (params, _) in run_local_baseline(fed, model, clients).items()}
    raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


def evaluate_variant(variant: str, cfg: ExperimentConfig, datasets) -> dict:
    """Client id -> MetricsReport on the held-out split (ablated for 2cams)."""
    models = train_variant(variant, cfg, datasets)
    if variant == "pfl-lstr-2cams":
        datasets = [ablate_rear_view(d) for d in datasets]
    return {d.client_id: evaluate(models[d.client_id], d, cfg.memory, cfg.model) for d in datasets}


# --------------------------------------------------------------------- table

def report_row(report: MetricsReport, variant: str, client, seed) -> dict:
    lk, llc, rlc = report.precision
    return {
        "variant": variant, "client": client, "seed": seed,
        "lk_precision": lk, "llc_precision": llc, "rlc_precision": rlc,
        "fp_rate": report.fp_rate, "macro_precision": report.macro_precision,
    }


@dataclass
class ComparisonTable:
    rows: list = field(default_factory=list)  # one per (variant, client, seed)
    reports: dict = field(default_factory=dict)  # (variant, client, seed) -> MetricsReport
    fingerprints: dict = field(default_factory=dict)  # (variant, seed) -> split fingerprint

    def summary_rows(self) -> list:
        """Mean and sample stdev over seeds per (variant, client); needs two or more seeds."""
        groups: dict = {}
        for r in self.rows:
            groups.setdefault((r["variant"], r["client"]), []).append(r)
        out = []
        for (variant, client), rows in groups.items():
            if len(rows) < 2:
                continue
            mean = {"variant": variant, "client": client, "seed": "mean"}
            std = {"variant": variant, "client": client, "seed": "std"}
            for col in _NUMERIC:
                vals = [r[col] for r in rows if r[col] is not None]
                mean[col] = statistics.fmean(vals) if vals else None
                std[col] = statistics.stdev(vals) if len(vals) >= 2 else None
            out += [mean, std]
        return out

    def all_rows(self) -> list:
        return self.rows + self.summary_rows()

    def value(self, variant: str, client, column: str, seed="mean"):
        for r in self.all_rows():
            if r["variant"] == variant and r["client"] == client and r["seed"] == seed:
                return r[column]
        raise KeyError((variant, client, seed))


def compare(cfg: ExperimentConfig, variants=VARIANTS, seeds=(0,)) -> ComparisonTable:
    variants, seeds = list(variants), list(seeds)
    if not variants or not seeds:
        raise ValueError("compare needs at least one variant and one seed")
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    table = ComparisonTable()
    for seed in seeds:
        run_cfg = cfg.with_seed(seed)
        datasets = benchmark_clients(run_cfg, seed)
        for variant in variants:
            table.fingerprints[(variant, seed)] = split_fingerprint(datasets)
            log.info("seed %s variant %s split %s", seed, variant,
                     table.fingerprints[(variant, seed)])
            for cid, rep in evaluate_variant(variant, run_cfg, datasets).items():
                table.reports[(variant, cid, seed)] = rep
                table.rows.append(report_row(rep, variant, cid, seed))
    return table


# -------------------------------------------------------------------- export

def _rows_of(obj) -> list:
    if isinstance(obj, ComparisonTable):
        return obj.all_rows()
    if isinstance(obj, MetricsReport):
        return [report_row(obj, "", "", "")]
    return list(obj)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_report(obj, fmt: str = "csv") -> str:
    """Rows in ``COLUMNS`` order as CSV or JSON lines; ``None`` is empty / null."""
    rows = _rows_of(obj)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in COLUMNS])
        text = buf.getvalue()
    elif fmt in ("jsonl", "json-lines"):
        text = "".join(json.dumps({c: r[c] for c in COLUMNS}) + "\n" for r in rows)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return text


def export_report(obj, path, fmt: str = "csv") -> None:
    Path(path).write_text(render_report(obj, fmt))


def _parse_cell(col: str, text: str):
    if text == "":
        return None
    if col in _NUMERIC:
        return float(text)
    try:
        return int(text)
    except ValueError:
        return text


def read_report(path, fmt: str = "csv") -> list:
    text = Path(path).read_text()
    if fmt == "csv":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected header {header}")
        return [{c: _parse_cell(c, v) for c, v in zip(COLUMNS, line)} for line in reader]
    return [json.loads(line) for line in text.splitlines() if line.strip()]
