"""Personalized federated training of the LSTR, plus FedAvg and local baselines.

Protocol per communication round ``t``:

1. every client trains its own decoder for ``decoder_epochs`` with the
   current global encoder frozen;
2. a seeded uniform subset of clients trains the encoder for
   ``encoder_epochs`` with its fresh decoder frozen;
3. the server averages the candidate encoders weighted by sample count.

Round 0 is a plain FedAvg round over all parameters; its encoder becomes
the first global encoder and its decoder seeds every client.

Server-side functions (:func:`select_clients`, :func:`aggregate`) take only
parameters and sample counts, never client data.

Every minibatch shuffle draws from ``default_rng([seed, client, phase,
round, epoch])`` so any run can be resumed from saved parameters alone.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .grad import ALL, DECODER, ENCODER, ParamSet, sgd_step
from .lstr import (Batch, ModelConfig, batch_from_states, encode_batch, init_decoder, init_model,
                   loss_and_grads)
from .memory import MemoryConfig, stream
from .metrics import evaluate
from .synth import ClientDataset

# shuffle-stream phase codes
WARM, DEC, ENC, FULL, SELECT = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class FederationConfig:
    clients: int = 3
    rounds: int = 100
    decoder_epochs: int = 5
    encoder_epochs: int = 1
    encoder_lr: float = 1e-6
    fedavg_lr: float = 1e-7
    decoder_lr: float = 1e-3
    local_lr: float = 1e-3
    select_fraction: float = 0.5
    local_epochs: int = 1000
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.clients < 1:
            problems.append("clients must be >= 1")
        if self.rounds < 0:
            problems.append("rounds must be >= 0")
        if self.decoder_epochs < 1 or self.encoder_epochs < 1:
            problems.append("decoder_epochs and encoder_epochs must be >= 1")
        if self.local_epochs < 0:
            problems.append("local_epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        for name in ("encoder_lr", "fedavg_lr", "decoder_lr", "local_lr"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if not 0 < self.select_fraction <= 1:
            problems.append("select_fraction must lie in (0, 1]")
        if problems:
            raise ValueError("invalid FederationConfig: " + "; ".join(problems))


# Learning rates as published; they barely move a desk-scale model.
PUBLISHED_RATES = dict(encoder_lr=1e-6, fedavg_lr=1e-7, decoder_lr=1e-3, local_lr=1e-3)
# One rate for every phase so variant comparisons isolate the protocol.
DESK_RATES = dict(encoder_lr=0.05, fedavg_lr=0.05, decoder_lr=0.05, local_lr=0.05)
RATE_PRESETS = {"paper-rates": PUBLISHED_RATES, "desk-rates": DESK_RATES}


def with_rates(cfg: FederationConfig, preset: str) -> FederationConfig:
    if preset not in RATE_PRESETS:
        raise ValueError(f"unknown rate preset {preset!r}; choose from {sorted(RATE_PRESETS)}")
    return replace(cfg, **RATE_PRESETS[preset])


# ------------------------------------------------------------------- states

@dataclass
class ClientState:
    client_id: int
    train: Batch
    test: list = field(default_factory=list)  # LabeledSequence list, evaluated by streaming
    decoder: ParamSet | None = None

    @property
    def n_samples(self) -> int:
        return len(self.train)


def make_client(ds: ClientDataset, mem_cfg: MemoryConfig) -> ClientState:
    """One training sample per sequence: the memory after its final frame."""
    train = ds.train
    if not train:
        raise ValueError(f"client {ds.client_id} has no training sequences")
    states = [stream(s.frames, mem_cfg) for s in train]
    return ClientState(ds.client_id, batch_from_states(states, [s.label for s in train]), ds.test)


@dataclass
class ServerState:
    encoder: ParamSet
    round: int
    registry: dict  # client id -> N_i
    seed: int

    @property
    def total_samples(self) -> int:
        return sum(self.registry.values())


@dataclass(frozen=True)
class RoundPlan:
    selected: tuple
    n_selected: int


@dataclass(frozen=True)
class PersonalizedModel:
    encoder: ParamSet
    decoder: ParamSet

    @property
    def params(self) -> ParamSet:
        return self.encoder.merge(self.decoder)


def compose_personalized(decoder: ParamSet, encoder: ParamSet) -> PersonalizedModel:
    if set(decoder.tags.values()) - {DECODER} or set(encoder.tags.values()) - {ENCODER}:
        raise ValueError("compose_personalized expects a decoder-only and an encoder-only set")
    return PersonalizedModel(encoder, decoder)


@dataclass
class TrainingResult:
    encoder: ParamSet | None
    decoders: dict  # client id -> ParamSet
    log: list  # JSON-ready records
    server: ServerState | None = None

    def personalized(self, client_id: int) -> PersonalizedModel:
        return compose_personalized(self.decoders[client_id], self.encoder)


def log_record(round_: int, client, loss, precision=None) -> dict:
    """Fields: round, client (id or "server"), loss, precision [lk, llc, rlc]."""
    return {"round": round_, "client": client, "loss": loss, "precision": precision}


def write_log(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=False) + "\n")


def read_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ------------------------------------------------------------------ training

def train_epochs(params: ParamSet, cfg: ModelConfig, data: Batch, partition: str, lr: float,
                 epochs: int, batch_size: int, key, first_epoch: int = 0):
    """Minibatch SGD on ``partition``; returns ``(params, per-epoch mean losses)``."""
    n = len(data)
    if n == 0:
        raise ValueError("train_epochs: empty dataset")
    losses = []
    latents = None
    if partition == DECODER and epochs > 0:
        # the encoder is frozen, so its output is fixed for the whole call
        latents = encode_batch(params, cfg, data.long, data.long_mask).data
    for epoch in range(first_epoch, first_epoch + epochs):
        order = np.random.default_rng([*key, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grads(params, cfg, data.take(idx), partition,
                                         None if latents is None else latents[idx])
            params = sgd_step(params, grads, lr, partition)
            total += loss * len(idx)
        losses.append(total / n)
    return params, losses


def aggregate(candidates) -> ParamSet:
    """Sample-weighted mean of ``(client_id, params, n_samples)`` candidates.

    Summed in ascending client id, as ``p_first + sum w_i (p_i - p_first)``
    so identical candidates come back bit-identical, then clipped to the
    candidates' coordinate range.
    """
    candidates = sorted(candidates, key=lambda c: c[0])
    if not candidates:
        raise ValueError("aggregate: no candidates")
    total = sum(n for _, _, n in candidates)
    if total <= 0:
        raise ValueError("aggregate: candidates carry no samples")
    first = candidates[0][1]
    out = {}
    for name in first:
        base = first[name]
        stack = []
        for cid, params, _ in candidates:
            if name not in params or params[name].shape != base.shape:
                got = params[name].shape if name in params else "missing"
                raise ValueError(f"aggregate: {name} has shape {got} for client {cid}, "
                                 f"expected {base.shape}")
            stack.append(params[name])
        acc = base.copy()
        for (_, _, n), value in zip(candidates, stack):
            acc = acc + (n / total) * (value - base)
        out[name] = np.clip(acc, np.minimum.reduce(stack), np.maximum.reduce(stack))
    for _, params, _ in candidates:
        if set(params) != set(first):
            raise ValueError("aggregate: candidates hold different parameter names")
    return ParamSet(out, dict(first.tags))


def select_clients(server: ServerState, fraction: float, round_: int | None = None) -> RoundPlan:
    ids = sorted(server.registry)
    if not ids:
        raise ValueError("select_clients: empty registry")
    k = max(1, min(len(ids), math.ceil(fraction * len(ids))))
    r = server.round + 1 if round_ is None else round_
    rng = np.random.default_rng([server.seed, SELECT, r])
    chosen = sorted(ids[i] for i in rng.choice(len(ids), size=k, replace=False))
    return RoundPlan(tuple(chosen), sum(server.registry[i] for i in chosen))


def _check_clients(clients):
    if not clients:
        raise ValueError("need at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids: {ids}")


def fedavg_init(clients, cfg: FederationConfig, model_cfg: ModelConfig):
    """Round 0: FedAvg over all parameters from a common seeded init.

    Returns ``(server, losses)``; every client's decoder is set in place.
    """
    _check_clients(clients)
    phi0 = init_model(model_cfg, cfg.seed)
    candidates, losses = [], {}
    for c in sorted(clients, key=lambda c: c.client_id):
        trained, ep_losses = train_epochs(phi0, model_cfg, c.train, ALL, cfg.fedavg_lr,
                                          cfg.encoder_epochs, cfg.batch_size,
                                          (cfg.seed, c.client_id, WARM, 0))
        candidates.append((c.client_id, trained, c.n_samples))
        losses[c.client_id] = ep_losses[-1]
    merged = aggregate(candidates)
    for c in clients:
        c.decoder = merged.subset(DECODER)
    registry = {c.client_id: c.n_samples for c in clients}
    return ServerState(merged.subset(ENCODER), 0, registry, cfg.seed), losses


def client_decoder_update(client: ClientState, encoder: ParamSet, epochs: int, lr: float,
                          model_cfg: ModelConfig, batch_size: int, key):
    """Train the client's decoder with ``encoder`` frozen; returns ``(decoder, losses)``."""
    params = encoder.merge(client.decoder)
    params, losses = train_epochs(params, model_cfg, client.train, DECODER, lr, epochs,
                                  batch_size, key)
    return params.subset(DECODER), losses


def selected_encoder_update(client: ClientState, encoder: ParamSet, decoder: ParamSet,
                            epochs: int, lr: float, model_cfg: ModelConfig, batch_size: int, key):
    """Train a candidate encoder with the client's fresh decoder frozen."""
    params = encoder.merge(decoder)
    params, losses = train_epochs(params, model_cfg, client.train, ENCODER, lr, epochs,
                                  batch_size, key)
    return params.subset(ENCODER), losses


def _precision(params, model_cfg, mem_cfg, test):
    if not test or mem_cfg is None:
        return None
    return evaluate(params, test, mem_cfg, model_cfg).precision


def run_round(server: ServerState, clients, cfg: FederationConfig, model_cfg: ModelConfig,
              mem_cfg: MemoryConfig | None = None) -> list:
    """One communication round; mutates ``server`` and client decoders, returns log records."""
    t = server.round + 1
    phi_t = server.encoder
    by_id = {c.client_id: c for c in clients}
    dec_losses = {}
    for cid in sorted(by_id):
        c = by_id[cid]
        c.decoder, losses = client_decoder_update(
            c, phi_t, cfg.decoder_epochs, cfg.decoder_lr, model_cfg, cfg.batch_size,
            (cfg.seed, cid, DEC, t))
        dec_losses[cid] = losses[-1]
    plan = select_clients(server, cfg.select_fraction, t)
    candidates, enc_losses = [], []
    for cid in plan.selected:
        c = by_id[cid]
        cand, losses = selected_encoder_update(
            c, phi_t, c.decoder, cfg.encoder_epochs, cfg.encoder_lr, model_cfg, cfg.batch_size,
            (cfg.seed, cid, ENC, t))
        candidates.append((cid, cand, c.n_samples))
        enc_losses.append(losses[-1] * c.n_samples)
    server.encoder = aggregate(candidates)
    server.round = t
    records = [
        log_record(t, cid, dec_losses[cid],
                   _precision(server.encoder.merge(by_id[cid].decoder), model_cfg, mem_cfg,
                              by_id[cid].test))
        for cid in sorted(by_id)
    ]
    records.append(log_record(t, "server", sum(enc_losses) / plan.n_selected))
    return records


def run_training(cfg: FederationConfig, model_cfg: ModelConfig, clients,
                 mem_cfg: MemoryConfig | None = None, server: ServerState | None = None,
                 on_round=None) -> TrainingResult:
    """Warm start then rounds up to ``cfg.rounds``.

    Pass ``server`` (with client decoders already restored) to resume.
    ``on_round(server, clients)`` runs after every completed round.
    """
    _check_clients(clients)
    log = []
    if server is None:
        server, losses = fedavg_init(clients, cfg, model_cfg)
        for cid in sorted(losses):
            log.append(log_record(0, cid, losses[cid]))
        if on_round:
            on_round(server, clients)
    while server.round < cfg.rounds:
        log.extend(run_round(server, clients, cfg, model_cfg, mem_cfg))
        if on_round:
            on_round(server, clients)
    return TrainingResult(server.encoder, {c.client_id: c.decoder for c in clients}, log, server)


def run_fedavg_baseline(cfg: FederationConfig, model_cfg: ModelConfig, clients,
                        mem_cfg: MemoryConfig | None = None) -> TrainingResult:
    """Every round all clients train all parameters; the server averages everything."""
    _check_clients(clients)
    global_params = init_model(model_cfg, cfg.seed)
    log = []
    ordered = sorted(clients, key=lambda c: c.client_id)
    for r in range(cfg.rounds):
        candidates = []
        for c in ordered:
            trained, losses = train_epochs(
                global_params, model_cfg, c.train, ALL, cfg.fedavg_lr, cfg.encoder_epochs,
                cfg.batch_size, (cfg.seed, c.client_id, FULL), first_epoch=r * cfg.encoder_epochs)
            candidates.append((c.client_id, trained, c.n_samples))
            log.append(log_record(r + 1, c.client_id, losses[-1]))
        global_params = aggregate(candidates)
        for rec, c in zip(log[-len(ordered):], ordered):
            rec["precision"] = _precision(global_params, model_cfg, mem_cfg, c.test)
    enc, dec = global_params.subset(ENCODER), global_params.subset(DECODER)
    return TrainingResult(enc, {c.client_id: dec for c in clients}, log)


def train_local(client: ClientState, cfg: FederationConfig, model_cfg: ModelConfig,
                epochs: int | None = None):
    """All-parameter SGD from the seeded init on one client's data only."""
    epochs = cfg.local_epochs if epochs is None else epochs
    params = init_model(model_cfg, cfg.seed)
    return train_epochs(params, model_cfg, client.train, ALL, cfg.local_lr, epochs,
                        cfg.batch_size, (cfg.seed, client.client_id, FULL))


def run_local_baseline(cfg: FederationConfig, model_cfg: ModelConfig, clients,
                       mem_cfg: MemoryConfig | None = None) -> dict:
    """Independent per-client training; returns client id -> (params, log records)."""
    _check_clients(clients)
    out = {}
    for c in sorted(clients, key=lambda c: c.client_id):
        params, losses = train_local(c, cfg, model_cfg)
        records = [log_record(e + 1, c.client_id, loss) for e, loss in enumerate(losses)]
        if records:
            records[-1]["precision"] = _precision(params, model_cfg, mem_cfg, c.test)
        out[c.client_id] = (params, records)
    return out


def onboard_new_client(encoder: ParamSet, client: ClientState, epochs: int,
                       model_cfg: ModelConfig, lr: float, batch_size: int, seed: int) -> ParamSet:
    """Fresh decoder trained on the newcomer's data against a frozen global encoder."""
    if client.n_samples == 0:
        raise ValueError("onboard_new_client: empty dataset")
    decoder = init_decoder(model_cfg, seed)
    if epochs == 0:
        return decoder
    params, _ = train_epochs(encoder.merge(decoder), model_cfg, client.train, DECODER, lr,
                             epochs, batch_size, (seed, client.client_id, DEC, 0))
    return params.subset(DECODER)


# --------------------------------------------------------------- persistence

def save_run(directory, server: ServerState, clients, cfg: FederationConfig,
             model_cfg: ModelConfig) -> None:
    """Encoder, one decoder per client, and a small JSON state file."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    checkpoint.save(server.encoder, d / "encoder.pfll")
    for c in clients:
        checkpoint.save(c.decoder, d / f"decoder_{c.client_id}.pfll")
    state = {
        "round": server.round,
        "seed": server.seed,
        "registry": {str(k): v for k, v in sorted(server.registry.items())},
        "federation": asdict(cfg),
        "model": asdict(model_cfg),
    }
    (d / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")


def load_run(directory, clients=None):
    """Return ``(server, decoders, federation_cfg, model_cfg)``; restores decoders into ``clients``."""
    d = Path(directory)
    state = json.loads((d / "state.json").read_text())
    registry = {int(k): v for k, v in state["registry"].items()}
    server = ServerState(checkpoint.load(d / "encoder.pfll"), state["round"], registry,
                         state["seed"])
    decoders = {cid: checkpoint.load(d / f"decoder_{cid}.pfll") for cid in registry}
    if clients is not None:
        for c in clients:
            c.decoder = decoders[c.client_id]
    fed = FederationConfig(**{f.name: state["federation"][f.name] for f in fields(FederationConfig)
                              if f.name in state["federation"]})
    model = ModelConfig(**state["model"])
    return server, decoders, fed, model
