"""Experiment orchestration: flat-file configs, single runs, sweeps,
metrics persistence and checkpointing.

Config files are flat ``section.key = value`` lines (``#`` comments).  A run
writes ``rounds.jsonl`` (one record per round, byte-deterministic for fixed
seeds), ``summary.csv`` and ``checkpoint.bin`` into its output directory.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import pickle
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import compress, fedcore, gnn, graphdata
from .errors import ConfigError, IoError, VersionMismatch
from .fedcore import ClientConfig, ClientState, RoundRecord, ServerState, Sparsifier

log = logging.getLogger("cefgl")

SEED_ENV_VAR = "CEFGL_SEED"
CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1

ALGORITHMS = ("cefgl", "fedavg", "fedprox")
ABLATIONS = ("full", "w_only", "s_only")
SWEEP_AXES = {
    "tau_lowrank": ("server", "tau_lowrank"),
    "cut_sparse": ("client", "cut_sparse"),
    "beta": ("client", "beta"),
    "p": ("server", "p"),
    "r_bits": ("server", "r_bits"),
}


@dataclass
class DataSection:
    source: str = "synth"  # "synth" or "tu"
    tu_path: str = ""
    n_graphs: int = 80
    motifs: str = "triangles,star"
    nodes_lo: int = 6
    nodes_hi: int = 10
    feature_dim: int = 4
    noise: float = 0.8
    partition: str = "iid"  # iid | label_skew | cross_dataset
    skew: float = 0.3
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1


@dataclass
class ClientSection:
    eta: float = 0.01
    alpha: float = 0.6
    nu: float = 0.5
    sparsifier: str = "threshold"
    cut_sparse: float = 0.001
    beta: float = 0.1
    local_epochs: int = 1
    finetune_epochs: int = 1
    batch_size: int = 0
    use_correction: bool = True
    proxskip_h: bool = False
    mu_prox: float = 0.01


@dataclass
class ServerSection:
    p: float = 0.5
    rho: float = 1.0
    tau_lowrank: float = 0.0001
    r_bits: int = 4
    downlink_scheme: str = "lowrank_quantized"
    dropout_a: float = 0.0  # both zero disables dropout
    dropout_b: float = 0.0
    bandwidth_mbps: float = 100.0
    latency_ms: float = 20.0


@dataclass
class RunSection:
    algorithm: str = "cefgl"
    rounds: int = 200
    clients: int = 10
    hidden: int = 16
    ablation: str = "full"
    out_dir: str = "out"


@dataclass
class SeedSection:
    data: int = 7
    init: int = 8
    coin: int = 9
    sampling: int = 10
    dropout: int = 11


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    client: ClientSection = field(default_factory=ClientSection)
    server: ServerSection = field(default_factory=ServerSection)
    run: RunSection = field(default_factory=RunSection)
    seeds: SeedSection = field(default_factory=SeedSection)


def with_base_seed(cfg: ExperimentConfig, base: int) -> ExperimentConfig:
    """Copy of the config with all five seed streams derived from one base."""
    out = copy.deepcopy(cfg)
    out.seeds = SeedSection(
        data=base, init=base + 1, coin=base + 2, sampling=base + 3, dropout=base + 4
    )
    return out


def _coerce(raw: str, current, key: str):
    if isinstance(current, bool):
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from exc
    return raw


def _validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def require(cond: bool, msg: str):
        if not cond:
            raise ConfigError(msg)

    d, c, s, r = cfg.data, cfg.client, cfg.server, cfg.run
    require(d.source in ("synth", "tu"), f"data.source: unknown source {d.source!r}")
    require(
        d.partition in (graphdata.MODE_IID, graphdata.MODE_LABEL_SKEW, graphdata.MODE_CROSS_DATASET),
        f"data.partition: unknown mode {d.partition!r}",
    )
    require(d.skew > 0, "data.skew: must be > 0")
    require(d.n_graphs >= 1, "data.n_graphs: must be >= 1")
    require(3 <= d.nodes_lo <= d.nodes_hi, "data.nodes_lo/nodes_hi: need 3 <= lo <= hi")
    require(d.feature_dim >= 1, "data.feature_dim: must be >= 1")
    require(d.noise >= 0, "data.noise: must be >= 0")
    fracs = (d.train_frac, d.val_frac, d.test_frac)
    require(all(f >= 0 for f in fracs), "data split fractions must be >= 0")
    require(abs(sum(fracs) - 1.0) <= 1e-9, "data split fractions must sum to 1")
    if d.source == "tu":
        require(bool(d.tu_path), "data.tu_path: required when data.source = tu")
        require(Path(d.tu_path).exists(), f"data.tu_path: {d.tu_path} does not exist")
    require(c.eta > 0, "client.eta: must be > 0")
    require(c.alpha >= 0, "client.alpha: must be >= 0")
    require(c.nu >= 0, "client.nu: must be >= 0")
    require(c.mu_prox >= 0, "client.mu_prox: must be >= 0")
    require(c.sparsifier in ("threshold", "topk"), f"client.sparsifier: {c.sparsifier!r}")
    require(c.cut_sparse >= 0, "client.cut_sparse: must be >= 0")
    require(0.0 <= c.beta <= 1.0, "client.beta: must be within [0, 1]")
    require(c.local_epochs >= 0, "client.local_epochs: must be >= 0")
    require(c.finetune_epochs >= 0, "client.finetune_epochs: must be >= 0")
    require(c.batch_size >= 0, "client.batch_size: must be >= 0")
    require(0.0 <= s.p <= 1.0, "server.p: must be within [0, 1]")
    require(0.0 < s.rho <= 1.0, "server.rho: must be within (0, 1]")
    require(s.tau_lowrank >= 0, "server.tau_lowrank: must be >= 0")
    require(1 <= s.r_bits <= 32, "server.r_bits: must be within [1, 32]")
    require(
        s.downlink_scheme in ("dense", "quantized", "lowrank_quantized"),
        f"server.downlink_scheme: {s.downlink_scheme!r}",
    )
    require(s.dropout_a >= 0 and s.dropout_b >= 0, "server.dropout_a/b: must be >= 0")
    require(
        (s.dropout_a > 0) == (s.dropout_b > 0),
        "server.dropout_a/b: set both to enable dropout, both zero to disable",
    )
    require(s.bandwidth_mbps > 0, "server.bandwidth_mbps: must be > 0")
    require(s.latency_ms >= 0, "server.latency_ms: must be >= 0")
    require(r.algorithm in ALGORITHMS, f"run.algorithm: unknown algorithm {r.algorithm!r}")
    require(r.ablation in ABLATIONS, f"run.ablation: unknown ablation {r.ablation!r}")
    require(r.rounds >= 1, "run.rounds: must be >= 1")
    require(r.clients >= 1, "run.clients: must be >= 1")
    require(r.hidden >= 1, "run.hidden: must be >= 1")
    for motif in cfg.data.motifs.split(","):
        require(motif.strip() in graphdata.MOTIFS, f"data.motifs: unknown motif {motif!r}")
    return cfg


def parse_config(path) -> ExperimentConfig:
    """Parse a flat dotted-key config file; unknown keys are rejected.

    ``CEFGL_SEED`` in the environment overrides the whole seed block.
    """
    cfg = ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    for lineno, raw_line in enumerate(p.read_text().splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p.name}:{lineno}: expected 'section.key = value'")
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"{p.name}:{lineno}: key {key!r} must be section.key")
        section_name, field_name = key.split(".")
        section = getattr(cfg, section_name, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"{p.name}:{lineno}: unknown section {section_name!r}")
        if field_name not in {f.name for f in dataclasses.fields(section)}:
            raise ConfigError(f"{p.name}:{lineno}: unknown key {key!r}")
        setattr(section, field_name, _coerce(raw_value, getattr(section, field_name), key))
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            base = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc
        cfg = with_base_seed(cfg, base)
    return _validate(cfg)


# ---------------------------------------------------------------------------
# Simulation assembly


def _motif_tuple(cfg: ExperimentConfig) -> Tuple[str, ...]:
    return tuple(m.strip() for m in cfg.data.motifs.split(","))


def _load_pool(cfg: ExperimentConfig) -> List[graphdata.GraphDataset]:
    d = cfg.data
    if d.partition == graphdata.MODE_CROSS_DATASET:
        if d.source == "tu":
            subdirs = sorted(p for p in Path(d.tu_path).iterdir() if p.is_dir())
            if len(subdirs) != cfg.run.clients:
                raise ConfigError(
                    f"cross_dataset: {len(subdirs)} dataset dirs for {cfg.run.clients} clients"
                )
            pool = [graphdata.load_tu_dataset(sub) for sub in subdirs]
        else:
            spec = _synth_spec(cfg)
            pool = [
                graphdata.synth_generate(spec, cfg.seeds.data + i)
                for i in range(cfg.run.clients)
            ]
        return graphdata.pad_to_common(pool)
    if d.source == "tu":
        return [graphdata.load_tu_dataset(d.tu_path)]
    return [graphdata.synth_generate(_synth_spec(cfg), cfg.seeds.data)]


def _synth_spec(cfg: ExperimentConfig) -> graphdata.SynthSpec:
    d = cfg.data
    return graphdata.SynthSpec(
        n_graphs=d.n_graphs,
        motifs=_motif_tuple(cfg),
        nodes=(d.nodes_lo, d.nodes_hi),
        feature_dim=d.feature_dim,
        noise=d.noise,
    )


def partition_fingerprint(partition: graphdata.ClientPartition) -> str:
    """Stable hash over the client index assignments."""
    digest = hashlib.sha256()
    for cid in sorted(partition.assignments):
        digest.update(str(cid).encode())
        digest.update(np.asarray(partition.assignments[cid], dtype=np.int64).tobytes())
    return digest.hexdigest()


def build_simulation(
    cfg: ExperimentConfig,
) -> Tuple[ServerState, List[ClientState], str]:
    """Materialize datasets, partition, and initial states for a config.

    Returns (server, clients, partition fingerprint).
    """
    pool = _load_pool(cfg)
    partition = graphdata.partition_clients(
        pool,
        cfg.run.clients,
        cfg.data.partition,
        skew=cfg.data.skew,
        seed=cfg.seeds.data,
    )
    arch = gnn.ArchConfig(
        feature_dim=pool[0].feature_dim,
        hidden=cfg.run.hidden,
        classes=pool[0].num_classes,
    )
    theta0 = gnn.init_params(arch, cfg.seeds.init)
    if cfg.run.ablation == "s_only":
        theta0 = gnn.zeros_like_params(theta0)

    c = cfg.client
    client_cfg = ClientConfig(
        eta=c.eta,
        alpha=c.alpha,
        nu=c.nu,
        sparsifier=Sparsifier(c.sparsifier, cut=c.cut_sparse, beta=c.beta),
        local_epochs=0 if cfg.run.ablation == "s_only" else c.local_epochs,
        finetune_epochs=0 if cfg.run.ablation == "w_only" else c.finetune_epochs,
        batch_size=c.batch_size,
        use_correction=c.use_correction,
        proxskip_h=c.proxskip_h,
        mu_prox=c.mu_prox,
    )
    ratios = (cfg.data.train_frac, cfg.data.val_frac, cfg.data.test_frac)
    clients = []
    for cid in range(cfg.run.clients):
        source = pool[cid] if cfg.data.partition == graphdata.MODE_CROSS_DATASET else pool[0]
        local = source.subset(partition.assignments[cid], name=f"client{cid}")
        train, val, test = graphdata.split_dataset(local, ratios, cfg.seeds.data + 1000 + cid)
        clients.append(
            ClientState(
                id=cid,
                w=gnn.clone_params(theta0),
                s=gnn.zeros_like_params(theta0),
                h=gnn.zeros_like_params(theta0),
                theta_view=gnn.clone_params(theta0),
                train=train,
                val=val,
                test=test,
                cfg=client_cfg,
                rng=np.random.default_rng([cfg.seeds.data, 2000 + cid]),
            )
        )
    s = cfg.server
    server = ServerState(
        theta=gnn.clone_params(theta0),
        p=0.0 if cfg.run.ablation == "s_only" else s.p,
        rho=s.rho,
        tau_lowrank=s.tau_lowrank,
        r_bits=s.r_bits,
        eta=c.eta,
        downlink_scheme=s.downlink_scheme,
        dropout=(s.dropout_a, s.dropout_b) if s.dropout_a > 0 else None,
        bandwidth_bps=s.bandwidth_mbps * 1e6,
        latency_s=s.latency_ms / 1e3,
        coin_rng=np.random.default_rng(cfg.seeds.coin),
        sampling_rng=np.random.default_rng(cfg.seeds.sampling),
        dropout_rng=np.random.default_rng(cfg.seeds.dropout),
    )
    return server, clients, partition_fingerprint(partition)


# ---------------------------------------------------------------------------
# Running


@dataclass
class RunSummary:
    """Everything a finished run reports; aggregates derive from the rounds."""

    records: List[RoundRecord]
    partition_hash: str
    algorithm: str
    r_bits: int
    final_acc_mean: float = 0.0
    final_acc_std: float = 0.0
    total_uplink_bits: int = 0
    total_downlink_bits: int = 0
    dense_equivalent_bits: int = 0
    per_element_ratio_32bit: float = 0.0

    def __post_init__(self):
        last = self.records[-1]
        self.final_acc_mean = float(np.mean(last.test_accuracy))
        self.final_acc_std = float(np.std(last.test_accuracy))
        self.total_uplink_bits = sum(r.uplink_bits for r in self.records)
        self.total_downlink_bits = sum(r.downlink_bits for r in self.records)
        # Naive per-element accounting against a 32-bit dense baseline;
        # the measured wire bits above are the second accounting.
        self.per_element_ratio_32bit = self.r_bits / 32.0

    def lowrank_rank_trajectory(self) -> List[Optional[float]]:
        return [r.lowrank_rank_ratio for r in self.records]

    def lowrank_param_trajectory(self) -> List[Optional[float]]:
        return [r.lowrank_param_ratio for r in self.records]

    def sparsity_trajectory(self) -> List[float]:
        return [r.sparsity_ratio for r in self.records]


def _dense_equivalent_bits(
    template: Dict[str, np.ndarray], records: Sequence[RoundRecord], n_clients: int
) -> int:
    """Bits the same transfers would have cost with 64-bit dense bodies."""
    up_unit = compress.payload_bits(
        compress.encode_payload(
            {f"w.{k}": v for k, v in template.items()}
            | {f"h.{k}": v for k, v in template.items()},
            compress.SCHEME_DENSE,
        )
    )
    down_unit = compress.payload_bits(compress.encode_payload(template, compress.SCHEME_DENSE))
    total = 0
    for rec in records:
        if rec.communicated:
            total += up_unit * len(rec.participants) + down_unit * n_clients
    return total


_ROUND_FNS = {
    "cefgl": fedcore.run_round,
    "fedavg": fedcore.fedavg_round,
    "fedprox": fedcore.fedprox_round,
}


def _execute(cfg: ExperimentConfig):
    started = time.perf_counter()
    server, clients, fingerprint = build_simulation(cfg)
    round_fn = _ROUND_FNS[cfg.run.algorithm]
    rounds: List[RoundRecord] = []
    for t in range(cfg.run.rounds):
        try:
            rounds.append(round_fn(server, clients))
        except Exception as exc:
            exc.args = (f"round {t}: {exc}",) + exc.args[1:]
            raise
    summary = RunSummary(
        records=rounds,
        partition_hash=fingerprint,
        algorithm=cfg.run.algorithm,
        r_bits=cfg.server.r_bits,
    )
    summary.dense_equivalent_bits = _dense_equivalent_bits(server.theta, rounds, len(clients))
    log.info(
        "run finished: %d rounds, final acc %.4f, elapsed %.2fs",
        cfg.run.rounds,
        summary.final_acc_mean,
        time.perf_counter() - started,
    )
    return summary, server, clients


def run_experiment(cfg: ExperimentConfig) -> RunSummary:
    """Execute the configured number of rounds and summarize.

    Deterministic for fixed seeds; failures are re-raised with the round
    index prepended.  Output files are written by emit_metrics, not here.
    """
    summary, _, _ = _execute(cfg)
    return summary


def summarize_seeds(summaries: Sequence[RunSummary]) -> Tuple[float, float]:
    """Mean and std of final accuracy across repeated-seed runs."""
    finals = [s.final_acc_mean for s in summaries]
    return float(np.mean(finals)), float(np.std(finals))


def run_sweep(cfg: ExperimentConfig, axis: str, values: Sequence) -> List[RunSummary]:
    """One run per axis value with shared seeds; partitions must pair up."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r} (choose from {sorted(SWEEP_AXES)})")
    section_name, field_name = SWEEP_AXES[axis]
    summaries = []
    for value in values:
        point = copy.deepcopy(cfg)
        section = getattr(point, section_name)
        coerced = _coerce(str(value), getattr(section, field_name), axis)
        setattr(section, field_name, coerced)
        _validate(point)
        summaries.append(run_experiment(point))
    hashes = {s.partition_hash for s in summaries}
    if len(hashes) > 1:
        raise IoError("sweep points diverged: dataset partitions differ across values")
    return summaries


# ---------------------------------------------------------------------------
# Persistence


def _record_to_dict(rec: RoundRecord) -> dict:
    return dataclasses.asdict(rec)


def _record_from_dict(d: dict) -> RoundRecord:
    return RoundRecord(**d)


CSV_COLUMNS = [
    "round",
    "communicated",
    "uplink_bits",
    "downlink_bits",
    "mean_acc",
    "mean_train_loss",
    "wall_time",
    "sparsity_ratio",
    "lowrank_rank_ratio",
    "lowrank_param_ratio",
]


def _csv_row(rec: RoundRecord) -> dict:
    return {
        "round": rec.t,
        "communicated": int(rec.communicated),
        "uplink_bits": rec.uplink_bits,
        "downlink_bits": rec.downlink_bits,
        "mean_acc": repr(float(np.mean(rec.test_accuracy))),
        "mean_train_loss": repr(float(np.mean(rec.train_loss))),
        "wall_time": repr(rec.wall_time),
        "sparsity_ratio": repr(rec.sparsity_ratio),
        "lowrank_rank_ratio": "" if rec.lowrank_rank_ratio is None else repr(rec.lowrank_rank_ratio),
        "lowrank_param_ratio": ""
        if rec.lowrank_param_ratio is None
        else repr(rec.lowrank_param_ratio),
    }


def emit_metrics(summary: RunSummary, sink) -> Path:
    """Write rounds.jsonl and summary.csv into the sink directory."""
    out = Path(sink)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps(_record_to_dict(rec), sort_keys=True, separators=(",", ":"))
        for rec in summary.records
    ]
    (out / "rounds.jsonl").write_text("\n".join(lines) + "\n")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rec in summary.records:
        writer.writerow(_csv_row(rec))
    (out / "summary.csv").write_text(buf.getvalue())
    return out


def load_summary(directory, algorithm: str = "", r_bits: int = 4) -> RunSummary:
    """Rebuild a RunSummary from rounds.jsonl, cross-checking summary.csv."""
    root = Path(directory)
    jsonl = root / "rounds.jsonl"
    if not jsonl.is_file():
        raise IoError(f"{jsonl} does not exist")
    records = []
    for line in jsonl.read_text().splitlines():
        if line.strip():
            records.append(_record_from_dict(json.loads(line)))
    if not records:
        raise IoError(f"{jsonl} holds no round records")
    summary = RunSummary(
        records=records, partition_hash="", algorithm=algorithm, r_bits=r_bits
    )
    csv_path = root / "summary.csv"
    if csv_path.is_file():
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) != len(records):
            raise IoError(
                f"summary.csv has {len(rows)} rows but rounds.jsonl has {len(records)}"
            )
        for row, rec in zip(rows, records):
            expect = _csv_row(rec)
            for col in ("round", "communicated", "uplink_bits", "downlink_bits", "mean_acc"):
                if str(expect[col]) != row[col]:
                    raise IoError(
                        f"summary.csv disagrees with rounds.jsonl at round {rec.t} ({col})"
                    )
    return summary


def save_checkpoint(states, path) -> None:
    """Serialize any picklable training state with a version header."""
    payload = pickle.dumps(states, protocol=pickle.HIGHEST_PROTOCOL)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(payload)


def load_checkpoint(path):
    p = Path(path)
    if not p.is_file():
        raise IoError(f"checkpoint {p} does not exist")
    blob = p.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"{p} is not a checkpoint file")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version} != {CHECKPOINT_VERSION}")
    return pickle.loads(blob[6:])


def run_and_persist(cfg: ExperimentConfig, out_dir=None) -> RunSummary:
    """run_experiment plus the standard output files and final checkpoint."""
    out = Path(out_dir if out_dir is not None else cfg.run.out_dir)
    summary, server, clients = _execute(cfg)
    emit_metrics(summary, out)
    save_checkpoint((server, clients, cfg.run.rounds), out / "checkpoint.bin")
    return summary
