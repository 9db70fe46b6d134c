"""Graph classification datasets: TU-format ingestion, synthetic generation,
train/val/test splitting and client partitioning.

Everything here is a pure function of its inputs and an explicit seed, so
datasets and partitions are reproducible and safely shareable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import (
    BadMode,
    BadRatios,
    BadSpec,
    IndexOutOfRange,
    MissingFile,
    ParseError,
)

MODE_IID = "iid"
MODE_LABEL_SKEW = "label_skew"
MODE_CROSS_DATASET = "cross_dataset"

MOTIFS = ("triangles", "star", "ring", "path", "clique")


@dataclass
class Graph:
    """One undirected graph with node features and a class label."""

    n: int
    edges: Tuple[Tuple[int, int], ...]
    features: np.ndarray
    label: int
    adj: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("graphs must have at least one node")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.shape[0] != self.n:
            raise ValueError(f"feature rows {feats.shape[0]} != node count {self.n}")
        if not np.isfinite(feats).all():
            raise ValueError("node features must be finite")
        self.features = feats
        canonical = [(min(i, j), max(i, j)) for i, j in self.edges]
        if len(set(canonical)) != len(canonical):
            raise ValueError("duplicate undirected edge")
        for i, j in canonical:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n}")
        self.edges = tuple(canonical)
        adj = np.zeros((self.n, self.n))
        for i, j in canonical:
            adj[i, j] = 1.0
            adj[j, i] = 1.0
        self.adj = adj


@dataclass
class GraphDataset:
    """An ordered collection of graphs sharing a feature and label space."""

    graphs: List[Graph]
    num_classes: int
    feature_dim: int
    name: str = ""

    def __post_init__(self):
        for g in self.graphs:
            if not 0 <= g.label < self.num_classes:
                raise ValueError(f"label {g.label} outside [0, {self.num_classes})")
            if g.features.shape[1] != self.feature_dim:
                raise ValueError("inconsistent feature dimension")

    def __len__(self) -> int:
        return len(self.graphs)

    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def subset(self, indices: Sequence[int], name: str = "") -> "GraphDataset":
        return GraphDataset(
            graphs=[self.graphs[i] for i in indices],
            num_classes=self.num_classes,
            feature_dim=self.feature_dim,
            name=name or self.name,
        )


@dataclass
class ClientPartition:
    """Disjoint index assignments of a dataset pool to clients."""

    assignments: Dict[int, Tuple[int, ...]]
    mode: str


# ---------------------------------------------------------------------------
# TU-format loading


def _read_lines(path: Path) -> List[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def _parse_int(token: str, path: Path, lineno: int) -> int:
    try:
        return int(token)
    except ValueError as exc:
        raise ParseError(f"{path.name}:{lineno}: expected an integer, got {token!r}") from exc


def load_tu_dataset(dir_path) -> GraphDataset:
    """Load a TU-style text dataset from a directory.

    The directory must contain ``<DS>_A.txt``, ``<DS>_graph_indicator.txt``
    and ``<DS>_graph_labels.txt``; node features come from
    ``<DS>_node_attributes.txt`` when present, else from one-hot encoded
    ``<DS>_node_labels.txt``, else a constant scalar feature.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise MissingFile(f"dataset directory {root} does not exist")
    candidates = sorted(root.glob("*_A.txt"))
    if not candidates:
        raise MissingFile(f"no *_A.txt edge file under {root}")
    prefix = candidates[0].name[: -len("_A.txt")]

    def required(suffix: str) -> Path:
        p = root / f"{prefix}_{suffix}.txt"
        if not p.is_file():
            raise MissingFile(f"missing {p.name} in {root}")
        return p

    indicator_path = required("graph_indicator")
    labels_path = required("graph_labels")

    node_graph: List[int] = []
    for lineno, line in enumerate(_read_lines(indicator_path), start=1):
        gid = _parse_int(line, indicator_path, lineno)
        if gid < 1:
            raise ParseError(f"{indicator_path.name}:{lineno}: graph ids are 1-based")
        node_graph.append(gid)
    if not node_graph:
        raise ParseError(f"{indicator_path.name}:1: no nodes declared")
    n_nodes = len(node_graph)

    raw_labels = [
        _parse_int(line, labels_path, lineno)
        for lineno, line in enumerate(_read_lines(labels_path), start=1)
    ]
    n_graphs = len(raw_labels)
    if max(node_graph) > n_graphs:
        raise ParseError(
            f"{indicator_path.name}: node assigned to graph {max(node_graph)} "
            f"but only {n_graphs} labels present"
        )

    members: List[List[int]] = [[] for _ in range(n_graphs)]
    for node, gid in enumerate(node_graph):
        members[gid - 1].append(node)
    for gid, mem in enumerate(members, start=1):
        if not mem:
            raise ParseError(f"{labels_path.name}: graph {gid} has zero nodes")
    local_index = {}
    for mem in members:
        for pos, node in enumerate(mem):
            local_index[node] = pos

    edges_per_graph: List[set] = [set() for _ in range(n_graphs)]
    edge_path = required("A")
    for lineno, line in enumerate(_read_lines(edge_path), start=1):
        pieces = line.split(",")
        if len(pieces) != 2:
            raise ParseError(f"{edge_path.name}:{lineno}: expected 'i, j'")
        a = _parse_int(pieces[0].strip(), edge_path, lineno)
        b = _parse_int(pieces[1].strip(), edge_path, lineno)
        if not (1 <= a <= n_nodes and 1 <= b <= n_nodes):
            raise IndexOutOfRange(f"{edge_path.name}:{lineno}: node id out of range")
        ga, gb = node_graph[a - 1], node_graph[b - 1]
        if ga != gb:
            raise ParseError(f"{edge_path.name}:{lineno}: edge crosses graphs {ga} and {gb}")
        la, lb = local_index[a - 1], local_index[b - 1]
        if la != lb:
            edges_per_graph[ga - 1].add((min(la, lb), max(la, lb)))

    attributes_path = root / f"{prefix}_node_attributes.txt"
    node_labels_path = root / f"{prefix}_node_labels.txt"
    if attributes_path.is_file():
        rows = []
        for lineno, line in enumerate(_read_lines(attributes_path), start=1):
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError as exc:
                raise ParseError(f"{attributes_path.name}:{lineno}: bad attribute row") from exc
        if len(rows) != n_nodes:
            raise ParseError(f"{attributes_path.name}: {len(rows)} rows for {n_nodes} nodes")
        widths = {len(row) for row in rows}
        if len(widths) != 1:
            raise ParseError(f"{attributes_path.name}: ragged attribute rows")
        features = np.asarray(rows, dtype=np.float64)
    elif node_labels_path.is_file():
        node_labels = [
            _parse_int(line, node_labels_path, lineno)
            for lineno, line in enumerate(_read_lines(node_labels_path), start=1)
        ]
        if len(node_labels) != n_nodes:
            raise ParseError(
                f"{node_labels_path.name}: {len(node_labels)} rows for {n_nodes} nodes"
            )
        if min(node_labels) < 0:
            raise ParseError(f"{node_labels_path.name}: node labels must be >= 0")
        dim = max(node_labels) + 1
        features = np.zeros((n_nodes, dim))
        features[np.arange(n_nodes), node_labels] = 1.0
    else:
        features = np.ones((n_nodes, 1))

    label_space = sorted(set(raw_labels))
    remap = {lab: i for i, lab in enumerate(label_space)}
    graphs = []
    for gid in range(n_graphs):
        mem = members[gid]
        graphs.append(
            Graph(
                n=len(mem),
                edges=tuple(sorted(edges_per_graph[gid])),
                features=features[mem],
                label=remap[raw_labels[gid]],
            )
        )
    return GraphDataset(
        graphs=graphs,
        num_classes=len(label_space),
        feature_dim=features.shape[1],
        name=prefix,
    )


def write_tu_fixture(dir_path, prefix: str = "FIXTURE") -> Path:
    """Write the tiny two-graph TU fixture (a triangle and a single edge)."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    # Edges appear in both directions, as in the public format.
    (root / f"{prefix}_A.txt").write_text(
        "1, 2\n2, 1\n1, 3\n3, 1\n2, 3\n3, 2\n4, 5\n5, 4\n"
    )
    (root / f"{prefix}_graph_indicator.txt").write_text("1\n1\n1\n2\n2\n")
    (root / f"{prefix}_graph_labels.txt").write_text("1\n2\n")
    (root / f"{prefix}_node_labels.txt").write_text("0\n0\n1\n1\n2\n")
    return root


# ---------------------------------------------------------------------------
# Synthetic generation


@dataclass
class SynthSpec:
    """Recipe for a structurally labelled synthetic dataset.

    Each class draws its topology from one motif generator and its node
    features from a class-specific mean plus Gaussian noise.
    """

    n_graphs: int = 80
    motifs: Tuple[str, ...] = ("triangles", "star")
    nodes: Tuple[int, int] = (6, 10)
    feature_dim: int = 4
    noise: float = 0.8


def _motif_edges(motif: str, n: int) -> List[Tuple[int, int]]:
    if motif == "triangles":
        edges = []
        blocks = n // 3
        for b in range(blocks):
            a = 3 * b
            edges += [(a, a + 1), (a + 1, a + 2), (a, a + 2)]
            if b > 0:
                edges.append((a - 1, a))
        for leftover in range(3 * blocks, n):
            edges.append((leftover - 1, leftover))
        return edges
    if motif == "star":
        return [(0, i) for i in range(1, n)]
    if motif == "ring":
        return [(i, (i + 1) % n) for i in range(n)]
    if motif == "path":
        return [(i, i + 1) for i in range(n - 1)]
    if motif == "clique":
        return [(i, j) for i in range(n) for j in range(i + 1, n)]
    raise BadSpec(f"unknown motif {motif!r}")


def synth_generate(spec: SynthSpec, seed: int) -> GraphDataset:
    """Deterministically generate a motif-labelled dataset for a seed.

    Labels are assigned round-robin, so class counts balance within one.
    """
    classes = len(spec.motifs)
    if classes < 1:
        raise BadSpec("need at least one motif class")
    if len(set(spec.motifs)) != classes:
        raise BadSpec("class motifs must be distinct")
    for motif in spec.motifs:
        if motif not in MOTIFS:
            raise BadSpec(f"unknown motif {motif!r}")
    if spec.n_graphs < classes:
        raise BadSpec("n_graphs must be >= number of classes")
    lo, hi = spec.nodes
    if lo < 3 or hi < lo:
        raise BadSpec("node range must satisfy 3 <= lo <= hi")
    if spec.feature_dim < 1:
        raise BadSpec("feature_dim must be >= 1")
    if spec.noise < 0:
        raise BadSpec("noise must be >= 0")

    rng = np.random.default_rng(seed)
    means = np.zeros((classes, spec.feature_dim))
    for c in range(classes):
        means[c, c % spec.feature_dim] = 1.0
    graphs = []
    for idx in range(spec.n_graphs):
        label = idx % classes
        n = int(rng.integers(lo, hi + 1))
        feats = means[label] + spec.noise * rng.standard_normal((n, spec.feature_dim))
        graphs.append(
            Graph(
                n=n,
                edges=tuple(_motif_edges(spec.motifs[label], n)),
                features=feats,
                label=label,
            )
        )
    return GraphDataset(
        graphs=graphs, num_classes=classes, feature_dim=spec.feature_dim, name="synth"
    )


# ---------------------------------------------------------------------------
# Splitting and partitioning


def split_dataset(
    d: GraphDataset, ratios: Tuple[float, float, float], seed: int
) -> Tuple[GraphDataset, GraphDataset, GraphDataset]:
    """Shuffle deterministically and split into train/val/test.

    Validation and test sizes are floors of their ratios; the remainder
    lands in train.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise BadRatios(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(d)
    n_val = int(math.floor(n * ratios[1]))
    n_test = int(math.floor(n * ratios[2]))
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    return (
        d.subset(perm[:n_train], name=f"{d.name}/train"),
        d.subset(perm[n_train : n_train + n_val], name=f"{d.name}/val"),
        d.subset(perm[n_train + n_val :], name=f"{d.name}/test"),
    )


def partition_clients(
    pool: Sequence[GraphDataset],
    k: int,
    mode: str,
    skew: float = 0.3,
    seed: int = 0,
) -> ClientPartition:
    """Assign dataset indices to k clients.

    ``iid`` shuffles one dataset into near-equal shares, ``label_skew``
    splits each class across clients by Dirichlet(skew) proportions, and
    ``cross_dataset`` gives client i the whole i-th pool entry.
    """
    if k < 1:
        raise BadMode("need at least one client")
    if mode == MODE_CROSS_DATASET:
        if len(pool) != k:
            raise BadMode(f"cross_dataset needs exactly {k} datasets, got {len(pool)}")
        return ClientPartition(
            assignments={i: tuple(range(len(pool[i]))) for i in range(k)},
            mode=mode,
        )
    if mode not in (MODE_IID, MODE_LABEL_SKEW):
        raise BadMode(f"unknown partition mode {mode!r}")
    if len(pool) != 1:
        raise BadMode(f"{mode} partitioning needs a single dataset pool")
    data = pool[0]
    rng = np.random.default_rng(seed)
    shares: List[List[int]] = [[] for _ in range(k)]
    if mode == MODE_IID:
        for cid, chunk in enumerate(np.array_split(rng.permutation(len(data)), k)):
            shares[cid] = list(chunk)
    else:
        if skew <= 0:
            raise BadMode("label_skew needs a positive Dirichlet concentration")
        labels = data.labels()
        for cls in range(data.num_classes):
            idx = np.nonzero(labels == cls)[0]
            rng.shuffle(idx)
            proportions = rng.dirichlet(np.full(k, skew))
            cuts = (np.cumsum(proportions) * len(idx)).astype(int)[:-1]
            for cid, chunk in enumerate(np.split(idx, cuts)):
                shares[cid].extend(chunk)
    return ClientPartition(
        assignments={cid: tuple(sorted(int(i) for i in shares[cid])) for cid in range(k)},
        mode=mode,
    )


def pad_to_common(pool: Sequence[GraphDataset]) -> List[GraphDataset]:
    """Zero-pad features and unify the label-space size across datasets."""
    d_max = max(ds.feature_dim for ds in pool)
    c_max = max(ds.num_classes for ds in pool)
    out = []
    for ds in pool:
        pad = d_max - ds.feature_dim
        graphs = [
            Graph(
                n=g.n,
                edges=g.edges,
                features=np.pad(g.features, ((0, 0), (0, pad))) if pad else g.features,
                label=g.label,
            )
            for g in ds.graphs
        ]
        out.append(
            GraphDataset(graphs=graphs, num_classes=c_max, feature_dim=d_max, name=ds.name)
        )
    return out
