"""Immutable sparse graph representation, normalization, synthetic data, file I/O.

Undirected edges are stored once in canonical orientation (u < v); the
directed CSR expansion and the self-loop-augmented pattern used by the
symmetric normalization are derived deterministically at construction time.
That single source of truth is what lets the edge-noise sampler perturb each
undirected edge exactly once and apply the decision to both directions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import SparseCSR

# The normalized adjacency is an ordinary constant CSR matrix.
NormalizedAdjacency = SparseCSR


class GraphFormatError(ValueError):
    """Malformed container directory; message names the file/line/field."""


class GraphInvariantError(ValueError):
    """A constructed graph violates a structural invariant."""


class DegenerateGraphError(ValueError):
    """Generated graph has no edges."""


@dataclass(frozen=True)
class NormPlan:
    """Precomputed layout of the self-loop-augmented pattern A + I.

    ``pos_uv``/``pos_vu`` map each canonical undirected edge to its two
    directed slots in the merged CSR value array; ``pos_diag`` maps each node
    to its self-loop slot.
    """

    indptr: np.ndarray
    indices: np.ndarray
    pos_uv: np.ndarray
    pos_vu: np.ndarray
    pos_diag: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    num_edges: int
    feat_dim: int
    edge_u: np.ndarray  # canonical endpoints, u < v, sorted lexicographically
    edge_v: np.ndarray
    indptr: np.ndarray  # CSR over the directed expansion (no self-loops)
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None
    plan: NormPlan

    @property
    def num_classes(self) -> int | None:
        if self.labels is None:
            return None
        return int(self.labels.max()) + 1

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name, mask in (("train", self.train), ("val", self.val), ("test", self.test)):
            if mask.dtype != np.bool_:
                raise GraphInvariantError(f"split mask '{name}' must be boolean")
            if not mask.any():
                raise GraphInvariantError(f"split mask '{name}' is empty")
        if np.any(self.train & self.val) or np.any(self.train & self.test) \
                or np.any(self.val & self.test):
            raise GraphInvariantError("split masks overlap")


def _freeze(*arrays):
    for a in arrays:
        a.flags.writeable = False


def _build_plan(num_nodes: int, edge_u: np.ndarray, edge_v: np.ndarray) -> NormPlan:
    e = edge_u.shape[0]
    rows = np.concatenate([edge_u, edge_v, np.arange(num_nodes, dtype=np.int64)])
    cols = np.concatenate([edge_v, edge_u, np.arange(num_nodes, dtype=np.int64)])
    order = np.lexsort((cols, rows))
    rank = np.empty(order.shape[0], dtype=np.int64)
    rank[order] = np.arange(order.shape[0], dtype=np.int64)
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    plan = NormPlan(indptr=indptr, indices=cols[order],
                    pos_uv=rank[:e], pos_vu=rank[e:2 * e], pos_diag=rank[2 * e:])
    _freeze(plan.indptr, plan.indices, plan.pos_uv, plan.pos_vu, plan.pos_diag)
    return plan


def build_graph(num_nodes: int, edges: np.ndarray, features: np.ndarray,
                labels: np.ndarray | None = None) -> Graph:
    """Construct a validated Graph from an undirected edge array of shape [E, 2].

    Edges are canonicalized to u < v and deduplicated; both orientations of
    the same pair collapse to one undirected edge. Self-loops are rejected.
    """
    features = np.ascontiguousarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != num_nodes:
        raise GraphInvariantError(
            f"features must be [num_nodes x feat_dim], got {features.shape} for {num_nodes} nodes")
    if not np.all(np.isfinite(features)):
        raise GraphInvariantError("features contain non-finite values")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        if edges.min() < 0 or edges.max() >= num_nodes:
            raise GraphInvariantError(f"edge endpoint out of range [0, {num_nodes})")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GraphInvariantError("self-loops are not allowed")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        canon = np.unique(np.stack([lo, hi], axis=1), axis=0)
        edge_u, edge_v = canon[:, 0].copy(), canon[:, 1].copy()
    else:
        edge_u = np.empty(0, dtype=np.int64)
        edge_v = np.empty(0, dtype=np.int64)

    rows = np.concatenate([edge_u, edge_v])
    cols = np.concatenate([edge_v, edge_u])
    order = np.lexsort((cols, rows))
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    indices = cols[order]

    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (num_nodes,):
            raise GraphInvariantError(f"labels must have shape ({num_nodes},), got {labels.shape}")
        if labels.size and labels.min() < 0:
            raise GraphInvariantError("labels must be non-negative")
        _freeze(labels)

    plan = _build_plan(num_nodes, edge_u, edge_v)
    _freeze(edge_u, edge_v, indptr, indices, features)
    g = Graph(num_nodes=num_nodes, num_edges=int(edge_u.shape[0]),
              feat_dim=int(features.shape[1]), edge_u=edge_u, edge_v=edge_v,
              indptr=indptr, indices=indices, features=features, labels=labels, plan=plan)
    validate(g)
    return g


def validate(g: Graph) -> None:
    """Check the structural invariants; raises GraphInvariantError on violation."""
    if np.any(np.diff(g.indptr) < 0):
        raise GraphInvariantError("CSR row pointers are not non-decreasing")
    for u in range(g.num_nodes):
        row = g.indices[g.indptr[u]:g.indptr[u + 1]]
        if row.size and (np.any(np.diff(row) <= 0) or row.min() < 0 or row.max() >= g.num_nodes):
            raise GraphInvariantError(f"row {u}: column indices not strictly increasing in range")
        if np.any(row == u):
            raise GraphInvariantError(f"row {u}: self-loop stored in adjacency")
    if not np.all(np.isfinite(g.features)):
        raise GraphInvariantError("features contain non-finite values")
    # symmetry: every directed entry's reverse must exist
    rows = np.repeat(np.arange(g.num_nodes), np.diff(g.indptr))
    fwd = set(zip(rows.tolist(), g.indices.tolist()))
    for r, c in fwd:
        if (c, r) not in fwd:
            raise GraphInvariantError(f"adjacency asymmetric: ({r},{c}) present without ({c},{r})")


# ---------------------------------------------------------------------------
# symmetric normalization

def masked_hat_values(g: Graph, keep: np.ndarray) -> np.ndarray:
    """Value array of D̃^{-1/2}(A_masked + I)D̃^{-1/2} for per-edge keep weights.

    This is the reference arithmetic; the differentiable path in the noise
    module mirrors it operation for operation so that an all-ones keep vector
    reproduces ``normalize`` bit for bit.
    """
    plan = g.plan
    deg_u = np.zeros(g.num_nodes)
    deg_v = np.zeros(g.num_nodes)
    np.add.at(deg_u, g.edge_u, keep)
    np.add.at(deg_v, g.edge_v, keep)
    d_tilde = (deg_u + deg_v) + 1.0
    dinv = np.power(d_tilde, -0.5)
    vals_und = (keep * dinv[g.edge_u]) * dinv[g.edge_v]
    out = np.zeros(plan.nnz)
    out[plan.pos_uv] = vals_und
    out[plan.pos_vu] = vals_und
    out[plan.pos_diag] = dinv * dinv
    return out


def normalize(g: Graph) -> SparseCSR:
    """Symmetric-normalized adjacency with self-loops, Â = D̃^{-1/2}(A+I)D̃^{-1/2}.

    Isolated nodes get Â_uu = 1 through their self-loop; never an error.
    """
    values = masked_hat_values(g, np.ones(g.num_edges))
    return SparseCSR((g.num_nodes, g.num_nodes), g.plan.indptr, g.plan.indices,
                     values, symmetric=True)


# ---------------------------------------------------------------------------
# splits and synthetic graphs

def make_split(num_nodes: int, seed: int,
               train_frac: float = 0.1, val_frac: float = 0.1) -> SplitMasks:
    """Uniformly random train/val/test split (default 10/10/80)."""
    if num_nodes < 3:
        raise GraphInvariantError("need at least 3 nodes for a non-empty split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_nodes)
    n_train = max(1, int(num_nodes * train_frac))
    n_val = max(1, int(num_nodes * val_frac))
    train = np.zeros(num_nodes, dtype=bool)
    val = np.zeros(num_nodes, dtype=bool)
    test = np.zeros(num_nodes, dtype=bool)
    train[perm[:n_train]] = True
    val[perm[n_train:n_train + n_val]] = True
    test[perm[n_train + n_val:]] = True
    return SplitMasks(train=train, val=val, test=test)


def generate_sbm(n_per_block: int, num_blocks: int, p_in: float, p_out: float,
                 feat_dim: int, feat_shift: float, seed: int) -> tuple[Graph, SplitMasks]:
    """Stochastic block model with Gaussian features shifted per block.

    Features are unit Gaussian plus a per-block mean offset of magnitude
    ``feat_shift`` along a block-specific coordinate axis. Labels are block
    ids; the split is a uniformly random 10/10/80.
    """
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if feat_dim < 1:
        raise ValueError("feat_dim must be >= 1")
    n = n_per_block * num_blocks
    rng = np.random.default_rng(seed)
    blocks = np.repeat(np.arange(num_blocks), n_per_block)

    edge_chunks = []
    for bi in range(num_blocks):
        for bj in range(bi, num_blocks):
            oi, oj = bi * n_per_block, bj * n_per_block
            draw = rng.random((n_per_block, n_per_block))
            if bi == bj:
                mask = np.triu(draw < p_in, k=1)
            else:
                mask = draw < p_out
            ui, vj = np.nonzero(mask)
            if ui.size:
                edge_chunks.append(np.stack([ui + oi, vj + oj], axis=1))
    if not edge_chunks:
        raise DegenerateGraphError("degenerate SBM: no edges were generated")
    edges = np.concatenate(edge_chunks, axis=0)

    features = rng.normal(size=(n, feat_dim))
    for b in range(num_blocks):
        features[blocks == b, b % feat_dim] += feat_shift

    split_seed = int(rng.integers(2 ** 31))
    g = build_graph(n, edges, features, labels=blocks)
    return g, make_split(n, split_seed)


# ---------------------------------------------------------------------------
# container directory I/O

def save_graph(g: Graph, dir_path, splits: SplitMasks | None = None,
               split_seed: int | None = None) -> None:
    """Write the container format: header.json, edges.tsv, features.csv,
    optional labels.csv and splits.json. Features round-trip bit-exactly."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    header = {"num_nodes": g.num_nodes, "feat_dim": g.feat_dim,
              "num_classes": g.num_classes}
    if split_seed is not None:
        header["split_seed"] = int(split_seed)
    (d / "header.json").write_text(json.dumps(header, indent=2) + "\n")
    with open(d / "edges.tsv", "w") as f:
        for u, v in zip(g.edge_u.tolist(), g.edge_v.tolist()):
            f.write(f"{u}\t{v}\n")
    with open(d / "features.csv", "w") as f:
        for row in g.features:
            f.write(",".join(repr(float(x)) for x in row) + "\n")
    if g.labels is not None:
        with open(d / "labels.csv", "w") as f:
            f.write("\n".join(str(int(x)) for x in g.labels) + "\n")
    if splits is not None:
        payload = {"train": np.nonzero(splits.train)[0].tolist(),
                   "val": np.nonzero(splits.val)[0].tolist(),
                   "test": np.nonzero(splits.test)[0].tolist()}
        (d / "splits.json").write_text(json.dumps(payload) + "\n")


def _parse_header(d: Path) -> dict:
    path = d / "header.json"
    if not path.exists():
        raise GraphFormatError(f"{path}: missing header.json")
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise GraphFormatError(f"{path}: invalid JSON ({e})") from e
    for key in ("num_nodes", "feat_dim"):
        if key not in header:
            raise GraphFormatError(f"{path}: missing required field '{key}'")
        if not isinstance(header[key], int) or header[key] < 1:
            raise GraphFormatError(f"{path}: field '{key}' must be a positive integer")
    return header


def _parse_edges(d: Path, num_nodes: int) -> np.ndarray:
    path = d / "edges.tsv"
    if not path.exists():
        raise GraphFormatError(f"{path}: missing edges.tsv")
    edges = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path} line {lineno}: expected two columns, got {len(parts)}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"{path} line {lineno}: non-integer endpoint {parts!r}")
            if u == v:
                raise GraphFormatError(f"{path} line {lineno}: self-loop ({u},{v}) not allowed")
            if not (0 <= u < num_nodes and 0 <= v < num_nodes):
                raise GraphFormatError(
                    f"{path} line {lineno}: endpoint out of range [0, {num_nodes})")
            edges.append((u, v))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def _parse_features(d: Path, num_nodes: int, feat_dim: int) -> np.ndarray:
    path = d / "features.csv"
    if not path.exists():
        raise GraphFormatError(f"{path}: missing features.csv")
    out = np.empty((num_nodes, feat_dim))
    count = 0
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if count >= num_nodes:
                raise GraphFormatError(f"{path} line {lineno}: more rows than num_nodes={num_nodes}")
            parts = line.split(",")
            if len(parts) != feat_dim:
                raise GraphFormatError(
                    f"{path} line {lineno}: expected {feat_dim} columns, found {len(parts)}")
            try:
                out[count] = np.asarray(parts, dtype=np.float64)
            except ValueError:
                raise GraphFormatError(f"{path} line {lineno}: non-numeric feature value")
            if not np.all(np.isfinite(out[count])):
                raise GraphFormatError(f"{path} line {lineno}: non-finite feature value")
            count += 1
    if count != num_nodes:
        raise GraphFormatError(f"{path}: feature row count {count} != num_nodes {num_nodes}")
    return out


def _parse_labels(d: Path, num_nodes: int) -> np.ndarray | None:
    path = d / "labels.csv"
    if not path.exists():
        return None
    values = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(int(line))
            except ValueError:
                raise GraphFormatError(f"{path} line {lineno}: non-integer label {line!r}")
    if len(values) != num_nodes:
        raise GraphFormatError(f"{path}: label count {len(values)} != num_nodes {num_nodes}")
    return np.asarray(values, dtype=np.int64)


def _parse_splits(d: Path, num_nodes: int) -> SplitMasks | None:
    path = d / "splits.json"
    if not path.exists():
        return None
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise GraphFormatError(f"{path}: invalid JSON ({e})") from e
    masks = {}
    for key in ("train", "val", "test"):
        if key not in payload:
            raise GraphFormatError(f"{path}: missing field '{key}'")
        idx = np.asarray(payload[key], dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= num_nodes):
            raise GraphFormatError(f"{path}: '{key}' index out of range [0, {num_nodes})")
        mask = np.zeros(num_nodes, dtype=bool)
        mask[idx] = True
        masks[key] = mask
    try:
        return SplitMasks(**masks)
    except GraphInvariantError as e:
        raise GraphFormatError(f"{path}: {e}") from e


def load_graph(dir_path) -> tuple[Graph, SplitMasks | None]:
    """Parse and validate a container directory.

    Missing splits.json falls back to a fresh 10/10/80 split seeded by the
    header's ``split_seed`` (0 when absent). Graphs with fewer than 3 nodes
    cannot carry a non-empty three-way split and load with ``None`` splits.
    """
    d = Path(dir_path)
    if not d.is_dir():
        raise GraphFormatError(f"{d}: not a directory")
    header = _parse_header(d)
    num_nodes, feat_dim = header["num_nodes"], header["feat_dim"]
    edges = _parse_edges(d, num_nodes)
    features = _parse_features(d, num_nodes, feat_dim)
    labels = _parse_labels(d, num_nodes)
    try:
        g = build_graph(num_nodes, edges, features, labels=labels)
    except GraphInvariantError as e:
        raise GraphFormatError(f"{d}: {e}") from e
    splits = _parse_splits(d, num_nodes)
    if splits is None and num_nodes >= 3:
        splits = make_split(num_nodes, int(header.get("split_seed", 0)))
    return g, splits
