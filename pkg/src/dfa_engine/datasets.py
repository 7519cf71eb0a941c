"""Synthetic generators and file loaders for the three task families.

Every dataset yields :class:`Batch` objects with integer labels; graph
datasets train full-batch with a node mask.
"""
from __future__ import annotations

import csv
import io
import pickle
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import normalize_adjacency
from .tensor import DTYPE, ParameterError, SeededRng

SPLITS = ("train", "val", "test")


class IngestionError(IOError):
    pass


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray  # integer class ids (or next-token ids)
    mask: np.ndarray | None = None


def _check_partition(masks: dict[str, np.ndarray], n: int, complete: bool = True) -> None:
    total = np.zeros(n, dtype=int)
    for m in masks.values():
        total += m.astype(int)
    if np.any(total > 1):
        raise ParameterError("split masks overlap")
    if complete and np.any(total == 0):
        raise ParameterError("some rows belong to no split")


# --------------------------------------------------------------------------
# tabular


@dataclass
class TabularDataset:
    features: np.ndarray
    labels: np.ndarray  # int class ids
    n_classes: int
    masks: dict[str, np.ndarray]
    metric: str = "accuracy"

    def __post_init__(self):
        _check_partition(self.masks, len(self.labels))

    @property
    def onehot(self) -> np.ndarray:
        out = np.zeros((len(self.labels), self.n_classes), dtype=DTYPE)
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out

    def train_batches(self, rng: SeededRng, batch_size: int):
        idx = np.flatnonzero(self.masks["train"])
        idx = idx[rng.permutation(len(idx))]
        for start in range(0, len(idx), batch_size):
            sel = idx[start:start + batch_size]
            yield Batch(self.features[sel], self.labels[sel])

    def eval_batches(self, split: str, batch_size: int | None = None):
        idx = np.flatnonzero(self.masks[split])
        if len(idx):
            yield Batch(self.features[idx], self.labels[idx])

    def full_batch(self) -> Batch:
        return Batch(self.features, self.labels)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            d = self.features.shape[1]
            w.writerow([f"x{i}" for i in range(d)] + ["label", "split"])
            split_of = _split_names(self.masks, len(self.labels))
            for row, lab, s in zip(self.features, self.labels, split_of):
                w.writerow([repr(float(v)) for v in row] + [int(lab), s])


def _split_names(masks, n):
    out = ["none"] * n
    for name, m in masks.items():
        for i in np.flatnonzero(m):
            out[i] = name
    return out


def _ratio_split(rng: SeededRng, n: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, np.ndarray]:
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    bounds = {"train": perm[:n_train], "val": perm[n_train:n_train + n_val], "test": perm[n_train + n_val:]}
    masks = {}
    for k, ix in bounds.items():
        m = np.zeros(n, dtype=bool)
        m[ix] = True
        masks[k] = m
    return masks


def gen_blobs(rng: SeededRng, n_per_class: int, n_classes: int, dim: int, spread: float,
              separation: float = 1.0) -> TabularDataset:
    """Isotropic Gaussian clusters centred on the vertices of a scaled simplex.

    Class c is centred at ``separation * e_c`` (``dim >= n_classes``), with
    per-coordinate standard deviation ``spread``. Split 80/10/10.
    """
    if n_per_class <= 0 or n_classes <= 0 or dim <= 0:
        raise ParameterError("blob counts and dimension must be positive")
    if dim < n_classes:
        raise ParameterError(f"dim={dim} must be >= n_classes={n_classes} to place simplex vertices")
    if spread < 0:
        raise ParameterError("spread must be non-negative")
    labels = np.repeat(np.arange(n_classes), n_per_class)
    means = separation * np.eye(n_classes, dim)
    noise = rng.normal(0.0, 1.0, size=(len(labels), dim)) * spread
    features = means[labels] + noise
    masks = _ratio_split(rng, len(labels))
    return TabularDataset(features.astype(DTYPE), labels, n_classes, masks)


# --------------------------------------------------------------------------
# graphs


@dataclass
class GraphDataset:
    adjacency: np.ndarray  # (n, n) {0,1}, symmetric, zero diagonal
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    masks: dict[str, np.ndarray]
    name: str = "graph"
    metric: str = "accuracy"
    _norm: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.adjacency.shape[0]
        if not np.array_equal(self.adjacency, self.adjacency.T):
            raise ParameterError("graph adjacency must be symmetric")
        if len(self.labels) != n or self.features.shape[0] != n:
            raise ParameterError("labels and features must have one row per node")
        _check_partition(self.masks, n, complete=False)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def normalized_adjacency(self) -> np.ndarray:
        if self._norm is None:
            self._norm = normalize_adjacency(self.adjacency)
        return self._norm

    def train_batches(self, rng: SeededRng, batch_size: int = 0):
        yield Batch(self.features, self.labels, self.masks["train"])

    def eval_batches(self, split: str, batch_size: int | None = None):
        yield Batch(self.features, self.labels, self.masks[split])

    def full_batch(self) -> Batch:
        return Batch(self.features, self.labels, np.ones(self.n_nodes, dtype=bool))

    def to_canonical_text(self) -> str:
        """Line-oriented dump: header, edges (i<j), features, labels, split masks."""
        out = io.StringIO()
        n, d = self.features.shape
        out.write(f"graph {self.name} nodes {n} features {d} classes {self.n_classes}\n")
        iu, ju = np.nonzero(np.triu(self.adjacency, 1))
        out.write(f"edges {len(iu)}\n")
        for i, j in zip(iu, ju):
            out.write(f"{i} {j}\n")
        for row in self.features:
            out.write(" ".join(repr(float(v)) for v in row) + "\n")
        out.write("labels " + " ".join(str(int(v)) for v in self.labels) + "\n")
        for s in SPLITS:
            out.write(f"{s} " + " ".join(str(int(i)) for i in np.flatnonzero(self.masks[s])) + "\n")
        return out.getvalue()

    @classmethod
    def from_canonical_text(cls, text: str) -> "GraphDataset":
        lines = text.splitlines()
        head = lines[0].split()
        name, n, d, c = head[1], int(head[3]), int(head[5]), int(head[7])
        m = int(lines[1].split()[1])
        adj = np.zeros((n, n), dtype=DTYPE)
        for line in lines[2:2 + m]:
            i, j = map(int, line.split())
            adj[i, j] = adj[j, i] = 1.0
        pos = 2 + m
        feats = np.array([[float(v) for v in lines[pos + k].split()] for k in range(n)], dtype=DTYPE).reshape(n, d)
        pos += n
        labels = np.array([int(v) for v in lines[pos].split()[1:]], dtype=np.int64)
        masks = {}
        for k, s in enumerate(SPLITS):
            mask = np.zeros(n, dtype=bool)
            mask[[int(v) for v in lines[pos + 1 + k].split()[1:]]] = True
            masks[s] = mask
        return cls(adj, feats, labels, c, masks, name)


def gen_sbm_graph(rng: SeededRng, n_per_community: int, k_communities: int, p_in: float, p_out: float,
                  feature_noise: float, feature_dim: int | None = None, train_per_class: int = 20,
                  val_fraction: float = 0.25) -> GraphDataset:
    """Stochastic block model with noisy one-hot community features.

    Features are the one-hot community (first ``k`` columns of a
    ``feature_dim``-wide vector) plus N(0, feature_noise^2) on every entry.
    Split: ``train_per_class`` labelled nodes per community, then
    ``val_fraction`` of all nodes for validation, the rest for test.
    """
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ParameterError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if n_per_community <= 0 or k_communities <= 0:
        raise ParameterError("community sizes must be positive")
    feature_dim = k_communities if feature_dim is None else feature_dim
    if feature_dim < k_communities:
        raise ParameterError("feature_dim must be >= number of communities")
    if train_per_class >= n_per_community:
        raise ParameterError("train_per_class must leave nodes for val/test")
    n = n_per_community * k_communities
    labels = np.repeat(np.arange(k_communities), n_per_community)
    probs = np.where(labels[:, None] == labels[None, :], p_in, p_out)
    draws = rng.random((n, n)) < probs
    upper = np.triu(draws, 1)
    adj = (upper | upper.T).astype(DTYPE)
    features = np.eye(k_communities, feature_dim)[labels] + rng.normal(0.0, 1.0, size=(n, feature_dim)) * feature_noise

    train = np.zeros(n, dtype=bool)
    for c in range(k_communities):
        members = np.flatnonzero(labels == c)
        train[members[rng.permutation(len(members))[:train_per_class]]] = True
    rest = np.flatnonzero(~train)
    rest = rest[rng.permutation(len(rest))]
    n_val = int(round(val_fraction * n))
    val = np.zeros(n, dtype=bool)
    val[rest[:n_val]] = True
    test = ~(train | val)
    return GraphDataset(adj, features.astype(DTYPE), labels, k_communities,
                        {"train": train, "val": val, "test": test}, name="sbm")


# --------------------------------------------------------------------------
# Planetoid citation graphs

PLANETOID_PARTS = ("x", "y", "tx", "ty", "allx", "ally", "graph")


class _PlanetoidUnpickler(pickle.Unpickler):
    """Only the classes that appear in Planetoid files may be reconstructed."""

    SPARSE = {"csr_matrix", "csc_matrix", "coo_matrix", "lil_matrix"}
    ALLOWED = {
        "numpy": {"ndarray", "dtype"},
        "numpy.core.multiarray": {"_reconstruct", "scalar"},
        "numpy._core.multiarray": {"_reconstruct", "scalar"},
        "copyreg": {"_reconstructor"},
        "copy_reg": {"_reconstructor"},
        "_codecs": {"encode"},
        "builtins": {"object", "dict", "list", "tuple", "set", "int", "float", "bytes", "bytearray"},
        "__builtin__": {"object", "dict", "list", "tuple", "set", "int", "float", "bytes", "bytearray"},
        "collections": {"OrderedDict", "defaultdict"},
    }

    def find_class(self, module, name):
        if module.startswith("scipy.sparse") and name in self.SPARSE:
            import scipy.sparse
            return getattr(scipy.sparse, name)
        if name in self.ALLOWED.get(module, ()):
            return super().find_class(module, name)
        raise pickle.UnpicklingError(f"disallowed class {module}.{name}")


def _load_part(path: Path):
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IngestionError(f"cannot open Planetoid file {path}: {exc}") from exc
    with fh:
        try:
            return _PlanetoidUnpickler(fh, encoding="latin1").load()
        except Exception as exc:
            raise IngestionError(f"malformed Planetoid file {path} at byte offset {fh.tell()}: {exc}") from exc


def _dense(m) -> np.ndarray:
    return np.asarray(m.todense() if hasattr(m, "todense") else m, dtype=DTYPE)


def load_planetoid(path, name: str = "cora") -> GraphDataset:
    """Parse ``ind.<name>.{x,y,tx,ty,allx,ally,graph,test.index}`` from ``path``.

    Accepted layout (the public Planetoid release): ``x``/``tx``/``allx`` are
    pickled scipy sparse feature matrices, ``y``/``ty``/``ally`` pickled
    one-hot numpy arrays, ``graph`` a pickled dict of adjacency lists and
    ``test.index`` one node id per line. Test rows are re-ordered into their
    indexed positions, citation edges are symmetrised and self loops dropped.
    Split: the first ``len(y)`` nodes train, the next 500 non-test nodes validate, the
    indexed nodes test.
    """
    root = Path(path)
    parts = {p: _load_part(root / f"ind.{name}.{p}") for p in PLANETOID_PARTS}
    index_path = root / f"ind.{name}.test.index"
    try:
        lines = index_path.read_text().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot open Planetoid file {index_path}: {exc}") from exc
    test_idx = []
    for lineno, line in enumerate(lines, 1):
        try:
            test_idx.append(int(line.strip()))
        except ValueError as exc:
            raise IngestionError(f"malformed Planetoid file {index_path} at line {lineno}: {line!r}") from exc
    test_idx = np.array(test_idx, dtype=np.int64)
    test_range = np.sort(test_idx)

    x, y, tx, ty, allx, ally = (_dense(parts[p]) for p in ("x", "y", "tx", "ty", "allx", "ally"))
    if name == "citeseer":
        # some test ids are isolated nodes missing from tx/ty; pad with zero rows
        full = np.arange(test_range.min(), test_range.max() + 1)
        tx_ext = np.zeros((len(full), tx.shape[1]), dtype=DTYPE)
        tx_ext[test_range - test_range.min()] = tx
        ty_ext = np.zeros((len(full), ty.shape[1]), dtype=DTYPE)
        ty_ext[test_range - test_range.min()] = ty
        tx, ty = tx_ext, ty_ext
        test_range_full = full
    else:
        test_range_full = test_range
    if tx.shape[0] != len(test_range_full):
        raise IngestionError(f"ind.{name}.tx has {tx.shape[0]} rows but test.index lists {len(test_range_full)}")

    features = np.vstack([allx, tx])
    labels_1h = np.vstack([ally, ty])
    features[test_idx] = features[test_range]
    labels_1h[test_idx] = labels_1h[test_range]
    n = features.shape[0]

    graph = parts["graph"]
    adj = np.zeros((n, n), dtype=DTYPE)
    for src, dsts in graph.items():
        for dst in dsts:
            if not (0 <= src < n and 0 <= dst < n):
                raise IngestionError(f"ind.{name}.graph references node {max(src, dst)} outside 0..{n - 1}")
            adj[src, dst] = 1.0
    adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 0.0)

    labels = labels_1h.argmax(axis=1).astype(np.int64)
    train = np.zeros(n, dtype=bool)
    train[: y.shape[0]] = True
    val = np.zeros(n, dtype=bool)
    val[y.shape[0]: y.shape[0] + 500] = True
    test = np.zeros(n, dtype=bool)
    test[test_range] = True
    val &= ~test  # only bites on graphs smaller than the standard layout
    return GraphDataset(adj, features, labels, labels_1h.shape[1], {"train": train, "val": val, "test": test},
                        name=name)


def write_planetoid(ds: GraphDataset, path, name: str, n_train: int, test_index: np.ndarray) -> None:
    """Write a graph in the Planetoid layout (used to fabricate fixtures).

    Nodes ``[0, n_train)`` become ``x``/``y``; ``test_index`` nodes go to
    ``tx``/``ty`` in the listed order; ``allx``/``ally`` hold every
    non-test node, which must be the leading block ``[0, n - len(test))``.
    """
    import scipy.sparse as sp

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    n = ds.n_nodes
    test_index = np.asarray(test_index, dtype=np.int64)
    n_all = n - len(test_index)
    if set(test_index.tolist()) != set(range(n_all, n)):
        raise ParameterError("test nodes must be the trailing block of node ids")
    onehot = np.eye(ds.n_classes)[ds.labels]
    objs = {
        "x": sp.csr_matrix(ds.features[:n_train]),
        "y": onehot[:n_train],
        "allx": sp.csr_matrix(ds.features[:n_all]),
        "ally": onehot[:n_all],
        "tx": sp.csr_matrix(ds.features[test_index]),
        "ty": onehot[test_index],
    }
    graph = defaultdict(list)
    for i, j in zip(*np.nonzero(ds.adjacency)):
        graph[int(i)].append(int(j))
    objs["graph"] = graph
    for part, obj in objs.items():
        with open(root / f"ind.{name}.{part}", "wb") as fh:
            pickle.dump(obj, fh, protocol=2)
    (root / f"ind.{name}.test.index").write_text("\n".join(str(int(i)) for i in test_index) + "\n")


# --------------------------------------------------------------------------
# character text

UNK = "\x00"


@dataclass
class TextDataset:
    ids: np.ndarray  # int64 token ids for the whole corpus
    vocab: list[str]  # id -> character; id 0 is the unknown token
    chunk_length: int
    batch_chunks: int
    bounds: dict[str, tuple[int, int]]
    metric: str = "perplexity"
    max_train_chunks: int = 0  # 0 = every chunk; otherwise a fresh random subset per epoch
    max_eval_chunks: int = 0  # 0 = every chunk; otherwise the leading chunks of the split

    def __post_init__(self):
        if self.ids.size and self.ids.max() >= len(self.vocab):
            raise ParameterError("token id outside the vocabulary")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def chunks(self, split: str):
        """Non-overlapping (inputs, targets) chunks; targets are inputs shifted by one."""
        lo, hi = self.bounds[split]
        seg = self.ids[lo:hi]
        n = (len(seg) - 1) // self.chunk_length
        if n <= 0:
            return (np.zeros((0, self.chunk_length), np.int64),) * 2
        span = n * self.chunk_length
        inputs = seg[:span].reshape(n, self.chunk_length)
        targets = seg[1:span + 1].reshape(n, self.chunk_length)
        return inputs, targets

    def train_batches(self, rng: SeededRng, batch_size: int | None = None):
        inputs, targets = self.chunks("train")
        bs = batch_size or self.batch_chunks
        order = rng.permutation(len(inputs))
        if self.max_train_chunks:
            order = order[: self.max_train_chunks]
        for start in range(0, len(order), bs):
            sel = order[start:start + bs]
            yield Batch(inputs[sel], targets[sel])

    def eval_batches(self, split: str, batch_size: int | None = None):
        inputs, targets = self.chunks(split)
        if self.max_eval_chunks:
            inputs, targets = inputs[: self.max_eval_chunks], targets[: self.max_eval_chunks]
        bs = batch_size or self.batch_chunks
        for start in range(0, len(inputs), bs):
            yield Batch(inputs[start:start + bs], targets[start:start + bs])

    def encode(self, text: str) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.vocab)}
        return np.array([lookup.get(c, 0) for c in text], dtype=np.int64)

    def decode(self, ids) -> str:
        return "".join(self.vocab[i] if i else "?" for i in ids)


def text_from_string(text: str, chunk_length: int, batch_chunks: int,
                     fractions=(0.9, 0.05, 0.05)) -> TextDataset:
    if not text:
        raise IngestionError("text corpus is empty")
    # codepoints >= 256 fall outside the working set and map to the unknown token
    chars = sorted({c for c in text if ord(c) < 256 and c != UNK})
    vocab = [UNK] + chars
    lookup = {c: i for i, c in enumerate(vocab)}
    ids = np.array([lookup.get(c, 0) for c in text], dtype=np.int64)
    n = len(ids)
    a = int(n * fractions[0])
    b = a + int(n * fractions[1])
    bounds = {"train": (0, a), "val": (a, b), "test": (b, n)}
    return TextDataset(ids, vocab, chunk_length, batch_chunks, bounds)


def load_text_chars(path, chunk_length: int = 128, batch_chunks: int = 64, max_chars: int | None = None) -> TextDataset:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read text corpus {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise IngestionError(f"text corpus {path} is not UTF-8 at byte offset {exc.start}") from exc
    if max_chars:
        text = text[:max_chars]
    if not text:
        raise IngestionError(f"text corpus {path} is empty")
    return text_from_string(text, chunk_length, batch_chunks)
