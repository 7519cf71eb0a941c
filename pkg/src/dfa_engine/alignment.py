"""Cosine alignment between DFA feedback and the true backprop signal.

For each hidden attachment point the DFA signal ``B_i delta_ay`` and the BP
signal ``W_{i+1}^T delta a_{i+1}`` are both taken at the region output, on the
same forward trace, and compared sample by sample (a sample is a row for
tabular data, a node for graphs, a whole chunk for text).
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .network import Network
from .parallel import UnsupportedModeError
from .tensor import ParameterError
from .training import backward_bp, loss_and_error

CSV_HEADER = ["epoch", "layer_id", "mean_cosine", "std_cosine", "n"]


@dataclass
class AlignmentRecord:
    layer_id: str
    mean_cosine: float
    std_cosine: float
    sample_count: int
    epoch: int = 0
    skipped: int = 0
    depth: int = 0  # 0 = deepest hidden attachment point (closest to the input)

    def __post_init__(self):
        if not -1.0 <= self.mean_cosine <= 1.0 and self.sample_count:
            raise ValueError(f"mean cosine {self.mean_cosine} outside [-1, 1]")
        if self.std_cosine < 0:
            raise ValueError("negative standard deviation")

    def row(self) -> list:
        return [self.epoch, self.layer_id, f"{self.mean_cosine:.10g}", f"{self.std_cosine:.10g}", self.sample_count]


def per_sample_cosines(a: np.ndarray, b: np.ndarray):
    """Row-wise cosines of two (samples, ...) arrays. Returns (cosines, n_skipped)."""
    a2 = a.reshape(a.shape[0], -1)
    b2 = b.reshape(b.shape[0], -1)
    na = np.linalg.norm(a2, axis=1)
    nb = np.linalg.norm(b2, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = (a2[ok] * b2[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return np.clip(cos, -1.0, 1.0), int((~ok).sum())


def _batch_cosines(net: Network, batch, include_top: bool):
    trace = net.forward_trace(batch.x)
    _, delta = loss_and_error(net.loss, trace.predictions, batch.y, batch.mask)
    bp_signals: dict[str, np.ndarray] = {}
    backward_bp(net, trace, delta, signals=bp_signals)
    last = len(net.regions) if include_top else len(net.regions) - 1
    out = {}
    for idx in range(last):
        name = net.regions[idx].name
        dfa = net.dfa_signal(idx, delta, trace.outputs[idx].shape)
        out[name] = per_sample_cosines(dfa, bp_signals[name])
    return out


def measure_alignment(net: Network, batch, epoch: int = 0, include_top: bool = False) -> list[AlignmentRecord]:
    """Alignment records for each hidden attachment point, deepest first.

    ``batch`` may be a single batch or a list of batches; cosines are pooled
    over every sample. Parameters are only read. Samples where either signal
    has zero norm (dead ReLU rows, unlabelled nodes) are skipped and counted.
    """
    if net.mode != "dfa" or not net.feedback:
        raise UnsupportedModeError(f"alignment needs a DFA network with feedback, got mode {net.mode!r}")
    batches = batch if isinstance(batch, (list, tuple)) else [batch]
    if not batches or any(b.x is None or len(b.x) == 0 for b in batches):
        raise ParameterError("alignment batch is empty")
    pooled: dict[str, list] = {}
    skipped: dict[str, int] = {}
    for b in batches:
        for name, (cos, n_skip) in _batch_cosines(net, b, include_top).items():
            pooled.setdefault(name, []).append(cos)
            skipped[name] = skipped.get(name, 0) + n_skip
    records = []
    for depth, (name, parts) in enumerate(pooled.items()):
        cos = np.concatenate(parts)
        if skipped[name]:
            warnings.warn(f"{name}: skipped {skipped[name]} sample(s) with a zero-norm signal", stacklevel=2)
        if cos.size == 0:
            records.append(AlignmentRecord(name, 0.0, 0.0, 0, epoch, skipped[name], depth))
            continue
        records.append(AlignmentRecord(name, float(cos.mean()), float(cos.std()), int(cos.size),
                                       epoch, skipped[name], depth))
    return records


def deepest(records: list[AlignmentRecord]) -> AlignmentRecord:
    return min(records, key=lambda r: r.depth)


def write_alignment_csv(path, records: list[AlignmentRecord], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def read_alignment_csv(path) -> list[AlignmentRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [AlignmentRecord(r["layer_id"], float(r["mean_cosine"]), float(r["std_cosine"]), int(r["n"]),
                            int(r["epoch"])) for r in rows]
