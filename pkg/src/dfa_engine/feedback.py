"""Fixed random feedback matrices that carry the global error to hidden layers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ParameterError, SeededRng, ShapeError, content_hash

GRANULARITIES = ("per_layer", "macro_block", "micro_sublayer")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class FeedbackMatrix:
    """A read-only random projection ``B`` of shape (layer_out_dim, error_dim).

    ``raw`` holds the unscaled entries (possibly a view into a shared master)
    and ``scale`` the normalisation factor, so the effective matrix is
    ``raw * scale``. Keeping them apart lets shared slices avoid copies.
    """

    raw: np.ndarray
    scale: float
    layer_id: str = ""
    shared_view: tuple[int, int] | None = None

    def __post_init__(self):
        if self.raw.ndim != 2:
            raise ShapeError(f"feedback matrix must be 2-D, got {self.raw.shape}")
        self.raw.flags.writeable = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape

    @property
    def layer_out_dim(self) -> int:
        return self.raw.shape[0]

    @property
    def error_dim(self) -> int:
        return self.raw.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return self.raw * self.scale

    def digest(self) -> str:
        return content_hash(self.raw, np.array([self.scale]))

    @classmethod
    def fixed(cls, matrix: np.ndarray, layer_id: str = "") -> "FeedbackMatrix":
        """Wrap an explicit matrix (used to substitute B with a forward transpose)."""
        return cls(np.array(matrix, dtype=DTYPE), 1.0, layer_id)


def _scale(layer_out_dim: int, error_dim: int, rule: str) -> float:
    if rule == "target":
        return 1.0 / np.sqrt(layer_out_dim)
    if rule == "output":
        return 1.0 / np.sqrt(error_dim)
    raise ParameterError(f"feedback scale rule must be 'target' or 'output', got {rule!r}")


def init_feedback(rng: SeededRng, layer_out_dim: int, error_dim: int, layer_id: str = "",
                  scale_rule: str = "target") -> FeedbackMatrix:
    """U(-1, 1) entries scaled by 1/sqrt(layer_out_dim) (or the error width)."""
    if layer_out_dim <= 0 or error_dim <= 0:
        raise ParameterError(f"feedback dims must be positive, got {layer_out_dim}x{error_dim}")
    raw = rng.uniform(-1.0, 1.0, size=(layer_out_dim, error_dim)).astype(DTYPE)
    return FeedbackMatrix(raw, _scale(layer_out_dim, error_dim, scale_rule), layer_id)


@dataclass
class SharedFeedbackMaster:
    """One master random matrix; each layer's B is its leading rows, rescaled."""

    master: np.ndarray
    scale_rule: str = "target"

    def __post_init__(self):
        self.master.flags.writeable = False

    @property
    def max_out_dim(self) -> int:
        return self.master.shape[0]

    @property
    def error_dim(self) -> int:
        return self.master.shape[1]

    @property
    def storage_size(self) -> int:
        return self.master.size

    def view(self, layer_out_dim: int, layer_id: str = "") -> FeedbackMatrix:
        if layer_out_dim > self.max_out_dim:
            raise ConfigurationError(
                f"layer {layer_id!r} has width {layer_out_dim} > shared master width {self.max_out_dim}")
        raw = self.master[:layer_out_dim]
        return FeedbackMatrix(raw, _scale(layer_out_dim, self.error_dim, self.scale_rule), layer_id,
                              shared_view=(layer_out_dim, self.error_dim))


def init_shared_master(rng: SeededRng, max_out_dim: int, error_dim: int,
                       scale_rule: str = "target") -> SharedFeedbackMaster:
    if max_out_dim <= 0 or error_dim <= 0:
        raise ParameterError(f"master dims must be positive, got {max_out_dim}x{error_dim}")
    raw = rng.uniform(-1.0, 1.0, size=(max_out_dim, error_dim)).astype(DTYPE)
    return SharedFeedbackMaster(raw, scale_rule)


def broadcast_error(fb: FeedbackMatrix, delta_ay: np.ndarray) -> np.ndarray:
    """Project the top error onto a layer: ``delta_ay @ B^T``, one row per sample/node/token."""
    if delta_ay.ndim != 2 or delta_ay.shape[1] != fb.error_dim:
        raise ShapeError(f"error of shape {delta_ay.shape} cannot be projected by B of shape {fb.shape}")
    # einsum's own loop (not BLAS) fixes the reduction order per row, so a row's
    # projection is bitwise the same whatever the batch size
    return np.einsum("nj,kj->nk", delta_ay, fb.raw, optimize=False) * fb.scale


@dataclass
class FeedbackPlacement:
    granularity: str
    attachment_points: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ParameterError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")

    def validate(self, matrices: dict[str, FeedbackMatrix], top: str) -> None:
        if top in matrices:
            raise ConfigurationError(f"top layer {top!r} receives the true error and must not have feedback")
        for point in self.attachment_points:
            if point not in matrices:
                raise ConfigurationError(f"attachment point {point!r} has no feedback matrix")
        extra = set(matrices) - set(self.attachment_points)
        if extra:
            raise ConfigurationError(f"feedback matrices for unknown attachment points: {sorted(extra)}")
