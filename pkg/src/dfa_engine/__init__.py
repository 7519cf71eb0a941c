"""Direct Feedback Alignment, backpropagation and shallow training on dense, graph and transformer networks."""
from .alignment import AlignmentRecord, measure_alignment
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .feedback import ConfigurationError, FeedbackMatrix, init_feedback, init_shared_master
from .network import Network, build_gcn, build_mlp, build_transformer_lm
from .tensor import ParameterError, SeededRng, ShapeError
from .training import backward_bp, backward_dfa, backward_shallow, loss_and_error

__all__ = [
    "AlignmentRecord", "ConfigError", "ConfigurationError", "ExperimentConfig", "FeedbackMatrix", "Network",
    "ParameterError", "SeededRng", "ShapeError", "backward_bp", "backward_dfa", "backward_shallow", "build_gcn",
    "build_mlp", "build_transformer_lm", "init_feedback", "init_shared_master", "load_config", "loss_and_error",
    "measure_alignment", "parse_config",
]
