"""Deep neuro-fuzzy networks built from fuzzy inference and fuzzy pooling layers."""
from .errors import (
    ConfigurationError,
    DataError,
    DegenerateInputError,
    DivergenceError,
    FormatError,
    NumericError,
    UsageError,
)
from .kernels import BACKEND
from .layers import (
    FuzzyLayerParams,
    LayerKind,
    f_map,
    fio_forward,
    firing_strength,
    fpo_forward,
    g_map,
    init_params,
    membership_matrix,
)
from .network import Network, NetworkSpec, build_network, parse_network_spec
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
