"""Activation-aware mixed-rank weight compression toolkit."""
from .allocator import (
    AllocationTrace,
    ScheduleParams,
    allocate,
    compression_ratio,
    initial_ranks,
    schedule_value,
)
from .bundle import (
    LayerRecord,
    ModelBundle,
    ProxyDataset,
    gen_synthetic,
    load_bundle,
    representative_input,
    save_bundle,
)
from .compensate import (
    CompensationFactors,
    CompensationResult,
    GdConfig,
    NormalizedPair,
    comp_rank,
    compensate,
    gradients,
    loss,
    normalize_sample,
)
from .cost import LayerCost, SizeReport, cost_ratio, layer_cost, multiplication_counts, size_report
from .errors import (
    BundleFormatError,
    DimensionMismatchError,
    DivergenceError,
    InfeasibleTargetError,
    MixrankError,
    NonFiniteError,
    SvdConvergenceError,
    ValidationError,
)
from .factorize import (
    LowRankFactors,
    OutputError,
    SingularSpectrum,
    activation_aware_spectrum,
    energy_loss,
    factorize,
    layer_output_error,
    weight_svd_factors,
)
from .linalg import SvdResult, frob_energy, pinv, svd, truncate
from .quant import QuantizedMatrix, dequantize, quantize

__version__ = "0.1.0"
