"""Rate-distortion optimal mixed-precision weight quantization toolkit."""

from .allocate import (
    AllocationError,
    BitAllocation,
    allocate,
    brute_force_allocate,
    continuous_allocate,
    integerize,
    marginal_distortion,
    solve_rate,
    total_distortion,
)
from .calibrate import (
    CalibrationError,
    CalibState,
    RadioResult,
    accumulate,
    bias_correct,
    build_stats,
    make_calib_set,
    measure_distortion,
    pca_basis,
    plan_model,
    predicted_distortion,
    radio_run,
)
from .grouping import (
    GroupingError,
    GroupingPlan,
    grouping_gain,
    overhead_bits,
    pruned_fraction,
    split_columns,
    subgroup_rows,
)
from .kernel import KernelError, bench_matvec, dense_matvec_oracle, packed_matvec
from .model import ToyModel, forward, grad_squared, make_toy_model, projection_grads
from .pack import PackedMatrix, PackError, pack, quantize_matrix, read_f32, unpack, write_f32
from .quantize import (
    CompanderParams,
    DequantLUT,
    QuantizeError,
    build_dequant_lut,
    compand_quantize,
    compander_forward,
    compander_inverse,
    grid_calibrate,
    lloyd_max_oracle,
    mmse_step,
    rtn_quantize,
    uniform_quantize,
)
from .stats import (
    GroupStats,
    StatsError,
    StatsSet,
    pooled_stats,
    to_json,
    validate_stats,
)

__version__ = "0.1.0"
