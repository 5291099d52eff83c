"""Tile-streamed CNN training with exact activation-map reconstruction.

Train convolutional networks on images far larger than activation memory
allows: the section below a chosen split layer runs tile-by-tile with
planner-computed overlaps, the split activation map is reconstructed
bit-exactly, the head runs once on it, and the backward pass recomputes
tile activations instead of retaining them while parameter gradients are
accumulated once per output position via ownership masks.
"""

from .engine import (
    StreamingForwardState,
    StreamingRunRecord,
    accumulate_minibatch,
    sgd_step,
    streaming_backward,
    streaming_forward,
)
from .equivalence import (
    baseline_forward_backward,
    compare_runs,
    finite_difference_check,
    lockstep_train,
)
from .errors import (
    ConfigError,
    NondeterminismError,
    NonFiniteError,
    PlanError,
    ShapeError,
    TilestreamError,
)
from .memory import estimate_streaming, estimate_whole_image, reduction_report
from .network import (
    Conv,
    Dense,
    Flatten,
    MaxPool,
    NetworkSpec,
    ParamGrads,
    Relu,
    init_params,
    net_giga64mp,
    net_tiny2,
    net_vgg13,
)
from .planner import (
    Region,
    TilePlan,
    backproject_region,
    build_tile_plan,
    layer_overlap_backward,
    layer_overlap_forward,
    validate_tile_plan,
)

__version__ = "0.1.0"
