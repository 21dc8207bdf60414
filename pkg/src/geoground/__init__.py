"""Multi-level geometry banks with token-adaptive top-K evidence routing and
zero-initialized residual grounding, plus the synthetic proxy task, binary
serialization, and ablation harness built around them."""

from .backends import backend_name
from .bank import (
    BankParams,
    GeometryBank,
    RawLayerStack,
    build_bank,
    init_bank_params,
    normalize_layer,
    project_layer,
    select_layers,
    spatial_merge_2x2,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    GeogroundError,
    NumericError,
    StateError,
    TrainingError,
)
from .geobank_io import (
    HeatmapGrid,
    export_heatmap,
    read_geobank,
    write_geobank,
    write_heatmap_csv,
)
from .grounding import (
    GroundedTokens,
    GroundingHead,
    RoutingWeights,
    VisualTokens,
    aggregate_evidence,
    ground_tokens,
    init_grounding_head,
    residual_ground,
    route,
    sparse_allocate,
)
from .numerics import (
    GradCheckReport,
    ParamStore,
    adam_update,
    check_gradients,
    gelu,
    layer_norm,
    softmax,
)
from .pipeline import Geometry, HeadConfig
from .proxy import (
    EvalMetrics,
    ProxyConfig,
    ProxyDataset,
    ProxySample,
    TrainResult,
    evaluate,
    generate_task,
    probe_loss,
    train,
)

__version__ = "0.1.0"
