"""Graph-based blind image quality assessment for ultra-high-resolution
images: aspect-aligned patch sampling, hybrid KNN graphs over patch
embeddings, residual graph convolutions with attention readout, and an
EMA-normalized multi-objective trainer.
"""

from .config import RunConfig, load_config, parse_config_text
from .encoder import (
    NodeFeatures,
    ProjectionParams,
    RawFeatures,
    encode_builtin,
    load_feature_cache,
    project,
    save_feature_cache,
)
from .graph import (
    GraphConfig,
    QualityGraph,
    build_graph,
    estimate_cost,
    knn_edges,
    rbf_affinity,
)
from .grid import (
    GridSpec,
    ImageDims,
    PatchLayout,
    extract_patches,
    offset_layout,
    patch_centers,
    select_grid,
)
from .metrics import MetricReport, plcc, rmse, srcc
from .model import (
    ForwardTrace,
    ModelConfig,
    ModelParams,
    attention_readout,
    forward,
    gradients,
    init_model_params,
)
from .objective import EmaState, LossBreakdown, ObjectiveConfig, ema_update, normalized_total
from .train import MosNormalizer, TrainConfig, fit_normalizer, predict_tta, train_model

__version__ = "0.1.0"
