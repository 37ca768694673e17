"""Energy-entropy anomaly segmentation toolkit.

Numeric core for pixel-level out-of-distribution segmentation work:
anomaly-score functions, energy-entropy training losses with analytic
gradients, a deterministic anomaly-image compositor, streaming AUPRC/FPR95
evaluation with a void-pixel policy, and a desk-scale training rig.
"""

__version__ = "0.1.0"

from .raster import (
    ImageRaster,
    LogitMap,
    ObjectCutout,
    RasterError,
    ScoreMap,
    SemanticLabelMap,
    TriLabelMask,
    load_raster,
    pad_embed,
    save_raster,
)
from .scoring import (
    MaskPrediction,
    ScoreConfig,
    eel_score,
    energy_map,
    entropy_map,
    maskwise_logits,
    maskwise_score,
    msp_score,
    softmax_channel,
)
from .losses import (
    HyperParams,
    LossResult,
    compose_total,
    consistency_loss,
    eel_loss,
    finite_diff_check,
    linear_energy_loss,
)
from .metrics import (
    EvalAccumulator,
    UndefinedMetricError,
    accumulate,
    auprc,
    export_pr_curve,
    fpr_at_tpr,
    merge,
)

__all__ = [
    "ImageRaster",
    "LogitMap",
    "ScoreMap",
    "TriLabelMask",
    "SemanticLabelMap",
    "ObjectCutout",
    "RasterError",
    "load_raster",
    "save_raster",
    "pad_embed",
    "MaskPrediction",
    "ScoreConfig",
    "softmax_channel",
    "msp_score",
    "energy_map",
    "entropy_map",
    "eel_score",
    "maskwise_logits",
    "maskwise_score",
    "HyperParams",
    "LossResult",
    "eel_loss",
    "consistency_loss",
    "linear_energy_loss",
    "compose_total",
    "finite_diff_check",
    "EvalAccumulator",
    "UndefinedMetricError",
    "accumulate",
    "merge",
    "auprc",
    "fpr_at_tpr",
    "export_pr_curve",
    "__version__",
]
