"""Multi-modal graph-attention fusion for node classification.

Late-fusion graph attention over per-modality neighborhood graphs, robust
to block-wise missing modalities, with hand-written float64 gradients and
an inductive train/test split (test nodes attach to the frozen training
graph and never influence the learned parameters).
"""

__version__ = "0.1.0"

from .data import (
    MultiModalDataset,
    crop3,
    load_multimodal_csv,
    mean_impute,
    mnist_dataset,
    simulate_blockwise_missing,
    standardize,
    write_mask_csv,
    write_multimodal_csv,
)
from .errors import (
    ConfigError,
    FormatError,
    GatFusionError,
    GraphStructureError,
    ShapeError,
    UndefinedMetricError,
    ValidationError,
)
from .evaluation import (
    FoldResult,
    FoldSplit,
    MetricsReport,
    TrainConfig,
    accuracy,
    auc_from_logits,
    inductive_logits,
    predict_labels,
    roc_auc,
    run_fold,
    run_sweep,
    stratified_kfold,
    train_full,
)
from .fusion import (
    fused_forward,
    fusion_loss_and_grads,
    init_fusion_model,
    load_model,
    make_gatimp_model,
    save_model,
)
from .graphs import (
    Graph,
    MetaInfo,
    attach_test_nodes,
    fc_graph,
    knn_graph,
    mi_graph,
    read_edgelist,
    write_edgelist,
)
from .numerics import finite_difference_check, make_rng
from .plotting import accuracy_plot, write_accuracy_plot

__all__ = [
    "ConfigError",
    "FormatError",
    "FoldResult",
    "FoldSplit",
    "GatFusionError",
    "Graph",
    "GraphStructureError",
    "MetaInfo",
    "MetricsReport",
    "MultiModalDataset",
    "ShapeError",
    "TrainConfig",
    "UndefinedMetricError",
    "ValidationError",
    "__version__",
    "accuracy",
    "accuracy_plot",
    "attach_test_nodes",
    "auc_from_logits",
    "crop3",
    "fc_graph",
    "finite_difference_check",
    "fused_forward",
    "fusion_loss_and_grads",
    "inductive_logits",
    "init_fusion_model",
    "knn_graph",
    "load_model",
    "load_multimodal_csv",
    "make_gatimp_model",
    "make_rng",
    "mean_impute",
    "mi_graph",
    "mnist_dataset",
    "predict_labels",
    "read_edgelist",
    "roc_auc",
    "run_fold",
    "run_sweep",
    "save_model",
    "simulate_blockwise_missing",
    "standardize",
    "stratified_kfold",
    "train_full",
    "write_accuracy_plot",
    "write_edgelist",
    "write_mask_csv",
    "write_multimodal_csv",
]
