"""Teacher-center transfer and per-sample-margin softmax distillation for
hypersphere embeddings, with desk-scale training and evaluation pipelines."""

from .geometry import (
    ClassCenters,
    CosineLogits,
    EmbeddingBatch,
    cosine_logits,
    l2_normalize,
    safe_arccos,
)
from .losses import (
    AngularLossOutput,
    DistanceMetric,
    LossOutput,
    MarginSpec,
    PerSampleMargins,
    TripletLossOutput,
    angular_distillation_loss,
    backprop_to_embeddings,
    margin_distillation_loss,
    per_sample_margins,
    temperature_kd_loss,
    triplet_distillation_loss,
    unified_margin_loss,
)
from .network import (
    Checkpoint,
    MlpParams,
    Role,
    checkpoint_load,
    checkpoint_save,
    init_mlp_params,
    mlp_backward,
    mlp_forward,
)
from .data import (
    Dataset,
    IdentificationProtocol,
    Split,
    VerificationProtocol,
    build_identification,
    build_verification_pairs,
    dataset_load,
    dataset_save,
    generate_synthetic,
)
from .training import (
    Method,
    OptimizerState,
    TeacherSignals,
    TrainConfig,
    distill_student,
    lr_at,
    precompute_teacher_signals,
    sgd_momentum_step,
    train_teacher,
    transfer_centers,
)
from .evaluation import (
    GapReport,
    MetricsReport,
    evaluate_checkpoint,
    gap_report,
    rank1_identification,
    verification_accuracy,
)

__version__ = "0.1.0"
