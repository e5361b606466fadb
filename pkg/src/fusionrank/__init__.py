"""Cross-modal retrieval engine: a learned bilinear image-text similarity
with bidirectional hardest-negative training and k-reciprocal re-ranking."""

from .errors import (
    ConfigError,
    DataFormatError,
    FusionRankError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .matrix import Mat, SeededRng, elem_mul, matmul, rand_uniform, sigmoid
from .model import (
    ForwardCache,
    FusionBranch,
    ModelConfig,
    ModelParams,
    backward_pair,
    forward_pair,
    init_params,
    init_tt_from_it,
    score_matrix,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainResult,
    adam_step,
    batch_loss_it,
    batch_loss_tt,
    grad_check,
    mine_hardest,
    train,
)
from .reranking import (
    RerankConfig,
    rank_row,
    rerank_all,
    rerank_i2t,
    rerank_t2i,
    text_affinity_from_it,
)
from .evaluation import (
    GroundTruth,
    RetrievalMetrics,
    ensemble_average,
    fold_average,
    mean_recall,
    metrics_by_fold,
    metrics_from_sim,
    recall_at,
)
from .dataio import (
    DatasetManifest,
    PairedDataset,
    SyntheticSpec,
    gen_synthetic,
    load_checkpoint,
    load_dataset,
    read_matrix,
    save_checkpoint,
    write_matrix,
)

__version__ = "0.1.0"
