"""Label-alignment prompt tuning over a frozen dual encoder."""

from .data import FeatureDataset, ImageFeatureProvider
from .encoders import (
    ModelConfig,
    TextEncoderParams,
    encode_text,
    init_text_encoder,
    make_synthetic_dataset,
    sphere_means,
)
from .errors import DataError, DomainError, EngineError, NumericError, UsageError
from .harness import (
    AblationGrid,
    EvalReport,
    IncrementalReport,
    build_synthetic_suite,
    domain_shift_eval,
    evaluate,
    few_shot_sweep,
    run_ablation,
    run_incremental,
    zero_shot_eval,
)
from .losses import (
    CosineBatch,
    LossBreakdown,
    LossWeights,
    ce_loss,
    cos_loss,
    kd_loss,
    predict_probs,
    total_loss,
    wc_loss,
)
from .prompting import (
    ClassEmbeddingTable,
    PromptSequence,
    SoftContext,
    Vocabulary,
    build_prompt,
    build_reference_prompt,
    build_synthetic_vocab,
    extend_table,
    init_context,
    init_table,
)
from .training import (
    FewShotSplit,
    TrainConfig,
    TrainTrace,
    optimizer_step,
    sample_few_shot,
    train,
)

__version__ = "0.1.0"
