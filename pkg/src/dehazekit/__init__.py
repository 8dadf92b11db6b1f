"""dehazekit: compact dehazing networks via teacher-student compression
and EMA-guided adaptation to unlabeled real-domain imagery."""

from .data import (
    HazeParams,
    PairedDataset,
    RealDataset,
    augment_pair,
    build_light_haze_dataset,
    build_real_dataset,
    build_synthetic_dataset,
    synthesize_haze,
)
from .guidance import (
    ImageEmbeddingBackend,
    PromptPair,
    clear_probability,
    cosine_sim,
    haze_loss,
    haze_probabilities,
    haze_probability,
    train_prompts,
)
from .losses import (
    AlignWeights,
    LossWeights,
    TapProjections,
    context_align_loss,
    l1_loss,
    moc_loss,
    perceptual_loss,
    ssim_loss,
)
from .metrics import (
    EfficiencyReport,
    MetricReport,
    bench_efficiency,
    entropy,
    evaluate_model,
    haze_density,
    psnr,
    ssim_metric,
)
from .models import (
    DehazeNet,
    NetConfig,
    flops_estimate,
    load_checkpoint,
    param_count,
    params_vector,
    save_checkpoint,
    student_config,
    teacher_config,
)
from .training import (
    BiAState,
    TrainConfig,
    bia_ema_step,
    bia_lower_step,
    run_bia,
    run_moc,
    train_teacher,
)

__version__ = "0.1.0"
