from .finetune import (
    FinetuneConfig,
    TaskSplit,
    accuracy_report,
    batch_loss,
    evaluate,
    finetune,
    frozen,
    matched_budgets,
    param_checksum,
    plan_joint_batches,
    predict,
    prepare_tasks,
)
from .harness import (
    BUDGET_FRACTIONS,
    DeskProfile,
    ar_vs_mae,
    gnuplot_blocks,
    joint_vs_separate,
    markdown_table,
    mean_std,
    multi_seed,
    overlapping_tasks,
    pretraining_corpus,
    rhythm_task,
    scaling_harness,
)
from .optim import OptimState, Schedule, adamw_step
from .pretrain import DivergenceError, PretrainConfig, TrainRun, batch_indices, heldout_loss, holdout_split, pretrain
from .runlog import MetricsLog

FULL_SCALE_PRETRAIN = PretrainConfig(lr=1e-4, batch_size=4096, warmup_ratio=0.03)
FULL_SCALE_FINETUNE = FinetuneConfig(lr=1e-4, batch_size=512, warmup_ratio=0.1)
