from .config import (
    EvalConfig,
    OimConfig,
    TrainConfig,
    default_config,
    load_config,
    lr_schedule,
    save_config,
    synthetic_config,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .trainer import (
    Trainer,
    TrainResult,
    compute_losses,
    evaluate_model,
    load_datasets,
    load_trained,
    run_training,
    train_step,
)
from .ablation import AblationRow, ablation_suite, expand_grid, format_ablation
