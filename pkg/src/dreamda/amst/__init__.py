from .augment import strong_aug, weak_aug
from .model import (
    AUX_HEADS,
    HEADS,
    ClassifierConfig,
    MultiHeadModel,
    extract_features,
    init_classifier,
    load_classifier,
    predict_logits,
    save_classifier,
)
from .selftrain import (
    REAL,
    SYNTHETIC,
    AMSTConfig,
    LabelPools,
    SoftMatchState,
    assign_pseudo_labels,
    consistency_weight,
    ensemble_accuracy,
    main_accuracy,
    mc_uncertainty,
    orthogonality_penalty,
    pretrain_loss,
    run_amst,
    stage3_loss,
    train_stage1,
    train_stage3,
    train_supervised,
)
