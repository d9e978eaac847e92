//! Optimization, the modality-dropout training loop and missing-modality
//! evaluation.

pub mod eval;
pub mod masks;
pub mod optim;
pub mod run;

pub use eval::{eval_matrix, write_dice_csv, DiceMatrix, ModelPredictor, Predictor, DICE_CSV_HEADER};
pub use masks::{sample_modality_mask, MaskDist};
pub use optim::{adam_step, poly_lr, AdamConfig, OptimState};
pub use run::{prepare_dataset, train_loop, train_step, LogRow, TrainConfig, TrainState, LOSS_CSV_HEADER};
