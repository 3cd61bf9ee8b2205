//! Composite BCE + Dice loss, RMSprop, and the epoch loop.

mod loss;
mod rmsprop;
mod trainer;

pub use loss::{bce, bce_grad, head_loss, head_loss_grad, soft_dice, soft_dice_grad, PROB_CLAMP};
pub use rmsprop::{rmsprop_step, rmsprop_update, OptimizerState};
pub use trainer::{
    make_patches, train, write_loss_csv, EpochLog, StepLog, TrainConfig, TrainOutcome, TrainPatch, TrainSink,
};
