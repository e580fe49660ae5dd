//! Loss functions, the optimiser and the training loop.

mod adam;
mod loss;
mod run;

pub use adam::{adam_step, lr_at, AdamConfig, AdamState};
pub use loss::{
    loss_mse, loss_velocity_gradient, loss_velocity_gradient_with_grad, total_loss, total_loss_with_grad,
    LossBreakdown, VG_WEIGHT,
};
pub use run::{
    batch_gradient, format_log_line, relative_speed_error, train_loop, train_step, BatchSampler, TrainConfig,
    TrainReport, TrainSample, ValidationRecord,
};
