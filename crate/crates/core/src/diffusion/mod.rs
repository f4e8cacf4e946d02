//! Noise schedules, DDIM updates, the backbone interface and the toy denoiser.

mod backbone;
mod checkpoint;
pub mod contract;
mod ddim;
mod schedule;
pub mod stubs;
mod toy;
mod train;

pub use backbone::{Backbone, State, Trainable};
pub use checkpoint::{
    load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, TensorInfo, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use ddim::{add_noise, ddim_sample, ddim_step, diffusion_loss, relative_l2};
pub(crate) use ddim::{ddim_transfer, ensure_finite};
pub use schedule::{make_noise_schedule, NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use toy::{ToyArch, ToyUNet};
pub use train::{loss_and_grad, train, train_toy_backbone, Adam, ToyTrainConfig, TrainReport, MIN_TRAINING_IMAGES};
