//! Trainable ε-networks and derivative heads.

pub mod checkpoint;
pub mod head;
pub mod mlp;
pub mod train;

pub use checkpoint::{load_mlp, read_mlp, save_mlp, write_mlp};
pub use head::{
    ad_target, ad_target_batch, distill_residual, head_combine, train_distill, train_spatial_jvp_noad,
    DistillHead, DistilledField, NoAdWeight,
};
pub use mlp::{Activation, Mlp, MlpSpec, TimeEmbed};
pub use train::{score_relative_error, train_dsm, Adam, LrSchedule, TrainConfig, TrainOutput};
