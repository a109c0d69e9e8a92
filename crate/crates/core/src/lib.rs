//! Joint visible-infrared image fusion and crowd counting with a shared
//! two-stream encoder, dynamic task weighting and PGD adversarial training.

pub mod adversary;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod plot;
pub mod tensor;
pub mod train;
pub mod weighting;

pub use adversary::{pgd_attack, AttackConfig, AttackTarget};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{Point, RgbtSample, SceneConfig};
pub use error::{Error, Result};
pub use model::{forward, init_params, Mode, ModelParams};
pub use tensor::Tensor;
pub use train::{adv_train, evaluate, train, TrainConfig};
pub use weighting::WeightState;
