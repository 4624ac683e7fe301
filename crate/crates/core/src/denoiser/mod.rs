//! Toy conditional noise predictor `eps_theta(x_t, t, c)`: conv stem,
//! timestep embedding, dilated residual conv blocks around a single
//! cross-attention block, and a zero-initialised output conv.

pub mod checkpoint;
pub mod codec;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use codec::{decode, encode};
pub use model::{CrossAttentionMap, DenoiserOutput, MapTag, ModelConfig, ToyDenoiser};
pub use train::{train_toy, LossCurve, Optimizer, TrainConfig, TrainExample};
