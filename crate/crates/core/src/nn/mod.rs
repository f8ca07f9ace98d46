//! Network blocks and the three architecture variants.
//!
//! Every variant has `levels` encoder stages (two conv-norm-act layers and a
//! 2x max pool each), a bottleneck, and `levels` decoder stages (2x nearest
//! upsampling, concatenation with the matching encoder output, two
//! conv-norm-act layers). They differ in three places:
//!
//! | variant          | encoder residual | bottleneck                | logits from            |
//! |------------------|------------------|---------------------------|------------------------|
//! | `unet3d`         | no               | 2 layers, dilation 1      | last decoder stage     |
//! | `unet3d-dilated` | no               | 4 layers, dilation 1,2,4,8| last decoder stage     |
//! | `proposed`       | yes              | 4 layers, dilation 1,2,4,8| all decoder stages     |

pub mod blocks;
mod config;
mod model;

pub use blocks::{Binder, ParamStore};
pub use config::{ModelConfig, Variant};
pub use model::{ForwardOutput, Model};
