//! Neural primitives shared by the enricher and the recommender.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod param;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use layers::{dropout_mask, EncoderBlock, FeedForward, LayerNorm, MultiHeadAttention};
pub use ops::{scaled_dot_attention, softmax_rows, AttentionMask};
pub use param::{ParamTensor, Parameterized};
pub use tensor::Tensor;
