//! Attention-driven semantic image transmission.
//!
//! A small vision transformer is trained to classify images; the attention
//! its CLS token pays to each patch in the final layer decides which patch
//! tokens are sent over a rate-limited link. The receiver scatters the
//! received tokens back onto the patch grid, reconstructs the image with a
//! transposed-convolution decoder trained on the transmitted patches only,
//! and classifies the reconstruction.
//!
//! Module map:
//!
//! * [`tensor`]: dense tensors, autodiff tape, Adam, checkpoints
//! * [`seed`]: seed derivation for every random stream
//! * [`train`]: shared minibatch and epoch plumbing
//! * [`data`]: labeled images, the synthetic shape dataset, `SEMD` files
//! * [`patch`]: patch grid and token projection
//! * [`vit`]: transformer encoder and its training loop
//! * [`masker`]: CLS-attention grid and patch selection
//! * [`channel`]: rate budgets, packets, the rate-schedule channel
//! * [`decoder`]: reconstruction network and masked MSE
//! * [`classifier`]: receiver classifier and mixed-loss fine-tuning
//! * [`experiment`]: configuration, staged runs, metrics

pub mod channel;
pub mod classifier;
mod codec;
pub mod data;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod masker;
pub mod patch;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, FormatError, Result};
