//! Block-based neural image codec.
//!
//! Images are split into 32×32 tiles coded in raster order. Each tile is first
//! predicted from already-decoded neighbours above and to the left, then the
//! prediction residual is coded progressively by a recurrent autoencoder that
//! emits 128 bits per iteration. The number of iterations can be fixed for the
//! whole image or chosen per tile to meet a quality target.

pub mod tensor;
pub mod nn;
pub mod model;
pub mod context;
pub mod residual;
pub mod image_io;
pub mod train;
pub mod synth;
pub mod bitstream;
pub mod metrics;
pub mod codec;
pub mod eval;
