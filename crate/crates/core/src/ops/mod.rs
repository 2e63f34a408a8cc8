//! Raw numeric kernels used by the autograd tape.

pub mod conv;
pub mod image;

pub use conv::ConvSpec;
