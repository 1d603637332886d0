pub mod backbones;
pub mod classical;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod metric;
pub mod pretrain;
pub mod rng;
pub mod study;
pub mod synthesis;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Gradients, Tape, Tensor, Var};
