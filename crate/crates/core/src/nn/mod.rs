//! Small CPU neural-network engine: f64 tensors, a reverse-mode tape,
//! the layers the backbones need, Adam, and a portable weight format.

pub mod autograd;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod weights;

pub use autograd::{backward, Var};
pub use optim::{exponential_lr, Adam};
pub use params::{BatchNorm2d, Conv2d, Ctx, EntryKind, Linear, ParamStore};
pub use tensor::Tensor;
pub use weights::{DType, WeightFile};
