//! Deterministic CPU training engine.
//!
//! Networks are flat DAGs of layer nodes executed sequentially; convolution
//! lowers to GEMM (`matrixmultiply`) over a channel-major activation layout.
//! Training runs in `f32`, gradient checking in `f64`, on the same graph
//! code. There is no threading and no run-to-run nondeterminism: identical
//! inputs and seeds give bitwise-identical parameters.
//!
//! Typical flow:
//!
//! ```text
//! let mut net = Network::new(nodes, input_shape, classes)?;
//! init_network(&mut net, &mut rng);
//! let mut opt = OptimizerState::new(&net, 0.9, 1e-4)?;
//! let trace = net.forward(&batch, &labels, Mode::Train)?;
//! net.backward(trace)?;
//! sgd_step(&mut net, &mut opt, lr)?;
//! ```

pub mod error;
pub mod fdcheck;
pub mod init;
pub mod kernels;
pub mod layer;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{EngineError, Result};
pub use fdcheck::{finite_diff_check, FdOptions, FdReport, GammaL1};
pub use init::{he_std, init_network};
pub use layer::{IoShape, LayerKind, Node, ParamName, Src};
pub use network::{param_template, Mode, Network, Trace};
pub use optim::{sgd_step, OptimizerState};
pub use scalar::Scalar;
pub use tensor::Tensor;
