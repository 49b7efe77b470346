//! Fair-representation victims: adversarial (CFAIR, CFAIR-EO) and
//! variational (ICVAE-S, ICVAE-US) learners behind one interface.

mod arch;
mod model;
mod optim;
mod train;

pub use arch::{Arch, LossWeights, ParamBlock, VictimKind};
pub use model::{build_victim, Batch, LossGrad, VictimModel};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{train, train_with_hook, TrainConfig, TrainLog};
