//! Dense `f64` tensors, a single-use reverse-mode tape, named parameters split
//! into the two adversarial partitions, and plain SGD.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use optim::{sgd_step, Sgd, StepInfo};
pub use params::{Param, ParamStore, Partition};
pub use tape::{sigmoid, GradMap, OpKind, OpSpec, Tape, Var};
pub use tensor::Tensor;
