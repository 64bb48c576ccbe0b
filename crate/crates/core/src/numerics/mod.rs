//! Dense matrices, reverse-mode differentiation, Adam and the learning-rate
//! schedule. Everything is `f64`.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use optim::{adam_step, cosine_lr, LrSchedule, OptimizerState};
pub use params::{ParameterStore, TensorContainer};
pub use tape::{Bindings, Gradients, NeighborLists, Tape, TapeStats, Var};
pub use tensor::{sigmoid, softmax_rows, Activation, Tensor2D, LEAKY_SLOPE};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Glorot-uniform initialisation for a `fan_in × fan_out` weight.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor2D {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor2D::from_vec(fan_in, fan_out, data).expect("sized above")
}
