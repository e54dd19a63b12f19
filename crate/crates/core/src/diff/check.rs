//! Central finite-difference gradient checks.
//!
//! Only forward evaluation is used here, so the numerical gradient is an
//! independent route to the same derivative that [`Graph::backward`] computes.

use crate::diff::graph::{Graph, Var};
use crate::diff::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Builds a scalar-valued expression from the given leaves.
pub trait Expression<T: Scalar>: Fn(&mut Graph<T>, &[Var]) -> Result<Var> {}
impl<T: Scalar, F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>> Expression<T> for F {}

fn evaluate<T: Scalar>(f: &impl Expression<T>, inputs: &[Tensor<T>]) -> Result<T> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Central differences of `f` w.r.t. every element of input `which`.
pub fn numerical_gradient<T: Scalar>(
    f: &impl Expression<T>,
    inputs: &[Tensor<T>],
    which: usize,
    h: T,
) -> Result<Tensor<T>> {
    let mut work = inputs.to_vec();
    let n = work[which].numel();
    let mut grad = Tensor::zeros(work[which].shape());
    let two_h = h + h;
    for i in 0..n {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let plus = evaluate(f, &work)?;
        work[which].data_mut()[i] = orig - h;
        let minus = evaluate(f, &work)?;
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / two_h;
    }
    Ok(grad)
}

/// Reverse-mode gradient of `f` w.r.t. every input.
pub fn analytic_gradients<T: Scalar>(f: &impl Expression<T>, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> T {
    let diff: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    let scale = na.max(nb);
    if scale == T::zero() {
        T::zero()
    } else {
        diff / scale
    }
}

/// Worst relative error between analytic and numerical gradients over all
/// inputs.
pub fn max_gradient_error<T: Scalar>(f: &impl Expression<T>, inputs: &[Tensor<T>], h: T) -> Result<T> {
    let analytic = analytic_gradients(f, inputs)?;
    let mut worst = T::zero();
    for (i, a) in analytic.iter().enumerate() {
        let n = numerical_gradient(f, inputs, i, h)?;
        worst = worst.max(relative_error(a.data(), n.data()));
    }
    Ok(worst)
}
