//! Finite-difference gradient oracle and the `input_gradient` helper.
//!
//! Central differences are the crate's independent referee: every
//! analytic backward rule is held against [`finite_diff_gradient`] (see
//! the gradient verification suite), and the joint ensemble attack uses
//! the directional variant to approximate its second-order term.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Default step for central differences.
pub const FD_DEFAULT_H: f64 = 1e-5;

/// Central finite-difference gradient of `f` at `x` with step `h`:
/// `g_i = (f(x + h e_i) - f(x - h e_i)) / (2h)`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Central finite-difference directional derivative of a vector field.
///
/// Given `grad_f(x)` (any map from tensors to gradient tensors) this
/// approximates the Jacobian-vector product `J(x) . dir` as
/// `(grad_f(x + h d) - grad_f(x - h d)) * (|dir| / 2h)` with `d` the
/// normalized direction — the channel the joint attack uses for its
/// Hessian-vector products.
pub fn directional_grad_diff<F>(mut grad_f: F, x: &Tensor, dir: &[f64], h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(Tensor::zeros(x.shape().to_vec()));
    }
    let mut up_x = x.clone();
    let mut down_x = x.clone();
    for ((u, d), v) in up_x
        .data_mut()
        .iter_mut()
        .zip(down_x.data_mut())
        .zip(dir)
    {
        let step = h * v / norm;
        *u += step;
        *d -= step;
    }
    let up = grad_f(&up_x)?;
    let down = grad_f(&down_x)?;
    let scale = norm / (2.0 * h);
    let data: Vec<f64> = up
        .data()
        .iter()
        .zip(down.data())
        .map(|(u, d)| (u - d) * scale)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Loss value and gradient of a tape-built loss w.r.t. the input `x`.
///
/// `build` receives a fresh tape and the bound input variable and must
/// return the scalar loss node. Model parameters bound inside `build`
/// keep their own `requires_grad` flags; binding copies values, so their
/// gradient buffers outside the tape are never touched.
pub fn input_gradient<F>(build: F, x: &Tensor) -> Result<(f64, Tensor)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf_parts(x.shape().to_vec(), x.data().to_vec(), true);
    let loss = build(&mut tape, xv)?;
    let value = tape.scalar(loss)?;
    tape.backward(loss)?;
    let grad = match tape.grad(xv) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };
    Ok((value, Tensor::new(x.shape().to_vec(), grad)?))
}

/// Relative disagreement between an analytic and a finite-difference
/// gradient: max-norm of the difference over the max-norm of the pair,
/// floored so near-zero gradients do not divide by noise.
pub fn gradient_rel_err(analytic: &Tensor, fd: &Tensor) -> f64 {
    let scale = analytic.max_abs().max(fd.max_abs()).max(1e-4);
    let diff = analytic
        .data()
        .iter()
        .zip(fd.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_analytic_on_a_quadratic() {
        // f(x) = sum(x*x); exact gradient 2x.
        let x = Tensor::from_slice(&[0.5, -1.25, 2.0]);
        let f = |t: &Tensor| -> Result<f64> {
            Ok(t.data().iter().map(|v| v * v).sum())
        };
        let g = finite_diff_gradient(f, &x, FD_DEFAULT_H).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-9, "{gi} vs {}", 2.0 * xi);
        }
    }

    #[test]
    fn input_gradient_through_a_tape() {
        let x = Tensor::from_slice(&[1.0, 2.0, 3.0]);
        let (value, grad) = input_gradient(
            |tape, xv| {
                let sq = tape.mul(xv, xv)?;
                Ok(tape.sum(sq))
            },
            &x,
        )
        .unwrap();
        assert_eq!(value, 14.0);
        assert_eq!(grad.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn directional_diff_of_a_linear_gradient_field() {
        // f(x) = x . A x with A = diag(1, 2): grad f = 2 A x, so the
        // Jacobian is 2A and J.dir is exact for any h.
        let x = Tensor::from_slice(&[0.3, 0.7]);
        let grad_f = |t: &Tensor| -> Result<Tensor> {
            Ok(Tensor::from_slice(&[2.0 * t.data()[0], 4.0 * t.data()[1]]))
        };
        let jv = directional_grad_diff(grad_f, &x, &[1.0, -1.0], 1e-4).unwrap();
        assert!((jv.data()[0] - 2.0).abs() < 1e-9);
        assert!((jv.data()[1] + 4.0).abs() < 1e-9);
    }

    #[test]
    fn zero_direction_gives_zero() {
        let x = Tensor::from_slice(&[1.0]);
        let jv = directional_grad_diff(
            |_| Ok(Tensor::from_slice(&[1.0])),
            &x,
            &[0.0],
            1e-4,
        )
        .unwrap();
        assert_eq!(jv.data(), &[0.0]);
    }
}
