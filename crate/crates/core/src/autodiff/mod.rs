//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The backward pass is recorded on the same tape as the forward pass, which
//! is what lets a training objective depend on input gradients: a penalty on
//! `∂f/∂x` can itself be differentiated with respect to the parameters.
//!
//! ```
//! use attriprior::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.scalar(2.0);
//! let y = x * x * x;
//! let dy = tape.var(tape.grad(y.id(), &[x.id()]).unwrap()[0]).unwrap();
//! let d2y = tape.grad(dy.id(), &[x.id()]).unwrap()[0];
//! assert_eq!(dy.item(), 12.0);
//! assert_eq!(tape.value(d2y)[[0, 0]], 12.0);
//! ```

mod check;
mod tape;

pub use check::{finite_diff_check, gradient_check, rel_error};
pub use tape::{Checkpoint, Matrix, NodeId, OpTag, Tape, Var};

use crate::error::{Error, Result};

/// Result of recording a scalar computation.
pub struct Forward {
    pub tape: Tape,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
    pub value: f64,
}

/// Records `expr` applied to scalar `inputs` on a fresh tape.
pub fn forward<F>(expr: F, inputs: &[f64]) -> Result<Forward>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { op: OpTag::Leaf });
    }
    let tape = Tape::new();
    let (ids, output, value) = {
        let vars: Vec<Var<'_>> = inputs.iter().map(|&v| tape.scalar(v)).collect();
        let out = expr(&vars)?;
        tape.check_finite()?;
        if out.shape() != (1, 1) {
            return Err(Error::Shape(format!("expression output is {:?}, expected 1x1", out.shape())));
        }
        (vars.iter().map(|v| v.id()).collect::<Vec<_>>(), out.id(), out.item())
    };
    Ok(Forward { tape, inputs: ids, output, value })
}

/// Gradient of `output` with respect to `wrt`, recorded as new tape nodes.
pub fn backward(tape: &Tape, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
    tape.grad(output, wrt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn d(tape: &Tape, out: Var<'_>, x: Var<'_>) -> f64 {
        let g = tape.grad(out.id(), &[x.id()]).unwrap()[0];
        tape.value(g)[[0, 0]]
    }

    #[test]
    fn forward_examples() {
        let f = forward(|v| Ok(v[0] * v[0]), &[3.0]).unwrap();
        assert_eq!(f.value, 9.0);
        let f = forward(|v| Ok(v[0].relu()), &[-2.0]).unwrap();
        assert_eq!(f.value, 0.0);
        let f = forward(|v| Ok(v[0] * v[1] + v[1]), &[2.0, 5.0]).unwrap();
        assert_eq!(f.value, 15.0);
    }

    #[test]
    fn backward_examples() {
        let f = forward(|v| Ok(v[0] * v[0]), &[3.0]).unwrap();
        let g = backward(&f.tape, f.output, &f.inputs).unwrap();
        assert_eq!(f.tape.value(g[0])[[0, 0]], 6.0);

        let f = forward(|v| Ok(v[0].relu()), &[-1.0]).unwrap();
        let g = backward(&f.tape, f.output, &f.inputs).unwrap();
        assert_eq!(f.tape.value(g[0])[[0, 0]], 0.0);
    }

    fn grad_norm_sq_of_cube(x0: f64) -> f64 {
        let tape = Tape::new();
        let x = tape.scalar(x0);
        let f = x * x * x;
        let gx = tape.var(tape.grad(f.id(), &[x.id()]).unwrap()[0]).unwrap();
        let g = gx * gx;
        d(&tape, g, x)
    }

    #[test]
    fn gradient_penalty_second_order() {
        // g = (f')^2 with f = x^3 → g' = 2·3x²·6x = 288 at x = 2.
        assert_eq!(grad_norm_sq_of_cube(2.0), 288.0);
        // Oracle: central difference of g itself.
        let g = |x: f64| (3.0 * x * x).powi(2);
        let h = 1e-4;
        let fd = (g(2.0 + h) - g(2.0 - h)) / (2.0 * h);
        assert!((fd - 288.0).abs() / 288.0 < 1e-8);
    }

    #[test]
    fn invalid_node_errors() {
        let tape = Tape::new();
        let x = tape.scalar(1.0);
        assert!(matches!(tape.grad(NodeId(99), &[x.id()]), Err(Error::InvalidNode(99))));
        assert!(matches!(tape.grad(x.id(), &[NodeId(7)]), Err(Error::InvalidNode(7))));
        assert!(tape.var(NodeId(5)).is_err());
    }

    #[test]
    fn non_finite_names_op() {
        let err = forward(|v| Ok(v[0].ln()), &[-1.0]).err().unwrap();
        assert!(matches!(err, Error::NonFiniteValue { op: OpTag::Log }), "{err}");
        let err = forward(|v| Ok(v[0] / v[1]), &[1.0, 0.0]).err().unwrap();
        assert!(matches!(err, Error::NonFiniteValue { op: OpTag::Div }));
        assert!(forward(|v| Ok(v[0]), &[f64::NAN]).is_err());
    }

    #[test]
    fn unreachable_wrt_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        let y = tape.leaf(array![[3.0], [4.0], [5.0]]);
        let out = (x * x).sum();
        let g = tape.grad(out.id(), &[y.id()]).unwrap();
        assert_eq!(*tape.value(g[0]), ndarray::Array2::<f64>::zeros((3, 1)));
    }

    #[test]
    fn relu_derivatives_follow_convention() {
        for &(x0, d1) in &[(1.5, 1.0), (0.0, 0.0), (-0.5, 0.0)] {
            let tape = Tape::new();
            let x = tape.scalar(x0);
            let y = x.relu();
            let g = tape.var(tape.grad(y.id(), &[x.id()]).unwrap()[0]).unwrap();
            assert_eq!(g.item(), d1);
            let g2 = tape.grad(g.id(), &[x.id()]).unwrap()[0];
            assert_eq!(tape.value(g2)[[0, 0]], 0.0);
        }
    }

    #[test]
    fn abs_and_sqrt_at_zero() {
        let tape = Tape::new();
        let x = tape.scalar(0.0);
        assert_eq!(d(&tape, x.abs(), x), 0.0);
        assert_eq!(d(&tape, x.sqrt(), x), 0.0);
    }

    #[test]
    fn power_second_derivatives() {
        for k in [2.0, 3.0, 4.0] {
            let tape = Tape::new();
            let x = tape.scalar(2.0);
            let y = x.powf(k);
            let g = tape.var(tape.grad(y.id(), &[x.id()]).unwrap()[0]).unwrap();
            let h = d(&tape, g, x);
            let want = k * (k - 1.0) * 2f64.powf(k - 2.0);
            assert!((h - want).abs() <= 1e-6 * want, "k={k}: {h} vs {want}");
        }
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let a = array![[0.3, -1.2, 0.7], [0.5, 0.1, -0.4]];
        let b = array![[1.1, -0.2], [0.4, 0.9], [-0.6, 0.3]];
        let row = array![[0.2, -0.3]];
        let err = gradient_check(
            |v| {
                let h = v[0].matmul(v[1]).add_row(v[2]);
                let s = h.tanh().sum_cols().sigmoid();
                Ok((s * s).sum() + h.t().sum_rows().exp().mean())
            },
            &[a, b, row],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn replay_reproduces_values() {
        let tape = Tape::new();
        let x = tape.leaf(array![[0.5, -1.5], [2.0, 0.25]]);
        let w = tape.leaf(array![[1.0, 2.0], [-0.5, 0.3]]);
        let y = x.matmul(w).relu().square().sum_cols().sqrt();
        let z = y.sum();
        let _ = tape.grad(z.id(), &[w.id()]).unwrap();
        let replayed = tape.replay();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(*v, *tape.value(NodeId(i)), "node {i}");
        }
    }

    #[test]
    fn parents_precede_children() {
        let tape = Tape::new();
        let x = tape.leaf(array![[0.5, -1.5]]);
        let y = (x * x).sum().exp();
        let g = tape.grad(y.id(), &[x.id()]).unwrap()[0];
        let _ = tape.grad(tape.var(g).unwrap().sum().id(), &[x.id()]).unwrap();
        for i in 0..tape.len() {
            for p in tape.parents(NodeId(i)) {
                assert!(p.0 < i);
            }
        }
    }

    #[test]
    fn truncate_rolls_back() {
        let tape = Tape::new();
        let x = tape.scalar(1.0);
        let cp = tape.checkpoint();
        let y = x.ln() - 10.0;
        let _ = (y / tape.scalar(0.0)).id();
        assert!(tape.check_finite().is_err());
        tape.truncate(cp);
        assert_eq!(tape.len(), 1);
        assert!(tape.check_finite().is_ok());
        assert!(tape.var(y.id()).is_err());
    }

    #[test]
    fn mul_const_and_max() {
        let tape = Tape::new();
        let x = tape.leaf(array![[1.0, -2.0, 3.0]]);
        let y = tape.leaf(array![[0.0, 0.0, 5.0]]);
        let c = Arc::new(array![[2.0, 3.0, 4.0]]);
        let out = (x.max(y).mul_const(c)).sum();
        assert_eq!(out.item(), 2.0 + 0.0 + 20.0);
        let g = tape.grad(out.id(), &[x.id(), y.id()]).unwrap();
        assert_eq!(*tape.value(g[0]), array![[2.0, 0.0, 0.0]]);
        assert_eq!(*tape.value(g[1]), array![[0.0, 3.0, 4.0]]);
    }

    /// Unary ops paired with a domain that avoids kinks and singularities.
    fn unary_cases() -> Vec<(&'static str, fn(Var<'_>) -> Var<'_>, f64, f64)> {
        vec![
            ("exp", |v| v.exp(), -2.0, 2.0),
            ("log", |v| v.ln(), 0.2, 4.0),
            ("pow", |v| v.powf(2.5), 0.2, 3.0),
            ("sqrt", |v| v.sqrt(), 0.2, 4.0),
            ("relu", |v| v.relu(), -2.0, 2.0),
            ("sigmoid", |v| v.sigmoid(), -3.0, 3.0),
            ("tanh", |v| v.tanh(), -2.0, 2.0),
            ("abs", |v| v.abs(), -2.0, 2.0),
            ("neg", |v| -v, -2.0, 2.0),
            ("square", |v| v.square(), -2.0, 2.0),
            ("recip", |v| 1.0 / v, 0.3, 3.0),
        ]
    }

    #[test]
    fn primitives_match_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, &[]);
        for (name, f, lo, hi) in unary_cases() {
            for _ in 0..100 {
                let mut x: f64 = rng.random_range(lo..hi);
                if x.abs() < 1e-3 {
                    x += 0.01;
                }
                let err = finite_diff_check(|v| Ok(f(v[0])), &[x], 1, 1e-6).unwrap();
                assert!(err <= 1e-5, "{name} at {x}: {err}");
            }
        }
        for _ in 0..100 {
            let a: f64 = rng.random_range(-2.0..2.0);
            let b: f64 = rng.random_range(0.5..2.0);
            for (name, err) in [
                ("add", finite_diff_check(|v| Ok(v[0] + v[1]), &[a, b], 1, 1e-6).unwrap()),
                ("sub", finite_diff_check(|v| Ok(v[0] - v[1]), &[a, b], 1, 1e-6).unwrap()),
                ("mul", finite_diff_check(|v| Ok(v[0] * v[1]), &[a, b], 1, 1e-6).unwrap()),
                ("div", finite_diff_check(|v| Ok(v[0] / v[1]), &[a, b], 1, 1e-6).unwrap()),
                ("max", finite_diff_check(|v| Ok(v[0].max(v[1] + 0.25)), &[a, b], 1, 1e-6).unwrap()),
            ] {
                assert!(err <= 1e-5, "{name} at ({a},{b}): {err}");
            }
        }
    }

    #[test]
    fn finite_diff_check_examples() {
        let err = finite_diff_check(|v| Ok(v[0] * v[0] * v[0] + v[0]), &[1.5], 1, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
        let err = finite_diff_check(|v| Ok(v[0] * 1.0), &[0.7], 2, 1e-3).unwrap();
        assert!(err <= 1e-8, "{err}");
        let err = finite_diff_check(|v| Ok(v[0] * v[1].exp() + v[0].powf(3.0)), &[0.7, -0.3], 2, 1e-4)
            .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    proptest! {
        #[test]
        fn differentiation_is_linear(x0 in -2.0f64..2.0, y0 in 0.5f64..2.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let tape = Tape::new();
            let x = tape.scalar(x0);
            let y = tape.scalar(y0);
            let f = x * x * y;
            let g = x.exp() / y;
            let combo = f * a + g * b;
            let gc = tape.grad(combo.id(), &[x.id(), y.id()]).unwrap();
            let gf = tape.grad(f.id(), &[x.id(), y.id()]).unwrap();
            let gg = tape.grad(g.id(), &[x.id(), y.id()]).unwrap();
            for i in 0..2 {
                let lhs = tape.value(gc[i])[[0, 0]];
                let rhs = a * tape.value(gf[i])[[0, 0]] + b * tape.value(gg[i])[[0, 0]];
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }
}
