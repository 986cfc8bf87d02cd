//! Dense tensors and a reverse-mode gradient tape.
//!
//! The tape is rebuilt for every evaluation: record a forward pass with
//! [`Tape::param`]/[`Tape::constant`] leaves and the primitive ops, then call
//! [`Tape::backward`] on a scalar.

mod tape;
mod tensor;

pub use tape::{Activation, Gradients, Tape, Var};
pub(crate) use tape::softplus;
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Central-difference gradient `(f(x + h eᵢ) - f(x - h eᵢ)) / 2h`.
pub fn finite_diff_gradient<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "finite-difference objective at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (up - down) / (h + h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / a.norm().max(b.norm()).max(1e-8)
    }

    #[test]
    fn relu_forward_and_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.activation(x, Activation::Relu);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = tape.activation(x, Activation::Relu);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::LeakyRelu(0.01).apply(-1.0_f64), -0.01);
        assert_eq!(Activation::Tanh.apply(0.0_f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0_f64), 0.5);
        assert!("leaky_relu(1.5)".parse::<Activation>().is_err());
        assert_eq!(
            "leaky_relu(0.2)".parse::<Activation>().unwrap(),
            Activation::LeakyRelu(0.2)
        );
    }

    #[test]
    fn half_norm_gradient_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.3, -1.2, 4.0]));
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.wrt(x).data(), tape.value(x).data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_param_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::from_vec(vec![5.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(!g.is_reached(unused));
        assert_eq!(g.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn matrix_quadratic_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        let z = rand_tensor(&mut rng, &[2, 1], -1.0, 1.0);
        let loss = |w: &Tensor<f64>| -> Result<f64> {
            let wz = w.matmul(&z)?;
            Ok(0.5 * wz.data().iter().map(|v| v * v).sum::<f64>())
        };
        let mut tape = Tape::new();
        let wv = tape.param(w.clone());
        let zv = tape.constant(z.clone());
        let wz = tape.matmul(wv, zv).unwrap();
        let sq = tape.square(wz);
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        let ad = tape.backward(l).unwrap().wrt(wv);
        let fd = finite_diff_gradient(loss, &w, 1e-6).unwrap();
        assert!(rel_err(&ad, &fd) <= 1e-6);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_gradient(|x: &Tensor<f64>| Ok(0.5 * x.data()[0].powi(2)), &Tensor::from_vec(vec![3.0]), 1e-6)
            .unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-6);
        let g = finite_diff_gradient(|_: &Tensor<f64>| Ok(7.0), &Tensor::from_vec(vec![1.0, 2.0]), 1e-6).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
        let g = finite_diff_gradient(
            |x: &Tensor<f64>| Ok(x.data().iter().map(|v| v.tanh()).sum()),
            &Tensor::from_vec(vec![0.0]),
            1e-6,
        )
        .unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-6);
        let bad = finite_diff_gradient(|_: &Tensor<f64>| Ok(f64::NAN), &Tensor::from_vec(vec![0.0]), 1e-6);
        assert!(matches!(bad, Err(Error::Numeric(_))));
    }

    #[derive(Clone, Copy, Debug)]
    enum Prim {
        Act(Activation),
        Exp,
        Square,
        Softplus,
        Clamp,
        Linear,
        MatMul,
        Mul,
        AddRow,
        SumColsMean,
    }

    const PRIMS: [Prim; 14] = [
        Prim::Act(Activation::Relu),
        Prim::Act(Activation::LeakyRelu(0.1)),
        Prim::Act(Activation::Tanh),
        Prim::Act(Activation::Sigmoid),
        Prim::Act(Activation::Silu),
        Prim::Exp,
        Prim::Square,
        Prim::Softplus,
        Prim::Clamp,
        Prim::Linear,
        Prim::MatMul,
        Prim::Mul,
        Prim::AddRow,
        Prim::SumColsMean,
    ];

    /// Scalar test objective `sum(c ⊙ prim(x))` with a fixed random weighting `c`.
    fn eval_prim(p: Prim, x: &Tensor<f64>, aux: &Tensor<f64>, c: &Tensor<f64>, tape: &mut Tape<f64>) -> (Var, Var) {
        let xv = tape.param(x.clone());
        let av = tape.constant(aux.clone());
        let y = match p {
            Prim::Act(k) => tape.activation(xv, k),
            Prim::Exp => tape.exp(xv),
            Prim::Square => tape.square(xv),
            Prim::Softplus => tape.softplus(xv),
            Prim::Clamp => tape.clamp(xv, -0.5, 0.5),
            Prim::Linear => {
                let b = tape.constant(Tensor::from_vec(vec![0.1, -0.2, 0.3]));
                tape.linear(xv, av, b).unwrap()
            }
            Prim::MatMul => {
                let at = tape.constant(aux.transpose().unwrap());
                tape.matmul(xv, at).unwrap()
            }
            Prim::Mul => {
                let sh = tape.constant(aux.map(|v| v * 0.7 + 0.2));
                tape.mul(xv, sh).unwrap()
            }
            Prim::AddRow => {
                let r = tape.param(Tensor::from_vec(vec![0.5; 4]));
                tape.add_row(xv, r).unwrap()
            }
            Prim::SumColsMean => {
                let s = tape.sum_cols(xv);
                let sq = tape.square(s);
                let m = tape.mean(sq);
                return (xv, m);
            }
        };
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let cv = tape.constant(Tensor::new(&shape, c.data()[..n].to_vec()).unwrap());
        let wy = tape.mul(y, cv).unwrap();
        (xv, tape.sum(wy))
    }

    fn near_kink(p: Prim, x: &Tensor<f64>) -> bool {
        let kinks: &[f64] = match p {
            Prim::Act(a) if a.is_piecewise_linear() => &[0.0],
            Prim::Clamp => &[-0.5, 0.5],
            _ => &[],
        };
        x.data().iter().any(|v| kinks.iter().any(|k| (v - k).abs() < 1e-3))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn primitives_match_finite_differences(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
            let aux = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
            let c = rand_tensor(&mut rng, &[12], -1.0, 1.0);
            for p in PRIMS {
                if near_kink(p, &x) {
                    continue;
                }
                let mut tape = Tape::new();
                let (xv, loss) = eval_prim(p, &x, &aux, &c, &mut tape);
                let ad = tape.backward(loss).unwrap().wrt(xv);
                let fd = finite_diff_gradient(|xp: &Tensor<f64>| {
                    let mut t = Tape::new();
                    let (_, l) = eval_prim(p, xp, &aux, &c, &mut t);
                    Ok(t.value(l).data()[0])
                }, &x, 1e-6).unwrap();
                let e = rel_err(&ad, &fd);
                prop_assert!(e <= 1e-5, "{p:?}: rel err {e}");
            }
        }

        #[test]
        fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
            let build = |tape: &mut Tape<f64>, wf: f64, wg: f64| {
                let xv = tape.param(x.clone());
                let t = tape.activation(xv, Activation::Tanh);
                let f = tape.sum(t);
                let sq = tape.square(xv);
                let g = tape.mean(sq);
                let fa = tape.scale(f, wf);
                let gb = tape.scale(g, wg);
                (xv, tape.add(fa, gb).unwrap())
            };
            let grad = |wf, wg| {
                let mut tape = Tape::new();
                let (xv, l) = build(&mut tape, wf, wg);
                tape.backward(l).unwrap().wrt(xv)
            };
            let combined = grad(a, b);
            let gf = grad(1.0, 0.0);
            let gg = grad(0.0, 1.0);
            for i in 0..combined.len() {
                let lin = a * gf.data()[i] + b * gg.data()[i];
                prop_assert!((combined.data()[i] - lin).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn retracing_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(w.clone());
            let b = tape.param(Tensor::from_vec(vec![0.0, 0.1]));
            let h = tape.linear(xv, wv, b).unwrap();
            let h = tape.activation(h, Activation::Silu);
            let l = tape.mean(h);
            let g = tape.backward(l).unwrap();
            (tape.value(l).clone(), g.wrt(wv), g.wrt(b))
        };
        assert_eq!(run(), run());
    }
}
