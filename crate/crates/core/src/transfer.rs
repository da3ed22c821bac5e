//! Purpose transfer: inject the support's purpose vector into a query
//! feature map through spatial attention with a residual connection.
//!
//! No learned parameters: score every position by its dot product with the
//! purpose vector, softmax over positions, and add the re-weighted map back
//! onto the input. Every column ends up scaled by `1 + alpha_j` with the
//! attention field summing to one, so the output keeps the input's sign
//! pattern and each scale factor stays in (1, 2].

use crate::error::Result;
use crate::tensor::{Scalar, Var};

/// `x + softmax(<x, f>) * x` over spatial positions of a `[C, H, W]` map.
pub fn transfer<'t, T: Scalar>(x: Var<'t, T>, f_sup: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let scores = f_sup
        .reshape(vec![1, c])?
        .matmul(x.reshape(vec![c, h * w])?)?;
    let alpha = scores.softmax(1)?.reshape(vec![h, w])?;
    Ok(x.add(x.mul_positions(alpha)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kernels, Tape, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn zero_purpose_gives_uniform_boost() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(rand_tensor(&[4, 3, 3], &mut rng));
        let f = tape.constant(Tensor::zeros(vec![4]));
        let y = transfer(x, f).unwrap();
        let want = x.value().map(|v| v * (1.0 + 1.0 / 9.0));
        assert!(y.value().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn single_position_doubles() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(rand_tensor(&[4, 1, 1], &mut rng));
        let f = tape.constant(rand_tensor(&[4], &mut rng));
        let y = transfer(x, f).unwrap();
        let want = x.value().map(|v| 2.0 * v);
        assert!(y.value().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let xv = rand_tensor(&[4, 3, 3], &mut rng);
            let fv = rand_tensor(&[4], &mut rng);

            let mut scores = [0.0f64; 9];
            for p in 0..9 {
                for c in 0..4 {
                    scores[p] += xv.data()[c * 9 + p] * fv.data()[c];
                }
            }
            let alpha = kernels::softmax_axis(&scores, &[9], 0);
            let mut want = vec![0.0; 36];
            for c in 0..4 {
                for p in 0..9 {
                    want[c * 9 + p] = xv.data()[c * 9 + p] * (1.0 + alpha[p]);
                }
            }

            let tape = Tape::new();
            let y = transfer(tape.constant(xv), tape.constant(fv)).unwrap();
            for (g, w) in y.value().data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![4, 2, 2]));
        let f = tape.constant(Tensor::zeros(vec![3]));
        assert!(transfer(x, f).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Residual dominance: every position is scaled by a factor in (1, 2],
        /// and the attention weights recovered from those factors sum to one.
        #[test]
        fn residual_dominance_and_normalization(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xv = rand_tensor(&[3, 2, 4], &mut rng).map(|v| v + 3.0 * v.signum());
            let fv = rand_tensor(&[3], &mut rng);
            let tape = Tape::new();
            let y = transfer(tape.constant(xv.clone()), tape.constant(fv)).unwrap();
            let yv = y.value();
            let mut alpha_sum = 0.0;
            for p in 0..8 {
                let factor = yv.data()[p] / xv.data()[p];
                prop_assert!(factor > 1.0 && factor <= 2.0, "factor {factor}");
                alpha_sum += factor - 1.0;
            }
            prop_assert!((alpha_sum - 1.0).abs() < 1e-6);
        }

        /// Permuting spatial positions of x permutes the output identically.
        #[test]
        fn spatial_equivariance(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xv = rand_tensor(&[3, 2, 2], &mut rng);
            let fv = rand_tensor(&[3], &mut rng);
            let perm = [2usize, 0, 3, 1];

            let mut xp = Tensor::zeros(vec![3, 2, 2]);
            for c in 0..3 {
                for (dst, &src) in perm.iter().enumerate() {
                    xp.data_mut()[c * 4 + dst] = xv.data()[c * 4 + src];
                }
            }

            let tape = Tape::new();
            let y = transfer(tape.constant(xv), tape.constant(fv.clone())).unwrap().value();
            let tape2 = Tape::new();
            let yp = transfer(tape2.constant(xp), tape2.constant(fv)).unwrap().value();
            for c in 0..3 {
                for (dst, &src) in perm.iter().enumerate() {
                    prop_assert!((yp.data()[c * 4 + dst] - y.data()[c * 4 + src]).abs() < 1e-12);
                }
            }
        }
    }
}
