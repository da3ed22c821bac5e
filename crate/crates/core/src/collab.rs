//! Collaboration enhancement: alternate soft-assignment (E) and basis
//! re-estimation (M) steps over the whole query set, then reconstruct each
//! query map from the shared bases.
//!
//! The bases are pooled across all n query images — that pooling is the
//! collaboration mechanism. Iterations run on detached values; gradients flow
//! only through the final read-out `Z_i * mu` and the 1x1 convs around it.
//!
//! The M-step sums its weighted terms in a canonical order (sorted by value
//! bits) so the bases are bitwise invariant to any permutation of the image
//! list and of positions within each image, in sequential and parallel mode
//! alike.

use crate::error::Result;
use crate::model::{BoundConv, ConvParams};
use crate::tensor::{kernels, Scalar, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// K shared basis rows of width C' (unit L2 norm outside of the raw M-step).
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet<T> {
    pub mu: Tensor<T>,
}

impl<T: Scalar> BasisSet<T> {
    pub fn k(&self) -> usize {
        self.mu.shape()[0]
    }
}

/// Per-image soft assignments: `[N, K]` rows summing to one.
#[derive(Clone, Debug)]
pub struct Responsibilities<T> {
    pub per_image: Vec<Tensor<T>>,
}

/// L2-normalizes every row of a `[K, C]` matrix.
pub fn normalize_rows<T: Scalar>(mu: &Tensor<T>) -> Tensor<T> {
    let (k, c) = (mu.shape()[0], mu.shape()[1]);
    let mut out = mu.data().to_vec();
    for row in out.chunks_mut(c) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
    }
    Tensor::new(vec![k, c], out)
}

/// E-step on detached values: `Z_i = row_softmax(F_i mu^T)`, the normalized
/// exponential-kernel weights.
pub fn e_step<T: Scalar>(features: &[Tensor<T>], mu: &Tensor<T>) -> Responsibilities<T> {
    let (k, c) = (mu.shape()[0], mu.shape()[1]);
    let mu_t = kernels::transpose(mu.data(), k, c);
    let per_image = features
        .iter()
        .map(|f| {
            let n = f.shape()[0];
            let logits = kernels::matmul(f.data(), &mu_t, n, c, k);
            Tensor::new(vec![n, k], kernels::softmax_axis(&logits, &[n, k], 1))
        })
        .collect();
    Responsibilities { per_image }
}

/// Pre-normalization M-step: each basis row is the responsibility-weighted
/// average of every feature row of every image. Terms are accumulated in a
/// canonical sorted order (see module docs).
pub fn weighted_mean<T: Scalar>(features: &[Tensor<T>], z: &Responsibilities<T>) -> Tensor<T> {
    let k = z.per_image[0].shape()[1];
    let c = features[0].shape()[1];
    let mut out = vec![T::zero(); k * c];
    let mut terms: Vec<T> = Vec::new();
    for basis in 0..k {
        terms.clear();
        for (f, zi) in features.iter().zip(&z.per_image) {
            let n = f.shape()[0];
            for j in 0..n {
                terms.push(zi.data()[j * k + basis]);
            }
        }
        let denom = canonical_sum(&mut terms);
        for ch in 0..c {
            terms.clear();
            for (f, zi) in features.iter().zip(&z.per_image) {
                let n = f.shape()[0];
                for j in 0..n {
                    terms.push(zi.data()[j * k + basis] * f.data()[j * c + ch]);
                }
            }
            out[basis * c + ch] = canonical_sum(&mut terms) / denom;
        }
    }
    Tensor::new(vec![k, c], out)
}

/// Full M-step: weighted average pooled over all images, rows re-normalized.
pub fn m_step<T: Scalar>(features: &[Tensor<T>], z: &Responsibilities<T>) -> Tensor<T> {
    normalize_rows(&weighted_mean(features, z))
}

/// Sorts by total order, then folds left. Input order never affects the
/// result; softmax outputs are strictly positive so denominators never
/// vanish. Non-finite values (a diverged run) keep flowing to the loss
/// check instead of panicking here.
fn canonical_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.iter().copied().sum()
}

/// Learned parameters: the projection conv in, the output conv back, and the
/// basis initialization reused at the start of every episode.
pub struct Collaboration<T> {
    proj: ConvParams<T>,
    out: ConvParams<T>,
    mu0: Tensor<T>,
    pub iterations: usize,
}

pub struct CollabVars<'t, T: Scalar> {
    pub(crate) proj: BoundConv<'t, T>,
    pub(crate) out: BoundConv<'t, T>,
    pub(crate) mu0: Var<'t, T>,
    iterations: usize,
}

/// Enhanced maps plus the detached E-M state, exposed for inspection.
pub struct CemOutput<'t, T: Scalar> {
    pub enhanced: Vec<Var<'t, T>>,
    pub bases: BasisSet<T>,
    pub responsibilities: Responsibilities<T>,
    /// Read-out reconstruction rows per image (`[N, C']`), before the output
    /// conv; rank is bounded by K.
    pub reconstructed: Vec<Tensor<T>>,
}

impl<T: Scalar> Collaboration<T> {
    pub fn init(
        channels: usize,
        projected: usize,
        k: usize,
        iterations: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(iterations >= 1, "at least one E-M iteration");
        let bound = T::of_f64((3.0 / projected as f64).sqrt());
        Collaboration {
            proj: ConvParams::init(projected, channels, 1, rng),
            out: ConvParams::init(channels, projected, 1, rng),
            mu0: normalize_rows(&Tensor::uniform(vec![k, projected], bound, rng)),
            iterations,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> CollabVars<'t, T> {
        let mu0 = if trainable {
            tape.leaf(self.mu0.clone())
        } else {
            tape.constant(self.mu0.clone())
        };
        CollabVars {
            proj: self.proj.bind(tape, trainable),
            out: self.out.bind(tape, trainable),
            mu0,
            iterations: self.iterations,
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.proj.named("collab.proj".into());
        v.extend(self.out.named("collab.out".into()));
        v.push(("collab.mu0".into(), &self.mu0));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.proj.named_mut("collab.proj".into());
        v.extend(self.out.named_mut("collab.out".into()));
        v.push(("collab.mu0".into(), &mut self.mu0));
        v
    }
}

impl<'t, T: Scalar> CollabVars<'t, T> {
    /// 1x1 projection then flatten: `[C, H, W] -> [N, C']` with N = H*W.
    pub fn project(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let p = self.proj.apply(x, 1)?;
        let s = p.shape();
        let (c, n) = (s[0], s[1] * s[2]);
        Ok(p.reshape(vec![c, n])?.transpose()?)
    }

    /// Runs the iterations on detached projections, then reconstructs every
    /// query map on-tape from the final assignments and bases.
    pub fn forward(&self, xs: &[Var<'t, T>]) -> Result<CemOutput<'t, T>> {
        assert!(!xs.is_empty(), "collaboration needs at least one query");
        let proj_vars: Vec<Var<'t, T>> = xs
            .iter()
            .map(|&x| self.project(x))
            .collect::<Result<_>>()?;
        let features: Vec<Tensor<T>> = proj_vars.iter().map(|p| p.value()).collect();

        // Detached alternation. The final E-step's bases (mu_e) and the final
        // M-step's bases (mu_final) both feed the read-out below.
        let mut mu_e = normalize_rows(&self.mu0.value());
        let mut z = e_step(&features, &mu_e);
        let mut mu_final = m_step(&features, &z);
        for _ in 1..self.iterations {
            mu_e = mu_final;
            z = e_step(&features, &mu_e);
            mu_final = m_step(&features, &z);
        }

        let (k, c_proj) = (mu_final.shape()[0], mu_final.shape()[1]);
        let tape = xs[0].tape();
        let mu_e_t = tape.constant(Tensor::new(
            vec![c_proj, k],
            kernels::transpose(mu_e.data(), k, c_proj),
        ));
        let mu_final_v = tape.constant(mu_final.clone());

        let mut enhanced = Vec::with_capacity(xs.len());
        let mut reconstructed = Vec::with_capacity(xs.len());
        for (&x, &p) in xs.iter().zip(&proj_vars) {
            let z_var = p.matmul(mu_e_t)?.softmax(1)?;
            let f_tilde = z_var.matmul(mu_final_v)?;
            reconstructed.push(f_tilde.value());
            let s = x.shape();
            let (h, w) = (s[1], s[2]);
            let back = f_tilde.transpose()?.reshape(vec![c_proj, h, w])?;
            let residual = self.out.apply(back, 1)?;
            enhanced.push(x.add(residual)?);
        }
        Ok(CemOutput {
            enhanced,
            bases: BasisSet { mu: mu_final },
            responsibilities: z,
            reconstructed,
        })
    }
}
