//! Top-down pyramid decoder with five prediction heads, plus the
//! deeply-supervised binary cross-entropy objective.
//!
//! The deepest level enters through its own conv; every shallower level is
//! fused as `leaky(conv(upsample2(P[m+1]) + conv(X[m])))`. Each level's
//! prediction is a sigmoid of a single-channel conv, bilinearly doubled back
//! up to input resolution. Level 1 is the designated final prediction for
//! metrics. The rectifier between fusion stages is what lets the decoder
//! combine coarse shape evidence with fine boundaries instead of merely
//! averaging them.

use crate::encoder::FeaturePyramid;
use crate::error::{DataError, Error, Result};
use crate::model::{BoundConv, ConvParams};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Probability clamp for the loss logs.
pub const PROB_EPS: f64 = 1e-7;

/// Per-image decoder outputs: intermediate features and the five
/// probability maps at input resolution, all in (0, 1).
pub struct PredictionStack<'t, T: Scalar> {
    p: [Var<'t, T>; 5],
    d: [Var<'t, T>; 5],
}

impl<'t, T: Scalar> PredictionStack<'t, T> {
    /// Intermediate feature P at level `m` in 1..=5.
    pub fn feature(&self, m: usize) -> Var<'t, T> {
        self.p[m - 1]
    }

    /// Probability map D at level `m` in 1..=5, upsampled to input size.
    pub fn prediction(&self, m: usize) -> Var<'t, T> {
        self.d[m - 1]
    }

    /// The map metrics run on.
    pub fn final_prediction(&self) -> Var<'t, T> {
        self.d[0]
    }
}

/// Decoder parameters.
pub struct Decoder<T> {
    in5: ConvParams<T>,
    laterals: Vec<ConvParams<T>>, // levels 1..=4
    fuses: Vec<ConvParams<T>>,    // levels 1..=4
    heads: Vec<ConvParams<T>>,    // levels 1..=5
}

pub struct DecoderVars<'t, T: Scalar> {
    pub(crate) in5: BoundConv<'t, T>,
    pub(crate) laterals: Vec<BoundConv<'t, T>>,
    pub(crate) fuses: Vec<BoundConv<'t, T>>,
    pub(crate) heads: Vec<BoundConv<'t, T>>,
}

impl<T: Scalar> Decoder<T> {
    pub fn init(encoder_channels: [usize; 5], width: usize, rng: &mut ChaCha8Rng) -> Self {
        Decoder {
            in5: ConvParams::init(width, encoder_channels[4], 3, rng),
            laterals: encoder_channels[..4]
                .iter()
                .map(|&c| ConvParams::init(width, c, 3, rng))
                .collect(),
            fuses: (0..4).map(|_| ConvParams::init(width, width, 3, rng)).collect(),
            heads: (0..5).map(|_| ConvParams::init(1, width, 3, rng)).collect(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> DecoderVars<'t, T> {
        DecoderVars {
            in5: self.in5.bind(tape, trainable),
            laterals: self.laterals.iter().map(|c| c.bind(tape, trainable)).collect(),
            fuses: self.fuses.iter().map(|c| c.bind(tape, trainable)).collect(),
            heads: self.heads.iter().map(|c| c.bind(tape, trainable)).collect(),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.in5.named("decoder.in5".into());
        for (i, c) in self.laterals.iter().enumerate() {
            v.extend(c.named(format!("decoder.lateral{}", i + 1)));
        }
        for (i, c) in self.fuses.iter().enumerate() {
            v.extend(c.named(format!("decoder.fuse{}", i + 1)));
        }
        for (i, c) in self.heads.iter().enumerate() {
            v.extend(c.named(format!("decoder.head{}", i + 1)));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.in5.named_mut("decoder.in5".into());
        for (i, c) in self.laterals.iter_mut().enumerate() {
            v.extend(c.named_mut(format!("decoder.lateral{}", i + 1)));
        }
        for (i, c) in self.fuses.iter_mut().enumerate() {
            v.extend(c.named_mut(format!("decoder.fuse{}", i + 1)));
        }
        for (i, c) in self.heads.iter_mut().enumerate() {
            v.extend(c.named_mut(format!("decoder.head{}", i + 1)));
        }
        v
    }
}

impl<'t, T: Scalar> DecoderVars<'t, T> {
    /// Runs the top-down recurrence over a pyramid whose level 5 has already
    /// been enhanced.
    pub fn decode(&self, pyramid: &FeaturePyramid<'t, T>) -> Result<PredictionStack<'t, T>> {
        let mut p = Vec::with_capacity(5);
        let mut cur = leaky(self.in5.apply(pyramid.level(5), 1)?)?;
        p.push(cur);
        for m in (1..=4).rev() {
            let lateral = self.laterals[m - 1].apply(pyramid.level(m), 1)?;
            let fused = cur.upsample2()?.add(lateral)?;
            cur = leaky(self.fuses[m - 1].apply(fused, 1)?)?;
            p.push(cur);
        }
        p.reverse(); // now levels 1..=5

        let mut d = Vec::with_capacity(5);
        for m in 1..=5 {
            let mut map = self.heads[m - 1].apply(p[m - 1], 1)?.sigmoid();
            for _ in 0..m {
                map = map.upsample2()?;
            }
            d.push(map);
        }
        Ok(PredictionStack {
            p: p.try_into().unwrap_or_else(|_| unreachable!()),
            d: d.try_into().unwrap_or_else(|_| unreachable!()),
        })
    }
}

/// Leaky rectifier (slope 0.1) composed from the primitive ops; keeps a
/// gradient path through suppressed decoder units.
pub fn leaky<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let slope = T::of_f64(0.1);
    Ok(x.relu().scale(T::one() - slope).add(x.scale(slope))?)
}

/// Validates a {0, 1} mask, reporting the first offending pixel.
pub fn validate_binary_mask<T: Scalar>(mask: &Tensor<T>) -> Result<()> {
    for (i, &v) in mask.data().iter().enumerate() {
        if v != T::zero() && v != T::one() {
            return Err(Error::Data(DataError::NonBinaryMask {
                value: v.to_f64_lossy(),
                index: i,
            }));
        }
    }
    Ok(())
}

/// Pixel-averaged binary cross entropy of one probability map against a
/// binary mask, with probabilities clamped to `[eps, 1 - eps]`.
pub fn level_loss<'t, T: Scalar>(map: Var<'t, T>, mask: &Tensor<T>) -> Result<Var<'t, T>> {
    validate_binary_mask(mask)?;
    let shape = map.shape();
    if shape != mask.shape() {
        return Err(Error::Tensor(crate::error::TensorError::ShapeMismatch {
            op: "level_loss",
            left: shape,
            right: mask.shape().to_vec(),
        }));
    }
    let n = T::of_f64((mask.numel()) as f64);
    let eps = T::of_f64(PROB_EPS);
    let tape = map.tape();
    let pos = tape.constant(mask.clone());
    let neg = tape.constant(mask.map(|v| T::one() - v));
    let p = map.clamp(eps, T::one() - eps);
    let hit = p.ln().mul(pos)?;
    let miss = p.affine(-T::one(), T::one()).ln().mul(neg)?;
    Ok(hit.add(miss)?.sum().scale(-T::one() / n))
}

/// Total objective: the sum of every level's loss over every query image.
pub fn deep_supervision_loss<'t, T: Scalar>(
    stacks: &[PredictionStack<'t, T>],
    masks: &[Tensor<T>],
) -> Result<Var<'t, T>> {
    assert_eq!(stacks.len(), masks.len());
    let mut total: Option<Var<'t, T>> = None;
    for (stack, mask) in stacks.iter().zip(masks) {
        for m in 1..=5 {
            let l = level_loss(stack.prediction(m), mask)?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
    }
    Ok(total.expect("at least one query image"))
}
