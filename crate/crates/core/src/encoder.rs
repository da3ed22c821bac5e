//! Five-stage convolutional encoder shared by support and query images.
//!
//! Each stage is a same-padded 3x3 convolution with stride 2 followed by
//! ReLU, so level m carries stride 2^m relative to the input. The toy channel
//! profile is `[8, 16, 32, 64, 64]`; all downstream modules only rely on the
//! pyramid contract (five levels, strides 2/4/8/16/32), not on any
//! particular backbone.

use crate::error::{DataError, Error, Result};
use crate::model::{BoundConv, ConvParams};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Default toy channel widths for levels 1..=5.
pub const TOY_CHANNELS: [usize; 5] = [8, 16, 32, 64, 64];

/// Five feature levels at strides 2, 4, 8, 16, 32.
pub struct FeaturePyramid<'t, T: Scalar> {
    levels: [Var<'t, T>; 5],
}

impl<'t, T: Scalar> FeaturePyramid<'t, T> {
    pub fn new(levels: [Var<'t, T>; 5]) -> Self {
        FeaturePyramid { levels }
    }

    /// Level `m` in 1..=5.
    pub fn level(&self, m: usize) -> Var<'t, T> {
        self.levels[m - 1]
    }

    /// Pyramid with level 5 replaced (used after collaboration enhancement).
    pub fn with_level5(&self, v: Var<'t, T>) -> Self {
        let mut levels = self.levels;
        levels[4] = v;
        FeaturePyramid { levels }
    }
}

/// Encoder parameters: five stride-2 conv stages.
pub struct Encoder<T> {
    stages: Vec<ConvParams<T>>,
    channels: [usize; 5],
}

/// Encoder parameters bound onto one tape.
pub struct EncoderVars<'t, T: Scalar> {
    pub(crate) stages: Vec<BoundConv<'t, T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn init(channels: [usize; 5], rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::with_capacity(5);
        let mut cin = 3;
        for &cout in &channels {
            stages.push(ConvParams::init(cout, cin, 3, rng));
            cin = cout;
        }
        Encoder { stages, channels }
    }

    pub fn channels(&self) -> [usize; 5] {
        self.channels
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> EncoderVars<'t, T> {
        EncoderVars {
            stages: self.stages.iter().map(|s| s.bind(tape, trainable)).collect(),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.named(format!("encoder.stage{}", i + 1)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.stages
            .iter_mut()
            .enumerate()
            .flat_map(|(i, s)| s.named_mut(format!("encoder.stage{}", i + 1)))
            .collect()
    }
}

impl<'t, T: Scalar> EncoderVars<'t, T> {
    /// Runs the five stages over a `[3, H, W]` image with H, W multiples
    /// of 32 and pixel values in [0, 1].
    pub fn encode(&self, image: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let shape = image.shape();
        let (h, w) = (shape[1], shape[2]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Data(DataError::BadImageSize { w, h }));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(5);
        for stage in &self.stages {
            x = stage.apply(x, 2)?.relu();
            levels.push(x);
        }
        Ok(FeaturePyramid::new(
            levels.try_into().unwrap_or_else(|_| unreachable!()),
        ))
    }
}
