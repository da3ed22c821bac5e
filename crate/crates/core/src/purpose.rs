//! Purpose learning: estimate the action-purpose encoding from the support
//! image's deepest feature level and the annotated human/object boxes.
//!
//! The pipeline: crop the two boxes out of the level-5 map, pool each to a
//! channel vector, use those vectors to spatially re-weight the support map
//! (softmax attention over positions), build a single-channel interaction map
//! from the object vector and the human crop, and condense everything into
//! one channel vector with a global max pool.

use crate::error::{DataError, Error, Result};
use crate::model::{BoundConv, ConvParams};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Axis-aligned pixel box, inclusive-exclusive, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn validate(&self, w: usize, h: usize) -> Result<(), DataError> {
        if self.x0 < self.x1 && self.x1 <= w && self.y0 < self.y1 && self.y1 <= h {
            Ok(())
        } else {
            Err(DataError::BadBox {
                x0: self.x0 as i64,
                y0: self.y0 as i64,
                x1: self.x1 as i64,
                y1: self.y1 as i64,
                w,
                h,
                path: None,
            })
        }
    }

    /// Projects the box to a feature grid by dividing by the stride, rounding
    /// outward. Outward rounding plus the box invariant x0 < x1 guarantees at
    /// least one covered cell.
    pub fn to_grid(&self, stride: usize, gh: usize, gw: usize) -> (usize, usize, usize, usize) {
        let gy0 = (self.y0 / stride).min(gh - 1);
        let gy1 = self.y1.div_ceil(stride).clamp(gy0 + 1, gh);
        let gx0 = (self.x0 / stride).min(gw - 1);
        let gx1 = self.x1.div_ceil(stride).clamp(gx0 + 1, gw);
        (gy0, gy1, gx0, gx1)
    }
}

/// One support observation: an image plus the two interaction boxes.
#[derive(Clone, Debug)]
pub struct SupportSample<T> {
    pub image: Tensor<T>,
    pub human_box: BBox,
    pub object_box: BBox,
}

impl<T: Scalar> SupportSample<T> {
    pub fn validate(&self) -> Result<(), DataError> {
        let s = self.image.shape();
        let (h, w) = (s[1], s[2]);
        self.human_box.validate(w, h)?;
        self.object_box.validate(w, h)
    }
}

/// Learned part of the purpose module: the interaction conv (C -> 1, 3x3).
pub struct PurposeLearner<T> {
    interaction_conv: ConvParams<T>,
}

pub struct PurposeVars<'t, T: Scalar> {
    pub(crate) interaction_conv: BoundConv<'t, T>,
}

impl<T: Scalar> PurposeLearner<T> {
    pub fn init(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        PurposeLearner {
            interaction_conv: ConvParams::init(1, channels, 3, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> PurposeVars<'t, T> {
        PurposeVars {
            interaction_conv: self.interaction_conv.bind(tape, trainable),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.interaction_conv.named("purpose.interaction".into())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.interaction_conv.named_mut("purpose.interaction".into())
    }
}

/// Crops the feature cells covered by a pixel box. `image_hw` is the size of
/// the image the box lives in; the stride is inferred from the feature grid.
pub fn extract_roi<'t, T: Scalar>(
    x_sup: Var<'t, T>,
    bbox: &BBox,
    image_hw: (usize, usize),
) -> Result<Var<'t, T>> {
    let s = x_sup.shape();
    let (gh, gw) = (s[1], s[2]);
    let stride = image_hw.0 / gh;
    debug_assert_eq!(stride, image_hw.1 / gw, "anisotropic stride");
    let (gy0, gy1, gx0, gx1) = bbox.to_grid(stride, gh, gw);
    Ok(x_sup.crop(gy0, gy1, gx0, gx1)?)
}

/// Spatial attention re-weighting: score every position by its dot product
/// with `f`, softmax over positions, scale each column of `x` by its weight.
/// The weights form a probability field (they sum to one).
pub fn guided_activation<'t, T: Scalar>(f: Var<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let scores = f
        .reshape(vec![1, c])?
        .matmul(x.reshape(vec![c, h * w])?)?;
    let alpha = scores.softmax(1)?.reshape(vec![h, w])?;
    Ok(x.mul_positions(alpha)?)
}

/// Single-channel human-object interaction map: channel-broadcast product of
/// the object vector with the human crop, a learned 3x3 conv down to one
/// channel, and a bilinear resize to the full grid.
pub fn interaction_map<'t, T: Scalar>(
    f_o: Var<'t, T>,
    x_h: Var<'t, T>,
    target_hw: (usize, usize),
    conv: &BoundConv<'t, T>,
) -> Result<Var<'t, T>> {
    let weighted = x_h.mul_channels(f_o)?;
    let m = conv.apply(weighted, 1)?;
    let s = m.shape();
    if (s[1], s[2]) == target_hw {
        Ok(m)
    } else {
        Ok(m.bilinear_resize(target_hw.0, target_hw.1)?)
    }
}

/// Condenses the interaction-weighted activation maps into the purpose
/// vector: scale both maps position-wise by the interaction field, add, and
/// take the per-channel spatial maximum.
pub fn purpose_encode<'t, T: Scalar>(
    m_ho: Var<'t, T>,
    m_h: Var<'t, T>,
    m_o: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let s = m_ho.shape();
    let field = m_ho.reshape(vec![s[1], s[2]])?;
    let a = m_h.mul_positions(field)?;
    let b = m_o.mul_positions(field)?;
    Ok(a.add(b)?.global_max_pool()?)
}

impl<'t, T: Scalar> PurposeVars<'t, T> {
    /// Full purpose estimation over the support's level-5 features.
    pub fn forward(
        &self,
        x_sup: Var<'t, T>,
        human_box: &BBox,
        object_box: &BBox,
        image_hw: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let s = x_sup.shape();
        let (h, w) = (s[1], s[2]);
        let x_h = extract_roi(x_sup, human_box, image_hw)?;
        let x_o = extract_roi(x_sup, object_box, image_hw)?;
        let f_h = x_h.global_max_pool()?;
        let f_o = x_o.global_max_pool()?;
        let m_o = guided_activation(f_o, x_sup)?;
        let m_h = guided_activation(f_h, x_sup)?;
        let m_ho = interaction_map(f_o, x_h, (h, w), &self.interaction_conv)?;
        purpose_encode(m_ho, m_h, m_o)
    }
}

/// Convenience wrapper validating the sample before use.
pub fn validate_support<T: Scalar>(sample: &SupportSample<T>) -> Result<()> {
    sample.validate().map_err(Error::Data)
}
