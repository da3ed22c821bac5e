//! Whole-model assembly: encoder, purpose learning, purpose transfer,
//! collaboration enhancement, and the decoder, with a flat named-parameter
//! view for the optimizer and checkpoints.

use crate::collab::{CemOutput, Collaboration, CollabVars};
use crate::decoder::{deep_supervision_loss, Decoder, DecoderVars, PredictionStack};
use crate::encoder::{Encoder, EncoderVars, FeaturePyramid};
use crate::error::Result;
use crate::purpose::{PurposeLearner, PurposeVars, SupportSample};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::transfer::transfer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One convolution's parameters. Kernels use fan-in-scaled uniform init
/// with the rectifier gain (bound sqrt(6/fan_in), preserving activation
/// variance through the ReLU stack); biases start at zero.
pub struct ConvParams<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn init(cout: usize, cin: usize, ks: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * ks * ks;
        let bound = T::of_f64((6.0 / fan_in as f64).sqrt());
        ConvParams {
            kernel: Tensor::uniform(vec![cout, cin, ks, ks], bound, rng),
            bias: Tensor::zeros(vec![cout]),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundConv<'t, T> {
        let put = |t: &Tensor<T>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundConv {
            kernel: put(&self.kernel),
            bias: put(&self.bias),
        }
    }

    pub fn named(&self, prefix: String) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{prefix}.kernel"), &self.kernel),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn named_mut(&mut self, prefix: String) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{prefix}.kernel"), &mut self.kernel),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }
}

/// A convolution bound onto a tape.
pub struct BoundConv<'t, T: Scalar> {
    pub kernel: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<'t, T: Scalar> BoundConv<'t, T> {
    pub fn apply(&self, x: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        Ok(x.conv2d(self.kernel, self.bias, stride)?)
    }
}

/// Architectural dimensions, shared by training config and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder_channels: [usize; 5],
    pub projected_channels: usize,
    pub decoder_channels: usize,
    pub k_bases: usize,
    pub em_iterations: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_channels: crate::encoder::TOY_CHANNELS,
            projected_channels: 32,
            decoder_channels: 16,
            k_bases: 16,
            em_iterations: 3,
        }
    }
}

/// The full network.
pub struct Model<T> {
    pub encoder: Encoder<T>,
    pub purpose: PurposeLearner<T>,
    pub collab: Collaboration<T>,
    pub decoder: Decoder<T>,
    config: ModelConfig,
}

/// All parameters bound onto one tape, ready for a forward pass.
pub struct ModelVars<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub encoder: EncoderVars<'t, T>,
    pub purpose: PurposeVars<'t, T>,
    pub collab: CollabVars<'t, T>,
    pub decoder: DecoderVars<'t, T>,
}

/// Everything one episode forward pass produces.
pub struct EpisodeForward<'t, T: Scalar> {
    pub stacks: Vec<PredictionStack<'t, T>>,
    pub cem: CemOutput<'t, T>,
    pub purpose: Var<'t, T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c5 = config.encoder_channels[4];
        Model {
            encoder: Encoder::init(config.encoder_channels, &mut rng),
            purpose: PurposeLearner::init(c5, &mut rng),
            collab: Collaboration::init(
                c5,
                config.projected_channels,
                config.k_bases,
                config.em_iterations,
                &mut rng,
            ),
            decoder: Decoder::init(config.encoder_channels, config.decoder_channels, &mut rng),
            config,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Flat named parameter view in a fixed order (the checkpoint and
    /// optimizer order).
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.encoder.params();
        v.extend(self.purpose.params());
        v.extend(self.collab.params());
        v.extend(self.decoder.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.encoder.params_mut();
        v.extend(self.purpose.params_mut());
        v.extend(self.collab.params_mut());
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> ModelVars<'t, T> {
        ModelVars {
            tape,
            encoder: self.encoder.bind(tape, trainable),
            purpose: self.purpose.bind(tape, trainable),
            collab: self.collab.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
        }
    }
}

impl<'t, T: Scalar> ModelVars<'t, T> {
    /// Ordered parameter vars matching [`Model::params`]; used to route
    /// gradients back to the optimizer.
    pub fn param_vars(&self) -> Vec<Var<'t, T>> {
        let mut v = Vec::new();
        for s in &self.encoder.stages {
            v.push(s.kernel);
            v.push(s.bias);
        }
        v.push(self.purpose.interaction_conv.kernel);
        v.push(self.purpose.interaction_conv.bias);
        v.extend(self.collab.param_vars());
        v.extend(self.decoder.param_vars());
        v
    }

    /// Full episode pass: encode support and queries, estimate and transfer
    /// the purpose, enhance the query set jointly, decode every query.
    pub fn forward_episode(
        &self,
        support: &SupportSample<T>,
        queries: &[Tensor<T>],
    ) -> Result<EpisodeForward<'t, T>> {
        support.validate()?;
        let sup_shape = support.image.shape();
        let image_hw = (sup_shape[1], sup_shape[2]);

        let sup_img = self.tape.constant(support.image.clone());
        let sup_pyr = self.encoder.encode(sup_img)?;
        let f_sup = self.purpose.forward(
            sup_pyr.level(5),
            &support.human_box,
            &support.object_box,
            image_hw,
        )?;

        let mut pyramids: Vec<FeaturePyramid<'t, T>> = Vec::with_capacity(queries.len());
        let mut transferred = Vec::with_capacity(queries.len());
        for q in queries {
            let img = self.tape.constant(q.clone());
            let pyr = self.encoder.encode(img)?;
            transferred.push(transfer(pyr.level(5), f_sup)?);
            pyramids.push(pyr);
        }

        let cem = self.collab.forward(&transferred)?;

        let mut stacks = Vec::with_capacity(queries.len());
        for (pyr, &enhanced) in pyramids.iter().zip(&cem.enhanced) {
            stacks.push(self.decoder.decode(&pyr.with_level5(enhanced))?);
        }
        Ok(EpisodeForward {
            stacks,
            cem,
            purpose: f_sup,
        })
    }

    /// Episode pass plus the training objective.
    pub fn forward_loss(
        &self,
        support: &SupportSample<T>,
        queries: &[Tensor<T>],
        masks: &[Tensor<T>],
    ) -> Result<(Var<'t, T>, EpisodeForward<'t, T>)> {
        let fwd = self.forward_episode(support, queries)?;
        let loss = deep_supervision_loss(&fwd.stacks, masks)?;
        Ok((loss, fwd))
    }
}

impl<'t, T: Scalar> CollabVars<'t, T> {
    pub(crate) fn param_vars(&self) -> Vec<Var<'t, T>> {
        vec![
            self.proj.kernel,
            self.proj.bias,
            self.out.kernel,
            self.out.bias,
            self.mu0,
        ]
    }
}

impl<'t, T: Scalar> DecoderVars<'t, T> {
    pub(crate) fn param_vars(&self) -> Vec<Var<'t, T>> {
        let mut v = vec![self.in5.kernel, self.in5.bias];
        for c in self.laterals.iter().chain(&self.fuses).chain(&self.heads) {
            v.push(c.kernel);
            v.push(c.bias);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::purpose::BBox;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder_channels: [4, 4, 8, 8, 8],
            projected_channels: 6,
            decoder_channels: 4,
            k_bases: 4,
            em_iterations: 2,
        }
    }

    fn random_support(rng: &mut ChaCha8Rng) -> SupportSample<f32> {
        SupportSample {
            image: Tensor::new(
                vec![3, 64, 64],
                (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f32>>(),
            ),
            human_box: BBox::new(8, 8, 30, 40),
            object_box: BBox::new(32, 20, 60, 50),
        }
    }

    #[test]
    fn param_vars_align_with_named_params() {
        let model = Model::<f32>::init(tiny_config(), 7);
        let tape = Tape::new();
        let vars = model.bind(&tape, true);
        let named = model.params();
        let bound = vars.param_vars();
        assert_eq!(named.len(), bound.len());
        for ((name, t), v) in named.iter().zip(&bound) {
            assert_eq!(t.shape(), v.value().shape(), "shape drift at {name}");
            assert_eq!(t.data(), v.value().data(), "value drift at {name}");
        }
    }

    #[test]
    fn forward_runs_and_losses_are_finite() {
        let model = Model::<f32>::init(tiny_config(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let support = random_support(&mut rng);
        let queries: Vec<Tensor<f32>> = (0..2)
            .map(|_| {
                Tensor::new(
                    vec![3, 64, 64],
                    (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f32>>(),
                )
            })
            .collect();
        let masks: Vec<Tensor<f32>> = (0..2)
            .map(|_| {
                Tensor::new(
                    vec![1, 64, 64],
                    (0..64 * 64).map(|_| f32::from(rng.gen_bool(0.2) as u8 as f32)).collect::<Vec<f32>>(),
                )
            })
            .collect();
        let tape = Tape::new();
        let vars = model.bind(&tape, true);
        let (loss, fwd) = vars.forward_loss(&support, &queries, &masks).unwrap();
        assert!(loss.scalar_value().is_finite());
        assert!(loss.scalar_value() > 0.0);
        assert_eq!(fwd.stacks.len(), 2);

        let grads = tape.backward(loss).unwrap();
        // Every parameter except the detached bases receives a gradient.
        let named = model.params();
        for ((name, _), var) in named.iter().zip(vars.param_vars()) {
            if name == "collab.mu0" {
                continue;
            }
            assert!(grads.get(var).is_some(), "no grad for {name}");
        }
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let model = Model::<f32>::init(tiny_config(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let support = random_support(&mut rng);
        let query = Tensor::new(
            vec![3, 64, 64],
            (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f32>>(),
        );
        let run = || {
            let tape = Tape::new();
            let vars = model.bind(&tape, false);
            let fwd = vars.forward_episode(&support, std::slice::from_ref(&query)).unwrap();
            fwd.stacks[0].final_prediction().value()
        };
        assert_eq!(run(), run());
    }
}
