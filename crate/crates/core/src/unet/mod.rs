//! 2D U-Net: a contracting path of double 3x3 convolutions with 2x2 max
//! pooling, a bottleneck, an expansive path of 2x2 transposed convolutions
//! with skip concatenation, and a 1x1 head with per-pixel softmax.
//!
//! Convolutions use same padding so every skip connection concatenates maps
//! of identical spatial size. Public inputs and outputs are channels-last
//! `(batch, h, w, channels)`; internally activations are channels-first.

mod checkpoint;
mod layers;

use ndarray::{s, Array4, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data_pipeline::SliceId;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{Conv2d, ConvTranspose2d};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid U-Net configuration: {0}")]
    ConfigInvalid(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_features: usize,
    /// Number of down-sampling steps.
    pub depth: usize,
    pub input_size: (usize, usize),
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 2,
            num_classes: 4,
            base_features: 32,
            depth: 4,
            input_size: (128, 128),
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::ConfigInvalid(msg));
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.base_features < 1 || self.in_channels < 1 {
            return bad("base_features and in_channels must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        let step = 1usize.checked_shl(self.depth as u32).unwrap_or(0);
        let (h, w) = self.input_size;
        if step == 0 || h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return bad(format!(
                "input size {h}x{w} is not divisible by 2^{} = {step}",
                self.depth
            ));
        }
        Ok(())
    }

    /// Feature widths of encoder levels `0..depth`.
    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_features << i).collect()
    }

    pub fn bottleneck_width(&self) -> usize {
        self.base_features << self.depth
    }

    /// Decoder widths from the deepest level up to level 0.
    pub fn decoder_widths(&self) -> Vec<usize> {
        self.encoder_widths().into_iter().rev().collect()
    }

    /// Closed-form parameter count.
    ///
    /// A `k x k` convolution from `a` to `b` channels has `a*b*k*k + b`
    /// parameters and a 2x2 transposed convolution `a*b*4 + b`. Level `i`
    /// of width `f = base * 2^i` holds an encoder block `conv(in_i, f) +
    /// conv(f, f)`, an up-convolution from `2f` to `f` and a decoder block
    /// `conv(2f, f) + conv(f, f)`; the bottleneck is `conv(f_last, 2 f_last) +
    /// conv(2 f_last, 2 f_last)` and the head `base * classes + classes`.
    pub fn parameter_count(&self) -> usize {
        let conv = |a: usize, b: usize, k: usize| a * b * k * k + b;
        let mut total = 0;
        let mut prev = self.in_channels;
        for f in self.encoder_widths() {
            total += conv(prev, f, 3) + conv(f, f, 3);
            total += (2 * f) * f * 4 + f;
            total += conv(2 * f, f, 3) + conv(f, f, 3);
            prev = f;
        }
        let b = self.bottleneck_width();
        total += conv(prev, b, 3) + conv(b, b, 3);
        total + conv(self.base_features, self.num_classes, 1)
    }
}

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv {
    pub first: Conv2d,
    pub second: Conv2d,
}

struct DoubleConvTape {
    input: Array4<f64>,
    mid: Array4<f64>,
    out: Array4<f64>,
}

impl DoubleConv {
    fn new(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> Self {
        DoubleConv {
            first: Conv2d::new(rng, in_ch, out_ch, 3),
            second: Conv2d::new(rng, out_ch, out_ch, 3),
        }
    }

    fn zeros_like(&self) -> Self {
        DoubleConv {
            first: self.first.zeros_like(),
            second: self.second.zeros_like(),
        }
    }

    fn forward(&self, x: ArrayView4<'_, f64>) -> Array4<f64> {
        let mut mid = self.first.forward(x);
        layers::relu_inplace(&mut mid);
        let mut out = self.second.forward(mid.view());
        layers::relu_inplace(&mut out);
        out
    }

    fn forward_tape(&self, x: Array4<f64>) -> DoubleConvTape {
        let mut mid = self.first.forward(x.view());
        layers::relu_inplace(&mut mid);
        let mut out = self.second.forward(mid.view());
        layers::relu_inplace(&mut out);
        DoubleConvTape { input: x, mid, out }
    }

    fn backward(&self, tape: &DoubleConvTape, mut d_out: Array4<f64>, grad: &mut DoubleConv) -> Array4<f64> {
        layers::relu_backward_inplace(&mut d_out, &tape.out);
        let mut d_mid = self.second.backward(tape.mid.view(), d_out.view(), &mut grad.second);
        layers::relu_backward_inplace(&mut d_mid, &tape.mid);
        self.first.backward(tape.input.view(), d_mid.view(), &mut grad.first)
    }
}

/// One expansive-path level: up-convolution, concatenation with the skip
/// (up-sampled channels first), double convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub up: ConvTranspose2d,
    pub conv: DoubleConv,
}

/// The realised network. The same type doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    seed: u64,
    pub encoders: Vec<DoubleConv>,
    pub bottleneck: DoubleConv,
    /// Indexed by level; level `i` maps width `2 f_i` back to `f_i`.
    pub decoders: Vec<DecoderBlock>,
    pub head: Conv2d,
}

/// Activations retained by a training forward pass.
pub struct Tape {
    encoders: Vec<DoubleConvTape>,
    pool_args: Vec<Array4<u8>>,
    bottleneck: DoubleConvTape,
    /// (up-convolution input, block tape), indexed by level.
    decoders: Vec<(Array4<f64>, DoubleConvTape)>,
    head_input: Array4<f64>,
    /// Channels-first probabilities.
    probs: Array4<f64>,
}

impl Tape {
    /// Channels-last probabilities of the recorded pass.
    pub fn probabilities(&self) -> Array4<f64> {
        to_channels_last(self.probs.view())
    }
}

fn to_channels_first(x: ArrayView4<'_, f64>) -> Array4<f64> {
    x.permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned()
}

fn to_channels_last(x: ArrayView4<'_, f64>) -> Array4<f64> {
    x.permuted_axes([0, 2, 3, 1]).as_standard_layout().into_owned()
}

impl UNet {
    /// Builds a network with He-normal weights drawn from `seed` and zero biases.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoders = Vec::with_capacity(config.depth);
        let mut prev = config.in_channels;
        for f in config.encoder_widths() {
            encoders.push(DoubleConv::new(&mut rng, prev, f));
            prev = f;
        }
        let bottleneck = DoubleConv::new(&mut rng, prev, config.bottleneck_width());
        let mut decoders = Vec::with_capacity(config.depth);
        for f in config.encoder_widths() {
            decoders.push(DecoderBlock {
                up: ConvTranspose2d::new(&mut rng, 2 * f, f),
                conv: DoubleConv::new(&mut rng, 2 * f, f),
            });
        }
        let head = Conv2d::new(&mut rng, config.base_features, config.num_classes, 1);
        Ok(UNet {
            config,
            seed,
            encoders,
            bottleneck,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Seed used for initialisation.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        UNet {
            config: self.config,
            seed: self.seed,
            encoders: self.encoders.iter().map(DoubleConv::zeros_like).collect(),
            bottleneck: self.bottleneck.zeros_like(),
            decoders: self
                .decoders
                .iter()
                .map(|d| DecoderBlock {
                    up: d.up.zeros_like(),
                    conv: d.conv.zeros_like(),
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Every parameter tensor with its stable name, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        fn conv<'a>(out: &mut Vec<(String, ArrayViewD<'a, f64>)>, name: String, c: &'a Conv2d) {
            out.push((format!("{name}.weight"), c.weight.view().into_dyn()));
            out.push((format!("{name}.bias"), c.bias.view().into_dyn()));
        }
        for (i, e) in self.encoders.iter().enumerate() {
            conv(&mut out, format!("encoder.{i}.conv1"), &e.first);
            conv(&mut out, format!("encoder.{i}.conv2"), &e.second);
        }
        conv(&mut out, "bottleneck.conv1".into(), &self.bottleneck.first);
        conv(&mut out, "bottleneck.conv2".into(), &self.bottleneck.second);
        for (i, d) in self.decoders.iter().enumerate() {
            out.push((format!("decoder.{i}.up.weight"), d.up.weight.view().into_dyn()));
            out.push((format!("decoder.{i}.up.bias"), d.up.bias.view().into_dyn()));
            conv(&mut out, format!("decoder.{i}.conv1"), &d.conv.first);
            conv(&mut out, format!("decoder.{i}.conv2"), &d.conv.second);
        }
        conv(&mut out, "head".into(), &self.head);
        out
    }

    /// Mutable views in the same order as [`UNet::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        fn conv<'a>(out: &mut Vec<ArrayViewMutD<'a, f64>>, c: &'a mut Conv2d) {
            out.push(c.weight.view_mut().into_dyn());
            out.push(c.bias.view_mut().into_dyn());
        }
        for e in &mut self.encoders {
            conv(&mut out, &mut e.first);
            conv(&mut out, &mut e.second);
        }
        conv(&mut out, &mut self.bottleneck.first);
        conv(&mut out, &mut self.bottleneck.second);
        for d in &mut self.decoders {
            out.push(d.up.weight.view_mut().into_dyn());
            out.push(d.up.bias.view_mut().into_dyn());
            conv(&mut out, &mut d.conv.first);
            conv(&mut out, &mut d.conv.second);
        }
        conv(&mut out, &mut self.head);
        out
    }

    pub fn count_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }

    fn check_input(&self, inputs: &ArrayView4<'_, f64>) -> Result<(), ModelError> {
        let (b, h, w, c) = inputs.dim();
        let (eh, ew) = self.config.input_size;
        if b == 0 || h != eh || w != ew || c != self.config.in_channels {
            return Err(ModelError::ShapeMismatch {
                expected: format!("(B>=1, {eh}, {ew}, {})", self.config.in_channels),
                found: format!("({b}, {h}, {w}, {c})"),
            });
        }
        Ok(())
    }

    fn logits(&self, x: Array4<f64>) -> Array4<f64> {
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = x;
        for enc in &self.encoders {
            let skip = enc.forward(x.view());
            x = layers::max_pool2(skip.view()).0;
            skips.push(skip);
        }
        let mut x = self.bottleneck.forward(x.view());
        for (dec, skip) in self.decoders.iter().zip(&skips).rev() {
            let up = dec.up.forward(x.view());
            let cat = ndarray::concatenate(Axis(1), &[up.view(), skip.view()]).expect("matching skip shapes");
            x = dec.conv.forward(cat.view());
        }
        self.head.forward(x.view())
    }

    /// Per-pixel class probabilities, `(B, h, w, num_classes)`.
    pub fn forward(&self, inputs: ArrayView4<'_, f64>) -> Result<Array4<f64>, ModelError> {
        self.check_input(&inputs)?;
        let logits = self.logits(to_channels_first(inputs));
        Ok(to_channels_last(layers::softmax_channels(logits.view()).view()))
    }

    /// Forward pass that keeps the activations needed by [`UNet::backward`].
    pub fn forward_train(&self, inputs: ArrayView4<'_, f64>) -> Result<Tape, ModelError> {
        self.check_input(&inputs)?;
        let mut x = to_channels_first(inputs);
        let mut encoders = Vec::with_capacity(self.config.depth);
        let mut pool_args = Vec::with_capacity(self.config.depth);
        for enc in &self.encoders {
            let tape = enc.forward_tape(x);
            let (pooled, arg) = layers::max_pool2(tape.out.view());
            debug_assert_eq!(pooled.dim().2 * 2, tape.out.dim().2);
            x = pooled;
            encoders.push(tape);
            pool_args.push(arg);
        }
        let bottleneck = self.bottleneck.forward_tape(x);
        let mut decoders: Vec<Option<(Array4<f64>, DoubleConvTape)>> =
            (0..self.config.depth).map(|_| None).collect();
        let mut x = bottleneck.out.clone();
        for level in (0..self.config.depth).rev() {
            let dec = &self.decoders[level];
            let up = dec.up.forward(x.view());
            let skip = &encoders[level].out;
            assert_eq!(up.dim(), skip.dim(), "skip connection shape law violated at level {level}");
            let cat = ndarray::concatenate(Axis(1), &[up.view(), skip.view()]).expect("matching skip shapes");
            let tape = dec.conv.forward_tape(cat);
            let next = tape.out.clone();
            decoders[level] = Some((x, tape));
            x = next;
        }
        let decoders = decoders
            .into_iter()
            .map(|d| d.expect("every decoder level runs"))
            .collect();
        let logits = self.head.forward(x.view());
        let probs = layers::softmax_channels(logits.view());
        Ok(Tape {
            encoders,
            pool_args,
            bottleneck,
            decoders,
            head_input: x,
            probs,
        })
    }

    /// Gradient of the mean per-pixel categorical cross-entropy with respect
    /// to every parameter, for the pass recorded in `tape`.
    ///
    /// `targets` is channels-last one-hot. The softmax/cross-entropy pair
    /// yields logit gradients `(p - t) / pixels`.
    pub fn backward(&self, tape: &Tape, targets: ArrayView4<'_, f64>) -> Result<UNet, ModelError> {
        let t = to_channels_first(targets);
        if t.dim() != tape.probs.dim() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{:?}", tape.probs.dim()),
                found: format!("{:?}", t.dim()),
            });
        }
        let (b, _, h, w) = t.dim();
        let pixels = (b * h * w) as f64;
        let d_logits = (&tape.probs - &t) / pixels;

        let mut grad = self.zeros_like();
        let mut d = self.head.backward(tape.head_input.view(), d_logits.view(), &mut grad.head);
        let mut d_skips = Vec::with_capacity(self.config.depth);
        for level in 0..self.config.depth {
            let dec = &self.decoders[level];
            let (up_input, block) = &tape.decoders[level];
            let d_cat = dec.conv.backward(block, d, &mut grad.decoders[level].conv);
            let up_ch = dec.up.out_channels();
            let d_up = d_cat.slice(s![.., ..up_ch, .., ..]).to_owned();
            d_skips.push(d_cat.slice(s![.., up_ch.., .., ..]).to_owned());
            d = dec.up.backward(up_input.view(), d_up.view(), &mut grad.decoders[level].up);
        }
        d = self.bottleneck.backward(&tape.bottleneck, d, &mut grad.bottleneck);
        for level in (0..self.config.depth).rev() {
            let enc_tape = &tape.encoders[level];
            let (_, _, sh, sw) = enc_tape.out.dim();
            let mut d_skip = layers::max_pool2_backward(d.view(), &tape.pool_args[level], (sh, sw));
            d_skip += &d_skips[level];
            d = self.encoders[level].backward(enc_tape, d_skip, &mut grad.encoders[level]);
        }
        Ok(grad)
    }
}

/// Anything that maps a batch of preprocessed inputs to per-pixel class probabilities.
pub trait Segmenter {
    /// `inputs` is `(B, h, w, channels)`; `provenance` names each batch entry.
    fn segment(&self, inputs: ArrayView4<'_, f64>, provenance: &[SliceId]) -> Result<Array4<f64>, ModelError>;
}

impl Segmenter for UNet {
    fn segment(&self, inputs: ArrayView4<'_, f64>, _provenance: &[SliceId]) -> Result<Array4<f64>, ModelError> {
        self.forward(inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn micro() -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            num_classes: 2,
            base_features: 1,
            depth: 1,
            input_size: (8, 8),
        }
    }

    #[test]
    fn default_widths_double() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.encoder_widths(), vec![32, 64, 128, 256]);
        assert_eq!(cfg.bottleneck_width(), 512);
        assert_eq!(cfg.decoder_widths(), vec![256, 128, 64, 32]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = UNetConfig {
            input_size: (127, 127),
            ..UNetConfig::default()
        };
        assert!(matches!(UNet::new(cfg, 0), Err(ModelError::ConfigInvalid(_))));
        let cfg = UNetConfig { depth: 0, ..UNetConfig::default() };
        assert!(matches!(UNet::new(cfg, 0), Err(ModelError::ConfigInvalid(_))));
    }

    #[test]
    fn minimal_model_parameter_count() {
        // Hand expansion for in=1, base=1, depth=1, classes=2:
        //   encoder conv 1->1 (9+1), conv 1->1 (9+1)             = 20
        //   bottleneck conv 1->2 (18+2), conv 2->2 (36+2)        = 58
        //   up 2->1 (2*1*4+1), conv 2->1 (18+1), conv 1->1 (10)  = 38
        //   head 1x1 1->2 (2+2)                                  = 4
        let model = UNet::new(micro(), 0).unwrap();
        assert_eq!(model.count_parameters(), 120);
        assert_eq!(micro().parameter_count(), 120);
    }

    #[test]
    fn closed_form_count_matches_tensors() {
        for (base, depth) in [(2, 1), (4, 2), (8, 3), (32, 4)] {
            let cfg = UNetConfig {
                base_features: base,
                depth,
                input_size: (16, 16),
                ..UNetConfig::default()
            };
            let model = UNet::new(cfg, 1).unwrap();
            assert_eq!(model.count_parameters(), cfg.parameter_count(), "{base}/{depth}");
        }
    }

    #[test]
    fn forward_rejects_wrong_channels() {
        let model = UNet::new(micro(), 0).unwrap();
        let x = Array4::zeros((1, 8, 8, 2));
        assert!(matches!(model.forward(x.view()), Err(ModelError::ShapeMismatch { .. })));
    }

    #[test]
    fn tape_matches_plain_forward() {
        let cfg = UNetConfig {
            in_channels: 2,
            num_classes: 4,
            base_features: 2,
            depth: 2,
            input_size: (8, 8),
        };
        let model = UNet::new(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array4::from_shape_simple_fn((2, 8, 8, 2), || rng.random_range(0.0..1.0));
        let plain = model.forward(x.view()).unwrap();
        let taped = model.forward_train(x.view()).unwrap().probabilities();
        assert_eq!(plain, taped);
    }

    fn cross_entropy(probs: &Array4<f64>, targets: &Array4<f64>) -> f64 {
        let (b, h, w, _) = probs.dim();
        -(targets * &probs.mapv(f64::ln)).sum() / (b * h * w) as f64
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = UNetConfig {
            in_channels: 2,
            num_classes: 4,
            base_features: 2,
            depth: 1,
            input_size: (8, 8),
        };
        let mut model = UNet::new(cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for mut p in model.parameters_mut() {
            p.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
        }
        let x = Array4::from_shape_simple_fn((2, 8, 8, 2), || rng.random_range(0.0..1.0));
        let mut t = Array4::zeros((2, 8, 8, 4));
        for n in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    t[[n, i, j, rng.random_range(0..4)]] = 1.0;
                }
            }
        }
        let tape = model.forward_train(x.view()).unwrap();
        let grad = model.backward(&tape, t.view()).unwrap();
        let analytic: Vec<f64> = grad.parameters().iter().flat_map(|(_, g)| g.iter().copied().collect::<Vec<_>>()).collect();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (k, &a) in analytic.iter().enumerate() {
            let probe = |delta: f64| {
                let mut m = model.clone();
                let mut seen = 0;
                for mut p in m.parameters_mut() {
                    if k < seen + p.len() {
                        let v = p.iter_mut().nth(k - seen).unwrap();
                        *v += delta;
                        break;
                    }
                    seen += p.len();
                }
                cross_entropy(&m.forward(x.view()).unwrap(), &t)
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-8 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
