//! The convolutional classifier: configuration, parameters and forward passes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, BatchNormStats, Graph, NormMode, Var};
use crate::data::{augment, ImageShape, PerturbConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Name of the tap on the final global-average-pool output.
pub const GAP_TAP: &str = "gap";

const BN_EPS: f64 = 1e-5;

/// Architecture of the classifier.
///
/// Each inner list of `conv_blocks` is one block of conv / batch-norm /
/// leaky-ReLU layers. Every block but the last uses 3x3 same-padded
/// convolutions and ends in 2x2 max pooling followed by dropout. The last
/// block opens with a 3x3 unpadded convolution and continues with 1x1
/// convolutions; its output is average-pooled to the latent vector and fed
/// to a dense head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_blocks: Vec<Vec<usize>>,
    pub classes: usize,
    #[serde(default = "default_alpha")]
    pub leaky_alpha: f64,
    #[serde(default = "default_input")]
    pub input: ImageShape,
    /// Layers whose pooled activations are exposed as latent taps. Empty
    /// means every final-block convolution but the last, plus `gap`.
    #[serde(default)]
    pub taps: Vec<String>,
}

fn default_alpha() -> f64 {
    0.1
}

fn default_input() -> ImageShape {
    ImageShape::CIFAR
}

impl ModelConfig {
    /// Three blocks ending in a 6x6x128 map and a 128-d latent.
    pub fn full(classes: usize) -> Self {
        Self {
            conv_blocks: vec![vec![128, 128, 128], vec![256, 256, 256], vec![512, 256, 128]],
            classes,
            leaky_alpha: default_alpha(),
            input: ImageShape::CIFAR,
            taps: Vec::new(),
        }
    }

    /// Small variant for single-core experiments: widths 16, 32, 64.
    pub fn desk(classes: usize) -> Self {
        Self {
            conv_blocks: vec![vec![16, 16], vec![32, 32], vec![64, 64]],
            classes,
            leaky_alpha: default_alpha(),
            input: ImageShape::CIFAR,
            taps: Vec::new(),
        }
    }

    /// Channel count of the final block, which is the latent dimension.
    pub fn latent_dim(&self) -> usize {
        self.conv_blocks.last().and_then(|b| b.last()).copied().unwrap_or(0)
    }

    /// Names of every convolution layer in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (b, block) in self.conv_blocks.iter().enumerate() {
            for i in 0..block.len() {
                out.push(format!("conv{}_{}", b + 1, i + 1));
            }
        }
        out
    }

    pub fn layer_channels(&self, name: &str) -> Option<usize> {
        self.layer_names().iter().position(|n| n == name).map(|i| self.conv_blocks.concat()[i])
    }

    pub fn final_layer(&self) -> String {
        self.layer_names().pop().unwrap_or_default()
    }

    /// Tap names, with the empty default expanded.
    pub fn tap_names(&self) -> Vec<String> {
        if !self.taps.is_empty() {
            return self.taps.clone();
        }
        let b = self.conv_blocks.len();
        let last = self.conv_blocks.last().map_or(0, |v| v.len());
        let mut out: Vec<String> = (1..last).map(|i| format!("conv{b}_{i}")).collect();
        out.push(GAP_TAP.to_string());
        out
    }

    /// Width of a tap's latent vector.
    pub fn tap_dim(&self, name: &str) -> Option<usize> {
        if name == GAP_TAP {
            Some(self.latent_dim())
        } else {
            self.layer_channels(name)
        }
    }

    /// Spatial size `(h, w)` of a layer's output map.
    pub fn layer_spatial(&self, name: &str) -> Option<(usize, usize)> {
        let (mut h, mut w) = (self.input.height, self.input.width);
        let nb = self.conv_blocks.len();
        for (b, block) in self.conv_blocks.iter().enumerate() {
            for i in 0..block.len() {
                if b + 1 == nb && i == 0 {
                    h = h.checked_sub(2)?;
                    w = w.checked_sub(2)?;
                }
                if format!("conv{}_{}", b + 1, i + 1) == name {
                    return Some((h, w));
                }
            }
            if b + 1 < nb {
                h /= 2;
                w /= 2;
            }
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.len() < 2 {
            return Err(Error::Config("model.conv_blocks: need at least two blocks".into()));
        }
        if self.conv_blocks.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return Err(Error::Config("model.conv_blocks: every block needs at least one positive width".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes: need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_alpha) {
            return Err(Error::Config("model.leaky_alpha: must lie in [0, 1)".into()));
        }
        match self.layer_spatial(&self.final_layer()) {
            Some((h, w)) if h >= 1 && w >= 1 => {}
            _ => return Err(Error::Config("model.input: image too small for the block structure".into())),
        }
        for t in &self.taps {
            if self.tap_dim(t).is_none() {
                return Err(Error::Config(format!("model.taps: unknown layer {t:?}")));
            }
        }
        Ok(())
    }
}

/// Forward-pass flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassMode {
    /// Perturbed, batch statistics, gradients tracked.
    Student,
    /// Independently perturbed, batch statistics, treated as a constant target.
    Teacher,
    /// Unperturbed, running statistics.
    Eval,
}

/// Named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Channel keep-mask installed at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer: String,
    pub keep: Vec<bool>,
}

impl PruneMask {
    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Percentage of channels dropped, `n * 100 / m`.
    pub fn prune_rate(&self) -> f64 {
        self.dropped() as f64 * 100.0 / self.keep.len() as f64
    }
}

/// Classifier parameters, batch-norm running statistics and prune masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    bn: Vec<BatchNormStats<T>>,
    masks: BTreeMap<String, Vec<bool>>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub params: Vec<Var>,
    pub logits: Var,
    pub probs: Var,
    pub taps: Vec<(String, Var)>,
    pub feature_maps: Vec<(String, Var)>,
    /// Batch statistics per conv layer (training-mode passes only).
    pub moments: Vec<Option<BatchMoments<T>>>,
}

impl<T> Forward<T> {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn feature_map(&self, name: &str) -> Option<Var> {
        self.feature_maps.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Materialized results of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    pub taps: BTreeMap<String, Tensor<T>>,
    pub feature_maps: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Model<T> {
    /// He fan-in normal initialization of conv and dense weights; batch-norm
    /// scales start at one, shifts and the head bias at zero.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let names = config.layer_names();
        let nb = config.conv_blocks.len();
        let mut cin = config.input.channels;
        let mut k = 0;
        for (b, block) in config.conv_blocks.iter().enumerate() {
            for (i, &cout) in block.iter().enumerate() {
                let ks = if b + 1 == nb && i > 0 { 1 } else { 3 };
                let fan_in = cin * ks * ks;
                let std = Float::sqrt(2.0 / fan_in as f64);
                let w: Vec<T> = (0..cout * fan_in).map(|_| T::of(std * rng.normal())).collect();
                let name = &names[k];
                params.push(Param { name: format!("{name}.weight"), value: Tensor::new(&[cout, cin, ks, ks], w)? });
                params.push(Param { name: format!("{name}.bn.gamma"), value: Tensor::full(&[cout], T::one()) });
                params.push(Param { name: format!("{name}.bn.beta"), value: Tensor::zeros(&[cout]) });
                bn.push(BatchNormStats::new(cout));
                cin = cout;
                k += 1;
            }
        }
        let m = config.latent_dim();
        let std = Float::sqrt(2.0 / m as f64);
        let w: Vec<T> = (0..m * config.classes).map(|_| T::of(std * rng.normal())).collect();
        params.push(Param { name: "head.weight".into(), value: Tensor::new(&[m, config.classes], w)? });
        params.push(Param { name: "head.bias".into(), value: Tensor::zeros(&[config.classes]) });
        Ok(Self { config, params, bn, masks: BTreeMap::new() })
    }

    /// Rebuilds a model from stored arrays, checking names and shapes against
    /// a fresh build of `config`.
    pub fn from_parts(config: ModelConfig, params: Vec<Param<T>>, bn: Vec<BatchNormStats<T>>) -> Result<Self> {
        let template = Self::new(config.clone(), &mut Rng::new(0))?;
        if params.len() != template.params.len() || bn.len() != template.bn.len() {
            return Err(Error::Config("stored arrays do not match the model configuration".into()));
        }
        for (p, t) in params.iter().zip(&template.params) {
            if p.name != t.name || p.value.shape() != t.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {:?} {:?} does not match expected {:?} {:?}",
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
        }
        for (s, t) in bn.iter().zip(&template.bn) {
            if s.mean.len() != t.mean.len() || s.var.len() != t.var.len() {
                return Err(Error::Config("batch-norm statistics do not match the model configuration".into()));
            }
        }
        Ok(Self { config, params, bn, masks: BTreeMap::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bn_stats(&self) -> &[BatchNormStats<T>] {
        &self.bn
    }

    /// Folds the batch statistics of a student pass into the running statistics.
    pub fn update_bn(&mut self, moments: &[Option<BatchMoments<T>>]) {
        for (stats, m) in self.bn.iter_mut().zip(moments) {
            if let Some(m) = m {
                stats.update(&m.mean, &m.var);
            }
        }
    }

    /// Zeroes the dropped channels of `mask.layer` in every later forward pass.
    pub fn set_prune_mask(&mut self, mask: &PruneMask) -> Result<()> {
        match self.config.layer_channels(&mask.layer) {
            Some(m) if m == mask.keep.len() => {
                if !mask.keep.iter().any(|&k| k) {
                    return Err(Error::invalid("prune", "at least one channel must be kept"));
                }
                self.masks.insert(mask.layer.clone(), mask.keep.clone());
                Ok(())
            }
            Some(m) => Err(Error::shape(
                "prune",
                format!("layer {} has {m} channels, mask has {}", mask.layer, mask.keep.len()),
            )),
            None => Err(Error::invalid("prune", format!("unknown layer {:?}", mask.layer))),
        }
    }

    pub fn clear_prune_masks(&mut self) {
        self.masks.clear();
    }

    pub fn prune_masks(&self) -> impl Iterator<Item = PruneMask> + '_ {
        self.masks.iter().map(|(l, k)| PruneMask { layer: l.clone(), keep: k.clone() })
    }

    /// Adds the parameters to `g` as gradient-tracking leaves (constants in a
    /// `no_grad` graph).
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Records one forward pass of `batch` (`[N, C, H, W]`, normalized) in `g`.
    ///
    /// Student and teacher passes draw their own augmentation and dropout
    /// from `rng`; an evaluation pass rejects any perturbation.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        batch: &Tensor<T>,
        mode: PassMode,
        perturb: &PerturbConfig,
        mut rng: Option<&mut Rng>,
    ) -> Result<Forward<T>> {
        let shape = batch.shape();
        let input = self.config.input;
        if shape.len() != 4 || shape[1..] != [input.channels, input.height, input.width] {
            return Err(Error::shape(
                "forward",
                format!("expected [N,{},{},{}], got {shape:?}", input.channels, input.height, input.width),
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::shape("forward", "parameter handles do not match the model"));
        }
        let norm_mode = match mode {
            PassMode::Eval => {
                if !perturb.is_none() {
                    return Err(Error::invalid("forward", "evaluation pass cannot apply perturbations"));
                }
                NormMode::Eval
            }
            PassMode::Student | PassMode::Teacher => {
                if rng.is_none() && !perturb.is_none() {
                    return Err(Error::invalid("forward", "perturbed pass needs a random source"));
                }
                NormMode::Train
            }
        };

        let x = if norm_mode == NormMode::Train && !perturb.is_none() {
            let r = rng.as_deref_mut().expect("checked above");
            let mut data = Vec::with_capacity(batch.numel());
            for img in batch.data().chunks_exact(input.len()) {
                data.extend(augment(img, input, perturb, r));
            }
            Tensor::new(shape, data)?
        } else {
            batch.clone()
        };
        let mut h = g.constant(x);

        let alpha = T::of(self.config.leaky_alpha);
        let names = self.config.layer_names();
        let tap_names = self.config.tap_names();
        let nb = self.config.conv_blocks.len();
        let mut taps = Vec::new();
        let mut feature_maps = Vec::new();
        let mut moments = Vec::new();
        let mut k = 0;
        for (b, block) in self.config.conv_blocks.iter().enumerate() {
            let last_block = b + 1 == nb;
            for i in 0..block.len() {
                let (w, gamma, beta) = (params[3 * k], params[3 * k + 1], params[3 * k + 2]);
                let pad = if last_block { 0 } else { 1 };
                h = g.conv2d(h, w, 1, pad)?;
                let (y, mom) = g.batch_norm(h, gamma, beta, norm_mode, &self.bn[k], T::of(BN_EPS))?;
                h = g.leaky_relu(y, alpha)?;
                if let Some(keep) = self.masks.get(&names[k]) {
                    let scale: Vec<T> = keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
                    h = g.channel_scale(h, &scale)?;
                }
                feature_maps.push((names[k].clone(), h));
                if last_block && tap_names.contains(&names[k]) && i + 1 < block.len() {
                    let pooled = g.global_avg_pool(h)?;
                    taps.push((names[k].clone(), pooled));
                }
                moments.push(if mode == PassMode::Student { mom } else { None });
                k += 1;
            }
            if !last_block {
                h = g.max_pool2d(h, 2, 2)?;
                if norm_mode == NormMode::Train && perturb.dropout_rate > 0.0 {
                    h = g.dropout(h, perturb.dropout_rate, rng.as_deref_mut(), NormMode::Train)?;
                }
            }
        }
        let latent = g.global_avg_pool(h)?;
        if tap_names.iter().any(|t| t == GAP_TAP) {
            taps.push((GAP_TAP.to_string(), latent));
        }
        // the last conv's pooled output is the gap tap
        let last = self.config.final_layer();
        if tap_names.contains(&last) {
            taps.push((last, latent));
        }
        let np = params.len();
        let logits = g.dense(latent, params[np - 2], params[np - 1])?;
        let probs = g.softmax(logits)?;
        Ok(Forward { params: params.to_vec(), logits, probs, taps, feature_maps, moments })
    }

    /// Unperturbed evaluation pass with running statistics.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut g = Graph::no_grad();
        let params = self.bind(&mut g);
        let f = self.forward(&mut g, &params, batch, PassMode::Eval, &PerturbConfig::none(), None)?;
        Ok(f.materialize(&g))
    }
}

impl<T: Real> Forward<T> {
    pub fn materialize(&self, g: &Graph<T>) -> ForwardOutput<T> {
        ForwardOutput {
            logits: g.value(self.logits).clone(),
            probs: g.value(self.probs).clone(),
            taps: self.taps.iter().map(|(n, v)| (n.clone(), g.value(*v).clone())).collect(),
            feature_maps: self.feature_maps.iter().map(|(n, v)| (n.clone(), g.value(*v).clone())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            conv_blocks: vec![vec![4], vec![6, 5]],
            classes: 3,
            leaky_alpha: 0.1,
            input: ImageShape { channels: 3, height: 8, width: 8 },
            taps: Vec::new(),
        }
    }

    fn tiny_batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let data = (0..n * 3 * 64).map(|_| rng.normal()).collect();
        Tensor::new(&[n, 3, 8, 8], data).unwrap()
    }

    #[test]
    fn full_config_anchor_shapes() {
        let cfg = ModelConfig::full(10);
        cfg.validate().unwrap();
        assert_eq!(cfg.latent_dim(), 128);
        assert_eq!(cfg.layer_spatial("conv3_3"), Some((6, 6)));
        assert_eq!(cfg.layer_spatial("conv3_1"), Some((6, 6)));
        assert_eq!(cfg.layer_spatial("conv1_1"), Some((32, 32)));
        assert_eq!(cfg.tap_names(), vec!["conv3_1", "conv3_2", "gap"]);
        assert_eq!(cfg.tap_dim("gap"), Some(128));
        assert_eq!(cfg.tap_dim("conv3_1"), Some(512));
    }

    #[test]
    fn desk_forward_shapes() {
        let model = Model::<f32>::new(ModelConfig::desk(4), &mut Rng::new(0)).unwrap();
        let d = synth_dataset(4, 1, 0).unwrap();
        let out = model.infer(&d.batch(&[0, 1, 2])).unwrap();
        assert_eq!(out.logits.shape(), &[3, 4]);
        assert_eq!(out.taps["gap"].shape(), &[3, 64]);
        assert_eq!(out.feature_maps["conv3_2"].shape(), &[3, 64, 6, 6]);
        for row in out.probs.rows() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn same_seed_same_init() {
        let a = Model::<f32>::new(tiny_config(), &mut Rng::new(3)).unwrap();
        let b = Model::<f32>::new(tiny_config(), &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::new(tiny_config(), &mut Rng::new(4)).unwrap();
        assert_ne!(a, c);
        // 3*4*9 + 2*4, 4*6*9 + 2*6, 6*5 + 2*5, 5*3 + 3
        assert_eq!(a.num_parameters(), 116 + 228 + 40 + 18);
    }

    #[test]
    fn eval_deterministic_and_rejects_perturbation() {
        let model = Model::<f64>::new(tiny_config(), &mut Rng::new(0)).unwrap();
        let x = tiny_batch(4, 1);
        assert_eq!(model.infer(&x).unwrap(), model.infer(&x).unwrap());
        let mut g = Graph::no_grad();
        let p = model.bind(&mut g);
        let r = model.forward(&mut g, &p, &x, PassMode::Eval, &PerturbConfig::default(), Some(&mut Rng::new(0)));
        assert!(r.is_err());
    }

    #[test]
    fn student_and_teacher_differ() {
        let model = Model::<f64>::new(tiny_config(), &mut Rng::new(0)).unwrap();
        let x = tiny_batch(4, 1);
        let perturb = PerturbConfig::default();
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let s = model.forward(&mut g, &p, &x, PassMode::Student, &perturb, Some(&mut Rng::new(1))).unwrap();
        let mut tg = Graph::no_grad();
        let tp = model.bind(&mut tg);
        let t = model.forward(&mut tg, &tp, &x, PassMode::Teacher, &perturb, Some(&mut Rng::new(2))).unwrap();
        let (a, b) = (g.value(s.logits), tg.value(t.logits));
        assert!(a.is_finite() && b.is_finite());
        assert_ne!(a, b);
        assert!(s.moments.iter().all(|m| m.is_some()));
        assert!(t.moments.iter().all(|m| m.is_none()));
        assert!(!tg.requires_grad(t.probs));
    }

    #[test]
    fn taps_and_masks() {
        let mut model = Model::<f64>::new(tiny_config(), &mut Rng::new(0)).unwrap();
        let x = tiny_batch(2, 5);
        let out = model.infer(&x).unwrap();
        assert_eq!(out.taps.keys().collect::<Vec<_>>(), vec!["conv2_1", "gap"]);
        assert_eq!(out.taps["conv2_1"].shape(), &[2, 6]);
        assert!(model.set_prune_mask(&PruneMask { layer: "conv2_2".into(), keep: vec![false; 5] }).is_err());
        assert!(model.set_prune_mask(&PruneMask { layer: "nope".into(), keep: vec![true; 5] }).is_err());

        let keep = vec![true, false, true, true, false];
        model.set_prune_mask(&PruneMask { layer: "conv2_2".into(), keep: keep.clone() }).unwrap();
        let masked = model.infer(&x).unwrap();
        // masking feature maps then pooling equals masking the pooled tap
        for (r, (a, b)) in out.taps["gap"].rows().zip(masked.taps["gap"].rows()).enumerate() {
            for c in 0..5 {
                let expect = if keep[c] { a[c] } else { 0.0 };
                assert_eq!(b[c], expect, "row {r} channel {c}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.taps = vec!["conv9_1".into()];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.input = ImageShape { channels: 3, height: 2, width: 2 };
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.classes = 1;
        assert!(c.validate().is_err());
    }
}
