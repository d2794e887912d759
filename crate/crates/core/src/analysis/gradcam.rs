//! Gradient-weighted class activation maps.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::PerturbConfig;
use crate::error::{Error, Result};
use crate::model::{Model, PassMode};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Non-negative map scaled so its maximum is 1 (or all zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub layer: String,
    pub class: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn upsample(&self, height: usize, width: usize) -> Heatmap {
        let (h, w) = (self.height, self.width);
        let coord = |dst: usize, out: usize, inp: usize| {
            let s = ((dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = Float::floor(s) as usize;
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            let (y0, y1, fy) = coord(y, height, h);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, width, w);
                let v = |yy: usize, xx: usize| self.values[yy * w + xx];
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                values.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Heatmap { layer: self.layer.clone(), class: self.class, height, width, values }
    }
}

/// Grad-CAM from one image's activations `A` and the gradients of the class
/// score with respect to them, both `m x h x w`.
pub fn grad_cam_from_maps(
    activations: &[f64],
    grads: &[f64],
    m: usize,
    h: usize,
    w: usize,
    layer: &str,
    class: usize,
) -> Result<Heatmap> {
    let p = h * w;
    if activations.len() != m * p || grads.len() != m * p {
        return Err(Error::shape("grad_cam", format!("maps must hold {m}x{h}x{w} values")));
    }
    let mut map = vec![0.0; p];
    for (a, g) in activations.chunks_exact(p).zip(grads.chunks_exact(p)) {
        let alpha = g.iter().sum::<f64>() / p as f64;
        for (dst, &v) in map.iter_mut().zip(a) {
            *dst += alpha * v;
        }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = map.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        map.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap { layer: layer.to_string(), class, height: h, width: w, values: map })
}

/// Heatmap at `layer` resolution for one normalized image `[C, H, W]`, from
/// the pre-softmax score of `class`. Prune masks installed on `model` apply.
pub fn grad_cam<T: Real>(model: &Model<T>, image: &[T], class: usize, layer: &str) -> Result<Heatmap> {
    let cfg = model.config();
    if class >= cfg.classes {
        return Err(Error::invalid("grad_cam", format!("class {class} exceeds {} classes", cfg.classes)));
    }
    let input = cfg.input;
    if image.len() != input.len() {
        return Err(Error::shape("grad_cam", format!("image must hold {} values", input.len())));
    }
    if cfg.layer_channels(layer).is_none() {
        return Err(Error::invalid("grad_cam", format!("unknown layer {layer:?}")));
    }
    let batch = Tensor::new(&[1, input.channels, input.height, input.width], image.to_vec())?;
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let f = model.forward(&mut g, &params, &batch, PassMode::Eval, &PerturbConfig::none(), None)?;
    let score = g.pick(f.logits, class)?;
    g.backward(score)?;
    let a = f.feature_map(layer).expect("layer checked");
    let shape = g.shape(a).to_vec();
    let (m, h, w) = (shape[1], shape[2], shape[3]);
    let acts: Vec<f64> = g.value(a).data().iter().map(|v| v.to_f64_lossy()).collect();
    let grads: Vec<f64> = g.grad(a).data().iter().map(|v| v.to_f64_lossy()).collect();
    grad_cam_from_maps(&acts, &grads, m, h, w, layer, class)
}
