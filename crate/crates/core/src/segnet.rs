//! A small 2D encoder-decoder segmentation network.
//!
//! Encoder levels downsample with stride-2 3x3 convolutions, the decoder
//! upsamples by nearest neighbour and concatenates the matching encoder
//! features before two 3x3 convolutions. A 1x1 head produces class logits
//! and a channel softmax turns them into per-pixel probabilities. Dropout,
//! when enabled, sits at the bottleneck only. Inputs are standardized per
//! image before the first convolution.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Result};
use crate::params::{BoundParams, ModelParams};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { height: 32, width: 32, base_channels: 8, depth: 2, num_classes: 2, dropout_rate: 0.0 }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let m = 1usize << self.depth;
        ensure!(self.depth >= 1, "NetConfig", "depth must be at least 1");
        ensure!(self.height % m == 0 && self.width % m == 0, "NetConfig", "input {}x{} not divisible by 2^{}", self.height, self.width, self.depth);
        ensure!(self.num_classes >= 2, "NetConfig", "num_classes {} < 2", self.num_classes);
        ensure!(self.base_channels >= 1, "NetConfig", "base_channels must be positive");
        ensure!((0.0..1.0).contains(&self.dropout_rate), "NetConfig", "dropout_rate {} outside [0, 1)", self.dropout_rate);
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn layers(&self) -> Vec<Layer> {
        let l = |name: String, cin, cout, k| Layer { name, cin, cout, k };
        let mut out = vec![l("enc0.conv1".into(), 1, self.channels(0), 3), l("enc0.conv2".into(), self.channels(0), self.channels(0), 3)];
        for i in 1..=self.depth {
            out.push(l(format!("enc{i}.down"), self.channels(i - 1), self.channels(i), 3));
            out.push(l(format!("enc{i}.conv"), self.channels(i), self.channels(i), 3));
        }
        for i in (1..=self.depth).rev() {
            let (hi, lo) = (self.channels(i), self.channels(i - 1));
            out.push(l(format!("dec{i}.conv1"), hi + lo, lo, 3));
            out.push(l(format!("dec{i}.conv2"), lo, lo, 3));
        }
        out.push(l("head".into(), self.channels(0), self.num_classes, 1));
        out
    }

    /// Closed-form parameter count: `sum(cin * cout * k^2 + cout)` over layers.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.cin * l.cout * l.k * l.k + l.cout).sum()
    }
}

/// Recover the architecture from a parameter set at a given input size.
pub fn infer_config(params: &ModelParams, height: usize, width: usize) -> Result<NetConfig> {
    let shape = |name: &str| params.get(name).map(|t| t.shape().to_vec());
    let first = shape("enc0.conv1.weight").ok_or_else(|| crate::error::contract("segnet::infer_config", "missing enc0.conv1.weight"))?;
    let head = shape("head.weight").ok_or_else(|| crate::error::contract("segnet::infer_config", "missing head.weight"))?;
    let depth = params.names().filter(|n| n.ends_with(".down.weight")).count();
    let config = NetConfig { height, width, base_channels: first[0], depth, num_classes: head[0], dropout_rate: 0.0 };
    config.validate()?;
    let expected = config.layers();
    ensure!(params.len() == 2 * expected.len(), "segnet::infer_config", "{} tensors, architecture needs {}", params.len(), 2 * expected.len());
    for (i, layer) in expected.iter().enumerate() {
        let want = [layer.cout, layer.cin, layer.k, layer.k];
        let (name, t) = params.iter().nth(2 * i).expect("length checked");
        ensure!(name == format!("{}.weight", layer.name) && t.shape() == want, "segnet::infer_config", "tensor {} {:?} does not fit layer {}", name, t.shape(), layer.name);
    }
    Ok(config)
}

/// Bias every layer starts from.
pub const INIT_BIAS: f64 = 0.1;

/// Fresh parameters: He-normal filters shifted to zero mean (variance kept)
/// and a small constant positive bias. Zero-mean filters on non-negative
/// inputs start each channel near half active.
pub fn build(config: &NetConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut r = rng::stream(seed);
    let mut entries = Vec::new();
    for layer in config.layers() {
        let fan_in = layer.cin * layer.k * layer.k;
        let std = libm::sqrt(2.0 / fan_in as f64);
        let mut w: Vec<f64> = (0..layer.cout * fan_in).map(|_| std * rng::normal(&mut r)).collect();
        if fan_in > 1 {
            let rescale = libm::sqrt(fan_in as f64 / (fan_in - 1) as f64);
            for filter in w.chunks_mut(fan_in) {
                let mean = filter.iter().sum::<f64>() / fan_in as f64;
                filter.iter_mut().for_each(|v| *v = (*v - mean) * rescale);
            }
        }
        entries.push((format!("{}.weight", layer.name), Tensor::new(vec![layer.cout, layer.cin, layer.k, layer.k], w)?));
        entries.push((format!("{}.bias", layer.name), Tensor::new(vec![layer.cout], vec![INIT_BIAS; layer.cout])?));
    }
    ModelParams::new(entries)
}

/// Dropout setting for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dropout {
    Off,
    On { seed: u64 },
}

/// Each image shifted to zero mean and scaled to unit standard deviation
/// (flat images are only centered).
pub fn standardize_images(images: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    let plane = c * h * w;
    let mut out = images.clone();
    for img in out.data_mut().chunks_mut(plane.max(1)).take(n) {
        let mean = img.iter().sum::<f64>() / plane as f64;
        let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let sd = libm::sqrt(var);
        let scale = if sd > STANDARDIZE_MIN_SD { 1.0 / sd } else { 1.0 };
        img.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    }
    Ok(out)
}

const STANDARDIZE_MIN_SD: f64 = 1e-6;

/// Record the network on `tape` and return the `(B, C, H, W)` probability node.
/// Input images are standardized per image first; no gradient flows to them.
pub fn forward_on_tape(tape: &mut Tape, config: &NetConfig, params: &BoundParams, images: Var, dropout: Dropout) -> Result<Var> {
    let shape = tape.value(images).shape().to_vec();
    ensure!(
        shape.len() == 4 && shape[1] == 1 && shape[2] == config.height && shape[3] == config.width,
        "segnet::forward",
        "images {:?} do not match (B, 1, {}, {})",
        shape,
        config.height,
        config.width
    );
    ensure!(params.vars().len() == 2 * config.layers().len(), "segnet::forward", "parameter set does not match the architecture");
    let mut next = 0usize;
    let mut conv = |tape: &mut Tape, x: Var, stride: usize, pad: usize| -> Result<Var> {
        let (w, b) = (params.var(next), params.var(next + 1));
        next += 2;
        tape.conv2d(x, w, b, stride, pad)
    };

    let input = tape.constant(standardize_images(tape.value(images))?);
    let mut h = conv(tape, input, 1, 1)?;
    h = tape.relu(h);
    h = conv(tape, h, 1, 1)?;
    h = tape.relu(h);
    let mut skips = vec![h];
    for level in 1..=config.depth {
        h = conv(tape, h, 2, 1)?;
        h = tape.relu(h);
        h = conv(tape, h, 1, 1)?;
        h = tape.relu(h);
        if level < config.depth {
            skips.push(h);
        }
    }
    if let Dropout::On { seed } = dropout {
        if config.dropout_rate > 0.0 {
            h = tape.dropout(h, config.dropout_rate, seed)?;
        }
    }
    for _ in (1..=config.depth).rev() {
        let up = tape.upsample2x(h)?;
        let skip = skips.pop().expect("one skip per level");
        h = tape.concat_channels(up, skip)?;
        h = conv(tape, h, 1, 1)?;
        h = tape.relu(h);
        h = conv(tape, h, 1, 1)?;
        h = tape.relu(h);
    }
    let logits = conv(tape, h, 1, 0)?;
    tape.softmax_channels(logits)
}

/// Probability maps for `images` shaped `(B, 1, H, W)`, without gradient tracking.
pub fn forward(config: &NetConfig, params: &ModelParams, images: &Tensor, dropout: Dropout) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let x = tape.constant(images.clone());
    let p = forward_on_tape(&mut tape, config, &bound, x, dropout)?;
    Ok(tape.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> NetConfig {
        NetConfig { height: 8, width: 8, base_channels: 2, depth: 2, num_classes: 2, dropout_rate: 0.3 }
    }

    fn images(seed: u64, b: usize, cfg: &NetConfig) -> Tensor {
        let mut r = rng::stream(seed);
        let data = (0..b * cfg.height * cfg.width).map(|_| r.gen::<f64>()).collect();
        Tensor::new(vec![b, 1, cfg.height, cfg.width], data).unwrap()
    }

    #[test]
    fn standardized_images_have_zero_mean_unit_sd() {
        let t = Tensor::new(vec![2, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        let s = standardize_images(&t).unwrap();
        let first = &s.data()[..4];
        assert!(first.iter().sum::<f64>().abs() < 1e-12);
        assert!((first.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        assert_eq!(&s.data()[4..], &[0.0; 4]);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = NetConfig::default();
        assert_eq!(build(&cfg, 3).unwrap(), build(&cfg, 3).unwrap());
    }

    #[test]
    fn distinct_seeds_give_distinct_params() {
        let cfg = NetConfig::default();
        let (a, b) = (build(&cfg, 1).unwrap().flatten(), build(&cfg, 2).unwrap().flatten());
        let differ = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * a.len() as f64);
    }

    #[test]
    fn param_count_regression() {
        // depth 2, 32x32, base 8: 80 + 584 + 1168 + 2320 + 4640 + 9248 + 6928 + 2320 + 1736 + 584 + 18
        let cfg = NetConfig::default();
        assert_eq!(cfg.param_count(), 29_626);
        assert_eq!(build(&cfg, 0).unwrap().num_elements(), 29_626);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(build(&NetConfig { height: 30, ..NetConfig::default() }, 0).is_err());
        assert!(build(&NetConfig { num_classes: 1, ..NetConfig::default() }, 0).is_err());
    }

    #[test]
    fn outputs_lie_on_simplex() {
        let cfg = NetConfig { num_classes: 3, ..tiny() };
        let params = build(&cfg, 5).unwrap();
        let p = forward(&cfg, &params, &images(1, 3, &cfg), Dropout::On { seed: 9 }).unwrap();
        assert_eq!(p.shape(), &[3, 3, 8, 8]);
        let plane = 64;
        for b in 0..3 {
            for px in 0..plane {
                let s: f64 = (0..3).map(|c| p.data()[(b * 3 + c) * plane + px]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dropout_controls_stochasticity() {
        let cfg = tiny();
        let params = build(&cfg, 5).unwrap();
        let x = images(2, 2, &cfg);
        assert_eq!(forward(&cfg, &params, &x, Dropout::Off).unwrap(), forward(&cfg, &params, &x, Dropout::Off).unwrap());
        assert_ne!(forward(&cfg, &params, &x, Dropout::On { seed: 1 }).unwrap(), forward(&cfg, &params, &x, Dropout::On { seed: 2 }).unwrap());
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let cfg = tiny();
        let params = build(&cfg, 5).unwrap();
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(forward(&cfg, &params, &x, Dropout::Off).is_err());
    }

    #[test]
    fn infer_config_recovers_architecture() {
        let cfg = NetConfig { height: 8, width: 16, base_channels: 3, depth: 2, num_classes: 3, dropout_rate: 0.0 };
        let p = build(&cfg, 1).unwrap();
        assert_eq!(infer_config(&p, 8, 16).unwrap(), cfg);
        let other = build(&NetConfig { depth: 1, ..cfg }, 1).unwrap();
        assert_eq!(infer_config(&other, 8, 16).unwrap().depth, 1);
        assert!(infer_config(&p, 6, 16).is_err());
    }
}
