//! Small U-Net for semantic segmentation, one 3x3 convolution per level.
//!
//! Parameters are held as plain `f32` buffers ([`NetParams`]) so they can be
//! serialized and moved across threads; each training step materializes them
//! as autodiff leaves via [`NetParams::to_tensors`]. The forward pass exposes
//! the bottleneck features and the last decoder features alongside the
//! logits, which is what the consistency losses attach to.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{
    concat_channels, conv2d, maxpool2x, relu, upsample_nearest2x, DiffResult, Element, Tensor,
};
use crate::rng::{streams, Rng};
use crate::synthgen::SegmentationMask;

const CHECKPOINT_MAGIC: &[u8; 4] = b"S2S2";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Invalid(String),
    #[error("autodiff error: {0}")]
    Diff(#[from] crate::diff::DiffError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            num_classes: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.in_channels == 0 || self.base_channels == 0 || self.num_classes < 2 {
            return Err(NetError::Invalid(format!(
                "channels/classes must be positive (K >= 2): {:?}",
                self
            )));
        }
        if self.depth == 0 || self.depth > 6 {
            return Err(NetError::Invalid(format!("depth {} out of range 1..=6", self.depth)));
        }
        Ok(())
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// (name, shape) of every parameter in forward order.
    fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for i in 0..self.depth {
            let cout = self.channels_at(i);
            specs.push((format!("enc{}.weight", i), vec![cout, cin, 3, 3]));
            specs.push((format!("enc{}.bias", i), vec![cout]));
            cin = cout;
        }
        let cb = self.channels_at(self.depth);
        specs.push(("bottleneck.weight".into(), vec![cb, cin, 3, 3]));
        specs.push(("bottleneck.bias".into(), vec![cb]));
        let mut cup = cb;
        for i in (0..self.depth).rev() {
            let skip = self.channels_at(i);
            specs.push((format!("dec{}.weight", i), vec![skip, cup + skip, 3, 3]));
            specs.push((format!("dec{}.bias", i), vec![skip]));
            cup = skip;
        }
        specs.push(("classifier.weight".into(), vec![self.num_classes, cup, 1, 1]));
        specs.push(("classifier.bias".into(), vec![self.num_classes]));
        specs
    }

    /// Input height/width must be divisible by 2^depth.
    pub fn check_input(&self, shape: &[usize]) -> Result<(), NetError> {
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(NetError::Invalid(format!(
                "expected input [{}, H, W], got {:?}",
                self.in_channels, shape
            )));
        }
        let div = 1usize << self.depth;
        if shape[1] % div != 0 || shape[2] % div != 0 {
            return Err(NetError::Invalid(format!(
                "input {}x{} not divisible by {}",
                shape[1], shape[2], div
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Network weights as plain buffers, in fixed forward order.
#[derive(Debug, Clone)]
pub struct NetParams {
    pub config: NetConfig,
    pub init_seed: u64,
    pub tensors: Vec<ParamTensor>,
}

impl NetParams {
    /// He-uniform init for weights (limit sqrt(6 / fan_in)), zero biases.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = Rng::new(seed, streams::INIT);
        let tensors = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0f32; numel]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    (0..numel)
                        .map(|_| rng.uniform(-limit, limit) as f32)
                        .collect()
                };
                ParamTensor { name, shape, data }
            })
            .collect();
        Ok(NetParams {
            config,
            init_seed: seed,
            tensors,
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Fresh autodiff leaves, one per parameter, in forward order.
    pub fn to_tensors<T: Element>(&self, requires_grad: bool) -> DiffResult<Vec<Tensor<T>>> {
        self.tensors
            .iter()
            .map(|p| {
                let data: Vec<T> = p.data.iter().map(|&v| T::from_f64(v as f64)).collect();
                Tensor::from_vec(p.shape.clone(), data, requires_grad)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::json!({
            "config": self.config,
            "init_seed": self.init_seed,
        });
        let header = serde_json::to_vec(&header)
            .map_err(|e| NetError::Corrupt(format!("header encode: {}", e)))?;
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for t in &self.tensors {
            buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], NetError> {
            if *off + n > bytes.len() {
                return Err(NetError::Corrupt("truncated checkpoint".into()));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != CHECKPOINT_MAGIC {
            return Err(NetError::Corrupt("bad magic".into()));
        }
        let ver = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap());
        if ver != CHECKPOINT_VERSION {
            return Err(NetError::Corrupt(format!("unsupported version {}", ver)));
        }
        let hlen = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(take(&mut off, hlen)?)
            .map_err(|e| NetError::Corrupt(format!("header decode: {}", e)))?;
        let config: NetConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| NetError::Corrupt(format!("config decode: {}", e)))?;
        let init_seed = header["init_seed"]
            .as_u64()
            .ok_or_else(|| NetError::Corrupt("missing init_seed".into()))?;
        config.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in config.param_specs() {
            let nlen = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let got = String::from_utf8(take(&mut off, nlen)?.to_vec())
                .map_err(|_| NetError::Corrupt("bad tensor name".into()))?;
            if got != name {
                return Err(NetError::Corrupt(format!(
                    "tensor order: expected {}, found {}",
                    name, got
                )));
            }
            let rank = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            if dims != shape {
                return Err(NetError::Corrupt(format!(
                    "tensor {}: shape {:?} does not match config {:?}",
                    name, dims, shape
                )));
            }
            let numel: usize = dims.iter().product();
            let raw = take(&mut off, numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if !data.iter().all(|v| v.is_finite()) {
                return Err(NetError::Corrupt(format!("tensor {}: non-finite values", name)));
            }
            tensors.push(ParamTensor { name, shape, data });
        }
        if off != bytes.len() {
            return Err(NetError::Corrupt("trailing bytes".into()));
        }
        Ok(NetParams {
            config,
            init_seed,
            tensors,
        })
    }
}

/// Forward-pass taps: bottleneck features, last decoder features, logits.
pub struct Activations<T: Element> {
    pub enc_feat: Tensor<T>,
    pub dec_feat: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Run the network given parameter leaves in the order of `param_specs`.
pub fn forward<T: Element>(
    config: &NetConfig,
    params: &[Tensor<T>],
    image: &Tensor<T>,
) -> Result<Activations<T>, NetError> {
    config.check_input(image.shape())?;
    let expected = 2 * (2 * config.depth + 2);
    if params.len() != expected {
        return Err(NetError::Invalid(format!(
            "expected {} parameter tensors, got {}",
            expected,
            params.len()
        )));
    }
    let mut p = params.iter();
    let mut next = || -> (&Tensor<T>, &Tensor<T>) {
        let w = p.next().unwrap();
        let b = p.next().unwrap();
        (w, b)
    };
    let mut skips = Vec::with_capacity(config.depth);
    let mut x = image.clone();
    for _ in 0..config.depth {
        let (w, b) = next();
        let a = relu(&conv2d(&x, w, b, 1)?)?;
        x = maxpool2x(&a)?;
        skips.push(a);
    }
    let (w, b) = next();
    let enc_feat = relu(&conv2d(&x, w, b, 1)?)?;
    x = enc_feat.clone();
    for i in (0..config.depth).rev() {
        let (w, b) = next();
        let up = upsample_nearest2x(&x)?;
        let cat = concat_channels(&up, &skips[i])?;
        x = relu(&conv2d(&cat, w, b, 1)?)?;
    }
    let dec_feat = x.clone();
    let (w, b) = next();
    let logits = conv2d(&dec_feat, w, b, 0)?;
    Ok(Activations {
        enc_feat,
        dec_feat,
        logits,
    })
}

/// Inference: argmax over classes per pixel, ties to the lowest class id.
pub fn predict(params: &NetParams, image: &[f32], h: usize, w: usize) -> Result<SegmentationMask, NetError> {
    let cfg = &params.config;
    let img = Tensor::<f32>::from_vec(vec![cfg.in_channels, h, w], image.to_vec(), false)?;
    let leaves = params.to_tensors::<f32>(false)?;
    let acts = forward(cfg, &leaves, &img)?;
    let z = acts.logits.data();
    let pixels = h * w;
    let mut labels = vec![0u8; pixels];
    for i in 0..pixels {
        let mut best = 0usize;
        let mut bv = z[i];
        for k in 1..cfg.num_classes {
            let v = z[k * pixels + i];
            if v > bv {
                bv = v;
                best = k;
            }
        }
        labels[i] = best as u8;
    }
    SegmentationMask::new(h, w, cfg.num_classes as u8, labels)
        .map_err(|e| NetError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, softmax_cross_entropy};
    use crate::rng::Rng as DetRng;

    #[test]
    fn shape_contract() {
        let cfg = NetConfig::default();
        let params = NetParams::init(cfg.clone(), 7).unwrap();
        let img = Tensor::<f32>::zeros(vec![1, 64, 64], false);
        let leaves = params.to_tensors::<f32>(false).unwrap();
        let acts = forward(&cfg, &leaves, &img).unwrap();
        assert_eq!(acts.logits.shape(), &[4, 64, 64]);
        assert_eq!(acts.enc_feat.shape(), &[64, 8, 8]);
        assert_eq!(acts.dec_feat.shape(), &[8, 64, 64]);

        let shallow = NetConfig {
            depth: 2,
            ..NetConfig::default()
        };
        let p2 = NetParams::init(shallow.clone(), 7).unwrap();
        let leaves = p2.to_tensors::<f32>(false).unwrap();
        let acts = forward(&shallow, &leaves, &img).unwrap();
        assert_eq!(acts.enc_feat.shape(), &[32, 16, 16]);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = NetConfig::default();
        let a = NetParams::init(cfg.clone(), 11).unwrap();
        let b = NetParams::init(cfg.clone(), 11).unwrap();
        let c = NetParams::init(cfg, 12).unwrap();
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(x.data, y.data);
        }
        assert!(a
            .tensors
            .iter()
            .zip(&c.tensors)
            .any(|(x, y)| x.data != y.data));
    }

    #[test]
    fn biases_start_at_zero_and_weights_within_he_limit() {
        let cfg = NetConfig::default();
        let p = NetParams::init(cfg, 3).unwrap();
        for t in &p.tensors {
            if t.name.ends_with(".bias") {
                assert!(t.data.iter().all(|&v| v == 0.0));
            } else {
                let fan_in: usize = t.shape[1..].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt() as f32;
                assert!(t.data.iter().all(|&v| v.abs() <= limit));
            }
        }
    }

    #[test]
    fn zero_classifier_gives_uniform_logits() {
        let cfg = NetConfig::default();
        let mut params = NetParams::init(cfg.clone(), 5).unwrap();
        let n = params.tensors.len();
        params.tensors[n - 2].data.iter_mut().for_each(|v| *v = 0.0);
        let mut rng = DetRng::new(5, 0);
        let img: Vec<f32> = (0..64 * 64).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
        let imgt = Tensor::<f32>::from_vec(vec![1, 64, 64], img, false).unwrap();
        let leaves = params.to_tensors::<f32>(false).unwrap();
        let acts = forward(&cfg, &leaves, &imgt).unwrap();
        assert!(acts.logits.data().iter().all(|&v| v == 0.0));
        let loss = softmax_cross_entropy(&acts.logits, &vec![0u8; 64 * 64]).unwrap();
        assert!((loss.item() - 4.0f32.ln()).abs() < 1e-4);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = NetConfig::default();
        let params = NetParams::init(cfg.clone(), 9).unwrap();
        let mut rng = DetRng::new(9, 1);
        let img: Vec<f32> = (0..64 * 64).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
        let run = || {
            let t = Tensor::<f32>::from_vec(vec![1, 64, 64], img.clone(), false).unwrap();
            let leaves = params.to_tensors::<f32>(false).unwrap();
            forward(&cfg, &leaves, &t).unwrap().logits.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn end_to_end_grad_check() {
        let cfg = NetConfig {
            in_channels: 1,
            base_channels: 2,
            depth: 3,
            num_classes: 3,
        };
        let params = NetParams::init(cfg.clone(), 21).unwrap();
        let mut rng = DetRng::new(21, 2);
        let img: Vec<f64> = (0..16 * 16).map(|_| rng.uniform(0.0, 1.0)).collect();
        let target: Vec<u8> = (0..16 * 16).map(|_| rng.uniform_usize(3) as u8).collect();
        let imgt = Tensor::<f64>::from_vec(vec![1, 16, 16], img, false).unwrap();
        let leaves = params.to_tensors::<f64>(true).unwrap();
        let err = grad_check(
            |p| {
                let acts = forward(&cfg, p, &imgt).map_err(|e| {
                    crate::diff::DiffError::Invalid(e.to_string())
                })?;
                softmax_cross_entropy(&acts.logits, &target)
            },
            &leaves,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "grad err {}", err);
    }

    #[test]
    fn consistency_loss_reaches_encoder_params() {
        use crate::diff::consistency_loss;
        let cfg = NetConfig {
            in_channels: 1,
            base_channels: 2,
            depth: 1,
            num_classes: 2,
        };
        let params = NetParams::init(cfg.clone(), 33).unwrap();
        let mut rng = DetRng::new(33, 3);
        let mk = |rng: &mut DetRng| {
            let d: Vec<f32> = (0..64).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
            Tensor::<f32>::from_vec(vec![1, 8, 8], d, false).unwrap()
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let leaves = params.to_tensors::<f32>(true).unwrap();
        let fa = forward(&cfg, &leaves, &a).unwrap();
        let fb = forward(&cfg, &leaves, &b).unwrap();
        let loss = consistency_loss(&fa.enc_feat, &fb.enc_feat, 1e-8).unwrap();
        loss.backward().unwrap();
        // encoder conv weight is leaves[0]; its gradient must be nonzero
        let g = leaves[0].grad().expect("encoder weight gradient");
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let params = NetParams::init(NetConfig::default(), 77).unwrap();
        params.save(&path).unwrap();
        let loaded = NetParams::load(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        assert_eq!(loaded.init_seed, 77);
        for (a, b) in params.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let params = NetParams::init(NetConfig::default(), 1).unwrap();
        params.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(NetParams::load(&path), Err(NetError::Corrupt(_))));
        params.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(NetParams::load(&path), Err(NetError::Corrupt(_))));
    }

    #[test]
    fn zero_depth_rejected() {
        let cfg = NetConfig {
            depth: 0,
            ..NetConfig::default()
        };
        assert!(NetParams::init(cfg, 1).is_err());
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = NetConfig::default();
        let params = NetParams::init(cfg.clone(), 1).unwrap();
        let img = Tensor::<f32>::zeros(vec![1, 30, 30], false);
        let leaves = params.to_tensors::<f32>(false).unwrap();
        assert!(forward(&cfg, &leaves, &img).is_err());
    }
}
