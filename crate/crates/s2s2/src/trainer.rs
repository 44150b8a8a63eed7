//! Training loop: segmentation loss plus optional stack-consistency terms,
//! optimized with Adam.
//!
//! The five modes form a ladder. `baseline` trains on the first image of
//! each stack only and never touches the sampling RNG, so its result is
//! byte-identical whether or not the extra stack members exist. `aug_only`
//! pairs the first image with a photometric jitter of itself. The `synth_*`
//! modes pair it with a random other stack member; `synth_enc` adds the
//! encoder consistency term and `synth_enc_dec` both encoder and decoder
//! terms. Per step the total is
//! `seg + alpha_enc * sc_enc + alpha_dec * sc_dec`, with the segmentation
//! loss (cross-entropy + soft Dice) averaged over both forwarded images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{
    add, consistency_loss, scale, soft_dice_loss, softmax_cross_entropy, Element, Tensor,
};
use crate::rng::{streams, Rng};
use crate::segnet::{forward, NetConfig, NetParams};
use crate::synthgen::ImageStack;

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Invalid(String),
    #[error("network error: {0}")]
    Net(#[from] crate::segnet::NetError),
    #[error("autodiff error: {0}")]
    Diff(#[from] crate::diff::DiffError),
    #[error("non-finite loss at epoch {epoch} step {step}: seg={seg} sc_enc={sc_enc} sc_dec={sc_dec}")]
    NonFinite {
        epoch: usize,
        step: usize,
        seg: f64,
        sc_enc: f64,
        sc_dec: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    AugOnly,
    SynthOnly,
    SynthEnc,
    SynthEncDec,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::AugOnly => "aug_only",
            Mode::SynthOnly => "synth_only",
            Mode::SynthEnc => "synth_enc",
            Mode::SynthEncDec => "synth_enc_dec",
        }
    }

    pub fn uses_second_image(&self) -> bool {
        !matches!(self, Mode::Baseline)
    }

    pub fn uses_stack(&self) -> bool {
        matches!(self, Mode::SynthOnly | Mode::SynthEnc | Mode::SynthEncDec)
    }
}

fn default_alpha_enc() -> f64 {
    0.4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_alpha_enc")]
    pub alpha_enc: f64,
    #[serde(default)]
    pub alpha_dec: f64,
}

fn default_lr() -> f64 {
    1e-3
}

impl TrainConfig {
    pub fn for_mode(mode: Mode) -> Self {
        let (alpha_enc, alpha_dec) = match mode {
            Mode::SynthEnc => (default_alpha_enc(), 0.0),
            Mode::SynthEncDec => (default_alpha_enc(), 0.1),
            _ => (0.0, 0.0),
        };
        TrainConfig {
            mode,
            net: NetConfig::default(),
            epochs: 24,
            batch_size: 4,
            learning_rate: default_lr(),
            alpha_enc,
            alpha_dec,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.net.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Invalid("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Invalid(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.alpha_enc < 0.0 || self.alpha_dec < 0.0 {
            return Err(TrainError::Invalid("consistency weights must be >= 0".into()));
        }
        match self.mode {
            Mode::Baseline | Mode::AugOnly | Mode::SynthOnly => {
                if self.alpha_enc != 0.0 || self.alpha_dec != 0.0 {
                    return Err(TrainError::Invalid(format!(
                        "mode {} requires alpha_enc = alpha_dec = 0",
                        self.mode.as_str()
                    )));
                }
            }
            Mode::SynthEnc => {
                if self.alpha_enc <= 0.0 || self.alpha_dec != 0.0 {
                    return Err(TrainError::Invalid(
                        "synth_enc requires alpha_enc > 0 and alpha_dec = 0".into(),
                    ));
                }
            }
            Mode::SynthEncDec => {
                if self.alpha_enc <= 0.0 || self.alpha_dec <= 0.0 {
                    return Err(TrainError::Invalid(
                        "synth_enc_dec requires alpha_enc > 0 and alpha_dec > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One row of the training loss log.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub seg: f64,
    pub sc_enc: f64,
    pub sc_dec: f64,
    pub total: f64,
}

/// Adam with bias correction; state lives alongside the plain parameter
/// buffers.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &NetParams) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.tensors.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.tensors.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut NetParams, grads: &[Vec<f32>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data.iter_mut().enumerate() {
                let g = grads[i][j] as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w = (*w as f64 - self.lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
    }
}

/// Photometric jitter for `aug_only`: contrast about the mean, brightness
/// shift, additive Gaussian noise, clamped back to [0, 1].
fn augment(image: &[f32], rng: &mut Rng) -> Vec<f32> {
    let contrast = rng.uniform(0.8, 1.2);
    let brightness = rng.uniform(-0.1, 0.1);
    let noise_std = rng.uniform(0.0, 0.04);
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64;
    image
        .iter()
        .map(|&v| {
            let x = (v as f64 - mean) * contrast + mean + brightness + rng.normal(0.0, noise_std);
            x.clamp(0.0, 1.0) as f32
        })
        .collect()
}

struct StepLoss<T: Element> {
    total: Tensor<T>,
    seg: f64,
    sc_enc: f64,
    sc_dec: f64,
    forward_calls: u64,
}

fn seg_loss<T: Element>(logits: &Tensor<T>, target: &[u8]) -> Result<Tensor<T>, TrainError> {
    let ce = softmax_cross_entropy(logits, target)?;
    let dc = soft_dice_loss(logits, target)?;
    Ok(add(&ce, &dc)?)
}

/// Build the scalar loss graph for one mini-batch.
fn batch_loss<T: Element>(
    cfg: &TrainConfig,
    leaves: &[Tensor<T>],
    batch: &[&ImageStack],
    sampling: &mut Rng,
) -> Result<StepLoss<T>, TrainError> {
    let (h, w) = (batch[0].mask.height, batch[0].mask.width);
    let mut seg_terms: Vec<Tensor<T>> = Vec::new();
    let mut enc_terms: Vec<Tensor<T>> = Vec::new();
    let mut dec_terms: Vec<Tensor<T>> = Vec::new();
    let mut forward_calls = 0u64;
    for stack in batch {
        let target = &stack.mask.labels;
        let img0 = Tensor::<T>::from_vec(
            vec![cfg.net.in_channels, h, w],
            stack.images[0].iter().map(|&v| T::from_f64(v as f64)).collect(),
            false,
        )?;
        let a0 = forward(&cfg.net, leaves, &img0)?;
        forward_calls += 1;
        let mut sample_seg = seg_loss(&a0.logits, target)?;
        if cfg.mode.uses_second_image() {
            let second: Vec<f32> = match cfg.mode {
                Mode::AugOnly => augment(&stack.images[0], sampling),
                _ => {
                    let n = stack.images.len();
                    if n < 2 {
                        return Err(TrainError::Invalid(
                            "synthetic modes need stacks with n >= 2".into(),
                        ));
                    }
                    let pick = 1 + sampling.uniform_usize(n - 1);
                    stack.images[pick].clone()
                }
            };
            let img1 = Tensor::<T>::from_vec(
                vec![cfg.net.in_channels, h, w],
                second.iter().map(|&v| T::from_f64(v as f64)).collect(),
                false,
            )?;
            let a1 = forward(&cfg.net, leaves, &img1)?;
            forward_calls += 1;
            sample_seg = scale(&add(&sample_seg, &seg_loss(&a1.logits, target)?)?, 0.5)?;
            if cfg.alpha_enc > 0.0 {
                enc_terms.push(consistency_loss(&a0.enc_feat, &a1.enc_feat, COSINE_EPS)?);
            }
            if cfg.alpha_dec > 0.0 {
                dec_terms.push(consistency_loss(&a0.dec_feat, &a1.dec_feat, COSINE_EPS)?);
            }
        }
        seg_terms.push(sample_seg);
    }
    let mean = |terms: &[Tensor<T>]| -> Result<Tensor<T>, TrainError> {
        let mut acc = terms[0].clone();
        for t in &terms[1..] {
            acc = add(&acc, t)?;
        }
        Ok(scale(&acc, 1.0 / terms.len() as f64)?)
    };
    let seg = mean(&seg_terms)?;
    let mut total = seg.clone();
    let mut sc_enc = 0.0;
    let mut sc_dec = 0.0;
    if !enc_terms.is_empty() {
        let e = mean(&enc_terms)?;
        sc_enc = e.item().into_f64();
        total = add(&total, &scale(&e, cfg.alpha_enc)?)?;
    }
    if !dec_terms.is_empty() {
        let d = mean(&dec_terms)?;
        sc_dec = d.item().into_f64();
        total = add(&total, &scale(&d, cfg.alpha_dec)?)?;
    }
    Ok(StepLoss {
        total,
        seg: seg.item().into_f64(),
        sc_enc,
        sc_dec,
        forward_calls,
    })
}

/// Result of a training run.
pub struct TrainOutcome {
    pub params: NetParams,
    pub records: Vec<LossRecord>,
    pub steps: usize,
    pub forward_calls: u64,
}

/// Train from scratch on the given stacks. Deterministic in (cfg, seed):
/// init, shuffling and member sampling each draw from their own seeded
/// stream.
pub fn train(cfg: &TrainConfig, stacks: &[ImageStack], seed: u64) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if stacks.is_empty() {
        return Err(TrainError::Invalid("no training stacks".into()));
    }
    let mut params = NetParams::init(cfg.net.clone(), seed)?;
    let mut adam = Adam::new(cfg.learning_rate, &params);
    let mut sampling = Rng::new(seed, streams::SAMPLING);
    let mut records = Vec::new();
    let mut forward_calls = 0u64;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..stacks.len()).collect();
        let mut shuffle_rng = Rng::new(seed, streams::SHUFFLE).child(epoch as u64);
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ImageStack> = chunk.iter().map(|&i| &stacks[i]).collect();
            let leaves = params.to_tensors::<f32>(true)?;
            let loss = batch_loss(cfg, &leaves, &batch, &mut sampling)?;
            let total = loss.total.item() as f64;
            if !total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    seg: loss.seg,
                    sc_enc: loss.sc_enc,
                    sc_dec: loss.sc_dec,
                });
            }
            loss.total.backward()?;
            let grads: Vec<Vec<f32>> = leaves
                .iter()
                .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
                .collect();
            adam.step(&mut params, &grads);
            forward_calls += loss.forward_calls;
            records.push(LossRecord {
                step,
                epoch,
                seg: loss.seg,
                sc_enc: loss.sc_enc,
                sc_dec: loss.sc_dec,
                total,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params,
        records,
        steps: step,
        forward_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate_pairs;
    use crate::segnet::predict;
    use crate::synthgen::{gen_mask, gen_stack, DomainParams, MaskConfig};
    use crate::rng::Rng as DetRng;

    fn tiny_stacks(count: usize, n: usize, seed: u64) -> Vec<ImageStack> {
        let mc = MaskConfig {
            height: 16,
            width: 16,
            num_classes: 3,
            shapes_per_class: 1,
        };
        let dp = DomainParams::default_source(3);
        let mut rng = DetRng::new(seed, 0);
        (0..count)
            .map(|i| {
                let mask = gen_mask(&mut rng.child(i as u64), &mc).unwrap();
                gen_stack(&mask, &dp, n.max(2), &rng.child(1000 + i as u64)).unwrap()
            })
            .map(|mut s| {
                s.images.truncate(n.max(1));
                s
            })
            .collect()
    }

    fn tiny_cfg(mode: Mode) -> TrainConfig {
        let mut cfg = TrainConfig::for_mode(mode);
        cfg.net = NetConfig {
            in_channels: 1,
            base_channels: 4,
            depth: 2,
            num_classes: 3,
        };
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg
    }

    #[test]
    fn config_mode_weights_validated() {
        let mut cfg = tiny_cfg(Mode::Baseline);
        cfg.alpha_enc = 0.4;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg(Mode::SynthEnc);
        cfg.alpha_enc = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg(Mode::SynthEncDec);
        cfg.alpha_dec = 0.0;
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg(Mode::SynthEnc).validate().is_ok());
    }

    #[test]
    fn loss_record_identity() {
        let stacks = tiny_stacks(8, 4, 50);
        let cfg = tiny_cfg(Mode::SynthEncDec);
        let out = train(&cfg, &stacks, 1).unwrap();
        assert!(!out.records.is_empty());
        for r in &out.records {
            let expect = r.seg + cfg.alpha_enc * r.sc_enc + cfg.alpha_dec * r.sc_dec;
            assert!((r.total - expect).abs() < 1e-6, "step {}: {} vs {}", r.step, r.total, expect);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let stacks = tiny_stacks(6, 3, 51);
        let cfg = tiny_cfg(Mode::SynthEnc);
        let a = train(&cfg, &stacks, 9).unwrap();
        let b = train(&cfg, &stacks, 9).unwrap();
        for (x, y) in a.params.tensors.iter().zip(&b.params.tensors) {
            assert_eq!(x.data, y.data);
        }
        let c = train(&cfg, &stacks, 10).unwrap();
        assert!(a.params.tensors.iter().zip(&c.params.tensors).any(|(x, y)| x.data != y.data));
    }

    #[test]
    fn baseline_ignores_extra_stack_members() {
        let full = tiny_stacks(6, 4, 52);
        let single: Vec<ImageStack> = full
            .iter()
            .map(|s| {
                let mut t = s.clone();
                t.images.truncate(1);
                t.seeds.truncate(1);
                t
            })
            .collect();
        let cfg = tiny_cfg(Mode::Baseline);
        let a = train(&cfg, &full, 3).unwrap();
        let b = train(&cfg, &single, 3).unwrap();
        for (x, y) in a.params.tensors.iter().zip(&b.params.tensors) {
            assert_eq!(x.data, y.data, "baseline must not depend on stack members past the first");
        }
    }

    #[test]
    fn forward_call_counts_per_mode() {
        let stacks = tiny_stacks(8, 3, 53);
        for (mode, per_sample) in [
            (Mode::Baseline, 1u64),
            (Mode::AugOnly, 2),
            (Mode::SynthOnly, 2),
            (Mode::SynthEnc, 2),
            (Mode::SynthEncDec, 2),
        ] {
            let cfg = tiny_cfg(mode);
            let out = train(&cfg, &stacks, 4).unwrap();
            let samples = (stacks.len() * cfg.epochs) as u64;
            assert_eq!(out.forward_calls, per_sample * samples, "mode {}", mode.as_str());
        }
    }

    #[test]
    fn zero_epochs_returns_init_unchanged() {
        let stacks = tiny_stacks(2, 2, 54);
        let mut cfg = tiny_cfg(Mode::Baseline);
        cfg.epochs = 0;
        let out = train(&cfg, &stacks, 6).unwrap();
        let fresh = crate::segnet::NetParams::init(cfg.net.clone(), 6).unwrap();
        for (x, y) in out.params.tensors.iter().zip(&fresh.tensors) {
            assert_eq!(x.data, y.data);
        }
        assert_eq!(out.steps, 0);
        assert!(out.records.is_empty());
    }

    #[test]
    fn synth_modes_reject_single_image_stacks() {
        let stacks = tiny_stacks(2, 1, 55);
        let cfg = tiny_cfg(Mode::SynthOnly);
        assert!(train(&cfg, &stacks, 1).is_err());
    }

    #[test]
    fn overfits_a_single_stack() {
        let stacks = tiny_stacks(1, 2, 56);
        let mut cfg = tiny_cfg(Mode::Baseline);
        cfg.epochs = 200;
        cfg.batch_size = 1;
        cfg.learning_rate = 3e-3;
        let out = train(&cfg, &stacks, 2).unwrap();
        let pred = predict(&out.params, &stacks[0].images[0], 16, 16).unwrap();
        let rec = evaluate_pairs(&[(pred, stacks[0].mask.clone())]).unwrap();
        assert!(rec.mean_dice > 0.99, "train dice {}", rec.mean_dice);
        let last = out.records.last().unwrap();
        assert!(last.total < out.records[0].total);
    }
}
