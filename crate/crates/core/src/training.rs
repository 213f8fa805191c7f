//! L1 training with Adam, step-decay learning rate, random patches and
//! dihedral augmentation.

use std::sync::mpsc::sync_channel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Reduction};
use crate::error::{FpanError, Result};
use crate::imaging::{images_to_tensor, DegradationSpec, ImagePair, ImageU8};
use crate::model::Fpan;
use crate::nn::ParameterStore;
use crate::tensor::{Element, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// LR patch side; the HR patch is `scale` times larger.
    pub patch: usize,
    pub lr0: f64,
    pub halve_every: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means `ceil(images / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub scale: usize,
    pub degradation: DegradationSpec,
    pub reduction: Reduction,
    pub augment: bool,
}

impl TrainConfig {
    pub fn new(scale: usize) -> Self {
        TrainConfig {
            batch_size: 16,
            patch: 48,
            lr0: 1e-4,
            halve_every: 200,
            adam: AdamConfig::default(),
            epochs: 1,
            steps_per_epoch: None,
            seed: 0,
            scale,
            degradation: DegradationSpec::bicubic(scale),
            reduction: Reduction::Mean,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patch == 0 {
            return Err(FpanError::config("batch size and patch size must be >= 1"));
        }
        if self.halve_every == 0 {
            return Err(FpanError::config("halve_every must be >= 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(FpanError::config(format!("invalid learning rate {}", self.lr0)));
        }
        if self.degradation.scale != self.scale {
            return Err(FpanError::config(format!(
                "degradation scale x{} differs from training scale x{}",
                self.degradation.scale, self.scale
            )));
        }
        self.degradation.validate()
    }

    pub fn steps_per_epoch(&self, images: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| images.div_ceil(self.batch_size))
            .max(1)
    }
}

/// `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn lr_at(epoch: usize, lr0: f64, halve_every: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / halve_every) as i32)
}

/// One Adam update with bias correction at step `t >= 1`, then clear the
/// gradients. Fails without touching anything if a parameter has no gradient.
pub fn adam_step<T: Element>(store: &mut ParameterStore<T>, lr: f64, t: u64, cfg: &AdamConfig) -> Result<()> {
    if t == 0 {
        return Err(FpanError::usage("adam step index starts at 1"));
    }
    if let Some((name, _)) = store.iter().find(|(_, p)| p.tensor.grad.is_none()) {
        return Err(FpanError::usage(format!("parameter '{name}' has no gradient")));
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one, eps) = (T::one(), T::from_f64_lossy(cfg.eps));
    let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
    let lr = T::from_f64_lossy(lr);
    for (_, p) in store.iter_mut() {
        let grad = p.tensor.grad.take().expect("checked above");
        let n = grad.len();
        if p.m.len() != n {
            p.m = vec![T::zero(); n];
            p.v = vec![T::zero(); n];
        }
        let theta = p.tensor.data_mut();
        for i in 0..n {
            let g = grad[i];
            p.m[i] = b1 * p.m[i] + (one - b1) * g;
            p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
            let m_hat = p.m[i] / c1;
            let v_hat = p.v[i] / c2;
            theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Mean (or summed) absolute difference of two tensors, outside any graph.
pub fn l1_loss<T: Element>(pred: &Tensor4<T>, target: &Tensor4<T>, reduction: Reduction) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let l = g.l1_loss(p, t, reduction)?;
    Ok(g.value(l).data()[0].to_f64_lossy())
}

/// Where a sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub image: usize,
    /// LR crop offset `(x, y)`; the HR offset is `scale` times this.
    pub offset: (usize, usize),
    pub augmentation: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub step: usize,
    pub lr: Tensor4<f32>,
    pub hr: Tensor4<f32>,
    pub provenance: Vec<Provenance>,
}

/// Training pairs checked against the patch size.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub pairs: Vec<ImagePair>,
    pub scale: usize,
    pub patch: usize,
}

impl TrainingData {
    pub fn new(pairs: Vec<ImagePair>, scale: usize, patch: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(FpanError::data("training set is empty"));
        }
        for p in &pairs {
            if p.lr.width < patch || p.lr.height < patch {
                return Err(FpanError::data(format!(
                    "{}: LR image {}x{} is smaller than the {patch}x{patch} patch",
                    p.name, p.lr.width, p.lr.height
                )));
            }
            if p.hr.width != p.lr.width * scale || p.hr.height != p.lr.height * scale {
                return Err(FpanError::data(format!("{}: HR and LR sizes disagree at x{scale}", p.name)));
            }
        }
        Ok(TrainingData { pairs, scale, patch })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Aligned LR/HR crops for one sample.
    pub fn crop(&self, prov: &Provenance) -> Result<(ImageU8, ImageU8)> {
        let (p, s) = (self.patch, self.scale);
        let pair = &self.pairs[prov.image];
        let (x, y) = prov.offset;
        let lr = pair.lr.crop(x, y, p, p)?;
        let hr = pair.hr.crop(s * x, s * y, s * p, s * p)?;
        Ok((lr.dihedral(prov.augmentation), hr.dihedral(prov.augmentation)))
    }
}

/// Seed for the batch of global step `step`, so batches can be produced in
/// any order (or ahead of time) without changing their content.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_patch_batch(
    data: &TrainingData,
    batch_size: usize,
    augment: bool,
    rng: &mut impl Rng,
) -> Result<(Vec<Provenance>, Tensor4<f32>, Tensor4<f32>)> {
    let p = data.patch;
    let mut prov = Vec::with_capacity(batch_size);
    let mut lrs = Vec::with_capacity(batch_size);
    let mut hrs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let image = rng.random_range(0..data.len());
        let lr = &data.pairs[image].lr;
        let x = rng.random_range(0..=lr.width - p);
        let y = rng.random_range(0..=lr.height - p);
        let augmentation = if augment { rng.random_range(0..8u8) } else { 0 };
        let pv = Provenance {
            image,
            offset: (x, y),
            augmentation,
        };
        let (l, h) = data.crop(&pv)?;
        prov.push(pv);
        lrs.push(l);
        hrs.push(h);
    }
    let lr = images_to_tensor(&lrs.iter().collect::<Vec<_>>())?;
    let hr = images_to_tensor(&hrs.iter().collect::<Vec<_>>())?;
    Ok((prov, lr, hr))
}

/// The batch for global step `step`.
pub fn batch_for_step(data: &TrainingData, cfg: &TrainConfig, step: usize) -> Result<SampleBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, step));
    let (provenance, lr, hr) = sample_patch_batch(data, cfg.batch_size, cfg.augment, &mut rng)?;
    Ok(SampleBatch {
        step,
        lr,
        hr,
        provenance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl LossRecord {
    /// `step epoch lr loss`
    pub fn to_line(&self) -> String {
        format!("{} {} {} {}", self.step, self.epoch, self.lr, self.loss)
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.split_whitespace();
        let r = LossRecord {
            step: it.next()?.parse().ok()?,
            epoch: it.next()?.parse().ok()?,
            lr: it.next()?.parse().ok()?,
            loss: it.next()?.parse().ok()?,
        };
        it.next().is_none().then_some(r)
    }
}

/// Forward, loss, backward and Adam on one batch. Returns the loss before the update.
pub fn train_step<T: Element>(
    model: &mut Fpan<T>,
    batch: &SampleBatch,
    lr: f64,
    t: u64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.store.bind(&mut g, true);
    let x = g.constant(batch.lr.cast());
    let target = g.constant(batch.hr.cast());
    let y = model.forward(&mut g, &b, x)?;
    let loss = g.l1_loss(y, target, cfg.reduction)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    if !value.is_finite() {
        return Err(FpanError::NonFiniteLoss { step: batch.step, lr });
    }
    g.backward(loss)?;
    model.store.zero_grad();
    model.store.accumulate_grads(&g, &b);
    adam_step(&mut model.store, lr, t, &cfg.adam)?;
    Ok(value)
}

/// Hooks invoked by [`train`].
pub trait TrainObserver<T> {
    fn on_step(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    /// Called after the last step of each epoch (0-based).
    fn on_epoch_end(&mut self, _epoch: usize, _model: &Fpan<T>) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Silent;

impl<T> TrainObserver<T> for Silent {}

/// Run epochs `start_epoch .. cfg.epochs`. Batches are prepared one step
/// ahead on a second thread; each is seeded by its global step index.
pub fn train<T: Element>(
    model: &mut Fpan<T>,
    data: &TrainingData,
    cfg: &TrainConfig,
    start_epoch: usize,
    observer: &mut dyn TrainObserver<T>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if model.config.scale != cfg.scale || data.scale != cfg.scale {
        return Err(FpanError::config(format!(
            "model x{}, data x{} and training x{} scales differ",
            model.config.scale, data.scale, cfg.scale
        )));
    }
    if data.patch != cfg.patch {
        return Err(FpanError::config("training data was prepared for another patch size"));
    }
    let per_epoch = cfg.steps_per_epoch(data.len());
    let first = start_epoch * per_epoch;
    let last = cfg.epochs * per_epoch;
    let mut trace = Vec::with_capacity(last.saturating_sub(first));

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<SampleBatch>>(2);
        scope.spawn(move || {
            for step in first..last {
                if tx.send(batch_for_step(data, cfg, step)).is_err() {
                    break;
                }
            }
        });
        for step in first..last {
            let batch = rx.recv().map_err(|_| FpanError::usage("batch producer stopped early"))??;
            assert_eq!(batch.step, step, "batch and optimizer step out of sync");
            let epoch = step / per_epoch;
            let lr = lr_at(epoch, cfg.lr0, cfg.halve_every);
            let loss = train_step(model, &batch, lr, step as u64 + 1, cfg)?;
            let record = LossRecord { step, epoch, lr, loss };
            observer.on_step(&record)?;
            trace.push(record);
            if (step + 1) % per_epoch == 0 {
                observer.on_epoch_end(epoch, model)?;
            }
        }
        Ok(())
    })?;
    Ok(trace)
}
