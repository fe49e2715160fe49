//! Conditional flow-matching training: probability-path sampling, the
//! target vector field, the CFM loss, conditioning augmentations, AdamW
//! and the warmup-cosine schedule.

use crate::error::{arg_err, data_err, shape_err, Error, Result};
use crate::numcore::{Real, Tape, Tensor};
use crate::unet::{
    bind_params, forward_on_tape, ConditionStack, MetaInputs, NetConfig, NetParams, Sensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn default_sigma() -> f64 {
    0.001
}
fn default_lr_base() -> f64 {
    1e-4
}
fn default_warmup() -> usize {
    200
}
fn default_total() -> usize {
    2000
}
fn default_batch() -> usize {
    4
}
fn default_accum() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_checkpoint_every() -> usize {
    500
}

/// Training hyper-parameters. Defaults are the desk-scale setup; the
/// full-scale run uses 6000 warmup steps instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_lr_base")]
    pub lr_base: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_total")]
    pub total_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_accum")]
    pub grad_accum: usize,
    #[serde(default = "default_dropout")]
    pub modis_dropout_prob: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.modis_dropout_prob) {
            return Err(arg_err("modis_dropout_prob must lie in [0,1]"));
        }
        if self.sigma < 0.0 {
            return Err(arg_err("sigma must be non-negative"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(arg_err(format!(
                "warmup_steps {} must be < total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(arg_err("batch_size and grad_accum must be positive"));
        }
        Ok(())
    }
}

// ── Core operations ──────────────────────────────────────────────────

/// The regression target u = x1 - x0; independent of t.
pub fn target_field<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    x1.sub(x0)
}

/// Draw x_t ~ N((1-t) x0 + t x1, sigma^2).
pub fn sample_path<T: Real>(
    x0: &Tensor<T>,
    x1: &Tensor<T>,
    t: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) || !t.is_finite() {
        return Err(arg_err(format!("path time t must lie in [0,1], got {t}")));
    }
    if sigma < 0.0 {
        return Err(arg_err(format!("sigma must be non-negative, got {sigma}")));
    }
    if x0.shape() != x1.shape() {
        return Err(shape_err(format!(
            "sample_path: {:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    let tt = T::c(t);
    let one_m_t = T::c(1.0 - t);
    let sg = T::c(sigma);
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(&a, &b)| {
            let eps: T = T::std_normal(rng);
            one_m_t * a + tt * b + sg * eps
        })
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// 0.5 * mean((pred - target)^2), reduced in f64.
pub fn cfm_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(shape_err(format!(
            "cfm_loss: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut acc = 0.0f64;
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        let d = a.f64() - b.f64();
        acc += d * d;
    }
    Ok(0.5 * acc / pred.numel() as f64)
}

/// One training sample in the normalized network domain.
#[derive(Clone, Debug)]
pub struct TrainItem<T> {
    pub x1: Tensor<T>,
    pub composites: Vec<Tensor<T>>,
    pub coarse: Tensor<T>,
    pub doy: u32,
    pub sensor: Sensor,
}

/// Conditioning augmentation: one composite chosen uniformly; the coarse
/// raster dropped (zero-filled, flag cleared) with the given probability.
pub fn augment_condition<T: Real>(
    item: &TrainItem<T>,
    rng: &mut impl Rng,
    modis_dropout_prob: f64,
) -> Result<ConditionStack<T>> {
    if item.composites.is_empty() {
        return Err(data_err("augment_condition: empty composite list"));
    }
    let idx = rng.gen_range(0..item.composites.len());
    let drop = rng.gen::<f64>() < modis_dropout_prob;
    let stack = ConditionStack::new(
        item.composites[idx].clone(),
        Some(item.coarse.clone()),
        item.doy,
        item.sensor,
    )?;
    Ok(if drop { stack.without_modis() } else { stack })
}

/// Linear warmup to lr_base over warmup_steps, then cosine decay to zero
/// at total_steps.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(arg_err(format!(
            "schedule step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return Ok(cfg.lr_base);
        }
        return Ok(cfg.lr_base * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.lr_base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ── Optimizer state ──────────────────────────────────────────────────

/// Weights plus AdamW moments, the step counter and the RNG bookkeeping
/// needed for bit-exact resume.
pub struct TrainState<T: Real> {
    pub net: NetConfig,
    pub params: NetParams<T>,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
    pub sample_ordinal: u64,
    pub batch_rng: ChaCha8Rng,
    accum: Option<BTreeMap<String, Tensor<T>>>,
    accum_count: usize,
    accum_loss: f64,
}

impl<T: Real> TrainState<T> {
    pub fn new(net: NetConfig, params: NetParams<T>, seed: u64) -> Self {
        let m = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        let v = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        TrainState {
            net,
            params,
            m,
            v,
            step: 0,
            sample_ordinal: 0,
            batch_rng: ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xBA7C4)),
            accum: None,
            accum_count: 0,
            accum_loss: 0.0,
        }
    }

    /// Checkpointing mid-accumulation would lose the buffered gradients.
    pub fn at_accum_boundary(&self) -> bool {
        self.accum_count == 0
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-sample noise stream from (seed, sample ordinal).
pub fn sample_stream(seed: u64, ordinal: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(ordinal.wrapping_add(1))))
}

/// Decoupled-weight-decay Adam step over accumulated gradients. Rejects
/// the step on any non-finite gradient.
pub fn adamw_update<T: Real>(
    state: &mut TrainState<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient for '{name}' is non-finite; step {} rejected",
                state.step
            )));
        }
    }
    let t = (state.step + 1) as i32;
    let b1 = T::c(cfg.beta1);
    let b2 = T::c(cfg.beta2);
    let bias1 = T::c(1.0 - cfg.beta1.powi(t));
    let bias2 = T::c(1.0 - cfg.beta2.powi(t));
    let lr_t = T::c(lr);
    let eps = T::c(cfg.adam_eps);
    let wd = T::c(cfg.weight_decay);
    for (name, g) in grads {
        let p = state.params.get_mut(name)?;
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| arg_err(format!("no first moment for '{name}'")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| arg_err(format!("no second moment for '{name}'")))?;
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *mv = b1 * *mv + (T::one() - b1) * *gv;
            *vv = b2 * *vv + (T::one() - b2) * *gv * *gv;
            let mhat = *mv / bias1;
            let vhat = *vv / bias2;
            *pv = *pv - lr_t * (mhat / (vhat.sqrt() + eps) + wd * *pv);
        }
    }
    Ok(())
}

/// Per-sample draws in stream order: composite choice, dropout coin,
/// path time t. x0/epsilon are drawn from the same stream afterwards.
pub struct SampleDraws {
    pub composite_idx: usize,
    pub drop_modis: bool,
    pub t: f64,
}

pub fn sample_draws(rng: &mut impl Rng, n_composites: usize, dropout_prob: f64) -> SampleDraws {
    let composite_idx = rng.gen_range(0..n_composites);
    let drop_modis = rng.gen::<f64>() < dropout_prob;
    let t = rng.gen::<f64>();
    SampleDraws {
        composite_idx,
        drop_modis,
        t,
    }
}

/// One micro-batch of Algorithm-1 lines 2-6: draw (x0, t, x_t), predict
/// the field, accumulate gradients; apply AdamW every `grad_accum`
/// micro-batches. Returns the micro-batch loss.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    items: &[&TrainItem<T>],
    cfg: &TrainConfig,
) -> Result<f64> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(data_err("train_step: empty batch"));
    }
    let (c, h, w) = items[0].x1.dims3()?;
    let b = items.len();
    let mut x_t = Vec::with_capacity(b * c * h * w);
    let mut comp = Vec::with_capacity(b * c * h * w);
    let mut coarse = Vec::with_capacity(b * c * h * w);
    let mut target = Vec::with_capacity(b * c * h * w);
    let mut metas = Vec::with_capacity(b);
    for item in items {
        if item.x1.shape() != [c, h, w] {
            return Err(shape_err("train_step: batch not spatially uniform"));
        }
        let mut rng = sample_stream(cfg.seed, state.sample_ordinal);
        state.sample_ordinal += 1;
        let draws = sample_draws(&mut rng, item.composites.len().max(1), cfg.modis_dropout_prob);
        if item.composites.is_empty() {
            return Err(data_err("train_step: item with no composites"));
        }
        let cond_comp = &item.composites[draws.composite_idx];
        let x0 = Tensor::<T>::randn(&[c, h, w], &mut rng);
        let xt = sample_path(&x0, &item.x1, draws.t, cfg.sigma, &mut rng)?;
        let u = target_field(&x0, &item.x1)?;
        x_t.extend_from_slice(xt.data());
        comp.extend_from_slice(cond_comp.data());
        if draws.drop_modis {
            coarse.extend(std::iter::repeat(T::zero()).take(c * h * w));
        } else {
            coarse.extend_from_slice(item.coarse.data());
        }
        target.extend_from_slice(u.data());
        metas.push(MetaInputs {
            t: draws.t,
            doy: item.doy,
            sensor: item.sensor,
            modis_available: !draws.drop_modis,
        });
    }
    let shape = vec![b, c, h, w];
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, &state.params, true);
    let x_id = tape.leaf(Tensor::new(shape.clone(), x_t)?, false);
    let comp_id = tape.leaf(Tensor::new(shape.clone(), comp)?, false);
    let coarse_id = tape.leaf(Tensor::new(shape.clone(), coarse)?, false);
    let target_id = tape.leaf(Tensor::new(shape, target)?, false);
    let pred = forward_on_tape(&mut tape, &binding, &state.net, x_id, comp_id, coarse_id, &metas)?;
    let loss_id = tape.half_mse(pred, target_id)?;
    let loss = tape.value(loss_id).data()[0].f64();
    let mut grads = tape.backward(loss_id)?;

    // Accumulate mean-of-micro-batches gradients.
    let scale = T::c(1.0 / cfg.grad_accum as f64);
    let mut accum = state.accum.take().unwrap_or_default();
    for name in binding.names() {
        let g = grads
            .take(binding.id(name)?)
            .ok_or_else(|| arg_err(format!("missing gradient for '{name}'")))?;
        match accum.get_mut(name) {
            Some(a) => {
                for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                    *av += *gv * scale;
                }
            }
            None => {
                accum.insert(name.clone(), g.scale(scale));
            }
        }
    }
    state.accum = Some(accum);
    state.accum_count += 1;
    state.accum_loss += loss;

    if state.accum_count == cfg.grad_accum {
        let grads = state.accum.take().unwrap();
        let lr = lr_schedule(state.step as usize + 1, cfg)?;
        adamw_update(state, &grads, lr, cfg)?;
        state.step += 1;
        state.accum_count = 0;
        state.accum_loss = 0.0;
    }
    Ok(loss)
}

/// One CSV row per optimizer step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub wallclock_s: f64,
}

/// Drive `train_step` until the configured total step count, sampling
/// batches with replacement from `items`. Invokes the callback after
/// every optimizer application.
pub fn run_training<T: Real>(
    state: &mut TrainState<T>,
    items: &[TrainItem<T>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainLogRow, &TrainState<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(data_err("run_training: no training items"));
    }
    let started = std::time::Instant::now();
    while (state.step as usize) < cfg.total_steps {
        let mut micro_losses = Vec::with_capacity(cfg.grad_accum);
        for _ in 0..cfg.grad_accum {
            let batch: Vec<&TrainItem<T>> = (0..cfg.batch_size)
                .map(|_| &items[state.batch_rng.gen_range(0..items.len())])
                .collect();
            micro_losses.push(train_step(state, &batch, cfg)?);
        }
        let loss = micro_losses.iter().sum::<f64>() / micro_losses.len() as f64;
        let row = TrainLogRow {
            step: state.step,
            lr: lr_schedule(state.step as usize, cfg)?,
            loss,
            wallclock_s: started.elapsed().as_secs_f64(),
        };
        on_step(&row, state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            warmup_steps: 200,
            total_steps: 2000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_match_declared_values() {
        let c = TrainConfig::default();
        assert_eq!(c.sigma, 0.001);
        assert_eq!(c.lr_base, 1e-4);
        assert_eq!(c.grad_accum, 4);
        assert_eq!(c.modis_dropout_prob, 0.5);
    }

    #[test]
    fn target_field_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[6, 3, 3], &mut rng);
        let zero = target_field(&x, &x).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let zeros = Tensor::<f32>::zeros(&[6, 3, 3]);
        let field = target_field(&zeros, &x).unwrap();
        assert_eq!(field.data(), x.data());

        let y = Tensor::<f32>::randn(&[6, 3, 3], &mut rng);
        let f = target_field(&x, &y).unwrap();
        for i in 0..f.numel() {
            assert_eq!(f.data()[i], y.data()[i] - x.data()[i]);
        }
        let bad = Tensor::<f32>::zeros(&[6, 2, 2]);
        assert!(target_field(&x, &bad).is_err());
    }

    #[test]
    fn sample_path_endpoints_exact_at_zero_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::<f32>::randn(&[6, 4, 4], &mut rng);
        let x1 = Tensor::<f32>::randn(&[6, 4, 4], &mut rng);
        let p0 = sample_path(&x0, &x1, 0.0, 0.0, &mut rng).unwrap();
        assert!(p0.max_abs_diff(&x0) <= 1e-7);
        let p1 = sample_path(&x0, &x1, 1.0, 0.0, &mut rng).unwrap();
        assert!(p1.max_abs_diff(&x1) <= 1e-7);
        let mid = sample_path(&x0, &x1, 0.5, 0.0, &mut rng).unwrap();
        for i in 0..mid.numel() {
            let expect = 0.5 * (x0.data()[i] + x1.data()[i]);
            assert!((mid.data()[i] - expect).abs() <= 1e-7);
        }
        assert!(sample_path(&x0, &x1, 1.5, 0.0, &mut rng).is_err());
        assert!(sample_path(&x0, &x1, -0.1, 0.0, &mut rng).is_err());
    }

    #[test]
    fn sample_path_monte_carlo_moments() {
        // One pixel, 1e5 draws at sigma=1e-3: mean within 3*sigma/sqrt(n),
        // std inside [0.0009, 0.0011].
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::scalar(0.2);
        let x1 = Tensor::<f64>::scalar(0.8);
        let t = 0.3;
        let interp = 0.7 * 0.2 + 0.3 * 0.8;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = sample_path(&x0, &x1, t, 1e-3, &mut rng).unwrap().data()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let std = (sumsq / n as f64 - mean * mean).sqrt();
        assert!((mean - interp).abs() <= 3.0 * 1e-3 / (n as f64).sqrt());
        assert!((0.0009..=0.0011).contains(&std), "std {std}");
    }

    #[test]
    fn cfm_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f32>::randn(&[6, 3, 3], &mut rng);
        assert_eq!(cfm_loss(&a, &a).unwrap(), 0.0);

        let b = a.map(|v| v + 2.0);
        assert!((cfm_loss(&b, &a).unwrap() - 2.0).abs() <= 1e-6);

        let c = Tensor::<f32>::randn(&[6, 3, 3], &mut rng);
        let direct: f64 = a
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| 0.5 * ((x - y) as f64).powi(2))
            .sum::<f64>()
            / a.numel() as f64;
        assert!((cfm_loss(&a, &c).unwrap() - direct).abs() <= 1e-7);
    }

    fn item(seed: u64) -> TrainItem<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainItem {
            x1: Tensor::randn(&[6, 4, 4], &mut rng),
            composites: (0..3).map(|_| Tensor::randn(&[6, 4, 4], &mut rng)).collect(),
            coarse: Tensor::randn(&[6, 4, 4], &mut rng),
            doy: 150,
            sensor: Sensor::TM,
        }
    }

    #[test]
    fn augmentation_probabilities() {
        let it = item(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let s = augment_condition(&it, &mut rng, 0.0).unwrap();
            assert!(s.modis_available);
        }
        for _ in 0..100 {
            let s = augment_condition(&it, &mut rng, 1.0).unwrap();
            assert!(!s.modis_available);
            assert!(s.coarse.data().iter().all(|&v| v == 0.0));
        }
        let mut drops = 0;
        let n = 10_000;
        for _ in 0..n {
            if !augment_condition(&it, &mut rng, 0.5).unwrap().modis_available {
                drops += 1;
            }
        }
        let freq = drops as f64 / n as f64;
        assert!((0.47..=0.53).contains(&freq), "dropout frequency {freq}");

        let empty = TrainItem::<f32> {
            composites: vec![],
            ..item(7)
        };
        assert!(augment_condition(&empty, &mut rng, 0.5).is_err());
    }

    #[test]
    fn t_draws_pass_decile_uniformity() {
        let mut deciles = [0usize; 10];
        let n = 10_000;
        for ord in 0..n {
            let mut rng = sample_stream(1234, ord);
            let d = sample_draws(&mut rng, 3, 0.5);
            deciles[((d.t * 10.0) as usize).min(9)] += 1;
        }
        for (i, &count) in deciles.iter().enumerate() {
            let f = count as f64 / n as f64;
            assert!((0.08..=0.12).contains(&f), "decile {i} frequency {f}");
        }
    }

    #[test]
    fn schedule_contract() {
        let c = cfg();
        assert_eq!(lr_schedule(0, &c).unwrap(), 0.0);
        assert!((lr_schedule(200, &c).unwrap() - 1e-4).abs() < 1e-18);
        assert!(lr_schedule(2000, &c).unwrap().abs() < 1e-18);
        let mid = 200 + (2000 - 200) / 2;
        assert!((lr_schedule(mid, &c).unwrap() - 5e-5).abs() < 1e-12);
        // Continuity at the warmup boundary.
        let before = lr_schedule(199, &c).unwrap();
        let at = lr_schedule(200, &c).unwrap();
        let after = lr_schedule(201, &c).unwrap();
        assert!((at - before) < 1e-6 && (at - after) < 1e-6);
        assert!(lr_schedule(2001, &c).is_err());
    }

    fn scalar_state(p: f32) -> TrainState<f32> {
        use crate::unet::NetConfig;
        let mut map = BTreeMap::new();
        map.insert("p".to_string(), Tensor::scalar(p));
        let params = NetParams::from_map(map);
        TrainState::new(NetConfig::default(), params, 0)
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut state = scalar_state(1.5);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(0.0f32));
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        adamw_update(&mut state, &grads, 0.1, &c).unwrap();
        assert_eq!(state.params.get("p").unwrap().data()[0], 1.5);
    }

    #[test]
    fn adamw_first_step_matches_hand_derivation() {
        // p=1, g=1, lr=0.1, decay=0: bias-corrected mhat=vhat=1, so
        // p <- 1 - 0.1*(1/(1+eps)) ~= 0.9.
        let mut state = scalar_state(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(1.0f32));
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        adamw_update(&mut state, &grads, 0.1, &c).unwrap();
        let p = state.params.get("p").unwrap().data()[0];
        assert!((p - 0.9).abs() <= 1e-6, "got {p}");
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        // g=0, decay=0.01, lr=0.1: p <- p * (1 - 0.001).
        let mut state = scalar_state(2.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(0.0f32));
        let c = TrainConfig {
            weight_decay: 0.01,
            ..cfg()
        };
        adamw_update(&mut state, &grads, 0.1, &c).unwrap();
        let p = state.params.get("p").unwrap().data()[0];
        assert!((p - 2.0 * 0.999).abs() <= 1e-7, "got {p}");
    }

    #[test]
    fn adamw_rejects_non_finite_grads() {
        let mut state = scalar_state(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(f32::NAN));
        assert!(matches!(
            adamw_update(&mut state, &grads, 0.1, &cfg()),
            Err(Error::NonFinite(_))
        ));
    }
}
