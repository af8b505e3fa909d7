use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    loss_color, loss_main, loss_mim, loss_shuffle, loss_total, LossWeights, Reduction, ViewId, TERM_NAMES,
};
use super::optim::AdamW;
use super::schedule::{ema_update, lambda_schedule, lr_schedule, teacher_temperature};
use crate::config::{Config, DataConfig};
use crate::error::{Error, Result};
use crate::model::{
    encode, head_logits, init_pair, mask_tensor, patchify, project_prob_from_logits, shuffle_project, EncoderConfig,
    ModelPair, TokenBatch,
};
use crate::pyramid::Corpus;
use crate::raster::RgbImage;
use crate::views::{build_view_set, ViewConfig, ViewSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub steps_per_epoch: usize,
    pub tau_s: f64,
    /// Teacher temperature at the start of warmup.
    pub tau_t_start: f64,
    /// Teacher temperature after warmup.
    pub tau_t: f64,
    pub lambda0: f64,
    pub loss_weights: LossWeights,
    pub centering: bool,
    pub center_momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_grad: f64,
    pub main_reduction: Reduction,
    /// Also feed the masked view into the cross-view loss.
    pub include_masked_in_main: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            base_lr: 5e-4,
            epochs: 100,
            warmup_epochs: 10,
            steps_per_epoch: 100,
            tau_s: 0.1,
            tau_t_start: 0.04,
            tau_t: 0.07,
            lambda0: 0.996,
            loss_weights: LossWeights::default(),
            centering: true,
            center_momentum: 0.9,
            weight_decay: 0.04,
            clip_grad: 3.0,
            main_reduction: Reduction::Mean,
            include_masked_in_main: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0 && self.tau_t > 0.0 && self.tau_t_start > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda0) {
            return Err(Error::invalid("lambda0 must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::invalid("center_momentum must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::invalid("batch_size, epochs and steps_per_epoch must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch) as u64
    }
}

/// Scalar schedules at one step, plus the running teacher center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: u64,
    pub total_steps: u64,
    pub lr: f64,
    pub lambda: f64,
    pub tau_t: f64,
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub lambda: f64,
    pub tau_t: f64,
    pub loss_main: f64,
    pub loss_color: f64,
    pub loss_mim: f64,
    pub loss_shuffle: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
}

impl StepReport {
    pub fn parts(&self) -> [f64; 4] {
        [self.loss_main, self.loss_color, self.loss_mim, self.loss_shuffle]
    }
}

/// Token batches for one step, laid out view-major (`view * batch + sample`).
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub size: usize,
    pub n_globals: usize,
    pub globals: TokenBatch,
    /// First global view with its token mask `(batch, tokens, 1)`.
    pub masked: Option<(TokenBatch, Tensor)>,
    /// Local crops, then the color view, then the shuffled view.
    pub small: Option<TokenBatch>,
    pub n_locals: usize,
    pub has_color: bool,
    pub has_shuffle: bool,
}

fn cat_batches(parts: &[TokenBatch]) -> Result<TokenBatch> {
    let grid = parts[0].grid;
    let t: Vec<&Tensor> = parts.iter().map(|p| &p.tokens).collect();
    Ok(TokenBatch {
        tokens: Tensor::cat(&t, 0)?,
        grid,
    })
}

pub fn prepare_batch(sets: &[ViewSet], model: &EncoderConfig) -> Result<PreparedBatch> {
    let first = sets.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let n_globals = first.globals.len();
    let n_locals = first.locals.len();
    let has_color = first.color_view.is_some();
    let has_shuffle = first.shuffle_view.is_some();
    for s in sets {
        if s.globals.len() != n_globals
            || s.locals.len() != n_locals
            || s.color_view.is_some() != has_color
            || s.shuffle_view.is_some() != has_shuffle
            || s.mask.is_some() != first.mask.is_some()
        {
            return Err(Error::invalid("view sets in a batch must share one layout"));
        }
    }
    let p = model.patch_size;
    let dt = model.dtype();
    let mut global_imgs: Vec<&RgbImage> = Vec::new();
    for i in 0..n_globals {
        global_imgs.extend(sets.iter().map(|s| &s.globals[i]));
    }
    let globals = patchify(&global_imgs, p, dt)?;
    let masked = match first.mask {
        Some(_) => {
            let x1: Vec<&RgbImage> = sets.iter().map(|s| &s.globals[0]).collect();
            let tokens = patchify(&x1, p, dt)?;
            let masks: Vec<_> = sets.iter().map(|s| s.mask.as_ref().unwrap()).collect();
            let m = mask_tensor(&masks, tokens.num_tokens(), dt)?;
            Some((tokens, m))
        }
        None => None,
    };
    let mut small_imgs: Vec<&RgbImage> = Vec::new();
    for j in 0..n_locals {
        small_imgs.extend(sets.iter().map(|s| &s.locals[j]));
    }
    if has_color {
        small_imgs.extend(sets.iter().map(|s| s.color_view.as_ref().unwrap()));
    }
    if has_shuffle {
        small_imgs.extend(sets.iter().map(|s| &s.shuffle_view.as_ref().unwrap().0));
    }
    let small = if small_imgs.is_empty() {
        None
    } else {
        Some(patchify(&small_imgs, p, dt)?)
    };
    Ok(PreparedBatch {
        size: sets.len(),
        n_globals,
        globals,
        masked,
        small,
        n_locals,
        has_color,
        has_shuffle,
    })
}

/// Loss tensors of one forward pass.
pub struct LossTerms {
    pub parts: [Tensor; 4],
    pub total: Tensor,
    /// Uncentered teacher head outputs over all global views.
    pub teacher_logits: Tensor,
}

fn split_rows(t: &Tensor, chunks: usize, size: usize) -> Result<Vec<Tensor>> {
    (0..chunks).map(|i| Ok(t.narrow(0, i * size, size)?)).collect()
}

/// Forward both networks on a prepared batch and evaluate the four loss terms.
pub fn compute_losses(
    pair: &ModelPair,
    train: &TrainConfig,
    batch: &PreparedBatch,
    tau_t: f64,
    center: Option<&Tensor>,
) -> Result<LossTerms> {
    let cfg = &pair.config;
    let b = batch.size;
    let dt = cfg.dtype();
    let zero = Tensor::zeros((), dt, &Device::Cpu)?;

    let e_t = encode(cfg, &pair.teacher, &batch.globals, None, None)?.detach();
    let z_t = head_logits(&pair.teacher, &e_t)?.detach();
    let z_centered = match center {
        Some(c) => z_t.broadcast_sub(c)?,
        None => z_t.clone(),
    };
    let p_t = split_rows(&project_prob_from_logits(&z_centered, tau_t)?, batch.n_globals, b)?;

    let n_big = batch.n_globals * b;
    let (big, big_mask) = match &batch.masked {
        Some((tokens, m)) => {
            let zeros = Tensor::zeros((n_big, batch.globals.num_tokens(), 1), dt, &Device::Cpu)?;
            (
                cat_batches(&[batch.globals.clone(), tokens.clone()])?,
                Some(Tensor::cat(&[&zeros, m], 0)?),
            )
        }
        None => (batch.globals.clone(), None),
    };
    let e_big = encode(cfg, &pair.student, &big, big_mask.as_ref(), None)?;
    let p_big = project_prob_from_logits(&head_logits(&pair.student, &e_big)?, train.tau_s)?;

    let mut student: Vec<(ViewId, Tensor)> = Vec::new();
    for (i, p) in split_rows(&p_big, batch.n_globals, b)?.into_iter().enumerate() {
        student.push((ViewId::Global(i), p));
    }
    let p_masked = match batch.masked {
        Some(_) => Some(p_big.narrow(0, n_big, b)?),
        None => None,
    };

    let mut p_color = None;
    let mut e_shuffled = None;
    if let Some(small) = &batch.small {
        let e_small = encode(cfg, &pair.student, small, None, None)?;
        let p_small = project_prob_from_logits(&head_logits(&pair.student, &e_small)?, train.tau_s)?;
        let mut k = 0;
        for j in 0..batch.n_locals {
            student.push((ViewId::Local(j), p_small.narrow(0, k * b, b)?));
            k += 1;
        }
        if batch.has_color {
            let p = p_small.narrow(0, k * b, b)?;
            student.push((ViewId::Color, p.clone()));
            p_color = Some(p);
            k += 1;
        }
        if batch.has_shuffle {
            student.push((ViewId::Shuffle, p_small.narrow(0, k * b, b)?));
            e_shuffled = Some(e_small.narrow(0, k * b, b)?);
        }
    }
    if train.include_masked_in_main {
        if let Some(p) = &p_masked {
            student.push((ViewId::Masked, p.clone()));
        }
    }

    let l_main = loss_main(&p_t, &student, train.main_reduction)?;
    let l_color = match &p_color {
        Some(p) => loss_color(&p_t[0], p)?,
        None => zero.clone(),
    };
    let l_mim = match &p_masked {
        Some(p) => loss_mim(&p_t[0], p)?,
        None => zero.clone(),
    };
    let l_shuffle = match &e_shuffled {
        Some(e_s) => loss_shuffle(&e_t.narrow(0, 0, b)?, &shuffle_project(&pair.projector, e_s)?)?,
        None => zero,
    };
    let parts = [l_main, l_color, l_mim, l_shuffle];
    let total = loss_total(&parts, &train.loss_weights)?;
    Ok(LossTerms {
        parts,
        total,
        teacher_logits: z_t,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Per-step RNG, a pure function of (seed, step).
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// View sets for one step, drawn from the corpus deterministically.
pub fn sample_view_batch(
    corpus: &Corpus,
    data: &DataConfig,
    views: &ViewConfig,
    n_tokens: usize,
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<ViewSet>> {
    let mut rng = step_rng(seed, step);
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (slide, base) = corpus.sample_patch(data.level, data.patch_size, data.sample_mode, &mut rng)?;
        let coarse = if views.use_multiscale {
            let size = data.coarse_size.unwrap_or(data.patch_size);
            Some(corpus.slides[slide].co_centered_region(&base, data.level + data.coarse_level_offset, size)?)
        } else {
            None
        };
        out.push(build_view_set(&base, coarse.as_ref(), views, n_tokens, &mut rng)?);
    }
    Ok(out)
}

/// Student/teacher pair with optimizer and schedule state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: Config,
    pub pair: ModelPair,
    pub optimizer: AdamW,
    /// Running mean of teacher head outputs, `(1, K)`.
    pub center: Tensor,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let pair = init_pair(&config.model, config.train.seed)?;
        let optimizer = AdamW::new(&[&pair.student, &pair.projector], config.train.weight_decay)?;
        let center = Tensor::zeros((1, config.model.out_dim), config.model.dtype(), &Device::Cpu)?;
        Ok(Self {
            config: config.clone(),
            pair,
            optimizer,
            center,
            step: 0,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.config.train.total_steps()
    }

    pub fn schedule(&self) -> Result<ScheduleState> {
        let tc = &self.config.train;
        let total = tc.total_steps();
        let t = self.step.min(total);
        Ok(ScheduleState {
            step: self.step,
            total_steps: total,
            lr: lr_schedule(t, total, tc.warmup_steps(), tc.base_lr),
            lambda: lambda_schedule(t, total, tc.lambda0)?,
            tau_t: teacher_temperature(t, tc.warmup_steps(), tc.tau_t_start, tc.tau_t),
            center: self.center.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?,
        })
    }

    pub fn prepare(&self, sets: &[ViewSet]) -> Result<PreparedBatch> {
        prepare_batch(sets, &self.config.model)
    }

    pub fn train_step(&mut self, sets: &[ViewSet]) -> Result<StepReport> {
        let batch = self.prepare(sets)?;
        self.train_prepared(&batch)
    }

    /// One optimization step. On a non-finite loss the state is left untouched.
    pub fn train_prepared(&mut self, batch: &PreparedBatch) -> Result<StepReport> {
        let sched = self.schedule()?;
        let tc = self.config.train.clone();
        let center = tc.centering.then_some(&self.center);
        let terms = compute_losses(&self.pair, &tc, batch, sched.tau_t, center)?;
        let mut parts = [0.0; 4];
        for (k, t) in terms.parts.iter().enumerate() {
            parts[k] = scalar(t)?;
            if !parts[k].is_finite() {
                return Err(Error::Divergence {
                    term: TERM_NAMES[k],
                    step: self.step,
                });
            }
        }
        let total = scalar(&terms.total)?;
        if !total.is_finite() {
            return Err(Error::Divergence {
                term: "total",
                step: self.step,
            });
        }
        let grads = terms.total.backward()?;
        let clip = (tc.clip_grad > 0.0).then_some(tc.clip_grad);
        let grad_norm = self.optimizer.step(
            &mut [&mut self.pair.student, &mut self.pair.projector],
            &grads,
            sched.lr,
            clip,
        )?;
        ema_update(&mut self.pair.teacher, &self.pair.student, sched.lambda)?;
        let batch_center = terms.teacher_logits.mean_keepdim(0)?;
        let m = tc.center_momentum;
        self.center = ((&self.center * m)? + (batch_center * (1.0 - m))?)?.detach();
        self.step += 1;
        Ok(StepReport {
            step: sched.step,
            lr: sched.lr,
            lambda: sched.lambda,
            tau_t: sched.tau_t,
            loss_main: parts[0],
            loss_color: parts[1],
            loss_mim: parts[2],
            loss_shuffle: parts[3],
            loss_total: total,
            grad_norm,
        })
    }

    /// Batch for the current step.
    pub fn next_batch(&self, corpus: &Corpus) -> Result<Vec<ViewSet>> {
        config_batch(&self.config, corpus, self.step)
    }

    /// Trains until `until` steps (capped at the schedule length). Without
    /// `deterministic`, a producer thread prepares the next batch ahead; batches are
    /// pure functions of (seed, step) so both modes give identical results.
    pub fn fit<F: FnMut(&StepReport) -> Result<()>>(
        &mut self,
        corpus: &Corpus,
        until: u64,
        deterministic: bool,
        mut on_step: F,
    ) -> Result<()> {
        let end = until.min(self.total_steps());
        if deterministic {
            while self.step < end {
                let sets = self.next_batch(corpus)?;
                let report = self.train_step(&sets)?;
                on_step(&report)?;
            }
            return Ok(());
        }
        let start = self.step;
        let config = &self.config.clone();
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = std::sync::mpsc::sync_channel(2);
            scope.spawn(move || {
                for step in start..end {
                    let batch = config_batch(config, corpus, step);
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
            while self.step < end {
                let sets = rx
                    .recv()
                    .map_err(|_| Error::invalid("batch producer stopped early"))??;
                let report = self.train_step(&sets)?;
                on_step(&report)?;
            }
            Ok(())
        })
    }
}

fn config_batch(c: &Config, corpus: &Corpus, step: u64) -> Result<Vec<ViewSet>> {
    sample_view_batch(
        corpus,
        &c.data,
        &c.views,
        c.model.num_tokens(),
        c.train.batch_size,
        c.train.seed,
        step,
    )
}

/// Result of comparing autograd gradients with central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)` over probed coordinates.
    pub relative_error: f64,
    pub probes: usize,
}

/// Central-difference check of `loss_total` with respect to student and projector
/// parameters, probing up to `per_tensor` evenly spaced coordinates of every tensor.
pub fn gradient_check(
    pair: &ModelPair,
    train: &TrainConfig,
    batch: &PreparedBatch,
    tau_t: f64,
    center: Option<&Tensor>,
    per_tensor: usize,
    h: f64,
) -> Result<GradCheck> {
    let terms = compute_losses(pair, train, batch, tau_t, center)?;
    let grads = terms.total.backward()?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for which in 0..2 {
        let store = if which == 0 { &pair.student } else { &pair.projector };
        for i in 0..store.len() {
            let t = &store.tensors()[i];
            let n = t.elem_count();
            let g = match grads.get(t) {
                Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
                None => vec![0.0; n],
            };
            let base = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let count = per_tensor.min(n);
            for k in 0..count {
                let idx = k * n / count;
                let eval = |delta: f64| -> Result<f64> {
                    let mut v = base.clone();
                    v[idx] += delta;
                    let shifted = Tensor::from_vec(v, t.dims(), &Device::Cpu)?.to_dtype(t.dtype())?;
                    let mut p = pair.clone();
                    let target = if which == 0 { &mut p.student } else { &mut p.projector };
                    target.set(i, &shifted)?;
                    scalar(&compute_losses(&p, train, batch, tau_t, center)?.total)
                };
                let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                analytic.push(g[idx]);
                numeric.push(fd);
            }
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let denom = norm(&analytic).max(norm(&numeric)).max(1e-300);
    Ok(GradCheck {
        relative_error: norm(&diff) / denom,
        probes: analytic.len(),
    })
}
