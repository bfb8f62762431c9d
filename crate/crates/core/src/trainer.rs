//! Optimization loop: warmup, per-variant training, EMA scheduling,
//! logging, periodic evaluation and the prototype-collapse experiment.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::prototype::{assignment_entropy, assignment_histogram, max_share, ProtoLossKind};
pub use crate::recon::LossBreakdown;
use crate::recon::{
    forward_step, LossOptions, ModelConfig, ModelState, ReconObjective, SoftMining, StepGrads,
    VariantMode,
};
use crate::rng::Rng;
use crate::scoring::{evaluate, MetricReport, ScoringConfig};
use crate::tensor::{Real, Tensor};
use crate::vit::{ema_update, ImageSample};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: VariantMode,
    pub iterations: usize,
    pub batch: usize,
    pub lambda: f64,
    pub beta: f64,
    pub model: ModelConfig,
    /// Learning rate of the decoder, bottleneck and prototype extractor.
    pub lr_head: f64,
    pub lr_encoder: f64,
    pub proto_kind: ProtoLossKind,
    pub seed: u64,
    pub log_interval: usize,
    /// Steps between evaluations on the held-out split; 0 disables.
    pub eval_interval: usize,
    /// Steps between checkpoint callbacks; 0 disables.
    pub checkpoint_interval: usize,
    pub mining: SoftMining,
    pub objective: ReconObjective,
    /// Self-distillation steps run before the variant's own objective.
    pub warmup: usize,
    pub adam: AdamConfig,
    pub scoring: ScoringConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: VariantMode::M2Plus,
            iterations: 2000,
            batch: 32,
            lambda: 0.2,
            beta: 0.9999,
            model: ModelConfig::default(),
            lr_head: 1e-4,
            lr_encoder: 1e-5,
            proto_kind: ProtoLossKind::Daa,
            seed: 0,
            log_interval: 10,
            eval_interval: 0,
            checkpoint_interval: 0,
            mining: SoftMining::default(),
            objective: ReconObjective::PerToken,
            warmup: 200,
            adam: AdamConfig::default(),
            scoring: ScoringConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log interval must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1]",
                self.beta
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda {} must be non-negative",
                self.lambda
            )));
        }
        for (name, lr) in [("head", self.lr_head), ("encoder", self.lr_encoder)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} learning rate {lr} is invalid"
                )));
            }
        }
        self.adam.validate()
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            lambda: self.lambda,
            proto_kind: self.proto_kind,
            mining: self.mining,
            objective: self.objective,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Upper bound on the per-tensor update RMS ratio before the step
    /// size is scaled down.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip: 1.0,
        }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(params: &ParamSet<T>) -> Self {
        let z = || {
            params
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Moments { m: z(), v: z() }
    }
}

/// AdamW whose per-tensor step size is divided by
/// `max(1, RMS(g² / v̂) / clip)`.
///
/// A tensor whose gradient is exactly zero is left untouched, moments
/// included; the shared step counter still advances.
pub struct AdamW<T> {
    pub config: AdamConfig,
    step: usize,
    encoder: Moments<T>,
    head: Moments<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamConfig, state: &ModelState<T>) -> Self {
        AdamW {
            config,
            step: 0,
            encoder: Moments::zeros(&state.encoder.params),
            head: Moments::zeros(&state.head.params),
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn moments(&self) -> (&Moments<T>, &Moments<T>) {
        (&self.encoder, &self.head)
    }

    /// Applies one update; in frozen-encoder modes the encoder is skipped.
    pub fn step(
        &mut self,
        state: &mut ModelState<T>,
        grads: &StepGrads<T>,
        lr_head: f64,
        lr_encoder: f64,
    ) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::numeric(
                format!("optimizer step {}", self.step + 1),
                "non-finite gradient",
            ));
        }
        self.step += 1;
        let cfg = self.config;
        adamw_update(
            &cfg,
            self.step,
            &mut state.head.params,
            &mut self.head,
            &grads.head,
            lr_head,
        );
        if state.mode.flags().unfrozen {
            adamw_update(
                &cfg,
                self.step,
                &mut state.encoder.params,
                &mut self.encoder,
                &grads.encoder,
                lr_encoder,
            );
        }
        Ok(())
    }
}

/// One AdamW update of every tensor in `params` at global step `step`
/// (1-based).
pub fn adamw_update<T: Real>(
    cfg: &AdamConfig,
    step: usize,
    params: &mut ParamSet<T>,
    moments: &mut Moments<T>,
    grads: &[Tensor<T>],
    lr: f64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (ob1, ob2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    for (k, g) in grads.iter().enumerate() {
        if g.data().iter().all(|&x| x == T::zero()) {
            continue;
        }
        let m = moments.m[k].data_mut();
        let v = moments.v[k].data_mut();
        let mut ratio = 0.0;
        for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *mi = b1 * *mi + ob1 * gi;
            *vi = b2 * *vi + ob2 * gi * gi;
            let vhat = (vi.f64() / bc2).max(cfg.eps * cfg.eps);
            ratio += gi.f64() * gi.f64() / vhat;
        }
        let rms = (ratio / g.numel() as f64).sqrt();
        let lr_t = lr / (rms / cfg.clip).max(1.0);
        let decay = T::lit(1.0 - lr_t * cfg.weight_decay);
        let p = params.values_mut()[k].data_mut();
        for ((pi, &mi), &vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
            let mhat = mi.f64() / bc1;
            let vhat = vi.f64() / bc2;
            let upd = T::lit(lr_t * mhat / (vhat.sqrt() + cfg.eps));
            *pi = *pi * decay - upd;
        }
    }
}

/// Held-out AUC at one point of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub report: MetricReport,
}

/// Hooks called from [`train`]. Every method defaults to a no-op.
pub trait TrainObserver<T: Real> {
    fn on_warmup_done(&mut self, _state: &ModelState<T>) -> Result<()> {
        Ok(())
    }
    fn on_log(&mut self, _entry: &LossBreakdown) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _point: &EvalPoint) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &ModelState<T>) -> Result<()> {
        Ok(())
    }
    /// Receives the last state whose loss was finite.
    fn on_divergence(&mut self, _last_good: &ModelState<T>) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl<T: Real> TrainObserver<T> for NoObserver {}

pub struct TrainData<'a> {
    pub train: &'a [ImageSample],
    /// Labelled split used for periodic evaluation.
    pub eval: Option<&'a [ImageSample]>,
}

pub struct TrainOutcome<T> {
    pub state: ModelState<T>,
    pub log: Vec<LossBreakdown>,
    pub evals: Vec<EvalPoint>,
}

impl<T> TrainOutcome<T> {
    /// Best minus final held-out AUC.
    pub fn auc_gap(&self) -> Option<f64> {
        let last = self.evals.last()?.report.auc;
        let best = self
            .evals
            .iter()
            .map(|e| e.report.auc)
            .fold(f64::MIN, f64::max);
        Some(best - last)
    }
}

const DATA_STREAM: u64 = 10;
const DROPOUT_STREAM: u64 = 11;
const WARMUP_DATA_STREAM: u64 = 12;
const WARMUP_DROPOUT_STREAM: u64 = 13;

/// Endless sequence of shuffled epochs.
struct Batcher {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize, rng: Rng) -> Self {
        Batcher {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Forward and backward over one batch; returns mean gradients and the mean
/// breakdown. The state is not modified.
pub fn batch_gradients<T: Real>(
    state: &ModelState<T>,
    samples: &[&ImageSample],
    opts: &LossOptions,
    dropout: &mut Rng,
) -> Result<(StepGrads<T>, LossBreakdown)> {
    let mut acc: Option<StepGrads<T>> = None;
    let mut parts = Vec::with_capacity(samples.len());
    for img in samples {
        let pass = forward_step(img, state, opts, Some(dropout))?;
        if !pass.breakdown.total.is_finite() {
            return Err(Error::Divergence {
                step: state.step + 1,
                value: pass.breakdown.total,
            });
        }
        parts.push(pass.breakdown.clone());
        let g = pass.backward()?;
        match acc.as_mut() {
            Some(a) => a.accumulate(&g),
            None => acc = Some(g),
        }
    }
    let mut grads = acc.ok_or_else(|| Error::Argument("empty batch".into()))?;
    grads.scale(1.0 / samples.len() as f64);
    let breakdown = LossBreakdown::mean(&parts, state.step + 1).expect("non-empty batch");
    Ok((grads, breakdown))
}

fn check_data(data: &TrainData<'_>) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if let Some(bad) = data.train.iter().find(|s| s.label.is_anomalous()) {
        return Err(Error::Config(format!(
            "training image {} is labelled anomalous",
            bad.id
        )));
    }
    Ok(())
}

/// Fresh state after the self-distillation warmup, in `config.mode`.
pub fn warmup<T: Real>(config: &TrainConfig, data: &TrainData<'_>) -> Result<ModelState<T>> {
    config.validate()?;
    check_data(data)?;
    let mut state = ModelState::init(&config.model, VariantMode::M1, config.seed)?;
    state.beta = config.beta;
    state.lambda = config.lambda;
    state.proto_kind = config.proto_kind;
    if config.warmup > 0 {
        let root = Rng::new(config.seed);
        let mut batcher = Batcher::new(data.train.len(), root.derive(WARMUP_DATA_STREAM));
        let mut dropout = root.derive(WARMUP_DROPOUT_STREAM);
        let mut opt = AdamW::new(config.adam, &state);
        let opts = config.loss_options();
        for _ in 0..config.warmup {
            let idx = batcher.next(config.batch);
            let batch: Vec<&ImageSample> = idx.iter().map(|&i| &data.train[i]).collect();
            let (grads, _) = batch_gradients(&state, &batch, &opts, &mut dropout)?;
            opt.step(&mut state, &grads, config.lr_head, config.lr_encoder)?;
        }
    }
    Ok(state.with_mode(config.mode))
}

/// Warmup followed by `config.iterations` steps of the variant's objective.
pub fn train<T: Real>(
    config: &TrainConfig,
    data: &TrainData<'_>,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    let state = warmup(config, data)?;
    observer.on_warmup_done(&state)?;
    train_from(state, config, data, observer)
}

fn frozen_contract<T: Real>(state: &ModelState<T>, grads: &StepGrads<T>) -> Result<()> {
    if grads.reference_norm() != 0.0 {
        return Err(Error::State(format!(
            "reference branch received gradient norm {}",
            grads.reference_norm()
        )));
    }
    if !state.mode.flags().unfrozen && grads.encoder_norm() != 0.0 {
        return Err(Error::State(format!(
            "frozen encoder received gradient norm {}",
            grads.encoder_norm()
        )));
    }
    Ok(())
}

/// Runs the main phase from an already warmed-up state.
pub fn train_from<T: Real>(
    mut state: ModelState<T>,
    config: &TrainConfig,
    data: &TrainData<'_>,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    check_data(data)?;
    if state.mode != config.mode {
        return Err(Error::State(format!(
            "state is in mode {} but the config asks for {}",
            state.mode, config.mode
        )));
    }
    if state.mode.flags().dual_encoder {
        let reference = state
            .reference
            .as_ref()
            .ok_or_else(|| Error::State(format!("{} needs a reference encoder", state.mode)))?;
        state.encoder.params.check_compatible(reference)?;
    }
    state.beta = config.beta;
    state.lambda = config.lambda;
    state.proto_kind = config.proto_kind;
    let root = Rng::new(config.seed);
    let mut batcher = Batcher::new(data.train.len(), root.derive(DATA_STREAM));
    let mut dropout = root.derive(DROPOUT_STREAM);
    let mut opt = AdamW::new(config.adam, &state);
    let opts = config.loss_options();
    let mut log = Vec::new();
    let mut evals = Vec::new();
    for it in 1..=config.iterations {
        let idx = batcher.next(config.batch);
        let batch: Vec<&ImageSample> = idx.iter().map(|&i| &data.train[i]).collect();
        let attempt = batch_gradients(&state, &batch, &opts, &mut dropout).and_then(|(g, b)| {
            frozen_contract(&state, &g)?;
            if !g.is_finite() {
                return Err(Error::numeric(format!("step {it}"), "non-finite gradient"));
            }
            Ok((g, b))
        });
        let (grads, breakdown) = match attempt {
            Ok(r) => r,
            Err(e @ (Error::Divergence { .. } | Error::Numeric { .. })) => {
                log::warn!("training diverged at step {it}: {e}");
                observer.on_divergence(&state)?;
                return Err(match e {
                    Error::Divergence { value, .. } => Error::Divergence { step: it, value },
                    _ => Error::Divergence {
                        step: it,
                        value: f64::NAN,
                    },
                });
            }
            Err(e) => return Err(e),
        };
        opt.step(&mut state, &grads, config.lr_head, config.lr_encoder)?;
        if state.mode.flags().momentum {
            let online = &state.encoder.params;
            let target = state.reference.as_mut().expect("checked above");
            ema_update(online, target, config.beta)?;
        }
        state.step = it;
        if it % config.log_interval == 0 || it == config.iterations {
            observer.on_log(&breakdown)?;
            log.push(breakdown);
        }
        if let Some(eval) = data.eval {
            if config.eval_interval > 0
                && (it % config.eval_interval == 0 || it == config.iterations)
            {
                let (_, report) = evaluate(&state, eval, &config.scoring)?;
                let point = EvalPoint { step: it, report };
                observer.on_eval(&point)?;
                evals.push(point);
            }
        }
        if config.checkpoint_interval > 0 && it % config.checkpoint_interval == 0 {
            observer.on_checkpoint(&state)?;
        }
    }
    Ok(TrainOutcome { state, log, evals })
}

/// Mean assignment statistics of `state` over `samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentSummary {
    pub entropy: f64,
    pub max_share: f64,
    /// Token counts per prototype, summed over samples.
    pub histogram: Vec<usize>,
}

pub fn assignment_summary<T: Real>(
    state: &ModelState<T>,
    samples: &[ImageSample],
) -> Result<AssignmentSummary> {
    let m = state.config.prototypes.count;
    let mut histogram = vec![0; m];
    let (mut entropy, mut share) = (0.0, 0.0);
    for s in samples {
        let (_, table) = state.inspect(s)?;
        let counts = assignment_histogram(&table, m);
        entropy += assignment_entropy(&counts)?;
        share += max_share(&counts);
        for (h, c) in histogram.iter_mut().zip(&counts) {
            *h += c;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(AssignmentSummary {
        entropy: entropy / n,
        max_share: share / n,
        histogram,
    })
}

/// Least-squares slope of a moving-average-smoothed series over its final
/// `fraction` of points.
pub fn tail_slope(steps: &[f64], values: &[f64], fraction: f64, window: usize) -> Result<f64> {
    if steps.len() != values.len() || steps.len() < 2 {
        return Err(Error::Argument("need at least two aligned points".into()));
    }
    let window = window.max(1);
    let smoothed: Vec<f64> = (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(window - 1);
            values[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64
        })
        .collect();
    let start = ((1.0 - fraction) * steps.len() as f64).floor() as usize;
    let start = start.min(steps.len() - 2);
    let (xs, ys) = (&steps[start..], &smoothed[start..]);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Argument("steps must not all coincide".into()));
    }
    Ok(sxy / sxx)
}

/// One training run of the collapse comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CollapseRun {
    pub seed: u64,
    pub kind: ProtoLossKind,
    pub summary: AssignmentSummary,
    /// Smoothed prototype-loss slope over the last 20% of logged steps.
    pub tail_slope: f64,
    pub log: Vec<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    pub runs: Vec<CollapseRun>,
    pub entropy_daa: f64,
    pub entropy_coh: f64,
}

pub const TAIL_FRACTION: f64 = 0.2;
pub const TAIL_WINDOW: usize = 5;

pub fn proto_tail_slope(log: &[LossBreakdown]) -> Result<f64> {
    let steps: Vec<f64> = log.iter().map(|b| b.step as f64).collect();
    let values: Vec<f64> = log.iter().map(|b| b.proto).collect();
    tail_slope(&steps, &values, TAIL_FRACTION, TAIL_WINDOW)
}

/// Trains `base` once per seed with each prototype loss and compares the
/// end-of-training assignment entropy over the training split.
pub fn collapse_experiment<T: Real>(
    base: &TrainConfig,
    data: &TrainData<'_>,
    seeds: &[u64],
) -> Result<CollapseReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for kind in [ProtoLossKind::Daa, ProtoLossKind::Coherence] {
            let config = TrainConfig {
                seed,
                proto_kind: kind,
                ..base.clone()
            };
            let out = train::<T>(&config, data, &mut NoObserver)?;
            runs.push(CollapseRun {
                seed,
                kind,
                summary: assignment_summary(&out.state, data.train)?,
                tail_slope: proto_tail_slope(&out.log)?,
                log: out.log,
            });
        }
    }
    let mean = |k: ProtoLossKind| {
        let xs: Vec<f64> = runs
            .iter()
            .filter(|r| r.kind == k)
            .map(|r| r.summary.entropy)
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    Ok(CollapseReport {
        entropy_daa: mean(ProtoLossKind::Daa),
        entropy_coh: mean(ProtoLossKind::Coherence),
        runs,
    })
}
