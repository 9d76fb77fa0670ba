//! Experiment runner: Adam + cross-entropy training with the reference-batch
//! epoch budget, majority-vote evaluation, the five-window accuracy metric,
//! Monte-Carlo repetition, and the reference-batch-size sweep.
//!
//! Epoch semantics for patched variants: one epoch makes `m` cyclic passes over
//! the shuffled data minibatches — each optimizer step pairs the next data batch
//! with the next reference batch — so an epoch touches all `m` reference batches
//! and the total step count stays compute-matched with the baseline
//! (`epochs_base/m` epochs × `m·n_db` steps = `epochs_base · n_db`).

use crate::data::{one_hot, ModalDataset, SplitViews};
use crate::error::{Result, TapError};
use crate::graph::{cross_entropy_mean, Graph};
use crate::model::{Model, ModelSpec, Variant};
use crate::scalar::{cast, to_f64, Scalar};
use crate::stats;
use crate::tap::{default_norm_const, BankMode, ReferenceBank};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

// ── Configuration ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// Highest 5-epoch moving average of validation accuracy.
    Best5,
    /// The verbatim sentence: lowest 5-epoch moving average.
    LiteralLowest5,
}

impl std::str::FromStr for MetricMode {
    type Err = TapError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best5" => Ok(MetricMode::Best5),
            "literal_lowest5" => Ok(MetricMode::LiteralLowest5),
            other => Err(TapError::Config(format!(
                "unknown metric mode '{other}' (expected best5 or literal_lowest5)"
            ))),
        }
    }
}

impl std::fmt::Display for MetricMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricMode::Best5 => "best5",
            MetricMode::LiteralLowest5 => "literal_lowest5",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub data_batch: usize,
    pub ref_batch: usize,
    pub epochs_base: usize,
    pub mc_runs: usize,
    pub seed: u64,
    pub metric_mode: MetricMode,
    pub n_labeled: usize,
    pub n_reference: usize,
    /// Epoch interval between validation evaluations (1 = every epoch).
    pub eval_every: usize,
    /// Worker threads for Monte-Carlo repetition (results are independent of
    /// this value; runs derive all randomness from their own index).
    pub jobs: usize,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    /// Attention temperature; `None` → the `√d_h·(n′_z/m)^{−1/d_h}` heuristic.
    pub norm_const: Option<f64>,
    /// Per-modality z-scoring override; `None` → the dataset's default.
    pub standardize: Option<bool>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            data_batch: 100,
            ref_batch: 250,
            epochs_base: 1000,
            mc_runs: 20,
            seed: 0,
            metric_mode: MetricMode::Best5,
            n_labeled: 200,
            n_reference: 1000,
            eval_every: 1,
            jobs: 1,
            hidden_dim: 64,
            dropout_rate: 0.5,
            norm_const: None,
            standardize: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TapError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(TapError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.data_batch == 0 || self.ref_batch == 0 || self.epochs_base == 0 {
            return Err(TapError::Config(
                "batch sizes and epochs must be positive".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(TapError::Config("eval_every must be ≥ 1".into()));
        }
        if self.mc_runs < 2 {
            return Err(TapError::Config("mc_runs must be ≥ 2".into()));
        }
        if self.jobs == 0 {
            return Err(TapError::Config("jobs must be ≥ 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(TapError::Config("hidden_dim must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TapError::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if let Some(c) = self.norm_const {
            if !(c > 0.0) {
                return Err(TapError::Config("norm_const must be positive".into()));
            }
        }
        Ok(())
    }
}

// ── Adam ──────────────────────────────────────────────────────────────────────

/// Adam with bias correction. Moment accumulators are f64 regardless of the
/// model scalar so long runs do not lose mass to rounding.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(block_sizes: &[usize], cfg: &TrainConfig) -> Adam {
        Adam {
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn for_model<F: Scalar>(model: &mut Model<F>, cfg: &TrainConfig) -> Adam {
        let sizes: Vec<usize> = model.params_mut().iter().map(|t| t.numel()).collect();
        Adam::new(&sizes, cfg)
    }

    /// One update from the gradients stored on the tensors; clears them after.
    pub fn step<F: Scalar>(&mut self, params: &mut [&mut Tensor<F>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/model block mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (bi, p) in params.iter_mut().enumerate() {
            let grad = p
                .grad
                .take()
                .expect("parameter missing gradient before Adam step");
            let (m, v) = (&mut self.m[bi], &mut self.v[bi]);
            for (ei, &g) in grad.iter().enumerate() {
                let g = to_f64(g);
                m[ei] = self.beta1 * m[ei] + (1.0 - self.beta1) * g;
                v[ei] = self.beta2 * v[ei] + (1.0 - self.beta2) * g * g;
                let mhat = m[ei] / bc1;
                let vhat = v[ei] / bc2;
                let delta = self.lr * mhat / (vhat.sqrt() + self.eps);
                let cur = to_f64(p.data[ei]);
                p.data[ei] = cast::<F>(cur - delta);
            }
            p.grad = Some(grad);
            p.zero_grad();
        }
    }
}

// ── Run artifacts ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub dataset: String,
    pub run_seed: u64,
    pub train_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub final_metric: f64,
    pub metric_mode: MetricMode,
    pub epochs: usize,
    pub steps: usize,
    pub wall_secs: f64,
    pub bank_mode: Option<BankMode>,
}

/// Five-window metric over the validation history.
pub fn final_metric(history: &[f64], mode: MetricMode) -> Result<f64> {
    const W: usize = 5;
    if history.len() < W {
        return Err(TapError::Config(format!(
            "validation history has {} points; the metric window needs {W}",
            history.len()
        )));
    }
    let means = history.windows(W).map(|w| w.iter().sum::<f64>() / W as f64);
    Ok(match mode {
        MetricMode::Best5 => means.fold(f64::NEG_INFINITY, f64::max),
        MetricMode::LiteralLowest5 => means.fold(f64::INFINITY, f64::min),
    })
}

// ── Evaluation ────────────────────────────────────────────────────────────────

fn argmax_row<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Majority vote with ties broken toward the lowest class index.
pub fn majority_vote(votes: &[usize], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate().skip(1) {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Ensemble accuracy on `(x, y)`: one argmax vote per reference batch, majority
/// across batches; plain argmax when no bank is supplied.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    x: &[F],
    y: &[usize],
    bank: Option<&ReferenceBank<F>>,
) -> Result<f64> {
    let d_x = model.spec.input_dim;
    let classes = model.spec.num_classes;
    let n = y.len();
    if n == 0 || x.len() != n * d_x {
        return Err(TapError::Data(format!(
            "evaluation set shape invalid: {} values for {n}×{d_x}",
            x.len()
        )));
    }
    const CHUNK: usize = 1024;
    let mut correct = 0usize;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let rows = end - start;
        let xt = Tensor::from_vec(x[start * d_x..end * d_x].to_vec(), &[rows, d_x]);
        let preds: Vec<usize> = match bank {
            None => {
                let logits = model.logits(&xt, None)?;
                (0..rows)
                    .map(|r| argmax_row(&logits.data[r * classes..(r + 1) * classes]))
                    .collect()
            }
            Some(bank) => {
                let m = bank.num_batches();
                let mut votes = vec![0usize; rows * m];
                for bi in 0..m {
                    let (zb, s) = bank.batch(bi);
                    let logits = model.logits(&xt, Some((zb, s)))?;
                    for r in 0..rows {
                        votes[r * m + bi] =
                            argmax_row(&logits.data[r * classes..(r + 1) * classes]);
                    }
                }
                (0..rows)
                    .map(|r| majority_vote(&votes[r * m..(r + 1) * m], classes))
                    .collect()
            }
        };
        for (r, &p) in preds.iter().enumerate() {
            if p == y[start + r] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

// ── Training loop ─────────────────────────────────────────────────────────────

/// Train one model on one split. The reference bank must be present exactly for
/// the patched variants; its batching determines the epoch budget
/// `epochs_base / m`. Runs are bitwise deterministic in `(cfg, run_seed)`.
pub fn train_one<F: Scalar>(
    model: &mut Model<F>,
    views: &SplitViews<F>,
    bank: Option<&ReferenceBank<F>>,
    cfg: &TrainConfig,
    run_seed: u64,
) -> Result<(RunResult, Adam)> {
    cfg.validate()?;
    if model.spec.variant.needs_refs() != bank.is_some() {
        return Err(TapError::Config(format!(
            "variant {} {} a reference bank",
            model.spec.variant,
            if model.spec.variant.needs_refs() {
                "requires"
            } else {
                "does not accept"
            },
        )));
    }
    let started = std::time::Instant::now();
    let d_x = views.d_x();
    let classes = views.class_count();
    let n_lab = views.n_labeled();
    if n_lab == 0 {
        return Err(TapError::Data("no labeled rows".into()));
    }
    let m = bank.map(|b| b.num_batches()).unwrap_or(1);
    let epochs = (cfg.epochs_base / m).max(1);
    let n_db = n_lab.div_ceil(cfg.data_batch);

    let mut adam = Adam::for_model(model, cfg);
    let mut train_loss = Vec::with_capacity(epochs);
    let mut val_acc = Vec::new();
    let mut global_step = 0usize;

    let mut row_order: Vec<usize> = (0..n_lab).collect();
    for epoch in 0..epochs {
        let mut rng_e = stats::rng_for(run_seed, "epoch", epoch as u64);
        row_order.shuffle(&mut rng_e);
        let mut ref_order: Vec<usize> = (0..m).collect();
        ref_order.shuffle(&mut rng_e);

        let mut loss_sum = 0.0;
        let steps_this_epoch = m * n_db;
        for s in 0..steps_this_epoch {
            let db = s % n_db;
            let rows = &row_order[db * cfg.data_batch..((db + 1) * cfg.data_batch).min(n_lab)];
            let bs = rows.len();
            let mut xb = Vec::with_capacity(bs * d_x);
            let mut yb = Vec::with_capacity(bs);
            for &r in rows {
                xb.extend_from_slice(&views.labeled_x()[r * d_x..(r + 1) * d_x]);
                yb.push(views.labeled_y()[r]);
            }
            let onehot: Vec<F> = one_hot(&yb, classes);

            let mut g = Graph::<F>::new();
            let xn = g.leaf(&xb, &[bs, d_x], false);
            let yn = g.leaf(&onehot, &[bs, classes], false);
            let zn = match bank {
                Some(b) => {
                    let (zb, srows) = b.batch(ref_order[s % m]);
                    Some(g.leaf(zb, &[srows, views.d_z()], false))
                }
                None => None,
            };
            let mut drop_rng = stats::rng_for(run_seed, "dropout", global_step as u64);
            let (logits, handles) = model.forward_graph(&mut g, xn, zn, true, &mut drop_rng)?;
            let loss = cross_entropy_mean(&mut g, logits, yn);
            let loss_v = to_f64(g.value(loss)[0]);
            if !loss_v.is_finite() {
                return Err(TapError::Numeric(format!(
                    "non-finite training loss {loss_v} (variant {}, lr {}, epoch {epoch}, \
                     data batch {db}, reference batch {}, step {global_step})",
                    model.spec.variant,
                    cfg.lr,
                    if m > 1 { ref_order[s % m] as i64 } else { -1 },
                )));
            }
            loss_sum += loss_v;
            g.backward(loss);
            {
                let mut params = model.params_mut();
                for (t, &h) in params.iter_mut().zip(handles.iter()) {
                    let grad = g.grad(h).expect("trainable parameter has a gradient");
                    t.accumulate_grad(grad);
                }
                adam.step(&mut params);
            }
            global_step += 1;
        }
        train_loss.push(loss_sum / steps_this_epoch as f64);

        if epoch % cfg.eval_every == 0 || epoch + 1 == epochs {
            let acc = evaluate(model, views.eval_x(), views.eval_y(), bank)?;
            val_acc.push(acc);
        }
    }

    let metric = final_metric(&val_acc, cfg.metric_mode)?;
    Ok((
        RunResult {
            variant: model.spec.variant,
            dataset: String::new(),
            run_seed,
            train_loss,
            val_acc,
            final_metric: metric,
            metric_mode: cfg.metric_mode,
            epochs,
            steps: global_step,
            wall_secs: started.elapsed().as_secs_f64(),
            bank_mode: bank.map(|b| b.mode()),
        },
        adam,
    ))
}

// ── Monte-Carlo repetition ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub variant: Variant,
    pub mean: f64,
    pub std_err: f64,
    pub metrics: Vec<f64>,
    pub failed: Vec<String>,
}

/// Execute one Monte-Carlo run of one variant: fresh split, fresh model, fresh
/// bank (noise regenerated per run for the control), full training.
pub fn run_once<F: Scalar>(
    ds: &ModalDataset<F>,
    variant: Variant,
    cfg: &TrainConfig,
    run_idx: usize,
) -> Result<RunResult> {
    run_once_full(ds, variant, cfg, run_idx).map(|(r, _, _)| r)
}

/// [`run_once`] variant that also hands back the trained model and optimizer
/// state (for checkpointing by callers).
pub fn run_once_full<F: Scalar>(
    ds: &ModalDataset<F>,
    variant: Variant,
    cfg: &TrainConfig,
    run_idx: usize,
) -> Result<(RunResult, Model<F>, Adam)> {
    let run_seed = stats::derive_seed(cfg.seed, "mc-run", run_idx as u64);
    let plan = crate::data::make_split(
        ds.len(),
        stats::derive_seed(run_seed, "split", 0),
        cfg.n_labeled,
        cfg.n_reference,
    )?;
    let standardize = cfg.standardize.unwrap_or(ds.name.standardize_by_default());
    let views = SplitViews::build(ds, &plan, standardize)?;

    let bank = if variant.needs_refs() {
        let batch = if variant == Variant::TapNoBatch {
            views.n_reference()
        } else {
            cfg.ref_batch
        };
        let real = ReferenceBank::new(
            views.reference_z().to_vec(),
            views.n_reference(),
            views.d_z(),
            batch,
        )?;
        Some(if variant == Variant::ControlGroup {
            real.make_noise_bank(stats::derive_seed(run_seed, "noise", 0))
        } else {
            real
        })
    } else {
        None
    };

    let m = bank.as_ref().map(|b| b.num_batches()).unwrap_or(1);
    let mut spec = ModelSpec::new(variant, views.d_x(), views.d_z(), views.class_count());
    spec.hidden_dim = cfg.hidden_dim;
    spec.dropout_rate = cfg.dropout_rate;
    spec.norm_const = cfg
        .norm_const
        .unwrap_or_else(|| default_norm_const(spec.tap_hidden, views.n_reference(), m));
    let mut model: Model<F> =
        Model::build(spec, stats::derive_seed(run_seed, "model-init-seed", 0))?;
    let (mut result, adam) = train_one(&mut model, &views, bank.as_ref(), cfg, run_seed)?;
    result.dataset = ds.name.to_string();
    Ok((result, model, adam))
}

fn summarize(variant: Variant, outcomes: Vec<Result<RunResult>>) -> McSummary {
    let mut metrics = Vec::new();
    let mut failed = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => metrics.push(r.final_metric),
            Err(e) => failed.push(e.to_string()),
        }
    }
    let mean = if metrics.is_empty() {
        f64::NAN
    } else {
        stats::mean(&metrics)
    };
    let std_err = if metrics.len() >= 2 {
        stats::std_err(&metrics)
    } else {
        f64::NAN
    };
    McSummary {
        variant,
        mean,
        std_err,
        metrics,
        failed,
    }
}

/// Monte-Carlo benchmark over a variant set. Every run derives its own seeds
/// from `(cfg.seed, run index)`, so results are identical for any `jobs` value.
pub fn monte_carlo<F: Scalar>(
    ds: &ModalDataset<F>,
    variants: &[Variant],
    cfg: &TrainConfig,
) -> Result<Vec<McSummary>> {
    cfg.validate()?;
    let mut summaries = Vec::with_capacity(variants.len());
    for &variant in variants {
        let outcomes = run_many(ds, variant, cfg);
        summaries.push(summarize(variant, outcomes));
    }
    Ok(summaries)
}

fn run_many<F: Scalar>(
    ds: &ModalDataset<F>,
    variant: Variant,
    cfg: &TrainConfig,
) -> Vec<Result<RunResult>> {
    let runs = cfg.mc_runs;
    let jobs = cfg.jobs.min(runs).max(1);
    if jobs == 1 {
        return (0..runs).map(|r| run_once(ds, variant, cfg, r)).collect();
    }
    let mut slots: Vec<Option<Result<RunResult>>> = (0..runs).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut pending: Vec<(usize, &mut Option<Result<RunResult>>)> =
            slots.iter_mut().enumerate().collect();
        let mut shards: Vec<Vec<(usize, &mut Option<Result<RunResult>>)>> =
            (0..jobs).map(|_| Vec::new()).collect();
        for (i, slot) in pending.drain(..) {
            shards[i % jobs].push((i, slot));
        }
        for shard in shards {
            scope.spawn(move || {
                for (run_idx, slot) in shard {
                    *slot = Some(run_once(ds, variant, cfg, run_idx));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("worker filled slot"))
        .collect()
}

// ── Reference-batch-size sweep ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub requested_size: usize,
    pub effective_size: usize,
    /// Unlabeled-to-labeled ratio `size / n_labeled`.
    pub ratio: f64,
    pub m: usize,
    pub epochs: usize,
    pub mean: f64,
    pub std_err: f64,
    pub metrics: Vec<f64>,
    pub failed: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub baseline: McSummary,
    pub warnings: Vec<String>,
}

pub const SWEEP_SIZES: [usize; 5] = [100, 200, 250, 500, 1000];

/// Accuracy-vs-ratio curve for the `tap` variant with a baseline reference row.
pub fn batch_size_sweep<F: Scalar>(
    ds: &ModalDataset<F>,
    sizes: &[usize],
    cfg: &TrainConfig,
) -> Result<SweepResult> {
    cfg.validate()?;
    if sizes.is_empty() {
        return Err(TapError::Config("sweep needs at least one size".into()));
    }
    let mut warnings = Vec::new();
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let effective = if size > cfg.n_reference {
            warnings.push(format!(
                "requested reference batch {size} exceeds bank size {}; clamped",
                cfg.n_reference
            ));
            cfg.n_reference
        } else {
            size
        };
        let mut point_cfg = cfg.clone();
        point_cfg.ref_batch = effective;
        let outcomes = run_many(ds, Variant::Tap, &point_cfg);
        let summary = summarize(Variant::Tap, outcomes);
        let m = cfg.n_reference.div_ceil(effective);
        points.push(SweepPoint {
            requested_size: size,
            effective_size: effective,
            ratio: size as f64 / cfg.n_labeled as f64,
            m,
            epochs: (cfg.epochs_base / m).max(1),
            mean: summary.mean,
            std_err: summary.std_err,
            metrics: summary.metrics,
            failed: summary.failed,
        });
    }
    let baseline_outcomes = run_many(ds, Variant::Baseline, cfg);
    Ok(SweepResult {
        points,
        baseline: summarize(Variant::Baseline, baseline_outcomes),
        warnings,
    })
}
