//! Optimization loop: batch mixing, AdamW with warmup-cosine schedule, budget
//! accounting, metrics logging and resumable checkpoints.

mod ledger;
mod mix;
mod optim;
mod schedule;

pub use ledger::BudgetLedger;
pub use mix::{Batch, BatchKind, BatchStream, MixRatio, StreamConfig, StreamState};
pub use optim::{adamw_step, clip_grad_norm, global_norm, AdamState, AdamWConfig};
pub use schedule::{lr_at, LrSchedule};

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Utterance;
use crate::interleave::{InterleaveConfig, InterleaveError};
use crate::model::{Model, ModelError};
use crate::patching::PatchingConfig;
use crate::tensor::{Checkpoint, Graph, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {message}")]
    Divergence { step: u64, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("data budget exhausted after {tokens} tokens")]
    EndOfBudget { tokens: u64 },
}

impl From<InterleaveError> for TrainError {
    fn from(e: InterleaveError) -> Self {
        Self::Model(e.into())
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

impl From<crate::patching::PatchError> for TrainError {
    fn from(e: crate::patching::PatchError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// What ends a run: a fixed number of steps with identical unit capacity per
/// step, or a raw-token budget (the corpus is re-epoched as needed).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Budget {
    #[default]
    Compute,
    Data { tokens: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub optim: AdamWConfig,
    pub batch_rows: usize,
    /// Global units per row.
    pub context_len: usize,
    pub ratio: MixRatio,
    pub budget: Budget,
    pub patching: PatchingConfig,
    pub interleave: InterleaveConfig,
    pub seed: u64,
    /// Round weights and moments to f32 after every update.
    pub f32_master: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    /// Depth of the batch queue filled by the data thread.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::default(),
            optim: AdamWConfig::default(),
            batch_rows: 8,
            context_len: 512,
            ratio: MixRatio::default(),
            budget: Budget::Compute,
            patching: PatchingConfig::default(),
            interleave: InterleaveConfig::default(),
            seed: 0,
            f32_master: true,
            log_every: 1,
            checkpoint_every: 0,
            eval_every: 0,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        let s = &self.schedule;
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return bad(format!("lr {} must be positive", s.lr));
        }
        if s.warmup >= s.total {
            return bad(format!("warmup {} must be below total steps {}", s.warmup, s.total));
        }
        if !(s.min_lr_ratio > 0.0 && s.min_lr_ratio <= 1.0) {
            return bad(format!("min_lr_ratio {} outside (0, 1]", s.min_lr_ratio));
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if o.eps <= 0.0 || o.weight_decay < 0.0 || o.grad_clip < 0.0 {
            return bad("eps must be positive; weight_decay and grad_clip non-negative".into());
        }
        if self.batch_rows == 0 {
            return bad("batch_rows must be positive".into());
        }
        if self.context_len < 8 {
            return bad(format!("context_len {} is below 8", self.context_len));
        }
        self.ratio.validate()?;
        self.patching.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    fn stream(&self) -> StreamConfig {
        StreamConfig {
            rows: self.batch_rows,
            context_len: self.context_len,
            ratio: self.ratio,
            patching: self.patching,
            interleave: self.interleave,
            seed: self.seed,
            max_tokens: match self.budget {
                Budget::Compute => None,
                Budget::Data { tokens } => Some(tokens),
            },
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Steps completed, this one included.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_text: Option<f64>,
    pub loss_speech: Option<f64>,
    pub grad_norm: f64,
    pub kind: BatchKind,
    /// Cumulative global units.
    pub units: u64,
    /// Cumulative raw tokens.
    pub tokens: u64,
    pub p_u: f64,
    pub aligned: usize,
    pub sequences: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    step: u64,
    adam_t: u64,
    ledger: BudgetLedger,
    stream: StreamState,
    config: TrainConfig,
}

/// Metric values produced by an eval hook, keyed by name.
pub type EvalMetrics = Vec<(String, f64)>;

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub ledger: BudgetLedger,
    pub end_of_budget: bool,
    pub last: Option<StepReport>,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub ledger: BudgetLedger,
    step: u64,
    stream: BatchStream,
}

impl Trainer {
    pub fn new(mut model: Model, cfg: TrainConfig, corpus: Arc<Vec<Utterance>>) -> Result<Self> {
        cfg.validate()?;
        if cfg.f32_master {
            model.params.round_to_f32();
        }
        let stream = BatchStream::new(corpus, &model, cfg.stream())?;
        Ok(Self {
            model,
            cfg,
            adam: AdamState::default(),
            ledger: BudgetLedger::default(),
            step: 0,
            stream,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn stream_state(&self) -> StreamState {
        self.stream.state()
    }

    /// Draws the next batch and trains on it; `None` once the data budget is spent.
    pub fn step(&mut self) -> Result<Option<StepReport>> {
        match self.stream.next_batch()? {
            Some(b) => self.apply(&b).map(Some),
            None => Ok(None),
        }
    }

    /// Loss of `batch` under the current weights, without updating them.
    pub fn loss_on(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, false);
        let loss = self.model.batch_loss(&mut g, &p, &batch.rows)?;
        Ok(g.value(loss.total).item())
    }

    /// One optimizer step on `batch`. On divergence the weights are left untouched.
    pub fn apply(&mut self, batch: &Batch) -> Result<StepReport> {
        let lr = lr_at(self.step, &self.cfg.schedule);
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let loss = self.model.batch_loss(&mut g, &p, &batch.rows)?;
        let total = g.value(loss.total).item();
        if !total.is_finite() {
            return Err(TrainError::Divergence {
                step: self.step,
                message: format!("loss is {total}"),
            });
        }
        g.backward(loss.total)?;
        let mut grads = p.grads(&g);
        let (params_before, adam_before) = (self.model.params.clone(), self.adam.clone());
        let grad_norm = match adamw_step(&mut self.model.params, &mut grads, &mut self.adam, lr, &self.cfg.optim) {
            Ok(n) => n,
            Err(TrainError::Divergence { message, .. }) => {
                self.model.params = params_before;
                self.adam = adam_before;
                return Err(TrainError::Divergence {
                    step: self.step,
                    message,
                });
            }
            Err(e) => return Err(e),
        };
        if self.cfg.f32_master {
            self.model.params.round_to_f32();
            self.adam.round_to_f32();
        }
        let vocab = self.model.text_vocab();
        self.ledger.iterations += 1;
        self.ledger.sequences += batch.sequences as u64;
        self.ledger.aligned_sequences += batch.aligned as u64;
        self.ledger.truncated_sequences += batch.truncated as u64;
        for r in &batch.rows {
            self.ledger.record_row(r, self.cfg.context_len, &vocab);
        }
        self.stream.set_state(batch.state);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            lr,
            loss: total,
            loss_text: loss.text.map(|v| g.value(v).item()),
            loss_speech: loss.speech.map(|v| g.value(v).item()),
            grad_norm,
            kind: batch.kind,
            units: self.ledger.units,
            tokens: self.ledger.raw_tokens(),
            p_u: batch.p_u,
            aligned: batch.aligned,
            sequences: batch.sequences,
        })
    }

    /// Writes `model.json` (+ params), `optim.m.json`, `optim.v.json` and
    /// `state.json` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        self.model.save(&dir.join("model.json"))?;
        for (file, moments) in [("optim.m.json", &self.adam.m), ("optim.v.json", &self.adam.v)] {
            let store = moment_store(&self.model.params, moments)?;
            Checkpoint::save_store(&dir.join(file), &store)?;
        }
        let state = TrainerState {
            step: self.step,
            adam_t: self.adam.t,
            ledger: self.ledger,
            stream: self.stream.state(),
            config: self.cfg.clone(),
        };
        let path = dir.join("state.json");
        let json = serde_json::to_string_pretty(&state).map_err(|e| io_err(&path, e))?;
        std::fs::write(&path, json).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save_checkpoint`]. With f32
    /// master weights the next step is bit-identical to an uninterrupted run.
    pub fn resume(dir: &Path, corpus: Arc<Vec<Utterance>>) -> Result<Self> {
        let model = Model::load(&dir.join("model.json"))?;
        let path = dir.join("state.json");
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let state: TrainerState = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
        let mut t = Self::new(model, state.config, corpus)?;
        let load = |file: &str| -> Result<BTreeMap<String, Vec<f64>>> {
            let store = Checkpoint::load_store(&dir.join(file))?;
            Ok(store.iter().map(|(k, v)| (k.clone(), v.data().to_vec())).collect())
        };
        t.adam = AdamState {
            m: load("optim.m.json")?,
            v: load("optim.v.json")?,
            t: state.adam_t,
        };
        t.step = state.step;
        t.ledger = state.ledger;
        t.stream.set_state(state.stream);
        Ok(t)
    }

    fn finished(&self) -> bool {
        matches!(self.cfg.budget, Budget::Compute) && self.step >= self.cfg.schedule.total
    }

    /// Trains until the budget is spent. With `out`, writes `metrics.csv`,
    /// `eval.csv` (when a hook is given), periodic checkpoints under
    /// `checkpoints/step-N`, the final checkpoint under `checkpoint/`, and on
    /// divergence a `last-good/` checkpoint before returning the error.
    pub fn run(
        &mut self,
        out: Option<&Path>,
        mut hook: Option<&mut dyn FnMut(u64, &Model) -> EvalMetrics>,
    ) -> Result<TrainOutcome> {
        let mut logs = match out {
            Some(dir) => Some(Logs::create(dir, hook.is_some())?),
            None => None,
        };
        let depth = self.cfg.prefetch.max(1);
        let producer = self.stream.clone();
        let mut last = None;
        let mut end_of_budget = false;
        let result = std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel(depth);
            scope.spawn(move || {
                let mut s = producer;
                loop {
                    let item = s.next_batch().transpose();
                    let stop = !matches!(item, Some(Ok(_)));
                    if tx.send(item).is_err() || stop {
                        break;
                    }
                }
            });
            while !self.finished() {
                let batch = match rx.recv() {
                    Ok(Some(b)) => b?,
                    Ok(None) | Err(_) => {
                        end_of_budget = true;
                        break;
                    }
                };
                let report = match self.apply(&batch) {
                    Ok(r) => r,
                    Err(e @ TrainError::Divergence { .. }) => {
                        if let Some(dir) = out {
                            self.save_checkpoint(&dir.join("last-good"))?;
                        }
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                if let Some(l) = logs.as_mut() {
                    if self.cfg.log_every > 0 && (report.step % self.cfg.log_every == 0 || report.step == 1) {
                        l.metric(&report)?;
                    }
                }
                if let Some(h) = hook.as_mut() {
                    if self.cfg.eval_every > 0 && report.step % self.cfg.eval_every == 0 {
                        let metrics = h(report.step, &self.model);
                        if let Some(l) = logs.as_mut() {
                            l.eval(report.step, &metrics)?;
                        }
                    }
                }
                if let Some(dir) = out {
                    if self.cfg.checkpoint_every > 0 && report.step % self.cfg.checkpoint_every == 0 {
                        self.save_checkpoint(&dir.join("checkpoints").join(format!("step-{}", report.step)))?;
                    }
                }
                last = Some(report);
            }
            drop(rx);
            Ok(())
        });
        result?;
        if let Some(dir) = out {
            self.save_checkpoint(&dir.join("checkpoint"))?;
        }
        Ok(TrainOutcome {
            steps: self.step,
            ledger: self.ledger,
            end_of_budget,
            last,
        })
    }
}

fn moment_store(params: &ParamStore, moments: &BTreeMap<String, Vec<f64>>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, p) in params.iter() {
        let data = moments.get(name).cloned().unwrap_or_else(|| vec![0.0; p.numel()]);
        store.insert(name.clone(), Tensor::new(p.shape().to_vec(), data)?);
    }
    Ok(store)
}

struct Logs {
    metrics: csv::Writer<File>,
    eval: Option<(PathBuf, csv::Writer<File>)>,
    path: PathBuf,
}

impl Logs {
    fn create(dir: &Path, with_eval: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join("metrics.csv");
        let mut metrics = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        metrics
            .write_record(["step", "lr", "loss_text", "loss_speech", "units", "tokens", "p_u"])
            .map_err(|e| io_err(&path, e))?;
        let eval = if with_eval {
            let p = dir.join("eval.csv");
            let mut w = csv::Writer::from_path(&p).map_err(|e| io_err(&p, e))?;
            w.write_record(["step", "metric", "value"]).map_err(|e| io_err(&p, e))?;
            Some((p, w))
        } else {
            None
        };
        Ok(Self { metrics, eval, path })
    }

    fn metric(&mut self, r: &StepReport) -> Result<()> {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        self.metrics
            .write_record([
                r.step.to_string(),
                r.lr.to_string(),
                opt(r.loss_text),
                opt(r.loss_speech),
                r.units.to_string(),
                r.tokens.to_string(),
                r.p_u.to_string(),
            ])
            .and_then(|_| self.metrics.flush().map_err(Into::into))
            .map_err(|e| io_err(&self.path, e))
    }

    fn eval(&mut self, step: u64, metrics: &EvalMetrics) -> Result<()> {
        let Some((path, w)) = self.eval.as_mut() else {
            return Ok(());
        };
        for (name, v) in metrics {
            w.write_record([step.to_string(), name.clone(), v.to_string()])
                .map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

/// Builds a trainer and runs it to completion.
pub fn train(model: Model, cfg: TrainConfig, corpus: Arc<Vec<Utterance>>, out: Option<&Path>) -> Result<(Model, TrainOutcome)> {
    let mut t = Trainer::new(model, cfg, corpus)?;
    let outcome = t.run(out, None)?;
    Ok((t.model, outcome))
}
