//! Training runs: build, optional transfer and freezing, then the loop
//! `forward -> loss -> backward -> clip -> AdamW`, with LIT observed once per
//! interval, JSON-lines metrics and periodic checkpoints.
//!
//! Step `s` in metrics and checkpoint names counts completed optimizer
//! updates: the loss logged at step `s` is measured with the parameters after
//! `s` updates, and `ckpt-{s}.xatl` holds those parameters.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{load_checkpoint, load_raw, save_checkpoint, store_from_raw, CheckpointMeta};
use crate::data::{eval_windows, ingest_corpus, next_batch, TokenStream, PAD};
use crate::error::{Error, Result};
use crate::model::{build_model, forward, ModelConfig, PRESETS};
use crate::optim::{
    adamw_step, clip_grad_norm, lr_at, AdamWConfig, LitConfig, LitEvent, LitState, OptimizerState, ScheduleConfig,
};
use crate::store::ParameterStore;
use crate::tensor::{DType, Scalar, Tensor};
use crate::transfer::{
    apply_transfer, build_transfer_plan, make_freeze_mask, ComponentSet, FreezeMask, FreezePolicy, TransferPlan,
};

/// A model given inline, by preset name, or as a path to a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Inline(ModelConfig),
    Named(String),
}

impl ModelSource {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSource::Inline(c) => {
                c.validate()?;
                Ok(c.clone())
            }
            ModelSource::Named(n) if PRESETS.contains(&n.as_str()) => ModelConfig::preset(n),
            ModelSource::Named(path) => ModelConfig::from_json_file(Path::new(path)),
        }
    }
}

fn default_log_interval() -> u64 {
    10
}
fn default_checkpoint_interval() -> u64 {
    500
}
fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}
fn default_weight_decay() -> f64 {
    AdamWConfig::default().weight_decay
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub model: ModelSource,
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub donor: Option<PathBuf>,
    #[serde(default)]
    pub component_sets: ComponentSet,
    #[serde(default)]
    pub freeze_policy: FreezePolicy,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default)]
    pub lit: LitConfig,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: u64,
    /// Global gradient-norm bound; `null` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Evaluate validation loss every this many steps (and at the end),
    /// appending to `eval.jsonl`.
    #[serde(default)]
    pub eval_interval: Option<u64>,
    /// Cap on validation tokens used by periodic evaluation.
    #[serde(default)]
    pub eval_tokens: Option<usize>,
}

impl TrainRunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        let positive = [
            ("batch_size", self.batch_size as u64),
            ("seq_len", self.seq_len as u64),
            ("log_interval", self.log_interval),
            ("checkpoint_interval", self.checkpoint_interval),
            ("lit.interval_steps", self.lit.interval_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.eval_interval == Some(0) {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if !self.component_sets.is_empty() && self.donor.is_none() {
            return Err(Error::Config("component_sets given without a donor checkpoint".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Mean training loss over the forwards since the previous record.
    pub loss: f64,
    pub lr: f64,
    pub frozen_params: usize,
    pub tokens_seen: u64,
    pub event: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub records: Vec<MetricRecord>,
    pub evals: Vec<EvalRecord>,
    pub unfreeze_step: Option<u64>,
    pub plan: TransferPlan,
}

impl RunSummary {
    pub fn loss_at(&self, step: u64) -> Option<f64> {
        self.records.iter().find(|r| r.step == step).map(|r| r.loss)
    }

    pub fn val_loss_at(&self, step: u64) -> Option<f64> {
        self.evals.iter().find(|r| r.step == step).map(|r| r.val_loss)
    }
}

fn nll_sum<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    tokens: &[usize],
    seq: usize,
    batch: usize,
) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    let windows = eval_windows(tokens, seq);
    let v = config.vocab_size;
    let (mut total, mut count) = (0.0f64, 0usize);
    for group in windows.chunks(batch.max(1)) {
        let b = group.len();
        let inputs: Vec<usize> = group.iter().flat_map(|w| w.0.iter().copied()).collect();
        let targets: Vec<usize> = group.iter().flat_map(|w| w.1.iter().copied()).collect();
        let mut g = Graph::new();
        let vars = g.load_params(store, false);
        let y = forward(&mut g, &vars, config, &inputs, b, seq)?;
        for (row, &t) in g.value(y).data().chunks_exact(v).zip(&targets) {
            if t == PAD {
                continue;
            }
            if t >= v {
                return Err(Error::TargetOutOfRange { id: t, vocab: v });
            }
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
            let lse = m + row.iter().map(|&x| (x.as_f64() - m).exp()).sum::<f64>().ln();
            total += lse - row[t].as_f64();
            count += 1;
        }
    }
    Ok((total, count))
}

/// Mean next-token NLL (nats) over non-overlapping windows of `seq` tokens
/// of `tokens`, computed in f64 from the model's logits. Windows are
/// evaluated `batch` at a time. At most `max_tokens` tokens are used.
pub fn evaluate_loss<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    tokens: &[usize],
    seq: usize,
    batch: usize,
    max_tokens: Option<usize>,
) -> Result<f64> {
    let tokens = match max_tokens {
        Some(n) => &tokens[..n.min(tokens.len())],
        None => tokens,
    };
    let (total, count) = nll_sum(store, config, tokens, seq, batch)?;
    Ok(total / count as f64)
}

/// `exp` of [`evaluate_loss`] over the whole of `tokens`.
pub fn evaluate_perplexity<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    tokens: &[usize],
    seq: usize,
) -> Result<f64> {
    Ok(evaluate_loss(store, config, tokens, seq, 8, None)?.exp())
}

/// Perplexity over `tokens` scored predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub ppl: f64,
    pub tokens: usize,
}

/// Perplexity of a saved model on the whole of `corpus` (both splits).
/// Windows are `seq_len` tokens, defaulting to the model's context length;
/// `max_tokens` truncates the corpus.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    corpus: &Path,
    seq_len: Option<usize>,
    max_tokens: Option<usize>,
) -> Result<Perplexity> {
    let raw = load_raw(ckpt)?;
    let model = raw
        .meta
        .model
        .clone()
        .ok_or_else(|| Error::BadMetadata(format!("{} carries no model config", ckpt.display())))?;
    let seq = seq_len.unwrap_or(model.max_seq_len);
    if seq == 0 {
        return Err(Error::Config("seq_len must be positive".into()));
    }
    let stream = ingest_corpus(corpus)?;
    let tokens = match max_tokens {
        Some(n) => &stream.tokens()[..n.min(stream.len())],
        None => stream.tokens(),
    };
    let (total, count) = match raw.meta.dtype {
        DType::Float32 => nll_sum(&store_from_raw::<f32>(raw)?, &model, tokens, seq, 8)?,
        DType::Float64 => nll_sum(&store_from_raw::<f64>(raw)?, &model, tokens, seq, 8)?,
    };
    Ok(Perplexity {
        ppl: (total / count as f64).exp(),
        tokens: count,
    })
}

struct Sink {
    metrics: BufWriter<File>,
    evals: Option<BufWriter<File>>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn append_line<T: Serialize>(w: &mut BufWriter<File>, value: &T, path: &Path) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// A configured run, ready to execute. Construction performs every setup
/// step that can fail on bad input (config, corpus, donor, transfer).
pub struct Trainer {
    config: TrainRunConfig,
    model: ModelConfig,
    stream: TokenStream,
    store: ParameterStore<f32>,
    opt: OptimizerState<f32>,
    mask: FreezeMask,
    lit: Option<LitState>,
    plan: TransferPlan,
}

impl Trainer {
    pub fn new(config: TrainRunConfig) -> Result<Self> {
        config.validate()?;
        let stream = ingest_corpus(&config.corpus)?;
        Self::with_stream(config, stream)
    }

    /// Like [`Trainer::new`] with an already tokenized corpus; `config.corpus`
    /// is recorded but not read.
    pub fn with_stream(config: TrainRunConfig, stream: TokenStream) -> Result<Self> {
        config.validate()?;
        let model = config.model.resolve()?;
        if config.seq_len > model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds the model's max_seq_len {}",
                config.seq_len, model.max_seq_len
            )));
        }
        stream.require_batch(config.batch_size, config.seq_len)?;
        let mut store = build_model::<f32>(&model, config.seed)?;
        let plan = match &config.donor {
            Some(path) if !config.component_sets.is_empty() => {
                let (donor, meta) = load_checkpoint::<f32>(path)?;
                let donor_model = meta.model.ok_or_else(|| {
                    Error::BadMetadata(format!("{} carries no model config", path.display()))
                })?;
                let plan = build_transfer_plan(&donor_model, &model, &config.component_sets)?;
                apply_transfer(&donor, &mut store, &plan)?;
                plan
            }
            _ => TransferPlan::default(),
        };
        let mask = make_freeze_mask(&plan, config.freeze_policy);
        let lit = (config.freeze_policy == FreezePolicy::Lit && !mask.is_empty()).then(|| LitState::new(config.lit));
        let opt = OptimizerState::new(
            &store,
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
        );
        Ok(Trainer {
            config,
            model,
            stream,
            store,
            opt,
            mask,
            lit,
            plan,
        })
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn store(&self) -> &ParameterStore<f32> {
        &self.store
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.opt
    }

    pub fn mask(&self) -> &FreezeMask {
        &self.mask
    }

    pub fn plan(&self) -> &TransferPlan {
        &self.plan
    }

    pub fn stream(&self) -> &TokenStream {
        &self.stream
    }

    fn meta(&self, step: u64) -> CheckpointMeta {
        CheckpointMeta::new(Some(self.model.clone()), step, self.config.seed, f32::DTYPE)
    }

    fn checkpoint(&self, step: u64) -> Result<()> {
        let path = self.config.out_dir.join(format!("ckpt-{step}.xatl"));
        save_checkpoint(&self.store, &self.meta(step), &path)
    }

    fn write_setup_files(&self) -> Result<Sink> {
        let dir = &self.config.out_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut resolved = self.config.clone();
        resolved.model = ModelSource::Inline(self.model.clone());
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&resolved)?).map_err(|e| Error::io(&cfg_path, e))?;
        if !self.config.component_sets.is_empty() {
            let p = dir.join("transfer-plan.json");
            std::fs::write(&p, self.plan.to_json()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Sink {
            metrics: create(&dir.join("metrics.jsonl"))?,
            evals: match self.config.eval_interval {
                Some(_) => Some(create(&dir.join("eval.jsonl"))?),
                None => None,
            },
        })
    }

    fn eval(&self, step: u64) -> Result<EvalRecord> {
        let val_loss = evaluate_loss(
            &self.store,
            &self.model,
            self.stream.validation(),
            self.config.seq_len,
            self.config.batch_size,
            self.config.eval_tokens,
        )?;
        Ok(EvalRecord { step, val_loss })
    }

    /// Execute the loop. `total_steps` optimizer updates are applied; the
    /// final iteration only measures the loss of the finished model.
    pub fn run(&mut self) -> Result<RunSummary> {
        self.run_with(|_| {})
    }

    /// [`Trainer::run`], calling `on_record` after each metrics line.
    pub fn run_with(&mut self, mut on_record: impl FnMut(&MetricRecord)) -> Result<RunSummary> {
        let mut sink = self.write_setup_files()?;
        let dir = self.config.out_dir.clone();
        let (metrics_path, eval_path) = (dir.join("metrics.jsonl"), dir.join("eval.jsonl"));
        let sched = self.config.schedule();
        let (b, t) = (self.config.batch_size, self.config.seq_len);
        let total = self.config.total_steps;

        let mut records = Vec::new();
        let mut evals = Vec::new();
        let mut unfreeze_step = None;
        let mut cursor = 0;
        let (mut since_record, mut since_record_n) = (0.0f64, 0u64);
        let (mut since_lit, mut since_lit_n) = (0.0f64, 0u64);

        for step in 0..=total {
            if step % self.config.checkpoint_interval == 0 || step == total {
                self.checkpoint(step)?;
            }
            if let (Some(every), Some(w)) = (self.config.eval_interval, sink.evals.as_mut()) {
                if step % every == 0 || step == total {
                    let rec = self.eval(step)?;
                    append_line(w, &rec, &eval_path)?;
                    evals.push(rec);
                }
            }

            let batch = next_batch(self.stream.train(), b, t, cursor);
            cursor = batch.cursor;
            let mut g = Graph::new();
            let mask = &self.mask;
            let vars = g.load_params_where(&self.store, |n| !mask.is_frozen(n));
            let non_finite = |e: Error| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                other => other,
            };
            let logits = forward(&mut g, &vars, &self.model, &batch.inputs, b, t).map_err(non_finite)?;
            let loss_var = g.cross_entropy(logits, &batch.targets, Some(PAD)).map_err(non_finite)?;
            let loss = g.value(loss_var).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            since_record += loss;
            since_record_n += 1;

            let mut event = None;
            if step > 0 {
                since_lit += loss;
                since_lit_n += 1;
                if let Some(lit) = self.lit.as_mut() {
                    if step % self.config.lit.interval_steps == 0 {
                        let avg = since_lit / since_lit_n as f64;
                        (since_lit, since_lit_n) = (0.0, 0);
                        if lit.observe(avg)? == LitEvent::Unfreeze {
                            event = Some("unfreeze".to_string());
                            unfreeze_step = Some(step);
                        }
                    }
                }
            }

            if step % self.config.log_interval == 0 || step == total || event.is_some() {
                if event.is_some() && step % self.config.checkpoint_interval != 0 && step != total {
                    self.checkpoint(step)?;
                }
                let rec = MetricRecord {
                    step,
                    loss: since_record / since_record_n as f64,
                    lr: lr_at(step, &sched)?,
                    frozen_params: self.mask.len(),
                    tokens_seen: step * (b * t) as u64,
                    event: event.clone(),
                };
                (since_record, since_record_n) = (0.0, 0);
                append_line(&mut sink.metrics, &rec, &metrics_path)?;
                on_record(&rec);
                records.push(rec);
            }

            if step < total {
                let mut grads = g.backward(loss_var)?;
                if let Some(c) = self.config.grad_clip {
                    clip_grad_norm(&mut grads, &self.mask, c);
                }
                adamw_step(&mut self.store, &grads, &mut self.opt, &self.mask, lr_at(step + 1, &sched)?)?;
            }
            if event.is_some() {
                self.mask.clear();
            }
        }

        Ok(RunSummary {
            out_dir: dir,
            records,
            evals,
            unfreeze_step,
            plan: self.plan.clone(),
        })
    }
}

/// Set up and execute a run described by `config`.
pub fn train(config: TrainRunConfig) -> Result<RunSummary> {
    Trainer::new(config)?.run()
}

/// Parameters of the uniform-logit reference model: every logit is zero, so
/// perplexity equals the vocabulary size.
pub fn uniform_logit_store(config: &ModelConfig) -> Result<ParameterStore<f32>> {
    let mut store = build_model::<f32>(config, 0)?;
    let table = config.output_table();
    let dims = store.require(table)?.dims().to_vec();
    store.insert(table, Tensor::zeros(&dims));
    Ok(store)
}
