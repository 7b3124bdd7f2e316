//! Training: learning-rate and macrobatch schedules, AdamW with decoupled
//! weight decay and global-norm gradient clipping, gradient accumulation,
//! the instance-count-driven run loop, and deterministic checkpoint resume.
//!
//! All schedule counters are in instances (one instance = one training
//! sequence). Dropout masks derive from (seed, "dropout", microbatch index)
//! and in-run evaluation from (seed, "eval", instance count), so a resumed
//! run replays the original bit for bit.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{Checkpoint, SourceState};
use crate::data::{EvalStream, Role};
use crate::error::{Error, Result};
use crate::eval::{eval_model, EvalProtocol};
use crate::model::{Mode, Transformer};
use crate::rng::StreamRng;
use crate::sources::DataSource;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Finetune,
    /// Finetune protocol with parameters reinitialized by the pretrain scheme.
    Baseline,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub base_lr: f64,
    pub warmup_instances: u64,
    /// Instances over which the cooled-down learning rate halves.
    pub half_life_instances: u64,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub microbatch: usize,
    pub max_macrobatch: usize,
    /// Macrobatch warmup window [start, end] in instances.
    pub macro_window: (u64, u64),
    pub total_instances: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    /// Training-loss rows are written at this cadence.
    pub log_interval: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    /// Consecutive aborted steps before the run gives up.
    pub abort_after_bad_steps: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Desk-scale defaults: the reference schedule constants scaled down
        // by 100x, with a 200K-instance budget.
        TrainConfig {
            mode: TrainMode::Pretrain,
            base_lr: 3e-4,
            warmup_instances: 16_000,
            half_life_instances: 100_000,
            weight_decay: 0.01,
            grad_clip: 1.0,
            microbatch: 25,
            max_macrobatch: 50,
            macro_window: (5_000, 10_000),
            total_instances: 200_000,
            eval_interval: 100_000,
            checkpoint_interval: 50_000,
            log_interval: 2_500,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            abort_after_bad_steps: 10,
        }
    }
}

impl TrainConfig {
    /// The reference large-scale pretraining schedule.
    pub fn paper_pretrain() -> TrainConfig {
        TrainConfig {
            base_lr: 3e-4,
            warmup_instances: 1_600_000,
            half_life_instances: 10_000_000,
            max_macrobatch: 500,
            macro_window: (500_000, 1_000_000),
            total_instances: 20_000_000,
            eval_interval: 100_000,
            checkpoint_interval: 1_000_000,
            ..TrainConfig::default()
        }
    }

    /// The reference finetuning schedule: base LR 1e-4, warmup 10K,
    /// macrobatch window 50K-150K.
    pub fn paper_finetune() -> TrainConfig {
        TrainConfig {
            mode: TrainMode::Finetune,
            base_lr: 1e-4,
            warmup_instances: 10_000,
            macro_window: (50_000, 150_000),
            max_macrobatch: 500,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::InvalidConfig("train.base_lr must be positive".into()));
        }
        if self.microbatch == 0 || self.max_macrobatch < self.microbatch {
            return Err(Error::InvalidConfig(format!(
                "train.max_macrobatch {} must be >= microbatch {}",
                self.max_macrobatch, self.microbatch
            )));
        }
        if self.macro_window.0 > self.macro_window.1 {
            return Err(Error::InvalidConfig(
                "train.macro_window start exceeds end".into(),
            ));
        }
        if self.warmup_instances == 0
            || self.half_life_instances == 0
            || self.total_instances == 0
            || self.eval_interval == 0
            || self.checkpoint_interval == 0
            || self.log_interval == 0
        {
            return Err(Error::InvalidConfig(
                "train intervals and totals must be positive".into(),
            ));
        }
        if self.grad_clip <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "train.grad_clip must be positive and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup to the base rate, then geometric cooldown halving every
/// `half_life_instances`.
pub fn lr_schedule(cfg: &TrainConfig, instances: u64) -> f64 {
    if instances < cfg.warmup_instances {
        cfg.base_lr * instances as f64 / cfg.warmup_instances as f64
    } else {
        let past = (instances - cfg.warmup_instances) as f64;
        cfg.base_lr * (-(past / cfg.half_life_instances as f64)).exp2()
    }
}

/// Scheduled macrobatch size: the microbatch before the window, a linear
/// ramp to the maximum inside it, the maximum after.
pub fn batch_schedule(cfg: &TrainConfig, instances: u64) -> usize {
    let (start, end) = cfg.macro_window;
    if instances <= start {
        cfg.microbatch
    } else if instances >= end {
        cfg.max_macrobatch
    } else {
        let frac = (instances - start) as f64 / (end - start) as f64;
        let target = cfg.microbatch as f64 + (cfg.max_macrobatch - cfg.microbatch) as f64 * frac;
        target.round() as usize
    }
}

/// Microbatches accumulated to realize a scheduled macrobatch (rounded up).
pub fn accumulation_count(target_macro: usize, microbatch: usize) -> usize {
    target_macro.div_ceil(microbatch).max(1)
}

/// Scale gradients so their global norm is at most `clip`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], clip: f32) -> f64 {
    let mut sq = 0f64;
    for g in grads.iter() {
        for &v in g {
            sq += f64::from(v) * f64::from(v);
        }
    }
    let norm = sq.sqrt();
    if norm > f64::from(clip) {
        let factor = (f64::from(clip) / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    /// Mean bits/char of this microbatch (NaN when the step was aborted).
    pub loss_bits: f64,
    pub did_update: bool,
    /// Learning rate applied, when an update happened.
    pub lr: f64,
    pub macrobatch_target: usize,
    pub aborted: bool,
}

struct Accumulation {
    grads: Vec<Vec<f32>>,
    freeze: Vec<bool>,
    count: usize,
    target: usize,
    macrobatch_target: usize,
}

pub struct Trainer {
    pub model: Transformer,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub instances_seen: u64,
    pub microbatch_index: u64,
    pub opt_step: u64,
    pub skipped_steps: u64,
    opt_m: Vec<Vec<f32>>,
    opt_v: Vec<Vec<f32>>,
    accum: Option<Accumulation>,
    consecutive_bad: u32,
    root: StreamRng,
}

impl Trainer {
    pub fn new(model: Transformer, cfg: TrainConfig, seed: u64) -> Result<Trainer> {
        cfg.validate()?;
        let opt_m = model.params.iter().map(|p| vec![0f32; p.data.len()]).collect();
        let opt_v = model.params.iter().map(|p| vec![0f32; p.data.len()]).collect();
        Ok(Trainer {
            model,
            cfg,
            seed,
            instances_seen: 0,
            microbatch_index: 0,
            opt_step: 0,
            skipped_steps: 0,
            opt_m,
            opt_v,
            accum: None,
            consecutive_bad: 0,
            root: StreamRng::new(seed),
        })
    }

    /// Rebuild a trainer mid-run. Checkpoints are only written at macrobatch
    /// boundaries, so there is no accumulation state to restore.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let model = ck.to_model();
        Ok(Trainer {
            opt_m: ck.opt_m.clone(),
            opt_v: ck.opt_v.clone(),
            model,
            cfg,
            seed: ck.seed,
            instances_seen: ck.instances_seen,
            microbatch_index: ck.microbatch_index,
            opt_step: ck.opt_step,
            skipped_steps: ck.skipped_steps,
            accum: None,
            consecutive_bad: 0,
            root: StreamRng::new(ck.seed),
        })
    }

    pub fn to_checkpoint(&self, source: SourceState) -> Checkpoint {
        Checkpoint {
            config: self.model.cfg.clone(),
            seed: self.seed,
            instances_seen: self.instances_seen,
            microbatch_index: self.microbatch_index,
            opt_step: self.opt_step,
            skipped_steps: self.skipped_steps,
            params: self.model.params.clone(),
            opt_m: self.opt_m.clone(),
            opt_v: self.opt_v.clone(),
            source,
        }
    }

    pub fn root_rng(&self) -> &StreamRng {
        &self.root
    }

    /// Whether an accumulation is mid-flight (checkpoints must wait).
    pub fn mid_accumulation(&self) -> bool {
        self.accum.is_some()
    }

    /// One microbatch: forward, backward, accumulate; applies the AdamW
    /// update when the accumulation target is met. A non-finite loss aborts
    /// the whole macrobatch without touching parameters.
    pub fn train_microbatch(&mut self, batch: &[Vec<u8>]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty microbatch".into()));
        }
        if self.accum.is_none() {
            let macrobatch_target = batch_schedule(&self.cfg, self.instances_seen);
            let target = accumulation_count(macrobatch_target, self.cfg.microbatch);
            self.accum = Some(Accumulation {
                grads: self
                    .model
                    .params
                    .iter()
                    .map(|p| vec![0f32; p.data.len()])
                    .collect(),
                freeze: self.model.freeze_mask(self.instances_seen),
                count: 0,
                target,
                macrobatch_target,
            });
        }
        let freeze = self.accum.as_ref().expect("accum present").freeze.clone();
        let macrobatch_target = self.accum.as_ref().expect("accum present").macrobatch_target;

        let mut dropout_rng = self.root.stream("dropout").substream(self.microbatch_index);
        let mut tape = Tape::new();
        let forward = self
            .model
            .forward(&mut tape, batch, Mode::Train, &mut dropout_rng, &freeze)
            .and_then(|(logits, leaves)| {
                let loss = self.model.loss_nats(&mut tape, logits, batch)?;
                Ok((loss, leaves))
            });
        let (loss, leaves) = match forward {
            Ok(ok) => ok,
            Err(Error::NumericInstability { op, detail }) => {
                return self.abort_step(&op, &detail);
            }
            Err(other) => return Err(other),
        };
        let loss_nats = f64::from(tape.values(loss)[0]);
        if !loss_nats.is_finite() {
            return self.abort_step("loss", "non-finite loss value");
        }
        let grads = tape.backward(loss)?;

        let acc = self.accum.as_mut().expect("accum present");
        for (i, &leaf) in leaves.iter().enumerate() {
            if acc.freeze[i] {
                continue;
            }
            if let Some(g) = grads.get(leaf) {
                for (a, &v) in acc.grads[i].iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        acc.count += 1;
        self.consecutive_bad = 0;
        self.instances_seen += batch.len() as u64;
        self.microbatch_index += 1;

        let mut report = StepReport {
            loss_bits: loss_nats / std::f64::consts::LN_2,
            did_update: false,
            lr: 0.0,
            macrobatch_target,
            aborted: false,
        };
        if self.accum.as_ref().expect("accum present").count
            >= self.accum.as_ref().expect("accum present").target
        {
            report.lr = self.apply_update()?;
            report.did_update = true;
        }
        Ok(report)
    }

    fn abort_step(&mut self, op: &str, detail: &str) -> Result<StepReport> {
        self.skipped_steps += 1;
        self.consecutive_bad += 1;
        self.accum = None;
        self.microbatch_index += 1;
        if self.consecutive_bad > self.cfg.abort_after_bad_steps {
            return Err(Error::NumericInstability {
                op: op.to_string(),
                detail: format!(
                    "{detail}: {} consecutive aborted steps, giving up",
                    self.consecutive_bad
                ),
            });
        }
        Ok(StepReport {
            loss_bits: f64::NAN,
            did_update: false,
            lr: 0.0,
            macrobatch_target: 0,
            aborted: true,
        })
    }

    /// AdamW with decoupled weight decay over the accumulated mean gradient.
    fn apply_update(&mut self) -> Result<f64> {
        let acc = self.accum.take().expect("accumulation to apply");
        let mut grads = acc.grads;
        let scale = 1.0 / acc.count as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        clip_global_norm(&mut grads, self.cfg.grad_clip);

        self.opt_step += 1;
        let lr = lr_schedule(&self.cfg, self.instances_seen);
        let lr32 = lr as f32;
        let t = self.opt_step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps, self.cfg.weight_decay);
        for (i, param) in self.model.params.iter_mut().enumerate() {
            if acc.freeze[i] {
                continue;
            }
            let (g, m, v) = (&grads[i], &mut self.opt_m[i], &mut self.opt_v[i]);
            for j in 0..param.data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                param.data[j] -= lr32 * (mhat / (vhat.sqrt() + eps) + wd * param.data[j]);
            }
        }
        Ok(lr)
    }
}

// ---- metrics -----------------------------------------------------------------------

/// Append-only metrics CSV with the schema
/// `instances,split,dataset,bits_per_char,lr,macrobatch,wallclock_s`.
/// Wallclock is 0.000 unless timing was requested, keeping default runs
/// byte-identical under a fixed seed.
pub struct MetricsWriter {
    file: Option<std::fs::File>,
    pub rows: String,
    timing: bool,
    started: Instant,
}

pub const METRICS_HEADER: &str = "instances,split,dataset,bits_per_char,lr,macrobatch,wallclock_s";

impl MetricsWriter {
    pub fn new(path: Option<&Path>, timing: bool) -> Result<MetricsWriter> {
        let mut w = MetricsWriter {
            file: match path {
                Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
                None => None,
            },
            rows: String::new(),
            timing,
            started: Instant::now(),
        };
        w.emit(&format!("{METRICS_HEADER}\n"))?;
        Ok(w)
    }

    fn emit(&mut self, line: &str) -> Result<()> {
        self.rows.push_str(line);
        if let Some(f) = &mut self.file {
            f.write_all(line.as_bytes())
                .and_then(|()| f.flush())
                .map_err(|e| Error::io(PathBuf::from("metrics.csv"), e))?;
        }
        Ok(())
    }

    pub fn row(
        &mut self,
        instances: u64,
        split: &str,
        dataset: &str,
        bits: f64,
        lr: f64,
        macrobatch: usize,
    ) -> Result<()> {
        let wallclock = if self.timing {
            self.started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let mut line = String::new();
        let _ = writeln!(
            line,
            "{instances},{split},{dataset},{bits:.6},{lr:.6e},{macrobatch},{wallclock:.3}"
        );
        self.emit(&line)
    }
}

// ---- the run loop ---------------------------------------------------------------------

pub struct RunHooks<'a> {
    pub eval_streams: &'a [(EvalStream, Role)],
    pub proto: EvalProtocol,
    pub metrics: &'a mut MetricsWriter,
    pub checkpoint_dir: Option<&'a Path>,
}

fn crossed(prev: u64, now: u64, interval: u64) -> bool {
    prev / interval < now / interval
}

/// Instance-count-driven training loop with periodic zero-shot evaluation
/// and checkpointing (both at macrobatch boundaries, so checkpoints carry no
/// half-finished accumulation). Returns the final checkpoint.
pub fn run(
    trainer: &mut Trainer,
    source: &mut dyn DataSource,
    hooks: &mut RunHooks<'_>,
) -> Result<Checkpoint> {
    let micro = trainer.cfg.microbatch;
    let mut window_loss = 0f64;
    let mut window_count = 0usize;
    let mut last_eval_at: Option<u64> = None;
    let source_name = source.name().to_string();

    while trainer.instances_seen < trainer.cfg.total_instances {
        let prev = trainer.instances_seen;
        let batch = source.next_batch(micro)?;
        let report = trainer.train_microbatch(&batch)?;
        let now = trainer.instances_seen;
        if !report.aborted {
            window_loss += report.loss_bits;
            window_count += 1;
        }

        if report.did_update {
            if crossed(prev, now, trainer.cfg.log_interval) && window_count > 0 {
                let mean = window_loss / window_count as f64;
                hooks.metrics.row(
                    now,
                    "train",
                    &source_name,
                    mean,
                    report.lr,
                    report.macrobatch_target,
                )?;
                window_loss = 0.0;
                window_count = 0;
            }
            if crossed(prev, now, trainer.cfg.eval_interval) {
                run_eval(trainer, hooks, now, report.lr, report.macrobatch_target)?;
                last_eval_at = Some(now);
            }
            if crossed(prev, now, trainer.cfg.checkpoint_interval) {
                if let Some(dir) = hooks.checkpoint_dir {
                    let ck = trainer.to_checkpoint(source.state());
                    ck.save(&dir.join(format!("ckpt_{now}.bin")))?;
                }
            }
        }
    }
    // Drain a half-finished accumulation so the final checkpoint is clean.
    while trainer.mid_accumulation() {
        let batch = source.next_batch(micro)?;
        trainer.train_microbatch(&batch)?;
    }
    let final_instances = trainer.instances_seen;
    if last_eval_at != Some(final_instances) {
        run_eval(trainer, hooks, final_instances, lr_schedule(&trainer.cfg, final_instances), 0)?;
    }
    let ck = trainer.to_checkpoint(source.state());
    if let Some(dir) = hooks.checkpoint_dir {
        ck.save(&dir.join("ckpt_final.bin"))?;
    }
    Ok(ck)
}

fn run_eval(
    trainer: &Trainer,
    hooks: &mut RunHooks<'_>,
    instances: u64,
    lr: f64,
    macrobatch: usize,
) -> Result<()> {
    for (stream, role) in hooks.eval_streams {
        let mut rng = trainer
            .root
            .stream("eval")
            .substream(instances)
            .stream(&stream.name);
        let result = eval_model(&trainer.model, stream, &hooks.proto, &mut rng)?;
        hooks.metrics.row(
            instances,
            &role.to_string(),
            &stream.name,
            result.bits,
            lr,
            macrobatch,
        )?;
    }
    Ok(())
}
