//! Training loop, checkpoint evaluation, prediction, and the ablation grid.
//!
//! One step: forward (train mode) → total loss → backward → global-norm clip
//! → AdamW → EMA. Once per epoch the EMA weights are evaluated on the
//! validation split in eval mode and fed to early stopping.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Cadence, TrainConfig};
use crate::data::{make_batches, Manifest, Split, SplitData};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::metrics::{mean_pcc, EarlyStopping, EvalReport, StopDecision};
use crate::model::{FusionMode, Model, NUM_TARGETS, TARGET_NAMES};
use crate::optim::{clip_global_norm, cosine_lr, AdamW, ClipOutcome, Ema};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.emic";
pub const LAST_CHECKPOINT: &str = "last.emic";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Training and validation splits, loaded once and reusable across runs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: SplitData,
    pub val: SplitData,
}

impl Dataset {
    pub fn load(manifest: &Manifest, dims: [usize; 3]) -> Result<Self> {
        Ok(Dataset {
            train: SplitData::load(manifest, Split::Train, dims)?,
            val: SplitData::load(manifest, Split::Val, dims)?,
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let path = cfg
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config("no manifest path configured".into()))?;
        Self::load(&Manifest::read(path)?, cfg.feature_dims()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    /// Global optimizer step, from 1.
    pub step: u64,
    pub lr: f64,
    pub batch: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub loss: LossBreakdown<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation report with EMA weights.
    pub val: EvalReport,
    pub improved: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub best_epoch: usize,
    pub best_p_mean: f64,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepLog),
    Eval(EpochLog),
    Summary(RunSummary),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub summary: RunSummary,
    pub run_dir: Option<PathBuf>,
}

/// Model outputs over one split, in manifest order.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub ids: Vec<String>,
    /// `[N × 6]`.
    pub pred: Tensor<f64>,
    pub logits: Tensor<f64>,
    pub targets: Tensor<f64>,
    pub labeled: Vec<bool>,
}

impl Predictions {
    /// Mean PCC over labeled rows.
    pub fn report(&self) -> Result<EvalReport> {
        let rows: Vec<usize> = (0..self.ids.len()).filter(|&i| self.labeled[i]).collect();
        if rows.len() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 labeled samples to evaluate, have {}",
                rows.len()
            )));
        }
        let pick = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
            let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
            Tensor::new(vec![rows.len(), NUM_TARGETS], data)
        };
        mean_pcc(&pick(&self.pred)?, &pick(&self.targets)?)
    }

    /// Writes `id,adm,…,joy` rows: sigmoid outputs, or pre-sigmoid logits with `raw`.
    pub fn write_csv(&self, path: &Path, raw: bool) -> Result<()> {
        let values = if raw { &self.logits } else { &self.pred };
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut header = vec!["id"];
        header.extend(TARGET_NAMES);
        w.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(values.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Eval-mode forward over `data` in manifest order.
pub fn predict_split(model: &mut Model<f64>, data: &SplitData, batch_size: usize) -> Result<Predictions> {
    let align = model.config().align_len;
    let mut ids = Vec::with_capacity(data.len());
    let mut pred = Vec::with_capacity(data.len() * NUM_TARGETS);
    let mut logits = Vec::with_capacity(data.len() * NUM_TARGETS);
    let mut targets = Vec::with_capacity(data.len() * NUM_TARGETS);
    let mut labeled = Vec::with_capacity(data.len());
    for indices in make_batches(data.len(), batch_size, None)? {
        let batch = data.batch(&indices, align)?;
        let out = model.forward(&batch.inputs, Mode::Eval)?;
        pred.extend_from_slice(out.pred.data());
        logits.extend_from_slice(out.logits.data());
        targets.extend_from_slice(batch.targets.data());
        ids.extend(batch.ids);
        labeled.extend(batch.labeled);
    }
    let n = ids.len();
    Ok(Predictions {
        ids,
        pred: Tensor::new(vec![n, NUM_TARGETS], pred)?,
        logits: Tensor::new(vec![n, NUM_TARGETS], logits)?,
        targets: Tensor::new(vec![n, NUM_TARGETS], targets)?,
        labeled,
    })
}

/// Scores a checkpoint on `data` with shadow (`use_ema`) or raw weights.
pub fn evaluate(ckpt: &Checkpoint, cfg: &TrainConfig, data: &SplitData, use_ema: bool) -> Result<EvalReport> {
    let mut model = ckpt.restore(&cfg.model_config()?, use_ema)?;
    predict_split(&mut model, data, cfg.batch_size)?.report()
}

/// Loads the data named by `cfg` and trains into `cfg.run_dir` (if set).
pub fn train(cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let data = Dataset::from_config(cfg)?;
    train_with(cfg, &data, cfg.run_dir.as_deref())
}

struct RunFiles {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl RunFiles {
    fn create(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.save(&dir.join(CONFIG_FILE))?;
        let log_path = dir.join(LOG_FILE);
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            log: BufWriter::new(file),
        })
    }

    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join(LOG_FILE), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(self.dir.join(LOG_FILE), e))
    }

    fn save(&self, name: &str, model: &Model<f64>, ema: &Ema<f64>) -> Result<()> {
        Checkpoint::from_model(model, Some(ema)).save(&self.dir.join(name))
    }
}

/// Epoch-dependent shuffle seed, decorrelated from the init seed.
fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains on preloaded data. With `run_dir`, writes the config, log, and
/// checkpoints there. A non-finite loss or gradient aborts the run after
/// saving the (still finite) current weights as the last checkpoint.
pub fn train_with(cfg: &TrainConfig, data: &Dataset, run_dir: Option<&Path>) -> Result<RunRecord> {
    cfg.validate()?;
    let mut files = run_dir.map(|d| RunFiles::create(d, cfg)).transpose()?;
    let mut model = Model::<f64>::new(cfg.model_config()?, cfg.seed)?;
    let mut eval_model = model.clone();
    let mut opt = AdamW::new(cfg.adamw(), model.named_params().into_iter().map(|(_, p)| p));
    let mut ema = Ema::new(cfg.ema_decay, &model.param_values())?;
    let mut stopper = EarlyStopping::new(cfg.patience)?;
    let loss_cfg = cfg.loss_config();

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as f64;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.epochs {
        let epoch_lr = match cfg.lr_schedule {
            Cadence::Epoch => cosine_lr(epoch as f64, cfg.epochs as f64, cfg.lr, cfg.min_lr)?,
            Cadence::Step => cfg.lr,
        };
        let seed = cfg.shuffle.then(|| shuffle_seed(cfg.seed, epoch));
        let mut loss_sum = 0.0;
        let batches = make_batches(data.train.len(), cfg.batch_size, seed)?;
        for indices in &batches {
            let lr = match cfg.lr_schedule {
                Cadence::Epoch => epoch_lr,
                Cadence::Step => cosine_lr(opt.step_count() as f64, total_steps, cfg.lr, cfg.min_lr)?,
            };
            let batch = data.train.batch(indices, cfg.align_len)?;
            let step = train_step(&mut model, &mut opt, &batch.inputs, &batch.targets, &loss_cfg, cfg.clip_norm, lr);
            let (loss, clip) = match step {
                Ok(v) => v,
                Err(e) => {
                    if let Some(f) = files.as_mut() {
                        f.save(LAST_CHECKPOINT, &model, &ema)?;
                        f.flush()?;
                    }
                    return Err(e);
                }
            };
            if cfg.ema_update == Cadence::Step {
                ema.update(model.named_params().into_iter().map(|(_, p)| &p.value))?;
            }
            loss_sum += loss.total;
            let log = StepLog {
                epoch: epoch + 1,
                step: opt.step_count(),
                lr,
                batch: indices.len(),
                grad_norm: clip.norm,
                clipped: clip.clipped(),
                loss,
            };
            if let Some(f) = files.as_mut() {
                f.record(&LogRecord::Step(log.clone()))?;
            }
            steps.push(log);
        }
        if cfg.ema_update == Cadence::Epoch {
            ema.update(model.named_params().into_iter().map(|(_, p)| &p.value))?;
        }

        eval_model.set_param_values(ema.shadows())?;
        let val = predict_split(&mut eval_model, &data.val, cfg.batch_size)?.report()?;
        let (improved, decision) = stopper.observe(epoch + 1, val.p_mean);
        let log = EpochLog {
            epoch: epoch + 1,
            lr: epoch_lr,
            train_loss: loss_sum / batches.len() as f64,
            val,
            improved,
        };
        if let Some(f) = files.as_mut() {
            f.record(&LogRecord::Eval(log.clone()))?;
            if improved {
                f.save(BEST_CHECKPOINT, &model, &ema)?;
            }
            f.save(LAST_CHECKPOINT, &model, &ema)?;
        }
        epochs.push(log);
        if decision == StopDecision::Stop {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
    }

    let (best_epoch, best_p_mean) = stopper.best().expect("at least one epoch");
    let summary = RunSummary {
        config_hash: cfg.hash(),
        best_epoch,
        best_p_mean,
        epochs_run: epochs.len(),
        stop_reason,
    };
    if let Some(f) = files.as_mut() {
        f.record(&LogRecord::Summary(summary.clone()))?;
        f.flush()?;
    }
    Ok(RunRecord {
        steps,
        epochs,
        summary,
        run_dir: run_dir.map(Path::to_path_buf),
    })
}

fn train_step(
    model: &mut Model<f64>,
    opt: &mut AdamW<f64>,
    inputs: &[Tensor<f64>; 3],
    targets: &Tensor<f64>,
    loss_cfg: &LossConfig,
    clip_norm: f64,
    lr: f64,
) -> Result<(LossBreakdown<f64>, ClipOutcome)> {
    model.zero_grad();
    let out = model.forward(inputs, Mode::Train)?;
    let (loss, grads) = total_loss(&out, targets, loss_cfg)?;
    model.backward(&grads)?;
    let mut params = model.params_mut();
    let clip = clip_global_norm(&mut params, clip_norm)?;
    opt.step(&mut params, lr)?;
    Ok((loss, clip))
}

/// One configuration of the 2×2×2 ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub fusion: FusionMode,
    pub multi_objective: bool,
    pub vad: bool,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let mut s = String::from("baseline");
        if self.multi_objective {
            s.push_str("+multi_objective");
        }
        if self.vad {
            s.push_str("+vad");
        }
        s
    }

    pub fn dir_name(&self, index: usize) -> String {
        let fusion = match self.fusion {
            FusionMode::Concat => "concat",
            FusionMode::Average => "average",
        };
        format!("{:02}-{}-{fusion}", index + 1, self.label().replace('+', "-"))
    }

    /// Base config with this cell's fusion, objective, and VAD toggles.
    /// The MSE-only objective zeroes the correlation and auxiliary weights;
    /// the VAD regularizer keeps its base weight whenever the pathway is on.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.fusion = self.fusion;
        cfg.use_vad = self.vad;
        if !self.multi_objective {
            cfg.lambda_corr = 0.0;
            cfg.lambda_aux = 0.0;
        }
        if !self.vad {
            cfg.lambda_vad = 0.0;
        }
        cfg
    }
}

/// The full grid: the ablation table's row order first (baseline average,
/// baseline concat, +multi-objective concat, +multi-objective+VAD concat),
/// then the remaining four cells.
pub fn ablation_grid() -> [AblationCell; 8] {
    use FusionMode::{Average, Concat};
    let cell = |fusion, multi_objective, vad| AblationCell {
        fusion,
        multi_objective,
        vad,
    };
    [
        cell(Average, false, false),
        cell(Concat, false, false),
        cell(Concat, true, false),
        cell(Concat, true, true),
        cell(Concat, false, true),
        cell(Average, true, false),
        cell(Average, false, true),
        cell(Average, true, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seeds: Vec<u64>,
    /// Best validation p̄ per seed; `None` where the run failed.
    pub p_means: Vec<Option<f64>>,
    pub errors: Vec<String>,
}

impl AblationRow {
    fn ok_values(&self) -> Vec<f64> {
        self.p_means.iter().flatten().copied().collect()
    }

    pub fn mean(&self) -> Option<f64> {
        let v = self.ok_values();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Sample standard deviation across successful seeds (0 for one seed).
    pub fn spread(&self) -> Option<f64> {
        let v = self.ok_values();
        let mean = self.mean()?;
        if v.len() < 2 {
            return Some(0.0);
        }
        let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
        Some((ss / (v.len() - 1) as f64).sqrt())
    }
}

/// Runs every grid cell for every seed on shared data. Failed runs are
/// recorded in their row instead of aborting the grid. With `out_dir`, each
/// run gets its own directory and the table is written to `ablation.csv`.
pub fn ablate(base: &TrainConfig, data: &Dataset, seeds: &[u64], out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (i, cell) in ablation_grid().iter().enumerate() {
        let mut row = AblationRow {
            cell: *cell,
            seeds: seeds.to_vec(),
            p_means: Vec::new(),
            errors: Vec::new(),
        };
        for &seed in seeds {
            let mut cfg = cell.apply(base);
            cfg.seed = seed;
            let dir = out_dir.map(|d| d.join(cell.dir_name(i)).join(format!("seed-{seed}")));
            cfg.run_dir = dir.clone();
            match train_with(&cfg, data, dir.as_deref()) {
                Ok(rec) => row.p_means.push(Some(rec.summary.best_p_mean)),
                Err(e) => {
                    row.p_means.push(None);
                    row.errors.push(format!("seed {seed}: {e}"));
                }
            }
        }
        rows.push(row);
    }
    if let Some(dir) = out_dir {
        write_ablation_csv(&rows, &dir.join(ABLATION_FILE))?;
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["row", "method", "fusion", "use_vad", "seeds", "p_mean", "p_spread", "status"])?;
    for (i, r) in rows.iter().enumerate() {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let fusion = match r.cell.fusion {
            FusionMode::Concat => "concat",
            FusionMode::Average => "average",
        };
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let status = if r.errors.is_empty() {
            "ok".to_string()
        } else {
            format!("failed: {}", r.errors.join("; "))
        };
        w.write_record([
            (i + 1).to_string(),
            r.cell.label(),
            fusion.to_string(),
            r.cell.vad.to_string(),
            seeds.join(" "),
            fmt(r.mean()),
            fmt(r.spread()),
            status,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
