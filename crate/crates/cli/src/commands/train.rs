use candle_core::Device;
use fieldsam_core::checkpoint::{load_lora, save_lora};
use fieldsam_core::metrics::EvalReport;
use fieldsam_core::training::{evaluate_loss, prompt_sample, PromptedSample, StepLoss, Trainer};
use fieldsam_core::Segmenter;
use fieldsam_data::augment::Augmentation;
use fieldsam_data::SampleRecord;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{evaluate_records, load_for_model, open_split};
use crate::config::{check_fresh_output, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

pub const ADAPTER_FILE: &str = "adapter.safetensors";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "eval_report.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const VAL_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub seg_loss: f64,
    pub iou_loss: f64,
    pub total: f64,
    pub val_loss: Option<f64>,
    pub val_map50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResults {
    pub dry_run: bool,
    pub steps: usize,
    pub n_train_tiles: usize,
    pub n_val_tiles: usize,
    /// Validation loss before the first step, on fixed validation prompts.
    pub initial_val_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub first_train_loss: Option<f64>,
    pub last_train_loss: Option<f64>,
    pub stopped_early: bool,
    pub map50: Option<f64>,
    pub mar150: Option<f64>,
    pub adapted: Vec<String>,
    pub checkpoints: Vec<String>,
}

pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub results: TrainResults,
    pub log: Vec<LogRow>,
    pub report: Option<EvalReport>,
}

fn with_instances(records: Vec<SampleRecord>) -> Vec<SampleRecord> {
    let (keep, drop): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.n_instances() > 0);
    for r in &drop {
        log::info!("{}: no instances, left out of loss computation", r.meta.id);
    }
    keep
}

/// Validation prompts drawn once from the run seed, so every run and every
/// resume of it scores the same prompt set.
pub fn validation_prompts(records: &[SampleRecord], model: &Segmenter, cfg: &RunConfig) -> Result<Vec<PromptedSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(VAL_STREAM);
    let norm = &model.config().normalization;
    let mut out = Vec::new();
    for r in records {
        let sample = r.to_train_sample(norm, &Device::Cpu)?;
        let p = prompt_sample(&sample, &cfg.train, &mut rng)?;
        if !p.prompts.is_empty() {
            out.push(p);
        }
    }
    Ok(out)
}

fn val_loss(model: &Segmenter, prompts: &[PromptedSample], cfg: &RunConfig) -> Result<Option<f64>> {
    if prompts.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate_loss(model, prompts, &cfg.train.loss)?.total))
}

fn write_log(path: &std::path::Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Cycles through the training tiles in a fresh random order each epoch.
struct Batches {
    order: Vec<usize>,
    next: usize,
}

impl Batches {
    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.next == 0 {
                    self.order.shuffle(rng);
                }
                let i = self.order[self.next];
                self.next = (self.next + 1) % self.order.len();
                i
            })
            .collect()
    }
}

pub fn run(cfg: &RunConfig, dry_run: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = cfg.output()?.to_path_buf();
    check_fresh_output(&out)?;
    let split = open_split(cfg.dataset()?, cfg.split()?)?;
    if split.train.is_empty() {
        return Err(CliError::Runtime(format!("split {} leaves no training tiles", split.hashes.scheme)));
    }

    let mut model = cfg.model.build()?;
    model.configure_finetune(cfg.train.finetune_mode, &cfg.train.lora_spec())?;
    if let Some(path) = &cfg.resume {
        load_lora(&mut model, path)?;
        log::info!("resumed adapters from {}", path.display());
    }
    let mut manifest = RunManifest::start("train", serde_json::to_value(cfg)?, cfg.seed);
    manifest.split = Some(split.hashes.clone());
    manifest.trainable_params = Some(model.count_trainable());
    let counts = model.count_by_component();
    let adapted = model.finetune().map(|f| f.adapted.clone()).unwrap_or_default();
    let mut results = TrainResults {
        dry_run,
        steps: 0,
        n_train_tiles: split.train.len(),
        n_val_tiles: split.val.len(),
        initial_val_loss: None,
        final_val_loss: None,
        first_train_loss: None,
        last_train_loss: None,
        stopped_early: false,
        map50: None,
        mar150: None,
        adapted,
        checkpoints: Vec::new(),
    };
    println!(
        "trainable parameters: {} (image encoder {}, prompt encoder {}, mask decoder {})",
        counts.total(),
        counts.image_encoder,
        counts.prompt_encoder,
        counts.mask_decoder
    );
    if dry_run {
        manifest.results = json!({"train": results, "components": counts});
        let manifest = manifest.finish(&out, &[])?;
        return Ok(TrainOutcome {
            manifest,
            results,
            log: Vec::new(),
            report: None,
        });
    }

    let size = model.config().image_size;
    let norm = model.config().normalization.clone();
    let train = with_instances(load_for_model(&split.dataset, &split.train, size)?);
    if train.is_empty() {
        return Err(CliError::Runtime("no training tile contains an instance".into()));
    }
    let val_records = load_for_model(&split.dataset, &split.val, size)?;
    let val_prompts = validation_prompts(&val_records, &model, cfg)?;
    results.initial_val_loss = val_loss(&model, &val_prompts, cfg)?;
    if let Some(l) = results.initial_val_loss {
        println!("step 0 val loss {l:.6}");
    }

    std::fs::create_dir_all(&out)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(DATA_STREAM);
    let mut batches = Batches {
        order: (0..train.len()).collect(),
        next: 0,
    };
    let mut log_rows = Vec::new();
    let mut best_map = f64::NEG_INFINITY;
    let mut stale = 0;

    let mut train_loop = |trainer: &mut Trainer, log_rows: &mut Vec<LogRow>, results: &mut TrainResults| -> Result<()> {
        for step in 1..=cfg.train.max_steps {
            let mut batch = Vec::with_capacity(cfg.train.batch_size);
            for i in batches.take(cfg.train.batch_size, &mut data_rng) {
                let rec = &train[i];
                let sample = if cfg.train.augment {
                    let (image, mask) = Augmentation::draw(&cfg.augment, &mut data_rng).apply(&rec.image, &rec.mask)?;
                    SampleRecord::new(rec.meta.clone(), image, mask)?.to_train_sample(&norm, &Device::Cpu)?
                } else {
                    rec.to_train_sample(&norm, &Device::Cpu)?
                };
                let prompted = trainer.prompt(&sample)?;
                if !prompted.prompts.is_empty() {
                    batch.push(prompted);
                }
            }
            if batch.is_empty() {
                continue;
            }
            let StepLoss {
                step: t,
                lr,
                seg_loss,
                iou_loss,
                total,
                ..
            } = trainer.step(&batch)?;
            results.steps = t;
            results.first_train_loss.get_or_insert(total);
            results.last_train_loss = Some(total);
            let mut row = LogRow {
                step: t,
                lr,
                seg_loss,
                iou_loss,
                total,
                val_loss: None,
                val_map50: None,
            };
            if cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0 {
                row.val_loss = val_loss(trainer.model(), &val_prompts, cfg)?;
                let report = evaluate_records(trainer.model(), &val_records, &cfg.automask, &cfg.eval)?;
                row.val_map50 = Some(report.map50);
                log::info!("step {t}: val loss {:?}, val mAP50 {:.4}", row.val_loss, report.map50);
                if report.map50 > best_map {
                    best_map = report.map50;
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
            if step % 10 == 0 || step == cfg.train.max_steps {
                log::info!("step {t}: loss {total:.5} (seg {seg_loss:.5}, iou {iou_loss:.5}), lr {lr:.3e}");
            }
            log_rows.push(row);
            if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
                let rel = format!("{CHECKPOINT_DIR}/step_{t:06}.safetensors");
                save_lora(trainer.model(), out.join(&rel))?;
                results.checkpoints.push(rel);
            }
            if cfg.train.early_stop_patience.is_some_and(|p| stale >= p) {
                log::info!("early stop after step {t}: no val mAP50 gain in {stale} validations");
                results.stopped_early = true;
                break;
            }
        }
        Ok(())
    };
    let outcome = train_loop(&mut trainer, &mut log_rows, &mut results);
    write_log(&out.join(LOG_FILE), &log_rows)?;
    outcome?;

    let model = trainer.into_model();
    save_lora(&model, out.join(ADAPTER_FILE))?;
    results.final_val_loss = val_loss(&model, &val_prompts, cfg)?;
    let report = evaluate_records(&model, &val_records, &cfg.automask, &cfg.eval)?;
    report.write_json(out.join(REPORT_FILE))?;
    results.map50 = Some(report.map50);
    results.mar150 = Some(report.mar150);
    println!(
        "{} steps, train loss {:?} -> {:?}, val loss {:?} -> {:?}",
        results.steps, results.first_train_loss, results.last_train_loss, results.initial_val_loss, results.final_val_loss
    );
    println!("{}", report.summary());

    let mut artifacts = vec![ADAPTER_FILE.to_string(), LOG_FILE.to_string(), REPORT_FILE.to_string()];
    artifacts.extend(results.checkpoints.iter().cloned());
    manifest.results = json!({"train": results, "components": counts});
    let manifest = manifest.finish(&out, &artifacts)?;
    Ok(TrainOutcome {
        manifest,
        results,
        log: log_rows,
        report: Some(report),
    })
}
