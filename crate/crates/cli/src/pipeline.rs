//! The stages behind each subcommand. Every stage reads and writes only
//! inside one run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hwid_core::calibrate::{calibrate, ClassifierState, LabeledImage};
use hwid_core::checkpoint::{self, Checkpoint};
use hwid_core::contrastive::{
    metrics_csv, parse_metrics_csv, pretrain, MetricRow, PretrainState, TrainImage,
};
use hwid_core::corpus::{self, load_manifest, write_atomic, CorpusManifest, Split};
use hwid_core::encoder::init_state;
use hwid_core::evaluate::{
    evaluate, prepare_test_set, reports_csv, robustness_sweep, summary_table, Condition, EvalReport,
};
use hwid_core::prefilter::denoise;
use hwid_core::{Error, Image, Result};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn manifest(&self) -> PathBuf {
        self.corpus_dir().join("manifest.jsonl")
    }

    pub fn preprocessed_dir(&self) -> PathBuf {
        self.root.join("preprocessed")
    }

    /// Written last by `preprocess`; its presence marks the stage complete.
    pub fn preprocessed_manifest(&self) -> PathBuf {
        self.preprocessed_dir().join("manifest.jsonl")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("pretrain").join("metrics.csv")
    }

    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.root.join("pretrain").join("checkpoint.ckpt")
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("calibrate").join("classifier.ckpt")
    }

    pub fn calibration_losses(&self) -> PathBuf {
        self.root.join("calibrate").join("losses.csv")
    }

    pub fn evaluate_dir(&self) -> PathBuf {
        self.root.join("evaluate")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }

    pub fn sweep_reports(&self) -> PathBuf {
        self.sweep_dir().join("reports.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Record the effective config so the directory alone reproduces its artifacts.
pub fn write_config(layout: &RunLayout, config: &RunConfig) -> Result<()> {
    write_atomic(&layout.config(), config.to_toml().as_bytes())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::State(format!(
            "{} is missing; run `{stage}` first",
            path.display()
        )))
    }
}

pub fn generate_corpus(layout: &RunLayout, config: &RunConfig) -> Result<CorpusManifest> {
    corpus::generate_corpus(&config.resolved().corpus, &layout.corpus_dir())
}

fn manifest(layout: &RunLayout) -> Result<CorpusManifest> {
    require(&layout.manifest(), "generate-corpus")?;
    load_manifest(&layout.manifest())
}

/// Denoise the pre-training and calibration images.
pub fn preprocess(layout: &RunLayout, config: &RunConfig) -> Result<usize> {
    let manifest = manifest(layout)?;
    let mut count = 0;
    for rec in manifest.samples.iter().filter(|r| r.split != Split::Test) {
        let image = Image::load(&manifest.image_path(&layout.corpus_dir(), rec))?;
        denoise(&image, &config.filter)?
            .save_png(&manifest.image_path(&layout.preprocessed_dir(), rec))?;
        count += 1;
    }
    manifest.write(&layout.preprocessed_manifest())?;
    Ok(count)
}

/// A training split, from the preprocessed images when that stage has run.
pub fn training_images(layout: &RunLayout, split: Split) -> Result<Vec<LabeledImage>> {
    let manifest = manifest(layout)?;
    let dir = if layout.preprocessed_manifest().exists() {
        layout.preprocessed_dir()
    } else {
        layout.corpus_dir()
    };
    manifest
        .split(split)
        .map(|rec| {
            Ok(LabeledImage {
                id: rec.sample_id.clone(),
                writer: rec.writer_id,
                forged: rec.forged,
                image: Image::load(&manifest.image_path(&dir, rec))?,
            })
        })
        .collect()
}

fn save_pretrain(
    layout: &RunLayout,
    state: &PretrainState,
    ids: &[String],
    rows: &[MetricRow],
) -> Result<()> {
    let mut ck = checkpoint::pretrain_checkpoint(state);
    ck.meta["image_ids"] = serde_json::json!(ids);
    ck.save(&layout.pretrain_checkpoint())?;
    write_text(&layout.metrics(), &metrics_csv(rows))
}

/// Load a pre-training checkpoint and the image ids it was trained on.
pub fn load_pretrain(layout: &RunLayout) -> Result<(PretrainState, Vec<String>)> {
    require(&layout.pretrain_checkpoint(), "pretrain")?;
    let ck = Checkpoint::load(&layout.pretrain_checkpoint())?;
    let ids: Vec<String> = ck.meta_field("image_ids")?;
    Ok((checkpoint::restore_pretrain(&ck)?, ids))
}

/// Run pre-training to `contrastive.steps`, checkpointing along the way.
/// With `resume`, continue from the saved checkpoint and keep its metrics.
pub fn run_pretrain(
    layout: &RunLayout,
    config: &RunConfig,
    resume: bool,
) -> Result<Vec<MetricRow>> {
    let data: Vec<TrainImage> = training_images(layout, Split::Pretrain)?
        .into_iter()
        .map(|s| TrainImage {
            id: s.id,
            image: s.image,
        })
        .collect();
    let ids: Vec<String> = data.iter().map(|d| d.id.clone()).collect();
    let cfg = config.pretrain_config();
    let (mut state, mut rows) = if resume {
        let (state, saved_ids) = load_pretrain(layout)?;
        if saved_ids != ids {
            return Err(Error::State(
                "checkpoint was trained on different images".into(),
            ));
        }
        if state.encoder.config != config.resolved().encoder {
            return Err(Error::State(
                "checkpoint encoder config differs from the run config".into(),
            ));
        }
        let text = std::fs::read_to_string(layout.metrics()).map_err(|e| Error::Io {
            path: layout.metrics(),
            source: e,
        })?;
        let mut rows = parse_metrics_csv(&text)?;
        rows.retain(|r| r.step < state.step());
        (state, rows)
    } else {
        (
            PretrainState::new(init_state(&config.resolved().encoder)?, data.len())?,
            Vec::new(),
        )
    };
    let total = cfg.contrast.steps;
    if state.step() > total {
        return Err(Error::State(format!(
            "checkpoint is at step {} but contrastive.steps = {total}",
            state.step()
        )));
    }
    loop {
        let target = match config.checkpoint_interval {
            0 => total,
            k => ((state.step() / k + 1) * k).min(total),
        };
        let mut chunk = cfg.clone();
        chunk.contrast.steps = target;
        rows.extend(pretrain(&mut state, &data, &chunk, |_, _| Ok(true))?);
        save_pretrain(layout, &state, &ids, &rows)?;
        eprintln!("pretrain: step {}/{total}", state.step());
        if state.step() >= total {
            return Ok(rows);
        }
    }
}

pub fn run_calibrate(layout: &RunLayout, config: &RunConfig) -> Result<ClassifierState> {
    let (state, _) = load_pretrain(layout)?;
    let samples = training_images(layout, Split::Calibrate)?;
    let resolved = config.resolved();
    let outcome = calibrate(
        &state.encoder,
        &samples,
        &resolved.calibration,
        &resolved.matching,
    )?;
    checkpoint::save_classifier(&outcome.classifier, &layout.classifier())?;
    let mut csv = String::from("epoch,loss\n");
    let _ = writeln!(csv, "0,{:.12e}", outcome.initial_loss);
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l:.12e}", e + 1);
    }
    write_text(&layout.calibration_losses(), &csv)?;
    Ok(outcome.classifier)
}

fn classifier(layout: &RunLayout) -> Result<ClassifierState> {
    require(&layout.classifier(), "calibrate")?;
    checkpoint::load_classifier(&layout.classifier())
}

/// One report per listed evaluation seed under a single condition.
pub fn run_evaluate(
    layout: &RunLayout,
    config: &RunConfig,
    condition: Condition,
) -> Result<Vec<EvalReport>> {
    let clf = classifier(layout)?;
    let manifest = manifest(layout)?;
    let filter = config.evaluation.prefilter.then_some(&config.filter);
    let mut reports = Vec::new();
    for &listed in &config.evaluation.seeds {
        let images =
            prepare_test_set(&manifest, condition, config.evaluation_seed(listed), filter)?;
        let mut r = evaluate(
            &clf,
            &images,
            condition,
            listed,
            &config.matching,
            &config.evaluation,
        )?;
        r.seed = listed;
        reports.push(r);
    }
    let dir = layout.evaluate_dir();
    write_text(&dir.join("reports.csv"), &reports_csv(&reports))?;
    write_json(&dir.join("reports.json"), &reports)?;
    Ok(reports)
}

/// Baseline, every defect ratio and every forgery ratio, for each listed seed.
pub fn run_sweep(layout: &RunLayout, config: &RunConfig) -> Result<Vec<EvalReport>> {
    let clf = classifier(layout)?;
    let manifest = manifest(layout)?;
    let mut eval = config.evaluation.clone();
    eval.seeds = config
        .evaluation
        .seeds
        .iter()
        .map(|&s| config.evaluation_seed(s))
        .collect();
    let mut reports = robustness_sweep(&clf, &manifest, &config.filter, &config.matching, &eval)?;
    for r in &mut reports {
        let k = eval
            .seeds
            .iter()
            .position(|&s| s == r.seed)
            .expect("seed came from the list");
        r.seed = config.evaluation.seeds[k];
    }
    let dir = layout.sweep_dir();
    write_text(&dir.join("reports.csv"), &reports_csv(&reports))?;
    write_text(&dir.join("summary.csv"), &summary_table(&reports))?;
    write_json(&layout.sweep_reports(), &reports)?;
    Ok(reports)
}

pub fn load_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
