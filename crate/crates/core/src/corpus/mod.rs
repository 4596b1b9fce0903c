//! Synthetic multi-writer corpus: generation, damage, forgery and manifests.

mod defects;
mod manifest;
mod render;
mod style;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use defects::{defect_mask, inject_defects, DefectKind, DefectSpec};
pub use manifest::write_atomic;
pub use manifest::{load_manifest, CorpusManifest, SampleRecord, Split};
pub use render::{line_tops, render_page};
pub use style::WriterStyle;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

/// Relative parameter jitter applied to a transplanted style when forging.
pub const FORGERY_JITTER: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusParams {
    pub num_writers: u32,
    pub samples_per_writer: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub calibrate_per_writer: usize,
    pub test_per_writer: usize,
    /// Fraction of pretrain/calibrate samples rendered with a random defect.
    pub defect_fraction: f64,
    /// Defect area ratio range for those samples.
    pub defect_area: (f64, f64),
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            num_writers: 8,
            samples_per_writer: 20,
            image_height: 128,
            image_width: 128,
            patch_size: 16,
            seed: 7,
            calibrate_per_writer: 5,
            test_per_writer: 5,
            defect_fraction: 0.9,
            defect_area: (0.05, 0.15),
        }
    }
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_writers == 0 {
            return Err(Error::Config("num_writers must be at least 1".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        for (name, dim) in [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
        ] {
            if dim == 0 || dim % self.patch_size != 0 {
                return Err(Error::Config(format!(
                    "{name} = {dim} is not divisible by patch size {}",
                    self.patch_size
                )));
            }
        }
        if self.calibrate_per_writer == 0 {
            return Err(Error::Config(
                "calibrate_per_writer must be at least 1".into(),
            ));
        }
        if self.samples_per_writer < self.calibrate_per_writer + self.test_per_writer {
            return Err(Error::Config(format!(
                "samples_per_writer = {} cannot cover {} calibrate + {} test samples",
                self.samples_per_writer, self.calibrate_per_writer, self.test_per_writer
            )));
        }
        if !(0.0..=1.0).contains(&self.defect_fraction) {
            return Err(Error::range(
                "defect_fraction",
                self.defect_fraction,
                "must lie in [0, 1]",
            ));
        }
        let (lo, hi) = self.defect_area;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::range("defect_area", hi, "need 0 <= lo <= hi <= 1"));
        }
        Ok(())
    }
}

pub fn sample_id(writer: u32, index: usize) -> String {
    format!("w{writer:03}-s{index:03}")
}

/// Build the manifest for a corpus without touching the filesystem.
pub fn plan_corpus(params: &CorpusParams) -> Result<CorpusManifest> {
    params.validate()?;
    let mut samples = Vec::new();
    for writer in 0..params.num_writers {
        let mut order: Vec<usize> = (0..params.samples_per_writer).collect();
        order.shuffle(&mut seed::rng(seed::derive_indexed(
            params.seed,
            "split",
            &[u64::from(writer)],
        )));
        let mut split_of = vec![Split::Pretrain; params.samples_per_writer];
        for &i in &order[..params.calibrate_per_writer] {
            split_of[i] = Split::Calibrate;
        }
        let test_end = params.calibrate_per_writer + params.test_per_writer;
        for &i in &order[params.calibrate_per_writer..test_end] {
            split_of[i] = Split::Test;
        }
        for (index, split) in split_of.into_iter().enumerate() {
            let id = sample_id(writer, index);
            let mut rng = seed::rng(seed::derive(params.seed, &format!("defect:{id}")));
            let defect = (split != Split::Test && rng.random::<f64>() < params.defect_fraction)
                .then(|| DefectSpec {
                    kind: DefectKind::ALL[rng.random_range(0..DefectKind::ALL.len())],
                    area_ratio: rng.random_range(params.defect_area.0..=params.defect_area.1),
                    seed: rng.random(),
                });
            samples.push(SampleRecord {
                image_path: format!("images/{id}.png"),
                sample_id: id,
                writer_id: writer,
                split,
                defect,
                forged: false,
                true_writer_id: None,
                forgery_seed: None,
            });
        }
    }
    Ok(CorpusManifest {
        corpus_seed: params.seed,
        num_writers: params.num_writers,
        image_height: params.image_height,
        image_width: params.image_width,
        band: params.patch_size,
        provenance: vec![format!(
            "generate_corpus writers={} samples_per_writer={} size={}x{} seed={}",
            params.num_writers,
            params.samples_per_writer,
            params.image_height,
            params.image_width,
            params.seed
        )],
        samples,
    })
}

/// The style actually used to draw a record.
pub fn effective_style(manifest: &CorpusManifest, record: &SampleRecord) -> WriterStyle {
    match (record.forged, record.true_writer_id, record.forgery_seed) {
        (true, Some(truth), Some(fseed)) => WriterStyle::derive(manifest.corpus_seed, truth)
            .jittered(FORGERY_JITTER, &mut seed::rng(fseed)),
        _ => WriterStyle::derive(manifest.corpus_seed, record.writer_id),
    }
}

/// Render a record without its defect.
pub fn render_clean(manifest: &CorpusManifest, record: &SampleRecord) -> Image {
    let style = effective_style(manifest, record);
    let content = seed::derive(
        manifest.corpus_seed,
        &format!("content:{}", record.sample_id),
    );
    render_page(
        &style,
        manifest.image_height,
        manifest.image_width,
        manifest.band,
        content,
    )
}

/// Render a record exactly as it is stored on disk (defect included).
pub fn render_sample(manifest: &CorpusManifest, record: &SampleRecord) -> Result<Image> {
    let clean = render_clean(manifest, record);
    match &record.defect {
        Some(spec) => inject_defects(&clean, spec),
        None => Ok(clean),
    }
}

/// Write every image referenced by the manifest plus `manifest.jsonl` under `out_dir`.
pub fn materialize(manifest: &CorpusManifest, out_dir: &Path) -> Result<()> {
    manifest.validate(None)?;
    for record in &manifest.samples {
        render_sample(manifest, record)?.save_png(&out_dir.join(&record.image_path))?;
    }
    manifest.write(&out_dir.join("manifest.jsonl"))
}

/// Generate a corpus on disk and return its manifest.
pub fn generate_corpus(params: &CorpusParams, out_dir: &Path) -> Result<CorpusManifest> {
    let manifest = plan_corpus(params)?;
    materialize(&manifest, out_dir)?;
    Ok(manifest)
}

/// Flag `floor(ratio * n_unforged_test)` unforged test samples as forgeries: each
/// keeps its claimed writer but is re-rendered in a jittered copy of another
/// writer's style. Already-forged samples are never drawn again.
pub fn inject_forgeries(
    manifest: &CorpusManifest,
    ratio: f64,
    seed_value: u64,
) -> Result<CorpusManifest> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(Error::range("forgery ratio", ratio, "must lie in [0, 0.5]"));
    }
    let mut out = manifest.clone();
    let candidates: Vec<usize> = out
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Test && !s.forged)
        .map(|(i, _)| i)
        .collect();
    let count = (ratio * candidates.len() as f64 + 1e-9).floor() as usize;
    if count > 0 && out.num_writers < 2 {
        return Err(Error::Config("forgeries need at least two writers".into()));
    }
    let mut rng = seed::rng(seed::derive(seed_value, "forgery"));
    let mut chosen = candidates;
    chosen.shuffle(&mut rng);
    chosen.truncate(count);
    chosen.sort_unstable();
    for i in chosen {
        let rec = &mut out.samples[i];
        let mut truth = rng.random_range(0..out.num_writers - 1);
        if truth >= rec.writer_id {
            truth += 1;
        }
        rec.forged = true;
        rec.true_writer_id = Some(truth);
        rec.forgery_seed = Some(rng.random());
        rec.image_path = format!("images/{}-forged.png", rec.sample_id);
    }
    out.provenance.push(format!(
        "inject_forgeries ratio={ratio} seed={seed_value} forged={count}"
    ));
    Ok(out)
}
