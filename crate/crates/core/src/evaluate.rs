//! Test-set preparation, accuracy reports and robustness sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibrate::{predict_batch, ClassifierState, LabeledImage};
use crate::corpus::{
    inject_defects, inject_forgeries, render_sample, CorpusManifest, DefectKind, DefectSpec, Split,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::matching::MatchingConfig;
use crate::prefilter::{denoise, FilterConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Condition {
    /// Area ratio of the defect added to every test image; 0 adds none.
    pub defect_ratio: f64,
    pub forgery_ratio: f64,
}

impl Condition {
    pub const BASELINE: Condition = Condition {
        defect_ratio: 0.0,
        forgery_ratio: 0.0,
    };

    pub fn label(&self) -> String {
        match (self.defect_ratio > 0.0, self.forgery_ratio > 0.0) {
            (false, false) => "baseline".into(),
            (true, false) => format!("defect+{:.0}%", self.defect_ratio * 100.0),
            (false, true) => format!("forgery+{:.0}%", self.forgery_ratio * 100.0),
            (true, true) => format!(
                "defect+{:.0}%/forgery+{:.0}%",
                self.defect_ratio * 100.0,
                self.forgery_ratio * 100.0
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Entropy-driven matching rounds per test image.
    pub inference_rounds: usize,
    /// Run the spectral pre-filter on test images before inference.
    pub prefilter: bool,
    pub batch_size: usize,
    pub defect_ratios: Vec<f64>,
    pub forgery_ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            inference_rounds: 5,
            prefilter: true,
            batch_size: 16,
            defect_ratios: vec![0.1, 0.3, 0.5],
            forgery_ratios: vec![0.1, 0.2, 0.3],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: Condition,
    pub seed: u64,
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
    pub per_writer_accuracy: BTreeMap<u32, f64>,
    /// `confusion[true class][predicted class]`, classes in label order.
    pub confusion: Vec<Vec<u64>>,
    pub genuine_top1: Option<f64>,
    pub forged_top1: Option<f64>,
}

/// Render a split, optionally through the pre-filter.
pub fn load_split(
    manifest: &CorpusManifest,
    split: Split,
    filter: Option<&FilterConfig>,
) -> Result<Vec<LabeledImage>> {
    manifest
        .split(split)
        .map(|rec| {
            let mut image = render_sample(manifest, rec)?;
            if let Some(f) = filter {
                image = denoise(&image, f)?;
            }
            Ok(LabeledImage {
                id: rec.sample_id.clone(),
                writer: rec.writer_id,
                forged: rec.forged,
                image,
            })
        })
        .collect()
}

/// Test images under `condition`. Forgeries are drawn first; then every image
/// gets a defect of the given area, with kinds cycled over the samples.
pub fn prepare_test_set(
    manifest: &CorpusManifest,
    condition: Condition,
    seed_value: u64,
    filter: Option<&FilterConfig>,
) -> Result<Vec<LabeledImage>> {
    if !(0.0..=1.0).contains(&condition.defect_ratio) {
        return Err(Error::range(
            "defect_ratio",
            condition.defect_ratio,
            "in [0, 1]",
        ));
    }
    let forged;
    let manifest = if condition.forgery_ratio > 0.0 {
        forged = inject_forgeries(
            manifest,
            condition.forgery_ratio,
            seed::derive(seed_value, "eval-forgery"),
        )?;
        &forged
    } else {
        manifest
    };
    let mut out = Vec::new();
    for (k, rec) in manifest.split(Split::Test).enumerate() {
        let mut image: Image = render_sample(manifest, rec)?;
        if condition.defect_ratio > 0.0 {
            let spec = DefectSpec {
                kind: DefectKind::ALL[k % DefectKind::ALL.len()],
                area_ratio: condition.defect_ratio,
                seed: seed::derive_indexed(
                    seed_value,
                    &format!("eval-defect:{}", rec.sample_id),
                    &[],
                ),
            };
            image = inject_defects(&image, &spec)?;
        }
        if let Some(f) = filter {
            image = denoise(&image, f)?;
        }
        out.push(LabeledImage {
            id: rec.sample_id.clone(),
            writer: rec.writer_id,
            forged: rec.forged,
            image,
        });
    }
    if out.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    Ok(out)
}

/// Score a classifier on prepared images. A sample is correct when its claimed
/// writer is predicted, so forgeries that fool the model count as errors.
pub fn evaluate(
    clf: &ClassifierState,
    images: &[LabeledImage],
    condition: Condition,
    seed_value: u64,
    matching: &MatchingConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let mut scores = Vec::with_capacity(images.len());
    for chunk in images.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        scores.extend(predict_batch(clf, &refs, matching, cfg.inference_rounds)?);
    }
    report_from_scores(clf, images, &scores, condition, seed_value)
}

/// Aggregate per-sample class scores into a report.
pub fn report_from_scores(
    clf: &ClassifierState,
    images: &[LabeledImage],
    scores: &[Vec<f64>],
    condition: Condition,
    seed_value: u64,
) -> Result<EvalReport> {
    let w = clf.num_classes();
    let mut confusion = vec![vec![0u64; w]; w];
    let (mut hit1, mut hit5) = (0usize, 0usize);
    let (mut genuine, mut genuine_hit, mut forged, mut forged_hit) =
        (0usize, 0usize, 0usize, 0usize);
    for (sample, s) in images.iter().zip(scores) {
        if s.len() != w {
            return Err(Error::Shape(format!("{} scores for {w} writers", s.len())));
        }
        let truth = clf.class_of(sample.writer).ok_or_else(|| {
            Error::Config(format!(
                "writer {} of {} is unknown to the classifier",
                sample.writer, sample.id
            ))
        })?;
        let mut order: Vec<usize> = (0..w).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        confusion[truth][order[0]] += 1;
        let correct = order[0] == truth;
        hit1 += usize::from(correct);
        hit5 += usize::from(order.iter().take(5).any(|&c| c == truth));
        if sample.forged {
            forged += 1;
            forged_hit += usize::from(correct);
        } else {
            genuine += 1;
            genuine_hit += usize::from(correct);
        }
    }
    let per_writer_accuracy = clf
        .labels
        .iter()
        .enumerate()
        .filter_map(|(c, &writer)| {
            let total: u64 = confusion[c].iter().sum();
            (total > 0).then(|| (writer, confusion[c][c] as f64 / total as f64))
        })
        .collect();
    let n = images.len() as f64;
    let frac = |hit: usize, total: usize| (total > 0).then(|| hit as f64 / total as f64);
    Ok(EvalReport {
        condition,
        seed: seed_value,
        samples: images.len(),
        top1: hit1 as f64 / n,
        top5: hit5 as f64 / n,
        per_writer_accuracy,
        confusion,
        genuine_top1: frac(genuine_hit, genuine),
        forged_top1: frac(forged_hit, forged),
    })
}

/// Every condition in a sweep: the baseline, then each defect ratio, then each
/// forgery ratio.
pub fn sweep_conditions(cfg: &EvalConfig) -> Vec<Condition> {
    let mut out = vec![Condition::BASELINE];
    out.extend(cfg.defect_ratios.iter().map(|&d| Condition {
        defect_ratio: d,
        forgery_ratio: 0.0,
    }));
    out.extend(cfg.forgery_ratios.iter().map(|&f| Condition {
        defect_ratio: 0.0,
        forgery_ratio: f,
    }));
    out
}

/// One report per (condition, seed).
pub fn robustness_sweep(
    clf: &ClassifierState,
    manifest: &CorpusManifest,
    filter: &FilterConfig,
    matching: &MatchingConfig,
    cfg: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    for &d in &cfg.defect_ratios {
        if !(d > 0.0 && d <= 1.0) {
            return Err(Error::range("defect ratio", d, "in (0, 1]"));
        }
    }
    for &f in &cfg.forgery_ratios {
        if !(f > 0.0 && f <= 0.5) {
            return Err(Error::range("forgery ratio", f, "in (0, 0.5]"));
        }
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one seed".into()));
    }
    let filter = cfg.prefilter.then_some(filter);
    let mut reports = Vec::new();
    for condition in sweep_conditions(cfg) {
        for &s in &cfg.seeds {
            let images = prepare_test_set(manifest, condition, s, filter)?;
            reports.push(evaluate(clf, &images, condition, s, matching, cfg)?);
        }
    }
    Ok(reports)
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `82.782±0.332` style, in percent.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{:.3}±{:.3}", m * 100.0, s * 100.0)
}

/// Group reports by condition, keeping first-seen order.
pub fn group_by_condition(reports: &[EvalReport]) -> Vec<(Condition, Vec<&EvalReport>)> {
    let mut groups: Vec<(Condition, Vec<&EvalReport>)> = Vec::new();
    for r in reports {
        match groups.iter_mut().find(|(c, _)| *c == r.condition) {
            Some((_, v)) => v.push(r),
            None => groups.push((r.condition, vec![r])),
        }
    }
    groups
}

/// One row per condition with top-1 and top-5 as mean±std over seeds.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("condition,defect_ratio,forgery_ratio,seeds,top1,top5\n");
    for (c, group) in group_by_condition(reports) {
        let top1: Vec<f64> = group.iter().map(|r| r.top1).collect();
        let top5: Vec<f64> = group.iter().map(|r| r.top5).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            c.label(),
            c.defect_ratio,
            c.forgery_ratio,
            group.len(),
            format_mean_std(&top1),
            format_mean_std(&top5)
        );
    }
    out
}

/// One row per report.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "condition,defect_ratio,forgery_ratio,seed,samples,top1,top5,genuine_top1,forged_top1\n",
    );
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{},{}",
            r.condition.label(),
            r.condition.defect_ratio,
            r.condition.forgery_ratio,
            r.seed,
            r.samples,
            r.top1,
            r.top5,
            opt(r.genuine_top1),
            opt(r.forged_top1)
        );
    }
    out
}
