//! Text tables and SVG figures built from a finished run directory.

use std::fmt::Write as _;
use std::path::PathBuf;

use hwid_core::contrastive::{parse_metrics_csv, MetricRow};
use hwid_core::corpus::write_atomic;
use hwid_core::evaluate::{format_mean_std, group_by_condition, EvalReport};
use hwid_core::{Error, Result};

use crate::config::RunConfig;
use crate::pipeline::{load_pretrain, load_reports, RunLayout};

/// Condition columns in sweep order, one row of top-1 accuracies (percent,
/// mean±std over seeds), then the same for top-5.
pub fn robustness_table(reports: &[EvalReport]) -> String {
    let groups = group_by_condition(reports);
    let mut header = vec!["metric".to_string()];
    header.extend(groups.iter().map(|(c, _)| c.label()));
    let mut rows = vec![header];
    for (name, pick) in [("top-1", 0), ("top-5", 1)] {
        let mut row = vec![name.to_string()];
        for (_, group) in &groups {
            let v: Vec<f64> = group
                .iter()
                .map(|r| if pick == 0 { r.top1 } else { r.top5 })
                .collect();
            row.push(format_mean_std(&v));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

/// One row per condition: accuracies in percent, mean±std over seeds.
pub fn condition_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("condition,seeds,samples,top1,top5,genuine_top1,forged_top1\n");
    for (c, group) in group_by_condition(reports) {
        let col = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
            let v: Vec<f64> = group.iter().filter_map(|r| f(r)).collect();
            if v.is_empty() {
                String::new()
            } else {
                format_mean_std(&v)
            }
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.label(),
            group.len(),
            group.iter().map(|r| r.samples).sum::<usize>(),
            col(&|r| Some(r.top1)),
            col(&|r| Some(r.top5)),
            col(&|r| r.genuine_top1),
            col(&|r| r.forged_top1),
        );
    }
    out
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 360.0;
const MARGIN: f64 = 48.0;

pub fn loss_curve_svg(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1) = (MARGIN, PLOT_W - MARGIN / 2.0);
    let (y0, y1) = (PLOT_H - MARGIN, MARGIN / 2.0);
    let _ = writeln!(
        out,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    if !rows.is_empty() {
        let smin = rows.first().map_or(0, |r| r.step) as f64;
        let smax = rows.last().map_or(0, |r| r.step) as f64;
        let lmin = rows.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
        let lmax = rows
            .iter()
            .map(|r| r.loss)
            .fold(f64::NEG_INFINITY, f64::max);
        let sx = |s: f64| {
            if smax > smin {
                x0 + (s - smin) / (smax - smin) * (x1 - x0)
            } else {
                (x0 + x1) / 2.0
            }
        };
        let sy = |l: f64| {
            if lmax > lmin {
                y0 - (l - lmin) / (lmax - lmin) * (y0 - y1)
            } else {
                (y0 + y1) / 2.0
            }
        };
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.step as f64), sy(r.loss)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let label = |x: f64, y: f64, anchor: &str, text: String| {
            format!(
                r#"<text x="{x:.2}" y="{y:.2}" font-size="11" font-family="sans-serif" text-anchor="{anchor}">{text}</text>"#
            )
        };
        let _ = writeln!(
            out,
            "{}",
            label(x0, y0 + 16.0, "middle", format!("{smin:.0}"))
        );
        let _ = writeln!(
            out,
            "{}",
            label(x1, y0 + 16.0, "middle", format!("{smax:.0}"))
        );
        let _ = writeln!(out, "{}", label(x0 - 4.0, y0, "end", format!("{lmin:.3}")));
        let _ = writeln!(
            out,
            "{}",
            label(x0 - 4.0, y1 + 4.0, "end", format!("{lmax:.3}"))
        );
        let _ = writeln!(
            out,
            "{}",
            label((x0 + x1) / 2.0, PLOT_H - 8.0, "middle", "step".into())
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Patch weights as a `rows`×`cols` grid of gray cells; darker is heavier.
/// Pruned patches are drawn hatched red.
pub fn heatmap_svg(weights: &[f64], active: &[bool], rows: usize, cols: usize) -> Result<String> {
    if weights.len() != rows * cols || active.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} weights for a {rows}x{cols} grid",
            weights.len()
        )));
    }
    const CELL: usize = 24;
    let max = weights.iter().copied().fold(0.0, f64::max);
    let (w, h) = (cols * CELL, rows * CELL);
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" data-rows="{rows}" data-cols="{cols}">"#
    );
    out.push('\n');
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            let fill = if !active[k] {
                "rgb(200,60,60)".to_string()
            } else {
                let level = if max > 0.0 {
                    255.0 * (1.0 - weights[k] / max)
                } else {
                    255.0
                };
                let g = level.round() as u8;
                format!("rgb({g},{g},{g})")
            };
            let _ = writeln!(
                out,
                r#"<rect class="patch" x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{fill}" data-weight="{:.6e}"/>"#,
                c * CELL,
                r * CELL,
                weights[k]
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Write the report set and return the files written, in a fixed order.
pub fn emit_report(layout: &RunLayout, config: &RunConfig) -> Result<Vec<PathBuf>> {
    let needed = [
        layout.metrics(),
        layout.pretrain_checkpoint(),
        layout.sweep_reports(),
    ];
    let missing: Vec<String> = needed
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::State(format!(
            "missing artifacts: {}",
            missing.join(", ")
        )));
    }
    let metrics_text = std::fs::read_to_string(layout.metrics()).map_err(|e| Error::Io {
        path: layout.metrics(),
        source: e,
    })?;
    let rows = parse_metrics_csv(&metrics_text)?;
    let reports = load_reports(&layout.sweep_reports())?;
    let (state, ids) = load_pretrain(layout)?;

    let dir = layout.report_dir();
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
        Ok(())
    };
    put("robustness.txt".into(), robustness_table(&reports))?;
    put("conditions.csv".into(), condition_table(&reports))?;
    put("loss_curve.svg".into(), loss_curve_svg(&rows))?;
    let p = state.encoder.config.patch_size;
    let (grid_rows, grid_cols) = (
        config.corpus.image_height / p,
        config.corpus.image_width / p,
    );
    for (id, m) in ids.iter().zip(&state.matching).take(config.report.heatmaps) {
        let svg = heatmap_svg(
            m.weights.weights(),
            m.weights.active(),
            grid_rows,
            grid_cols,
        )?;
        put(format!("heatmaps/{id}.svg"), svg)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hwid_core::evaluate::Condition;
    use std::collections::BTreeMap;

    fn report(defect: f64, seed: u64, top1: f64) -> EvalReport {
        EvalReport {
            condition: Condition {
                defect_ratio: defect,
                forgery_ratio: 0.0,
            },
            seed,
            samples: 10,
            top1,
            top5: 1.0,
            per_writer_accuracy: BTreeMap::new(),
            confusion: Vec::new(),
            genuine_top1: Some(top1),
            forged_top1: None,
        }
    }

    #[test]
    fn table_columns_follow_conditions() {
        let reports = [
            report(0.0, 0, 0.8),
            report(0.0, 1, 0.6),
            report(0.3, 0, 0.5),
            report(0.3, 1, 0.5),
        ];
        let t = robustness_table(&reports);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        let header: Vec<&str> = lines[0].split('|').map(str::trim).collect();
        assert_eq!(header, ["metric", "baseline", "defect+30%"]);
        assert!(lines[2].contains("70.000±14.142"));
        assert!(lines[2].contains("50.000±0.000"));
    }

    #[test]
    fn condition_table_leaves_absent_subsets_empty() {
        let t = condition_table(&[report(0.0, 0, 0.8)]);
        assert_eq!(
            t.lines().nth(1).unwrap(),
            "baseline,1,10,80.000±0.000,100.000±0.000,80.000±0.000,"
        );
    }

    #[test]
    fn heatmap_has_one_cell_per_patch() {
        let w = vec![0.25, 0.25, 0.5, 0.0, 0.0, 0.0];
        let active = [true, true, true, false, false, false];
        let svg = heatmap_svg(&w, &active, 2, 3).unwrap();
        assert_eq!(svg.matches(r#"class="patch""#).count(), 6);
        assert!(svg.contains(r#"data-rows="2" data-cols="3""#));
        assert!(heatmap_svg(&w, &active, 3, 3).is_err());
    }

    #[test]
    fn loss_curve_handles_flat_and_empty_logs() {
        assert!(loss_curve_svg(&[]).ends_with("</svg>\n"));
        let flat = [
            MetricRow {
                step: 0,
                loss: 1.0,
                mean_active_patches: 64.0,
                wall_ms: 0,
            },
            MetricRow {
                step: 10,
                loss: 1.0,
                mean_active_patches: 64.0,
                wall_ms: 0,
            },
        ];
        let svg = loss_curve_svg(&flat);
        assert!(svg.contains("<polyline") && !svg.contains("NaN"));
    }
}
