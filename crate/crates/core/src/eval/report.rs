//! Report assembly and emission (JSON, curve CSVs, SVG plots).
//!
//! Curve CSVs carry `threshold,value` rows with no header, one row per
//! threshold sample. SVG plots use a fixed 800x600 viewBox.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    auc, norm_precision_curve, op_threshold, precision_curve, success_curve, FrameResult,
    SequenceResult,
};
use crate::error::Result;
use crate::sim::ScenarioTag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub tag: ScenarioTag,
    pub auc: f64,
    pub precision_at_20px: f64,
    pub norm_precision_at_02: f64,
    pub excluded: usize,
    pub frames: Vec<FrameResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStats {
    pub tag: ScenarioTag,
    pub sequences: usize,
    pub frames: usize,
    pub auc: f64,
    pub precision_at_20px: f64,
    pub norm_precision_at_02: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub op50: f64,
    pub op75: f64,
    pub precision_at_20px: f64,
    pub norm_precision_at_02: f64,
    pub excluded_frames: usize,
    /// 101 samples, thresholds 0.00..=1.00.
    pub success_curve: Vec<f64>,
    /// 51 samples, thresholds 0..=50 px.
    pub precision_curve: Vec<f64>,
    /// 51 samples, thresholds 0.00..=0.50.
    pub norm_precision_curve: Vec<f64>,
    pub scenario_breakdown: Vec<ScenarioStats>,
    pub sequences: Vec<SequenceReport>,
}

fn pooled_scalars(frames: &[FrameResult]) -> (f64, f64, f64) {
    let s = success_curve(frames);
    let p = precision_curve(frames);
    let np = norm_precision_curve(frames);
    (auc(&s), p[20], np[20])
}

impl EvalReport {
    /// Pool all frames across sequences (the standard one-pass protocol)
    /// and derive curves, scalars, and a per-scenario breakdown.
    pub fn assemble(results: &[SequenceResult]) -> Self {
        let all: Vec<FrameResult> = results.iter().flat_map(|r| r.frames.clone()).collect();
        let success = success_curve(&all);
        let precision = precision_curve(&all);
        let norm_precision = norm_precision_curve(&all);

        let mut tags: Vec<ScenarioTag> = results.iter().map(|r| r.tag).collect();
        tags.sort_by_key(|t| format!("{t}"));
        tags.dedup();
        let scenario_breakdown = tags
            .into_iter()
            .map(|tag| {
                let frames: Vec<FrameResult> = results
                    .iter()
                    .filter(|r| r.tag == tag)
                    .flat_map(|r| r.frames.clone())
                    .collect();
                let (a, p20, np02) = pooled_scalars(&frames);
                ScenarioStats {
                    tag,
                    sequences: results.iter().filter(|r| r.tag == tag).count(),
                    frames: frames.len(),
                    auc: a,
                    precision_at_20px: p20,
                    norm_precision_at_02: np02,
                }
            })
            .collect();

        let sequences = results
            .iter()
            .map(|r| {
                let (a, p20, np02) = pooled_scalars(&r.frames);
                SequenceReport {
                    name: r.name.clone(),
                    tag: r.tag,
                    auc: a,
                    precision_at_20px: p20,
                    norm_precision_at_02: np02,
                    excluded: r.excluded,
                    frames: r.frames.clone(),
                }
            })
            .collect();

        EvalReport {
            auc: auc(&success),
            op50: op_threshold(&all, 0.5),
            op75: op_threshold(&all, 0.75),
            precision_at_20px: precision[20],
            norm_precision_at_02: norm_precision[20],
            excluded_frames: results.iter().map(|r| r.excluded).sum(),
            success_curve: success,
            precision_curve: precision,
            norm_precision_curve: norm_precision,
            scenario_breakdown,
            sequences,
        }
    }
}

fn curve_csv(thresholds: impl Iterator<Item = f64>, values: &[f64]) -> String {
    let mut out = String::new();
    for (t, v) in thresholds.zip(values) {
        out.push_str(&format!("{t},{v}\n"));
    }
    out
}

/// Minimal deterministic line plot in a fixed 800x600 viewBox.
fn svg_curve(title: &str, x_label: &str, x_max: f64, values: &[f64]) -> String {
    let (w, h) = (800.0, 600.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let n = values.len().max(2);
    let mut points = String::new();
    for (i, v) in values.iter().enumerate() {
        let x = ml + plot_w * i as f64 / (n - 1) as f64;
        let y = mt + plot_h * (1.0 - v.clamp(0.0, 1.0));
        points.push_str(&format!("{x:.2},{y:.2} "));
    }
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"25\" text-anchor=\"middle\" font-size=\"20\" font-family=\"sans-serif\">{title}</text>\n",
        w / 2.0
    ));
    // axes
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        mt + plot_h,
        ml + plot_w
    ));
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{0}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    for k in 0..=5 {
        let fy = k as f64 / 5.0;
        let y = mt + plot_h * (1.0 - fy);
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"12\" font-family=\"sans-serif\">{fy:.1}</text>\n",
            ml - 8.0,
            y + 4.0
        ));
        let fx = k as f64 / 5.0;
        let x = ml + plot_w * fx;
        s.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\">{:.2}</text>\n",
            mt + plot_h + 20.0,
            fx * x_max
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"14\" font-family=\"sans-serif\">{x_label}</text>\n",
        ml + plot_w / 2.0,
        h - 12.0
    ));
    s.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"{}\"/>\n",
        points.trim_end()
    ));
    s.push_str("</svg>\n");
    s
}

/// Write `report.json`, the three curve CSVs, and the success/normalized
/// precision SVG plots into `dir`. Byte-deterministic for equal reports.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(dir.join("report.json"), json)?;

    fs::write(
        dir.join("success_curve.csv"),
        curve_csv((0..=100).map(|k| k as f64 / 100.0), &report.success_curve),
    )?;
    fs::write(
        dir.join("precision_curve.csv"),
        curve_csv((0..=50).map(|k| k as f64), &report.precision_curve),
    )?;
    fs::write(
        dir.join("norm_precision_curve.csv"),
        curve_csv(
            (0..=50).map(|k| k as f64 / 100.0),
            &report.norm_precision_curve,
        ),
    )?;
    fs::write(
        dir.join("success_plot.svg"),
        svg_curve(
            "Success plot",
            "Overlap threshold",
            1.0,
            &report.success_curve,
        ),
    )?;
    fs::write(
        dir.join("norm_precision_plot.svg"),
        svg_curve(
            "Normalized precision plot",
            "Normalized center-error threshold",
            0.5,
            &report.norm_precision_curve,
        ),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{BBoxN, Geometry};

    fn toy_results() -> Vec<SequenceResult> {
        let g = Geometry::new(100, 100);
        let gt = BBoxN::new(0.5, 0.5, 0.2, 0.2);
        let near = BBoxN::new(0.52, 0.5, 0.2, 0.2);
        let frames: Vec<FrameResult> = (1..6)
            .map(|k| FrameResult::score(k, if k % 2 == 0 { gt } else { near }, gt, g))
            .collect();
        vec![SequenceResult {
            name: "seq0".into(),
            tag: ScenarioTag::Plain,
            frames,
            excluded: 1,
        }]
    }

    #[test]
    fn report_json_roundtrips_to_an_equal_report() {
        let report = EvalReport::assemble(&toy_results());
        let text = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn emitted_files_are_deterministic_and_sized() {
        let report = EvalReport::assemble(&toy_results());
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path()).unwrap();
        let read =
            |name: &str| fs::read(dir.path().join(name)).expect("emitted file exists");
        let first: Vec<Vec<u8>> = [
            "report.json",
            "success_curve.csv",
            "precision_curve.csv",
            "norm_precision_curve.csv",
            "success_plot.svg",
            "norm_precision_plot.svg",
        ]
        .iter()
        .map(|n| read(n))
        .collect();
        let success = String::from_utf8(first[1].clone()).unwrap();
        assert_eq!(success.lines().count(), 101);
        assert_eq!(
            String::from_utf8(first[2].clone()).unwrap().lines().count(),
            51
        );
        emit_report(&report, dir.path()).unwrap();
        for (name, before) in [
            "report.json",
            "success_curve.csv",
            "precision_curve.csv",
            "norm_precision_curve.csv",
            "success_plot.svg",
            "norm_precision_plot.svg",
        ]
        .iter()
        .zip(first)
        {
            assert_eq!(read(name), before, "{name} changed between emissions");
        }
    }

    #[test]
    fn curves_are_monotone_in_the_right_direction() {
        let report = EvalReport::assemble(&toy_results());
        for w in report.success_curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        for w in report
            .precision_curve
            .windows(2)
            .chain(report.norm_precision_curve.windows(2))
        {
            assert!(w[1] >= w[0] - 1e-12);
        }
        assert!(report.excluded_frames == 1);
    }
}
