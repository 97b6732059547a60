//! One-pass evaluation: overlap and center-error metrics, success and
//! precision curves, and report assembly.

mod report;

pub use report::{emit_report, EvalReport, ScenarioStats, SequenceReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{BBoxN, Geometry};
use crate::grid::Volume;
use crate::model::{Model, StepAux, Tracker, TrackerState};
use crate::scalar::Scalar;
use crate::sim::{LoadedSequence, ScenarioTag};

/// Intersection over union of two normalized boxes. Total: any zero-area
/// operand yields 0.
pub fn iou(a: &BBoxN, b: &BBoxN) -> f64 {
    if !a.has_positive_area() || !b.has_positive_area() {
        return 0.0;
    }
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    // areas from the same corner extents, so identical boxes hit exactly 1
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    inter / (area_a + area_b - inter)
}

/// Per-frame scoring record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub pred: BBoxN,
    pub gt: BBoxN,
    pub iou: f64,
    /// Euclidean center distance in pixels.
    pub center_err_px: f64,
    /// Center offset normalized elementwise by the ground-truth extent.
    pub norm_center_err: f64,
}

impl FrameResult {
    pub fn score(frame: usize, pred: BBoxN, gt: BBoxN, geometry: Geometry) -> Self {
        let dx_px = (pred.cx - gt.cx) * geometry.width as f64;
        let dy_px = (pred.cy - gt.cy) * geometry.height as f64;
        let nx = (pred.cx - gt.cx) / gt.w;
        let ny = (pred.cy - gt.cy) / gt.h;
        Self {
            frame,
            pred,
            gt,
            iou: iou(&pred, &gt),
            center_err_px: (dx_px * dx_px + dy_px * dy_px).sqrt(),
            norm_center_err: (nx * nx + ny * ny).sqrt(),
        }
    }
}

/// Per-sequence OPE outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub tag: ScenarioTag,
    pub frames: Vec<FrameResult>,
    /// Frames skipped for degenerate ground truth.
    pub excluded: usize,
}

/// Anything that can run the one-pass protocol on a sequence.
pub trait SequenceTracker {
    fn init(&mut self, frame: &Volume<f64>, gt: &BBoxN) -> Result<()>;
    fn step(&mut self, frame: &Volume<f64>) -> Result<BBoxN>;
}

/// The real model behind the `SequenceTracker` interface.
pub struct ModelTracker<'m, S: Scalar> {
    tracker: Tracker<'m, S>,
    state: Option<TrackerState<S>>,
    /// When set, per-step diagnostics are retained for heatmap dumps.
    pub keep_aux: bool,
    pub aux: Vec<StepAux>,
}

impl<'m, S: Scalar> ModelTracker<'m, S> {
    pub fn new(model: &'m Model<S>) -> Self {
        Self {
            tracker: Tracker::new(model),
            state: None,
            keep_aux: false,
            aux: Vec::new(),
        }
    }
}

impl<S: Scalar> SequenceTracker for ModelTracker<'_, S> {
    fn init(&mut self, frame: &Volume<f64>, gt: &BBoxN) -> Result<()> {
        let frame_s = convert_volume::<S>(frame);
        self.state = Some(self.tracker.init(&frame_s, gt)?);
        Ok(())
    }

    fn step(&mut self, frame: &Volume<f64>) -> Result<BBoxN> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Eval("tracker stepped before init".into()))?;
        let frame_s = convert_volume::<S>(frame);
        let (b, aux) = self.tracker.step(state, &frame_s, self.keep_aux)?;
        if let Some(aux) = aux {
            self.aux.push(aux);
        }
        Ok(b)
    }
}

fn convert_volume<S: Scalar>(v: &Volume<f64>) -> Volume<S> {
    Volume::from_vec(
        v.channels,
        v.height,
        v.width,
        v.data().iter().map(|&x| S::from_f64(x)).collect(),
    )
}

/// Stub that replays ground truth (upper bound / plumbing check).
pub struct OracleStub {
    gt: Vec<BBoxN>,
    next: usize,
}

impl OracleStub {
    pub fn new(gt: Vec<BBoxN>) -> Self {
        Self { gt, next: 0 }
    }
}

impl SequenceTracker for OracleStub {
    fn init(&mut self, _frame: &Volume<f64>, _gt: &BBoxN) -> Result<()> {
        self.next = 1;
        Ok(())
    }

    fn step(&mut self, _frame: &Volume<f64>) -> Result<BBoxN> {
        let b = self
            .gt
            .get(self.next)
            .copied()
            .ok_or_else(|| Error::Eval("oracle stub ran out of ground truth".into()))?;
        self.next += 1;
        Ok(b)
    }
}

/// Stub that freezes the initial box.
pub struct StaticStub {
    held: Option<BBoxN>,
}

impl StaticStub {
    pub fn new() -> Self {
        Self { held: None }
    }
}

impl Default for StaticStub {
    fn default() -> Self {
        Self::new()
    }
}

impl SequenceTracker for StaticStub {
    fn init(&mut self, _frame: &Volume<f64>, gt: &BBoxN) -> Result<()> {
        self.held = Some(*gt);
        Ok(())
    }

    fn step(&mut self, _frame: &Volume<f64>) -> Result<BBoxN> {
        self.held
            .ok_or_else(|| Error::Eval("tracker stepped before init".into()))
    }
}

/// One-pass evaluation: initialize on frame 0 ground truth, never reset,
/// score every subsequent frame. Frames with degenerate ground truth are
/// excluded from scoring but still advance the tracker.
pub fn run_ope<'t>(
    sequences: &[LoadedSequence],
    mut make_tracker: impl FnMut(&LoadedSequence) -> Result<Box<dyn SequenceTracker + 't>>,
) -> Result<Vec<SequenceResult>> {
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let gt0 = seq
            .gt
            .first()
            .ok_or_else(|| Error::Eval(format!("{}: no ground truth", seq.name)))?;
        if !gt0.has_positive_area() {
            return Err(Error::Eval(format!(
                "{}: frame 0 ground truth is degenerate",
                seq.name
            )));
        }
        if seq.inputs.len() != seq.gt.len() {
            return Err(Error::Eval(format!(
                "{}: {} frames vs {} ground-truth boxes",
                seq.name,
                seq.inputs.len(),
                seq.gt.len()
            )));
        }
        let mut tracker = make_tracker(seq)?;
        tracker.init(&seq.inputs[0], gt0)?;
        let mut frames = Vec::with_capacity(seq.inputs.len().saturating_sub(1));
        let mut excluded = 0;
        for k in 1..seq.inputs.len() {
            let pred = tracker.step(&seq.inputs[k])?;
            let gt = seq.gt[k];
            if !gt.has_positive_area() {
                excluded += 1;
                continue;
            }
            frames.push(FrameResult::score(k, pred, gt, seq.geometry));
        }
        out.push(SequenceResult {
            name: seq.name.clone(),
            tag: seq.tag,
            frames,
            excluded,
        });
    }
    Ok(out)
}

/// Success rate at each of the 101 overlap thresholds 0.00..=1.00
/// (fraction of frames with `iou >= t`).
pub fn success_curve(frames: &[FrameResult]) -> Vec<f64> {
    let n = frames.len().max(1) as f64;
    (0..=100)
        .map(|k| {
            let t = k as f64 / 100.0;
            frames.iter().filter(|f| f.iou >= t).count() as f64 / n
        })
        .collect()
}

/// Area under the success curve: the arithmetic mean of its samples.
pub fn auc(curve: &[f64]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    curve.iter().sum::<f64>() / curve.len() as f64
}

/// Overlap precision: fraction of frames with `iou` strictly above `t`.
pub fn op_threshold(frames: &[FrameResult], t: f64) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    frames.iter().filter(|f| f.iou > t).count() as f64 / frames.len() as f64
}

/// Center-error curve over pixel thresholds 0..=50.
pub fn precision_curve(frames: &[FrameResult]) -> Vec<f64> {
    let n = frames.len().max(1) as f64;
    (0..=50)
        .map(|px| frames.iter().filter(|f| f.center_err_px <= px as f64).count() as f64 / n)
        .collect()
}

/// Normalized center-error curve over thresholds 0.00..=0.50.
pub fn norm_precision_curve(frames: &[FrameResult]) -> Vec<f64> {
    let n = frames.len().max(1) as f64;
    (0..=50)
        .map(|k| {
            let t = k as f64 / 100.0;
            frames.iter().filter(|f| f.norm_center_err <= t).count() as f64 / n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BBoxN {
        BBoxN::new(cx, cy, w, h)
    }

    #[test]
    fn iou_hand_cases() {
        let a = bb(0.25, 0.25, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        let far = bb(0.9, 0.9, 0.1, 0.1);
        assert_eq!(iou(&a, &far), 0.0);
        let b = bb(0.5, 0.25, 0.5, 0.5);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        // zero-area operands give 0, even when identical
        let z = bb(0.5, 0.5, 0.0, 0.2);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn iou_is_symmetric() {
        let a = bb(0.3, 0.4, 0.25, 0.3);
        let b = bb(0.45, 0.5, 0.3, 0.2);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    fn uniform_results(value: f64, n: usize) -> Vec<FrameResult> {
        (0..n)
            .map(|i| FrameResult {
                frame: i,
                pred: bb(0.5, 0.5, 0.2, 0.2),
                gt: bb(0.5, 0.5, 0.2, 0.2),
                iou: value,
                center_err_px: 0.0,
                norm_center_err: 0.0,
            })
            .collect()
    }

    #[test]
    fn success_curve_flat_cases() {
        let all_one = uniform_results(1.0, 10);
        let curve = success_curve(&all_one);
        assert!(curve.iter().all(|&v| v == 1.0));
        assert_eq!(auc(&curve), 1.0);

        let half = uniform_results(0.5, 10);
        let curve = success_curve(&half);
        for (k, v) in curve.iter().enumerate() {
            let expect = if k <= 50 { 1.0 } else { 0.0 };
            assert_eq!(*v, expect, "threshold index {k}");
        }
        assert!((auc(&curve) - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn op_threshold_is_strict() {
        let frames = uniform_results(0.75, 8);
        assert_eq!(op_threshold(&frames, 0.75), 0.0);
        let frames = uniform_results(0.8, 8);
        assert_eq!(op_threshold(&frames, 0.5), 1.0);
        let mut mixed = uniform_results(0.4, 4);
        mixed.extend(uniform_results(0.6, 4));
        assert_eq!(op_threshold(&mixed, 0.5), 0.5);
    }

    #[test]
    fn precision_counts_under_thresholds() {
        let g = Geometry::new(100, 100);
        let gt = bb(0.5, 0.5, 0.2, 0.2);
        let exact = FrameResult::score(1, gt, gt, g);
        assert_eq!(exact.center_err_px, 0.0);
        let sf = [exact];
        assert_eq!(precision_curve(&sf)[20], 1.0);
        assert_eq!(norm_precision_curve(&sf)[20], 1.0);

        // constant 25 px error -> precision@20 = 0
        let off = FrameResult::score(1, bb(0.75, 0.5, 0.2, 0.2), gt, g);
        assert!((off.center_err_px - 25.0).abs() < 1e-9);
        assert_eq!(precision_curve(&[off])[20], 0.0);

        // dx = 0.1 * gt_w -> normalized error 0.1 < 0.2, counted
        let near = FrameResult::score(1, bb(0.5 + 0.1 * 0.2, 0.5, 0.2, 0.2), gt, g);
        assert!((near.norm_center_err - 0.1).abs() < 1e-9);
        assert_eq!(norm_precision_curve(&[near])[20], 1.0);
    }

    fn toy_sequence(n: usize, moving: bool) -> LoadedSequence {
        let g = Geometry::new(64, 64);
        let inputs = (0..n)
            .map(|_| Volume::zeros(1, 64, 64))
            .collect::<Vec<_>>();
        let gt = (0..n)
            .map(|k| {
                let cx = if moving {
                    0.2 + 0.6 * k as f64 / n as f64
                } else {
                    0.5
                };
                bb(cx, 0.5, 0.2, 0.2)
            })
            .collect();
        LoadedSequence {
            name: "toy".into(),
            tag: ScenarioTag::Plain,
            geometry: g,
            window_ns: 25_000_000,
            inputs,
            gt,
        }
    }

    #[test]
    fn oracle_stub_scores_perfect_overlap() {
        let seq = toy_sequence(12, true);
        let results = run_ope(std::slice::from_ref(&seq), |s| {
            Ok(Box::new(OracleStub::new(s.gt.clone())))
        })
        .unwrap();
        assert_eq!(results[0].frames.len(), 11);
        assert!(results[0].frames.iter().all(|f| f.iou == 1.0));
    }

    #[test]
    fn static_stub_overlap_decays_as_the_target_leaves() {
        let seq = toy_sequence(20, true);
        let results = run_ope(std::slice::from_ref(&seq), |_| {
            Ok(Box::new(StaticStub::new()))
        })
        .unwrap();
        let ious: Vec<f64> = results[0].frames.iter().map(|f| f.iou).collect();
        for w in ious.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "overlap should not recover: {ious:?}");
        }
        assert!(ious.last().unwrap() < &0.1);
    }

    #[test]
    fn ope_is_deterministic_and_rejects_missing_gt() {
        let seq = toy_sequence(8, false);
        let run = || {
            run_ope(std::slice::from_ref(&seq), |s| {
                Ok(Box::new(OracleStub::new(s.gt.clone())))
            })
            .unwrap()
        };
        assert_eq!(run(), run());

        let mut broken = seq;
        broken.gt.clear();
        broken.inputs.clear();
        assert!(run_ope(&[broken], |_| Ok(Box::new(StaticStub::new()))).is_err());
    }
}
