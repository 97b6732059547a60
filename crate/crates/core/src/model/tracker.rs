//! Stateful single-object tracking loop over aggregated frames.

use super::net::{Fwd, Model};
use crate::error::{Error, Result};
use crate::event::{crop_resize, BBoxN, CropMap};
use crate::grid::Volume;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor as Tn};

pub const TEMPLATE_CONTEXT: f64 = 2.0;
pub const SEARCH_CONTEXT: f64 = 4.0;

/// Tracking state: cached template features and the last predicted box in
/// normalized image coordinates. The template is never updated.
pub struct TrackerState<S: Scalar> {
    template_features: Tn<S>,
    pub prev_box: BBoxN,
    pub frame_index: usize,
}

/// Optional per-step diagnostics for heatmap dumps.
pub struct StepAux {
    /// Channel-mean magnitude of the fused map, row-major `G x G`.
    pub fused_map: Vec<f64>,
    /// Center softmax distribution, row-major `G x G`.
    pub center_map: Vec<f64>,
    pub grid: usize,
}

pub struct Tracker<'m, S: Scalar> {
    model: &'m Model<S>,
    pub template_context: f64,
    pub search_context: f64,
}

impl<'m, S: Scalar> Tracker<'m, S> {
    pub fn new(model: &'m Model<S>) -> Self {
        Self {
            model,
            template_context: TEMPLATE_CONTEXT,
            search_context: SEARCH_CONTEXT,
        }
    }

    /// Initialize from the first frame and its ground-truth box: crop the
    /// template, cache its features.
    pub fn init(&self, frame: &Volume<S>, gt_box: &BBoxN) -> Result<TrackerState<S>> {
        if !gt_box.has_positive_area() {
            return Err(Error::Model("init box must have positive area".into()));
        }
        let size = self.model.config().template_size;
        let (crop, _) = crop_resize(frame, gt_box, self.template_context, size, size)?;
        let features = no_grad(|| {
            let mut fwd = Fwd::eval();
            self.model.extract_features(&crop, &mut fwd)
        })?;
        Ok(TrackerState {
            template_features: features,
            prev_box: *gt_box,
            frame_index: 0,
        })
    }

    /// One tracking step: crop the search window around the previous box,
    /// run the model, and map the crop-frame prediction back to image
    /// coordinates (clipped to the frame).
    pub fn step(
        &self,
        state: &mut TrackerState<S>,
        frame: &Volume<S>,
        want_aux: bool,
    ) -> Result<(BBoxN, Option<StepAux>)> {
        let size = self.model.config().search_size;
        let (crop, map) = crop_resize(frame, &state.prev_box, self.search_context, size, size)?;
        let (crop_box, aux) = no_grad(|| -> Result<(BBoxN, Option<StepAux>)> {
            let mut fwd = Fwd::eval();
            let f_x = self.model.extract_features(&crop, &mut fwd)?;
            let out = self
                .model
                .forward_features(&state.template_features, &f_x, &mut fwd)?;
            let aux = want_aux.then(|| {
                let g = self.model.config().search_grid();
                let d = self.model.config().embed_dim;
                let fused = out.fused.data_vec();
                let mut fused_map = vec![0.0f64; g * g];
                for (i, v) in fused.iter().enumerate() {
                    fused_map[i % (g * g)] += v.as_f64().abs() / d as f64;
                }
                StepAux {
                    fused_map,
                    center_map: out.center_probs.data_vec().iter().map(|v| v.as_f64()).collect(),
                    grid: g,
                }
            });
            Ok((out.bbox.values(), aux))
        })?;
        let image_box = restore_box(&map, &crop_box, frame.width as f64, frame.height as f64);
        state.prev_box = image_box;
        state.frame_index += 1;
        Ok((image_box, aux))
    }
}

/// Map a crop-frame normalized box back to image-frame normalized
/// coordinates, clipped into the frame.
pub fn restore_box(map: &CropMap, crop_box: &BBoxN, image_w: f64, image_h: f64) -> BBoxN {
    map.box_to_image(crop_box, image_w, image_h).clamped()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::crop_resize;
    use crate::grid::Grid;
    use crate::model::{ModelConfig, ModelParams};

    fn tiny_frame(w: usize, h: usize) -> Volume<f64> {
        let data = (0..w * h).map(|i| (i % 7) as f64 / 7.0).collect();
        Grid::from_vec(w, h, data).into_volume()
    }

    #[test]
    fn stubbed_forward_returning_centered_box_keeps_state_fixed() {
        // If the model returned exactly the crop-frame image of the previous
        // box, restoring through the crop map must reproduce that box.
        let frame = tiny_frame(128, 128);
        let prev = BBoxN::new(0.4, 0.55, 0.15, 0.2);
        let (_, map) = crop_resize(&frame, &prev, SEARCH_CONTEXT, 96, 96).unwrap();
        let crop_box = map.box_to_crop(&prev, 128.0, 128.0);
        assert!((crop_box.cx - 0.5).abs() < 1e-12);
        assert!((crop_box.cy - 0.5).abs() < 1e-12);
        let back = restore_box(&map, &crop_box, 128.0, 128.0);
        assert!((back.cx - prev.cx).abs() < 1e-12);
        assert!((back.cy - prev.cy).abs() < 1e-12);
        assert!((back.w - prev.w).abs() < 1e-12);
        assert!((back.h - prev.h).abs() < 1e-12);
    }

    #[test]
    fn tracker_init_caches_expected_feature_shape_and_is_deterministic() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f64>::init(&cfg, 11).unwrap();
        let model = Model::bind(&params, false).unwrap();
        let tracker = Tracker::new(&model);
        let frame = tiny_frame(128, 128);
        // box at the image corner: crop is zero-padded, no error
        let corner = BBoxN::new(0.02, 0.03, 0.1, 0.1);
        let a = tracker.init(&frame, &corner).unwrap();
        let b = tracker.init(&frame, &corner).unwrap();
        assert_eq!(
            a.template_features.shape(),
            &[cfg.feature_channels(), cfg.template_grid(), cfg.template_grid()]
        );
        assert_eq!(a.template_features.data_vec(), b.template_features.data_vec());
        assert_eq!(a.prev_box, corner);
    }

    #[test]
    fn tracker_steps_are_deterministic_and_clipped() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let model = Model::bind(&params, false).unwrap();
        let tracker = Tracker::new(&model);
        let frames: Vec<Volume<f64>> = (0..3).map(|_| tiny_frame(128, 128)).collect();
        let gt = BBoxN::new(0.5, 0.5, 0.2, 0.2);

        let run = || {
            let mut state = tracker.init(&frames[0], &gt).unwrap();
            frames[1..]
                .iter()
                .map(|f| tracker.step(&mut state, f, false).unwrap().0)
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for bx in &a {
            assert!(bx.cx >= 0.0 && bx.cx <= 1.0);
            assert!(bx.cy >= 0.0 && bx.cy <= 1.0);
            assert!(bx.w > 0.0 && bx.w <= 1.0);
            assert!(bx.h > 0.0 && bx.h <= 1.0);
        }
    }
}
