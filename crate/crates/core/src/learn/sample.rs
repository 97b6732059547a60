//! Template/search pair sampling with crop jitter.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::event::{crop_resize, BBoxN};
use crate::grid::Volume;
use crate::model::{SEARCH_CONTEXT, TEMPLATE_CONTEXT};
use crate::model::ModelConfig;
use crate::sim::LoadedSequence;

/// One training example: template crop, search crop, and the ground-truth
/// box expressed in search-crop coordinates.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub template: Volume<f64>,
    pub search: Volume<f64>,
    pub gt_crop: BBoxN,
}

/// Draw a template/search pair from the same sequence, frame gap at most
/// `max_frame_gap`. The search crop is centered on the jittered ground
/// truth (shift in pixels, scale factor on the context side).
pub fn sample_pair(
    sequences: &[LoadedSequence],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<TrainPair> {
    if sequences.is_empty() {
        return Err(Error::Train("no sequences to sample from".into()));
    }
    let seq = &sequences[rng.random_range(0..sequences.len())];
    let n = seq.inputs.len();
    if n < 2 {
        return Err(Error::Train(format!(
            "sequence {} too short to sample a pair",
            seq.name
        )));
    }
    let i = rng.random_range(0..n);
    let gap = cfg.max_frame_gap.max(1) as i64;
    let delta = rng.random_range(-gap..=gap);
    let j = (i as i64 + delta).clamp(0, n as i64 - 1) as usize;

    let t_size = model_cfg.template_size;
    let (template, _) = crop_resize(&seq.inputs[i], &seq.gt[i], TEMPLATE_CONTEXT, t_size, t_size)?;

    let gt = seq.gt[j];
    let img_w = seq.geometry.width as f64;
    let img_h = seq.geometry.height as f64;
    let dx = rng.random_range(-cfg.jitter_shift_px..=cfg.jitter_shift_px);
    let dy = rng.random_range(-cfg.jitter_shift_px..=cfg.jitter_shift_px);
    let scale = rng.random_range(cfg.jitter_scale.0..=cfg.jitter_scale.1);
    let crop_box = BBoxN {
        cx: gt.cx + dx / img_w,
        cy: gt.cy + dy / img_h,
        w: gt.w * scale,
        h: gt.h * scale,
    };
    let s_size = model_cfg.search_size;
    let (search, map) = crop_resize(&seq.inputs[j], &crop_box, SEARCH_CONTEXT, s_size, s_size)?;
    let gt_crop = map.box_to_crop(&gt, img_w, img_h);
    Ok(TrainPair {
        template,
        search,
        gt_crop,
    })
}
