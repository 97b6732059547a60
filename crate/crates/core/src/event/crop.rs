//! Context crops with bilinear resampling, plus the exact affine map used.

use crate::grid::Volume;
use crate::scalar::Scalar;

use super::{BBoxN, EventError};

/// Affine map from crop coordinates to source-image pixel coordinates.
///
/// Crop coordinates are normalized to [0, 1] over the crop square; image
/// coordinates are continuous pixels (pixel `i` spans `[i, i+1)`, center at
/// `i + 0.5`). The map is axis-aligned and exactly invertible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropMap {
    pub left: f64,
    pub top: f64,
    pub side_x: f64,
    pub side_y: f64,
}

impl CropMap {
    #[inline]
    pub fn to_image(&self, crop_x: f64, crop_y: f64) -> (f64, f64) {
        (self.left + crop_x * self.side_x, self.top + crop_y * self.side_y)
    }

    #[inline]
    pub fn to_crop(&self, image_x: f64, image_y: f64) -> (f64, f64) {
        (
            (image_x - self.left) / self.side_x,
            (image_y - self.top) / self.side_y,
        )
    }

    /// Map a crop-frame normalized box to an image-frame normalized box.
    pub fn box_to_image(&self, b: &BBoxN, image_w: f64, image_h: f64) -> BBoxN {
        let (cx_px, cy_px) = self.to_image(b.cx, b.cy);
        BBoxN {
            cx: cx_px / image_w,
            cy: cy_px / image_h,
            w: b.w * self.side_x / image_w,
            h: b.h * self.side_y / image_h,
        }
    }

    /// Map an image-frame normalized box to a crop-frame normalized box.
    pub fn box_to_crop(&self, b: &BBoxN, image_w: f64, image_h: f64) -> BBoxN {
        let (cx, cy) = self.to_crop(b.cx * image_w, b.cy * image_h);
        BBoxN {
            cx,
            cy,
            w: b.w * image_w / self.side_x,
            h: b.h * image_h / self.side_y,
        }
    }
}

/// Cut a square context window around `bbox` and resample it to `out_h x
/// out_w` with bilinear interpolation, zero-padding outside the source.
///
/// The square is centered on the box center with side `context * max(w_px,
/// h_px)`. Every channel is resampled with the same map, which is returned
/// so predictions in crop coordinates can be carried back to the image.
pub fn crop_resize<S: Scalar>(
    source: &Volume<S>,
    bbox: &BBoxN,
    context: f64,
    out_h: usize,
    out_w: usize,
) -> Result<(Volume<S>, CropMap), EventError> {
    if !bbox.has_positive_area() {
        return Err(EventError::DegenerateBox);
    }
    assert!(context > 0.0, "context factor must be positive");
    let img_w = source.width as f64;
    let img_h = source.height as f64;
    let box_w_px = bbox.w * img_w;
    let box_h_px = bbox.h * img_h;
    let side = context * box_w_px.max(box_h_px);
    let cx = bbox.cx * img_w;
    let cy = bbox.cy * img_h;
    let map = CropMap {
        left: cx - side / 2.0,
        top: cy - side / 2.0,
        side_x: side,
        side_y: side,
    };

    let mut out = Volume::zeros(source.channels, out_h, out_w);
    let sx = side / out_w as f64;
    let sy = side / out_h as f64;
    for c in 0..source.channels {
        let plane = source.channel(c);
        for r in 0..out_h {
            let src_y = map.top + (r as f64 + 0.5) * sy;
            for q in 0..out_w {
                let src_x = map.left + (q as f64 + 0.5) * sx;
                let v = bilinear(plane, source.width, source.height, src_x, src_y);
                out.set(c, r, q, v);
            }
        }
    }
    Ok((out, map))
}

/// Sample a plane at a continuous pixel coordinate (centers at i + 0.5),
/// interpolating between the four neighbours and treating everything
/// outside the plane as zero.
fn bilinear<S: Scalar>(plane: &[S], width: usize, height: usize, x: f64, y: f64) -> S {
    let gx = x - 0.5;
    let gy = y - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let fx = S::from_f64(gx - x0);
    let fy = S::from_f64(gy - y0);
    let x0 = x0 as i64;
    let y0 = y0 as i64;

    let at = |xi: i64, yi: i64| -> S {
        if xi < 0 || yi < 0 || xi >= width as i64 || yi >= height as i64 {
            S::zero()
        } else {
            plane[yi as usize * width + xi as usize]
        }
    };

    let one = S::one();
    at(x0, y0) * (one - fx) * (one - fy)
        + at(x0 + 1, y0) * fx * (one - fy)
        + at(x0, y0 + 1) * (one - fx) * fy
        + at(x0 + 1, y0 + 1) * fx * fy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn ramp(w: usize, h: usize) -> Volume<f64> {
        let data: Vec<f64> = (0..w * h).map(|i| i as f64).collect();
        Grid::from_vec(w, h, data).into_volume()
    }

    #[test]
    fn full_frame_crop_at_native_size_is_identity() {
        let v = ramp(16, 16);
        let b = BBoxN::new(0.5, 0.5, 1.0, 1.0);
        let (out, map) = crop_resize(&v, &b, 1.0, 16, 16).unwrap();
        let max_diff = out
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(max_diff, 0.0);
        assert_eq!(map.left, 0.0);
        assert_eq!(map.side_x, 16.0);
    }

    #[test]
    fn crop_fully_outside_is_all_zero() {
        let v = ramp(16, 16);
        let b = BBoxN::new(5.0, 5.0, 0.25, 0.25);
        let (out, _) = crop_resize(&v, &b, 2.0, 8, 8).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn affine_roundtrip_is_exact() {
        let v = ramp(32, 24);
        let b = BBoxN::new(0.4, 0.6, 0.2, 0.1);
        let (_, map) = crop_resize(&v, &b, 2.0, 8, 8).unwrap();
        for &(x, y) in &[(0.1, 0.9), (0.5, 0.5), (0.73, 0.21)] {
            let (ix, iy) = map.to_image(x, y);
            let (bx, by) = map.to_crop(ix, iy);
            assert!((bx - x).abs() < 1e-9);
            assert!((by - y).abs() < 1e-9);
        }
    }

    #[test]
    fn box_roundtrip_through_crop_map() {
        let v = ramp(64, 64);
        let b = BBoxN::new(0.5, 0.5, 0.2, 0.3);
        let (_, map) = crop_resize(&v, &b, 4.0, 16, 16).unwrap();
        let in_crop = map.box_to_crop(&b, 64.0, 64.0);
        // The source box is centered in its own context crop.
        assert!((in_crop.cx - 0.5).abs() < 1e-12);
        assert!((in_crop.cy - 0.5).abs() < 1e-12);
        let back = map.box_to_image(&in_crop, 64.0, 64.0);
        assert!((back.cx - b.cx).abs() < 1e-12);
        assert!((back.w - b.w).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let v = ramp(16, 16);
        let b = BBoxN::new(0.5, 0.5, 0.0, 0.1);
        assert!(crop_resize(&v, &b, 2.0, 8, 8).is_err());
    }
}
