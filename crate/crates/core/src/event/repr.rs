//! Dense network-input representations of one event window.

use serde::{Deserialize, Serialize};

use super::agg::{aggregate_frame, voxel_grid};
use super::EventSlice;
use crate::grid::Volume;
use crate::scalar::Scalar;

/// How an event window becomes a network input volume. Both variants clamp
/// to `[-clip, clip]` and scale into `[-1, 1]` to bound the input range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Representation {
    /// Single-plane signed polarity counts.
    Frame { clip: u32 },
    /// Temporal voxel grid with linearly weighted bins.
    Voxel { bins: usize, clip: u32 },
}

impl Default for Representation {
    fn default() -> Self {
        Representation::Frame { clip: 10 }
    }
}

impl Representation {
    pub fn input_channels(&self) -> usize {
        match self {
            Representation::Frame { .. } => 1,
            Representation::Voxel { bins, .. } => *bins,
        }
    }

    /// Render one window into a normalized `C x H x W` volume.
    pub fn volume<S: Scalar>(&self, slice: &EventSlice) -> Volume<S> {
        match self {
            Representation::Frame { clip } => {
                let frame = aggregate_frame(slice);
                super::agg::normalize_frame::<S>(&frame, *clip).into_volume()
            }
            Representation::Voxel { bins, clip } => {
                let mut vol: Volume<S> = voxel_grid(slice, *bins);
                let c = S::from_f64(*clip as f64);
                for v in vol.data_mut() {
                    *v = (*v).min(c).max(-c) / c;
                }
                vol
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Event, EventStream, Geometry};

    #[test]
    fn representations_are_bounded_and_sized() {
        let g = Geometry::new(8, 8);
        let events = (0..50)
            .map(|i| Event {
                t: i * 7,
                x: (i % 8) as u16,
                y: (i % 5) as u16,
                p: if i % 3 == 0 { -1 } else { 1 },
            })
            .collect();
        let s = EventStream::new(g, events);
        let slice = s.slice(0, 400);
        let frame: Volume<f64> = Representation::Frame { clip: 2 }.volume(&slice);
        assert_eq!((frame.channels, frame.height, frame.width), (1, 8, 8));
        let voxel: Volume<f64> = Representation::Voxel { bins: 4, clip: 2 }.volume(&slice);
        assert_eq!((voxel.channels, voxel.height, voxel.width), (4, 8, 8));
        for v in frame.data().iter().chain(voxel.data()) {
            assert!(*v >= -1.0 && *v <= 1.0);
        }
    }
}
