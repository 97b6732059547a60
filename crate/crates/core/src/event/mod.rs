//! Event streams from a dynamic vision sensor and their dense aggregates.
//!
//! An event is a timestamped polarity spike at one pixel. Streams are kept
//! sorted by timestamp; half-open time windows `[t0, t0 + dt)` slice a stream
//! so that consecutive windows partition it, and each window aggregates into
//! a signed per-pixel polarity count (the event frame fed to the network).

mod agg;
mod crop;
mod io;
mod repr;

pub use agg::{
    aggregate_frame, normalize_frame, voxel_grid, window_events, FrameAggregator, WindowIter,
};
pub use repr::Representation;
pub use crop::{crop_resize, CropMap};
pub use io::{
    parse_csv_events, parse_event_file, parse_gt_boxes, read_binary_events, write_binary_events,
    write_csv_events, write_gt_boxes, EventFormat,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sensor pixel-array dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub width: u16,
    pub height: u16,
}

impl Geometry {
    pub fn new(width: u16, height: u16) -> Self {
        Self { width, height }
    }

    #[inline]
    pub fn contains(&self, x: u16, y: u16) -> bool {
        x < self.width && y < self.height
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// One polarity spike: timestamp (ns), pixel location, polarity in {-1, +1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: i8,
}

#[derive(Debug, Error)]
pub enum EventError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("byte offset {offset}: malformed binary record: {reason}")]
    MalformedRecord { offset: u64, reason: String },
    #[error("line {line}: coordinate ({x}, {y}) outside {width}x{height} geometry")]
    OutOfRange {
        line: usize,
        x: u32,
        y: u32,
        width: u16,
        height: u16,
    },
    #[error("line {line}: unknown polarity token {token:?}")]
    BadPolarity { line: usize, token: String },
    #[error("bad file header: {0}")]
    BadHeader(String),
    #[error("degenerate box: width and height must be positive")]
    DegenerateBox,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A full recording: geometry plus events sorted by non-decreasing timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    geometry: Geometry,
    events: Vec<Event>,
}

impl EventStream {
    /// Build a stream from possibly out-of-order events. Sorting is stable,
    /// so simultaneous events keep their input order.
    pub fn new(geometry: Geometry, mut events: Vec<Event>) -> Self {
        if !events.windows(2).all(|w| w[0].t <= w[1].t) {
            events.sort_by_key(|e| e.t);
        }
        Self { geometry, events }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Timestamp of the last event, or 0 for an empty stream.
    pub fn t_end(&self) -> u64 {
        self.events.last().map_or(0, |e| e.t)
    }

    /// Number of `dt`-windows starting at t=0 needed to cover every event.
    pub fn num_windows(&self, dt: u64) -> usize {
        assert!(dt > 0, "window length must be positive");
        match self.events.last() {
            None => 0,
            Some(e) => (e.t / dt) as usize + 1,
        }
    }

    /// Events with `t0 <= t < t0 + dt` as a borrowed slice.
    pub fn slice(&self, t0: u64, dt: u64) -> EventSlice<'_> {
        window_events(self, t0, dt)
    }

    /// Iterator over consecutive windows `[t0 + k*dt, t0 + (k+1)*dt)`.
    pub fn windows(&self, t0: u64, dt: u64, count: usize) -> WindowIter<'_> {
        WindowIter::new(self, t0, dt, count)
    }
}

/// A borrowed, contiguous run of events inside one half-open window.
#[derive(Debug, Clone, Copy)]
pub struct EventSlice<'a> {
    pub geometry: Geometry,
    pub t0: u64,
    pub dt: u64,
    pub events: &'a [Event],
}

impl EventSlice<'_> {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Signed polarity accumulation of one window over the full sensor grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFrame {
    pub geometry: Geometry,
    pub t0: u64,
    pub dt: u64,
    grid: Vec<i32>,
}

impl EventFrame {
    pub fn zeros(geometry: Geometry, t0: u64, dt: u64) -> Self {
        Self {
            geometry,
            t0,
            dt,
            grid: vec![0; geometry.pixels()],
        }
    }

    #[inline]
    pub fn value(&self, x: u16, y: u16) -> i32 {
        self.grid[y as usize * self.geometry.width as usize + x as usize]
    }

    #[inline]
    pub(crate) fn add(&mut self, x: u16, y: u16, p: i8) {
        self.grid[y as usize * self.geometry.width as usize + x as usize] += p as i32;
    }

    pub fn grid(&self) -> &[i32] {
        &self.grid
    }

    /// Sum of all cells; equals the polarity sum of the aggregated window.
    pub fn total(&self) -> i64 {
        self.grid.iter().map(|&v| v as i64).sum()
    }
}

/// Center-size bounding box normalized to [0, 1] in a stated coordinate
/// frame (full image or a search crop).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBoxN {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBoxN {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn has_positive_area(&self) -> bool {
        self.w > 0.0 && self.h > 0.0
    }

    /// Clip the center into [0,1] and the size into (0,1].
    pub fn clamped(&self) -> Self {
        Self {
            cx: self.cx.clamp(0.0, 1.0),
            cy: self.cy.clamp(0.0, 1.0),
            w: self.w.clamp(f64::MIN_POSITIVE, 1.0),
            h: self.h.clamp(f64::MIN_POSITIVE, 1.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64, x: u16, y: u16, p: i8) -> Event {
        Event { t, x, y, p }
    }

    #[test]
    fn stream_sorts_out_of_order_events_stably() {
        let g = Geometry::new(4, 4);
        let s = EventStream::new(
            g,
            vec![ev(20, 0, 0, 1), ev(10, 1, 0, 1), ev(10, 2, 0, -1)],
        );
        let ts: Vec<u64> = s.events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![10, 10, 20]);
        // stable: the two t=10 events keep their original relative order
        assert_eq!(s.events()[0].x, 1);
        assert_eq!(s.events()[1].x, 2);
    }

    #[test]
    fn num_windows_covers_last_event() {
        let g = Geometry::new(4, 4);
        let s = EventStream::new(g, vec![ev(0, 0, 0, 1), ev(99, 0, 0, 1)]);
        assert_eq!(s.num_windows(25), 4); // windows [0,25) .. [75,100)
        assert_eq!(s.num_windows(100), 1);
        let empty = EventStream::new(g, vec![]);
        assert_eq!(empty.num_windows(25), 0);
    }

    #[test]
    fn bbox_corners_and_area() {
        let b = BBoxN::new(0.5, 0.5, 0.2, 0.4);
        let (x1, y1, x2, y2) = b.corners();
        assert!((x1 - 0.4).abs() < 1e-15);
        assert!((y1 - 0.3).abs() < 1e-15);
        assert!((x2 - 0.6).abs() < 1e-15);
        assert!((y2 - 0.7).abs() < 1e-15);
        assert!((b.area() - 0.08).abs() < 1e-15);
    }
}
