//! Windowing and dense aggregation of event streams.

use crate::grid::{Grid, Volume};
use crate::scalar::Scalar;

use super::{Event, EventFrame, EventSlice, EventStream, Geometry};

/// Events of `stream` with `t0 <= t < t0 + dt`, found by binary search.
pub fn window_events(stream: &EventStream, t0: u64, dt: u64) -> EventSlice<'_> {
    assert!(dt > 0, "window length must be positive");
    let events = stream.events();
    let start = events.partition_point(|e| e.t < t0);
    let end = events.partition_point(|e| e.t < t0.saturating_add(dt));
    EventSlice {
        geometry: stream.geometry(),
        t0,
        dt,
        events: &events[start..end],
    }
}

/// Iterator over consecutive half-open windows of a stream.
pub struct WindowIter<'a> {
    stream: &'a EventStream,
    t0: u64,
    dt: u64,
    index: usize,
    count: usize,
}

impl<'a> WindowIter<'a> {
    pub(super) fn new(stream: &'a EventStream, t0: u64, dt: u64, count: usize) -> Self {
        assert!(dt > 0, "window length must be positive");
        Self {
            stream,
            t0,
            dt,
            index: 0,
            count,
        }
    }
}

impl<'a> Iterator for WindowIter<'a> {
    type Item = EventSlice<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.index >= self.count {
            return None;
        }
        let t0 = self.t0 + self.index as u64 * self.dt;
        self.index += 1;
        Some(window_events(self.stream, t0, self.dt))
    }
}

/// Sum event polarities per pixel over one window.
pub fn aggregate_frame(slice: &EventSlice) -> EventFrame {
    let mut frame = EventFrame::zeros(slice.geometry, slice.t0, slice.dt);
    for e in slice.events {
        frame.add(e.x, e.y, e.p);
    }
    frame
}

/// Clamp the signed counts to `[-clip, +clip]` and scale into `[-1, 1]`.
pub fn normalize_frame<S: Scalar>(frame: &EventFrame, clip: u32) -> Grid<S> {
    assert!(clip >= 1, "clip must be at least 1");
    let clip_i = clip as i32;
    let denom = S::from_f64(clip as f64);
    let data = frame
        .grid()
        .iter()
        .map(|&v| S::from_f64(v.clamp(-clip_i, clip_i) as f64) / denom)
        .collect();
    Grid::from_vec(frame.geometry.width as usize, frame.geometry.height as usize, data)
}

/// Spread each event's polarity over the two nearest temporal bins with
/// linear weights. Bin `b` is centered at `t0 + (b + 0.5) * dt / bins`; an
/// event exactly on a center contributes wholly to that bin, and events
/// before the first / after the last center clamp to it.
pub fn voxel_grid<S: Scalar>(slice: &EventSlice, bins: usize) -> Volume<S> {
    assert!(bins >= 1, "need at least one temporal bin");
    let w = slice.geometry.width as usize;
    let h = slice.geometry.height as usize;
    let mut vol = Volume::zeros(bins, h, w);
    if slice.events.is_empty() {
        return vol;
    }
    let dt = slice.dt as f64;
    for e in slice.events {
        let tau = (e.t - slice.t0) as f64 / dt * bins as f64 - 0.5;
        let p = S::from_f64(e.p as f64);
        let (x, y) = (e.x as usize, e.y as usize);
        if tau <= 0.0 {
            let v = vol.get(0, y, x);
            vol.set(0, y, x, v + p);
        } else if tau >= (bins - 1) as f64 {
            let v = vol.get(bins - 1, y, x);
            vol.set(bins - 1, y, x, v + p);
        } else {
            let lo = tau.floor() as usize;
            let frac = S::from_f64(tau - lo as f64);
            let v0 = vol.get(lo, y, x);
            vol.set(lo, y, x, v0 + p * (S::one() - frac));
            let v1 = vol.get(lo + 1, y, x);
            vol.set(lo + 1, y, x, v1 + p * frac);
        }
    }
    vol
}

/// Streaming aggregator: feeds events in timestamp order, emits completed
/// frames through a callback. Holds one frame of state, so memory does not
/// grow with stream length.
pub struct FrameAggregator {
    geometry: Geometry,
    dt: u64,
    window: u64,
    frame: EventFrame,
}

impl FrameAggregator {
    pub fn new(geometry: Geometry, dt: u64) -> Self {
        assert!(dt > 0, "window length must be positive");
        Self {
            geometry,
            dt,
            window: 0,
            frame: EventFrame::zeros(geometry, 0, dt),
        }
    }

    /// Push the next event (timestamps must be non-decreasing). Windows that
    /// closed before this event, including empty ones, are emitted in order.
    pub fn push(&mut self, event: Event, emit: &mut impl FnMut(EventFrame)) {
        let target = event.t / self.dt;
        while self.window < target {
            self.roll(emit);
        }
        self.frame.add(event.x, event.y, event.p);
    }

    fn roll(&mut self, emit: &mut impl FnMut(EventFrame)) {
        self.window += 1;
        let next = EventFrame::zeros(self.geometry, self.window * self.dt, self.dt);
        let done = std::mem::replace(&mut self.frame, next);
        emit(done);
    }

    /// Emit the final, partially filled window.
    pub fn finish(self, emit: &mut impl FnMut(EventFrame)) {
        emit(self.frame);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64, x: u16, y: u16, p: i8) -> Event {
        Event { t, x, y, p }
    }

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream::new(Geometry::new(8, 8), events)
    }

    #[test]
    fn window_is_half_open() {
        let s = stream(vec![ev(0, 0, 0, 1), ev(10, 1, 0, 1), ev(20, 2, 0, 1)]);
        let sl = window_events(&s, 0, 20);
        assert_eq!(sl.events.len(), 2);
        assert!(sl.events.iter().all(|e| e.t < 20));
    }

    #[test]
    fn window_beyond_last_event_is_empty() {
        let s = stream(vec![ev(0, 0, 0, 1), ev(10, 1, 0, 1)]);
        let sl = window_events(&s, 100, 20);
        assert!(sl.is_empty());
    }

    #[test]
    fn aggregate_sums_signed_polarity() {
        let s = stream(vec![ev(0, 0, 0, 1), ev(1, 0, 0, 1), ev(2, 0, 0, -1)]);
        let f = aggregate_frame(&s.slice(0, 10));
        assert_eq!(f.value(0, 0), 1);
        assert_eq!(f.value(1, 0), 0);
    }

    #[test]
    fn empty_slice_aggregates_to_zero_grid() {
        let s = stream(vec![]);
        let f = aggregate_frame(&s.slice(0, 10));
        assert!(f.grid().iter().all(|&v| v == 0));
    }

    #[test]
    fn normalize_clamps_and_scales() {
        let mut events = vec![ev(0, 0, 0, 1); 25];
        events.extend(vec![ev(1, 1, 0, -1); 3]);
        let s = stream(events);
        let f = aggregate_frame(&s.slice(0, 10));
        let g: Grid<f64> = normalize_frame(&f, 10);
        assert_eq!(g.get(0, 0), 1.0); // 25 clamps to 10 -> 1.0
        assert_eq!(g.get(1, 0), -0.3); // -3 / 10
        assert_eq!(g.get(2, 0), 0.0);
    }

    #[test]
    fn voxel_event_at_bin_center_is_not_split() {
        // dt=100, 4 bins: centers at 12.5, 37.5, 62.5, 87.5. Use dt=1000 so
        // the bin-2 center (index 2) sits at an integer timestamp: 625.
        let s = stream(vec![ev(625, 3, 2, 1)]);
        let v: Volume<f64> = voxel_grid(&s.slice(0, 1000), 4);
        assert_eq!(v.get(2, 2, 3), 1.0);
        let total: f64 = v.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for b in [0usize, 1, 3] {
            assert_eq!(v.get(b, 2, 3), 0.0);
        }
    }

    #[test]
    fn voxel_empty_slice_is_zeros() {
        let s = stream(vec![]);
        let v: Volume<f64> = voxel_grid(&s.slice(0, 1000), 4);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn streaming_aggregator_matches_batch_windows() {
        let events = vec![
            ev(3, 0, 0, 1),
            ev(12, 1, 1, -1),
            ev(27, 2, 2, 1),
            ev(95, 3, 3, 1),
        ];
        let s = stream(events.clone());
        let n = s.num_windows(10);
        let batch: Vec<EventFrame> = s.windows(0, 10, n).map(|sl| aggregate_frame(&sl)).collect();

        let mut streamed = Vec::new();
        let mut agg = FrameAggregator::new(Geometry::new(8, 8), 10);
        for e in events {
            agg.push(e, &mut |f| streamed.push(f));
        }
        agg.finish(&mut |f| streamed.push(f));
        assert_eq!(streamed, batch);
    }
}
