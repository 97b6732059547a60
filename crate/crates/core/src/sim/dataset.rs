//! Scenario-driven dataset generation, on-disk layout, and loading.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! sequences/<name>/events.evt     (binary event stream)
//! sequences/<name>/groundtruth.csv
//! ```

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{emit_events, ObjectSpec, ScenarioTag, SceneSpec, Shape, SyntheticSequence, Trajectory};
use crate::error::{Error, Result};
use crate::event::{
    parse_gt_boxes, read_binary_events, write_binary_events, write_gt_boxes, BBoxN, Geometry,
    Representation,
};
use crate::grid::Volume;
use crate::model::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub geometry: Geometry,
    pub duration_ns: u64,
    /// Aggregation window; the default 25 ms aggregates at 40 Hz.
    pub window_ns: u64,
    pub render_rate_hz: f64,
    pub contrast_threshold: f64,
    pub noise_rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::new(128, 128),
            duration_ns: 2_000_000_000,
            window_ns: 25_000_000,
            render_rate_hz: 1000.0,
            contrast_threshold: 0.15,
            noise_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// A generated sequence with its dataset bookkeeping.
#[derive(Debug, Clone)]
pub struct GeneratedSequence {
    pub name: String,
    pub split: Split,
    pub sequence: SyntheticSequence,
}

fn random_trajectory(
    rng: &mut ChaCha12Rng,
    bounds: ((f64, f64), (f64, f64)),
    duration_s: f64,
) -> Trajectory {
    let ((x0, y0), (x1, y1)) = bounds;
    match rng.random_range(0..3u8) {
        0 => {
            let speed = rng.random_range(25.0..60.0);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Trajectory::Linear {
                start: (rng.random_range(x0..x1), rng.random_range(y0..y1)),
                velocity: (speed * angle.cos(), speed * angle.sin()),
                bounds,
            }
        }
        1 => {
            let max_amp_x = ((x1 - x0) / 2.0).min(25.0);
            let max_amp_y = ((y1 - y0) / 2.0).min(25.0);
            let amp = (
                rng.random_range(8.0..max_amp_x.max(9.0)),
                rng.random_range(8.0..max_amp_y.max(9.0)),
            );
            let cx = rng.random_range(x0 + amp.0..x1 - amp.0);
            let cy = rng.random_range(y0 + amp.1..y1 - amp.1);
            Trajectory::Sinusoidal {
                center: (cx, cy),
                amplitude: amp,
                frequency: (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)),
                phase: (
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ),
            }
        }
        _ => Trajectory::random_walk(
            rng.random(),
            (rng.random_range(x0..x1), rng.random_range(y0..y1)),
            rng.random_range(30.0..55.0),
            0.25,
            duration_s,
            bounds,
        ),
    }
}

fn random_object(rng: &mut ChaCha12Rng, geometry: Geometry, duration_s: f64) -> ObjectSpec {
    let shape = if rng.random::<bool>() {
        Shape::Disk
    } else {
        Shape::Square
    };
    let size = rng.random_range(14.0..22.0);
    let margin = size / 2.0 + 6.0;
    let bounds = (
        (margin, margin),
        (
            geometry.width as f64 - margin,
            geometry.height as f64 - margin,
        ),
    );
    ObjectSpec {
        shape,
        size,
        trajectory: random_trajectory(rng, bounds, duration_s),
        intensity: rng.random_range(0.45..0.8),
    }
}

/// Deterministic scene spec for one sequence of a scenario.
pub fn scene_for(tag: ScenarioTag, cfg: &DatasetConfig, seq_seed: u64) -> SceneSpec {
    let mut rng = ChaCha12Rng::seed_from_u64(seq_seed);
    let duration_s = cfg.duration_ns as f64 * 1e-9;
    let target = random_object(&mut rng, cfg.geometry, duration_s);
    let with_distractors = matches!(tag, ScenarioTag::Distractor | ScenarioTag::Combined);
    let with_jitter = matches!(tag, ScenarioTag::CameraMotion | ScenarioTag::Combined);
    let distractors = if with_distractors {
        let count = 2 + rng.random_range(0..2u8) as usize;
        (0..count)
            .map(|_| {
                let mut d = random_object(&mut rng, cfg.geometry, duration_s);
                // same shape family as the target: true distractors
                d.shape = target.shape;
                d
            })
            .collect()
    } else {
        Vec::new()
    };
    let (jitter_amp_px, jitter_freq_hz) = if with_jitter {
        (rng.random_range(2.0..4.0), rng.random_range(0.8..1.6))
    } else {
        (0.0, 0.0)
    };
    SceneSpec {
        geometry: cfg.geometry,
        duration_ns: cfg.duration_ns,
        render_rate_hz: cfg.render_rate_hz,
        contrast_threshold: cfg.contrast_threshold,
        target,
        distractors,
        jitter_amp_px,
        jitter_freq_hz,
        background_period_px: 16,
        background_contrast: 0.3,
        noise_rate: cfg.noise_rate,
        seed: seq_seed,
    }
}

/// Generate train/val/test sequences for a scenario. Per-sequence seeds are
/// derived from disjoint (split, index) streams of the master seed, so
/// splits never share generator state.
pub fn make_dataset(
    tag: ScenarioTag,
    counts: SplitCounts,
    seed: u64,
    cfg: &DatasetConfig,
) -> Result<Vec<GeneratedSequence>> {
    assert!(counts.total() >= 1, "need at least one sequence");
    let mut out = Vec::with_capacity(counts.total());
    for (split, stream, n) in [
        (Split::Train, 0u64, counts.train),
        (Split::Val, 1, counts.val),
        (Split::Test, 2, counts.test),
    ] {
        for i in 0..n {
            let seq_seed = derive_seed(seed, stream, i as u64);
            let spec = scene_for(tag, cfg, seq_seed);
            let mut sequence = emit_events(&spec, cfg.window_ns)?;
            sequence.tag = tag;
            out.push(GeneratedSequence {
                name: format!("{tag}_{split}_{i:03}"),
                split,
                sequence,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub name: String,
    pub split: Split,
    pub tag: ScenarioTag,
    pub seed: u64,
    /// Paths relative to the manifest directory.
    pub events: String,
    pub gt: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scenario: ScenarioTag,
    pub seed: u64,
    pub geometry: Geometry,
    pub window_ns: u64,
    pub duration_ns: u64,
    pub sequences: Vec<SequenceRecord>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Sim(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SequenceRecord> {
        self.sequences.iter().filter(move |r| r.split == split)
    }
}

/// Write sequences and the manifest under `dir`.
pub fn write_dataset(
    dir: &Path,
    scenario: ScenarioTag,
    seed: u64,
    cfg: &DatasetConfig,
    sequences: &[GeneratedSequence],
) -> Result<DatasetManifest> {
    let seq_dir = dir.join("sequences");
    fs::create_dir_all(&seq_dir)?;
    let mut records = Vec::with_capacity(sequences.len());
    for g in sequences {
        let rel = PathBuf::from("sequences").join(&g.name);
        let abs = dir.join(&rel);
        fs::create_dir_all(&abs)?;
        let events_rel = rel.join("events.evt");
        let gt_rel = rel.join("groundtruth.csv");
        let events_file = fs::File::create(dir.join(&events_rel))?;
        write_binary_events(events_file, &g.sequence.stream)?;
        let mut gt_buf = Vec::new();
        write_gt_boxes(&mut gt_buf, &g.sequence.gt_boxes)?;
        fs::write(dir.join(&gt_rel), gt_buf)?;
        records.push(SequenceRecord {
            name: g.name.clone(),
            split: g.split,
            tag: g.sequence.tag,
            seed: g.sequence.seed,
            events: events_rel.to_string_lossy().into_owned(),
            gt: gt_rel.to_string_lossy().into_owned(),
            frames: g.sequence.gt_boxes.len(),
        });
    }
    let manifest = DatasetManifest {
        scenario,
        seed,
        geometry: cfg.geometry,
        window_ns: cfg.window_ns,
        duration_ns: cfg.duration_ns,
        sequences: records,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

/// A sequence materialized for the tracker: one input volume and one
/// ground-truth box per aggregation window.
#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub name: String,
    pub tag: ScenarioTag,
    pub geometry: Geometry,
    pub window_ns: u64,
    pub inputs: Vec<Volume<f64>>,
    pub gt: Vec<BBoxN>,
}

/// Load one sequence from disk and render every window with the given
/// representation.
pub fn load_sequence(
    dir: &Path,
    manifest: &DatasetManifest,
    record: &SequenceRecord,
    repr: Representation,
) -> Result<LoadedSequence> {
    let events_path = dir.join(&record.events);
    let stream = read_binary_events(BufReader::new(fs::File::open(&events_path).map_err(
        |e| Error::Sim(format!("cannot open {}: {e}", events_path.display())),
    )?))?;
    let gt_path = dir.join(&record.gt);
    let gt = parse_gt_boxes(BufReader::new(fs::File::open(&gt_path).map_err(|e| {
        Error::Sim(format!("cannot open {}: {e}", gt_path.display()))
    })?))?;
    if gt.len() != record.frames {
        return Err(Error::Sim(format!(
            "{}: manifest says {} frames, ground truth has {}",
            record.name,
            record.frames,
            gt.len()
        )));
    }
    let inputs = stream
        .windows(0, manifest.window_ns, gt.len())
        .map(|slice| repr.volume(&slice))
        .collect();
    Ok(LoadedSequence {
        name: record.name.clone(),
        tag: record.tag,
        geometry: manifest.geometry,
        window_ns: manifest.window_ns,
        inputs,
        gt,
    })
}

/// Materialize a generated sequence without the disk round-trip.
pub fn materialize(g: &GeneratedSequence, repr: Representation) -> LoadedSequence {
    let seq = &g.sequence;
    let inputs = seq
        .stream
        .windows(0, seq.window_ns, seq.gt_boxes.len())
        .map(|slice| repr.volume(&slice))
        .collect();
    LoadedSequence {
        name: g.name.clone(),
        tag: seq.tag,
        geometry: seq.stream.geometry(),
        window_ns: seq.window_ns,
        inputs,
        gt: seq.gt_boxes.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            geometry: Geometry::new(64, 64),
            duration_ns: 500_000_000,
            window_ns: 25_000_000,
            render_rate_hz: 500.0,
            contrast_threshold: 0.15,
            noise_rate: 0.05,
        }
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let cfg = small_cfg();
        let counts = SplitCounts {
            train: 2,
            val: 0,
            test: 1,
        };
        let a = make_dataset(ScenarioTag::Distractor, counts, 7, &cfg).unwrap();
        let b = make_dataset(ScenarioTag::Distractor, counts, 7, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sequence, y.sequence);
            assert_eq!(x.name, y.name);
        }
    }

    #[test]
    fn distractor_scenario_has_at_least_two_comoving_objects() {
        let cfg = small_cfg();
        let counts = SplitCounts {
            train: 3,
            val: 0,
            test: 0,
        };
        for g in make_dataset(ScenarioTag::Distractor, counts, 5, &cfg).unwrap() {
            let spec = scene_for(ScenarioTag::Distractor, &cfg, g.sequence.seed);
            assert!(spec.distractors.len() >= 2);
            assert!(spec.jitter_amp_px == 0.0);
        }
    }

    #[test]
    fn camera_motion_scenario_sets_jitter() {
        let cfg = small_cfg();
        let spec = scene_for(ScenarioTag::CameraMotion, &cfg, 99);
        assert!(spec.jitter_amp_px > 0.0);
        assert!(spec.distractors.is_empty());
    }

    #[test]
    fn gt_boxes_stay_normalized() {
        let cfg = small_cfg();
        let counts = SplitCounts {
            train: 2,
            val: 1,
            test: 1,
        };
        for g in make_dataset(ScenarioTag::Combined, counts, 11, &cfg).unwrap() {
            for b in &g.sequence.gt_boxes {
                assert!(b.cx >= 0.0 && b.cx <= 1.0);
                assert!(b.cy >= 0.0 && b.cy <= 1.0);
                assert!(b.w > 0.0 && b.w <= 1.0);
                assert!(b.h > 0.0 && b.h <= 1.0);
            }
        }
    }

    #[test]
    fn write_then_load_roundtrips() {
        let cfg = small_cfg();
        let counts = SplitCounts {
            train: 1,
            val: 0,
            test: 1,
        };
        let seqs = make_dataset(ScenarioTag::Plain, counts, 3, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), ScenarioTag::Plain, 3, &cfg, &seqs).unwrap();
        assert_eq!(manifest.sequences.len(), 2);
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, manifest);
        let repr = Representation::default();
        for (record, g) in back.sequences.iter().zip(&seqs) {
            let loaded = load_sequence(dir.path(), &back, record, repr).unwrap();
            let direct = materialize(g, repr);
            assert_eq!(loaded.inputs.len(), direct.inputs.len());
            assert_eq!(loaded.gt, direct.gt);
            for (a, b) in loaded.inputs.iter().zip(&direct.inputs) {
                assert_eq!(a, b);
            }
        }
    }
}
