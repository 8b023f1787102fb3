//! Synthetic dyads with controlled synchrony.
//!
//! Person a moves every joint of a canonical standing skeleton along its own
//! sinusoid. Person b copies a (Sync), follows it with a lag and damped
//! amplitude (ModSync), or draws independent motion (Unsync). Both persons
//! share the canonical layout, so a perfect copy yields a zero CSM diagonal.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{
    write_keypoint_file, DyadicFrame, Joint, Label, ManifestEntry, PersonPose, SkeletonSequence, SyncClass,
    COCO_JOINTS,
};
use crate::rng::{self, Stream};

/// COCO-order rest pose in unit image coordinates.
const CANONICAL: [(f64, f64); COCO_JOINTS] = [
    (0.50, 0.20),
    (0.48, 0.18),
    (0.52, 0.18),
    (0.46, 0.19),
    (0.54, 0.19),
    (0.42, 0.30),
    (0.58, 0.30),
    (0.38, 0.42),
    (0.62, 0.42),
    (0.36, 0.53),
    (0.64, 0.53),
    (0.45, 0.55),
    (0.55, 0.55),
    (0.45, 0.70),
    (0.55, 0.70),
    (0.45, 0.85),
    (0.55, 0.85),
];

/// Score bins used for regression labels.
pub const SCORE_ALPHA: f64 = 7.16;
pub const SCORE_BETA: f64 = 8.36;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub frames: usize,
    pub joints: usize,
    /// Inclusive lag range in frames for ModSync.
    pub lag: (usize, usize),
    /// Amplitude factor range for ModSync.
    pub amp_mismatch: (f64, f64),
    /// Standard deviation of Gaussian noise added to person b.
    pub jitter: f64,
    /// Joint oscillation frequency range, cycles per frame.
    pub freq: (f64, f64),
    /// Joint oscillation amplitude range, unit coordinates.
    pub amplitude: (f64, f64),
    /// Pixel size of the written keypoint files.
    pub image_size: (f64, f64),
    /// Label manifest entries with scores instead of classes.
    pub score_labels: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 148,
            joints: COCO_JOINTS,
            lag: (5, 15),
            amp_mismatch: (0.8, 0.9),
            jitter: 0.002,
            freq: (1.0 / 60.0, 1.0 / 20.0),
            amplitude: (0.04, 0.10),
            image_size: (640.0, 480.0),
            score_labels: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.joints != COCO_JOINTS {
            return bad(format!("synthetic skeletons have {COCO_JOINTS} joints, got {}", self.joints));
        }
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter {} must be non-negative", self.jitter));
        }
        if self.lag.0 > self.lag.1 || self.lag.1 >= self.frames {
            return bad(format!("lag range {:?} must satisfy lo <= hi < frames", self.lag));
        }
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !range_ok(self.amp_mismatch) || !range_ok(self.freq) || !range_ok(self.amplitude) {
            return bad("amp_mismatch, freq and amplitude ranges must be positive and ordered".into());
        }
        if CANONICAL.iter().any(|&(x, y)| {
            let m = self.amplitude.1 * self.amp_mismatch.1.max(1.0);
            x - m < 0.0 || x + m > 1.0 || y - m < 0.0 || y + m > 1.0
        }) {
            return bad(format!("amplitude {:?} pushes joints out of frame", self.amplitude));
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return bad(format!("image size {:?} is not positive", self.image_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Oscillator {
    freq: f64,
    phase: f64,
    quadrature: f64,
    ax: f64,
    ay: f64,
}

impl Oscillator {
    fn draw(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        Oscillator {
            freq: rng.random_range(cfg.freq.0..=cfg.freq.1),
            phase: rng.random_range(0.0..TAU),
            quadrature: rng.random_range(0.0..TAU),
            ax: rng.random_range(cfg.amplitude.0..=cfg.amplitude.1),
            ay: rng.random_range(cfg.amplitude.0..=cfg.amplitude.1),
        }
    }

    /// Displacement from the rest pose at (possibly negative) time `t`.
    fn at(&self, t: f64) -> (f64, f64) {
        let w = TAU * self.freq * t + self.phase;
        (self.ax * w.sin(), self.ay * (w + self.quadrature).sin())
    }
}

fn motion(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<Oscillator> {
    (0..cfg.joints).map(|_| Oscillator::draw(cfg, rng)).collect()
}

/// Score for a class, uniform within its bin.
pub fn draw_score(class: SyncClass, rng: &mut impl Rng) -> f64 {
    match class {
        SyncClass::Sync => rng.random_range(SCORE_BETA..=10.0),
        SyncClass::ModSync => rng.random_range(SCORE_ALPHA..SCORE_BETA),
        SyncClass::Unsync => rng.random_range(0.0..SCORE_ALPHA),
    }
}

/// Sample `index` of `class`, in unit coordinates, labeled with the class.
pub fn generate_dyad_sequence(cfg: &SynthConfig, class: SyncClass, index: usize) -> Result<SkeletonSequence> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Stream::Synth, rng::index2(class.index() as u64, index as u64));
    let a = motion(cfg, &mut rng);
    let (b, lag, gain) = match class {
        SyncClass::Sync => (a.clone(), 0, 1.0),
        SyncClass::ModSync => (
            a.clone(),
            rng.random_range(cfg.lag.0..=cfg.lag.1),
            rng.random_range(cfg.amp_mismatch.0..=cfg.amp_mismatch.1),
        ),
        SyncClass::Unsync => (motion(cfg, &mut rng), 0, 1.0),
    };
    let noise = Normal::new(0.0, cfg.jitter).map_err(|e| Error::Config(e.to_string()))?;

    let mut data = Vec::with_capacity(cfg.frames * 4 * cfg.joints);
    for t in 0..cfg.frames {
        for (k, &(bx, by)) in CANONICAL.iter().enumerate() {
            let (dx, dy) = a[k].at(t as f64);
            data.extend([bx + dx, by + dy]);
        }
        for (k, &(bx, by)) in CANONICAL.iter().enumerate() {
            let (dx, dy) = b[k].at(t as f64 - lag as f64);
            let mut jit = || if cfg.jitter > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let x = bx + gain * dx + jit();
            let y = by + gain * dy + jit();
            data.extend([x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]);
        }
    }
    let id = format!("{}_{index:04}", class.name().to_lowercase());
    Ok(SkeletonSequence::new(data, cfg.frames, cfg.joints, id)?.with_label(Label::Class(class)))
}

/// `n_per_class` sequences of each class, class-major order.
pub fn generate_sequences(cfg: &SynthConfig, n_per_class: usize) -> Result<Vec<SkeletonSequence>> {
    SyncClass::ALL
        .iter()
        .flat_map(|&c| (0..n_per_class).map(move |i| (c, i)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(c, i)| generate_dyad_sequence(cfg, c, i))
        .collect()
}

/// Unit-coordinate sequence scaled to pixel frames of `image_size`.
pub fn to_pixel_frames(seq: &SkeletonSequence, image_size: (f64, f64)) -> Vec<DyadicFrame> {
    let (w, h) = image_size;
    let person = |t: usize, p: usize| {
        PersonPose::detected(
            (0..seq.joints())
                .map(|k| {
                    let [x, y] = seq.coord(t, p, k);
                    Joint {
                        x: x * w,
                        y: y * h,
                        confidence: 1.0,
                    }
                })
                .collect(),
        )
    };
    (0..seq.frames())
        .map(|t| DyadicFrame {
            person_a: person(t, 0),
            person_b: person(t, 1),
            frame_index: t,
            image_size,
        })
        .collect()
}

/// Writes keypoint files and `manifest.json` into `out`; returns the manifest.
pub fn generate_dataset(cfg: &SynthConfig, n_per_class: usize, out: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    if n_per_class == 0 {
        return Err(Error::Parameter("n_per_class must be at least 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seqs = generate_sequences(cfg, n_per_class)?;
    let manifest: Vec<ManifestEntry> = seqs
        .par_iter()
        .enumerate()
        .map(|(n, seq)| {
            let file = format!("{}.json", seq.source_id);
            write_keypoint_file(&out.join(&file), &to_pixel_frames(seq, cfg.image_size))?;
            let class = SyncClass::ALL[n / n_per_class];
            let score = cfg.score_labels.then(|| {
                let mut rng = rng::stream(cfg.seed, Stream::Synth, rng::index2(0xff_0000 | n as u64, 0));
                draw_score(class, &mut rng)
            });
            Ok(ManifestEntry {
                path: file,
                label_class: (!cfg.score_labels).then_some(class),
                label_score: score,
            })
        })
        .collect::<Result<_>>()?;
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
