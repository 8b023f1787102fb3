//! Keypoint ingestion and preprocessing into fixed-length dyadic sequences.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// COCO-17 joint count.
pub const COCO_JOINTS: usize = 17;
/// Model sequence length after resampling.
pub const TARGET_FRAMES: usize = 81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonPose {
    pub joints: Vec<Joint>,
    pub detected: bool,
}

impl PersonPose {
    pub fn undetected() -> Self {
        PersonPose {
            joints: Vec::new(),
            detected: false,
        }
    }

    pub fn detected(joints: Vec<Joint>) -> Self {
        PersonPose {
            joints,
            detected: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicFrame {
    pub person_a: PersonPose,
    pub person_b: PersonPose,
    pub frame_index: usize,
    /// (width, height) in pixels.
    pub image_size: (f64, f64),
}

impl DyadicFrame {
    pub fn is_valid(&self) -> bool {
        self.person_a.detected && self.person_b.detected
    }
}

/// Three-way synchrony class. The discriminant is the class index used by
/// models and confusion matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SyncClass {
    Sync = 0,
    ModSync = 1,
    Unsync = 2,
}

impl SyncClass {
    pub const ALL: [SyncClass; 3] = [SyncClass::Sync, SyncClass::ModSync, SyncClass::Unsync];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SyncClass::Sync => "Sync",
            SyncClass::ModSync => "ModSync",
            SyncClass::Unsync => "Unsync",
        }
    }
}

impl fmt::Display for SyncClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyncClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown synchrony class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(SyncClass),
    /// Synchrony score in [0, 10].
    Score(f64),
}

/// Normalized dyadic poses, `frames × 2 persons × joints × (x, y)`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSequence {
    data: Vec<f64>,
    frames: usize,
    joints: usize,
    pub label: Option<Label>,
    pub source_id: String,
}

impl SkeletonSequence {
    pub fn new(data: Vec<f64>, frames: usize, joints: usize, source_id: impl Into<String>) -> Result<Self> {
        if data.len() != frames * 4 * joints {
            return Err(Error::dim("SkeletonSequence::new", &[frames, 2, joints, 2], &[data.len()]));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("coordinate {bad} outside [0, 1]")));
        }
        Ok(SkeletonSequence {
            data,
            frames,
            joints,
            label: None,
            source_id: source_id.into(),
        })
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Coordinates of joint `k` of person `p` (0 = a, 1 = b) at frame `t`.
    pub fn coord(&self, t: usize, p: usize, k: usize) -> [f64; 2] {
        let i = ((t * 2 + p) * self.joints + k) * 2;
        [self.data[i], self.data[i + 1]]
    }

    /// The `2·J` joint tokens of frame `t` as a flat `[2J × 2]` slice,
    /// person a's joints first.
    pub fn frame(&self, t: usize) -> &[f64] {
        let w = 4 * self.joints;
        &self.data[t * w..(t + 1) * w]
    }

    /// One person's pose at frame `t`, `J × 2` flat.
    pub fn pose(&self, t: usize, p: usize) -> &[f64] {
        let w = 2 * self.joints;
        let start = (t * 2 + p) * w;
        &self.data[start..start + w]
    }

    /// One person's trajectory of coordinate `c` (0 = x, 1 = y) for joint `k`.
    pub fn trajectory(&self, p: usize, k: usize, c: usize) -> Vec<f64> {
        (0..self.frames).map(|t| self.coord(t, p, k)[c]).collect()
    }

    /// The sequence with persons a and b exchanged.
    pub fn swapped(&self) -> SkeletonSequence {
        let mut data = Vec::with_capacity(self.data.len());
        for t in 0..self.frames {
            data.extend_from_slice(self.pose(t, 1));
            data.extend_from_slice(self.pose(t, 0));
        }
        SkeletonSequence {
            data,
            ..self.clone()
        }
    }

    /// Frames in unit image coordinates, for re-running preprocessing.
    pub fn to_frames(&self) -> Vec<DyadicFrame> {
        let person = |t: usize, p: usize| {
            PersonPose::detected(
                (0..self.joints)
                    .map(|k| {
                        let [x, y] = self.coord(t, p, k);
                        Joint { x, y, confidence: 1.0 }
                    })
                    .collect(),
            )
        };
        (0..self.frames)
            .map(|t| DyadicFrame {
                person_a: person(t, 0),
                person_b: person(t, 1),
                frame_index: t,
                image_size: (1.0, 1.0),
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Keypoint file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct KeypointFile {
    pub image_size: [f64; 2],
    pub frames: Vec<KeypointFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KeypointFrame {
    pub index: usize,
    pub persons: Vec<KeypointPerson>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KeypointPerson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u8>,
    pub keypoints: Vec<Vec<f64>>,
}

impl KeypointFile {
    /// Builds the file form of `frames`; undetected persons are omitted.
    pub fn from_frames(frames: &[DyadicFrame]) -> Self {
        let image_size = frames.first().map_or([1.0, 1.0], |f| [f.image_size.0, f.image_size.1]);
        let frames = frames
            .iter()
            .map(|f| KeypointFrame {
                index: f.frame_index,
                persons: [&f.person_a, &f.person_b]
                    .into_iter()
                    .enumerate()
                    .filter(|(_, p)| p.detected)
                    .map(|(id, p)| KeypointPerson {
                        id: Some(id as u8),
                        keypoints: p.joints.iter().map(|j| vec![j.x, j.y, j.confidence]).collect(),
                    })
                    .collect(),
            })
            .collect();
        KeypointFile { image_size, frames }
    }

    pub fn into_frames(self) -> Result<Vec<DyadicFrame>> {
        let [w, h] = self.image_size;
        let mut out = Vec::with_capacity(self.frames.len());
        for fr in self.frames {
            let frame = fr.index;
            if fr.persons.len() > 2 {
                return Err(Error::Ambiguity {
                    frame,
                    count: fr.persons.len(),
                });
            }
            let mut slots = [PersonPose::undetected(), PersonPose::undetected()];
            for (pos, person) in fr.persons.into_iter().enumerate() {
                let slot = match person.id {
                    Some(id @ (0 | 1)) => id as usize,
                    Some(id) => {
                        return Err(Error::Parse {
                            frame,
                            msg: format!("person id {id} is not 0 or 1"),
                        })
                    }
                    None => pos,
                };
                if slots[slot].detected {
                    return Err(Error::Parse {
                        frame,
                        msg: format!("person {slot} listed twice"),
                    });
                }
                slots[slot] = PersonPose::detected(parse_joints(frame, &person.keypoints)?);
            }
            let [person_a, person_b] = slots;
            out.push(DyadicFrame {
                person_a,
                person_b,
                frame_index: frame,
                image_size: (w, h),
            });
        }
        out.sort_by_key(|f| f.frame_index);
        if let Some(pair) = out.windows(2).find(|p| p[0].frame_index == p[1].frame_index) {
            return Err(Error::Parse {
                frame: pair[0].frame_index,
                msg: "duplicate frame index".into(),
            });
        }
        Ok(out)
    }
}

fn parse_joints(frame: usize, keypoints: &[Vec<f64>]) -> Result<Vec<Joint>> {
    if keypoints.len() != COCO_JOINTS {
        return Err(Error::Parse {
            frame,
            msg: format!("expected {COCO_JOINTS} keypoints, found {}", keypoints.len()),
        });
    }
    keypoints
        .iter()
        .map(|kp| match kp.as_slice() {
            &[x, y, c] if x.is_finite() && y.is_finite() && (0.0..=1.0).contains(&c) => {
                Ok(Joint { x, y, confidence: c })
            }
            _ => Err(Error::Parse {
                frame,
                msg: format!("bad keypoint {kp:?}; want [x, y, confidence in 0..1]"),
            }),
        })
        .collect()
}

/// Reads one clip's keypoints; frames come back in ascending index order.
pub fn load_keypoint_file(path: &Path) -> Result<Vec<DyadicFrame>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let file: KeypointFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        frame: 0,
        msg: format!("{}: {e}", path.display()),
    })?;
    file.into_frames()
}

pub fn write_keypoint_file(path: &Path, frames: &[DyadicFrame]) -> Result<()> {
    let json = serde_json::to_string(&KeypointFile::from_frames(frames))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Keeps frames where both persons are detected, in order.
pub fn filter_valid_frames(frames: Vec<DyadicFrame>) -> Vec<DyadicFrame> {
    frames.into_iter().filter(DyadicFrame::is_valid).collect()
}

/// Source index for output slot `i`: `round(i·(n−1)/(target−1))`, ties to even,
/// computed exactly in integers.
pub fn resample_index(i: usize, n: usize, target: usize) -> usize {
    if target <= 1 || n <= 1 {
        return 0;
    }
    let num = i * (n - 1);
    let den = target - 1;
    let (q, r) = (num / den, num % den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

/// Picks `target` items by uniform index spacing with both endpoints kept;
/// short inputs are stretched by duplication.
pub fn resample_uniform<T: Clone>(items: &[T], target: usize) -> Result<Vec<T>> {
    if items.is_empty() {
        return Err(Error::Data("no valid frames".into()));
    }
    if target == 0 {
        return Err(Error::Parameter("resample target must be positive".into()));
    }
    Ok((0..target)
        .map(|i| items[resample_index(i, items.len(), target)].clone())
        .collect())
}

/// Scales pixel coordinates into [0, 1] by image size. Returns the sequence
/// and the number of coordinates that had to be clamped.
pub fn normalize_coords(frames: &[DyadicFrame], source_id: &str) -> Result<(SkeletonSequence, usize)> {
    let joints = frames.first().map_or(0, |f| f.person_a.joints.len());
    let mut data = Vec::with_capacity(frames.len() * 4 * joints);
    let mut clamped = 0;
    for f in frames {
        let (w, h) = f.image_size;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Data(format!(
                "frame {}: image size {w}x{h} is not positive",
                f.frame_index
            )));
        }
        for p in [&f.person_a, &f.person_b] {
            if !p.detected {
                return Err(Error::Data(format!("frame {} has an undetected person", f.frame_index)));
            }
            if p.joints.len() != joints {
                return Err(Error::Data(format!(
                    "frame {}: {} joints, expected {joints}",
                    f.frame_index,
                    p.joints.len()
                )));
            }
            for j in &p.joints {
                for v in [j.x / w, j.y / h] {
                    let c = v.clamp(0.0, 1.0);
                    if c != v {
                        clamped += 1;
                    }
                    data.push(c);
                }
            }
        }
    }
    Ok((SkeletonSequence::new(data, frames.len(), joints, source_id)?, clamped))
}

/// filter → resample → normalize.
pub fn preprocess(frames: Vec<DyadicFrame>, target: usize, source_id: &str) -> Result<SkeletonSequence> {
    let valid = filter_valid_frames(frames);
    let sampled = resample_uniform(&valid, target)?;
    let (seq, clamped) = normalize_coords(&sampled, source_id)?;
    if clamped > 0 {
        log::warn!("{source_id}: clamped {clamped} out-of-frame coordinates");
    }
    Ok(seq)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_class: Option<SyncClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_score: Option<f64>,
}

impl ManifestEntry {
    pub fn label(&self) -> Option<Label> {
        match (self.label_class, self.label_score) {
            (Some(c), _) => Some(Label::Class(c)),
            (None, Some(s)) => Some(Label::Score(s)),
            (None, None) => None,
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn resolve(manifest: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads and preprocesses every clip a manifest lists, in manifest order.
pub fn load_dataset(manifest: &Path, target: usize) -> Result<Vec<SkeletonSequence>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let path = resolve(manifest, &e.path);
            let frames = load_keypoint_file(&path)?;
            let seq = preprocess(frames, target, &e.path)
                .map_err(|err| Error::Data(format!("{}: {err}", path.display())))?;
            Ok(match e.label() {
                Some(l) => seq.with_label(l),
                None => seq,
            })
        })
        .collect()
}
