//! On-disk dataset: frames, annotations, skeleton and split assignment.
//!
//! Layout under a dataset root:
//!
//! ```text
//! manifest.json     canonical JSON (sorted keys), see `DatasetManifest`
//! annotations.csv   frame_id,keypoint_name,x,y,score (missing = empty cells)
//! frames/*.png      ingested frames
//! outliers.json     latest outlier queue, if any
//! runs.log          append-only command log
//! ```
//!
//! Writers hold an exclusive `flock` on `.lock` and replace files by
//! write-to-temp-then-rename; readers hold a shared lock, so a reader never
//! observes a manifest and annotations file from different saves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pose::{Keypoint, Pose};
use crate::raster::Raster;
use crate::rng;
use crate::skeleton::Skeleton;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const FRAMES_DIR: &str = "frames";
const LOCK_FILE: &str = ".lock";
const ANNOTATIONS_HEADER: &str = "frame_id,keypoint_name,x,y,score";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    /// Relative to the dataset root.
    pub image_path: String,
    pub annotated: bool,
    /// Position in the natural-sorted source sequence.
    pub source_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub skeleton: Skeleton,
    pub frames: Vec<FrameRecord>,
    pub split: BTreeMap<u64, SplitRole>,
    pub rng_seed: u64,
    poses: BTreeMap<u64, Pose>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonRow {
    name: String,
    parent: Option<String>,
    swap: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    version: u32,
    skeleton: Vec<SkeletonRow>,
    frames: Vec<FrameRecord>,
    split: BTreeMap<u64, SplitRole>,
    rng_seed: u64,
    annotations_sha256: String,
}

impl DatasetManifest {
    pub fn new(skeleton: Skeleton, frames: Vec<FrameRecord>) -> Self {
        DatasetManifest {
            version: FORMAT_VERSION,
            skeleton,
            frames,
            split: BTreeMap::new(),
            rng_seed: 0,
            poses: BTreeMap::new(),
        }
    }

    pub fn frame(&self, id: u64) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.id == id)
    }

    pub fn pose(&self, id: u64) -> Option<&Pose> {
        self.poses.get(&id)
    }

    pub fn poses(&self) -> &BTreeMap<u64, Pose> {
        &self.poses
    }

    pub fn annotated_ids(&self) -> Vec<u64> {
        self.poses.keys().copied().collect()
    }

    /// Stores (or overwrites) a frame's pose and marks it annotated. Frames
    /// joining after a split default to the training side.
    pub fn set_pose(&mut self, frame_id: u64, pose: Pose) -> Result<()> {
        pose.validate(self.skeleton.len())?;
        let frame = self
            .frames
            .iter_mut()
            .find(|f| f.id == frame_id)
            .ok_or(Error::UnknownFrame(frame_id))?;
        frame.annotated = true;
        self.poses.insert(frame_id, pose);
        if !self.split.is_empty() {
            self.split.entry(frame_id).or_insert(SplitRole::Train);
        }
        Ok(())
    }

    /// Assigns `floor(fraction * n_annotated)` annotated frames to validation
    /// by a seeded shuffle; the rest train.
    pub fn split(&mut self, validation_fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::invalid(format!(
                "validation fraction {validation_fraction} outside [0, 1)"
            )));
        }
        let mut ids = self.annotated_ids();
        if ids.is_empty() {
            return Err(Error::NoAnnotatedFrames);
        }
        let n_val = (validation_fraction * ids.len() as f64).floor() as usize;
        ids.shuffle(&mut rng::seeded(seed));
        self.split = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let role = if i < n_val { SplitRole::Validation } else { SplitRole::Train };
                (id, role)
            })
            .collect();
        self.rng_seed = seed;
        Ok(())
    }

    pub fn ids_with_role(&self, role: SplitRole) -> Vec<u64> {
        if self.split.is_empty() {
            return match role {
                SplitRole::Train => self.annotated_ids(),
                SplitRole::Validation => Vec::new(),
            };
        }
        self.split
            .iter()
            .filter(|(_, r)| **r == role)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn annotations_csv(&self) -> String {
        poses_csv(&self.skeleton, &self.poses)
    }

    fn to_file(&self, annotations_sha256: String) -> ManifestFile {
        let name_of = |i: Option<usize>| i.map(|i| self.skeleton.name(i).to_string());
        ManifestFile {
            version: self.version,
            skeleton: self
                .skeleton
                .keypoints()
                .iter()
                .map(|k| SkeletonRow {
                    name: k.name.clone(),
                    parent: name_of(k.parent),
                    swap: name_of(k.swap),
                })
                .collect(),
            frames: self.frames.clone(),
            split: self.split.clone(),
            rng_seed: self.rng_seed,
            annotations_sha256,
        }
    }

    /// Canonical manifest text for a given annotations file.
    fn manifest_text(&self, annotations: &str) -> Result<String> {
        let file = self.to_file(sha256_hex(annotations.as_bytes()));
        let value = canonicalize(serde_json::to_value(file)?);
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }

    /// Persists manifest and annotations atomically under the root lock.
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let _lock = DirLock::exclusive(root)?;
        self.write_files(root)
    }

    pub fn load(root: &Path) -> Result<DatasetManifest> {
        if !root.join(MANIFEST_FILE).is_file() {
            return Err(Error::ManifestNotFound(root.to_path_buf()));
        }
        let _lock = DirLock::shared(root)?;
        Self::read_files(root)
    }

    /// Loads, modifies and saves the dataset while holding the exclusive
    /// lock, so concurrent writers cannot interleave. Nothing is written
    /// when `edit` fails.
    pub fn update<T>(root: &Path, edit: impl FnOnce(&mut DatasetManifest) -> Result<T>) -> Result<(DatasetManifest, T)> {
        if !root.join(MANIFEST_FILE).is_file() {
            return Err(Error::ManifestNotFound(root.to_path_buf()));
        }
        let _lock = DirLock::exclusive(root)?;
        let mut manifest = Self::read_files(root)?;
        let out = edit(&mut manifest)?;
        manifest.write_files(root)?;
        Ok((manifest, out))
    }

    fn write_files(&self, root: &Path) -> Result<()> {
        let annotations = self.annotations_csv();
        let manifest = self.manifest_text(&annotations)?;
        write_atomic(&root.join(ANNOTATIONS_FILE), annotations.as_bytes())?;
        write_atomic(&root.join(MANIFEST_FILE), manifest.as_bytes())
    }

    fn read_files(root: &Path) -> Result<DatasetManifest> {
        let manifest_path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let file: ManifestFile =
            serde_json::from_str(&text).map_err(|e| Error::CorruptManifest(e.to_string()))?;
        if file.version != FORMAT_VERSION {
            return Err(Error::CorruptManifest(format!("unsupported version {}", file.version)));
        }
        let mut csv = String::from("name,parent,swap\n");
        for row in &file.skeleton {
            let _ = writeln!(
                csv,
                "{},{},{}",
                row.name,
                row.parent.as_deref().unwrap_or(""),
                row.swap.as_deref().unwrap_or("")
            );
        }
        let skeleton = Skeleton::parse(&csv)?;

        let ann_path = root.join(ANNOTATIONS_FILE);
        let annotations = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let found = sha256_hex(annotations.as_bytes());
        if found != file.annotations_sha256 {
            return Err(Error::ChecksumMismatch {
                path: ann_path,
                expected: file.annotations_sha256,
                found,
            });
        }
        let poses = parse_poses_csv(&skeleton, &annotations)?;
        for (id, pose) in &poses {
            pose.validate(skeleton.len())?;
            match file.frames.iter().find(|f| f.id == *id) {
                Some(f) if f.annotated => {}
                _ => return Err(Error::CorruptManifest(format!("pose for frame {id} not marked annotated"))),
            }
        }
        Ok(DatasetManifest {
            version: file.version,
            skeleton,
            frames: file.frames,
            split: file.split,
            rng_seed: file.rng_seed,
            poses,
        })
    }

    pub fn frame_path(&self, root: &Path, id: u64) -> Result<PathBuf> {
        let frame = self.frame(id).ok_or(Error::UnknownFrame(id))?;
        Ok(root.join(&frame.image_path))
    }

    pub fn load_frame(&self, root: &Path, id: u64) -> Result<Raster> {
        Raster::load(&self.frame_path(root, id)?)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rebuilds objects with keys inserted in sorted order so the output is
/// canonical regardless of the map type backing `serde_json::Value`.
fn canonicalize(value: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, canonicalize(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

/// Pose table in the annotations layout: one `frame_id,keypoint_name,x,y,score`
/// line per keypoint, empty cells for missing rows.
pub fn poses_csv(skeleton: &Skeleton, poses: &BTreeMap<u64, Pose>) -> String {
    let mut out = String::from(ANNOTATIONS_HEADER);
    out.push('\n');
    for (id, pose) in poses {
        for (k, row) in pose.rows().iter().enumerate() {
            let name = skeleton.name(k);
            match row {
                Some(p) => {
                    let _ = writeln!(out, "{id},{name},{},{},{}", p.x, p.y, p.score);
                }
                None => {
                    let _ = writeln!(out, "{id},{name},,,");
                }
            }
        }
    }
    out
}

pub fn parse_poses_csv(skeleton: &Skeleton, text: &str) -> Result<BTreeMap<u64, Pose>> {
    let mut lines = text.lines();
    if lines.next() != Some(ANNOTATIONS_HEADER) {
        return Err(Error::CorruptManifest(format!("pose table header must be `{ANNOTATIONS_HEADER}`")));
    }
    let mut poses: BTreeMap<u64, Vec<Option<Keypoint>>> = BTreeMap::new();
    let bad = |n: usize, what: &str| Error::CorruptManifest(format!("pose table line {}: {what}", n + 2));
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(bad(n, "expected 5 cells"));
        }
        let id: u64 = cells[0].parse().map_err(|_| bad(n, "frame id"))?;
        let k = skeleton.index_of(cells[1]).ok_or_else(|| bad(n, "unknown keypoint"))?;
        let rows = poses.entry(id).or_insert_with(|| vec![None; skeleton.len()]);
        if cells[2..].iter().all(|c| c.is_empty()) {
            rows[k] = None;
            continue;
        }
        let num = |c: &str| c.parse::<f64>().map_err(|_| bad(n, "number"));
        rows[k] = Some(Keypoint::new(num(cells[2])?, num(cells[3])?, num(cells[4])?));
    }
    Ok(poses.into_iter().map(|(id, rows)| (id, Pose::new(rows))).collect())
}

/// Replaces `path` by writing a sibling temp file and renaming over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Advisory `flock` held for the guard's lifetime. Manifest `save`, `load`
/// and `update` take it themselves; a process must not hold a second guard
/// on the same root while calling them.
pub struct DirLock {
    _file: fs::File,
}

impl DirLock {
    pub fn exclusive(root: &Path) -> Result<DirLock> {
        Self::acquire(root, libc::LOCK_EX)
    }

    pub fn shared(root: &Path) -> Result<DirLock> {
        Self::acquire(root, libc::LOCK_SH)
    }

    fn acquire(root: &Path, op: libc::c_int) -> Result<DirLock> {
        use std::os::unix::io::AsRawFd;
        let path = root.join(LOCK_FILE);
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        // SAFETY: flock on a descriptor we own; released when the file closes.
        let rc = unsafe { libc::flock(file.as_raw_fd(), op) };
        if rc != 0 {
            return Err(Error::io(&path, std::io::Error::last_os_error()));
        }
        Ok(DirLock { _file: file })
    }
}

/// Collects frames matching `pattern` (a file-name glob) from `src`, in
/// natural filename order, and copies them into a new dataset at `root`.
pub fn ingest_frames(src: &Path, pattern: &str, skeleton: Skeleton, root: &Path) -> Result<DatasetManifest> {
    let pattern =
        glob::Pattern::new(pattern).map_err(|e| Error::invalid(format!("bad pattern `{pattern}`: {e}")))?;
    let entries = fs::read_dir(src).map_err(|e| Error::io(src, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(src, e))?;
        let is_file = entry.file_type().map(|t| t.is_file()).unwrap_or(false);
        if let Some(name) = entry.file_name().to_str() {
            if is_file && pattern.matches(name) {
                names.push(name.to_string());
            }
        }
    }
    if names.is_empty() {
        return Err(Error::invalid(format!(
            "no frames matching `{}` in {}",
            pattern.as_str(),
            src.display()
        )));
    }
    names.sort_by(|a, b| natord::compare(a, b));

    let frames_dir = root.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut frames = Vec::with_capacity(names.len());
    let mut dims: Option<(u32, u32)> = None;
    for (index, name) in names.iter().enumerate() {
        let path = src.join(name);
        let img = image::open(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let (w, h) = (img.width(), img.height());
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::Image {
                    path,
                    message: format!("dimensions {w}x{h} differ from {}x{}", d.0, d.1),
                })
            }
            _ => {}
        }
        let id = index as u64;
        let rel = format!("{FRAMES_DIR}/{id:06}.png");
        let dest = root.join(&rel);
        let is_png = Path::new(name)
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            fs::copy(&path, &dest).map_err(|e| Error::io(&dest, e))?;
        } else {
            img.save_with_format(&dest, image::ImageFormat::Png).map_err(|e| Error::Image {
                path: dest.clone(),
                message: e.to_string(),
            })?;
        }
        frames.push(FrameRecord {
            id,
            width: w,
            height: h,
            image_path: rel,
            annotated: false,
            source_index: id,
        });
    }
    let manifest = DatasetManifest::new(skeleton, frames);
    manifest.save(root)?;
    Ok(manifest)
}
