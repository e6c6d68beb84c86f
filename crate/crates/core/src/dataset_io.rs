//! On-disk formats: 7-Scenes style frames (color PNG, 16-bit depth PNG, 4x4
//! pose text), split manifests, and the SCRD scene-coordinate map format.
//!
//! SCRD layout, all integers little-endian:
//!
//! ```text
//! "SCRD" | version u32 = 1 | width u32 | height u32 | flags u32
//! | width*height*3 f32 (x, y, z interleaved, row-major, mm)
//! | [width*height u8 mask plane, 0 or 1]   -- present iff flags bit 0
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, RgbImage};
use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose};
use crate::scene_map::{DepthImage, SceneCoordinateImage, ValidityMask};

pub const SCRD_MAGIC: &[u8; 4] = b"SCRD";
pub const SCRD_VERSION: u32 = 1;
pub const SCRD_FLAG_MASK: u32 = 1;
const SCRD_HEADER_LEN: usize = 20;
/// Largest accepted pixel count of an SCRD map.
pub const SCRD_MAX_PIXELS: u64 = 1 << 28;

/// Rotation drift above which a pose matrix is rejected instead of being
/// snapped to the nearest rotation.
pub const MAX_ROTATION_DRIFT: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ScrdError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"SCRD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported SCRD version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported SCRD flags {0:#x}")]
    UnsupportedFlags(u32),
    #[error("dimensions {width}x{height} overflow")]
    DimensionOverflow { width: u32, height: u32 },
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("mask value {value} at pixel {index} is not 0 or 1")]
    InvalidMaskValue { index: usize, value: u8 },
    #[error("mask is {mask_w}x{mask_h} but map is {width}x{height}")]
    MaskMismatch {
        width: u32,
        height: u32,
        mask_w: u32,
        mask_h: u32,
    },
}

/// Serializes a map, with the mask plane when `mask` is given. Coordinates
/// are narrowed to `f32`.
pub fn encode_scrd(
    coords: &SceneCoordinateImage,
    mask: Option<&ValidityMask>,
) -> Result<Vec<u8>, ScrdError> {
    let (w, h) = coords.dims();
    if let Some(m) = mask {
        if m.dims() != (w, h) {
            return Err(ScrdError::MaskMismatch {
                width: w,
                height: h,
                mask_w: m.dims().0,
                mask_h: m.dims().1,
            });
        }
    }
    let n = coords.as_slice().len();
    let mut out = Vec::with_capacity(SCRD_HEADER_LEN + n * 12 + mask.map_or(0, |_| n));
    out.extend_from_slice(SCRD_MAGIC);
    out.extend_from_slice(&SCRD_VERSION.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    let flags = if mask.is_some() { SCRD_FLAG_MASK } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for p in coords.as_slice() {
        for &c in p {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    if let Some(m) = mask {
        out.extend(m.as_slice().iter().map(|&b| b as u8));
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an SCRD buffer. A missing mask plane decodes as an all-valid mask.
pub fn decode_scrd(bytes: &[u8]) -> Result<(SceneCoordinateImage, ValidityMask), ScrdError> {
    if bytes.len() < 4 {
        return Err(ScrdError::Truncated {
            expected: SCRD_HEADER_LEN,
            got: bytes.len(),
        });
    }
    if &bytes[..4] != SCRD_MAGIC {
        return Err(ScrdError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
    }
    if bytes.len() < SCRD_HEADER_LEN {
        return Err(ScrdError::Truncated {
            expected: SCRD_HEADER_LEN,
            got: bytes.len(),
        });
    }
    let version = read_u32(bytes, 4);
    if version != SCRD_VERSION {
        return Err(ScrdError::UnsupportedVersion(version));
    }
    let width = read_u32(bytes, 8);
    let height = read_u32(bytes, 12);
    let flags = read_u32(bytes, 16);
    if flags & !SCRD_FLAG_MASK != 0 {
        return Err(ScrdError::UnsupportedFlags(flags));
    }
    let pixels = width as u64 * height as u64;
    if pixels > SCRD_MAX_PIXELS {
        return Err(ScrdError::DimensionOverflow { width, height });
    }
    let n = pixels as usize;
    let has_mask = flags & SCRD_FLAG_MASK != 0;
    let expected = SCRD_HEADER_LEN + n * 12 + if has_mask { n } else { 0 };
    if bytes.len() < expected {
        return Err(ScrdError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(ScrdError::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[SCRD_HEADER_LEN..SCRD_HEADER_LEN + n * 12];
    let data: Vec<[f64; 3]> = payload
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().expect("4 bytes")) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    let bits = if has_mask {
        let plane = &bytes[SCRD_HEADER_LEN + n * 12..];
        plane
            .iter()
            .enumerate()
            .map(|(index, &value)| match value {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(ScrdError::InvalidMaskValue { index, value }),
            })
            .collect::<Result<Vec<_>, _>>()?
    } else {
        vec![true; n]
    };
    let coords = SceneCoordinateImage::from_vec(width, height, data).expect("length checked");
    let mask = ValidityMask::from_vec(width, height, bits).expect("length checked");
    Ok((coords, mask))
}

pub fn write_scene_coord_image(
    path: &Path,
    coords: &SceneCoordinateImage,
    mask: Option<&ValidityMask>,
) -> Result<(), ScrdError> {
    fs::write(path, encode_scrd(coords, mask)?)?;
    Ok(())
}

/// Alias of [`write_scene_coord_image`] for maps produced by a regressor.
pub fn write_prediction_map(
    path: &Path,
    coords: &SceneCoordinateImage,
    mask: Option<&ValidityMask>,
) -> Result<(), ScrdError> {
    write_scene_coord_image(path, coords, mask)
}

pub fn load_scene_coord_image(path: &Path) -> Result<(SceneCoordinateImage, ValidityMask), ScrdError> {
    decode_scrd(&fs::read(path)?)
}

#[derive(Debug, Error)]
pub enum PoseFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("matrix is not a rigid transform (rotation drift {drift:.3e})")]
    NonRigid { drift: f64 },
}

/// Nearest rotation in the Frobenius sense, or `None` for reflections and
/// rank-deficient input.
fn nearest_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let r = svd.u? * svd.v_t?;
    (r.determinant() > 0.0).then_some(r)
}

/// Parses a whitespace separated row-major 4x4 camera-to-world matrix with
/// translation in meters.
pub fn parse_pose(text: &str) -> Result<Pose, PoseFileError> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| PoseFileError::Parse(format!("bad number {t:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if values.len() != 16 {
        return Err(PoseFileError::Parse(format!(
            "expected 16 numbers, found {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PoseFileError::Parse("non-finite entry".into()));
    }
    let m = Matrix4::from_row_slice(&values);
    let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if last
        .iter()
        .zip([0.0, 0.0, 0.0, 1.0])
        .any(|(a, b)| (a - b).abs() > 1e-6)
    {
        return Err(PoseFileError::Parse(format!(
            "last row is {last:?}, expected (0, 0, 0, 1)"
        )));
    }
    let rot: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let drift = (rot.transpose() * rot - Matrix3::identity()).abs().max();
    if drift > MAX_ROTATION_DRIFT {
        return Err(PoseFileError::NonRigid { drift });
    }
    let rot = nearest_rotation(&rot).ok_or(PoseFileError::NonRigid { drift })?;
    let t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]) * 1000.0;
    Ok(Pose::from_rotation_matrix(&rot, t))
}

pub fn load_pose_file(path: &Path) -> Result<Pose, PoseFileError> {
    parse_pose(&fs::read_to_string(path)?)
}

/// Formats a pose in the same layout `parse_pose` reads.
pub fn format_pose(pose: &Pose) -> String {
    let mut m = pose.to_matrix();
    for r in 0..3 {
        m[(r, 3)] /= 1000.0;
    }
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:e}", m[(r, c)])).collect();
        s.push_str(&row.join("\t"));
        s.push('\n');
    }
    s
}

pub fn write_pose_file(path: &Path, pose: &Pose) -> io::Result<()> {
    fs::write(path, format_pose(pose))
}

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("expected a 16-bit single-channel image, found {0:?}")]
    WrongBitDepth(image::ColorType),
}

fn decode_image(path: &Path) -> Result<DynamicImage, ImageIoError> {
    Ok(image::ImageReader::open(path)?.with_guessed_format()?.decode()?)
}

/// Loads a 16-bit depth PNG (values in mm).
pub fn load_depth(path: &Path) -> Result<DepthImage, ImageIoError> {
    match decode_image(path)? {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(DepthImage::from_vec(w, h, buf.into_raw()).expect("buffer matches dimensions"))
        }
        other => Err(ImageIoError::WrongBitDepth(other.color())),
    }
}

pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<(), ImageIoError> {
    let (w, h) = depth.dims();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, depth.as_slice().to_vec()).expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, ImageIoError> {
    Ok(decode_image(path)?.to_rgb8())
}

pub fn write_rgb(path: &Path, rgb: &RgbImage) -> Result<(), ImageIoError> {
    rgb.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// `(scene, sequence, index)`; displays as `scene/seq-01/frame-000042`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameId {
    pub scene: String,
    pub sequence: String,
    pub index: u32,
}

impl FrameId {
    pub fn new(scene: impl Into<String>, sequence: impl Into<String>, index: u32) -> Self {
        Self {
            scene: scene.into(),
            sequence: sequence.into(),
            index,
        }
    }

    /// File stem inside the sequence directory, e.g. `frame-000042`.
    pub fn stem(&self) -> String {
        format!("frame-{:06}", self.index)
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.scene, self.sequence, self.stem())
    }
}

impl std::str::FromStr for FrameId {
    type Err = String;

    /// Inverse of `Display`.
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("malformed frame id {s:?}");
        let mut parts = s.rsplitn(3, '/');
        let stem = parts.next().ok_or_else(bad)?;
        let sequence = parts.next().ok_or_else(bad)?;
        let scene = parts.next().ok_or_else(bad)?;
        let digits = stem.strip_prefix("frame-").ok_or_else(bad)?;
        if scene.is_empty() || sequence.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        Ok(FrameId::new(scene, sequence, digits.parse().map_err(|_| bad())?))
    }
}

/// One fully loaded frame.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub id: FrameId,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    /// Camera-to-world.
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

/// Writes a frame in the 7-Scenes layout under `scene_root/<sequence>/`.
pub fn write_frame_files(
    scene_root: &Path,
    id: &FrameId,
    rgb: &RgbImage,
    depth: &DepthImage,
    pose: &Pose,
) -> Result<(), ImageIoError> {
    let dir = scene_root.join(&id.sequence);
    fs::create_dir_all(&dir)?;
    let stem = id.stem();
    write_rgb(&dir.join(format!("{stem}.color.png")), rgb)?;
    write_depth(&dir.join(format!("{stem}.depth.png")), depth)?;
    write_pose_file(&dir.join(format!("{stem}.pose.txt")), pose)?;
    Ok(())
}

/// Sequence names of one split. Accepts `seq-01` as well as the
/// `sequence1` spelling of the official split files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub sequences: Vec<String>,
}

impl SplitManifest {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(names: I) -> Self {
        let mut sequences: Vec<String> = names
            .into_iter()
            .map(|n| normalize_sequence(n.as_ref()))
            .collect();
        sequences.sort();
        sequences.dedup();
        Self { sequences }
    }

    /// One name per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty()),
        )
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path)?))
    }
}

fn normalize_sequence(name: &str) -> String {
    if let Some(num) = name.strip_prefix("sequence") {
        if let Ok(n) = num.trim().parse::<u32>() {
            return format!("seq-{n:02}");
        }
    }
    name.to_string()
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist")]
    RootMissing(PathBuf),
    #[error("split manifest lists no sequences")]
    EmptyManifest,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// A per-frame or per-sequence problem; never fatal for a run.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetIssue {
    #[error("sequence {sequence} not found under the dataset root")]
    UnknownSequence { sequence: String },
    #[error("{frame}: missing {files:?}")]
    MissingFiles { frame: FrameId, files: Vec<String> },
    #[error("{frame}: {message}")]
    Load { frame: FrameId, message: String },
}

impl DatasetIssue {
    pub fn frame(&self) -> Option<&FrameId> {
        match self {
            DatasetIssue::UnknownSequence { .. } => None,
            DatasetIssue::MissingFiles { frame, .. } | DatasetIssue::Load { frame, .. } => Some(frame),
        }
    }
}

/// File paths of one frame. Absent files are listed in `missing`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub id: FrameId,
    pub color: PathBuf,
    pub depth: PathBuf,
    pub pose: PathBuf,
    pub missing: Vec<String>,
}

impl FrameEntry {
    pub fn load(&self, intrinsics: &Intrinsics) -> Result<FrameRecord, DatasetIssue> {
        if !self.missing.is_empty() {
            return Err(DatasetIssue::MissingFiles {
                frame: self.id.clone(),
                files: self.missing.clone(),
            });
        }
        let fail = |message: String| DatasetIssue::Load {
            frame: self.id.clone(),
            message,
        };
        let rgb = load_rgb(&self.color).map_err(|e| fail(format!("color: {e}")))?;
        let depth = load_depth(&self.depth).map_err(|e| fail(format!("depth: {e}")))?;
        let pose = load_pose_file(&self.pose).map_err(|e| fail(format!("pose: {e}")))?;
        if rgb.dimensions() != depth.dims() {
            return Err(fail(format!(
                "color is {:?} but depth is {:?}",
                rgb.dimensions(),
                depth.dims()
            )));
        }
        if depth.dims() != (intrinsics.width, intrinsics.height) {
            return Err(fail(format!(
                "image is {:?} but intrinsics expect {}x{}",
                depth.dims(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        Ok(FrameRecord {
            id: self.id.clone(),
            rgb,
            depth,
            pose,
            intrinsics: *intrinsics,
        })
    }
}

/// The frames of one scene's split, in (sequence, index) order.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub scene: String,
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameEntry>,
    /// Problems found while scanning (unknown sequences).
    pub issues: Vec<DatasetIssue>,
}

impl SceneDataset {
    /// Loads frames lazily; broken frames come out as `Err` and iteration
    /// continues.
    pub fn iter(&self) -> impl Iterator<Item = Result<FrameRecord, DatasetIssue>> + '_ {
        self.frames.iter().map(|e| e.load(&self.intrinsics))
    }
}

const FRAME_SUFFIXES: [(&str, &str); 3] = [
    (".color.png", "color"),
    (".depth.png", "depth"),
    (".pose.txt", "pose"),
];

fn parse_frame_file(name: &str) -> Option<(u32, usize)> {
    let rest = name.strip_prefix("frame-")?;
    let (digits, suffix) = rest.split_at(rest.find('.')?);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let kind = FRAME_SUFFIXES.iter().position(|(s, _)| *s == suffix)?;
    Some((digits.parse().ok()?, kind))
}

/// Indexes `root/<seq>/frame-XXXXXX.{color.png,depth.png,pose.txt}` for every
/// sequence of `split`. The scene name is the root directory's name.
pub fn scan_dataset(
    root: &Path,
    split: &SplitManifest,
    intrinsics: Intrinsics,
) -> Result<SceneDataset, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::RootMissing(root.to_path_buf()));
    }
    if split.sequences.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    let scene = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".to_string());
    let mut frames = Vec::new();
    let mut issues = Vec::new();
    for seq in &split.sequences {
        let dir = root.join(seq);
        if !dir.is_dir() {
            log::warn!("sequence {seq} not found in {}", root.display());
            issues.push(DatasetIssue::UnknownSequence {
                sequence: seq.clone(),
            });
            continue;
        }
        let mut present: BTreeMap<u32, [bool; 3]> = BTreeMap::new();
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name();
            if let Some((index, kind)) = parse_frame_file(&name.to_string_lossy()) {
                present.entry(index).or_default()[kind] = true;
            }
        }
        for (index, have) in present {
            let id = FrameId::new(scene.clone(), seq.clone(), index);
            let stem = id.stem();
            let missing: Vec<String> = FRAME_SUFFIXES
                .iter()
                .zip(have)
                .filter(|(_, h)| !h)
                .map(|((_, kind), _)| kind.to_string())
                .collect();
            if !missing.is_empty() {
                log::warn!("{id}: missing {missing:?}");
            }
            frames.push(FrameEntry {
                color: dir.join(format!("{stem}.color.png")),
                depth: dir.join(format!("{stem}.depth.png")),
                pose: dir.join(format!("{stem}.pose.txt")),
                id,
                missing,
            });
        }
    }
    Ok(SceneDataset {
        root: root.to_path_buf(),
        scene,
        intrinsics,
        frames,
        issues,
    })
}
