//! Dataset file formats and pose normalization. On disk a dataset is a
//! directory holding `transforms.json` (camera field of view plus 4x4
//! row-major camera-to-world matrices, looks-down-minus-z convention),
//! `split.json` (train/test frame indices), and 8-bit RGB PNGs. All file
//! writes go through a temp-file-then-rename so readers never see partial
//! output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraModel, GeometryError, Pose, Quaternion};
use crate::radiance::ImageBuffer;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("missing image file {0}")]
    MissingImage(PathBuf),
    #[error("frame {0}: transform is not a rigid camera-to-world matrix")]
    BadMatrix(usize),
    #[error("bad split: {0}")]
    BadSplit(String),
    #[error("degenerate camera layout: {0}")]
    Degenerate(&'static str),
    #[error("dataset has no frames")]
    Empty,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Uniform scale + offset mapping world coordinates into the normalized
/// frame the pose prior and the radiance field live in. Rotations are left
/// untouched; a pure similarity of all cameras leaves images unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneNormalization {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl SceneNormalization {
    pub fn identity() -> Self {
        SceneNormalization { scale: 1.0, offset: [0.0; 3] }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.scale * p[0] + self.offset[0],
            self.scale * p[1] + self.offset[1],
            self.scale * p[2] + self.offset[2],
        ]
    }

    pub fn invert_point(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.offset[0]) / self.scale,
            (p[1] - self.offset[1]) / self.scale,
            (p[2] - self.offset[2]) / self.scale,
        ]
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose { translation: self.apply_point(pose.translation), rotation: pose.rotation }
    }

    pub fn invert_pose(&self, pose: &Pose) -> Pose {
        Pose { translation: self.invert_point(pose.translation), rotation: pose.rotation }
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    /// Path relative to the dataset root, e.g. `images/frame_0003.png`.
    pub file_path: String,
    /// Camera-to-world pose.
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct PosedDataset {
    pub root: PathBuf,
    pub camera: CameraModel,
    pub frames: Vec<Frame>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// Present once poses have been normalized.
    pub normalization: Option<SceneNormalization>,
}

impl PosedDataset {
    pub fn train_frames(&self) -> impl Iterator<Item = &Frame> {
        self.train_idx.iter().map(|&i| &self.frames[i])
    }

    pub fn test_frames(&self) -> impl Iterator<Item = &Frame> {
        self.test_idx.iter().map(|&i| &self.frames[i])
    }
}

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// fsync, rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Converts a pose to the on-disk 4x4 row-major camera-to-world matrix.
pub fn pose_to_matrix(pose: &Pose) -> [[f64; 4]; 4] {
    let r = pose.rotation.to_matrix();
    let t = pose.translation;
    [
        [r[0][0], r[0][1], r[0][2], t[0]],
        [r[1][0], r[1][1], r[1][2], t[1]],
        [r[2][0], r[2][1], r[2][2], t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Parses a 4x4 camera-to-world matrix, validating that the upper-left block
/// is a proper rotation (orthonormal, determinant +1) within 1e-6.
pub fn matrix_to_pose(m: &[[f64; 4]; 4], frame: usize) -> Result<Pose, DatasetError> {
    let r = [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ];
    for i in 0..3 {
        for j in 0..3 {
            let mut dot = 0.0;
            for (k, row) in r.iter().enumerate() {
                dot += row[i] * r[k][j];
            }
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > 1e-6 {
                return Err(DatasetError::BadMatrix(frame));
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > 1e-6 {
        return Err(DatasetError::BadMatrix(frame));
    }
    Ok(Pose {
        translation: [m[0][3], m[1][3], m[2][3]],
        rotation: Quaternion::from_matrix(&r).normalized(),
    })
}

#[derive(Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<TransformsFrame>,
}

#[derive(Serialize, Deserialize)]
struct TransformsFrame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    train: Vec<usize>,
    test: Vec<usize>,
}

/// Quantizes a unit-range image to 8-bit PNG bytes.
fn encode_png(image: &ImageBuffer) -> Result<Vec<u8>, DatasetError> {
    let (w, h) = (image.width(), image.height());
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions by construction");
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| DatasetError::Image { path: PathBuf::new(), message: e.to_string() })?;
    Ok(out)
}

pub fn load_png(path: &Path) -> Result<ImageBuffer, DatasetError> {
    let img = image::open(path)
        .map_err(|_| DatasetError::MissingImage(path.to_path_buf()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(ImageBuffer::from_data(w, h, data))
}

/// Writes a complete dataset directory: images, `transforms.json`, and
/// `split.json`. Frame `i` becomes `images/frame_{i:04}.png`; the first
/// `train_count` frames form the training split, the rest the test split.
/// Quaternions are canonicalized (scalar component non-negative) before
/// conversion so the files are seed-stable.
pub fn save_dataset(
    root: &Path,
    camera: &CameraModel,
    poses: &[Pose],
    images: &[ImageBuffer],
    train_count: usize,
) -> Result<(), DatasetError> {
    assert_eq!(poses.len(), images.len(), "one pose per image");
    assert!(train_count <= poses.len());
    let mut frames = Vec::with_capacity(poses.len());
    for (i, (pose, image)) in poses.iter().zip(images).enumerate() {
        let rel = format!("images/frame_{i:04}.png");
        let png = encode_png(image)?;
        atomic_write(&root.join(&rel), &png)?;
        let canonical = Pose { translation: pose.translation, rotation: pose.rotation.canonicalized() };
        frames.push(TransformsFrame {
            file_path: rel,
            transform_matrix: pose_to_matrix(&canonical),
        });
    }
    let transforms = TransformsFile { camera_angle_x: camera.angle_x(), frames };
    let json = serde_json::to_vec_pretty(&transforms)
        .map_err(|e| DatasetError::Json { path: root.join("transforms.json"), source: e })?;
    atomic_write(&root.join("transforms.json"), &json)?;

    let split = SplitFile {
        train: (0..train_count).collect(),
        test: (train_count..poses.len()).collect(),
    };
    let json = serde_json::to_vec_pretty(&split)
        .map_err(|e| DatasetError::Json { path: root.join("split.json"), source: e })?;
    atomic_write(&root.join("split.json"), &json)?;
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`] (or any compatible
/// `transforms.json`). A missing `split.json` puts every frame in the
/// training split.
pub fn load_dataset(root: &Path) -> Result<(PosedDataset, Vec<ImageBuffer>), DatasetError> {
    let tpath = root.join("transforms.json");
    let text = fs::read_to_string(&tpath).map_err(io_err(&tpath))?;
    let transforms: TransformsFile =
        serde_json::from_str(&text).map_err(|e| DatasetError::Json { path: tpath, source: e })?;
    if transforms.frames.is_empty() {
        return Err(DatasetError::Empty);
    }

    let mut frames = Vec::with_capacity(transforms.frames.len());
    let mut images = Vec::with_capacity(transforms.frames.len());
    for (i, tf) in transforms.frames.iter().enumerate() {
        let pose = matrix_to_pose(&tf.transform_matrix, i)?;
        let img_path = root.join(&tf.file_path);
        if !img_path.exists() {
            return Err(DatasetError::MissingImage(img_path));
        }
        images.push(load_png(&img_path)?);
        frames.push(Frame { file_path: tf.file_path.clone(), pose });
    }
    let (w, h) = (images[0].width(), images[0].height());
    for (i, img) in images.iter().enumerate() {
        if img.width() != w || img.height() != h {
            return Err(DatasetError::Image {
                path: root.join(&frames[i].file_path),
                message: format!(
                    "dimensions {}x{} differ from first frame's {}x{}",
                    img.width(),
                    img.height(),
                    w,
                    h
                ),
            });
        }
    }
    let camera = CameraModel::from_angle_x(transforms.camera_angle_x, w, h)?;

    let spath = root.join("split.json");
    let (train_idx, test_idx) = if spath.exists() {
        let text = fs::read_to_string(&spath).map_err(io_err(&spath))?;
        let split: SplitFile = serde_json::from_str(&text)
            .map_err(|e| DatasetError::Json { path: spath, source: e })?;
        validate_split(&split, frames.len())?;
        (split.train, split.test)
    } else {
        ((0..frames.len()).collect(), Vec::new())
    };

    Ok((
        PosedDataset { root: root.to_path_buf(), camera, frames, train_idx, test_idx, normalization: None },
        images,
    ))
}

fn validate_split(split: &SplitFile, n: usize) -> Result<(), DatasetError> {
    let mut seen = vec![false; n];
    for &i in split.train.iter().chain(&split.test) {
        if i >= n {
            return Err(DatasetError::BadSplit(format!("index {i} out of range for {n} frames")));
        }
        if seen[i] {
            return Err(DatasetError::BadSplit(format!("index {i} appears twice")));
        }
        seen[i] = true;
    }
    if !seen.iter().all(|&s| s) {
        return Err(DatasetError::BadSplit("splits do not cover every frame".into()));
    }
    Ok(())
}

/// Maps the bounding box of training camera centers into [-0.4, 0.4]^3 by a
/// uniform scale and offset (a 10% margin inside the unit prior box, so test
/// poses near the hull stay inside [-0.5, 0.5]^3). Returns the transformed
/// dataset and the recorded transform.
pub fn normalize_poses(
    dataset: &PosedDataset,
) -> Result<(PosedDataset, SceneNormalization), DatasetError> {
    let centers: Vec<[f64; 3]> = if dataset.train_idx.is_empty() {
        dataset.frames.iter().map(|f| f.pose.translation).collect()
    } else {
        dataset.train_frames().map(|f| f.pose.translation).collect()
    };
    if centers.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &centers {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    if extent < 1e-12 {
        return Err(DatasetError::Degenerate("all training cameras coincide"));
    }
    let scale = 0.8 / extent;
    let offset = [
        -scale * (lo[0] + hi[0]) / 2.0,
        -scale * (lo[1] + hi[1]) / 2.0,
        -scale * (lo[2] + hi[2]) / 2.0,
    ];
    let norm = SceneNormalization { scale, offset };
    let mut out = dataset.clone();
    for frame in &mut out.frames {
        frame.pose = norm.apply_pose(&frame.pose);
    }
    out.normalization = Some(norm);
    Ok((out, norm))
}
