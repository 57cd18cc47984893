//! Procedural scene generation and dataset I/O.
//!
//! [`scene`] builds analytic room scenes (density + color fields with exact
//! closed forms) and samples camera trajectories inside them; [`io`] handles
//! the on-disk dataset format and pose normalization. Ground-truth images
//! are produced by high-sample-count volume rendering of the analytic field.

mod io;
mod scene;

pub use io::{
    atomic_write, load_dataset, load_png, matrix_to_pose, normalize_poses, pose_to_matrix,
    save_dataset, DatasetError, Frame, PosedDataset, SceneNormalization,
};
pub use scene::{
    generate_scene, sample_cameras, look_at_rotation, Albedo, AnalyticScene, Primitive,
    SceneMode, Shape, CAMERA_HALF, SCENE_HALF, WALL_INNER,
};

use rayon::prelude::*;

use crate::geometry::{CameraModel, Pose};
use crate::radiance::{render_image, ImageBuffer};

/// Renders reference images of an analytic scene at a high sample count in
/// f64. `s_ref` is the per-ray sample count; values below 256 defeat the
/// point of a reference render and are rejected.
pub fn render_ground_truth(
    scene: &AnalyticScene,
    poses: &[Pose],
    camera: &CameraModel,
    s_ref: usize,
    near: f64,
    far: f64,
) -> Vec<ImageBuffer> {
    assert!(s_ref >= 256, "reference renders need s_ref >= 256, got {s_ref}");
    assert!(near > 0.0 && near < far, "bad ray bounds [{near}, {far}]");
    poses
        .par_iter()
        .map(|pose| {
            render_image::<f64, _>(scene, camera, pose, near, far, s_ref)
                .expect("bounds and sample count validated above")
        })
        .collect()
}
