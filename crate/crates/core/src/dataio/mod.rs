//! Synthetic takes, the `.eem` container, text formats, windowing and the
//! per-take image feature cache.

pub mod container;
pub mod formats;
pub mod synth;
pub mod windows;

use std::path::{Path, PathBuf};

use crate::denoiser::{ImageEncoder, ImageQuery};
use crate::fitting::Keypoints2D;
use crate::error::{Error, Result};
use crate::se3::{Mat3, MotionSequence, PoseParams, Se3, Vec3, SHAPE_DIM};
use crate::tensor::Mat;

pub use container::{read_container, write_container, Array, Container};
pub use formats::{read_rig, read_skeleton, write_rig, write_skeleton};
pub use synth::{
    derive_device_trajectory, generate_take, generate_take_with, Activity, SyntheticTake,
    TakeRequest, IMAGE_DIM, TAKE_FPS,
};
pub use windows::{window_dataset, window_starts, ClipIndex, ClipRef, TakeSplit, WindowConfig};

pub fn motion_to_container(motion: &MotionSequence) -> Container {
    let n = motion.len();
    let j = motion.frames[0].joint_angles.len();
    let mut c = Container::new(motion.skeleton_id.clone(), motion.fps, n);
    let mut rot = Vec::with_capacity(3 * n);
    let mut trans = Vec::with_capacity(3 * n);
    let mut angles = Vec::with_capacity(3 * n * j);
    for f in &motion.frames {
        rot.extend(f.root_rotation.iter().map(|&v| v as f32));
        trans.extend(f.root_translation.iter().map(|&v| v as f32));
        for a in &f.joint_angles {
            angles.extend(a.iter().map(|&v| v as f32));
        }
    }
    c.insert("root_rotation", Array { shape: vec![n, 3], data: rot });
    c.insert("root_translation", Array { shape: vec![n, 3], data: trans });
    c.insert("joint_angles", Array { shape: vec![n, j, 3], data: angles });
    c.insert(
        "shape",
        Array {
            shape: vec![SHAPE_DIM],
            data: motion.shape().iter().map(|&v| v as f32).collect(),
        },
    );
    c.meta.insert("kind".into(), "motion".into());
    c
}

pub fn motion_from_container(c: &Container) -> Result<MotionSequence> {
    let rot = c.get("root_rotation")?;
    let trans = c.get("root_translation")?;
    let angles = c.get("joint_angles")?;
    let shape = c.get("shape")?;
    let n = c.n_frames;
    let (an, aj) = match angles.shape.as_slice() {
        [an, aj, 3] => (*an, *aj),
        s => return Err(Error::Format(format!("joint_angles has shape {s:?}"))),
    };
    if rot.shape != [n, 3] || trans.shape != [n, 3] || an != n || shape.shape != [SHAPE_DIM] {
        return Err(Error::Format("motion arrays disagree with n_frames".into()));
    }
    let v3 = |d: &[f32]| Vec3::new(d[0] as f64, d[1] as f64, d[2] as f64);
    let mut s = [0.0; SHAPE_DIM];
    for (o, &v) in s.iter_mut().zip(&shape.data) {
        *o = v as f64;
    }
    let frames = (0..n)
        .map(|i| PoseParams {
            root_rotation: v3(&rot.data[3 * i..]),
            root_translation: v3(&trans.data[3 * i..]),
            joint_angles: (0..aj).map(|k| v3(&angles.data[3 * (i * aj + k)..])).collect(),
            shape: s,
        })
        .collect();
    MotionSequence::new(frames, c.fps, c.skeleton_id.clone())
}

/// `N x 12` rows of row-major rotation followed by translation.
pub fn trajectory_to_mat(traj: &[Se3]) -> Mat {
    Mat::from_fn(traj.len(), 12, |i, k| {
        if k < 9 {
            traj[i].rotation[(k / 3, k % 3)]
        } else {
            traj[i].translation[k - 9]
        }
    })
}

/// Inverse of [`trajectory_to_mat`]; rotations are re-orthonormalized
/// since the stored values went through `f32`.
pub fn trajectory_from_mat(m: &Mat) -> Result<Vec<Se3>> {
    if m.cols() != 12 {
        return Err(Error::Shape(format!("trajectory rows must be 12 wide, got {}", m.cols())));
    }
    Ok(m.iter_rows()
        .map(|r| {
            let raw = Mat3::from_row_slice(&r[..9]);
            let svd = raw.svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let mut rot = u * vt;
            if rot.determinant() < 0.0 {
                let mut u2 = u;
                u2.column_mut(2).neg_mut();
                rot = u2 * vt;
            }
            Se3::new(rot, Vec3::new(r[9], r[10], r[11]))
        })
        .collect())
}

pub fn take_stem(take: &SyntheticTake) -> String {
    format!(
        "s{:03}_{}_{:06}",
        take.scene_id,
        take.activity.name(),
        take.seed
    )
}

pub fn take_to_container(take: &SyntheticTake) -> Container {
    let mut c = motion_to_container(&take.motion);
    c.insert_mat("trajectory", &trajectory_to_mat(&take.trajectory));
    let f = take.intended_plants.first().map_or(0, Vec::len);
    c.insert(
        "intended_plants",
        Array {
            shape: vec![take.len(), f],
            data: take
                .intended_plants
                .iter()
                .flat_map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }))
                .collect(),
        },
    );
    c.insert_mat("image_features", &take.features);
    c.meta.insert("kind".into(), "take".into());
    c.meta.insert("scene_id".into(), take.scene_id.to_string());
    c.meta.insert("activity".into(), take.activity.name().into());
    c.meta.insert("seed".into(), take.seed.to_string());
    c
}

pub fn take_from_container(c: &Container) -> Result<SyntheticTake> {
    let parse = |k: &str| -> Result<u64> {
        c.meta(k)?
            .parse()
            .map_err(|_| Error::Format(format!("meta '{k}' is not an integer")))
    };
    let motion = motion_from_container(c)?;
    let plants = c.mat("intended_plants")?;
    Ok(SyntheticTake {
        scene_id: parse("scene_id")? as u32,
        activity: Activity::from_name(c.meta("activity")?)?,
        seed: parse("seed")?,
        trajectory: trajectory_from_mat(&c.mat("trajectory")?)?,
        features: c.mat("image_features")?,
        intended_plants: plants.iter_rows().map(|r| r.iter().map(|&v| v > 0.5).collect()).collect(),
        motion,
    })
}

/// Per-frame encoder inputs for a take.
pub fn take_queries(take: &SyntheticTake) -> Vec<ImageQuery> {
    take.trajectory
        .iter()
        .enumerate()
        .map(|(frame, head)| ImageQuery {
            scene_id: take.scene_id,
            activity_id: take.activity.id(),
            frame,
            head_pose: *head,
        })
        .collect()
}

fn cache_path(dir: &Path, take: &SyntheticTake) -> PathBuf {
    dir.join(format!("{}.feat.eem", take_stem(take)))
}

/// Loads one cached feature file, checking it against the take it serves.
pub fn read_cached_features(path: &Path, fps: f64, n_frames: usize, dim: usize) -> Result<Mat> {
    let c = read_container(path)?;
    if c.fps != fps {
        return Err(Error::Contract(format!(
            "feature cache '{}' is at {} fps, motion is at {fps}",
            path.display(),
            c.fps
        )));
    }
    let m = c.mat("image_features")?;
    if m.rows() != n_frames || m.cols() != dim {
        return Err(Error::Format(format!(
            "feature cache '{}' is {}x{}, expected {n_frames}x{dim}",
            path.display(),
            m.rows(),
            m.cols()
        )));
    }
    Ok(m)
}

/// Encodes each take once into `dir`; existing cache files are reused
/// without touching the encoder.
pub fn feature_cache(
    takes: &[SyntheticTake],
    encoder: &dyn ImageEncoder,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(takes.len());
    for take in takes {
        let path = cache_path(dir, take);
        if path.exists() {
            read_cached_features(&path, take.motion.fps, take.len(), encoder.dim())?;
        } else {
            let mut m = Mat::zeros(take.len(), encoder.dim());
            for q in take_queries(take) {
                m.row_mut(q.frame).copy_from_slice(&encoder.encode(&q));
            }
            let mut c = Container::new(take.motion.skeleton_id.clone(), take.motion.fps, take.len());
            c.insert_mat("image_features", &m);
            c.meta.insert("kind".into(), "features".into());
            c.meta.insert("take".into(), take_stem(take));
            write_container(&c, &path)?;
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Arrays `keypoints [V, N, J, 2]` and `confidence [V, N, J]`.
pub fn keypoints_to_container(kps: &Keypoints2D, skeleton_id: &str, fps: f64) -> Container {
    let (v, n) = (kps.num_views(), kps.num_frames());
    let j = kps.points.first().and_then(|f| f.first()).map_or(0, Vec::len);
    let mut c = Container::new(skeleton_id, fps, n);
    let mut pts = Vec::with_capacity(v * n * j * 2);
    let mut conf = Vec::with_capacity(v * n * j);
    for (pv, cv) in kps.points.iter().zip(&kps.confidence) {
        for (pf, cf) in pv.iter().zip(cv) {
            for (p, &w) in pf.iter().zip(cf) {
                pts.extend([p[0] as f32, p[1] as f32]);
                conf.push(w as f32);
            }
        }
    }
    c.insert("keypoints", Array { shape: vec![v, n, j, 2], data: pts });
    c.insert("confidence", Array { shape: vec![v, n, j], data: conf });
    c.meta.insert("kind".into(), "keypoints".into());
    c
}

pub fn keypoints_from_container(c: &Container) -> Result<Keypoints2D> {
    let pts = c.get("keypoints")?;
    let conf = c.get("confidence")?;
    let [v, n, j, 2] = pts.shape[..] else {
        return Err(Error::Format(format!("keypoints has shape {:?}", pts.shape)));
    };
    if conf.shape != [v, n, j] || n != c.n_frames {
        return Err(Error::Format("confidence shape disagrees with keypoints".into()));
    }
    let mut points = vec![vec![Vec::with_capacity(j); n]; v];
    let mut confidence = vec![vec![Vec::with_capacity(j); n]; v];
    for a in 0..v {
        for f in 0..n {
            for k in 0..j {
                let i = (a * n + f) * j + k;
                points[a][f].push([pts.data[2 * i] as f64, pts.data[2 * i + 1] as f64]);
                confidence[a][f].push(conf.data[i] as f64);
            }
        }
    }
    Ok(Keypoints2D { points, confidence })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::SyntheticEncoder;
    use crate::se3::Skeleton;
    use std::cell::Cell;

    struct Counting {
        inner: SyntheticEncoder,
        calls: Cell<usize>,
    }

    impl ImageEncoder for Counting {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn encode(&self, q: &ImageQuery) -> Vec<f64> {
            self.calls.set(self.calls.get() + 1);
            self.inner.encode(q)
        }
    }

    #[test]
    fn cache_hits_skip_encoder() {
        let s = Skeleton::humanoid22();
        let takes = vec![generate_take(0, 0, 8.0, 1, &s).unwrap(), generate_take(1, 2, 8.0, 2, &s).unwrap()];
        let dir = tempfile::tempdir().unwrap();
        let enc = Counting {
            inner: SyntheticEncoder::default(),
            calls: Cell::new(0),
        };
        let paths = feature_cache(&takes, &enc, dir.path()).unwrap();
        assert_eq!(enc.calls.get(), 160);
        let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        enc.calls.set(0);
        let again = feature_cache(&takes, &enc, dir.path()).unwrap();
        assert_eq!(enc.calls.get(), 0);
        assert_eq!(paths, again);

        let other = tempfile::tempdir().unwrap();
        let fresh = feature_cache(&takes, &enc, other.path()).unwrap();
        for (p, bytes) in fresh.iter().zip(&first) {
            assert_eq!(&std::fs::read(p).unwrap(), bytes);
        }
        let m = read_cached_features(&paths[0], 10.0, 80, IMAGE_DIM).unwrap();
        assert_eq!(m.cols(), IMAGE_DIM);
        assert!(matches!(
            read_cached_features(&paths[0], 30.0, 80, IMAGE_DIM),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn keypoints_round_trip() {
        let kps = Keypoints2D {
            points: vec![vec![vec![[1.5, -2.0], [3.0, 4.25]]; 3]; 2],
            confidence: vec![vec![vec![1.0, 0.0]; 3]; 2],
        };
        let c = keypoints_to_container(&kps, "chain5", 10.0);
        let back = keypoints_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, kps);
    }

    #[test]
    fn take_container_round_trip() {
        let s = Skeleton::humanoid22();
        let take = generate_take(3, 4, 8.0, 7, &s).unwrap();
        let c = take_to_container(&take);
        let back = take_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.intended_plants, take.intended_plants);
        assert_eq!(back.activity, take.activity);
        for (a, b) in back.motion.frames.iter().zip(&take.motion.frames) {
            assert!((a.root_translation - b.root_translation).norm() < 1e-5);
        }
        for (a, b) in back.trajectory.iter().zip(&take.trajectory) {
            assert!((a.rotation - b.rotation).norm() < 1e-6);
            assert!(a.is_valid(1e-9));
        }
        let again = take_to_container(&back);
        assert_eq!(again.get("joint_angles").unwrap(), c.get("joint_angles").unwrap());
    }
}
