//! Skeletal motion: BVH I/O, joint selection, the exponential-map rotation
//! representation, resampling, and forward kinematics.

pub mod bvh;
pub mod rotation;

use crate::linalg::Mat;
use rotation::{Axis, Mat3, Vec3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("bvh parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(
        "motion row {row} (line {line}) has {got} values, expected {expected} channels"
    )]
    ChannelCountMismatch {
        row: usize,
        line: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-positive frame time {value} at line {line}")]
    NonPositiveFrameTime { value: f64, line: usize },
    #[error("unknown joint name '{0}'")]
    UnknownJoint(String),
    #[error("selected joints do not form one subtree: {0} roots found among the selection")]
    DisconnectedSelection(usize),
    #[error("target fps {target} does not evenly divide source fps {from_fps}")]
    NonDivisibleRate { from_fps: f64, target: f64 },
    #[error("joint '{name}' has {got} rotation channels, expected 3")]
    BadRotationChannels { name: String, got: usize },
    #[error("pose width {got} does not match skeleton ({expected} channels)")]
    ChannelLayoutMismatch { got: usize, expected: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    XPosition,
    YPosition,
    ZPosition,
    XRotation,
    YRotation,
    ZRotation,
}

impl Channel {
    pub fn is_rotation(self) -> bool {
        matches!(
            self,
            Channel::XRotation | Channel::YRotation | Channel::ZRotation
        )
    }

    pub fn rotation_axis(self) -> Option<Axis> {
        match self {
            Channel::XRotation => Some(Axis::X),
            Channel::YRotation => Some(Axis::Y),
            Channel::ZRotation => Some(Axis::Z),
            _ => None,
        }
    }

    pub fn bvh_name(self) -> &'static str {
        match self {
            Channel::XPosition => "Xposition",
            Channel::YPosition => "Yposition",
            Channel::ZPosition => "Zposition",
            Channel::XRotation => "Xrotation",
            Channel::YRotation => "Yrotation",
            Channel::ZRotation => "Zrotation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    /// Parent joint index; `None` for the root. Always smaller than the
    /// joint's own index (topological order).
    pub parent: Option<usize>,
    pub offset: Vec3,
    pub channels: Vec<Channel>,
    pub end_site: Option<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
}

impl Skeleton {
    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Total channel count across all joints (the motion row width).
    pub fn total_channels(&self) -> usize {
        self.joints.iter().map(|j| j.channels.len()).sum()
    }

    /// Rotation channel order of a joint, as an axis triple.
    pub fn rotation_order(&self, joint: usize) -> Result<[Axis; 3], MotionError> {
        let axes: Vec<Axis> = self.joints[joint]
            .channels
            .iter()
            .filter_map(|c| c.rotation_axis())
            .collect();
        if axes.len() != 3 {
            return Err(MotionError::BadRotationChannels {
                name: self.joints[joint].name.clone(),
                got: axes.len(),
            });
        }
        Ok([axes[0], axes[1], axes[2]])
    }
}

/// Joint-angle frames in the exponential map, `T x 3J`, radians.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub frames: Mat,
    pub fps: f64,
}

impl PoseSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }

    pub fn expmap(&self, frame: usize, joint: usize) -> Vec3 {
        let r = self.frames.row(frame);
        [r[3 * joint], r[3 * joint + 1], r[3 * joint + 2]]
    }
}

/// World-space joint positions, `T x 3J`, dataset length units.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionSequence {
    pub frames: Mat,
    pub num_joints: usize,
    pub fps: f64,
}

impl PositionSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn position(&self, frame: usize, joint: usize) -> Vec3 {
        let r = self.frames.row(frame);
        [r[3 * joint], r[3 * joint + 1], r[3 * joint + 2]]
    }
}

/// Convert a parsed BVH document to an exponential-map pose sequence.
/// Position channels (root translation) are dropped: modeling operates on
/// joint angles only.
pub fn document_to_pose(doc: &bvh::BvhDocument) -> Result<PoseSequence, MotionError> {
    let skel = &doc.skeleton;
    let t = doc.frames.rows();
    let mut out = Mat::zeros(t, 3 * skel.num_joints());
    // per-joint (channel offset, rotation positions within the joint block)
    let mut offsets = Vec::with_capacity(skel.num_joints());
    let mut cursor = 0;
    for j in 0..skel.num_joints() {
        let order = skel.rotation_order(j)?;
        let rot_slots: Vec<usize> = skel.joints[j]
            .channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_rotation())
            .map(|(i, _)| cursor + i)
            .collect();
        offsets.push((order, rot_slots));
        cursor += skel.joints[j].channels.len();
    }
    for f in 0..t {
        let row = doc.frames.row(f);
        for (j, (order, slots)) in offsets.iter().enumerate() {
            let angles = [
                row[slots[0]].to_radians(),
                row[slots[1]].to_radians(),
                row[slots[2]].to_radians(),
            ];
            let v = rotation::euler_to_expmap(&angles, order);
            let orow = out.row_mut(f);
            orow[3 * j] = v[0];
            orow[3 * j + 1] = v[1];
            orow[3 * j + 2] = v[2];
        }
    }
    Ok(PoseSequence {
        frames: out,
        fps: 1.0 / doc.frame_time,
    })
}

/// Rebuild a BVH document from an exponential-map pose sequence. Rotation
/// channels are recovered per joint in its declared channel order; any
/// position channels are written as zero.
pub fn pose_to_document(
    skeleton: &Skeleton,
    pose: &PoseSequence,
) -> Result<bvh::BvhDocument, MotionError> {
    if pose.channels() != 3 * skeleton.num_joints() {
        return Err(MotionError::ChannelLayoutMismatch {
            got: pose.channels(),
            expected: 3 * skeleton.num_joints(),
        });
    }
    let total = skeleton.total_channels();
    let t = pose.num_frames();
    let mut frames = Mat::zeros(t, total);
    for f in 0..t {
        let mut cursor = 0;
        for j in 0..skeleton.num_joints() {
            let order = skeleton.rotation_order(j)?;
            let m = rotation::expmap_to_matrix(&pose.expmap(f, j));
            let euler = rotation::matrix_to_euler(&m, &order);
            let mut rot_i = 0;
            for (i, ch) in skeleton.joints[j].channels.iter().enumerate() {
                if ch.is_rotation() {
                    frames[(f, cursor + i)] = euler[rot_i].to_degrees();
                    rot_i += 1;
                }
            }
            cursor += skeleton.joints[j].channels.len();
        }
    }
    Ok(bvh::BvhDocument {
        skeleton: skeleton.clone(),
        frames,
        frame_time: 1.0 / pose.fps,
    })
}

/// Restrict skeleton and pose to the named joints. The selection must form a
/// single subtree: exactly one selected joint may have an unselected parent
/// and it becomes the new root.
pub fn select_upper_body(
    skeleton: &Skeleton,
    pose: &PoseSequence,
    names: &[String],
) -> Result<(Skeleton, PoseSequence), MotionError> {
    if pose.channels() != 3 * skeleton.num_joints() {
        return Err(MotionError::ChannelLayoutMismatch {
            got: pose.channels(),
            expected: 3 * skeleton.num_joints(),
        });
    }
    let mut selected = vec![false; skeleton.num_joints()];
    for name in names {
        let idx = skeleton
            .joint_index(name)
            .ok_or_else(|| MotionError::UnknownJoint(name.clone()))?;
        selected[idx] = true;
    }
    let kept: Vec<usize> = (0..skeleton.num_joints()).filter(|&i| selected[i]).collect();
    let roots = kept
        .iter()
        .filter(|&&i| skeleton.joints[i].parent.map_or(true, |p| !selected[p]))
        .count();
    if roots != 1 {
        return Err(MotionError::DisconnectedSelection(roots));
    }
    let mut remap = vec![usize::MAX; skeleton.num_joints()];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let joints = kept
        .iter()
        .map(|&old| {
            let j = &skeleton.joints[old];
            let parent = j.parent.filter(|&p| selected[p]).map(|p| remap[p]);
            // a previously internal joint may become a leaf; give it an
            // end site so the written hierarchy stays well-formed
            let is_leaf = !kept
                .iter()
                .any(|&c| skeleton.joints[c].parent == Some(old));
            Joint {
                name: j.name.clone(),
                parent,
                offset: j.offset,
                channels: j
                    .channels
                    .iter()
                    .copied()
                    .filter(|c| c.is_rotation())
                    .collect(),
                end_site: if is_leaf {
                    Some(j.end_site.unwrap_or([0.0; 3]))
                } else {
                    None
                },
            }
        })
        .collect();
    let t = pose.num_frames();
    let mut frames = Mat::zeros(t, 3 * kept.len());
    for f in 0..t {
        let src = pose.frames.row(f);
        let dst = frames.row_mut(f);
        for (new, &old) in kept.iter().enumerate() {
            dst[3 * new..3 * new + 3].copy_from_slice(&src[3 * old..3 * old + 3]);
        }
    }
    Ok((
        Skeleton { joints },
        PoseSequence {
            frames,
            fps: pose.fps,
        },
    ))
}

/// Decimate to a lower frame rate. The rate ratio must be an integer.
pub fn resample(pose: &PoseSequence, target_fps: f64) -> Result<PoseSequence, MotionError> {
    let ratio = pose.fps / target_fps;
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-6 {
        return Err(MotionError::NonDivisibleRate {
            from_fps: pose.fps,
            target: target_fps,
        });
    }
    let k = k as usize;
    if k == 1 {
        return Ok(pose.clone());
    }
    let t = pose.num_frames().div_ceil(k);
    let mut frames = Mat::zeros(t, pose.channels());
    for (out_f, f) in (0..pose.num_frames()).step_by(k).enumerate() {
        frames.row_mut(out_f).copy_from_slice(pose.frames.row(f));
    }
    Ok(PoseSequence { frames, fps: target_fps })
}

/// World-space joint positions with the root pinned at the origin:
/// `pos(j) = pos(parent) + R_global(parent) * offset(j)`.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    pose: &PoseSequence,
) -> Result<PositionSequence, MotionError> {
    if pose.channels() != 3 * skeleton.num_joints() {
        return Err(MotionError::ChannelLayoutMismatch {
            got: pose.channels(),
            expected: 3 * skeleton.num_joints(),
        });
    }
    let nj = skeleton.num_joints();
    let t = pose.num_frames();
    let mut out = Mat::zeros(t, 3 * nj);
    let mut global: Vec<Mat3> = vec![rotation::IDENTITY; nj];
    let mut pos: Vec<Vec3> = vec![[0.0; 3]; nj];
    for f in 0..t {
        for j in 0..nj {
            let local = rotation::expmap_to_matrix(&pose.expmap(f, j));
            match skeleton.joints[j].parent {
                None => {
                    global[j] = local;
                    pos[j] = [0.0; 3];
                }
                Some(p) => {
                    let step = rotation::mat3_apply(&global[p], &skeleton.joints[j].offset);
                    pos[j] = [pos[p][0] + step[0], pos[p][1] + step[1], pos[p][2] + step[2]];
                    global[j] = rotation::mat3_mul(&global[p], &local);
                }
            }
            let row = out.row_mut(f);
            row[3 * j..3 * j + 3].copy_from_slice(&pos[j]);
        }
    }
    Ok(PositionSequence {
        frames: out,
        num_joints: nj,
        fps: pose.fps,
    })
}
