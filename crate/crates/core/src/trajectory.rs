//! Expression trajectories: anchors, linear interpolation, optional neutral
//! insertion, and per-frame mesh reconstruction.
//!
//! A trajectory starts at the source face, visits each generated anchor in
//! order, and fills every segment with `F` linearly interpolated frames.
//! Identity shape and camera are constant across a trajectory; only
//! expression and pose move.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::head_model::{self, FaceParams, HeadModel, VertexArray};
use crate::ned::{self, NedModel};
use crate::rng;

/// What a frame represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum FrameRole {
    Source,
    Anchor,
    Interpolated,
    Neutral,
}

/// One frame of a trajectory.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpressionFrame {
    pub params: FaceParams,
    pub role: FrameRole,
}

/// An assembled frame sequence.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub frames: Vec<ExpressionFrame>,
    /// Indices of the source/anchor/neutral frames within `frames`.
    pub anchor_indices: Vec<usize>,
    pub frames_per_segment: usize,
}

impl Trajectory {
    /// Checks the structural invariants: anchors at the recorded positions,
    /// the frame-count arithmetic, and constant shape/camera.
    pub fn check(&self) -> Result<()> {
        let n_anchors = self.anchor_indices.len();
        if n_anchors == 0 {
            return Err(Error::Validation("trajectory has no anchors".into()));
        }
        let expected = n_anchors + (n_anchors - 1) * self.frames_per_segment;
        if self.frames.len() != expected {
            return Err(Error::Validation(format!(
                "trajectory has {} frames, expected {expected}",
                self.frames.len()
            )));
        }
        for (k, &idx) in self.anchor_indices.iter().enumerate() {
            if idx != k * (self.frames_per_segment + 1) {
                return Err(Error::Validation(format!("anchor {k} recorded at index {idx}")));
            }
            let role = self.frames[idx].role;
            if role == FrameRole::Interpolated {
                return Err(Error::Validation(format!(
                    "frame at anchor index {idx} has role {role:?}"
                )));
            }
        }
        let first = &self.frames[0].params;
        for (i, f) in self.frames.iter().enumerate() {
            if f.params.shape != first.shape || f.params.camera != first.camera {
                return Err(Error::Validation(format!(
                    "frame {i} changes identity shape or camera"
                )));
            }
        }
        Ok(())
    }
}

/// Linear interpolation between two frames: `delta` weighs the first frame,
/// so `delta = 1` reproduces `frame_l` and `delta = 0` reproduces `frame_n`.
/// Shape and camera must agree and are copied through.
pub fn interpolate(
    frame_l: &ExpressionFrame,
    frame_n: &ExpressionFrame,
    delta: f64,
) -> Result<ExpressionFrame> {
    if !(0.0..=1.0).contains(&delta) || !delta.is_finite() {
        return Err(Error::Domain(format!("delta must be in [0, 1], got {delta}")));
    }
    let (l, n) = (&frame_l.params, &frame_n.params);
    if l.shape != n.shape {
        return Err(Error::Validation("frames do not share identity shape".into()));
    }
    if l.camera != n.camera {
        return Err(Error::Validation("frames do not share camera".into()));
    }
    if l.expression.len() != n.expression.len() || l.pose.len() != n.pose.len() {
        return Err(Error::Shape("frames have mismatched parameter dims".into()));
    }
    let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| delta * x + (1.0 - delta) * y).collect()
    };
    Ok(ExpressionFrame {
        params: FaceParams {
            shape: l.shape.clone(),
            expression: lerp(&l.expression, &n.expression),
            pose: lerp(&l.pose, &n.pose),
            camera: l.camera.clone(),
        },
        role: FrameRole::Interpolated,
    })
}

/// Pre-interpolation description of a trajectory: the source face, the
/// generated anchors in visit order, and the interpolated frame count per
/// segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub source: FaceParams,
    /// Generated (expression, pose) anchors.
    pub anchors: Vec<(Vec<f64>, Vec<f64>)>,
    pub frames_per_segment: usize,
}

impl TrajectorySpec {
    fn anchor_frames(&self) -> Result<Vec<ExpressionFrame>> {
        if self.anchors.is_empty() {
            return Err(Error::Validation("at least one anchor is required".into()));
        }
        self.source.check_finite()?;
        let mut frames = Vec::with_capacity(1 + self.anchors.len());
        frames.push(ExpressionFrame { params: self.source.clone(), role: FrameRole::Source });
        for (i, (e, theta)) in self.anchors.iter().enumerate() {
            if e.len() != self.source.expression.len() || theta.len() != self.source.pose.len() {
                return Err(Error::Shape(format!(
                    "anchor {i} dims ({}, {}) do not match source ({}, {})",
                    e.len(),
                    theta.len(),
                    self.source.expression.len(),
                    self.source.pose.len()
                )));
            }
            frames.push(ExpressionFrame {
                params: FaceParams::new(
                    self.source.shape.clone(),
                    e.clone(),
                    theta.clone(),
                    self.source.camera.clone(),
                )?,
                role: FrameRole::Anchor,
            });
        }
        Ok(frames)
    }

    /// Assembles the trajectory: source, anchors, and interpolated segments
    /// with the weight on the earlier frame descending uniformly.
    pub fn build(&self) -> Result<Trajectory> {
        let anchors = self.anchor_frames()?;
        assemble(anchors, self.frames_per_segment)
    }

    /// Like [`build`](Self::build), but inserts a generated neutral anchor
    /// between each consecutive pair of generated expression anchors.
    pub fn build_with_neutral(&self, ned: &NedModel, seed: u64) -> Result<Trajectory> {
        let plain = self.anchor_frames()?;
        if self.anchors.len() < 2 {
            return Err(Error::Validation(
                "neutral insertion needs at least two expression anchors".into(),
            ));
        }
        let mut frames = Vec::new();
        // plain = [source, a_0, ..., a_{k-1}]; neutrals go between a_i, a_{i+1}.
        frames.push(plain[0].clone());
        for (gap, pair) in plain[1..].windows(2).enumerate() {
            frames.push(pair[0].clone());
            let (e, theta) = ned::generate_neutral(ned, rng::derive_seed(seed, &[gap as u64]))?;
            if e.len() != self.source.expression.len() || theta.len() != self.source.pose.len() {
                return Err(Error::Shape(
                    "neutral generator dims do not match the trajectory".into(),
                ));
            }
            frames.push(ExpressionFrame {
                params: FaceParams::new(
                    self.source.shape.clone(),
                    e,
                    theta,
                    self.source.camera.clone(),
                )?,
                role: FrameRole::Neutral,
            });
        }
        frames.push(plain[plain.len() - 1].clone());
        assemble(frames, self.frames_per_segment)
    }
}

/// Builds a trajectory from a source face and generated anchors.
pub fn build_trajectory(
    source: &FaceParams,
    anchors: &[(Vec<f64>, Vec<f64>)],
    frames_per_segment: usize,
) -> Result<Trajectory> {
    TrajectorySpec {
        source: source.clone(),
        anchors: anchors.to_vec(),
        frames_per_segment,
    }
    .build()
}

/// Builds a trajectory with generated neutrals between expression anchors.
pub fn insert_neutral(
    spec: &TrajectorySpec,
    ned: &NedModel,
    seed: u64,
) -> Result<Trajectory> {
    spec.build_with_neutral(ned, seed)
}

fn assemble(anchor_frames: Vec<ExpressionFrame>, f: usize) -> Result<Trajectory> {
    let mut frames = Vec::with_capacity(anchor_frames.len() + (anchor_frames.len() - 1) * f);
    let mut anchor_indices = Vec::with_capacity(anchor_frames.len());
    for i in 0..anchor_frames.len() {
        anchor_indices.push(frames.len());
        frames.push(anchor_frames[i].clone());
        if i + 1 < anchor_frames.len() {
            for k in 1..=f {
                let delta = 1.0 - k as f64 / (f + 1) as f64;
                frames.push(interpolate(&anchor_frames[i], &anchor_frames[i + 1], delta)?);
            }
        }
    }
    let traj = Trajectory { frames, anchor_indices, frames_per_segment: f };
    traj.check()?;
    Ok(traj)
}

/// Reconstructs the head mesh of every frame, in order.
pub fn meshes_for(traj: &Trajectory, model: &HeadModel) -> Result<Vec<VertexArray>> {
    traj.frames
        .iter()
        .map(|f| head_model::reconstruct_head(model, &f.params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn source(expr_dim: usize) -> FaceParams {
        let mut p = FaceParams::zeros(4, expr_dim, 6);
        p.camera = vec![0.0, 0.1, 0.9];
        p.expression[0] = 0.2;
        p
    }

    fn frame(e: Vec<f64>, role: FrameRole) -> ExpressionFrame {
        let mut params = source(e.len());
        params.expression = e;
        ExpressionFrame { params, role }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let l = frame(vec![1.0, 0.0, 0.0], FrameRole::Anchor);
        let n = frame(vec![0.0, 1.0, 0.0], FrameRole::Anchor);
        let at_l = interpolate(&l, &n, 1.0).unwrap();
        assert_eq!(at_l.params.expression, l.params.expression);
        assert_eq!(at_l.params.pose, l.params.pose);
        let at_n = interpolate(&l, &n, 0.0).unwrap();
        assert_eq!(at_n.params.expression, n.params.expression);
        let mid = interpolate(&l, &n, 0.5).unwrap();
        assert_eq!(mid.params.expression, vec![0.5, 0.5, 0.0]);
        assert_eq!(mid.role, FrameRole::Interpolated);
        assert!(matches!(interpolate(&l, &n, 1.2), Err(Error::Domain(_))));
        assert!(matches!(interpolate(&l, &n, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn interpolation_rejects_mismatched_identity() {
        let l = frame(vec![1.0, 0.0], FrameRole::Anchor);
        let mut n = frame(vec![0.0, 1.0], FrameRole::Anchor);
        n.params.shape[0] += 0.5;
        assert!(matches!(interpolate(&l, &n, 0.5), Err(Error::Validation(_))));
    }

    #[test]
    fn frame_counts_and_anchor_positions() {
        let anchors = vec![
            (vec![1.0, 0.0, 0.0], vec![0.0; 6]),
            (vec![0.0, 1.0, 0.0], vec![0.1, 0.0, 0.0, 0.0, 0.0, 0.0]),
        ];
        let traj = build_trajectory(&source(3), &anchors, 10).unwrap();
        assert_eq!(traj.frames.len(), 23);
        assert_eq!(traj.anchor_indices, vec![0, 11, 22]);
        assert_eq!(traj.frames[0].role, FrameRole::Source);
        assert_eq!(traj.frames[11].role, FrameRole::Anchor);
        assert_eq!(traj.frames[22].role, FrameRole::Anchor);
        traj.check().unwrap();

        let tight = build_trajectory(&source(3), &anchors, 0).unwrap();
        assert_eq!(tight.frames.len(), 3);
        assert_eq!(tight.anchor_indices, vec![0, 1, 2]);

        assert!(matches!(
            build_trajectory(&source(3), &[], 5),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn segments_are_affine_in_frame_index() {
        let anchors = vec![
            (vec![0.9, -0.4, 0.3], vec![0.2, 0.0, 0.0, 0.05, 0.0, 0.0]),
            (vec![-0.2, 0.8, 0.0], vec![0.0, 0.1, 0.0, 0.0, 0.02, 0.0]),
        ];
        let f = 7;
        let traj = build_trajectory(&source(3), &anchors, f).unwrap();
        for seg in 0..traj.anchor_indices.len() - 1 {
            let start = traj.anchor_indices[seg];
            for coord in 0..3 {
                let mut deltas = Vec::new();
                for k in 0..=f {
                    let a = traj.frames[start + k].params.expression[coord];
                    let b = traj.frames[start + k + 1].params.expression[coord];
                    deltas.push(b - a);
                }
                for d in &deltas {
                    assert!((d - deltas[0]).abs() < 1e-10, "non-uniform step {d} vs {}", deltas[0]);
                }
            }
        }
    }

    #[test]
    fn anchors_appear_unmodified() {
        let anchors = vec![
            (vec![0.9, -0.4, 0.3], vec![0.2, 0.0, 0.0, 0.05, 0.0, 0.0]),
            (vec![-0.2, 0.8, 0.0], vec![0.0, 0.1, 0.0, 0.0, 0.02, 0.0]),
        ];
        let traj = build_trajectory(&source(3), &anchors, 4).unwrap();
        let a0 = &traj.frames[traj.anchor_indices[1]];
        assert_eq!(a0.params.expression, anchors[0].0);
        assert_eq!(a0.params.pose, anchors[0].1);
        let a1 = &traj.frames[traj.anchor_indices[2]];
        assert_eq!(a1.params.expression, anchors[1].0);
        assert_eq!(a1.params.pose, anchors[1].1);
    }
}
