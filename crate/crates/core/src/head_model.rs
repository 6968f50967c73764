//! FLAME-style parametric head model.
//!
//! A [`HeadModel`] holds base vertices, identity/expression blendshape bases,
//! a joint regressor, skinning weights, and a joint hierarchy. Vertex
//! reconstruction first applies the blendshapes, regresses joint locations
//! from the blended rest mesh, then rotates vertices by skin-weight-blended
//! joint transforms (standard linear blend skinning with the kinematic chain
//! composed root-to-leaf).
//!
//! Head reconstruction here is geometry only: no hair/shoulder deformation
//! and no texture, so [`reconstruct_head`] coincides with
//! [`compute_vertices`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng;
use crate::tape::{Tape, Var};

/// Norm threshold below which the axis-angle rotation switches to its
/// second-order Taylor expansion.
const SMALL_ANGLE: f64 = 1e-8;

/// Parametric head model. All tensors are immutable after construction.
#[derive(Debug, Clone)]
pub struct HeadModel {
    /// N x 3 rest vertices, meters.
    base_vertices: Mat,
    /// 3N x M identity blendshape basis (vertex-major flattening).
    shape_basis: Mat,
    /// 3N x K expression blendshape basis.
    expr_basis: Mat,
    /// Triangles as vertex index triples.
    faces: Vec<[usize; 3]>,
    /// J x N joint regressor over the blended rest mesh.
    joint_regressor: Mat,
    /// N x J skinning weights; rows are non-negative and sum to one.
    skin_weights: Mat,
    /// Parent joint per joint, -1 for roots.
    joint_parents: Vec<i32>,
    /// Number of pose coordinates (3 per posed joint).
    pose_dim: usize,
}

/// One face's coefficients: identity shape, expression, pose (axis-angle,
/// radians), and camera. Camera is carried for downstream consumers; vertex
/// reconstruction does not use it.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FaceParams {
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
    pub pose: Vec<f64>,
    pub camera: Vec<f64>,
}

impl FaceParams {
    pub fn new(shape: Vec<f64>, expression: Vec<f64>, pose: Vec<f64>, camera: Vec<f64>) -> Result<Self> {
        let p = FaceParams { shape, expression, pose, camera };
        p.check_finite()?;
        Ok(p)
    }

    /// All-zero parameters for the given dimensions (camera is length 3).
    pub fn zeros(n_shape: usize, n_expr: usize, pose_dim: usize) -> Self {
        FaceParams {
            shape: vec![0.0; n_shape],
            expression: vec![0.0; n_expr],
            pose: vec![0.0; pose_dim],
            camera: vec![0.0; 3],
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        let all = self
            .shape
            .iter()
            .chain(&self.expression)
            .chain(&self.pose)
            .chain(&self.camera);
        for v in all {
            if !v.is_finite() {
                return Err(Error::Domain("non-finite face parameter".into()));
            }
        }
        Ok(())
    }

    /// The jaw rotation coordinates (pose entries 3..6).
    pub fn jaw(&self) -> &[f64] {
        &self.pose[3..6]
    }
}

/// Reconstructed vertex positions (N x 3, meters).
#[derive(Debug, Clone, PartialEq)]
pub struct VertexArray {
    pub positions: Mat,
}

impl HeadModel {
    /// Validates every structural invariant and returns the model.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        base_vertices: Mat,
        shape_basis: Mat,
        expr_basis: Mat,
        faces: Vec<[usize; 3]>,
        joint_regressor: Mat,
        skin_weights: Mat,
        joint_parents: Vec<i32>,
    ) -> Result<Self> {
        let n = base_vertices.rows();
        let j = joint_parents.len();
        if base_vertices.cols() != 3 {
            return Err(Error::Shape("base_vertices must be N x 3".into()));
        }
        if shape_basis.rows() != 3 * n || expr_basis.rows() != 3 * n {
            return Err(Error::Shape("blendshape bases must have 3N rows".into()));
        }
        if joint_regressor.shape() != (j, n) {
            return Err(Error::Shape(format!(
                "joint_regressor must be {j} x {n}, got {:?}",
                joint_regressor.shape()
            )));
        }
        if skin_weights.shape() != (n, j) {
            return Err(Error::Shape(format!(
                "skin_weights must be {n} x {j}, got {:?}",
                skin_weights.shape()
            )));
        }
        for i in 0..n {
            let row = skin_weights.row(i);
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::Validation(format!("negative skin weight at vertex {i}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "skin weights of vertex {i} sum to {sum}, expected 1"
                )));
            }
        }
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&ix| ix >= n) {
                return Err(Error::Shape(format!("face {fi} references vertex out of range")));
            }
        }
        validate_forest(&joint_parents)?;
        let model = HeadModel {
            base_vertices,
            shape_basis,
            expr_basis,
            faces,
            joint_regressor,
            skin_weights,
            joint_parents,
            pose_dim: 3 * j,
        };
        Ok(model)
    }

    pub fn n_vertices(&self) -> usize {
        self.base_vertices.rows()
    }

    pub fn n_shape(&self) -> usize {
        self.shape_basis.cols()
    }

    pub fn n_expr(&self) -> usize {
        self.expr_basis.cols()
    }

    pub fn n_joints(&self) -> usize {
        self.joint_parents.len()
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn base_vertices(&self) -> &Mat {
        &self.base_vertices
    }

    pub fn shape_basis(&self) -> &Mat {
        &self.shape_basis
    }

    pub fn expr_basis(&self) -> &Mat {
        &self.expr_basis
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn joint_regressor(&self) -> &Mat {
        &self.joint_regressor
    }

    pub fn skin_weights(&self) -> &Mat {
        &self.skin_weights
    }

    pub fn joint_parents(&self) -> &[i32] {
        &self.joint_parents
    }

    fn check_params(&self, params: &FaceParams) -> Result<()> {
        if params.shape.len() != self.n_shape() {
            return Err(Error::Shape(format!(
                "shape has {} coefficients, model expects {}",
                params.shape.len(),
                self.n_shape()
            )));
        }
        if params.expression.len() != self.n_expr() {
            return Err(Error::Shape(format!(
                "expression has {} coefficients, model expects {}",
                params.expression.len(),
                self.n_expr()
            )));
        }
        if params.pose.len() != self.pose_dim {
            return Err(Error::Shape(format!(
                "pose has {} coordinates, model expects {}",
                params.pose.len(),
                self.pose_dim
            )));
        }
        params.check_finite()
    }

    /// Rest mesh with shape and expression blendshapes applied (N x 3).
    pub fn blended_rest(&self, shape: &[f64], expression: &[f64]) -> Mat {
        let mut flat: Vec<f64> = self.base_vertices.data().to_vec();
        accumulate_basis(&mut flat, &self.shape_basis, shape);
        accumulate_basis(&mut flat, &self.expr_basis, expression);
        Mat::from_vec(self.n_vertices(), 3, flat)
    }

    /// Per-joint skinning transforms for the given pose over a blended rest
    /// mesh: world transform of the kinematic chain with the rest joint
    /// subtracted back out.
    fn skinning_transforms(&self, blended: &Mat, pose: &[f64]) -> Vec<Affine> {
        let joints = self.joint_regressor.matmul(blended);
        let j = self.n_joints();
        let locals: Vec<[[f64; 3]; 3]> =
            (0..j).map(|i| rodrigues(&pose[3 * i..3 * i + 3])).collect();
        // World transforms, composed root-to-leaf.
        let mut world: Vec<Option<Affine>> = vec![None; j];
        let mut remaining = j;
        while remaining > 0 {
            let before = remaining;
            for i in 0..j {
                if world[i].is_some() {
                    continue;
                }
                let p = self.joint_parents[i];
                let ji = [joints[(i, 0)], joints[(i, 1)], joints[(i, 2)]];
                if p < 0 {
                    world[i] = Some(Affine { r: locals[i], t: ji });
                    remaining -= 1;
                } else if let Some(gp) = &world[p as usize] {
                    let jp = [joints[(p as usize, 0)], joints[(p as usize, 1)], joints[(p as usize, 2)]];
                    let local = Affine {
                        r: locals[i],
                        t: [ji[0] - jp[0], ji[1] - jp[1], ji[2] - jp[2]],
                    };
                    world[i] = Some(gp.compose(&local));
                    remaining -= 1;
                }
            }
            assert!(remaining < before, "joint hierarchy is not a forest");
        }
        world
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let g = g.expect("all joints resolved");
                let ji = [joints[(i, 0)], joints[(i, 1)], joints[(i, 2)]];
                // T = G * translate(-j): rotation kept, translation t - R j.
                let rj = g.apply_linear(ji);
                Affine { r: g.r, t: [g.t[0] - rj[0], g.t[1] - rj[1], g.t[2] - rj[2]] }
            })
            .collect()
    }
}

/// Evaluates the model: blendshapes first, then joints regressed from the
/// blended rest mesh, then linear blend skinning by the posed joint
/// transforms.
pub fn compute_vertices(model: &HeadModel, params: &FaceParams) -> Result<VertexArray> {
    model.check_params(params)?;
    let blended = model.blended_rest(&params.shape, &params.expression);
    // Identity pose means every skinning transform is exactly the identity;
    // skipping them keeps the zero-parameter case bit-exact.
    if params.pose.iter().all(|&v| v == 0.0) {
        return Ok(VertexArray { positions: blended });
    }
    let transforms = model.skinning_transforms(&blended, &params.pose);
    let n = model.n_vertices();
    let j = model.n_joints();
    let mut out = Mat::zeros(n, 3);
    for (jt, tf) in transforms.iter().enumerate().take(j) {
        for v in 0..n {
            let w = model.skin_weights[(v, jt)];
            if w == 0.0 {
                continue;
            }
            let p = [blended[(v, 0)], blended[(v, 1)], blended[(v, 2)]];
            let q = tf.apply(p);
            out[(v, 0)] += w * q[0];
            out[(v, 1)] += w * q[1];
            out[(v, 2)] += w * q[2];
        }
    }
    Ok(VertexArray { positions: out })
}

/// Full head reconstruction. Image-driven hair/shoulder deformation is out of
/// scope, so this is exactly [`compute_vertices`].
pub fn reconstruct_head(model: &HeadModel, params: &FaceParams) -> Result<VertexArray> {
    compute_vertices(model, params)
}

/// Deterministic pseudo-random desk-scale model satisfying every invariant:
/// unit-ball vertices, blendshape bases with O(0.01 m) offsets, convex joint
/// regressor rows, softmax-normalized skin weights, and a parent chain.
pub fn synth_model(
    n_vertices: usize,
    n_shape: usize,
    n_expr: usize,
    n_joints: usize,
    seed: u64,
) -> Result<HeadModel> {
    if n_vertices < 4 {
        return Err(Error::Config(format!("n_vertices must be >= 4, got {n_vertices}")));
    }
    if n_joints < 2 {
        return Err(Error::Config(format!("n_joints must be >= 2, got {n_joints}")));
    }
    if n_shape == 0 || n_expr == 0 {
        return Err(Error::Config("blendshape counts must be >= 1".into()));
    }
    let mut r = rng::stream(rng::derive_seed(seed, &[0x11ead]));

    let base = Mat::from_fn(n_vertices, 3, |_, _| 0.0);
    let mut base = base;
    for i in 0..n_vertices {
        let mut dir;
        loop {
            dir = [rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            if norm > 1e-6 {
                dir = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
                break;
            }
        }
        let radius: f64 = r.gen_range(0.0..1.0f64).powf(1.0 / 3.0);
        base[(i, 0)] = dir[0] * radius;
        base[(i, 1)] = dir[1] * radius;
        base[(i, 2)] = dir[2] * radius;
    }

    let basis_std = 0.01;
    let shape_basis = Mat::from_fn(3 * n_vertices, n_shape, |_, _| rng::normal(&mut r) * basis_std);
    let expr_basis = Mat::from_fn(3 * n_vertices, n_expr, |_, _| rng::normal(&mut r) * basis_std);

    let mut joint_regressor = Mat::from_fn(n_joints, n_vertices, |_, _| rng::normal(&mut r).abs());
    for i in 0..n_joints {
        let sum: f64 = joint_regressor.row(i).iter().sum();
        for v in joint_regressor.row_mut(i) {
            *v /= sum;
        }
    }

    let mut skin_weights = Mat::zeros(n_vertices, n_joints);
    for i in 0..n_vertices {
        let logits: Vec<f64> = (0..n_joints).map(|_| rng::normal(&mut r)).collect();
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (jt, e) in exps.iter().enumerate() {
            skin_weights[(i, jt)] = e / sum;
        }
    }

    let faces = (0..2 * n_vertices)
        .map(|_| {
            let a = r.gen_range(0..n_vertices);
            let mut b = r.gen_range(0..n_vertices);
            while b == a {
                b = r.gen_range(0..n_vertices);
            }
            let mut c = r.gen_range(0..n_vertices);
            while c == a || c == b {
                c = r.gen_range(0..n_vertices);
            }
            [a, b, c]
        })
        .collect();

    let joint_parents: Vec<i32> = (0..n_joints).map(|i| i as i32 - 1).collect();

    HeadModel::new(base, shape_basis, expr_basis, faces, joint_regressor, skin_weights, joint_parents)
}

/// Axis-angle to rotation matrix (Rodrigues), with the small-angle limit
/// handled by a second-order Taylor expansion.
pub fn rodrigues(axis: &[f64]) -> [[f64; 3]; 3] {
    let (x, y, z) = (axis[0], axis[1], axis[2]);
    let s = x * x + y * y + z * z;
    let theta = s.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - s / 6.0, 0.5 - s / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / s)
    };
    // R = I + a K + b K^2 with K the cross-product matrix of the axis.
    [
        [1.0 + b * (-z * z - y * y), -a * z + b * x * y, a * y + b * x * z],
        [a * z + b * x * y, 1.0 + b * (-z * z - x * x), -a * x + b * y * z],
        [-a * y + b * x * z, a * x + b * y * z, 1.0 + b * (-y * y - x * x)],
    ]
}

/// Rigid transform: p' = R p + t.
#[derive(Debug, Clone, Copy)]
struct Affine {
    r: [[f64; 3]; 3],
    t: [f64; 3],
}

impl Affine {
    fn compose(&self, local: &Affine) -> Affine {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| self.r[i][k] * local.r[k][j]).sum();
            }
        }
        let lt = self.apply_linear(local.t);
        Affine { r, t: [lt[0] + self.t[0], lt[1] + self.t[1], lt[2] + self.t[2]] }
    }

    fn apply_linear(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.r[0][0] * p[0] + self.r[0][1] * p[1] + self.r[0][2] * p[2],
            self.r[1][0] * p[0] + self.r[1][1] * p[1] + self.r[1][2] * p[2],
            self.r[2][0] * p[0] + self.r[2][1] * p[1] + self.r[2][2] * p[2],
        ]
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.apply_linear(p);
        [q[0] + self.t[0], q[1] + self.t[1], q[2] + self.t[2]]
    }
}

fn accumulate_basis(flat: &mut [f64], basis: &Mat, coeffs: &[f64]) {
    assert_eq!(basis.cols(), coeffs.len());
    for (i, out) in flat.iter_mut().enumerate() {
        let row = basis.row(i);
        let mut acc = 0.0;
        for (&b, &c) in row.iter().zip(coeffs) {
            acc += b * c;
        }
        *out += acc;
    }
}

fn validate_forest(parents: &[i32]) -> Result<()> {
    let j = parents.len();
    for (i, &p) in parents.iter().enumerate() {
        if p >= 0 && (p as usize >= j || p as usize == i) {
            return Err(Error::Validation(format!("joint {i} has invalid parent {p}")));
        }
        // Walk to a root; a cycle would exceed J steps.
        let mut cur = p;
        let mut steps = 0;
        while cur >= 0 {
            cur = parents[cur as usize];
            steps += 1;
            if steps > j {
                return Err(Error::Validation(String::from("joint hierarchy contains a cycle")));
            }
        }
    }
    Ok(())
}

/// Differentiable vertex reconstruction on a tape.
///
/// `expr_row` (1 x K) and `pose_row` (1 x pose_dim) are tape nodes; shape
/// coefficients are folded into a constant since identity is never learned.
/// Returns the N x 3 vertex node. Mirrors [`compute_vertices`] exactly; the
/// equivalence is covered by tests.
pub fn vertices_on_tape(
    t: &mut Tape,
    model: &HeadModel,
    shape: &[f64],
    expr_row: Var,
    pose_row: Var,
) -> Var {
    let n = model.n_vertices();
    let j = model.n_joints();

    // base + S*shape as a constant, expression offsets on the tape.
    let mut rest_flat = model.base_vertices.data().to_vec();
    accumulate_basis(&mut rest_flat, &model.shape_basis, shape);
    let rest = t.leaf(Mat::from_vec(3 * n, 1, rest_flat));
    let basis = t.leaf(model.expr_basis.clone());
    let e_col = t.transpose(expr_row);
    let offsets = t.matmul(basis, e_col);
    let blended_flat = t.add(rest, offsets);
    let blended = t.reshape(blended_flat, n, 3);

    let regressor = t.leaf(model.joint_regressor.clone());
    let joints = t.matmul(regressor, blended);

    // World transforms (row convention: p' = p R^T + t).
    let locals: Vec<Var> = (0..j)
        .map(|i| {
            let axis = t.slice_cols(pose_row, 3 * i, 3);
            rodrigues_on_tape(t, axis)
        })
        .collect();
    let mut world: Vec<Option<(Var, Var)>> = vec![None; j];
    let mut remaining = j;
    while remaining > 0 {
        let before = remaining;
        for i in 0..j {
            if world[i].is_some() {
                continue;
            }
            let p = model.joint_parents[i];
            let ji = t.slice_rows(joints, i, 1);
            if p < 0 {
                world[i] = Some((locals[i], ji));
                remaining -= 1;
            } else if let Some((rp, tp)) = world[p as usize] {
                let jp = t.slice_rows(joints, p as usize, 1);
                let lt = t.sub(ji, jp);
                let r = t.matmul(rp, locals[i]);
                let rp_t = t.transpose(rp);
                let rot_lt = t.matmul(lt, rp_t);
                let tw = t.add(rot_lt, tp);
                world[i] = Some((r, tw));
                remaining -= 1;
            }
        }
        assert!(remaining < before, "joint hierarchy is not a forest");
    }

    let mut out: Option<Var> = None;
    for (i, w) in world.into_iter().enumerate() {
        let (r, tw) = w.expect("all joints resolved");
        let ji = t.slice_rows(joints, i, 1);
        let r_t = t.transpose(r);
        let rot_ji = t.matmul(ji, r_t);
        let t_skin = t.sub(tw, rot_ji);
        let moved = t.matmul(blended, r_t);
        let moved = t.add_row(moved, t_skin);
        // Per-vertex weights for this joint, tiled to N x 3.
        let w_tile = t.leaf(Mat::from_fn(n, 3, |v, _| model.skin_weights[(v, i)]));
        let contrib = t.mul(moved, w_tile);
        out = Some(match out {
            Some(acc) => t.add(acc, contrib),
            None => contrib,
        });
    }
    out.expect("at least one joint")
}

/// Axis-angle (1 x 3 node) to rotation matrix (3 x 3 node) on a tape, with
/// the same small-angle Taylor guard as [`rodrigues`].
fn rodrigues_on_tape(t: &mut Tape, axis: Var) -> Var {
    let sq = t.mul(axis, axis);
    let s = t.sum_all(sq);
    let one = t.leaf(Mat::filled(1, 1, 1.0));
    let half = t.leaf(Mat::filled(1, 1, 0.5));
    let (a, b) = if t.scalar(s) < SMALL_ANGLE * SMALL_ANGLE {
        let s6 = t.scale(s, 1.0 / 6.0);
        let a = t.sub(one, s6);
        let s24 = t.scale(s, 1.0 / 24.0);
        let b = t.sub(half, s24);
        (a, b)
    } else {
        let theta = t.sqrt(s);
        let sin = t.sin(theta);
        let a = t.div(sin, theta);
        let cos = t.cos(theta);
        let omc = t.sub(one, cos);
        let b = t.div(omc, s);
        (a, b)
    };
    let x = t.slice_cols(axis, 0, 1);
    let y = t.slice_cols(axis, 1, 1);
    let z = t.slice_cols(axis, 2, 1);
    let zero = t.leaf(Mat::zeros(1, 1));
    let nx = t.scale(x, -1.0);
    let ny = t.scale(y, -1.0);
    let nz = t.scale(z, -1.0);
    // K = cross-product matrix of the axis.
    let r0a = t.hcat(zero, nz);
    let r0 = t.hcat(r0a, y);
    let r1a = t.hcat(z, zero);
    let r1 = t.hcat(r1a, nx);
    let r2a = t.hcat(ny, x);
    let r2 = t.hcat(r2a, zero);
    let r01 = t.vcat_blocked(r0, r1, 1, 1);
    let k = t.vcat_blocked(r01, r2, 2, 1);
    let k2 = t.matmul(k, k);
    let ak = t.mul_scalar(k, a);
    let bk2 = t.mul_scalar(k2, b);
    let eye = t.leaf(Mat::identity(3));
    let partial = t.add(eye, ak);
    t.add(partial, bk2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_valid() {
        let a = synth_model(8, 10, 50, 2, 7).unwrap();
        let b = synth_model(8, 10, 50, 2, 7).unwrap();
        assert_eq!(a.base_vertices, b.base_vertices);
        assert_eq!(a.skin_weights, b.skin_weights);
        assert_eq!(a.expr_basis, b.expr_basis);
        for i in 0..a.n_vertices() {
            let sum: f64 = a.skin_weights.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
        let c = synth_model(8, 10, 50, 2, 8).unwrap();
        assert_ne!(a.base_vertices, c.base_vertices);
    }

    #[test]
    fn invalid_dims_are_config_errors() {
        assert!(matches!(synth_model(3, 10, 50, 2, 1), Err(Error::Config(_))));
        assert!(matches!(synth_model(8, 10, 50, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_params_return_base_vertices_exactly() {
        let model = synth_model(12, 5, 7, 2, 3).unwrap();
        let params = FaceParams::zeros(5, 7, model.pose_dim());
        let v = compute_vertices(&model, &params).unwrap();
        assert_eq!(v.positions, *model.base_vertices());
        let r = reconstruct_head(&model, &params).unwrap();
        assert_eq!(r.positions, v.positions);
    }

    #[test]
    fn blendshape_offsets_are_linear_at_identity_pose() {
        let model = synth_model(10, 4, 6, 2, 5).unwrap();
        let mut params = FaceParams::zeros(4, 6, model.pose_dim());
        let alpha = 0.37;
        let k = 2;
        params.expression[k] = alpha;
        let v = compute_vertices(&model, &params).unwrap();
        for vtx in 0..10 {
            for c in 0..3 {
                let expected =
                    model.base_vertices()[(vtx, c)] + alpha * model.expr_basis()[(3 * vtx + c, k)];
                assert!((v.positions[(vtx, c)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rodrigues_small_angle_matches_series() {
        let r = rodrigues(&[0.0, 0.0, 0.0]);
        for (i, row) in r.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-15);
            }
        }
        // Closed form about z for a moderate angle.
        let theta = 0.3f64;
        let rz = rodrigues(&[0.0, 0.0, theta]);
        assert!((rz[0][0] - theta.cos()).abs() < 1e-15);
        assert!((rz[0][1] + theta.sin()).abs() < 1e-15);
        assert!((rz[1][0] - theta.sin()).abs() < 1e-15);
        // Orthonormal on both sides of the Taylor threshold.
        for axis in [[SMALL_ANGLE * 0.5, 0.0, 0.0], [SMALL_ANGLE * 20.0, 1e-9, 0.0]] {
            let m = rodrigues(&axis);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn taped_vertices_match_plain_path() {
        let model = synth_model(9, 3, 5, 3, 11).unwrap();
        let mut r = rng::stream(21);
        let shape: Vec<f64> = rng::normal_vec(&mut r, 3);
        let expr: Vec<f64> = rng::normal_vec(&mut r, 5);
        let pose: Vec<f64> = rng::normal_vec(&mut r, model.pose_dim())
            .into_iter()
            .map(|v| v * 0.4)
            .collect();
        let params =
            FaceParams::new(shape.clone(), expr.clone(), pose.clone(), vec![0.0; 3]).unwrap();
        let plain = compute_vertices(&model, &params).unwrap();

        let mut t = Tape::new();
        let e = t.leaf(Mat::row_vec(expr));
        let p = t.leaf(Mat::row_vec(pose));
        let v = vertices_on_tape(&mut t, &model, &shape, e, p);
        let taped = t.value(v);
        for i in 0..9 {
            for c in 0..3 {
                assert!((taped[(i, c)] - plain.positions[(i, c)]).abs() < 1e-10);
            }
        }
    }
}
