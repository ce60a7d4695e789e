//! Toy articulated body model: a small vertex mesh deformed by shape
//! blendshapes, pose-dependent corrective blendshapes, and linear blend
//! skinning over a short kinematic chain.

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const NUM_VERTICES: usize = 12;
pub const NUM_JOINTS: usize = 3;
pub const NUM_SHAPE_COEFFS: usize = 2;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    /// Rest-pose template vertices, `[NUM_VERTICES]`.
    pub template: Vec<Vec3>,
    /// Shape blendshape basis, `[NUM_SHAPE_COEFFS][NUM_VERTICES]`.
    pub shape_dirs: Vec<Vec<Vec3>>,
    /// Pose-corrective basis, one displacement set per element of
    /// vec(R_j - I) over the non-root joints: `[9 * (NUM_JOINTS-1)][NUM_VERTICES]`.
    pub pose_dirs: Vec<Vec<Vec3>>,
    /// Joint regressor, `[NUM_JOINTS][NUM_VERTICES]`, rows sum to 1.
    pub joint_regressor: Vec<Vec<f64>>,
    /// Skinning weights, `[NUM_VERTICES][NUM_JOINTS]`, rows sum to 1.
    pub skin_weights: Vec<Vec<f64>>,
    /// Parent joint indices; `parents[0]` is ignored (root).
    pub parents: [usize; NUM_JOINTS],
}

impl BodyModel {
    /// Deterministic default model: a vertical chain (pelvis, knee-analog,
    /// ankle-analog) with vertices ringed around each joint.
    pub fn default_toy() -> Self {
        // Joints along -y (pelvis at origin, two below it).
        let joint_rest: [Vec3; NUM_JOINTS] = [[0.0, 0.0, 0.0], [0.0, -0.5, 0.0], [0.0, -1.0, 0.0]];
        let mut template = Vec::with_capacity(NUM_VERTICES);
        let mut skin_weights = Vec::with_capacity(NUM_VERTICES);
        // Four vertices around each joint, offset in x/z, slightly staggered
        // in y so the mesh has no degenerate symmetry.
        for (j, jp) in joint_rest.iter().enumerate() {
            let offsets = [
                [0.2, 0.05, 0.0],
                [-0.2, -0.05, 0.0],
                [0.0, 0.02, 0.2],
                [0.0, -0.02, -0.2],
            ];
            for (k, o) in offsets.iter().enumerate() {
                template.push([jp[0] + o[0], jp[1] + o[1], jp[2] + o[2]]);
                // Blend mostly to the owning joint with some bleed to the
                // parent, so skinning is a genuine mixture.
                let mut w = vec![0.0; NUM_JOINTS];
                if j == 0 {
                    w[0] = 1.0;
                } else {
                    let bleed = 0.2 + 0.05 * k as f64;
                    w[j] = 1.0 - bleed;
                    w[j - 1] = bleed;
                }
                skin_weights.push(w);
            }
        }
        // Joint regressor: average of the four ring vertices of each joint,
        // corrected so it reproduces joint_rest exactly on the template
        // (offsets average to zero by construction).
        let mut joint_regressor = vec![vec![0.0; NUM_VERTICES]; NUM_JOINTS];
        for (j, row) in joint_regressor.iter_mut().enumerate() {
            for k in 0..4 {
                row[4 * j + k] = 0.25;
            }
        }
        // Shape basis: coefficient 0 scales the ring radius (x/z spread),
        // coefficient 1 lengthens the chain (y stretch proportional to depth).
        let mut shape_dirs = vec![vec![[0.0; 3]; NUM_VERTICES]; NUM_SHAPE_COEFFS];
        for v in 0..NUM_VERTICES {
            let j = v / 4;
            shape_dirs[0][v] = [template[v][0] * 0.3, 0.0, template[v][2] * 0.3];
            shape_dirs[1][v] = [0.0, -(j as f64) * 0.1, 0.0];
        }
        // Pose-corrective basis: small deterministic pseudo-random bulges so
        // the term is exercised but does not dominate.
        let mut rng = StreamRng::new(97, "body/pose_dirs");
        let mut pose_dirs = vec![vec![[0.0; 3]; NUM_VERTICES]; 9 * (NUM_JOINTS - 1)];
        for row in &mut pose_dirs {
            for v in row.iter_mut() {
                for c in v.iter_mut() {
                    *c = 0.02 * rng.normal();
                }
            }
        }
        BodyModel {
            template,
            shape_dirs,
            pose_dirs,
            joint_regressor,
            skin_weights,
            parents: [0, 0, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.template.len() != NUM_VERTICES
            || self.shape_dirs.len() != NUM_SHAPE_COEFFS
            || self.pose_dirs.len() != 9 * (NUM_JOINTS - 1)
            || self.joint_regressor.len() != NUM_JOINTS
            || self.skin_weights.len() != NUM_VERTICES
        {
            return Err(Error::ShapeMismatch("body model table sizes".into()));
        }
        for row in &self.joint_regressor {
            if row.len() != NUM_VERTICES {
                return Err(Error::ShapeMismatch("joint regressor row".into()));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::OutOfRangeSpec(format!(
                    "joint regressor row sums to {s}, expected 1"
                )));
            }
        }
        for row in &self.skin_weights {
            if row.len() != NUM_JOINTS {
                return Err(Error::ShapeMismatch("skin weight row".into()));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|w| *w < 0.0) {
                return Err(Error::OutOfRangeSpec(format!(
                    "skin weight row sums to {s} or has negative entries"
                )));
            }
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            if *p >= j {
                return Err(Error::OutOfRangeSpec(format!(
                    "parent {p} of joint {j} must precede it"
                )));
            }
        }
        Ok(())
    }
}

/// Rodrigues' formula: axis-angle vector to rotation matrix.
pub fn rodrigues(axis_angle: &Vec3) -> Mat3 {
    let theta = (axis_angle[0] * axis_angle[0]
        + axis_angle[1] * axis_angle[1]
        + axis_angle[2] * axis_angle[2])
        .sqrt();
    if theta < 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let k = [
        axis_angle[0] / theta,
        axis_angle[1] / theta,
        axis_angle[2] / theta,
    ];
    let (s, c) = theta.sin_cos();
    let mut r = [[0.0; 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, val) in row.iter_mut().enumerate() {
            let eye = if i == j { 1.0 } else { 0.0 };
            *val = c * eye + (1.0 - c) * k[i] * k[j];
        }
    }
    // + sin(theta) * [k]_x
    r[0][1] += -s * k[2];
    r[0][2] += s * k[1];
    r[1][0] += s * k[2];
    r[1][2] += -s * k[0];
    r[2][0] += -s * k[1];
    r[2][1] += s * k[0];
    r
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, brow) in b.iter().enumerate() {
                c[i][j] += a[i][k] * brow[j];
            }
        }
    }
    c
}

fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Check that a matrix is a proper rotation (orthonormal, det +1).
pub fn rotation_deviation(r: &Mat3) -> f64 {
    let rt_r = mat_mul(&transpose(r), r);
    let mut dev = 0.0f64;
    for (i, row) in rt_r.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let eye = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((v - eye).abs());
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    dev.max((det - 1.0).abs())
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    t
}

/// Template plus shape blendshapes plus pose-corrective blendshapes; no
/// skinning applied.
pub fn shape_mesh(model: &BodyModel, shape: &[f64], pose: &[Vec3]) -> Result<Vec<Vec3>> {
    if shape.len() != NUM_SHAPE_COEFFS {
        return Err(Error::ShapeMismatch(format!(
            "expected {NUM_SHAPE_COEFFS} shape coefficients, got {}",
            shape.len()
        )));
    }
    if pose.len() != NUM_JOINTS {
        return Err(Error::ShapeMismatch(format!(
            "expected {NUM_JOINTS} joint rotations, got {}",
            pose.len()
        )));
    }
    let mut verts = model.template.clone();
    for (k, coeff) in shape.iter().enumerate() {
        for (v, d) in verts.iter_mut().zip(&model.shape_dirs[k]) {
            for c in 0..3 {
                v[c] += coeff * d[c];
            }
        }
    }
    // Pose feature: vec(R_j - I) for non-root joints, row-major.
    for (j, aa) in pose.iter().enumerate().skip(1) {
        let r = rodrigues(aa);
        for (row, rrow) in r.iter().enumerate() {
            for (col, rv) in rrow.iter().enumerate() {
                let eye = if row == col { 1.0 } else { 0.0 };
                let feat = rv - eye;
                let basis = &model.pose_dirs[9 * (j - 1) + 3 * row + col];
                for (v, d) in verts.iter_mut().zip(basis) {
                    for c in 0..3 {
                        v[c] += feat * d[c];
                    }
                }
            }
        }
    }
    Ok(verts)
}

/// Joint locations regressed from a (shaped) mesh.
pub fn regress_joints(model: &BodyModel, verts: &[Vec3]) -> Vec<Vec3> {
    model
        .joint_regressor
        .iter()
        .map(|row| {
            let mut j = [0.0; 3];
            for (w, v) in row.iter().zip(verts) {
                for c in 0..3 {
                    j[c] += w * v[c];
                }
            }
            j
        })
        .collect()
}

/// Full forward model: blendshapes, kinematic chain, linear blend skinning.
/// Returns (posed vertices, posed joint locations).
pub fn lbs(
    model: &BodyModel,
    shape: &[f64],
    pose: &[Vec3],
    translation: &Vec3,
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    model.validate()?;
    // Joints are regressed from the shape-only mesh (pose correctives do not
    // move the skeleton).
    let mut shaped_no_pose = model.template.clone();
    for (k, coeff) in shape.iter().take(NUM_SHAPE_COEFFS).enumerate() {
        for (v, d) in shaped_no_pose.iter_mut().zip(&model.shape_dirs[k]) {
            for c in 0..3 {
                v[c] += coeff * d[c];
            }
        }
    }
    if shape.len() != NUM_SHAPE_COEFFS {
        return Err(Error::ShapeMismatch(format!(
            "expected {NUM_SHAPE_COEFFS} shape coefficients, got {}",
            shape.len()
        )));
    }
    let verts = shape_mesh(model, shape, pose)?;
    let joints_rest = regress_joints(model, &shaped_no_pose);

    // World transforms down the chain. The posed joint is kept in delta form
    // g_j = t_j + d_j so that an identity pose yields d_j = 0 exactly and the
    // skinned mesh reproduces the shaped mesh without floating-point drift.
    let mut rot_world: Vec<Mat3> = Vec::with_capacity(NUM_JOINTS);
    let mut joint_delta: Vec<Vec3> = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let r_local = rodrigues(&pose[j]);
        let dev = rotation_deviation(&r_local);
        if dev > 1e-6 {
            return Err(Error::NonOrthonormalRotation { deviation: dev });
        }
        if j == 0 {
            rot_world.push(r_local);
            joint_delta.push([0.0; 3]);
        } else {
            let p = model.parents[j];
            let r = mat_mul(&rot_world[p], &r_local);
            let offset = [
                joints_rest[j][0] - joints_rest[p][0],
                joints_rest[j][1] - joints_rest[p][1],
                joints_rest[j][2] - joints_rest[p][2],
            ];
            let rotated = mat_vec(&rot_world[p], &offset);
            joint_delta.push([
                joint_delta[p][0] + (rotated[0] - offset[0]),
                joint_delta[p][1] + (rotated[1] - offset[1]),
                joint_delta[p][2] + (rotated[2] - offset[2]),
            ]);
            rot_world.push(r);
        }
    }
    let joint_world: Vec<Vec3> = joints_rest
        .iter()
        .zip(&joint_delta)
        .map(|(t, d)| [t[0] + d[0], t[1] + d[1], t[2] + d[2]])
        .collect();

    // Skinning in delta form: x' = x + sum_j w_j ((R_j - I)(x - t_j) + d_j)
    // + translation, algebraically equal to sum_j w_j (R_j (x - t_j) + g_j)
    // because the weights sum to one.
    let mut out = Vec::with_capacity(verts.len());
    for (v, w) in verts.iter().zip(&model.skin_weights) {
        let mut acc = [0.0; 3];
        for j in 0..NUM_JOINTS {
            if w[j] == 0.0 {
                continue;
            }
            let local = [
                v[0] - joints_rest[j][0],
                v[1] - joints_rest[j][1],
                v[2] - joints_rest[j][2],
            ];
            let rotated = mat_vec(&rot_world[j], &local);
            for c in 0..3 {
                acc[c] += w[j] * ((rotated[c] - local[c]) + joint_delta[j][c]);
            }
        }
        out.push([
            v[0] + acc[0] + translation[0],
            v[1] + acc[1] + translation[1],
            v[2] + acc[2] + translation[2],
        ]);
    }
    let joints_out = joint_world
        .iter()
        .map(|j| {
            [
                j[0] + translation[0],
                j[1] + translation[1],
                j[2] + translation[2],
            ]
        })
        .collect();
    Ok((out, joints_out))
}

/// Draw a random pose/shape/translation triple for experiments.
pub fn sample_body_params(rng: &mut StreamRng, max_angle: f64) -> (Vec<f64>, Vec<Vec3>, Vec3) {
    let shape = (0..NUM_SHAPE_COEFFS).map(|_| rng.normal()).collect();
    let pose = (0..NUM_JOINTS)
        .map(|_| {
            [
                rng.uniform(-max_angle, max_angle),
                rng.uniform(-max_angle, max_angle),
                rng.uniform(-max_angle, max_angle),
            ]
        })
        .collect();
    let t = [
        0.1 * rng.normal(),
        0.1 * rng.normal(),
        0.1 * rng.normal(),
    ];
    (shape, pose, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Rotation3, Vector3, Vector4};

    fn close3(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn default_model_valid() {
        BodyModel::default_toy().validate().unwrap();
    }

    #[test]
    fn rodrigues_matches_nalgebra() {
        let cases = [
            [0.3, -0.2, 0.9],
            [1e-14, 0.0, 0.0],
            [0.0, std::f64::consts::PI / 2.0, 0.0],
            [-2.1, 0.4, 0.7],
        ];
        for aa in cases {
            let r = rodrigues(&aa);
            let n = Rotation3::new(Vector3::new(aa[0], aa[1], aa[2]));
            for i in 0..3 {
                for j in 0..3 {
                    assert!(
                        (r[i][j] - n.matrix()[(i, j)]).abs() < 1e-12,
                        "mismatch at ({i},{j}) for {aa:?}"
                    );
                }
            }
            assert!(rotation_deviation(&r) < 1e-12);
        }
    }

    #[test]
    fn identity_pose_reproduces_shaped_mesh() {
        let model = BodyModel::default_toy();
        let shape = vec![0.7, -0.3];
        let pose = vec![[0.0; 3]; NUM_JOINTS];
        let (posed, joints) = lbs(&model, &shape, &pose, &[0.0; 3]).unwrap();
        let shaped = shape_mesh(&model, &shape, &pose).unwrap();
        for (a, b) in posed.iter().zip(&shaped) {
            assert!(close3(a, b, 1e-12));
        }
        let rest_joints = regress_joints(&model, &shaped);
        for (a, b) in joints.iter().zip(&rest_joints) {
            assert!(close3(a, b, 1e-12));
        }
    }

    #[test]
    fn global_rotation_acts_rigidly() {
        // Rotating only the root is a rigid motion of the whole body.
        let model = BodyModel::default_toy();
        let shape = vec![0.2, 0.5];
        let aa = [0.4, 0.3, -0.5];
        let mut pose = vec![[0.0; 3]; NUM_JOINTS];
        pose[0] = aa;
        let (posed, _) = lbs(&model, &shape, &pose, &[0.0; 3]).unwrap();
        let rest_pose = vec![[0.0; 3]; NUM_JOINTS];
        let (rest, _) = lbs(&model, &shape, &rest_pose, &[0.0; 3]).unwrap();
        let r = rodrigues(&aa);
        // Root joint is the rotation center.
        let shaped = shape_mesh(&model, &shape, &rest_pose).unwrap();
        let root = regress_joints(&model, &shaped)[0];
        for (p, q) in posed.iter().zip(&rest) {
            let local = [q[0] - root[0], q[1] - root[1], q[2] - root[2]];
            let rot = mat_vec(&r, &local);
            let expect = [rot[0] + root[0], rot[1] + root[1], rot[2] + root[2]];
            assert!(close3(p, &expect, 1e-10), "{p:?} vs {expect:?}");
        }
    }

    #[test]
    fn translation_is_additive() {
        let model = BodyModel::default_toy();
        let mut rng = StreamRng::new(11, "body/test");
        let (shape, pose, _) = sample_body_params(&mut rng, 0.8);
        let t = [0.3, -1.2, 0.05];
        let (a, ja) = lbs(&model, &shape, &pose, &[0.0; 3]).unwrap();
        let (b, jb) = lbs(&model, &shape, &pose, &t).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(close3(&[x[0] + t[0], x[1] + t[1], x[2] + t[2]], y, 1e-12));
        }
        for (x, y) in ja.iter().zip(&jb) {
            assert!(close3(&[x[0] + t[0], x[1] + t[1], x[2] + t[2]], y, 1e-12));
        }
    }

    /// Independent skinning oracle built on nalgebra homogeneous matrices:
    /// world transforms composed as 4x4 products, skinning as a weighted sum
    /// of matrices applied to homogeneous rest vertices.
    fn lbs_oracle(
        model: &BodyModel,
        shape: &[f64],
        pose: &[Vec3],
        translation: &Vec3,
    ) -> Vec<Vec3> {
        // Shaped mesh with pose correctives (same blendshape math, different
        // skinning machinery).
        let verts = shape_mesh(model, shape, pose).unwrap();
        let mut shaped = model.template.clone();
        for (k, c) in shape.iter().enumerate() {
            for (v, d) in shaped.iter_mut().zip(&model.shape_dirs[k]) {
                for i in 0..3 {
                    v[i] += c * d[i];
                }
            }
        }
        let joints = regress_joints(model, &shaped);

        let mut world: Vec<Matrix4<f64>> = Vec::new();
        for j in 0..NUM_JOINTS {
            let r = Rotation3::new(Vector3::new(pose[j][0], pose[j][1], pose[j][2]));
            let local_t = if j == 0 {
                Vector3::new(joints[0][0], joints[0][1], joints[0][2])
            } else {
                let p = model.parents[j];
                Vector3::new(
                    joints[j][0] - joints[p][0],
                    joints[j][1] - joints[p][1],
                    joints[j][2] - joints[p][2],
                )
            };
            let mut local = Matrix4::identity();
            local.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
            local.fixed_view_mut::<3, 1>(0, 3).copy_from(&local_t);
            let w = if j == 0 {
                local
            } else {
                world[model.parents[j]] * local
            };
            world.push(w);
        }
        // Remove the rest-pose joint location: A_j = W_j * T(-t_j).
        let rel: Vec<Matrix4<f64>> = world
            .iter()
            .zip(&joints)
            .map(|(w, t)| {
                let mut tm = Matrix4::identity();
                tm.fixed_view_mut::<3, 1>(0, 3)
                    .copy_from(&Vector3::new(-t[0], -t[1], -t[2]));
                w * tm
            })
            .collect();
        verts
            .iter()
            .zip(&model.skin_weights)
            .map(|(v, w)| {
                let mut m = Matrix4::zeros();
                for (j, wj) in w.iter().enumerate() {
                    m += *wj * rel[j];
                }
                let h = m * Vector4::new(v[0], v[1], v[2], 1.0);
                [
                    h[0] + translation[0],
                    h[1] + translation[1],
                    h[2] + translation[2],
                ]
            })
            .collect()
    }

    #[test]
    fn lbs_matches_homogeneous_matrix_oracle() {
        let model = BodyModel::default_toy();
        for seed in 0..20u64 {
            let mut rng = StreamRng::new(seed, "body/oracle");
            let (shape, pose, t) = sample_body_params(&mut rng, 1.2);
            let (posed, _) = lbs(&model, &shape, &pose, &t).unwrap();
            let oracle = lbs_oracle(&model, &shape, &pose, &t);
            for (a, b) in posed.iter().zip(&oracle) {
                assert!(close3(a, b, 1e-10), "seed {seed}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn shape_changes_mesh_scale() {
        let model = BodyModel::default_toy();
        let pose = vec![[0.0; 3]; NUM_JOINTS];
        let slim = shape_mesh(&model, &[-1.0, 0.0], &pose).unwrap();
        let wide = shape_mesh(&model, &[1.0, 0.0], &pose).unwrap();
        let spread = |m: &[Vec3]| m.iter().map(|v| v[0].abs() + v[2].abs()).sum::<f64>();
        assert!(spread(&wide) > spread(&slim));
    }

    #[test]
    fn bad_inputs_rejected() {
        let model = BodyModel::default_toy();
        let pose = vec![[0.0; 3]; NUM_JOINTS];
        assert!(matches!(
            lbs(&model, &[0.0; 3], &pose, &[0.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            shape_mesh(&model, &[0.0; 2], &pose[..2]),
            Err(Error::ShapeMismatch(_))
        ));
        let mut bad = model.clone();
        bad.skin_weights[0][0] = 0.5;
        assert!(bad.validate().is_err());
    }
}
