//! Rotation representations: Euler channel triples (as stored in motion
//! capture files), 3x3 matrices, and the exponential map (axis times angle).
//!
//! The exponential map output is always on the principal branch (norm <= pi),
//! with a Taylor fallback near the identity so the representation stays
//! smooth where the axis is undefined.

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_apply(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Single-axis rotation matrix, angle in radians.
pub fn axis_rotation(axis: Axis, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    match axis {
        Axis::X => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        Axis::Y => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        Axis::Z => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

/// Compose Euler angles (radians) in channel order: R = R(order[0]) R(order[1]) R(order[2]).
pub fn euler_to_matrix(angles: &Vec3, order: &[Axis; 3]) -> Mat3 {
    let a = axis_rotation(order[0], angles[0]);
    let b = axis_rotation(order[1], angles[1]);
    let c = axis_rotation(order[2], angles[2]);
    mat3_mul(&mat3_mul(&a, &b), &c)
}

fn clamp1(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Extract Euler angles (radians) such that [`euler_to_matrix`] reproduces `m`.
/// Requires three distinct axes. Near gimbal lock the third angle is set to 0.
pub fn matrix_to_euler(m: &Mat3, order: &[Axis; 3]) -> Vec3 {
    let a = order[0].index();
    let b = order[1].index();
    let c = order[2].index();
    assert!(a != b && b != c && a != c, "rotation order must use distinct axes");
    // cyclic orders: XYZ, YZX, ZXY
    let cyclic = (b + 3 - a) % 3 == 1;
    let eps = 1e-9;
    if cyclic {
        let s2 = clamp1(m[a][c]);
        if s2.abs() > 1.0 - eps {
            let t1 = f64::atan2(m[b][a], m[b][b]);
            if s2 > 0.0 {
                [t1, std::f64::consts::FRAC_PI_2, 0.0]
            } else {
                [-t1, -std::f64::consts::FRAC_PI_2, 0.0]
            }
        } else {
            [
                f64::atan2(-m[b][c], m[c][c]),
                s2.asin(),
                f64::atan2(-m[a][b], m[a][a]),
            ]
        }
    } else {
        let s2 = clamp1(-m[a][c]);
        if s2.abs() > 1.0 - eps {
            if s2 > 0.0 {
                [-f64::atan2(m[c][b], m[c][a]), std::f64::consts::FRAC_PI_2, 0.0]
            } else {
                [
                    f64::atan2(-m[c][b], -m[c][a]),
                    -std::f64::consts::FRAC_PI_2,
                    0.0,
                ]
            }
        } else {
            [
                f64::atan2(m[b][c], m[c][c]),
                s2.asin(),
                f64::atan2(m[a][b], m[a][a]),
            ]
        }
    }
}

/// Rodrigues' formula. Below ||v|| = 1e-8 the sin/cos coefficients switch to
/// their 2nd-order Taylor expansions.
pub fn expmap_to_matrix(v: &Vec3) -> Mat3 {
    let theta2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-8 {
        // sin(t)/t and (1-cos(t))/t^2
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let (x, y, z) = (v[0], v[1], v[2]);
    // I + a K + b K^2, K the cross-product matrix of v
    [
        [
            1.0 + b * (-z * z - y * y),
            -a * z + b * x * y,
            a * y + b * x * z,
        ],
        [
            a * z + b * x * y,
            1.0 + b * (-z * z - x * x),
            -a * x + b * y * z,
        ],
        [
            -a * y + b * x * z,
            a * x + b * y * z,
            1.0 + b * (-y * y - x * x),
        ],
    ]
}

/// Matrix logarithm onto the principal branch, ||v|| <= pi.
pub fn matrix_to_expmap(m: &Mat3) -> Vec3 {
    let skew = [
        (m[2][1] - m[1][2]) / 2.0,
        (m[0][2] - m[2][0]) / 2.0,
        (m[1][0] - m[0][1]) / 2.0,
    ];
    let s = (skew[0] * skew[0] + skew[1] * skew[1] + skew[2] * skew[2]).sqrt();
    let c = clamp1((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0);
    let theta = f64::atan2(s, c);
    if theta < 1e-6 {
        // skew ~= theta * axis already
        let k = 1.0 + theta * theta / 6.0;
        return [skew[0] * k, skew[1] * k, skew[2] * k];
    }
    if theta > std::f64::consts::PI - 1e-4 {
        // Near a half turn sin(theta) is ill-conditioned; recover the axis
        // from the symmetric part, (R + R^T)/2 - cos(theta) I = (1 - cos) u u^T.
        let denom = 1.0 - c;
        let uu = [
            ((m[0][0] - c) / denom).max(0.0),
            ((m[1][1] - c) / denom).max(0.0),
            ((m[2][2] - c) / denom).max(0.0),
        ];
        let i = if uu[0] >= uu[1] && uu[0] >= uu[2] {
            0
        } else if uu[1] >= uu[2] {
            1
        } else {
            2
        };
        let mut u = [0.0; 3];
        u[i] = uu[i].sqrt();
        for j in 0..3 {
            if j != i {
                u[j] = (m[i][j] + m[j][i]) / (2.0 * denom * u[i]);
            }
        }
        let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        for x in &mut u {
            *x /= norm;
        }
        // orient with the skew part where it still carries sign information
        let dot = u[0] * skew[0] + u[1] * skew[1] + u[2] * skew[2];
        let sign = if dot < 0.0 {
            -1.0
        } else if dot > 0.0 {
            1.0
        } else {
            // exactly pi: both branches are equivalent, pick a fixed one
            let first = u.iter().find(|x| x.abs() > 1e-12).copied().unwrap_or(1.0);
            first.signum()
        };
        return [sign * theta * u[0], sign * theta * u[1], sign * theta * u[2]];
    }
    let k = theta / s;
    [skew[0] * k, skew[1] * k, skew[2] * k]
}

/// Euler channel triple (radians, channel order) to exponential map.
pub fn euler_to_expmap(angles: &Vec3, order: &[Axis; 3]) -> Vec3 {
    matrix_to_expmap(&euler_to_matrix(angles, order))
}

pub fn expmap_norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
