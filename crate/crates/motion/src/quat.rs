use serde::{Deserialize, Serialize};

/// Unit quaternion, stored (w, x, y, z). Serialized as a 4-array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new_normalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = UnitQuat { w, x, y, z };
        q.normalized()
    }

    /// Rotation about the vertical (+Y) axis.
    pub fn from_yaw(yaw: f64) -> Self {
        UnitQuat {
            w: (yaw / 2.0).cos(),
            x: 0.0,
            y: (yaw / 2.0).sin(),
            z: 0.0,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        UnitQuat {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    pub fn conjugate(&self) -> Self {
        UnitQuat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn mul(&self, o: &UnitQuat) -> UnitQuat {
        UnitQuat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        mat3_mul_vec(&self.to_mat3(), v)
    }

    /// Row-major 3x3 rotation matrix.
    pub fn to_mat3(&self) -> [f64; 9] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ]
    }

    /// Shepperd's method, branch on the largest diagonal term.
    pub fn from_mat3(m: &[f64; 9]) -> Self {
        let trace = m[0] + m[4] + m[8];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            UnitQuat {
                w: 0.25 * s,
                x: (m[7] - m[5]) / s,
                y: (m[2] - m[6]) / s,
                z: (m[3] - m[1]) / s,
            }
        } else if m[0] > m[4] && m[0] > m[8] {
            let s = (1.0 + m[0] - m[4] - m[8]).sqrt() * 2.0;
            UnitQuat {
                w: (m[7] - m[5]) / s,
                x: 0.25 * s,
                y: (m[1] + m[3]) / s,
                z: (m[2] + m[6]) / s,
            }
        } else if m[4] > m[8] {
            let s = (1.0 + m[4] - m[0] - m[8]).sqrt() * 2.0;
            UnitQuat {
                w: (m[2] - m[6]) / s,
                x: (m[1] + m[3]) / s,
                y: 0.25 * s,
                z: (m[5] + m[7]) / s,
            }
        } else {
            let s = (1.0 + m[8] - m[0] - m[4]).sqrt() * 2.0;
            UnitQuat {
                w: (m[3] - m[1]) / s,
                x: (m[2] + m[6]) / s,
                y: (m[5] + m[7]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized()
    }

    /// Continuous 6-vector form: the first two columns of the rotation
    /// matrix.
    pub fn to_rot6(&self) -> [f64; 6] {
        mat3_to_rot6(&self.to_mat3())
    }
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub fn mat3_mul_vec(m: &[f64; 9], v: [f64; 3]) -> [f64; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

pub fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
    c
}

pub fn mat3_transpose(m: &[f64; 9]) -> [f64; 9] {
    [m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]]
}

pub fn mat3_to_rot6(m: &[f64; 9]) -> [f64; 6] {
    [m[0], m[3], m[6], m[1], m[4], m[7]]
}

/// Gram-Schmidt recovery of a rotation matrix from the 6-vector form.
/// Degenerate inputs fall back to safe axes so FK stays defined.
pub fn rot6_to_mat3(r: &[f64; 6]) -> [f64; 9] {
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = norm3(a1);
    let b1 = if n1 > 1e-12 {
        [a1[0] / n1, a1[1] / n1, a1[2] / n1]
    } else {
        [1.0, 0.0, 0.0]
    };
    let d = dot(b1, a2);
    let v2 = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = norm3(v2);
    let b2 = if n2 > 1e-12 {
        [v2[0] / n2, v2[1] / n2, v2[2] / n2]
    } else {
        // Any direction orthogonal to b1.
        let alt = if b1[0].abs() < 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let v = cross(b1, alt);
        let n = norm3(v);
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let b3 = cross(b1, b2);
    [
        b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2],
    ]
}

/// Axis-angle rotation matrix (axis need not be unit; normalized inside).
pub fn axis_angle_mat3(axis: [f64; 3], angle: f64) -> [f64; 9] {
    let n = norm3(axis);
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        t * x * x + c,
        t * x * y - s * z,
        t * x * z + s * y,
        t * x * y + s * z,
        t * y * y + c,
        t * y * z - s * x,
        t * x * z - s * y,
        t * y * z + s * x,
        t * z * z + c,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yaw_quat_rotates_forward_vector() {
        let q = UnitQuat::from_yaw(std::f64::consts::FRAC_PI_2);
        let f = q.rotate([0.0, 0.0, 1.0]);
        assert!((f[0] - 1.0).abs() < 1e-12 && f[2].abs() < 1e-12);
    }

    #[test]
    fn rot6_round_trip() {
        let q = UnitQuat::new_normalized(0.4, -0.3, 0.7, 0.1);
        let m = q.to_mat3();
        let m2 = rot6_to_mat3(&mat3_to_rot6(&m));
        for i in 0..9 {
            assert!((m[i] - m2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mat3_quat_round_trip() {
        let q = UnitQuat::new_normalized(-0.2, 0.9, 0.1, -0.5);
        let q2 = UnitQuat::from_mat3(&q.to_mat3());
        // q and -q are the same rotation
        let sign = if q.w * q2.w + q.x * q2.x + q.y * q2.y + q.z * q2.z < 0.0 {
            -1.0
        } else {
            1.0
        };
        assert!((q.w - sign * q2.w).abs() < 1e-12);
        assert!((q.x - sign * q2.x).abs() < 1e-12);
    }
}
