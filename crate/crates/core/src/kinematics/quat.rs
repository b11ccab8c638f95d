//! Unit quaternions in (x, y, z, w) order.
//!
//! Axis convention: right-handed, +Y up, −Z forward. Yaw is rotation about
//! +Y, pitch about +X (positive looks up), roll about +Z, composed as
//! `yaw * pitch * roll`.

use std::ops::{Mul, Neg};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are rejected by [`Quat::normalize`].
pub const MIN_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        w: 1.0,
    };

    pub const fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        Self { x, y, z, w }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.z, self.w]
    }

    /// Rotation of `angle` radians about a unit `axis`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let (s, c) = (angle * 0.5).sin_cos();
        Self::new(axis[0] * s, axis[1] * s, axis[2] * s, c)
    }

    pub fn from_yaw(yaw: f64) -> Self {
        Self::from_axis_angle([0.0, 1.0, 0.0], yaw)
    }

    pub fn from_pitch(pitch: f64) -> Self {
        Self::from_axis_angle([1.0, 0.0, 0.0], pitch)
    }

    pub fn from_roll(roll: f64) -> Self {
        Self::from_axis_angle([0.0, 0.0, 1.0], roll)
    }

    pub fn from_yaw_pitch_roll(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self::from_yaw(yaw) * Self::from_pitch(pitch) * Self::from_roll(roll)
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z + self.w * o.w
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.w.is_finite()
    }

    pub fn normalize(self) -> Result<Quat> {
        let n = self.norm();
        if !n.is_finite() || n < MIN_NORM {
            return Err(Error::DegenerateQuaternion(n));
        }
        Ok(self.scale(1.0 / n))
    }

    pub fn scale(self, s: f64) -> Quat {
        Quat::new(self.x * s, self.y * s, self.z * s, self.w * s)
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(-self.x, -self.y, -self.z, self.w)
    }

    /// Inverse of a unit quaternion (the conjugate, rescaled for
    /// slightly non-unit input).
    pub fn inverse(self) -> Quat {
        self.conjugate().scale(1.0 / self.dot(self))
    }

    pub fn multiply(self, b: Quat) -> Quat {
        let a = self;
        Quat::new(
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        )
    }

    pub fn rotate_vec(self, v: [f64; 3]) -> [f64; 3] {
        // v' = v + 2w(u×v) + 2u×(u×v)
        let u = [self.x, self.y, self.z];
        let c = cross(u, v);
        let cc = cross(u, c);
        [
            v[0] + 2.0 * (self.w * c[0] + cc[0]),
            v[1] + 2.0 * (self.w * c[1] + cc[1]),
            v[2] + 2.0 * (self.w * c[2] + cc[2]),
        ]
    }

    /// Spherical interpolation. Takes the short arc: when the operands lie
    /// in opposite hemispheres `b` is negated first.
    pub fn slerp(self, b: Quat, t: f64) -> Quat {
        if t <= 0.0 {
            return self;
        }
        let mut b = b;
        let mut d = self.dot(b);
        if d < 0.0 {
            b = -b;
            d = -d;
        }
        if t >= 1.0 {
            return b;
        }
        if d > 0.9995 {
            let q = Quat::new(
                self.x + t * (b.x - self.x),
                self.y + t * (b.y - self.y),
                self.z + t * (b.z - self.z),
                self.w + t * (b.w - self.w),
            );
            return q.scale(1.0 / q.norm());
        }
        let theta = d.min(1.0).acos();
        let s = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / s;
        let wb = (t * theta).sin() / s;
        Quat::new(
            wa * self.x + wb * b.x,
            wa * self.y + wb * b.y,
            wa * self.z + wb * b.z,
            wa * self.w + wb * b.w,
        )
    }

    /// Direction the rotated −Z axis points at.
    pub fn forward(self) -> [f64; 3] {
        self.rotate_vec([0.0, 0.0, -1.0])
    }

    /// Heading angle about +Y, in radians. Zero faces −Z; positive turns
    /// toward −X.
    pub fn yaw_of(self) -> f64 {
        let f = self.forward();
        (-f[0]).atan2(-f[2])
    }

    /// Elevation of the forward axis, in radians. Positive looks up.
    pub fn pitch_of(self) -> f64 {
        self.forward()[1].clamp(-1.0, 1.0).asin()
    }

    /// Sign flip that puts the quaternion in the `w ≥ 0` hemisphere
    /// (first non-zero component positive when `w == 0`).
    pub fn canonical(self) -> Quat {
        let lead = [self.w, self.x, self.y, self.z]
            .into_iter()
            .find(|c| *c != 0.0)
            .unwrap_or(0.0);
        if lead < 0.0 {
            -self
        } else {
            self
        }
    }
}

impl Mul for Quat {
    type Output = Quat;

    fn mul(self, rhs: Quat) -> Quat {
        self.multiply(rhs)
    }
}

/// Same rotation, opposite sign.
impl Neg for Quat {
    type Output = Quat;

    fn neg(self) -> Quat {
        self.scale(-1.0)
    }
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + t * (b[0] - a[0]),
        a[1] + t * (b[1] - a[1]),
        a[2] + t * (b[2] - a[2]),
    ]
}
