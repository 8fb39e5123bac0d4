//! Fixed-size vector helpers for mesh geometry.

use crate::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn add<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Scalar>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm<T: Scalar>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

/// Unit vector along `a`, or `None` when `|a|` is zero or not finite.
pub fn normalize<T: Scalar>(a: Vec3<T>) -> Option<Vec3<T>> {
    let n = norm(a);
    if n > T::zero() && n.is_finite() {
        Some(scale(a, T::one() / n))
    } else {
        None
    }
}

pub fn lerp3<T: Scalar>(v: [Vec3<T>; 3], w: [T; 3]) -> Vec3<T> {
    add(add(scale(v[0], w[0]), scale(v[1], w[1])), scale(v[2], w[2]))
}

pub fn mat_vec<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Scalar>(m: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

pub fn det<T: Scalar>(m: &Mat3<T>) -> T {
    dot(m[0], cross(m[1], m[2]))
}

pub fn identity<T: Scalar>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Any unit vector perpendicular to the unit vector `n`.
pub fn any_perpendicular<T: Scalar>(n: Vec3<T>) -> Vec3<T> {
    let (o, z) = (T::one(), T::zero());
    let axis = if n[0].abs() <= n[1].abs() && n[0].abs() <= n[2].abs() {
        [o, z, z]
    } else if n[1].abs() <= n[2].abs() {
        [z, o, z]
    } else {
        [z, z, o]
    };
    normalize(cross(n, axis)).unwrap_or([o, z, z])
}

pub fn cast3<T: Scalar, U: Scalar>(v: Vec3<T>) -> Vec3<U> {
    [U::of(v[0].f64()), U::of(v[1].f64()), U::of(v[2].f64())]
}
