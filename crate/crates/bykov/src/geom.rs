//! Small fixed-size vector and angle helpers shared across the crate.

use std::f64::consts::{PI, TAU};

pub type Vec3 = [f64; 3];
pub type Vec4 = [f64; 4];

pub fn dot4(a: &Vec4, b: &Vec4) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

pub fn norm4(a: &Vec4) -> f64 {
    dot4(a, a).sqrt()
}

pub fn add4(a: &Vec4, b: &Vec4) -> Vec4 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

pub fn sub4(a: &Vec4, b: &Vec4) -> Vec4 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
}

pub fn scale4(a: &Vec4, s: f64) -> Vec4 {
    [a[0] * s, a[1] * s, a[2] * s, a[3] * s]
}

pub fn dist4(a: &Vec4, b: &Vec4) -> f64 {
    norm4(&sub4(a, b))
}

/// Rescale to unit length. Leaves the zero vector untouched.
pub fn normalize4(a: &Vec4) -> Vec4 {
    let n = norm4(a);
    if n == 0.0 {
        *a
    } else {
        scale4(a, 1.0 / n)
    }
}

pub fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn cross3(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Reduce an angle to the half-open interval (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// Reduce an angle to [0, 2*pi).
pub fn wrap_angle_positive(a: f64) -> f64 {
    a.rem_euclid(TAU)
}

/// Unwrap a sequence of angles in place so consecutive values differ by less
/// than pi, starting from the first sample.
pub fn unwrap_angles(angles: &mut [f64]) {
    for i in 1..angles.len() {
        let raw = angles[i];
        let prev = angles[i - 1];
        angles[i] = prev + wrap_angle(raw - prev);
    }
}

/// Distance from a point to a polyline (sequence of segments).
pub fn point_polyline_dist4(p: &Vec4, poly: &[Vec4]) -> f64 {
    let mut best = f64::INFINITY;
    if poly.len() == 1 {
        return dist4(p, &poly[0]);
    }
    for w in poly.windows(2) {
        let d = point_segment_dist4(p, &w[0], &w[1]);
        if d < best {
            best = d;
        }
    }
    best
}

fn point_segment_dist4(p: &Vec4, a: &Vec4, b: &Vec4) -> f64 {
    let ab = sub4(b, a);
    let ap = sub4(p, a);
    let len2 = dot4(&ab, &ab);
    if len2 == 0.0 {
        return norm4(&ap);
    }
    let t = (dot4(&ap, &ab) / len2).clamp(0.0, 1.0);
    dist4(p, &add4(a, &scale4(&ab, t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(-0.1) + 0.1).abs() < 1e-15);
        assert!((wrap_angle(TAU + 0.25) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn unwrap_monotone_spiral() {
        let mut a: Vec<f64> = (0..100).map(|i| wrap_angle(0.3 * i as f64)).collect();
        unwrap_angles(&mut a);
        for (i, v) in a.iter().enumerate() {
            assert!((v - 0.3 * i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_distance() {
        let a = [0.0, 0.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0, 0.0];
        assert!((point_segment_dist4(&[0.5, 1.0, 0.0, 0.0], &a, &b) - 1.0).abs() < 1e-15);
        assert!((point_segment_dist4(&[2.0, 0.0, 0.0, 0.0], &a, &b) - 1.0).abs() < 1e-15);
    }
}
