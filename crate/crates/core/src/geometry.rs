//! Small fixed-size vector and rotation helpers for particle coordinates.

use rand::Rng;
use rand_distr::StandardNormal;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, c: f64) -> Vec3 {
    [a[0] * c, a[1] * c, a[2] * c]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn gaussian_vec3<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ]
}

/// Uniformly random direction scaled to `length`.
pub fn random_direction<R: Rng + ?Sized>(rng: &mut R, length: f64) -> Vec3 {
    loop {
        let v = gaussian_vec3(rng);
        let n = norm(v);
        if n > 1e-12 {
            return scale(v, length / n);
        }
    }
}

/// Random orthogonal matrix: Gram-Schmidt (QR) of a Gaussian matrix, then
/// the sign of one row is chosen so that `det` is `+1` or `-1` as requested.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, reflection: bool) -> Mat3 {
    loop {
        let a = gaussian_vec3(rng);
        let b = gaussian_vec3(rng);
        let n0 = norm(a);
        if n0 < 1e-8 {
            continue;
        }
        let e0 = scale(a, 1.0 / n0);
        let b = sub(b, scale(e0, dot(e0, b)));
        let n1 = norm(b);
        if n1 < 1e-8 {
            continue;
        }
        let e1 = scale(b, 1.0 / n1);
        let e2 = cross(e0, e1);
        let mut q = [e0, e1, e2];
        let want = if reflection { -1.0 } else { 1.0 };
        if det(&q) * want < 0.0 {
            q[2] = scale(q[2], -1.0);
        }
        return q;
    }
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Frobenius norm of the difference of two point sets.
pub fn distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = sub(*x, *y);
            dot(d, d)
        })
        .sum::<f64>()
        .sqrt()
}

pub fn frobenius(a: &[Vec3]) -> f64 {
    a.iter().map(|x| dot(*x, *x)).sum::<f64>().sqrt()
}

pub fn flatten(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| p.iter().copied()).collect()
}

pub fn unflatten(values: &[f64]) -> Vec<Vec3> {
    values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_orthogonal_is_orthonormal_with_requested_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for reflection in [false, true] {
            for _ in 0..50 {
                let q = random_orthogonal(&mut rng, reflection);
                for i in 0..3 {
                    for j in 0..3 {
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!((dot(q[i], q[j]) - want).abs() < 1e-12);
                    }
                }
                let d = det(&q);
                assert!((d - if reflection { -1.0 } else { 1.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn direction_has_requested_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!((norm(random_direction(&mut rng, 0.5)) - 0.5).abs() < 1e-15);
        }
    }
}
