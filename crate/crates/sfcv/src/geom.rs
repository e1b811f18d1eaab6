//! Small 3-vector helpers shared by the geometry modules.

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

/// Rotation matrix (row-major) of the minimal rotation taking unit vector
/// `from` onto unit vector `to`, i.e. a rotation about their cross product.
pub fn rotation_between(from: Vec3, to: Vec3) -> [[f64; 3]; 3] {
    let v = cross(from, to);
    let c = dot(from, to);
    let s2 = dot(v, v);
    if s2 < 1e-30 {
        if c > 0.0 {
            return identity3();
        }
        // Antipodal normals: rotate by pi about any axis orthogonal to `from`.
        let axis = normalize(any_orthogonal(from));
        return rotation_axis_angle(axis, std::f64::consts::PI);
    }
    // Rodrigues with the trig terms expressed via c and |v|^2.
    let k = (1.0 - c) / s2;
    let mut m = [[0.0; 3]; 3];
    let vx = [
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ];
    for i in 0..3 {
        for j in 0..3 {
            let mut vx2 = 0.0;
            for l in 0..3 {
                vx2 += vx[i][l] * vx[l][j];
            }
            m[i][j] = if i == j { 1.0 } else { 0.0 } + vx[i][j] + k * vx2;
        }
    }
    m
}

pub fn rotation_axis_angle(axis: Vec3, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn any_orthogonal(v: Vec3) -> Vec3 {
    if v[0].abs() <= v[1].abs() && v[0].abs() <= v[2].abs() {
        cross(v, [1.0, 0.0, 0.0])
    } else if v[1].abs() <= v[2].abs() {
        cross(v, [0.0, 1.0, 0.0])
    } else {
        cross(v, [0.0, 0.0, 1.0])
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_between_maps_from_to_to() {
        let a = normalize([0.3, -0.7, 0.2]);
        let b = normalize([-0.1, 0.5, 0.9]);
        let r = rotation_between(a, b);
        let got = mat_vec(&r, a);
        for i in 0..3 {
            assert!((got[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let a = 0.37 * k as f64;
            let w = wrap_angle(a);
            assert!(w > -std::f64::consts::PI - 1e-15 && w <= std::f64::consts::PI + 1e-15);
            assert!(((a - w) / (2.0 * std::f64::consts::PI)).round() * 2.0 * std::f64::consts::PI - (a - w) < 1e-9);
        }
    }
}
