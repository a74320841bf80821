//! Trilinear interpolation in voxel coordinates with border clamping.
//!
//! Sampling at an integer coordinate returns the stored value bit-exactly.

use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Axis<T> {
    pub i0: usize,
    pub i1: usize,
    pub f: T,
    /// Coordinate was outside `[0, n-1]`; the derivative along it is zero.
    pub clamped: bool,
}

#[inline]
pub(crate) fn axis<T: Real>(c: T, n: usize) -> Axis<T> {
    if n == 1 {
        return Axis {
            i0: 0,
            i1: 0,
            f: T::zero(),
            clamped: true,
        };
    }
    let hi = T::from_usize(n - 1).unwrap();
    let (cc, clamped) = if c < T::zero() {
        (T::zero(), true)
    } else if c > hi {
        (hi, true)
    } else if c.is_nan() {
        (T::zero(), true)
    } else {
        (c, false)
    };
    let i0 = cc.floor().to_usize().unwrap_or(0).min(n - 1);
    Axis {
        i0,
        i1: (i0 + 1).min(n - 1),
        f: cc - T::from_usize(i0).unwrap(),
        clamped,
    }
}

#[inline]
fn corners<T: Real>(dims: [usize; 3], p: [T; 3]) -> [Axis<T>; 3] {
    [axis(p[0], dims[0]), axis(p[1], dims[1]), axis(p[2], dims[2])]
}

#[inline]
fn at(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (z * dims[1] + y) * dims[0] + x
}

#[inline]
fn lerp<T: Real>(a: T, b: T, f: T) -> T {
    a + f * (b - a)
}

/// The four x-lines around `p`, indexed `[z][y]`, as (start, end) values.
#[inline]
fn lines<T: Copy, U>(data: &[T], dims: [usize; 3], ax: &Axis<U>, ay: &Axis<U>, az: &Axis<U>) -> [[(T, T); 2]; 2] {
    let ys = [ay.i0, ay.i1];
    let zs = [az.i0, az.i1];
    std::array::from_fn(|c| {
        std::array::from_fn(|b| (data[at(dims, ax.i0, ys[b], zs[c])], data[at(dims, ax.i1, ys[b], zs[c])]))
    })
}

/// Samples `data` (one channel, x fastest) at voxel coordinate `p` by
/// nested linear interpolation along x, then y, then z. Integer positions
/// and constant neighbourhoods are reproduced exactly.
#[inline]
pub fn trilinear<T: Real>(data: &[T], dims: [usize; 3], p: [T; 3]) -> T {
    let [ax, ay, az] = corners(dims, p);
    let l = lines(data, dims, &ax, &ay, &az);
    let row = |c: usize| lerp(lerp(l[c][0].0, l[c][0].1, ax.f), lerp(l[c][1].0, l[c][1].1, ax.f), ay.f);
    lerp(row(0), row(1), az.f)
}

/// f64 sample of single-precision data, for point queries.
pub fn trilinear_f64(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let [ax, ay, az] = corners(dims, p);
    let l = lines(data, dims, &ax, &ay, &az);
    let x = |c: usize, b: usize| lerp(l[c][b].0 as f64, l[c][b].1 as f64, ax.f);
    let row = |c: usize| lerp(x(c, 0), x(c, 1), ay.f);
    lerp(row(0), row(1), az.f)
}

/// Value and spatial derivative (per voxel unit) at `p`. The derivative is
/// zero along axes where `p` was clamped to the grid.
#[inline]
pub fn trilinear_grad<T: Real>(data: &[T], dims: [usize; 3], p: [T; 3]) -> (T, [T; 3]) {
    let [ax, ay, az] = corners(dims, p);
    let l = lines(data, dims, &ax, &ay, &az);
    let xv: [[T; 2]; 2] = std::array::from_fn(|c| std::array::from_fn(|b| lerp(l[c][b].0, l[c][b].1, ax.f)));
    let xd: [[T; 2]; 2] = std::array::from_fn(|c| std::array::from_fn(|b| l[c][b].1 - l[c][b].0));
    let row = |c: usize| lerp(xv[c][0], xv[c][1], ay.f);
    let v = lerp(row(0), row(1), az.f);
    let gx = lerp(lerp(xd[0][0], xd[0][1], ay.f), lerp(xd[1][0], xd[1][1], ay.f), az.f);
    let gy = lerp(xv[0][1] - xv[0][0], xv[1][1] - xv[1][0], az.f);
    let gz = row(1) - row(0);
    let zero = T::zero();
    (
        v,
        [
            if ax.clamped { zero } else { gx },
            if ay.clamped { zero } else { gy },
            if az.clamped { zero } else { gz },
        ],
    )
}

/// Adjoint of [`trilinear`] with respect to `data`: adds `g·w` to each corner.
#[inline]
pub fn trilinear_scatter<T: Real>(out: &mut [T], dims: [usize; 3], p: [T; 3], g: T) {
    let [ax, ay, az] = corners(dims, p);
    let one = T::one();
    let wx = [one - ax.f, ax.f];
    let wy = [one - ay.f, ay.f];
    let wz = [one - az.f, az.f];
    let xs = [ax.i0, ax.i1];
    let ys = [ay.i0, ay.i1];
    let zs = [az.i0, az.i1];
    for c in 0..2 {
        for b in 0..2 {
            for a in 0..2 {
                let i = at(dims, xs[a], ys[b], zs[c]);
                out[i] = out[i] + g * wx[a] * wy[b] * wz[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Vec<f64> {
        let mut v = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    v.push(1.0 + 2.0 * x as f64 - 3.0 * y as f64 + 0.5 * z as f64);
                }
            }
        }
        v
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let dims = [4, 3, 5];
        let d = ramp(dims);
        for z in 0..5 {
            for y in 0..3 {
                for x in 0..4 {
                    let v = trilinear(&d, dims, [x as f64, y as f64, z as f64]);
                    assert_eq!(v, d[at(dims, x, y, z)]);
                }
            }
        }
    }

    #[test]
    fn linear_function_reproduced_with_gradient() {
        let dims = [4, 3, 5];
        let d = ramp(dims);
        let (v, g) = trilinear_grad(&d, dims, [1.25, 0.5, 3.75]);
        assert!((v - (1.0 + 2.5 - 1.5 + 1.875)).abs() < 1e-12);
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((g[1] + 3.0).abs() < 1e-12);
        assert!((g[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clamping_outside_grid() {
        let dims = [4, 3, 5];
        let d = ramp(dims);
        let (v, g) = trilinear_grad(&d, dims, [-2.0, 1.0, 1.0]);
        assert_eq!(v, d[at(dims, 0, 1, 1)]);
        assert_eq!(g[0], 0.0);
        assert_eq!(trilinear(&d, dims, [9.0, 9.0, 9.0]), d[at(dims, 3, 2, 4)]);
    }
}
