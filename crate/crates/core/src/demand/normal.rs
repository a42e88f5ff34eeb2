//! Univariate normal helpers and trivariate Gaussian box probabilities.
//!
//! Both integrators use the Genz separation-of-variables transform: after a
//! Cholesky factorisation the box constraint on each coordinate becomes an
//! interval for one standard-normal variable conditional on the earlier ones,
//! so the innermost dimension is integrated exactly and only the outer two are
//! sampled.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};
use std::sync::OnceLock;

use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// Quasi-random points used by [`gaussian_box_integral`].
pub const QMC_POINTS: usize = 4096;

/// Gauss-Legendre order of the batched grid integrator.
pub const GRID_QUADRATURE_ORDER: usize = 8;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Mass beyond `|x|` on one side, i.e. `Φ(-|x|)`; accurate deep in the tails.
#[inline]
fn tail(x: f64) -> f64 {
    0.5 * erfc(x.abs() * FRAC_1_SQRT_2)
}

/// `P(a ≤ Z ≤ b)` for a standard normal, computed from the nearer tail.
#[inline]
pub fn norm_band(a: f64, b: f64) -> f64 {
    if !(a < b) {
        return 0.0;
    }
    band_from_tails(a, b, tail(a), tail(b))
}

#[inline]
fn band_from_tails(a: f64, b: f64, ta: f64, tb: f64) -> f64 {
    if a >= 0.0 {
        (ta - tb).max(0.0)
    } else if b <= 0.0 {
        (tb - ta).max(0.0)
    } else {
        (1.0 - ta - tb).max(0.0)
    }
}

/// Inverse of [`norm_cdf`] for a lower-tail probability.
#[inline]
fn ppf_lower(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Draws the point of `[a, b]` at quantile `u` of the truncated standard normal.
#[inline]
fn band_quantile(a: f64, b: f64, u: f64) -> f64 {
    let z = if a >= 0.0 {
        // upper tail: work with survival probabilities
        let (ta, tb) = (tail(a), tail(b));
        -ppf_lower(ta - u * (ta - tb))
    } else if b <= 0.0 {
        let (ta, tb) = (tail(a), tail(b));
        ppf_lower(ta + u * (tb - ta))
    } else {
        let pa = tail(a);
        let pb = 1.0 - tail(b);
        ppf_lower(pa + u * (pb - pa))
    };
    z.clamp(a, b)
}

/// Lower Cholesky factor of a 3×3 symmetric matrix.
pub fn cholesky3(s: &Mat3) -> Result<Mat3> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut sum = s[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(Error::NonPositiveDefinite);
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Log density of `N_3(mean, cov)` at `x`.
pub fn log_density3(mean: &Vec3, chol: &Mat3, x: &Vec3) -> f64 {
    let mut z = [0.0; 3];
    for i in 0..3 {
        let mut v = x[i] - mean[i];
        for k in 0..i {
            v -= chol[i][k] * z[k];
        }
        z[i] = v / chol[i][i];
    }
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let log_det: f64 = (0..3).map(|i| chol[i][i].ln()).sum();
    -0.5 * quad - log_det - 1.5 * (2.0 * std::f64::consts::PI).ln()
}

fn qmc_points() -> &'static [[f64; 2]] {
    static POINTS: OnceLock<Vec<[f64; 2]>> = OnceLock::new();
    POINTS.get_or_init(|| {
        // Additive recurrence on the plastic number (R2 sequence).
        let g = 1.324_717_957_244_746_f64;
        let a1 = 1.0 / g;
        let a2 = 1.0 / (g * g);
        (1..=QMC_POINTS)
            .map(|n| {
                let n = n as f64;
                [(0.5 + n * a1).fract(), (0.5 + n * a2).fract()]
            })
            .collect()
    })
}

/// `∫_box N_3(mean, cov)` for the box `[lo, hi]`, by quasi-Monte Carlo over the
/// Genz-transformed integrand with a fixed 4096-point sequence.
pub fn gaussian_box_integral(mean: &Vec3, cov: &Mat3, lo: &Vec3, hi: &Vec3) -> Result<f64> {
    let l = cholesky3(cov)?;
    Ok(box_integral_with_factor(mean, &l, lo, hi))
}

pub(crate) fn box_integral_with_factor(mean: &Vec3, l: &Mat3, lo: &Vec3, hi: &Vec3) -> f64 {
    let a0 = (lo[0] - mean[0]) / l[0][0];
    let b0 = (hi[0] - mean[0]) / l[0][0];
    let e0 = norm_band(a0, b0);
    if e0 == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for &[w0, w1] in qmc_points() {
        let y0 = band_quantile(a0, b0, w0);
        let c1 = mean[1] + l[1][0] * y0;
        let a1 = (lo[1] - c1) / l[1][1];
        let b1 = (hi[1] - c1) / l[1][1];
        let e1 = norm_band(a1, b1);
        if e1 == 0.0 {
            continue;
        }
        let y1 = band_quantile(a1, b1, w1);
        let c2 = mean[2] + l[2][0] * y0 + l[2][1] * y1;
        let e2 = norm_band((lo[2] - c2) / l[2][2], (hi[2] - c2) / l[2][2]);
        acc += e1 * e2;
    }
    (e0 * acc / QMC_POINTS as f64).clamp(0.0, 1.0)
}

/// Gauss-Legendre nodes and weights mapped to `[0, 1]`.
pub fn gauss_legendre_unit(order: usize) -> Vec<(f64, f64)> {
    let n = order;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Masses of `N_3` over every cell of a rectilinear grid in one pass.
///
/// Coordinates are `(lat, lng, t)`. The result is indexed
/// `[slot][row][col]` with `rows = lat_edges.len() - 1`,
/// `cols = lng_edges.len() - 1` and one slot per entry of `t_intervals`.
/// Samples of the time and latitude coordinates are shared across all cells
/// that use the same bands, which is what makes whole-tensor training cheap.
pub fn grid_cell_masses(
    mean: &Vec3,
    cov: &Mat3,
    lat_edges: &[f64],
    lng_edges: &[f64],
    t_intervals: &[(f64, f64)],
) -> Result<Vec<f64>> {
    // reorder to (t, lat, lng)
    let perm = [2usize, 0, 1];
    let m: Vec3 = [mean[2], mean[0], mean[1]];
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = cov[perm[i]][perm[j]];
        }
    }
    let l = cholesky3(&c)?;
    let rows = lat_edges.len() - 1;
    let cols = lng_edges.len() - 1;
    let nodes = gauss_legendre_unit(GRID_QUADRATURE_ORDER);
    let mut out = vec![0.0; t_intervals.len() * rows * cols];
    let mut z = vec![0.0; cols + 1];
    let mut tails = vec![0.0; cols + 1];
    let mut lat_tail = vec![0.0; rows + 1];
    let mut lat_z = vec![0.0; rows + 1];
    for (k, &(t_lo, t_hi)) in t_intervals.iter().enumerate() {
        let a0 = (t_lo - m[0]) / l[0][0];
        let b0 = (t_hi - m[0]) / l[0][0];
        let e0 = norm_band(a0, b0);
        if e0 == 0.0 {
            continue;
        }
        let cell = &mut out[k * rows * cols..(k + 1) * rows * cols];
        for &(x0, w0) in &nodes {
            let y0 = band_quantile(a0, b0, x0);
            let c1 = m[1] + l[1][0] * y0;
            for (r, edge) in lat_edges.iter().enumerate() {
                lat_z[r] = (edge - c1) / l[1][1];
                lat_tail[r] = tail(lat_z[r]);
            }
            for r in 0..rows {
                let (a1, b1) = (lat_z[r], lat_z[r + 1]);
                let e1 = band_from_tails(a1, b1, lat_tail[r], lat_tail[r + 1]);
                if e1 == 0.0 {
                    continue;
                }
                let scale0 = w0 * e0 * e1;
                for &(x1, w1) in &nodes {
                    let y1 = band_quantile(a1, b1, x1);
                    let c2 = m[2] + l[2][0] * y0 + l[2][1] * y1;
                    for (i, edge) in lng_edges.iter().enumerate() {
                        z[i] = (edge - c2) / l[2][2];
                        tails[i] = tail(z[i]);
                    }
                    let scale = scale0 * w1;
                    let row = &mut cell[r * cols..(r + 1) * cols];
                    for (col, slot) in row.iter_mut().enumerate() {
                        *slot += scale
                            * band_from_tails(z[col], z[col + 1], tails[col], tails[col + 1]);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_and_band_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((norm_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-10);
        assert!((norm_band(-1.0, 1.0) - 0.682_689_492_137_085_9).abs() < 1e-10);
        // deep upper tail keeps relative precision
        let far = norm_band(30.0, 31.0);
        assert!(far > 0.0 && far < 1e-190);
        assert_eq!(norm_band(1.0, 1.0), 0.0);
    }

    #[test]
    fn band_quantile_inverts_band() {
        for &(a, b) in &[(-1.0, 2.0), (3.0, 4.0), (-6.0, -5.0), (25.0, 26.0)] {
            for &u in &[0.1, 0.5, 0.9] {
                let z = band_quantile(a, b, u);
                assert!(z >= a && z <= b);
                let frac = norm_band(a, z) / norm_band(a, b);
                assert!((frac - u).abs() < 1e-6, "a={a} b={b} u={u} frac={frac}");
            }
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let q = gauss_legendre_unit(8);
        let s: f64 = q.iter().map(|(_, w)| w).sum();
        assert!((s - 1.0).abs() < 1e-14);
        let m7: f64 = q.iter().map(|(x, w)| w * x.powi(7)).sum();
        assert!((m7 - 0.125).abs() < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let bad = [[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(cholesky3(&bad), Err(Error::NonPositiveDefinite)));
        let zero = [[0.0; 3]; 3];
        assert!(matches!(
            gaussian_box_integral(&[0.0; 3], &zero, &[-1.0; 3], &[1.0; 3]),
            Err(Error::NonPositiveDefinite)
        ));
    }

    #[test]
    fn log_density_at_mean_of_identity() {
        let l = cholesky3(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let v = log_density3(&[0.0; 3], &l, &[0.0; 3]);
        assert!((v + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn full_support_and_far_tail() {
        let mean = [1.0, -2.0, 30.0];
        let cov: Mat3 = [[2.0, 0.3, 0.5], [0.3, 1.0, -0.2], [0.5, -0.2, 9.0]];
        let sd: Vec<f64> = (0..3).map(|i| cov[i][i].sqrt()).collect();
        let lo = [mean[0] - 12.0 * sd[0], mean[1] - 12.0 * sd[1], mean[2] - 12.0 * sd[2]];
        let hi = [mean[0] + 12.0 * sd[0], mean[1] + 12.0 * sd[1], mean[2] + 12.0 * sd[2]];
        let total = gaussian_box_integral(&mean, &cov, &lo, &hi).unwrap();
        assert!((total - 1.0).abs() < 1e-3);
        let lo = [mean[0] + 20.0 * sd[0], lo[1], lo[2]];
        let hi = [mean[0] + 21.0 * sd[0], hi[1], hi[2]];
        let far = gaussian_box_integral(&mean, &cov, &lo, &hi).unwrap();
        assert!(far.abs() < 1e-6);
    }

    #[test]
    fn grid_masses_agree_with_single_box() {
        let mean = [0.3, 0.4, 10.0];
        let cov = [[0.04, 0.01, 0.1], [0.01, 0.09, -0.2], [0.1, -0.2, 16.0]];
        let lat_edges: Vec<f64> = (0..=4).map(|i| i as f64 * 0.25 - 0.2).collect();
        let lng_edges: Vec<f64> = (0..=5).map(|i| i as f64 * 0.2).collect();
        let t: Vec<(f64, f64)> = (0..6).map(|k| (4.0 + 2.0 * k as f64, 6.0 + 2.0 * k as f64)).collect();
        let grid = grid_cell_masses(&mean, &cov, &lat_edges, &lng_edges, &t).unwrap();
        for (k, &(t0, t1)) in t.iter().enumerate() {
            for r in 0..4 {
                for c in 0..5 {
                    let lo = [lat_edges[r], lng_edges[c], t0];
                    let hi = [lat_edges[r + 1], lng_edges[c + 1], t1];
                    let single = gaussian_box_integral(&mean, &cov, &lo, &hi).unwrap();
                    let batched = grid[(k * 4 + r) * 5 + c];
                    assert!((single - batched).abs() < 1e-4, "{k} {r} {c}: {single} vs {batched}");
                }
            }
        }
    }
}
