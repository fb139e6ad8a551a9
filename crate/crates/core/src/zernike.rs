//! Zernike polynomials on a discretized unit disk.
//!
//! The square patch is mapped onto its inscribed disk: pixel centers are
//! converted to polar coordinates `(r, theta)` with `r = 1` on the inscribed
//! circle, and pixels with `r > 1` are masked out. Every masked pixel carries
//! the same quadrature weight `(2 / size)^2`.
//!
//! The evaluated planes are orthonormalized under that weighted inner product
//! (modified Gram-Schmidt in index order), so [`moments`] is an exact
//! orthogonal projection and [`reconstruct`] is its adjoint.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{arg_err, Error, Result};

/// Number of basis functions for radial order cap 4.
pub const NUM_BASIS: usize = 15;

/// Highest radial order used by the encoder.
pub const ORDER_CAP: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Parity {
    /// Cosine term.
    Even,
    /// Sine term.
    Odd,
}

impl Parity {
    pub fn as_str(self) -> &'static str {
        match self {
            Parity::Even => "even",
            Parity::Odd => "odd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ZernikeIndex {
    pub n: u32,
    pub m: u32,
    pub parity: Parity,
}

impl ZernikeIndex {
    pub fn new(n: u32, m: u32, parity: Parity) -> Result<Self> {
        if m > n {
            return arg_err(format!("zernike index m={m} exceeds n={n}"));
        }
        if (n - m) % 2 != 0 {
            return arg_err(format!("zernike index n-m must be even, got n={n}, m={m}"));
        }
        if parity == Parity::Odd && m == 0 {
            return arg_err("odd zernike term requires m > 0");
        }
        Ok(Self { n, m, parity })
    }

    /// All valid indices with `n <= order_cap`, ordered by `(n, m, parity)`.
    pub fn enumerate(order_cap: u32) -> Vec<ZernikeIndex> {
        let mut out = Vec::new();
        for n in 0..=order_cap {
            for m in (n % 2..=n).step_by(2) {
                out.push(ZernikeIndex { n, m, parity: Parity::Even });
                if m > 0 {
                    out.push(ZernikeIndex { n, m, parity: Parity::Odd });
                }
            }
        }
        out
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// Radial polynomial `R_n^m(r)`; identically zero when `n - m` is odd.
pub fn radial_poly(n: u32, m: u32, r: f64) -> Result<f64> {
    if m > n {
        return arg_err(format!("radial polynomial needs m <= n, got n={n}, m={m}"));
    }
    if (n - m) % 2 != 0 {
        return Ok(0.0);
    }
    let half_diff = (n - m) / 2;
    let half_sum = (n + m) / 2;
    let mut acc = 0.0;
    for k in 0..=half_diff {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let coeff = sign * factorial(n - k)
            / (factorial(k) * factorial(half_sum - k) * factorial(half_diff - k));
        acc += coeff * r.powi((n - 2 * k) as i32);
    }
    Ok(acc)
}

pub fn zernike_eval(idx: ZernikeIndex, r: f64, theta: f64) -> f64 {
    // Indices are validated at construction, so the radial term cannot fail.
    let radial = radial_poly(idx.n, idx.m, r).unwrap_or(0.0);
    let angle = f64::from(idx.m) * theta;
    match idx.parity {
        Parity::Even => radial * angle.cos(),
        Parity::Odd => radial * angle.sin(),
    }
}

/// Square pixel grid mapped onto the unit disk.
#[derive(Debug, Clone)]
pub struct DiskGrid {
    size: usize,
    radius: Vec<f64>,
    angle: Vec<f64>,
    mask: Vec<bool>,
    weight: Vec<f64>,
}

impl DiskGrid {
    pub fn new(size: usize) -> Result<Self> {
        if size % 2 == 0 || size < 5 {
            return arg_err(format!("disk grid size must be odd and >= 5, got {size}"));
        }
        let center = (size - 1) as f64 / 2.0;
        let scale = 2.0 / size as f64;
        let cell = scale * scale;
        let count = size * size;
        let mut radius = Vec::with_capacity(count);
        let mut angle = Vec::with_capacity(count);
        let mut mask = Vec::with_capacity(count);
        let mut weight = Vec::with_capacity(count);
        for row in 0..size {
            for col in 0..size {
                let x = (col as f64 - center) * scale;
                let y = (center - row as f64) * scale;
                let r = x.hypot(y);
                let mut t = y.atan2(x);
                if t < 0.0 {
                    t += 2.0 * PI;
                }
                let inside = r <= 1.0;
                radius.push(r);
                angle.push(t);
                mask.push(inside);
                weight.push(if inside { cell } else { 0.0 });
            }
        }
        Ok(Self { size, radius, angle, mask, weight })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Polar coordinates of pixel `(row, col)`.
    pub fn coords(&self, row: usize, col: usize) -> (f64, f64) {
        let i = row * self.size + col;
        (self.radius[i], self.angle[i])
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn cell_weights(&self) -> &[f64] {
        &self.weight
    }

    /// Weighted inner product of two row-major planes.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weight
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }

    /// Total quadrature area of the masked pixels (tends to pi).
    pub fn area(&self) -> f64 {
        self.weight.iter().sum()
    }
}

/// The 15 orthonormalized Zernike planes over a [`DiskGrid`].
#[derive(Debug, Clone)]
pub struct ZernikeBasis {
    grid: DiskGrid,
    indices: Vec<ZernikeIndex>,
    values: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl ZernikeBasis {
    pub fn new(order_cap: u32, grid_size: usize) -> Result<Self> {
        let grid = DiskGrid::new(grid_size)?;
        let indices = ZernikeIndex::enumerate(order_cap);
        let pixels = grid_size * grid_size;

        let mut values: Vec<Vec<f64>> = indices
            .iter()
            .map(|&idx| {
                (0..pixels)
                    .map(|p| {
                        if grid.mask[p] {
                            zernike_eval(idx, grid.radius[p], grid.angle[p])
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();

        let mut norms = Vec::with_capacity(values.len());
        for i in 0..values.len() {
            let (done, rest) = values.split_at_mut(i);
            let plane = &mut rest[0];
            let raw_norm = grid.inner(plane, plane).sqrt();
            // Two sweeps of modified Gram-Schmidt keep the Gram matrix at
            // rounding level even on small windows.
            for _ in 0..2 {
                for prev in done.iter() {
                    let c = grid.inner(plane, prev);
                    for (v, p) in plane.iter_mut().zip(prev) {
                        *v -= c * p;
                    }
                }
            }
            let norm = grid.inner(plane, plane).sqrt();
            if !(norm > 1e-9 * raw_norm.max(f64::MIN_POSITIVE)) {
                return Err(Error::Numeric(format!(
                    "zernike plane {:?} is degenerate on a {grid_size}x{grid_size} grid",
                    indices[i]
                )));
            }
            let scale = 1.0 / norm;
            plane.iter_mut().for_each(|v| *v *= scale);
            norms.push(scale);
        }

        Ok(Self { grid, indices, values, norms })
    }

    pub fn grid(&self) -> &DiskGrid {
        &self.grid
    }

    pub fn size(&self) -> usize {
        self.grid.size
    }

    pub fn indices(&self) -> &[ZernikeIndex] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Plane `i`, row-major `size * size`.
    pub fn plane(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    /// Scale applied to each plane after orthogonalization.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn gram(&self) -> Vec<Vec<f64>> {
        let n = self.values.len();
        let mut g = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let v = self.grid.inner(&self.values[i], &self.values[j]);
                g[i][j] = v;
                g[j][i] = v;
            }
        }
        g
    }

    /// Planes premultiplied by the cell weight, the form used by sliding
    /// window moment filters.
    pub fn weighted_planes(&self) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|plane| {
                plane
                    .iter()
                    .zip(&self.grid.weight)
                    .map(|(v, w)| v * w)
                    .collect()
            })
            .collect()
    }

    /// Basis planes as CSV: `n,m,parity,v0,v1,...` per index.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,m,parity,values\n");
        for (idx, plane) in self.indices.iter().zip(&self.values) {
            let _ = write!(out, "{},{},{}", idx.n, idx.m, idx.parity.as_str());
            for v in plane {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Moment coefficients, one per basis index.
#[derive(Debug, Clone, PartialEq)]
pub struct ZernikeCoeffs {
    pub alpha: Vec<f64>,
}

impl ZernikeCoeffs {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != NUM_BASIS {
            return arg_err(format!("expected {NUM_BASIS} coefficients, got {}", alpha.len()));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("non-finite zernike coefficient".into()));
        }
        Ok(Self { alpha })
    }

    /// Rotation-invariant magnitudes `sqrt(even^2 + odd^2)` per `(n, m)`.
    pub fn magnitudes(&self, basis: &ZernikeBasis) -> Vec<((u32, u32), f64)> {
        let mut out: Vec<((u32, u32), f64)> = Vec::new();
        for (idx, a) in basis.indices().iter().zip(&self.alpha) {
            match out.last_mut() {
                Some((key, acc)) if *key == (idx.n, idx.m) => *acc += a * a,
                _ => out.push(((idx.n, idx.m), a * a)),
            }
        }
        for (_, v) in out.iter_mut() {
            *v = v.sqrt();
        }
        out
    }

    pub fn to_csv(&self, basis: &ZernikeBasis) -> String {
        let mut out = String::from("n,m,parity,value\n");
        for (idx, a) in basis.indices().iter().zip(&self.alpha) {
            let _ = writeln!(out, "{},{},{},{a}", idx.n, idx.m, idx.parity.as_str());
        }
        out
    }
}

/// Weighted projection of a row-major patch onto every basis plane.
pub fn moments(patch: &[f64], basis: &ZernikeBasis) -> Result<ZernikeCoeffs> {
    let size = basis.size();
    if patch.len() != size * size {
        return arg_err(format!(
            "patch has {} pixels, basis grid expects {size}x{size}",
            patch.len()
        ));
    }
    let alpha = basis
        .values
        .iter()
        .map(|plane| basis.grid.inner(patch, plane))
        .collect();
    Ok(ZernikeCoeffs { alpha })
}

pub fn reconstruct(coeffs: &ZernikeCoeffs, basis: &ZernikeBasis) -> Vec<f64> {
    let size = basis.size();
    let mut out = vec![0.0; size * size];
    for (a, plane) in coeffs.alpha.iter().zip(&basis.values) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += a * v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotate90(patch: &[f64], size: usize) -> Vec<f64> {
        let mut out = vec![0.0; size * size];
        for row in 0..size {
            for col in 0..size {
                out[row * size + col] = patch[col * size + (size - 1 - row)];
            }
        }
        out
    }

    #[test]
    fn radial_examples() {
        assert_eq!(radial_poly(3, 3, 1.0).unwrap(), 1.0);
        assert_eq!(radial_poly(2, 1, 0.7).unwrap(), 0.0);
        assert!((radial_poly(2, 0, 0.5).unwrap() + 0.5).abs() < 1e-15);
        assert!(radial_poly(1, 2, 0.5).is_err());
    }

    #[test]
    fn radial_matches_closed_forms() {
        // Textbook closed forms for n <= 4.
        let cases: [(u32, u32, fn(f64) -> f64); 9] = [
            (0, 0, |_| 1.0),
            (1, 1, |r| r),
            (2, 0, |r| 2.0 * r * r - 1.0),
            (2, 2, |r| r * r),
            (3, 1, |r| 3.0 * r.powi(3) - 2.0 * r),
            (3, 3, |r| r.powi(3)),
            (4, 0, |r| 6.0 * r.powi(4) - 6.0 * r * r + 1.0),
            (4, 2, |r| 4.0 * r.powi(4) - 3.0 * r * r),
            (4, 4, |r| r.powi(4)),
        ];
        for (n, m, f) in cases {
            for k in 0..=20 {
                let r = k as f64 / 20.0;
                assert!((radial_poly(n, m, r).unwrap() - f(r)).abs() < 1e-12, "n={n} m={m}");
            }
            assert!((radial_poly(n, m, 1.0).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_difference_is_zero_everywhere() {
        for n in 0..8 {
            for m in 0..=n {
                if (n - m) % 2 == 1 {
                    for k in 0..=10 {
                        assert_eq!(radial_poly(n, m, k as f64 / 10.0).unwrap(), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn eval_examples() {
        let piston = ZernikeIndex::new(0, 0, Parity::Even).unwrap();
        assert_eq!(zernike_eval(piston, 0.3, 1.2), 1.0);
        let tilt = ZernikeIndex::new(1, 1, Parity::Even).unwrap();
        assert!((zernike_eval(tilt, 1.0, 0.0) - 1.0).abs() < 1e-15);
        for (n, m) in [(1, 1), (2, 2), (3, 1), (4, 4)] {
            let idx = ZernikeIndex::new(n, m, Parity::Odd).unwrap();
            assert_eq!(zernike_eval(idx, 0.8, 0.0), 0.0);
        }
    }

    #[test]
    fn index_validation_and_count() {
        assert!(ZernikeIndex::new(2, 0, Parity::Odd).is_err());
        assert!(ZernikeIndex::new(3, 0, Parity::Even).is_err());
        assert!(ZernikeIndex::new(2, 3, Parity::Even).is_err());
        let all = ZernikeIndex::enumerate(ORDER_CAP);
        assert_eq!(all.len(), NUM_BASIS);
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, all);
    }

    #[test]
    fn grid_rejects_bad_sizes() {
        assert!(DiskGrid::new(4).is_err());
        assert!(DiskGrid::new(3).is_err());
        assert!(ZernikeBasis::new(ORDER_CAP, 8).is_err());
    }

    #[test]
    fn grid_mask_matches_radius_and_area_converges() {
        let grid = DiskGrid::new(101).unwrap();
        for row in 0..101 {
            for col in 0..101 {
                let (r, t) = grid.coords(row, col);
                assert_eq!(r > 1.0, !grid.mask()[row * 101 + col]);
                assert!((0.0..2.0 * PI).contains(&t));
            }
        }
        let coarse = (DiskGrid::new(51).unwrap().area() - PI).abs();
        let fine = (DiskGrid::new(401).unwrap().area() - PI).abs();
        assert!(fine < coarse);
        assert!(fine < 1e-2);
    }

    #[test]
    fn basis_is_orthonormal_and_masked() {
        let basis = ZernikeBasis::new(ORDER_CAP, 33).unwrap();
        assert_eq!(basis.len(), 15);
        let g = basis.gram();
        for (i, row) in g.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-12, "gram[{i}][{j}] = {v}");
            }
        }
        for i in 0..basis.len() {
            for (p, &inside) in basis.grid().mask().iter().enumerate() {
                if !inside {
                    assert_eq!(basis.plane(i)[p], 0.0);
                }
            }
        }
    }

    #[test]
    fn small_window_basis_is_full_rank() {
        for size in [5, 7, 9] {
            ZernikeBasis::new(ORDER_CAP, size).unwrap();
        }
    }

    #[test]
    fn piston_moments() {
        let basis = ZernikeBasis::new(ORDER_CAP, 31).unwrap();
        let a = moments(basis.plane(0), &basis).unwrap();
        assert!((a.alpha[0] - 1.0).abs() < 1e-6);
        assert!(a.alpha[1..].iter().all(|v| v.abs() < 1e-6));

        let constant = vec![0.7; 31 * 31];
        let c = moments(&constant, &basis).unwrap();
        assert!(c.alpha[0].abs() > 0.1);
        assert!(c.alpha[1..].iter().all(|v| v.abs() < 1e-12));

        let zero = moments(&vec![0.0; 31 * 31], &basis).unwrap();
        assert!(zero.alpha.iter().all(|&v| v == 0.0));
        assert!(moments(&[0.0; 10], &basis).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let basis = ZernikeBasis::new(ORDER_CAP, 21).unwrap();
        let zero = reconstruct(&ZernikeCoeffs::new(vec![0.0; 15]).unwrap(), &basis);
        assert!(zero.iter().all(|&v| v == 0.0));

        let mut unit = vec![0.0; 15];
        unit[0] = 1.0;
        let patch = reconstruct(&ZernikeCoeffs::new(unit).unwrap(), &basis);
        let level = 1.0 / basis.grid().area().sqrt();
        for (p, &inside) in basis.grid().mask().iter().enumerate() {
            let expected = if inside { level } else { 0.0 };
            assert!((patch[p] - expected).abs() < 1e-12);
        }
        assert!(ZernikeCoeffs::new(vec![0.0; 14]).is_err());
    }

    #[test]
    fn rotation_keeps_magnitudes() {
        let size = 25;
        let basis = ZernikeBasis::new(ORDER_CAP, size).unwrap();
        let patch: Vec<f64> = (0..size * size)
            .map(|i| ((i * 7919) % 113) as f64 / 113.0)
            .collect();
        let a = moments(&patch, &basis).unwrap().magnitudes(&basis);
        let b = moments(&rotate90(&patch, size), &basis)
            .unwrap()
            .magnitudes(&basis);
        assert_eq!(a.len(), 9);
        for ((ka, va), (kb, vb)) in a.iter().zip(&b) {
            assert_eq!(ka, kb);
            assert!((va - vb).abs() <= 1e-9 * va.abs().max(1e-12), "{ka:?}: {va} vs {vb}");
        }
    }

    #[test]
    fn csv_dump_has_one_row_per_index() {
        let basis = ZernikeBasis::new(ORDER_CAP, 7).unwrap();
        let csv = basis.to_csv();
        assert_eq!(csv.lines().count(), 16);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,even,"));
        let coeffs = moments(&vec![1.0; 49], &basis).unwrap();
        let csv = coeffs.to_csv(&basis);
        assert_eq!(csv.lines().count(), 16);
        assert!(csv.lines().last().unwrap().starts_with("4,4,odd,"));
    }
}
