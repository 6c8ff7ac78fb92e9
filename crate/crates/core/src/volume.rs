//! Dense 3D scalar volumes on a regular grid.
//!
//! Data is stored x-fastest: `index = x + nx*(y + ny*z)`. Geometry maps voxel
//! indices to world millimetres via `world = origin + index * spacing`; voxel
//! (0,0,0) sits exactly at the origin.

use thiserror::Error;

/// Errors from volume construction and heatmap synthesis.
#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume dims must be nonzero, got {0}x{1}x{2}")]
    ZeroDim(usize, usize, usize),
    #[error("voxel spacing must be positive, got {0} mm")]
    NonPositiveSpacing(f64),
    #[error("data length {got} does not match dims ({expect} voxels)")]
    DataSizeMismatch { got: usize, expect: usize },
    #[error("gaussian sigma must be positive, got {0} mm")]
    NonPositiveSigma(f64),
}

/// Grid geometry: dims, voxel spacing (mm), world origin (mm).
///
/// Compared exactly; volumes that should share a grid must carry identical
/// floats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl Geometry {
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
    ) -> Result<Geometry, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::ZeroDim(dims[0], dims[1], dims[2]));
        }
        if let Some(&s) = spacing_mm.iter().find(|&&s| !(s > 0.0)) {
            return Err(VolumeError::NonPositiveSpacing(s));
        }
        Ok(Geometry {
            dims,
            spacing_mm,
            origin_mm,
        })
    }

    /// Isotropic grid with the origin at world zero.
    pub fn isotropic(dims: [usize; 3], spacing_mm: f64) -> Result<Geometry, VolumeError> {
        Geometry::new(dims, [spacing_mm; 3], [0.0; 3])
    }

    /// Total voxel count.
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index of voxel (x, y, z); x varies fastest.
    #[inline]
    pub fn linear(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Voxel index of a linear offset; inverse of [`Geometry::linear`].
    #[inline]
    pub fn unlinear(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// World position (mm) of a voxel centre.
    pub fn voxel_to_world(&self, voxel: [usize; 3]) -> [f64; 3] {
        [
            self.origin_mm[0] + voxel[0] as f64 * self.spacing_mm[0],
            self.origin_mm[1] + voxel[1] as f64 * self.spacing_mm[1],
            self.origin_mm[2] + voxel[2] as f64 * self.spacing_mm[2],
        ]
    }

    /// Continuous voxel coordinates of a world position (mm); may fall
    /// outside the grid.
    pub fn world_to_voxel(&self, world_mm: [f64; 3]) -> [f64; 3] {
        [
            (world_mm[0] - self.origin_mm[0]) / self.spacing_mm[0],
            (world_mm[1] - self.origin_mm[1]) / self.spacing_mm[1],
            (world_mm[2] - self.origin_mm[2]) / self.spacing_mm[2],
        ]
    }

    /// Grid voxel nearest to a world position, clamped to the volume bounds.
    pub fn nearest_voxel(&self, world_mm: [f64; 3]) -> [usize; 3] {
        let c = self.world_to_voxel(world_mm);
        let mut v = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            v[a] = if r <= 0.0 {
                0
            } else {
                (r as usize).min(self.dims[a] - 1)
            };
        }
        v
    }
}

/// Dense scalar volume over a [`Geometry`] grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    geometry: Geometry,
    data: Vec<f64>,
}

impl Volume3D {
    /// All-zero volume on the given grid.
    pub fn zeros(geometry: Geometry) -> Volume3D {
        Volume3D {
            data: vec![0.0; geometry.voxels()],
            geometry,
        }
    }

    /// Wraps existing voxel data (x-fastest order).
    pub fn from_data(geometry: Geometry, data: Vec<f64>) -> Result<Volume3D, VolumeError> {
        if data.len() != geometry.voxels() {
            return Err(VolumeError::DataSizeMismatch {
                got: data.len(),
                expect: geometry.voxels(),
            });
        }
        Ok(Volume3D { geometry, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geometry.linear(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f64) {
        let idx = self.geometry.linear(x, y, z);
        self.data[idx] = value;
    }

    /// Sum of all voxels.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Voxel index and value of the maximum; ties resolve to the lowest
    /// linear index.
    pub fn argmax(&self) -> ([usize; 3], f64) {
        let mut best = 0usize;
        let mut best_val = self.data[0];
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > best_val {
                best = i;
                best_val = v;
            }
        }
        (self.geometry.unlinear(best), best_val)
    }
}

/// Radius, in sigmas, beyond which Gaussian heatmaps are truncated to zero.
/// exp(-(4)^2/2) < 4e-4 of the peak, so localization is unaffected.
pub const GAUSSIAN_TRUNCATION_SIGMAS: f64 = 4.0;

/// Renders the Gaussian ground-truth heatmap for one centroid.
///
/// Every voxel within `4*sigma` of `center_mm` holds
/// `exp(-|x - mu|^2 / (2 sigma^2)) / (sigma * sqrt(2 pi))` evaluated at the
/// voxel's world position; voxels beyond that radius are exactly zero. The
/// peak `1/(sigma*sqrt(2 pi))` is attained at a voxel only when one lands on
/// `center_mm`.
pub fn make_gaussian_heatmap(
    geometry: &Geometry,
    center_mm: [f64; 3],
    sigma_mm: f64,
) -> Result<Volume3D, VolumeError> {
    if !(sigma_mm > 0.0) {
        return Err(VolumeError::NonPositiveSigma(sigma_mm));
    }
    let mut out = Volume3D::zeros(*geometry);
    let radius = GAUSSIAN_TRUNCATION_SIGMAS * sigma_mm;
    let r2 = radius * radius;
    let coef = 1.0 / (sigma_mm * (2.0 * std::f64::consts::PI).sqrt());
    let inv_two_sigma2 = 1.0 / (2.0 * sigma_mm * sigma_mm);

    // Bounding box of voxel centres within the truncation radius.
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let lo_f = ((center_mm[a] - radius - geometry.origin_mm[a]) / geometry.spacing_mm[a]).ceil();
        let hi_f =
            ((center_mm[a] + radius - geometry.origin_mm[a]) / geometry.spacing_mm[a]).floor();
        if hi_f < 0.0 || lo_f > (geometry.dims[a] - 1) as f64 {
            return Ok(out); // blob entirely outside the grid
        }
        lo[a] = lo_f.max(0.0) as usize;
        hi[a] = (hi_f as usize).min(geometry.dims[a] - 1);
    }

    for z in lo[2]..=hi[2] {
        let dz = geometry.origin_mm[2] + z as f64 * geometry.spacing_mm[2] - center_mm[2];
        for y in lo[1]..=hi[1] {
            let dy = geometry.origin_mm[1] + y as f64 * geometry.spacing_mm[1] - center_mm[1];
            let row = geometry.linear(lo[0], y, z);
            for (i, x) in (lo[0]..=hi[0]).enumerate() {
                let dx = geometry.origin_mm[0] + x as f64 * geometry.spacing_mm[0] - center_mm[0];
                let d2 = dx * dx + dy * dy + dz * dz;
                if d2 <= r2 {
                    out.data[row + i] = coef * (-d2 * inv_two_sigma2).exp();
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn geom(dims: [usize; 3], spacing: f64) -> Geometry {
        Geometry::isotropic(dims, spacing).unwrap()
    }

    #[test]
    fn linear_index_is_x_fastest() {
        let g = geom([4, 3, 2], 1.0);
        assert_eq!(g.linear(0, 0, 0), 0);
        assert_eq!(g.linear(1, 0, 0), 1);
        assert_eq!(g.linear(0, 1, 0), 4);
        assert_eq!(g.linear(0, 0, 1), 12);
        assert_eq!(g.unlinear(g.linear(3, 2, 1)), [3, 2, 1]);
    }

    #[test]
    fn voxel_world_transforms() {
        let g = geom([8, 8, 8], 2.0);
        assert_eq!(g.voxel_to_world([1, 1, 1]), [2.0, 2.0, 2.0]);
        assert_eq!(g.voxel_to_world([0, 0, 0]), [0.0, 0.0, 0.0]);
        let c = g.world_to_voxel([3.0, 2.0, 0.0]);
        assert_relative_eq!(c[0], 1.5);
        assert_relative_eq!(c[1], 1.0);
        assert_relative_eq!(c[2], 0.0);
    }

    #[test]
    fn transforms_round_trip() {
        let g = Geometry::new([5, 6, 7], [0.7, 1.3, 2.9], [-4.0, 3.0, 10.5]).unwrap();
        for &v in &[[0usize, 0, 0], [4, 5, 6], [2, 3, 1]] {
            let w = g.voxel_to_world(v);
            let back = g.world_to_voxel(w);
            for a in 0..3 {
                assert_relative_eq!(back[a], v[a] as f64, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn nearest_voxel_rounds_and_clamps() {
        let g = geom([4, 4, 4], 2.0);
        assert_eq!(g.nearest_voxel([2.9, 3.1, 0.0]), [1, 2, 0]);
        assert_eq!(g.nearest_voxel([-5.0, 100.0, 4.0]), [0, 3, 2]);
    }

    #[test]
    fn geometry_rejects_degenerate_grids() {
        assert!(matches!(
            Geometry::new([0, 4, 4], [1.0; 3], [0.0; 3]),
            Err(VolumeError::ZeroDim(..))
        ));
        assert!(matches!(
            Geometry::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]),
            Err(VolumeError::NonPositiveSpacing(_))
        ));
    }

    #[test]
    fn from_data_checks_length() {
        let g = geom([2, 2, 2], 1.0);
        assert!(Volume3D::from_data(g, vec![0.0; 7]).is_err());
        assert!(Volume3D::from_data(g, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn argmax_breaks_ties_at_lowest_linear_index() {
        let g = geom([2, 2, 2], 1.0);
        let mut v = Volume3D::zeros(g);
        v.set(1, 0, 0, 5.0);
        v.set(0, 0, 1, 5.0);
        let (idx, val) = v.argmax();
        assert_eq!(idx, [1, 0, 0]);
        assert_eq!(val, 5.0);
    }

    #[test]
    fn gaussian_peak_value_sigma_one() {
        // Peak of the 1-D normal density at the mean: 1/sqrt(2 pi).
        let g = geom([9, 9, 9], 1.0);
        let h = make_gaussian_heatmap(&g, [4.0, 4.0, 4.0], 1.0).unwrap();
        assert_relative_eq!(h.at(4, 4, 4), 0.3989423, epsilon = 1e-7);
        let (idx, _) = h.argmax();
        assert_eq!(idx, [4, 4, 4]);
    }

    #[test]
    fn gaussian_value_sigma_two_at_two_mm() {
        // (1/(2 sqrt(2 pi))) * exp(-4/8) = 0.1209854.
        let g = geom([9, 9, 9], 1.0);
        let h = make_gaussian_heatmap(&g, [4.0, 4.0, 4.0], 2.0).unwrap();
        let expect = (1.0 / (2.0 * (2.0 * std::f64::consts::PI).sqrt())) * (-0.5f64).exp();
        assert_relative_eq!(expect, 0.1209854, epsilon = 1e-7);
        assert_relative_eq!(h.at(6, 4, 4), expect, epsilon = 1e-12);
        assert_relative_eq!(h.at(4, 2, 4), expect, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_equidistant_voxels_match() {
        let g = geom([9, 9, 9], 1.0);
        let h = make_gaussian_heatmap(&g, [4.0, 4.0, 4.0], 1.5).unwrap();
        let a = h.at(5, 4, 4);
        assert!(a > 0.0);
        assert_eq!(a, h.at(3, 4, 4));
        assert_eq!(a, h.at(4, 5, 4));
        assert_eq!(a, h.at(4, 4, 3));
    }

    #[test]
    fn gaussian_decreases_with_radius_and_truncates() {
        let g = geom([33, 5, 5], 1.0);
        let h = make_gaussian_heatmap(&g, [16.0, 2.0, 2.0], 2.0).unwrap();
        // Strictly decreasing along the axis within the truncation radius.
        for x in 16..24 {
            assert!(h.at(x, 2, 2) > h.at(x + 1, 2, 2), "x = {x}");
        }
        // 4 sigma = 8 mm: the boundary voxel is kept, the next one is zero.
        assert!(h.at(24, 2, 2) > 0.0);
        assert_eq!(h.at(25, 2, 2), 0.0);
        assert_eq!(h.at(32, 2, 2), 0.0);
    }

    #[test]
    fn gaussian_off_grid_center_stays_below_peak() {
        let g = geom([8, 8, 8], 1.0);
        let h = make_gaussian_heatmap(&g, [3.5, 3.0, 3.0], 1.0).unwrap();
        let coef = 0.3989423;
        let (idx, val) = h.argmax();
        assert!(val < coef);
        assert!(idx == [3, 3, 3] || idx == [4, 3, 3]);
    }

    #[test]
    fn gaussian_rejects_non_positive_sigma() {
        let g = geom([4, 4, 4], 1.0);
        assert!(matches!(
            make_gaussian_heatmap(&g, [0.0; 3], 0.0),
            Err(VolumeError::NonPositiveSigma(_))
        ));
        assert!(matches!(
            make_gaussian_heatmap(&g, [0.0; 3], -1.0),
            Err(VolumeError::NonPositiveSigma(_))
        ));
    }

    #[test]
    fn gaussian_outside_grid_is_all_zero() {
        let g = geom([4, 4, 4], 1.0);
        let h = make_gaussian_heatmap(&g, [100.0, 0.0, 0.0], 1.0).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }
}
