//! Beer-Lambert stain deconvolution into hematoxylin, eosin and DAB channels.

use nalgebra::{Matrix3, RowVector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image3, RgbImage};

/// Largest condition number accepted for a stain matrix.
pub const MAX_CONDITION: f64 = 1e6;

/// Default transmitted-light intensity.
pub const DEFAULT_I0: f64 = 255.0;
/// Default offset guarding the logarithm at zero intensity.
pub const DEFAULT_EPS: f64 = 1.0;

/// Unit-norm optical-density vectors of the three stains, one per row
/// (hematoxylin, eosin, DAB).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct StainMatrix {
    rows: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl StainMatrix {
    /// Normalizes each row and checks conditioning.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        let mut m = Matrix3::zeros();
        for (i, row) in rows.iter().enumerate() {
            let v = RowVector3::from_row_slice(row);
            let norm = v.norm();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::invalid(format!("stain row {i} has zero or non-finite norm")));
            }
            m.set_row(i, &(v / norm));
        }
        let sv = m.singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        if smin <= 0.0 || smax / smin >= MAX_CONDITION {
            return Err(Error::invalid(format!(
                "stain matrix is singular or ill-conditioned (condition {:.3e})",
                if smin > 0.0 { smax / smin } else { f64::INFINITY }
            )));
        }
        let inverse = m
            .try_inverse()
            .ok_or_else(|| Error::invalid("stain matrix is not invertible"))?;
        Ok(Self { rows: m, inverse })
    }

    /// The standard H/E/DAB optical-density vectors of Ruifrok and Johnston.
    pub fn hed() -> Self {
        Self::new([[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]])
            .expect("default stain matrix is well conditioned")
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.rows;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    /// Concentrations of one pixel given real-valued RGB intensities.
    pub fn deconvolve_pixel(&self, rgb: [f64; 3], i0: f64, eps: f64) -> [f64; 3] {
        let od = RowVector3::from_iterator(rgb.iter().map(|&c| -((c + eps) / (i0 + eps)).log10()));
        let conc = od * self.inverse;
        [conc[0], conc[1], conc[2]]
    }

    /// Concentrations for every pixel of an 8-bit image, using a per-level
    /// optical density table. Matches [`Self::deconvolve_pixel`] exactly.
    pub fn deconvolve_rgb8(&self, image: &RgbImage, i0: f64, eps: f64) -> Image3 {
        let od: [f64; 256] = std::array::from_fn(|c| -((c as f64 + eps) / (i0 + eps)).log10());
        Image3::from_rgb8(image, |p| {
            let conc = RowVector3::new(od[p[0] as usize], od[p[1] as usize], od[p[2] as usize]) * self.inverse;
            [conc[0], conc[1], conc[2]]
        })
    }

    /// Forward model: real-valued RGB intensities produced by the given concentrations.
    pub fn synthesize_pixel(&self, conc: [f64; 3], i0: f64, eps: f64) -> [f64; 3] {
        let od = RowVector3::from_row_slice(&conc) * self.rows;
        [0, 1, 2].map(|c| (i0 + eps) * 10f64.powf(-od[c]) - eps)
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        Self::hed()
    }
}

impl TryFrom<[[f64; 3]; 3]> for StainMatrix {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<StainMatrix> for [[f64; 3]; 3] {
    fn from(m: StainMatrix) -> Self {
        m.rows()
    }
}

/// Per-pixel stain concentrations. No clipping is applied.
pub fn stain_deconvolve(image: &RgbImage, matrix: &StainMatrix, i0: f64, eps: f64) -> Image3 {
    matrix.deconvolve_rgb8(image, i0, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rows_are_unit_norm() {
        for row in StainMatrix::hed().rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn white_has_zero_concentration() {
        let c = StainMatrix::hed().deconvolve_pixel([255.0; 3], DEFAULT_I0, DEFAULT_EPS);
        assert!(c.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn black_is_finite() {
        let m = StainMatrix::hed();
        let expected_od = (256f64).log10();
        let c = m.deconvolve_pixel([0.0; 3], DEFAULT_I0, DEFAULT_EPS);
        assert!(c.iter().all(|v| v.is_finite()));
        // Back to optical density through the forward matrix.
        let rows = m.rows();
        for ch in 0..3 {
            let od: f64 = (0..3).map(|s| c[s] * rows[s][ch]).sum();
            assert!((od - expected_od).abs() < 1e-9);
        }
    }

    #[test]
    fn recovers_pure_hematoxylin() {
        let m = StainMatrix::hed();
        let rgb = m.synthesize_pixel([0.7, 0.0, 0.0], DEFAULT_I0, DEFAULT_EPS);
        let c = m.deconvolve_pixel(rgb, DEFAULT_I0, DEFAULT_EPS);
        for (got, want) in c.iter().zip([0.7, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-3);
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        assert!(StainMatrix::new([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(StainMatrix::new([[0.0; 3], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn rows_normalized_for_arbitrary_input() {
        let m = StainMatrix::new([[3.0, 0.0, 4.0], [0.0, 2.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let r = m.rows();
        assert!((r[0][0] - 0.6).abs() < 1e-12 && (r[0][2] - 0.8).abs() < 1e-12);
    }
}
