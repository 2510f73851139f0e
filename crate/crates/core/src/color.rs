//! Color-space conversions.
//!
//! All RGB values are on the 0..=255 scale. CIELAB uses sRGB primaries and a
//! D65 white point. HSV reports hue in `[0, 1)`. The decorrelated log space
//! (`LAlphaBeta`) is the l-alpha-beta space used for Reinhard color transfer;
//! RGB is offset by one count before the log so black stays finite.

use std::sync::LazyLock;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::image::{Image3, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorSpace {
    Lab,
    Hsv,
    LAlphaBeta,
}

const D65_WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

static RGB_TO_XYZ: LazyLock<Matrix3<f64>> = LazyLock::new(|| {
    Matrix3::new(
        0.412_456_4, 0.357_576_1, 0.180_437_5, //
        0.212_672_9, 0.715_152_2, 0.072_175_0, //
        0.019_333_9, 0.119_192_0, 0.950_304_1,
    )
});
static XYZ_TO_RGB: LazyLock<Matrix3<f64>> =
    LazyLock::new(|| RGB_TO_XYZ.try_inverse().expect("sRGB matrix is invertible"));

static RGB_TO_LMS: LazyLock<Matrix3<f64>> = LazyLock::new(|| {
    Matrix3::new(
        0.3811, 0.5783, 0.0402, //
        0.1967, 0.7244, 0.0782, //
        0.0241, 0.1288, 0.8444,
    )
});
static LMS_TO_RGB: LazyLock<Matrix3<f64>> =
    LazyLock::new(|| RGB_TO_LMS.try_inverse().expect("LMS matrix is invertible"));

static LOGLMS_TO_LAB: LazyLock<Matrix3<f64>> = LazyLock::new(|| {
    let scale = Matrix3::from_diagonal(&nalgebra::Vector3::new(
        1.0 / 3f64.sqrt(),
        1.0 / 6f64.sqrt(),
        1.0 / 2f64.sqrt(),
    ));
    let mix = Matrix3::new(
        1.0, 1.0, 1.0, //
        1.0, 1.0, -2.0, //
        1.0, -1.0, 0.0,
    );
    scale * mix
});
static LAB_TO_LOGLMS: LazyLock<Matrix3<f64>> = LazyLock::new(|| {
    LOGLMS_TO_LAB
        .try_inverse()
        .expect("l-alpha-beta matrix is invertible")
});

fn mul(m: &Matrix3<f64>, v: [f64; 3]) -> [f64; 3] {
    let r = m * nalgebra::Vector3::from(v);
    [r[0], r[1], r[2]]
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const LAB_DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > LAB_DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * LAB_DELTA * LAB_DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > LAB_DELTA {
        t * t * t
    } else {
        3.0 * LAB_DELTA * LAB_DELTA * (t - 4.0 / 29.0)
    }
}

static SRGB_LINEAR_LUT: LazyLock<[f64; 256]> =
    LazyLock::new(|| std::array::from_fn(|i| srgb_to_linear(i as f64 / 255.0)));

pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    linear_to_lab(rgb.map(|c| srgb_to_linear(c / 255.0)))
}

/// Same result as [`rgb_to_lab`] on 8-bit input, with table-driven
/// linearization.
pub fn rgb8_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lut = &*SRGB_LINEAR_LUT;
    linear_to_lab(rgb.map(|c| lut[c as usize]))
}

fn linear_to_lab(lin: [f64; 3]) -> [f64; 3] {
    let xyz = mul(&RGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        D65_WHITE[0] * lab_f_inv(fx),
        D65_WHITE[1] * lab_f_inv(fy),
        D65_WHITE[2] * lab_f_inv(fz),
    ];
    mul(&XYZ_TO_RGB, xyz).map(|c| linear_to_srgb(c) * 255.0)
}

pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| c / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let saturation = if max > 0.0 { chroma / max } else { 0.0 };
    let hue = if chroma == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / chroma).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / chroma + 2.0) / 6.0
    } else {
        ((r - g) / chroma + 4.0) / 6.0
    };
    [hue.rem_euclid(1.0), saturation, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let c = v * s;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

pub fn rgb_to_lalphabeta(rgb: [f64; 3]) -> [f64; 3] {
    let lms = mul(&RGB_TO_LMS, rgb.map(|c| (c + 1.0) / 256.0));
    mul(&LOGLMS_TO_LAB, lms.map(f64::log10))
}

pub fn lalphabeta_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let lms = mul(&LAB_TO_LOGLMS, lab).map(|c| 10f64.powf(c));
    mul(&LMS_TO_RGB, lms).map(|c| c * 256.0 - 1.0)
}

impl ColorSpace {
    pub fn forward(self, rgb: [f64; 3]) -> [f64; 3] {
        match self {
            ColorSpace::Lab => rgb_to_lab(rgb),
            ColorSpace::Hsv => rgb_to_hsv(rgb),
            ColorSpace::LAlphaBeta => rgb_to_lalphabeta(rgb),
        }
    }

    pub fn inverse(self, value: [f64; 3]) -> [f64; 3] {
        match self {
            ColorSpace::Lab => lab_to_rgb(value),
            ColorSpace::Hsv => hsv_to_rgb(value),
            ColorSpace::LAlphaBeta => lalphabeta_to_rgb(value),
        }
    }
}

pub fn convert_color(image: &RgbImage, space: ColorSpace) -> Image3 {
    Image3::from_rgb(image, |p| space.forward(p))
}

/// Maps a converted image back to (unclamped) RGB values.
pub fn convert_to_rgb(image: &Image3, space: ColorSpace) -> Image3 {
    image.map(|p| space.inverse(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn gray_has_no_saturation() {
        let hsv = rgb_to_hsv([128.0, 128.0, 128.0]);
        assert_eq!(hsv[1], 0.0);
    }

    #[test]
    fn white_is_lab_100() {
        assert!(close(rgb_to_lab([255.0; 3]), [100.0, 0.0, 0.0], 1e-3));
    }

    #[test]
    fn lab_matches_published_primaries() {
        // Reference values for sRGB primaries under D65.
        assert!(close(rgb_to_lab([255.0, 0.0, 0.0]), [53.24, 80.09, 67.20], 0.02));
        assert!(close(rgb_to_lab([0.0, 255.0, 0.0]), [87.73, -86.18, 83.18], 0.02));
        assert!(close(rgb_to_lab([0.0, 0.0, 255.0]), [32.30, 79.19, -107.86], 0.02));
    }

    #[test]
    fn hue_stays_in_unit_interval() {
        for rgb in [[255.0, 0.0, 1.0], [255.0, 0.0, 0.0], [0.0, 0.0, 255.0], [10.0, 10.0, 10.0]] {
            let h = rgb_to_hsv(rgb)[0];
            assert!((0.0..1.0).contains(&h), "{rgb:?} -> {h}");
        }
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[230.0, 140.0, 170.0], [12.0, 200.0, 99.0], [0.0, 0.0, 0.0], [255.0, 255.0, 0.0]] {
            assert!(close(hsv_to_rgb(rgb_to_hsv(rgb)), rgb, 1e-9));
        }
    }

    #[test]
    fn lab_fast_path_matches() {
        for v in (0..=255u8).step_by(5) {
            let p = [v, 255 - v, v / 2];
            assert_eq!(rgb8_to_lab(p), rgb_to_lab(p.map(f64::from)));
        }
    }

    #[test]
    fn black_is_finite_in_log_space() {
        let v = rgb_to_lalphabeta([0.0; 3]);
        assert!(v.iter().all(|c| c.is_finite()));
        assert!(close(lalphabeta_to_rgb(v), [0.0; 3], 1e-9));
    }
}
