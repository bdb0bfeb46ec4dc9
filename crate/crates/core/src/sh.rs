//! Real spherical harmonics up to degree 3 for view-dependent color.
//!
//! Color for direction `d` is `Σ_k basis_k(d) · coeff_k + 0.5`.

use crate::math::Vec3;

pub const MAX_DEGREE: u8 = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const fn coeff_count(degree: u8) -> usize {
    (degree as usize + 1) * (degree as usize + 1)
}

/// Degree-0 coefficient that reproduces `rgb` for every direction.
pub fn rgb_to_dc(rgb: &[f64; 3]) -> [f64; 3] {
    [(rgb[0] - 0.5) / C0, (rgb[1] - 0.5) / C0, (rgb[2] - 0.5) / C0]
}

pub fn dc_to_rgb(dc: &[f64; 3]) -> [f64; 3] {
    [dc[0] * C0 + 0.5, dc[1] * C0 + 0.5, dc[2] * C0 + 0.5]
}

/// Basis values and their gradients with respect to the (unit) direction.
fn basis(degree: u8, d: &Vec3, values: &mut [f64; 16], grads: &mut [Vec3; 16]) {
    let [x, y, z] = *d;
    values[0] = C0;
    grads[0] = [0.0; 3];
    if degree == 0 {
        return;
    }
    values[1] = -C1 * y;
    grads[1] = [0.0, -C1, 0.0];
    values[2] = C1 * z;
    grads[2] = [0.0, 0.0, C1];
    values[3] = -C1 * x;
    grads[3] = [-C1, 0.0, 0.0];
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    values[4] = C2[0] * x * y;
    grads[4] = [C2[0] * y, C2[0] * x, 0.0];
    values[5] = C2[1] * y * z;
    grads[5] = [0.0, C2[1] * z, C2[1] * y];
    values[6] = C2[2] * (2.0 * zz - xx - yy);
    grads[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
    values[7] = C2[3] * x * z;
    grads[7] = [C2[3] * z, 0.0, C2[3] * x];
    values[8] = C2[4] * (xx - yy);
    grads[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    if degree == 2 {
        return;
    }
    values[9] = C3[0] * y * (3.0 * xx - yy);
    grads[9] = [C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    values[10] = C3[1] * x * y * z;
    grads[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
    values[11] = C3[2] * y * (4.0 * zz - xx - yy);
    grads[11] = [C3[2] * -2.0 * x * y, C3[2] * (4.0 * zz - xx - 3.0 * yy), C3[2] * 8.0 * y * z];
    values[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    grads[12] = [C3[3] * -6.0 * x * z, C3[3] * -6.0 * y * z, C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)];
    values[13] = C3[4] * x * (4.0 * zz - xx - yy);
    grads[13] = [C3[4] * (4.0 * zz - 3.0 * xx - yy), C3[4] * -2.0 * x * y, C3[4] * 8.0 * x * z];
    values[14] = C3[5] * z * (xx - yy);
    grads[14] = [C3[5] * 2.0 * x * z, C3[5] * -2.0 * y * z, C3[5] * (xx - yy)];
    values[15] = C3[6] * x * (xx - 3.0 * yy);
    grads[15] = [C3[6] * (3.0 * xx - 3.0 * yy), C3[6] * -6.0 * x * y, 0.0];
}

fn degree_of(coeffs: &[[f64; 3]]) -> u8 {
    match coeffs.len() {
        1 => 0,
        4 => 1,
        9 => 2,
        16 => 3,
        n => panic!("{n} is not a spherical harmonic coefficient count"),
    }
}

/// Evaluates the color of `coeffs` seen along unit direction `dir`.
pub fn eval(coeffs: &[[f64; 3]], dir: &Vec3) -> [f64; 3] {
    let mut values = [0.0; 16];
    let mut grads = [[0.0; 3]; 16];
    basis(degree_of(coeffs), dir, &mut values, &mut grads);
    let mut c = [0.5; 3];
    for (k, coeff) in coeffs.iter().enumerate() {
        for ch in 0..3 {
            c[ch] += values[k] * coeff[ch];
        }
    }
    c
}

/// Backward of [`eval`]: accumulates `dL/dcoeffs` into `d_coeffs` and returns `dL/ddir`.
pub fn eval_backward(coeffs: &[[f64; 3]], dir: &Vec3, d_color: &[f64; 3], d_coeffs: &mut [[f64; 3]]) -> Vec3 {
    let mut values = [0.0; 16];
    let mut grads = [[0.0; 3]; 16];
    basis(degree_of(coeffs), dir, &mut values, &mut grads);
    let mut d_dir = [0.0; 3];
    for (k, coeff) in coeffs.iter().enumerate() {
        let mut s = 0.0;
        for ch in 0..3 {
            d_coeffs[k][ch] += values[k] * d_color[ch];
            s += coeff[ch] * d_color[ch];
        }
        for a in 0..3 {
            d_dir[a] += grads[k][a] * s;
        }
    }
    d_dir
}
