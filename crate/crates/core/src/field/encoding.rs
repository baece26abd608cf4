//! Sinusoidal frequency encoding.

use std::f64::consts::PI;

pub fn encoded_len(levels: usize) -> usize {
    3 * (2 * levels + 1)
}

/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`.
///
/// The identity block comes first, then for every level the sines of the three
/// components followed by their cosines.
pub fn encode_position(x: [f64; 3], levels: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_len(levels)];
    encode_into(x, levels, &mut out);
    out
}

pub fn encode_into(x: [f64; 3], levels: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), encoded_len(levels));
    out[..3].copy_from_slice(&x);
    let mut freq = PI;
    for l in 0..levels {
        let base = 3 + 6 * l;
        for c in 0..3 {
            let (s, co) = (freq * x[c]).sin_cos();
            out[base + c] = s;
            out[base + 3 + c] = co;
        }
        freq *= 2.0;
    }
}

/// Chain rule through [`encode_into`]: accumulates `d(loss)/dx` from the
/// feature gradient `grad` evaluated at the already-encoded `features`.
pub fn encode_backward(features: &[f64], grad: &[f64], levels: usize) -> [f64; 3] {
    let mut dx = [grad[0], grad[1], grad[2]];
    let mut freq = PI;
    for l in 0..levels {
        let base = 3 + 6 * l;
        for c in 0..3 {
            let s = features[base + c];
            let co = features[base + 3 + c];
            dx[c] += freq * (co * grad[base + c] - s * grad[base + 3 + c]);
        }
        freq *= 2.0;
    }
    dx
}
