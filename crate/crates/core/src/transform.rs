//! Descriptor normalization and the modified Bhattacharyya kernel.
//!
//! Raw FV and FC descriptors go through signed square root, L2 normalization
//! and then the kernel's explicit feature map, which is the same signed square
//! root again. After that a linear SVM on the mapped vectors is the kernel
//! machine for `K(x, y) = sum_i sign(x_i y_i) sqrt(|x_i y_i|)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("vector lengths differ: {left} vs {right}")]
pub struct LengthMismatch {
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DescriptorKind {
    #[serde(rename = "FV")]
    Fv,
    #[serde(rename = "FC")]
    Fc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub kind: DescriptorKind,
    /// True when the vector was unit length before the feature map.
    pub normalized: bool,
}

#[inline]
fn signed_sqrt(x: f64) -> f64 {
    x.signum() * x.abs().sqrt()
}

fn signed_sqrt_map(v: &[f64]) -> Vec<f64> {
    // signum(0.0) is 1.0, but sqrt(0) keeps zeros at zero.
    v.iter()
        .map(|&x| if x == 0.0 { 0.0 } else { signed_sqrt(x) })
        .collect()
}

/// Elementwise sign(x) sqrt(|x|).
pub fn power_normalize(v: &[f64]) -> Vec<f64> {
    signed_sqrt_map(v)
}

/// The kernel's feature map; numerically the same as `power_normalize`.
pub fn phi_map(v: &[f64]) -> Vec<f64> {
    signed_sqrt_map(v)
}

/// Scales to unit L2 norm. The flag is true for a zero vector, which is returned unchanged.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, bool) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        (v.iter().map(|x| x / norm).collect(), false)
    } else {
        (v.to_vec(), true)
    }
}

pub fn bhattacharyya_kernel(x: &[f64], y: &[f64]) -> Result<f64, LengthMismatch> {
    if x.len() != y.len() {
        return Err(LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    Ok(x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let p = a * b;
            if p == 0.0 {
                0.0
            } else {
                signed_sqrt(p)
            }
        })
        .sum())
}

/// power -> L2 -> phi.
pub fn prepare_descriptor(raw: &[f64], kind: DescriptorKind) -> Descriptor {
    let (unit, degenerate) = l2_normalize(&power_normalize(raw));
    if degenerate {
        log::warn!("zero {kind:?} descriptor left unnormalized");
    }
    Descriptor {
        values: phi_map(&unit),
        kind,
        normalized: !degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_examples() {
        assert_eq!(power_normalize(&[4.0, -9.0, 0.0]), vec![2.0, -3.0, 0.0]);
        assert_eq!(power_normalize(&[1.0, -1.0]), vec![1.0, -1.0]);
        assert_eq!(power_normalize(&[0.25]), vec![0.5]);
        // negative zero stays a zero
        assert_eq!(power_normalize(&[-0.0])[0], 0.0);
    }

    #[test]
    fn l2_examples() {
        let (v, flag) = l2_normalize(&[3.0, 4.0]);
        assert!(!flag);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let (v, flag) = l2_normalize(&[0.0, 1.0, 0.0]);
        assert_eq!(v, vec![0.0, 1.0, 0.0]);
        assert!(!flag);
        let (v, flag) = l2_normalize(&[0.0, 0.0]);
        assert_eq!(v, vec![0.0, 0.0]);
        assert!(flag);
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_map(&[1.0, 0.0, -1.0]), vec![1.0, 0.0, -1.0]);
        assert!((phi_map(&[0.49])[0] - 0.7).abs() < 1e-15);
        assert_eq!(phi_map(&phi_map(&[16.0])), vec![2.0]);
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(bhattacharyya_kernel(&[1.0, -4.0], &[9.0, 1.0]), Ok(1.0));
        let x = [2.0, -3.0, 0.5, 0.0];
        let k = bhattacharyya_kernel(&x, &x).unwrap();
        assert!((k - 5.5).abs() < 1e-12);
        assert_eq!(
            bhattacharyya_kernel(&[1.0, 0.0, 2.0], &[0.0, 5.0, 0.0]),
            Ok(0.0)
        );
        assert_eq!(
            bhattacharyya_kernel(&[1.0], &[1.0, 2.0]),
            Err(LengthMismatch { left: 1, right: 2 })
        );
    }

    #[test]
    fn prepare_examples() {
        let d = prepare_descriptor(&[1.0, 0.0, 0.0, 0.0], DescriptorKind::Fv);
        assert_eq!(d.values, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(d.normalized);
        let d = prepare_descriptor(&[4.0, 0.0], DescriptorKind::Fc);
        assert_eq!(d.values, vec![1.0, 0.0]);
        let d = prepare_descriptor(&[0.0; 3], DescriptorKind::Fc);
        assert!(!d.normalized);
        assert_eq!(d.values, vec![0.0; 3]);
    }
}
