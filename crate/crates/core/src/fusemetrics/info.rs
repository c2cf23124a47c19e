use super::Plane;
use crate::error::{Error, Result};

fn entropy_of_counts(counts: &[u64], total: u64) -> f64 {
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy (bits) of the 256-bin histogram.
pub fn entropy(img: &Plane) -> Result<f64> {
    if img.data.is_empty() {
        return Err(Error::invalid("entropy", "empty image"));
    }
    let mut hist = [0u64; 256];
    for q in img.quantized() {
        hist[q as usize] += 1;
    }
    Ok(entropy_of_counts(&hist, img.data.len() as u64))
}

/// `H(x) + H(y) - H(x, y)` from 256-bin marginal and joint histograms.
pub fn mutual_info_pair(x: &Plane, y: &Plane) -> Result<f64> {
    x.same_shape(y, "mutual_information")?;
    if x.data.is_empty() {
        return Err(Error::invalid("mutual_information", "empty image"));
    }
    let (qx, qy) = (x.quantized(), y.quantized());
    let mut hx = [0u64; 256];
    let mut hy = [0u64; 256];
    let mut joint = vec![0u64; 256 * 256];
    for (&a, &b) in qx.iter().zip(&qy) {
        hx[a as usize] += 1;
        hy[b as usize] += 1;
        joint[a as usize * 256 + b as usize] += 1;
    }
    let n = qx.len() as u64;
    Ok(entropy_of_counts(&hx, n) + entropy_of_counts(&hy, n) - entropy_of_counts(&joint, n))
}

/// Fusion MI: `MI(f, a) + MI(f, b)`.
pub fn mutual_information(f: &Plane, a: &Plane, b: &Plane) -> Result<f64> {
    Ok(mutual_info_pair(f, a)? + mutual_info_pair(f, b)?)
}
