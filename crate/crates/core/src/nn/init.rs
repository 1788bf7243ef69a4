//! Weight initialization.

use rand::Rng;
use rand_distr::StandardNormal;

use super::mat::Mat;

/// `rows × cols` matrix with orthonormal rows or columns (whichever is fewer),
/// multiplied by `gain`.
pub fn orthogonal<R: Rng>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Mat {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // m orthonormal vectors of length n via modified Gram-Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = Mat::zeros(rows, cols);
    for (j, b) in basis.iter().enumerate() {
        for (i, x) in b.iter().enumerate() {
            if rows >= cols {
                out.set(i, j, gain * x);
            } else {
                out.set(j, i, gain * x);
            }
        }
    }
    out
}
