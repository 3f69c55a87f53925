//! Blocked squared-Euclidean distances between rows, computed as
//! `‖a‖² + ‖b‖² − 2a·b` with one GEMM per block pair.

use crate::tensor::gemm;

pub(crate) const BLOCK: usize = 512;

/// Rows centered on their mean (distance-preserving, and it shrinks the norms
/// that the GEMM formulation subtracts).
pub(crate) struct Rows {
    pub n: usize,
    pub d: usize,
    data: Vec<f32>,
    norms: Vec<f32>,
}

impl Rows {
    /// Takes rows of `points` in the given order.
    pub fn new(points: &[f32], d: usize, order: &[usize]) -> Self {
        let n = order.len();
        let mut mean = vec![0.0f64; d];
        for &i in order {
            for (m, &v) in mean.iter_mut().zip(&points[i * d..(i + 1) * d]) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut data = Vec::with_capacity(n * d);
        for &i in order {
            for (t, &v) in points[i * d..(i + 1) * d].iter().enumerate() {
                data.push((v as f64 - mean[t]) as f32);
            }
        }
        let norms = data
            .chunks_exact(d.max(1))
            .map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() as f32)
            .collect();
        Self { n, d, data, norms }
    }

    pub fn num_blocks(&self) -> usize {
        self.n.div_ceil(BLOCK)
    }

    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        b * BLOCK..((b + 1) * BLOCK).min(self.n)
    }

    /// Fills `out` (`|I| × |J|`, row-major) with squared distances between the
    /// rows of blocks `bi` and `bj`.
    pub fn block(&self, bi: usize, bj: usize, out: &mut Vec<f32>) {
        let (ri, rj) = (self.block_range(bi), self.block_range(bj));
        let (ni, nj, d) = (ri.len(), rj.len(), self.d);
        out.clear();
        out.resize(ni * nj, 0.0);
        gemm(
            ni,
            d,
            nj,
            &self.data[ri.start * d..ri.end * d],
            false,
            &self.data[rj.start * d..rj.end * d],
            true,
            out,
            0.0,
        );
        for a in 0..ni {
            let na = self.norms[ri.start + a];
            let row = &mut out[a * nj..(a + 1) * nj];
            for (b, v) in row.iter_mut().enumerate() {
                *v = (na + self.norms[rj.start + b] - 2.0 * *v).max(0.0);
            }
        }
        if bi == bj {
            // a point's distance to itself is exactly zero
            for a in 0..ni {
                out[a * nj + a] = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn matches_direct_differences() {
        let mut rng = Rng::new(4);
        let (n, d) = (700, 13);
        let pts: Vec<f32> = (0..n * d).map(|_| rng.normal() as f32 * 3.0 + 5.0).collect();
        let order: Vec<usize> = (0..n).collect();
        let rows = Rows::new(&pts, d, &order);
        let mut buf = Vec::new();
        rows.block(0, 1, &mut buf);
        let nj = rows.block_range(1).len();
        for a in [0usize, 17, 511] {
            for b in [0usize, 5, nj - 1] {
                let j = BLOCK + b;
                let exact: f64 = (0..d)
                    .map(|t| (pts[a * d + t] as f64 - pts[j * d + t] as f64).powi(2))
                    .sum();
                assert!((buf[a * nj + b] as f64 - exact).abs() < 1e-3 * exact.max(1.0));
            }
        }
    }
}
