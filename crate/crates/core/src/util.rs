//! Seed fan-out and small numeric helpers shared across modules.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a child RNG from a root seed and a label.
///
/// All randomness in a command flows from one `--seed`; sub-streams are
/// split with an FNV-1a hash of the label so that adding a consumer never
/// perturbs the streams of existing ones.
pub fn rng_from(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_label(seed, label))
}

/// FNV-1a over the seed bytes followed by the label bytes.
pub fn hash_label(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Invert a small dense matrix by Gauss-Jordan elimination with partial
/// pivoting. Returns `None` when a pivot falls below `1e-12`.
pub fn invert_small(a: &ndarray::Array2<f64>) -> Option<ndarray::Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut aug = ndarray::Array2::<f64>::zeros((n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            aug[[i, j]] = a[[i, j]];
        }
        aug[[i, n + i]] = 1.0;
    }
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if aug[[r, col]].abs() > aug[[piv, col]].abs() {
                piv = r;
            }
        }
        if aug[[piv, col]].abs() < 1e-12 {
            return None;
        }
        if piv != col {
            for k in 0..2 * n {
                aug.swap([col, k], [piv, k]);
            }
        }
        let p = aug[[col, col]];
        for k in 0..2 * n {
            aug[[col, k]] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[[r, col]];
                if f != 0.0 {
                    for k in 0..2 * n {
                        aug[[r, k]] -= f * aug[[col, k]];
                    }
                }
            }
        }
    }
    Some(ndarray::Array2::from_shape_fn((n, n), |(i, j)| {
        aug[[i, n + j]]
    }))
}

/// log|det| of a small dense matrix via LU with partial pivoting.
/// Returns `None` for a numerically singular matrix.
pub fn log_abs_det(a: &ndarray::Array2<f64>) -> Option<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut acc = 0.0;
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[[r, col]].abs() > m[[piv, col]].abs() {
                piv = r;
            }
        }
        let p = m[[piv, col]].abs();
        if p < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                m.swap([col, k], [piv, k]);
            }
        }
        acc += p.ln();
        let d = m[[col, col]];
        for r in col + 1..n {
            let f = m[[r, col]] / d;
            if f != 0.0 {
                for k in col..n {
                    m[[r, k]] -= f * m[[col, k]];
                }
            }
        }
    }
    Some(acc)
}
