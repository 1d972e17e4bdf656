//! Sobol low-discrepancy sequence for up to four dimensions.
//!
//! Direction numbers follow the Joe–Kuo tables; dimension one is the van
//! der Corput sequence in base 2. Index 0 is the origin.

use crate::{Error, Result};

pub const MAX_DIM: usize = 4;
const BITS: usize = 32;

/// (s, a, m) primitive-polynomial data for dimensions 2..=4.
const JOE_KUO: [(usize, u32, &[u32]); 3] =
    [(1, 0, &[1]), (2, 1, &[1, 3]), (3, 1, &[1, 3, 1])];

fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (j, slot) in v.iter_mut().enumerate() {
            *slot = 1u32 << (31 - j);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[dim - 1];
    for j in 0..s {
        v[j] = m[j] << (31 - j);
    }
    for j in s..BITS {
        v[j] = v[j - s] ^ (v[j - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                v[j] ^= v[j - k];
            }
        }
    }
    v
}

/// Point `index` of the Sobol sequence in [0,1)^dim.
pub fn sobol_point(dim: usize, index: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for d in 0..dim {
        let v = direction_numbers(d);
        let mut x = 0u32;
        let mut i = index;
        let mut j = 0;
        while i != 0 {
            if i & 1 == 1 {
                x ^= v[j];
            }
            i >>= 1;
            j += 1;
        }
        out.push(x as f64 / (1u64 << 32) as f64);
    }
    out
}

/// `n` consecutive Sobol points starting at index `skip`.
pub fn sobol_sample(dim: usize, n: usize, skip: u64) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::Config(format!("sobol dimension {dim} out of range 1..={MAX_DIM}")));
    }
    Ok((0..n as u64).map(|i| sobol_point(dim, skip + i)).collect())
}
