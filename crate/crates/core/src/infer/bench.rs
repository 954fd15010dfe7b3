use std::hint::black_box;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::packed::{packed_gemm, PackedMatrix};
use crate::error::{Error, Result};

/// A GEMM problem `[m×k] · [k×n]`: `m` output channels, `k` patch length,
/// `n` output positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GemmSize {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl GemmSize {
    pub fn new(m: usize, k: usize, n: usize) -> Self {
        GemmSize { m, k, n }
    }

    pub fn macs(&self) -> f64 {
        self.m as f64 * self.k as f64 * self.n as f64
    }
}

/// Parse `MxKxN`.
impl std::str::FromStr for GemmSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid("gemm size", format!("{s:?} is not MxKxN")))?;
        match dims[..] {
            [m, k, n] if m > 0 && k > 0 && n > 0 => Ok(GemmSize { m, k, n }),
            _ => Err(Error::invalid("gemm size", format!("{s:?} is not MxKxN with positive sizes"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPath {
    /// Bitplane popcount GEMM, including packing of the activation operand.
    Packed,
    /// Textbook triple loop in f32.
    NaiveFloat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub path: BenchPath,
    pub median_ms: f64,
    pub gmacs: f64,
    pub samples: usize,
}

/// Default shape: a 3×3 conv with 256 in/out channels on a 14×14 map.
pub const DEFAULT_SIZE: GemmSize = GemmSize { m: 256, k: 2304, n: 196 };

/// Each timing sample repeats the kernel until at least this much time
/// has passed.
const MIN_SAMPLE: Duration = Duration::from_millis(5);

/// `c[i][j] = sum_p a[i][p] * b[j][p]`, with `b` stored `n×k`.
pub fn naive_float_gemm(a: &[f32], b: &[f32], size: GemmSize) -> Vec<f32> {
    let GemmSize { m, k, n } = size;
    let mut c = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0f32;
            for p in 0..k {
                acc += a[i * k + p] * b[j * k + p];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Pack the `n×k` activation operand, multiply against pre-packed weights
/// and scale.
pub fn packed_float_gemm(a: &PackedMatrix, b: &[i8], scale: f32, size: GemmSize) -> Result<Vec<f32>> {
    let b = PackedMatrix::pack(size.n, size.k, b)?;
    Ok(packed_gemm(a, &b)?.into_iter().map(|v| scale * v as f32).collect())
}

fn random_trits(len: usize, rng: &mut ChaCha8Rng) -> Vec<i8> {
    (0..len).map(|_| rng.random_range(-1i8..=1)).collect()
}

fn median_ms(samples: usize, mut run: impl FnMut()) -> f64 {
    let mut times: Vec<f64> = (0..samples)
        .map(|_| {
            let start = Instant::now();
            let mut iters = 0u32;
            while start.elapsed() < MIN_SAMPLE || iters == 0 {
                run();
                iters += 1;
            }
            start.elapsed().as_secs_f64() * 1e3 / iters as f64
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2.0
    }
}

/// Time both paths on random ternary operands, single-threaded.
pub fn bench_kernels(sizes: &[GemmSize], samples: usize) -> Result<Vec<BenchRow>> {
    if samples == 0 {
        return Err(Error::invalid("bench_kernels", "need at least one sample"));
    }
    let mut rows = Vec::new();
    for &size in sizes {
        let GemmSize { m, k, n } = size;
        if m == 0 || k == 0 || n == 0 {
            return Err(Error::invalid("bench_kernels", format!("empty size {size:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_trits(m * k, &mut rng);
        let b = random_trits(n * k, &mut rng);
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let packed_a = PackedMatrix::pack(m, k, &a)?;

        let want = naive_float_gemm(&af, &bf, size);
        if packed_float_gemm(&packed_a, &b, 1.0, size)? != want {
            return Err(Error::invalid("bench_kernels", format!("paths disagree at {size:?}")));
        }

        let packed = median_ms(samples, || {
            black_box(packed_float_gemm(black_box(&packed_a), black_box(&b), 1.0, size).expect("validated"));
        });
        let naive = median_ms(samples, || {
            black_box(naive_float_gemm(black_box(&af), black_box(&bf), size));
        });
        for (path, ms) in [(BenchPath::Packed, packed), (BenchPath::NaiveFloat, naive)] {
            rows.push(BenchRow {
                m,
                k,
                n,
                path,
                median_ms: ms,
                gmacs: size.macs() / (ms * 1e6),
                samples,
            });
        }
    }
    Ok(rows)
}

/// Naive over packed median time for `size`, if both rows are present.
pub fn speedup(rows: &[BenchRow], size: GemmSize) -> Option<f64> {
    let find = |path| {
        rows.iter()
            .find(|r| r.path == path && (r.m, r.k, r.n) == (size.m, size.k, size.n))
            .map(|r| r.median_ms)
    };
    Some(find(BenchPath::NaiveFloat)? / find(BenchPath::Packed)?)
}

pub fn write_bench_csv<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<bench csv>", e))?;
    Ok(())
}
