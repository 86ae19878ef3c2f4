//! Wall-clock timing of batched operators.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use gradvision::filters::{gaussian_blur2d, sobel_edges};
use gradvision::geometry::{get_rotation_matrix2d, warp_perspective_const};
use gradvision::{Error, Result, Tape, Tensor, Var};

pub const WARMUP: usize = 3;
/// Bytes streamed through before every timed run so the input is not left
/// in core-private caches by the previous run.
pub const EVICT_BYTES: usize = 8 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchOp {
    Sobel,
    Gaussian,
    Warp,
}

impl FromStr for BenchOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sobel" => Ok(Self::Sobel),
            "gaussian" => Ok(Self::Gaussian),
            "warp" => Ok(Self::Warp),
            _ => Err(Error::Parameter(format!("unknown benchmark op {s:?} (expected sobel, gaussian or warp)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub batch: usize,
    pub median_ms: f64,
    pub per_sample_ms: f64,
}

fn run(op: BenchOp, x: &Var<f32>) -> Result<()> {
    let (n, _, h, w) = x.value().dims4()?;
    let out = match op {
        BenchOp::Sobel => sobel_edges(x)?,
        BenchOp::Gaussian => gaussian_blur2d(x, (5, 5), (1.5, 1.5))?,
        BenchOp::Warp => {
            let c = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            let mut m = get_rotation_matrix2d(c, 30.0, 1.0)?.fixed_resize::<3, 3>(0.0);
            m[(2, 2)] = 1.0;
            warp_perspective_const(x, &vec![m; n], (h, w))?
        }
    };
    std::hint::black_box(out.value());
    Ok(())
}

fn evict(scratch: &mut [u64]) {
    for (i, v) in scratch.iter_mut().enumerate() {
        *v = v.wrapping_add(i as u64);
    }
    std::hint::black_box(&scratch[..]);
}

/// Median time of `op` on `B×3×size×size` inputs for each batch size,
/// measured over `repeats` runs after [`WARMUP`] untimed ones. Each timed
/// run starts after [`EVICT_BYTES`] of unrelated memory traffic, so small
/// batches are not timed against a cache still holding their input.
pub fn bench(op: BenchOp, batches: &[usize], size: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(Error::Parameter(format!("repeats must be at least 3, got {repeats}")));
    }
    let mut scratch = vec![0u64; EVICT_BYTES / 8];
    let mut sorted = batches.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted
        .into_iter()
        .map(|batch| {
            let input = Tape::new().constant(Tensor::from_fn(&[batch, 3, size, size], |i| ((i[0] * 7 + i[1] * 3 + i[2] * 5 + i[3]) % 17) as f32 / 16.0));
            for _ in 0..WARMUP {
                run(op, &input)?;
            }
            let mut times = (0..repeats)
                .map(|_| {
                    evict(&mut scratch);
                    let t = Instant::now();
                    run(op, &input)?;
                    Ok(t.elapsed().as_secs_f64() * 1e3)
                })
                .collect::<Result<Vec<f64>>>()?;
            times.sort_by(f64::total_cmp);
            let median_ms = if repeats % 2 == 1 { times[repeats / 2] } else { (times[repeats / 2 - 1] + times[repeats / 2]) / 2.0 };
            Ok(BenchRow { batch, median_ms, per_sample_ms: median_ms / batch as f64 })
        })
        .collect()
}

pub fn write_csv(mut w: impl Write, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "batch,median_ms,per_sample_ms")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.batch, r.median_ms, r.per_sample_ms)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_run_writes_csv() {
        let rows = bench(BenchOp::Sobel, &[4, 1, 2], 16, 3).unwrap();
        assert_eq!(rows.iter().map(|r| r.batch).collect::<Vec<_>>(), vec![1, 2, 4]);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "batch,median_ms,per_sample_ms");
        assert_eq!(lines.len(), 4);
        for (line, r) in lines[1..].iter().zip(&rows) {
            assert_eq!(line.split(',').count(), 3);
            assert!((r.per_sample_ms * r.batch as f64 - r.median_ms).abs() < 1e-9);
        }
    }

    #[test]
    fn every_op_runs() {
        for op in ["sobel", "gaussian", "warp"] {
            assert_eq!(bench(op.parse().unwrap(), &[1], 8, 3).unwrap().len(), 1);
        }
        assert!("canny".parse::<BenchOp>().is_err());
    }

    #[test]
    fn too_few_repeats() {
        assert!(matches!(bench(BenchOp::Sobel, &[1], 8, 2), Err(Error::Parameter(_))));
    }
}
