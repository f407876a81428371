//! Wall-clock timing of the selective scan.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::rng::named_rng;
use crate::ssm::{selective_scan, ScanInputs, SsmCore, SsmError};
use crate::tensor::Tensor;

/// Medians of interleaved timings at `len` and `2·len`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub len: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub iters: usize,
    pub median: Duration,
    pub median_double: Duration,
}

impl ScalingReport {
    /// `time(2L) / time(L)`.
    pub fn ratio(&self) -> f64 {
        self.median_double.as_secs_f64() / self.median.as_secs_f64().max(f64::MIN_POSITIVE)
    }

    pub fn tokens_per_sec(&self) -> f64 {
        self.len as f64 / self.median.as_secs_f64().max(f64::MIN_POSITIVE)
    }

    pub fn is_linear(&self, lo: f64, hi: f64) -> bool {
        (lo..=hi).contains(&self.ratio())
    }
}

/// Accepted band for [`ScalingReport::ratio`].
pub const LINEAR_RATIO_BAND: (f64, f64) = (1.6, 2.6);

fn random_problem(len: usize, d_inner: usize, d_state: usize, seed: u64) -> Result<(SsmCore<f32>, ScanInputs<f32>), SsmError> {
    let mut rng = named_rng(seed, "bench.scan");
    let mut t = |rows: usize, cols: usize, lo: f32, hi: f32| {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(vec![rows, cols], data).expect("shape matches")
    };
    let inp = ScanInputs::new(
        t(len, d_inner, -1.0, 1.0),
        t(len, d_inner, 0.001, 0.1),
        t(len, d_state, -1.0, 1.0),
        t(len, d_state, -1.0, 1.0),
    )?;
    Ok((SsmCore::s4d(d_inner, d_state), inp))
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

/// Times `iters` f32 scans at each length, alternating lengths so drift in
/// machine load affects both alike.
pub fn scan_scaling(len: usize, d_inner: usize, d_state: usize, iters: usize, seed: u64) -> Result<ScalingReport, SsmError> {
    let iters = iters.max(1);
    let short = random_problem(len, d_inner, d_state, seed)?;
    let long = random_problem(2 * len, d_inner, d_state, seed)?;
    let time = |(core, inp): &(SsmCore<f32>, ScanInputs<f32>)| -> Result<Duration, SsmError> {
        let t0 = Instant::now();
        std::hint::black_box(selective_scan(core, inp)?);
        Ok(t0.elapsed())
    };
    time(&short)?;
    time(&long)?;
    let (mut a, mut b) = (Vec::with_capacity(iters), Vec::with_capacity(iters));
    for _ in 0..iters {
        a.push(time(&short)?);
        b.push(time(&long)?);
    }
    Ok(ScalingReport {
        len,
        d_inner,
        d_state,
        iters,
        median: median(a),
        median_double: median(b),
    })
}
