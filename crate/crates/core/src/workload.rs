//! Synthetic traces: log-normal request lengths, Poisson arrivals, and the
//! CSV trace format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::request::Request;

/// Standard normal quantile at 0.9.
const Z90: f64 = 1.281_551_565_544_600_4;

/// Log-normal length distribution given by its median and 90th percentile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDistribution {
    pub median: f64,
    pub p90: f64,
}

impl LengthDistribution {
    pub fn new(median: f64, p90: f64) -> Result<Self> {
        let d = Self { median, p90 };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.median.is_finite() && self.median > 0.0 && self.p90.is_finite() && self.p90 >= self.median) {
            return Err(Error::InvalidConfig(format!(
                "length distribution needs 0 < median <= p90 (got {} / {})",
                self.median, self.p90
            )));
        }
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        self.median.ln()
    }

    pub fn sigma(&self) -> f64 {
        (self.p90.ln() - self.median.ln()) / Z90
    }

    fn sampler(&self) -> LogNormal<f64> {
        LogNormal::new(self.mu(), self.sigma()).expect("validated log-normal parameters")
    }
}

/// Prompt/output length model of one workload, with the total-length cap
/// applied by rejection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub name: String,
    pub prompt: LengthDistribution,
    pub output: LengthDistribution,
    pub max_total: u64,
}

impl Dataset {
    /// Chat-style workload. Accepted requests have prompt median ~1730 and P90
    /// ~5696, output median ~415 and P90 ~834, totals at most 8192. The prompt
    /// parameters are pre-filter values; the cap trims most of their tail.
    pub fn openchat() -> Self {
        Self {
            name: "openchat".into(),
            prompt: LengthDistribution { median: 3480.0, p90: 30900.0 },
            output: LengthDistribution { median: 415.0, p90: 840.0 },
            max_total: 8192,
        }
    }

    /// Summarization workload. Accepted requests have prompt median ~7059 and
    /// P90 ~12985, output median ~208 and P90 ~371, totals at most 16384.
    pub fn arxiv() -> Self {
        Self {
            name: "arxiv".into(),
            prompt: LengthDistribution { median: 7905.0, p90: 18350.0 },
            output: LengthDistribution { median: 208.0, p90: 371.0 },
            max_total: 16384,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "openchat" => Some(Self::openchat()),
            "arxiv" => Some(Self::arxiv()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prompt.validate()?;
        self.output.validate()?;
        if self.max_total < 2 {
            return Err(Error::InvalidConfig("max_total must be >= 2".into()));
        }
        Ok(())
    }
}

fn draw_length<R: Rng + ?Sized>(d: &LogNormal<f64>, rng: &mut R) -> u64 {
    (d.sample(rng).round() as u64).max(1)
}

/// Draws one `(prompt, output)` pair, redrawing both until their total fits
/// `max_total`.
pub fn sample_request<R: Rng + ?Sized>(
    prompt: &LengthDistribution,
    output: &LengthDistribution,
    max_total: u64,
    rng: &mut R,
) -> (u64, u64) {
    let (p, o) = (prompt.sampler(), output.sampler());
    loop {
        let pt = draw_length(&p, rng);
        let ot = draw_length(&o, rng);
        if pt + ot <= max_total {
            return (pt, ot);
        }
    }
}

/// Cumulative arrival times in milliseconds of a Poisson process at `qps`.
pub fn poisson_arrivals<R: Rng + ?Sized>(qps: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(qps.is_finite() && qps > 0.0) {
        return Err(Error::InvalidConfig(format!("qps must be > 0 (got {qps})")));
    }
    let gap = Exp::new(qps / 1000.0).expect("positive rate");
    let mut t = 0.0;
    Ok((0..n)
        .map(|_| {
            t += gap.sample(rng);
            t
        })
        .collect())
}

/// One row of a trace file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_ms: f64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

/// Trace of `n` requests arriving at rate 1 qps. Lengths and arrival gaps
/// come from separate streams of the same seed, so the lengths do not depend
/// on the rate and [`scale_arrivals`] yields the same requests at any load.
pub fn unit_rate_trace(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<TraceRecord>> {
    dataset.validate()?;
    let mut lengths = ChaCha8Rng::seed_from_u64(seed);
    lengths.set_stream(1);
    let mut gaps = ChaCha8Rng::seed_from_u64(seed);
    gaps.set_stream(2);
    let arrivals = poisson_arrivals(1.0, n, &mut gaps)?;
    Ok(arrivals
        .into_iter()
        .map(|arrival_ms| {
            let (prompt_tokens, output_tokens) =
                sample_request(&dataset.prompt, &dataset.output, dataset.max_total, &mut lengths);
            TraceRecord { arrival_ms, prompt_tokens, output_tokens }
        })
        .collect())
}

/// Compresses a unit-rate trace to `qps`.
pub fn scale_arrivals(trace: &[TraceRecord], qps: f64) -> Vec<TraceRecord> {
    trace.iter().map(|r| TraceRecord { arrival_ms: r.arrival_ms / qps, ..*r }).collect()
}

pub fn generate_trace(dataset: &Dataset, qps: f64, n: usize, seed: u64) -> Result<Vec<TraceRecord>> {
    if !(qps.is_finite() && qps > 0.0) {
        return Err(Error::InvalidConfig(format!("qps must be > 0 (got {qps})")));
    }
    Ok(scale_arrivals(&unit_rate_trace(dataset, n, seed)?, qps))
}

/// Request records for the simulator; arrivals are rounded to microseconds.
pub fn to_requests(trace: &[TraceRecord]) -> Result<Vec<Request>> {
    trace
        .iter()
        .enumerate()
        .map(|(i, r)| Request::new(i as u64, (r.arrival_ms * 1000.0).round() as u64, r.prompt_tokens, r.output_tokens))
        .collect()
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    if headers.iter().collect::<Vec<_>>() != ["arrival_ms", "prompt_tokens", "output_tokens"] {
        return Err(Error::Parse {
            line: 1,
            message: "expected header arrival_ms,prompt_tokens,output_tokens".into(),
        });
    }
    let mut out = Vec::new();
    let mut last = 0.0;
    for row in rdr.deserialize::<TraceRecord>() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = out.len() as u64 + 2;
        let bad = |message: String| Err(Error::Parse { line, message });
        if row.prompt_tokens == 0 || row.output_tokens == 0 {
            return bad("prompt_tokens and output_tokens must be >= 1".into());
        }
        if !(row.arrival_ms.is_finite() && row.arrival_ms >= last) {
            return bad(format!("arrival_ms must be finite and non-decreasing (got {})", row.arrival_ms));
        }
        last = row.arrival_ms;
        out.push(row);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(trace: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    if trace.is_empty() {
        w.write_record(["arrival_ms", "prompt_tokens", "output_tokens"]).map_err(csv_io)?;
    }
    for r in trace {
        w.serialize(r).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    read_trace(std::fs::File::open(path)?)
}

pub fn save_trace(trace: &[TraceRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}
