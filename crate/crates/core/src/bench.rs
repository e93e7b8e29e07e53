//! Throughput accounting and the size/time regression that separates
//! per-byte cost from fixed overhead.

use crate::error::{Error, Result};

/// `t_total = data * inverse_throughput + overhead`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadFit {
    /// Seconds per unit of data.
    pub inverse_throughput: f64,
    /// Seconds; may come out negative.
    pub overhead: f64,
}

impl OverheadFit {
    pub fn throughput(&self) -> f64 {
        1.0 / self.inverse_throughput
    }

    pub fn predict(&self, data: f64) -> f64 {
        data * self.inverse_throughput + self.overhead
    }
}

/// Ordinary least squares over `(data, t_total)` points.
pub fn fit_overhead(rows: &[(f64, f64)]) -> Result<OverheadFit> {
    if rows.len() < 2 {
        return Err(Error::DegenerateInput);
    }
    let n = rows.len() as f64;
    let mx = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let my = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let sxx: f64 = rows.iter().map(|r| (r.0 - mx) * (r.0 - mx)).sum();
    let sxy: f64 = rows.iter().map(|r| (r.0 - mx) * (r.1 - my)).sum();
    if sxx == 0.0 || !sxx.is_finite() {
        return Err(Error::DegenerateInput);
    }
    let slope = sxy / sxx;
    Ok(OverheadFit {
        inverse_throughput: slope,
        overhead: my - slope * mx,
    })
}

/// Bytes moved per second of load time; zero for an empty step.
pub fn perceived_throughput(bytes: u64, seconds: f64) -> f64 {
    if bytes == 0 || seconds <= 0.0 {
        0.0
    } else {
        bytes as f64 / seconds
    }
}

pub const CSV_HEADER: &str = "step,bytes,t_load_seconds,perceived_throughput_bytes_per_s";

pub fn csv_row(step: u64, bytes: u64, seconds: f64) -> String {
    format!(
        "{step},{bytes},{seconds:.9},{:.3}",
        perceived_throughput(bytes, seconds)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_points_give_the_line_through_them() {
        let f = fit_overhead(&[(1.0, 3.0), (3.0, 7.0)]).unwrap();
        assert!((f.inverse_throughput - 2.0).abs() < 1e-12);
        assert!((f.overhead - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_sizes_are_degenerate() {
        assert_eq!(fit_overhead(&[(2.0, 1.0), (2.0, 5.0)]), Err(Error::DegenerateInput));
        assert_eq!(fit_overhead(&[(2.0, 1.0)]), Err(Error::DegenerateInput));
    }

    #[test]
    fn zero_byte_rows_report_zero_throughput() {
        assert_eq!(perceived_throughput(0, 0.5), 0.0);
        assert_eq!(csv_row(3, 0, 0.25), "3,0,0.250000000,0.000");
        assert_eq!(perceived_throughput(1 << 20, 0.5), 2097152.0);
    }

    proptest! {
        #[test]
        fn exact_lines_are_recovered(a in 0.01f64..10.0, b in -5.0f64..5.0, xs in prop::collection::btree_set(0u32..1000, 2..30)) {
            let rows: Vec<(f64, f64)> = xs.iter().map(|&x| (f64::from(x) / 10.0, a * f64::from(x) / 10.0 + b)).collect();
            let f = fit_overhead(&rows).unwrap();
            prop_assert!((f.inverse_throughput - a).abs() < 1e-9 * a.max(1.0));
            prop_assert!((f.overhead - b).abs() < 1e-7);
        }
    }
}
