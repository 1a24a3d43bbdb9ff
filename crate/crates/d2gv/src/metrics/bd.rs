//! Bjontegaard deltas between rate-distortion curves.
//!
//! Both deltas interpolate piecewise-cubically (monotone Hermite, i.e.
//! PCHIP) and integrate over the overlapping range:
//! - BD-rate: log10(rate) as a function of quality; the mean log-rate gap is
//!   mapped back through `10^x - 1` to a percentage at equal quality.
//! - BD-PSNR: quality as a function of log10(rate); the mean gap is the dB
//!   difference at equal rate.

use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BdError {
    #[error("RD curve needs at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("rates must be strictly increasing and positive")]
    BadRates,
    #[error("qualities must be finite")]
    BadQuality,
    #[error("BD-rate needs qualities strictly increasing with rate")]
    NonMonotonicQuality,
    #[error("curves do not overlap")]
    NoOverlap,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Rate-quality samples sorted by strictly increasing rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    /// (rate, quality-dB) pairs; rate units are the caller's (bpp or bytes)
    pub points: Vec<(f64, f64)>,
}

impl RdCurve {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self, BdError> {
        if points.len() < 2 {
            return Err(BdError::TooFewPoints {
                need: 2,
                got: points.len(),
            });
        }
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite rates"));
        for w in points.windows(2) {
            if !(w[0].0 > 0.0 && w[1].0 > w[0].0) {
                return Err(BdError::BadRates);
            }
        }
        if points.iter().any(|p| !p.1.is_finite()) {
            return Err(BdError::BadQuality);
        }
        Ok(Self { points })
    }

    /// Parse `rate,quality` rows; a first line that does not parse as two
    /// numbers is treated as a header.
    pub fn read_csv(path: &Path) -> Result<Self, BdError> {
        let file = std::fs::File::open(path)?;
        let mut points = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let parse = |s: Option<&str>| s.and_then(|v| v.trim().parse::<f64>().ok());
            match (parse(cols.next()), parse(cols.next())) {
                (Some(r), Some(q)) => points.push((r, q)),
                _ if i == 0 => continue, // header
                _ => {
                    return Err(BdError::Parse {
                        line: i + 1,
                        msg: line.to_string(),
                    })
                }
            }
        }
        Self::new(points)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), BdError> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "rate,quality_db")?;
        for (r, q) in &self.points {
            writeln!(f, "{r},{q}")?;
        }
        Ok(())
    }
}

/// Fritsch-Carlson monotone cubic Hermite slopes.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
    let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut m = vec![0.0; n];
    if n == 2 {
        m[0] = d[0];
        m[1] = d[0];
        return m;
    }
    for i in 1..n - 1 {
        if d[i - 1] * d[i] <= 0.0 {
            m[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
        }
    }
    let end_slope = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let mut s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            s = 0.0;
        } else if d0 * d1 < 0.0 && s.abs() > 3.0 * d0.abs() {
            s = 3.0 * d0;
        }
        s
    };
    m[0] = end_slope(h[0], h[1], d[0], d[1]);
    m[n - 1] = end_slope(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    m
}

/// Definite integral of the PCHIP interpolant over `[a, b]` (inside the knot
/// range). Each Hermite segment integrates in closed form.
fn pchip_integrate(x: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    let m = pchip_slopes(x, y);
    let mut total = 0.0;
    for i in 0..x.len() - 1 {
        let (x0, x1) = (x[i], x[i + 1]);
        let lo = a.max(x0);
        let hi = b.min(x1);
        if lo >= hi {
            continue;
        }
        let h = x1 - x0;
        let t0 = (lo - x0) / h;
        let t1 = (hi - x0) / h;
        // antiderivatives of the Hermite basis on [0, 1]
        let i00 = |t: f64| 0.5 * t.powi(4) - t.powi(3) + t;
        let i10 = |t: f64| 0.25 * t.powi(4) - (2.0 / 3.0) * t.powi(3) + 0.5 * t * t;
        let i01 = |t: f64| -0.5 * t.powi(4) + t.powi(3);
        let i11 = |t: f64| 0.25 * t.powi(4) - t.powi(3) / 3.0;
        total += h
            * (y[i] * (i00(t1) - i00(t0))
                + h * m[i] * (i10(t1) - i10(t0))
                + y[i + 1] * (i01(t1) - i01(t0))
                + h * m[i + 1] * (i11(t1) - i11(t0)));
    }
    total
}

fn mean_gap(
    test_x: &[f64],
    test_y: &[f64],
    anchor_x: &[f64],
    anchor_y: &[f64],
) -> Result<f64, BdError> {
    let lo = test_x[0].max(anchor_x[0]);
    let hi = test_x[test_x.len() - 1].min(anchor_x[anchor_x.len() - 1]);
    if !(hi > lo) {
        return Err(BdError::NoOverlap);
    }
    let it = pchip_integrate(test_x, test_y, lo, hi);
    let ia = pchip_integrate(anchor_x, anchor_y, lo, hi);
    Ok((it - ia) / (hi - lo))
}

/// `(BD-rate %, BD-PSNR dB)` of `test` against `anchor`. Negative BD-rate
/// means the test curve needs less rate at equal quality; positive BD-PSNR
/// means it gains quality at equal rate. Needs >= 4 points per curve and,
/// for the BD-rate half, quality strictly increasing with rate.
pub fn bd_metrics(test: &RdCurve, anchor: &RdCurve) -> Result<(f64, f64), BdError> {
    for c in [test, anchor] {
        if c.points.len() < 4 {
            return Err(BdError::TooFewPoints {
                need: 4,
                got: c.points.len(),
            });
        }
    }
    let log_r = |c: &RdCurve| -> Vec<f64> { c.points.iter().map(|p| p.0.log10()).collect() };
    let qual = |c: &RdCurve| -> Vec<f64> { c.points.iter().map(|p| p.1).collect() };

    // BD-PSNR: quality as a function of log-rate
    let bd_psnr = mean_gap(&log_r(test), &qual(test), &log_r(anchor), &qual(anchor))?;

    // BD-rate: log-rate as a function of quality (needs monotone quality)
    for c in [test, anchor] {
        if c.points.windows(2).any(|w| w[1].1 <= w[0].1) {
            return Err(BdError::NonMonotonicQuality);
        }
    }
    let gap = mean_gap(&qual(test), &log_r(test), &qual(anchor), &log_r(anchor))?;
    let bd_rate = (10f64.powf(gap) - 1.0) * 100.0;
    Ok((bd_rate, bd_psnr))
}

/// [`bd_metrics`] after dropping points that are not on the quality-increasing
/// front (measured curves can dip locally). Returns the deltas plus how many
/// points were dropped from each curve.
pub fn bd_metrics_filtered(
    test: &RdCurve,
    anchor: &RdCurve,
) -> Result<((f64, f64), usize, usize), BdError> {
    let front = |c: &RdCurve| -> Vec<(f64, f64)> {
        let mut kept: Vec<(f64, f64)> = Vec::new();
        for &(r, q) in &c.points {
            while kept.last().is_some_and(|&(_, lq)| q <= lq) {
                kept.pop();
            }
            kept.push((r, q));
        }
        kept
    };
    let tf = front(test);
    let af = front(anchor);
    let dropped_t = test.points.len() - tf.len();
    let dropped_a = anchor.points.len() - af.len();
    let deltas = bd_metrics(&RdCurve::new(tf)?, &RdCurve::new(af)?)?;
    Ok((deltas, dropped_t, dropped_a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(points.to_vec()).unwrap()
    }

    fn sample() -> RdCurve {
        curve(&[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 38.5), (1.6, 40.0)])
    }

    #[test]
    fn curve_vs_itself_is_exactly_zero() {
        let c = sample();
        let (rate, psnr) = bd_metrics(&c, &c).unwrap();
        assert_eq!(rate, 0.0);
        assert_eq!(psnr, 0.0);
    }

    #[test]
    fn constant_db_shift() {
        let anchor = sample();
        let test = curve(
            &anchor
                .points
                .iter()
                .map(|&(r, q)| (r, q + 1.0))
                .collect::<Vec<_>>(),
        );
        let (_, bd_psnr) = bd_metrics(&test, &anchor).unwrap();
        assert!((bd_psnr - 1.0).abs() < 1e-9, "{bd_psnr}");
    }

    #[test]
    fn doubled_rates_cost_plus_hundred_percent() {
        let anchor = sample();
        let test = curve(
            &anchor
                .points
                .iter()
                .map(|&(r, q)| (2.0 * r, q))
                .collect::<Vec<_>>(),
        );
        let (bd_rate, _) = bd_metrics(&test, &anchor).unwrap();
        assert!((bd_rate - 100.0).abs() < 1e-9, "{bd_rate}");
    }

    #[test]
    fn antisymmetry() {
        let a = sample();
        let b = curve(&[(0.12, 30.5), (0.25, 34.1), (0.5, 36.4), (0.9, 39.0), (1.7, 40.3)]);
        let (rate_ab, psnr_ab) = bd_metrics(&a, &b).unwrap();
        let (rate_ba, psnr_ba) = bd_metrics(&b, &a).unwrap();
        assert!((psnr_ab + psnr_ba).abs() < 1e-6);
        let x = rate_ab / 100.0;
        assert!((rate_ba / 100.0 + x / (1.0 + x)).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let three = curve(&[(0.1, 30.0), (0.2, 31.0), (0.4, 33.0)]);
        assert!(matches!(
            bd_metrics(&three, &three),
            Err(BdError::TooFewPoints { .. })
        ));

        let a = sample();
        let far = curve(&[(100.0, 80.0), (200.0, 81.0), (400.0, 82.0), (800.0, 83.0)]);
        assert!(matches!(bd_metrics(&a, &far), Err(BdError::NoOverlap)));

        assert!(RdCurve::new(vec![(0.2, 30.0), (0.2, 31.0)]).is_err());
        assert!(RdCurve::new(vec![(0.2, 30.0)]).is_err());
    }

    #[test]
    fn filtered_drops_dips() {
        let dippy = curve(&[
            (0.1, 30.0),
            (0.2, 33.0),
            (0.3, 32.5), // local dip
            (0.4, 36.0),
            (0.8, 38.5),
            (1.6, 40.0),
        ]);
        let anchor = sample();
        assert!(matches!(
            bd_metrics(&dippy, &anchor),
            Err(BdError::NonMonotonicQuality)
        ));
        let ((_, bd_psnr), dropped_t, dropped_a) =
            bd_metrics_filtered(&dippy, &anchor).unwrap();
        assert_eq!(dropped_t, 1);
        assert_eq!(dropped_a, 0);
        assert!(bd_psnr.is_finite());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rd.csv");
        let c = sample();
        c.write_csv(&path).unwrap();
        let back = RdCurve::read_csv(&path).unwrap();
        assert_eq!(c, back);
    }
}
