//! Depth evaluation metrics and error maps.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const ZETA_BASE: f64 = 1.25;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    /// Natural log.
    pub rmse_log: f64,
    /// Mean `|log10 d - log10 d*|`.
    pub log10: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub zeta3: f64,
    /// Pixels evaluated (summed over images for an aggregate).
    pub pixels: usize,
}

const KEYS: [&str; 9] = ["rmse", "abs_rel", "sq_rel", "rmse_log", "log10", "zeta1", "zeta2", "zeta3", "pixels"];

impl MetricReport {
    fn values(&self) -> [f64; 8] {
        [
            self.rmse,
            self.abs_rel,
            self.sq_rel,
            self.rmse_log,
            self.log10,
            self.zeta1,
            self.zeta2,
            self.zeta3,
        ]
    }

    /// Unweighted mean over images; pixel counts add up.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            rmse: avg(|r| r.rmse),
            abs_rel: avg(|r| r.abs_rel),
            sq_rel: avg(|r| r.sq_rel),
            rmse_log: avg(|r| r.rmse_log),
            log10: avg(|r| r.log10),
            zeta1: avg(|r| r.zeta1),
            zeta2: avg(|r| r.zeta2),
            zeta3: avg(|r| r.zeta3),
            pixels: reports.iter().map(|r| r.pixels).sum(),
        })
    }

    /// `key value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(self.values()) {
            writeln!(s, "{k} {v}").expect("write to string");
        }
        writeln!(s, "pixels {}", self.pixels).expect("write to string");
        s
    }

    pub fn csv_header() -> String {
        KEYS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let mut cols: Vec<String> = self.values().iter().map(|v| v.to_string()).collect();
        cols.push(self.pixels.to_string());
        cols.join(",")
    }
}

/// Mask further restricted to `gt <= cap` when a cap is given.
pub fn capped_mask(gt: &[f64], mask: &[bool], cap: Option<f64>) -> Vec<bool> {
    match cap {
        None => mask.to_vec(),
        Some(c) => mask.iter().zip(gt).map(|(&m, &g)| m && g <= c).collect(),
    }
}

fn check(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::shape("metrics", format!("pred {}, gt {}, mask {}", pred.len(), gt.len(), mask.len())));
    }
    Ok(())
}

pub fn compute_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<MetricReport> {
    check(pred, gt, mask)?;
    let mut m = 0usize;
    let (mut se, mut ar, mut sr, mut sle, mut l10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut inliers = [0usize; 3];
    for i in (0..gt.len()).filter(|&i| mask[i]) {
        let (d, t) = (pred[i], gt[i]);
        if !(d > 0.0) || !(t > 0.0) {
            return Err(Error::InvalidInput(format!("nonpositive depth under mask at pixel {i} (pred {d}, gt {t})")));
        }
        m += 1;
        let e = d - t;
        se += e * e;
        ar += e.abs() / t;
        sr += e * e / t;
        let le = d.ln() - t.ln();
        sle += le * le;
        l10 += (d.log10() - t.log10()).abs();
        let ratio = (d / t).max(t / d);
        let mut thr = 1.0;
        for k in &mut inliers {
            thr *= ZETA_BASE;
            if ratio < thr {
                *k += 1;
            }
        }
    }
    if m == 0 {
        return Err(Error::InvalidInput("empty validity mask".into()));
    }
    let mf = m as f64;
    Ok(MetricReport {
        rmse: (se / mf).sqrt(),
        abs_rel: ar / mf,
        sq_rel: sr / mf,
        rmse_log: (sle / mf).sqrt(),
        log10: l10 / mf,
        zeta1: inliers[0] as f64 / mf,
        zeta2: inliers[1] as f64 / mf,
        zeta3: inliers[2] as f64 / mf,
        pixels: m,
    })
}

/// Absolute error, min-max normalized over valid pixels to gray bytes;
/// invalid pixels are black. A constant field maps to black when the error
/// is zero and to mid-gray (128) otherwise.
pub fn error_map(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<Vec<u8>> {
    check(pred, gt, mask)?;
    let err: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).collect();
    let valid = || err.iter().zip(mask).filter(|(_, &m)| m).map(|(e, _)| *e);
    let lo = valid().fold(f64::INFINITY, f64::min);
    let hi = valid().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        if valid().next().is_none() {
            return Err(Error::InvalidInput("empty validity mask".into()));
        }
        return Err(Error::InvalidInput("non-finite error values".into()));
    }
    Ok(err
        .iter()
        .zip(mask)
        .map(|(&e, &m)| {
            if !m {
                0
            } else if hi > lo {
                ((e - lo) / (hi - lo) * 255.0).round() as u8
            } else if hi == 0.0 {
                0
            } else {
                128
            }
        })
        .collect())
}
