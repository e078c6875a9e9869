//! Quality metrics: PSNR and Bjontegaard rate deltas.

use crate::error::{CodecError, Result};

/// PSNR in dB between two 8-bit buffers of equal length, peak 255.
/// Identical buffers report the 99 dB sentinel.
pub fn psnr(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CodecError::ShapeMismatch(format!(
            "psnr over {} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) / 255.0;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((-10.0 * mse.log10()).min(99.0))
}

/// One rate-distortion operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RdCurve {
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn push(&mut self, bpp: f64, psnr_db: f64) {
        self.points.push(RdPoint { bpp, psnr_db });
    }
}

/// Solve A x = b for a small dense system by Gaussian elimination with
/// partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col].abs() < 1e-12 {
            return Err(CodecError::Invalid("singular polyfit system".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Least-squares polynomial coefficients c0..cd of y(x), degree
/// min(3, points - 1).
fn polyfit(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    let d = xs.len().saturating_sub(1).min(3);
    let n = d + 1;
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for (&x, &y) in xs.iter().zip(ys) {
        let pows: Vec<f64> = (0..2 * n - 1).scan(1.0, |p, _| {
            let v = *p;
            *p *= x;
            Some(v)
        })
        .collect();
        for i in 0..n {
            for j in 0..n {
                a[i][j] += pows[i + j];
            }
            b[i] += pows[i] * y;
        }
    }
    solve(a, b)
}

fn poly_integral(c: &[f64], lo: f64, hi: f64) -> f64 {
    let eval = |x: f64| {
        c.iter()
            .enumerate()
            .map(|(i, &ci)| ci * x.powi(i as i32 + 1) / (i as f64 + 1.0))
            .sum::<f64>()
    };
    eval(hi) - eval(lo)
}

/// Bjontegaard rate delta of `test` against `anchor`, in percent
/// (negative = test needs less rate). Fits log10(bpp) as a polynomial
/// of PSNR per curve and compares the average over the common PSNR
/// interval.
pub fn bd_rate(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    if anchor.points.len() < 2 || test.points.len() < 2 {
        return Err(CodecError::Invalid("bd_rate needs at least two points per curve".into()));
    }
    let prep = |c: &RdCurve| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut pts = c.points.clone();
        pts.sort_by(|a, b| a.psnr_db.total_cmp(&b.psnr_db));
        for p in &pts {
            if !(p.bpp > 0.0) || !p.psnr_db.is_finite() {
                return Err(CodecError::Invalid("bd_rate point with nonpositive rate".into()));
            }
        }
        Ok((
            pts.iter().map(|p| p.psnr_db).collect(),
            pts.iter().map(|p| p.bpp.log10()).collect(),
        ))
    };
    let (xa, ya) = prep(anchor)?;
    let (xt, yt) = prep(test)?;
    let lo = xa[0].max(xt[0]);
    let hi = xa[xa.len() - 1].min(xt[xt.len() - 1]);
    if hi <= lo {
        return Err(CodecError::Invalid("bd_rate curves share no PSNR interval".into()));
    }
    let ca = polyfit(&xa, &ya)?;
    let ct = polyfit(&xt, &yt)?;
    let avg_diff = (poly_integral(&ct, lo, hi) - poly_integral(&ca, lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg_diff) - 1.0) * 100.0)
}

/// Header line for the sweep CSV output.
pub const SWEEP_CSV_HEADER: &str = "image,lambda,arch,n_iters,kappa_enc,bpp,psnr_db,encode_s,decode_ms";

/// Parse a sweep CSV back into per-image RD curves, points sorted by
/// rate. Inverse of the sweep emitter for the (image, bpp, psnr)
/// projection.
pub fn rd_curves_from_csv(csv: &str) -> Result<Vec<(String, RdCurve)>> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == SWEEP_CSV_HEADER => {}
        other => {
            return Err(CodecError::Invalid(format!("bad sweep CSV header: {other:?}")));
        }
    }
    let mut curves: Vec<(String, RdCurve)> = Vec::new();
    for (ln, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(CodecError::Invalid(format!("CSV line {}: {} fields", ln + 2, f.len())));
        }
        let bpp: f64 = f[5]
            .parse()
            .map_err(|_| CodecError::Invalid(format!("CSV line {}: bad bpp {}", ln + 2, f[5])))?;
        let psnr_db: f64 = f[6]
            .parse()
            .map_err(|_| CodecError::Invalid(format!("CSV line {}: bad psnr {}", ln + 2, f[6])))?;
        match curves.iter_mut().find(|(name, _)| name == f[0]) {
            Some((_, c)) => c.push(bpp, psnr_db),
            None => curves.push((f[0].to_string(), RdCurve { points: vec![RdPoint { bpp, psnr_db }] })),
        }
    }
    for (_, c) in curves.iter_mut() {
        c.points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    }
    Ok(curves)
}
