//! Reference (SAM, CC, sCC, ERGAS, Q4) and no-reference (D_λ, D_S, QNR)
//! quality indexes for pan-sharpened products.
//!
//! All statistics use the population convention and double precision.
//! Denominators below [`EPS`] are treated as degenerate.

use crate::raster::{downsample, reflect101, MultiBandImage, RasterError, ResampleFilter};
use serde::Serialize;
use std::fmt::Write as _;
use thiserror::Error;

pub const EPS: f64 = 1e-12;

/// 3×3 Laplacian high-pass used by sCC.
pub const LAPLACIAN: [[f64; 3]; 3] = [[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("every pixel has a zero spectral vector")]
    NoValidPixels,
    #[error("band {band} has zero variance")]
    DegenerateBand { band: usize },
    #[error("high-pass response of band {band} has zero variance")]
    DegenerateHighPass { band: usize },
    #[error("reference band {band} has zero mean")]
    ZeroMeanBand { band: usize },
    #[error("every Q block is degenerate")]
    DegenerateBlock,
    #[error("Q4 needs exactly 4 bands, got {0}")]
    NotFourBands(usize),
    #[error("quaternion variance or mean is degenerate")]
    DegenerateVariance,
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("Q block size {0} must be at least 8")]
    BadBlock(usize),
    #[error("resampling failed: {0}")]
    Raster(String),
}

impl From<RasterError> for MetricError {
    fn from(e: RasterError) -> Self {
        MetricError::Raster(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Window over which Q-type indexes are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QConfig {
    /// `None` for a single global window, otherwise the edge of the
    /// non-overlapping square blocks.
    pub block: Option<usize>,
}

impl QConfig {
    pub const GLOBAL: QConfig = QConfig { block: None };

    pub fn blocks(size: usize) -> QConfig {
        QConfig { block: Some(size) }
    }

    fn validate(&self) -> Result<()> {
        match self.block {
            Some(b) if b < 8 => Err(MetricError::BadBlock(b)),
            _ => Ok(()),
        }
    }
}

/// Windows for the two families of Q-based indexes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EvalConfig {
    pub q4: QConfig,
    pub no_reference: QConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            q4: QConfig::GLOBAL,
            no_reference: QConfig::blocks(32),
        }
    }
}

fn same_dims(a: &MultiBandImage, b: &MultiBandImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let denom = (saa * sbb).sqrt();
    (saa > EPS && sbb > EPS && denom > EPS).then(|| sab / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sam {
    pub degrees: f64,
    /// Pixels skipped because one of the spectral vectors is zero.
    pub skipped: usize,
}

/// Mean spectral angle over all pixels, in degrees.
pub fn sam(fused: &MultiBandImage, reference: &MultiBandImage) -> Result<Sam> {
    same_dims(fused, reference)?;
    let (mut total, mut valid, mut skipped) = (0.0, 0usize, 0usize);
    for i in 0..fused.pixels() {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for b in 0..fused.bands() {
            let (x, y) = (fused.band(b)[i], reference.band(b)[i]);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let norm = (na * nb).sqrt();
        if norm < EPS {
            skipped += 1;
            continue;
        }
        total += (dot / norm).clamp(-1.0, 1.0).acos();
        valid += 1;
    }
    if valid == 0 {
        return Err(MetricError::NoValidPixels);
    }
    Ok(Sam {
        degrees: (total / valid as f64).to_degrees(),
        skipped,
    })
}

/// Per-band Pearson correlation averaged over bands.
pub fn cc(fused: &MultiBandImage, reference: &MultiBandImage) -> Result<f64> {
    same_dims(fused, reference)?;
    let mut sum = 0.0;
    for b in 0..fused.bands() {
        sum += pearson(fused.band(b), reference.band(b)).ok_or(MetricError::DegenerateBand { band: b })?;
    }
    Ok(sum / fused.bands() as f64)
}

/// Laplacian response of one plane with reflect-101 borders.
pub fn high_pass(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ky, row) in LAPLACIAN.iter().enumerate() {
                let sy = reflect101(y as isize + ky as isize - 1, height);
                for (kx, &w) in row.iter().enumerate() {
                    let sx = reflect101(x as isize + kx as isize - 1, width);
                    acc += w * plane[sy * width + sx];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Correlation between Laplacian high-pass bands, averaged over bands.
pub fn scc(fused: &MultiBandImage, reference: &MultiBandImage) -> Result<f64> {
    same_dims(fused, reference)?;
    let (w, h) = (fused.width(), fused.height());
    let mut sum = 0.0;
    for b in 0..fused.bands() {
        let hf = high_pass(fused.band(b), w, h);
        let hr = high_pass(reference.band(b), w, h);
        sum += pearson(&hf, &hr).ok_or(MetricError::DegenerateHighPass { band: b })?;
    }
    Ok(sum / fused.bands() as f64)
}

/// Relative dimensionless global error in synthesis with PAN/MS resolution
/// ratio `1 / ratio`.
pub fn ergas(fused: &MultiBandImage, reference: &MultiBandImage, ratio: usize) -> Result<f64> {
    same_dims(fused, reference)?;
    let mut acc = 0.0;
    for b in 0..fused.bands() {
        let r = reference.band(b);
        let m = mean(r);
        if m.abs() < EPS {
            return Err(MetricError::ZeroMeanBand { band: b });
        }
        let mse = fused.band(b).iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / r.len() as f64;
        acc += mse / (m * m);
    }
    Ok(100.0 / ratio as f64 * (acc / fused.bands() as f64).sqrt())
}

/// Correctly rounded sum (Shewchuk partials). Window statistics use it so
/// that a block-replicated image yields bitwise the same moments.
pub(crate) fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // round-half-even correction across the top partials
    let Some(mut hi) = partials.pop() else { return 0.0 };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

fn exact_mean(v: &[f64]) -> f64 {
    exact_sum(v.iter().copied()) / v.len() as f64
}

/// Universal image quality index of one window, `None` when degenerate.
fn q_window(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (exact_mean(a), exact_mean(b));
    let n = a.len() as f64;
    let sab = exact_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb))) / n;
    let saa = exact_sum(a.iter().map(|x| (x - ma) * (x - ma))) / n;
    let sbb = exact_sum(b.iter().map(|y| (y - mb) * (y - mb))) / n;
    let denom = (saa + sbb) * (ma * ma + mb * mb);
    (denom > EPS).then(|| 4.0 * sab * ma * mb / denom)
}

// Non-overlapping full blocks; a single global window when the image is
// smaller than one block.
fn windows(width: usize, height: usize, cfg: QConfig) -> Vec<Vec<usize>> {
    match cfg.block {
        Some(s) if s <= width && s <= height => {
            let mut out = Vec::new();
            for by in 0..height / s {
                for bx in 0..width / s {
                    out.push(
                        (by * s..(by + 1) * s)
                            .flat_map(|y| (bx * s..(bx + 1) * s).map(move |x| y * width + x))
                            .collect(),
                    );
                }
            }
            out
        }
        _ => vec![(0..width * height).collect()],
    }
}

/// Mean windowed index plus the number of degenerate windows skipped.
fn windowed<F>(width: usize, height: usize, cfg: QConfig, mut f: F) -> Result<(f64, usize)>
where
    F: FnMut(&[usize]) -> Option<f64>,
{
    cfg.validate()?;
    let (mut sum, mut valid, mut skipped) = (0.0, 0usize, 0usize);
    for idx in windows(width, height, cfg) {
        match f(&idx) {
            Some(q) => {
                sum += q;
                valid += 1;
            }
            None => skipped += 1,
        }
    }
    if valid == 0 {
        return Err(MetricError::DegenerateBlock);
    }
    Ok((sum / valid as f64, skipped))
}

fn q_planes(a: &[f64], b: &[f64], width: usize, height: usize, cfg: QConfig) -> Result<(f64, usize)> {
    let mut wa = Vec::new();
    let mut wb = Vec::new();
    windowed(width, height, cfg, |idx| {
        wa.clear();
        wb.clear();
        wa.extend(idx.iter().map(|&i| a[i]));
        wb.extend(idx.iter().map(|&i| b[i]));
        q_window(&wa, &wb)
    })
}

/// Q index between two single-band images.
pub fn q_index(a: &MultiBandImage, b: &MultiBandImage, cfg: QConfig) -> Result<f64> {
    same_dims(a, b)?;
    if a.bands() != 1 {
        return Err(MetricError::DimensionMismatch(format!(
            "Q needs single-band images, got {}",
            a.bands()
        )));
    }
    Ok(q_planes(a.data(), b.data(), a.width(), a.height(), cfg)?.0)
}

type Quat = [f64; 4];

fn quat_mul(p: Quat, q: Quat) -> Quat {
    [
        p[0] * q[0] - p[1] * q[1] - p[2] * q[2] - p[3] * q[3],
        p[0] * q[1] + p[1] * q[0] + p[2] * q[3] - p[3] * q[2],
        p[0] * q[2] - p[1] * q[3] + p[2] * q[0] + p[3] * q[1],
        p[0] * q[3] + p[1] * q[2] - p[2] * q[1] + p[3] * q[0],
    ]
}

fn quat_norm2(q: Quat) -> f64 {
    q.iter().map(|v| v * v).sum()
}

fn q4_window(z1: &[Quat], z2: &[Quat]) -> Option<f64> {
    let n = z1.len() as f64;
    let mu = |z: &[Quat], c: usize| exact_sum(z.iter().map(|q| q[c])) / n;
    let mu1 = [mu(z1, 0), mu(z1, 1), mu(z1, 2), mu(z1, 3)];
    let mu2 = [mu(z2, 0), mu(z2, 1), mu(z2, 2), mu(z2, 3)];
    let centred = |q: &Quat, m: &Quat| [q[0] - m[0], q[1] - m[1], q[2] - m[2], q[3] - m[3]];
    let var1 = exact_sum(z1.iter().map(|q| quat_norm2(centred(q, &mu1)))) / n;
    let var2 = exact_sum(z2.iter().map(|q| quat_norm2(centred(q, &mu2)))) / n;
    let prods: Vec<Quat> = z1
        .iter()
        .zip(z2)
        .map(|(a, b)| {
            let d2 = centred(b, &mu2);
            quat_mul(centred(a, &mu1), [d2[0], -d2[1], -d2[2], -d2[3]])
        })
        .collect();
    let cov = [0, 1, 2, 3].map(|c| exact_sum(prods.iter().map(|p| p[c])) / n);
    let cov_mod = quat_norm2(cov).sqrt();
    let (m1, m2) = (quat_norm2(mu1), quat_norm2(mu2));
    let denom = (var1 + var2) * (m1 + m2);
    (denom > EPS).then(|| 4.0 * cov_mod * m1.sqrt() * m2.sqrt() / denom)
}

/// Quaternion extension of Q for 4-band images.
pub fn q4(fused: &MultiBandImage, reference: &MultiBandImage, cfg: QConfig) -> Result<f64> {
    same_dims(fused, reference)?;
    if fused.bands() != 4 {
        return Err(MetricError::NotFourBands(fused.bands()));
    }
    let quats = |img: &MultiBandImage| -> Vec<Quat> {
        (0..img.pixels())
            .map(|i| [img.band(0)[i], img.band(1)[i], img.band(2)[i], img.band(3)[i]])
            .collect()
    };
    let (z1, z2) = (quats(fused), quats(reference));
    let mut w1 = Vec::new();
    let mut w2 = Vec::new();
    windowed(fused.width(), fused.height(), cfg, |idx| {
        w1.clear();
        w2.clear();
        w1.extend(idx.iter().map(|&i| z1[i]));
        w2.extend(idx.iter().map(|&i| z2[i]));
        q4_window(&w1, &w2)
    })
    .map(|r| r.0)
    .map_err(|e| match e {
        MetricError::DegenerateBlock => MetricError::DegenerateVariance,
        other => other,
    })
}

fn band_q(img: &MultiBandImage, i: usize, other: &[f64], cfg: QConfig) -> Result<f64> {
    q_planes(img.band(i), other, img.width(), img.height(), cfg)
        .map(|r| r.0)
        .map_err(|e| match e {
            MetricError::DegenerateBlock => MetricError::DegenerateBand { band: i },
            other => other,
        })
}

/// Spectral distortion: change of inter-band Q between the MS input and the
/// fused product. The inner sum runs over `j >= i`; diagonal terms vanish.
pub fn d_lambda(fused: &MultiBandImage, ms: &MultiBandImage, cfg: QConfig) -> Result<f64> {
    let k = fused.bands();
    if k != ms.bands() || k < 2 {
        return Err(MetricError::DimensionMismatch(format!(
            "D_lambda needs matching band counts >= 2, got {} and {}",
            k,
            ms.bands()
        )));
    }
    let mut acc = 0.0;
    for i in 0..k {
        for j in i..k {
            let qp = band_q(fused, i, fused.band(j), cfg)?;
            let qx = band_q(ms, i, ms.band(j), cfg)?;
            acc += (qp - qx).abs();
        }
    }
    Ok(lambda_from_sum(k, acc))
}

fn lambda_from_sum(k: usize, abs_delta_sum: f64) -> f64 {
    (2.0 / (k * (k - 1)) as f64 * abs_delta_sum).sqrt()
}

fn spatial_from_sum(k: usize, abs_delta_sum: f64) -> f64 {
    (abs_delta_sum / k as f64).sqrt()
}

/// Spatial distortion: change of Q between each band and the PAN across
/// scales. `pan_lr` is the PAN degraded to the MS grid.
pub fn d_s(
    fused: &MultiBandImage,
    ms: &MultiBandImage,
    pan: &MultiBandImage,
    pan_lr: &MultiBandImage,
    cfg: QConfig,
) -> Result<f64> {
    let k = fused.bands();
    if k != ms.bands() {
        return Err(MetricError::DimensionMismatch(format!("{} vs {} bands", k, ms.bands())));
    }
    if pan.dims() != (fused.width(), fused.height(), 1) {
        return Err(MetricError::DimensionMismatch(format!(
            "PAN {:?} does not match fused {:?}",
            pan.dims(),
            fused.dims()
        )));
    }
    if pan_lr.dims() != (ms.width(), ms.height(), 1) {
        return Err(MetricError::DimensionMismatch(format!(
            "degraded PAN {:?} does not match MS {:?}",
            pan_lr.dims(),
            ms.dims()
        )));
    }
    let mut acc = 0.0;
    for i in 0..k {
        let qp = band_q(fused, i, pan.data(), cfg)?;
        let qx = band_q(ms, i, pan_lr.data(), cfg)?;
        acc += (qp - qx).abs();
    }
    Ok(spatial_from_sum(k, acc))
}

/// Quality with no reference.
pub fn qnr(d_lambda: f64, d_s: f64) -> Result<f64> {
    for (name, value) in [("D_lambda", d_lambda), ("D_s", d_s)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricError::OutOfRange { name, value });
        }
    }
    Ok((1.0 - d_lambda) * (1.0 - d_s))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub method: String,
    pub sam: Option<f64>,
    pub cc: Option<f64>,
    pub scc: Option<f64>,
    pub ergas: Option<f64>,
    pub q4: Option<f64>,
    pub d_lambda: Option<f64>,
    pub d_s: Option<f64>,
    pub qnr: Option<f64>,
    pub notes: Vec<String>,
}

pub const CSV_HEADER: &str = "method,SAM,CC,sCC,ERGAS,Q4,D_lambda,D_s,QNR";

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.sam,
            self.cc,
            self.scc,
            self.ergas,
            self.q4,
            self.d_lambda,
            self.d_s,
            self.qnr,
        ]
    }

    pub fn csv_row(&self) -> String {
        let mut row = self.method.replace(',', ";");
        for v in self.values() {
            row.push(',');
            if let Some(v) = v {
                let _ = write!(row, "{v:.6}");
            }
        }
        row
    }

    /// Parses a row written by [`csv_row`](Self::csv_row); empty cells are absent values.
    pub fn from_csv_row(line: &str) -> Option<MetricReport> {
        let cells: Vec<&str> = line.trim_end().split(',').collect();
        if cells.len() != 9 {
            return None;
        }
        let mut vals = [None; 8];
        for (slot, cell) in vals.iter_mut().zip(&cells[1..]) {
            *slot = if cell.is_empty() {
                None
            } else {
                Some(cell.parse().ok()?)
            };
        }
        let [sam, cc, scc, ergas, q4, d_lambda, d_s, qnr] = vals;
        Some(MetricReport {
            method: cells[0].to_string(),
            sam,
            cc,
            scc,
            ergas,
            q4,
            d_lambda,
            d_s,
            qnr,
            notes: Vec::new(),
        })
    }
}

pub fn to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Comparison table with one row per method, arrows marking the better
/// direction of each index.
pub fn to_markdown(reports: &[MetricReport]) -> String {
    let mut out = String::from(
        "| Method | SAM ↓ | CC ↑ | sCC ↑ | ERGAS ↓ | Q4 ↑ | D_λ ↓ | D_S ↓ | QNR ↑ |\n\
         |:-------|------:|-----:|------:|--------:|-----:|------:|------:|------:|\n",
    );
    for r in reports {
        out.push_str("| ");
        out.push_str(&r.method.replace('|', "/"));
        for v in r.values() {
            match v {
                Some(v) => {
                    let _ = write!(out, " | {v:.4}");
                }
                None => out.push_str(" | -"),
            }
        }
        out.push_str(" |\n");
    }
    out
}

/// Optional inputs to [`evaluate`]; reference metrics need `reference`,
/// no-reference metrics need both `ms` and `pan`.
#[derive(Debug, Clone, Copy)]
pub struct EvalInputs<'a> {
    pub fused: &'a MultiBandImage,
    pub reference: Option<&'a MultiBandImage>,
    pub ms: Option<&'a MultiBandImage>,
    pub pan: Option<&'a MultiBandImage>,
}

/// Computes every index the inputs allow. Failures of individual indexes are
/// recorded in `notes` and leave the field empty.
pub fn evaluate(method: &str, inputs: EvalInputs<'_>, ratio: usize, cfg: &EvalConfig) -> MetricReport {
    let mut report = MetricReport {
        method: method.to_string(),
        ..Default::default()
    };
    let note = |report: &mut MetricReport, name: &str, r: Result<f64>| -> Option<f64> {
        r.map_err(|e| report.notes.push(format!("{name}: {e}"))).ok()
    };
    let fused = inputs.fused;
    if let Some(reference) = inputs.reference {
        report.sam = match sam(fused, reference) {
            Ok(s) => {
                if s.skipped > 0 {
                    report
                        .notes
                        .push(format!("SAM: skipped {} zero-vector pixels", s.skipped));
                }
                Some(s.degrees)
            }
            Err(e) => {
                report.notes.push(format!("SAM: {e}"));
                None
            }
        };
        report.cc = note(&mut report, "CC", cc(fused, reference));
        report.scc = note(&mut report, "sCC", scc(fused, reference));
        report.ergas = note(&mut report, "ERGAS", ergas(fused, reference, ratio));
        report.q4 = note(&mut report, "Q4", q4(fused, reference, cfg.q4));
    }
    if let (Some(ms), Some(pan)) = (inputs.ms, inputs.pan) {
        report.d_lambda = note(&mut report, "D_lambda", d_lambda(fused, ms, cfg.no_reference));
        let pan_lr = downsample(pan, ratio, ResampleFilter::wald(ratio)).map_err(MetricError::from);
        report.d_s = note(
            &mut report,
            "D_s",
            pan_lr.and_then(|lr| d_s(fused, ms, pan, &lr, cfg.no_reference)),
        );
        if let (Some(dl), Some(ds)) = (report.d_lambda, report.d_s) {
            report.qnr = note(&mut report, "QNR", qnr(dl, ds));
        }
    }
    report
}
