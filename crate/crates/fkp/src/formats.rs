//! Text and binary file formats.
//!
//! * kernels: `FKPK <side>` followed by `side` rows of `side` reals;
//! * images: binary PGM (`P5`) and PPM (`P6`) with 8-bit samples;
//! * latents: one real per line;
//! * loss traces: `iter,value` lines;
//! * evaluation reports: CSV with a fixed header.

use std::fmt::Write as _;

use fkp_core::metrics::MetricReport;
use fkp_core::{Image, Kernel};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("line {line}: {reason}")]
    Text { line: usize, reason: String },
    #[error("byte {offset}: {reason}")]
    Binary { offset: usize, reason: String },
}

fn text_err(line: usize, reason: impl Into<String>) -> FormatError {
    FormatError::Text {
        line,
        reason: reason.into(),
    }
}

fn bin_err(offset: usize, reason: impl Into<String>) -> FormatError {
    FormatError::Binary {
        offset,
        reason: reason.into(),
    }
}

/// Shortest representation that parses back to the same `f64`.
fn real(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_kernel(k: &Kernel) -> String {
    let side = k.side();
    let mut out = format!("FKPK {side}\n");
    for i in 0..side {
        let row: Vec<String> = (0..side).map(|j| real(k.get(i, j))).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parses an `FKPK` kernel. Weights are taken as written; no renormalization.
pub fn read_kernel(text: &str) -> Result<Kernel, FormatError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| text_err(1, "empty kernel file"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("FKPK") {
        return Err(text_err(1, "missing FKPK magic"));
    }
    let side: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .filter(|s| s % 2 == 1)
        .ok_or_else(|| text_err(1, "side must be a positive odd integer"))?;
    if parts.next().is_some() {
        return Err(text_err(1, "trailing tokens after side"));
    }
    let mut weights = Vec::with_capacity(side * side);
    for r in 0..side {
        let (n, line) = lines
            .next()
            .ok_or_else(|| text_err(r + 2, format!("expected {side} rows, found {r}")))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| text_err(n + 1, format!("not a real number: {t:?}"))))
            .collect::<Result<_, _>>()?;
        if row.len() != side {
            return Err(text_err(n + 1, format!("expected {side} values, found {}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(text_err(n + 1, "non-finite weight"));
        }
        weights.extend(row);
    }
    if let Some((n, _)) = lines.next() {
        return Err(text_err(n + 1, "unexpected trailing content"));
    }
    Kernel::new(side, weights).map_err(|e| text_err(1, e.to_string()))
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, FormatError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| bin_err(start, format!("expected positive {what}")))
    }
}

/// Reads a binary PGM or PPM with `maxval ≤ 255`; samples map to `v / maxval`.
pub fn read_pnm(bytes: &[u8]) -> Result<Image, FormatError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bin_err(0, "expected P5 or P6 magic")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval > 255 {
        return Err(bin_err(h.pos, "only 8-bit samples are supported"));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(bin_err(h.pos, "expected whitespace after maxval")),
    }
    let n = width * height * channels;
    let raster = bytes
        .get(h.pos..h.pos + n)
        .ok_or_else(|| bin_err(bytes.len(), format!("raster truncated, need {n} bytes")))?;
    if bytes.len() > h.pos + n {
        return Err(bin_err(h.pos + n, "trailing bytes after raster"));
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; n];
    for (p, px) in raster.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            if v as usize > maxval {
                return Err(bin_err(h.pos + p * channels + c, "sample exceeds maxval"));
            }
            data[c * width * height + p] = v as f64 / scale;
        }
    }
    Image::new(height, width, channels, data).map_err(|e| bin_err(0, e.to_string()))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes P5 for one channel and P6 for three, clamping to `[0, 1]`.
pub fn write_pnm(x: &Image) -> Vec<u8> {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * c);
    for p in 0..h * w {
        for ch in 0..c {
            out.push(quantize(x.plane(ch)[p]));
        }
    }
    out
}

pub fn write_latent(z: &[f64]) -> String {
    z.iter().map(|v| real(*v) + "\n").collect()
}

pub fn read_latent(text: &str) -> Result<Vec<f64>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| text_err(n + 1, format!("not a finite real: {l:?}")))
        })
        .collect()
}

pub fn write_trace(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", real(*v));
    }
    out
}

pub const REPORT_HEADER: &str = "id,kernel_psnr,image_psnr,image_ssim";

fn metric(v: Option<f64>) -> String {
    match v {
        None => "na".into(),
        Some(v) if v == f64::INFINITY => "inf".into(),
        Some(v) => format!("{v:.6}"),
    }
}

pub fn report_line(id: &str, r: &MetricReport) -> String {
    format!(
        "{id},{},{},{}",
        metric(Some(r.kernel_psnr)),
        metric(r.image_psnr),
        metric(r.image_ssim)
    )
}

pub fn train_log_line(iteration: usize, nll: f64) -> String {
    format!("iter={iteration} nll={}", real(nll))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_round_trip_is_exact() {
        let w: Vec<f64> = (0..9).map(|i| (i as f64 + 0.1) / 3.7e3).collect();
        let k = Kernel::new(3, w).unwrap();
        assert_eq!(read_kernel(&write_kernel(&k)).unwrap(), k);
    }

    #[test]
    fn kernel_reader_accepts_exponents_and_rejects_damage() {
        let k = read_kernel("FKPK 1\n1e0\n").unwrap();
        assert_eq!(k.weights(), &[1.0]);
        assert!(read_kernel("FKPK 3\n1 2 3\n4 5 6\n").is_err());
        assert!(read_kernel("FKPK 2\n1 2\n3 4\n").is_err());
        assert!(matches!(read_kernel("FKPX 1\n1\n"), Err(FormatError::Text { line: 1, .. })));
        assert!(matches!(read_kernel("FKPK 1\nabc\n"), Err(FormatError::Text { line: 2, .. })));
    }

    #[test]
    fn pnm_round_trip() {
        let gray = Image::from_fn(3, 4, |i, j| ((i * 4 + j) * 20) as f64 / 255.0).unwrap();
        assert_eq!(read_pnm(&write_pnm(&gray)).unwrap(), gray);
        let rgb = Image::new(2, 2, 3, (0..12).map(|v| v as f64 / 255.0).collect()).unwrap();
        let bytes = write_pnm(&rgb);
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(read_pnm(&bytes).unwrap(), rgb);
    }

    #[test]
    fn pnm_header_comments_and_errors() {
        let bytes = b"P5 # comment\n2 1\n# more\n255\n\x00\xff";
        let x = read_pnm(bytes).unwrap();
        assert_eq!(x.data(), &[0.0, 1.0]);
        assert!(matches!(read_pnm(b"P5\n2 1\n255\n\x00"), Err(FormatError::Binary { offset: 12, .. })));
        assert!(read_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(read_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn report_sentinels() {
        let r = MetricReport {
            kernel_psnr: f64::INFINITY,
            image_psnr: None,
            image_ssim: None,
        };
        assert_eq!(report_line("a", &r), "a,inf,na,na");
        let r = MetricReport {
            kernel_psnr: 40.5,
            image_psnr: Some(30.25),
            image_ssim: Some(0.5),
        };
        assert_eq!(report_line("b", &r), "b,40.500000,30.250000,0.500000");
    }

    #[test]
    fn latent_and_trace_text() {
        let z = vec![1.5, -2e-7, 3.0];
        assert_eq!(read_latent(&write_latent(&z)).unwrap(), z);
        assert_eq!(write_trace(&[0.5, 0.25]), "0,0.5\n1,0.25\n");
        assert_eq!(train_log_line(100, -1.5), "iter=100 nll=-1.5");
    }
}
