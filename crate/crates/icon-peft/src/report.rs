//! Run artifacts: metrics CSV, parameter report, netpbm maps.

use std::collections::BTreeMap;
use std::path::Path;

use icon_peft_core::params::{CountScope, Owner, ParameterRegistry};
use icon_peft_core::train::EpochMetrics;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// `epoch,split,loss,accuracy`, one row per [`EpochMetrics`].
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "split", "loss", "accuracy"]).expect("in-memory write");
    for r in rows {
        w.write_record([r.epoch.to_string(), r.split.as_str().to_string(), r.loss.to_string(), r.accuracy.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnerCount {
    pub total: usize,
    pub trainable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub recipe: String,
    pub total: usize,
    pub trainable: usize,
    /// Trainable share of the total, in percent.
    pub ratio: f64,
    pub by_owner: BTreeMap<String, OwnerCount>,
}

impl ParamsReport {
    pub fn from_registry(recipe: &str, reg: &ParameterRegistry) -> Self {
        let by_owner = [Owner::Backbone, Owner::Adapter, Owner::Head]
            .into_iter()
            .map(|o| {
                let (total, trainable) = reg.by_owner(o);
                (o.as_str().to_string(), OwnerCount { total, trainable })
            })
            .collect();
        Self {
            recipe: recipe.to_string(),
            total: reg.count(CountScope::All),
            trainable: reg.count(CountScope::Trainable),
            ratio: reg.trainable_percent(),
            by_owner,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Rows of comma-separated values.
pub fn grid_csv(values: &[f64], cols: usize) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in values.chunks(cols) {
        w.write_record(row.iter().map(|v| v.to_string())).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Rescales to `[0, 1]`; a constant input maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

/// Binary greyscale PGM (`P5`, maxval 255) of `[0, 1]` values.
pub fn encode_pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pgm extents");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// A decoded binary netpbm image: channel-major pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

/// Decodes `P5` (grey) or `P6` (RGB) with maxval up to 255.
pub fn decode_netpbm(bytes: &[u8]) -> CliResult<Netpbm> {
    let bad = |m: &str| CliError::Core(icon_peft_core::Error::Data(format!("netpbm: {m}")));
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ascii"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    i += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other} (expected P5 or P6)"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    let raster = bytes.get(i..).unwrap_or(&[]);
    let n = width * height * channels;
    if raster.len() != n {
        return Err(bad(&format!("raster has {} bytes, expected {n}", raster.len())));
    }
    let mut pixels = vec![0f32; n];
    for (p, px) in raster.chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            pixels[c * width * height + p] = b as f32 / maxval as f32;
        }
    }
    Ok(Netpbm {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
