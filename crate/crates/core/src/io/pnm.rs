//! Binary PPM (P6) and PGM (P5) images, 8 or 16 bits per sample.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::tensor::FeatureMap;

/// Depth is stored as `round(depth · DEPTH_SCALE)`; 0 marks invalid pixels.
pub const DEPTH_SCALE: f64 = 1000.0;

/// Decoded samples of a P5 or P6 file, interleaved by pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Next whitespace-separated header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

impl Pnm {
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Pnm> {
        let mut pos = 0;
        let channels = match token(bytes, &mut pos) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(malformed(path, "expected a P5 or P6 header")),
        };
        let mut num = |what: &str| -> Result<usize> {
            token(bytes, &mut pos)
                .and_then(|t| std::str::from_utf8(t).ok())
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| malformed(path, format!("bad {what}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(malformed(path, format!("maxval {maxval} outside 1..=65535")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let wide = maxval > 255;
        let count = width * height * channels;
        let need = count * if wide { 2 } else { 1 };
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != need {
            return Err(malformed(path, format!("expected {need} raster bytes, found {}", raster.len())));
        }
        let samples: Vec<u16> = if wide {
            raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        } else {
            raster.iter().map(|&b| b as u16).collect()
        };
        if samples.iter().any(|&s| s as usize > maxval) {
            return Err(malformed(path, "sample exceeds maxval"));
        }
        Ok(Pnm {
            width,
            height,
            channels,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Pnm> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Pnm::decode(&std::fs::read(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }
}

/// 8-bit RGB, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// Quantize a `3×H×W` map with values in `[0, 1]`.
    pub fn from_feature_map(m: &FeatureMap<f64>) -> Result<RgbImage> {
        if m.channels != 3 {
            return Err(Error::ShapeMismatch(format!("RGB image needs 3 channels, got {}", m.channels)));
        }
        let hw = m.height * m.width;
        let data = (0..hw)
            .flat_map(|p| (0..3).map(move |c| (m.data[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        Ok(RgbImage {
            width: m.width,
            height: m.height,
            data,
        })
    }

    pub fn to_feature_map(&self) -> FeatureMap<f64> {
        let hw = self.width * self.height;
        let mut out = FeatureMap::zeros(3, self.height, self.width);
        for p in 0..hw {
            for c in 0..3 {
                out.data[c * hw + p] = self.data[3 * p + c] as f64 / 255.0;
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<RgbImage> {
        let p = Pnm::read(path)?;
        if p.channels != 3 || p.maxval != 255 {
            return Err(malformed(path, "expected an 8-bit P6 image"));
        }
        Ok(RgbImage {
            width: p.width,
            height: p.height,
            data: p.samples.into_iter().map(|s| s as u8).collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Pnm {
            width: self.width,
            height: self.height,
            channels: 3,
            maxval: 255,
            samples: self.data.iter().map(|&b| b as u16).collect(),
        }
        .write(path)
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let p = Pnm::read(path)?;
    if p.channels != 1 || p.maxval != 255 {
        return Err(malformed(path, "expected an 8-bit P5 label map"));
    }
    LabelMap::new(p.width, p.height, p.samples.into_iter().map(|s| s as u8).collect())
}

pub fn write_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    Pnm {
        width: labels.width,
        height: labels.height,
        channels: 1,
        maxval: 255,
        samples: labels.labels.iter().map(|&l| l as u16).collect(),
    }
    .write(path)
}

/// 16-bit depth in units of `1 / DEPTH_SCALE`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl DepthImage {
    /// Non-positive or non-finite depths become 0; large ones saturate.
    pub fn from_depths(width: usize, height: usize, depth: &[f64]) -> Result<DepthImage> {
        if depth.len() != width * height {
            return Err(Error::ShapeMismatch(format!("{} depths for a {width}x{height} map", depth.len())));
        }
        let data = depth
            .iter()
            .map(|&d| {
                if d.is_finite() && d > 0.0 {
                    (d * DEPTH_SCALE).round().clamp(1.0, u16::MAX as f64) as u16
                } else {
                    0
                }
            })
            .collect();
        Ok(DepthImage { width, height, data })
    }

    pub fn to_depths(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / DEPTH_SCALE).collect()
    }

    pub fn read(path: &Path) -> Result<DepthImage> {
        let p = Pnm::read(path)?;
        if p.channels != 1 || p.maxval != u16::MAX {
            return Err(malformed(path, "expected a 16-bit P5 depth map"));
        }
        Ok(DepthImage {
            width: p.width,
            height: p.height,
            data: p.samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Pnm {
            width: self.width,
            height: self.height,
            channels: 1,
            maxval: u16::MAX,
            samples: self.data.clone(),
        }
        .write(path)
    }
}
