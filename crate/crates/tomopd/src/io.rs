//! On-disk formats.
//!
//! * Volumes: `name.vol` holds the raw little-endian samples (x fastest,
//!   then y, then z for images; bin fastest, then row, then view for
//!   sinograms). `name.json` next to it holds a [`VolumeHeader`].
//! * Convergence logs: CSV with the header `iter,data_rmse,image_rmse,elapsed_seconds`,
//!   floats written with 17 significant digits.
//! * Previews: 16-bit grayscale PNG, one `z` row per image row.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tomopd_core::{ConvergenceLog, GridSpec, ImageGrid, LogSample, ScanGeometry, Sinogram};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed header: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("{path}: payload has {actual} bytes, header describes {expected}")]
    LengthMismatch { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: unsupported dtype {dtype:?} (expected \"f32\" or \"f64\")")]
    Dtype { path: PathBuf, dtype: String },
    #[error("{path}: {reason}")]
    Content { path: PathBuf, reason: String },
    #[error("bad display window [{lo}, {hi}]")]
    Window { lo: f64, hi: f64 },
    #[error("{0}")]
    Png(String),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Sidecar header of a `.vol` file.
///
/// `dims`, `spacing` and `origin` follow [`GridSpec`] for images. Sinograms
/// carry `dims = [n_bins, n_rows, n_views]`, unit spacing, and their scan
/// geometry in `geometry`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub dtype: Dtype,
    pub byte_order: String,
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<ScanGeometry>,
}

/// `foo.vol` → `foo.json`.
pub fn header_path(vol: &Path) -> PathBuf {
    vol.with_extension("json")
}

fn encode(values: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    for v in values {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
        }
    }
    out
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    }
}

fn write_raw(path: &Path, header: &VolumeHeader, values: &[f64]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    fs::write(path, encode(values, header.dtype)).map_err(fs_err(path))?;
    let hp = header_path(path);
    let mut text = serde_json::to_string_pretty(header).expect("header serializes");
    text.push('\n');
    fs::write(&hp, text).map_err(fs_err(&hp))
}

fn read_raw(path: &Path) -> Result<(VolumeHeader, Vec<f64>), IoError> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(fs_err(&hp))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| IoError::Header { path: hp.clone(), reason: e.to_string() })?;
    if let Some(d) = raw.get("dtype").and_then(|d| d.as_str()) {
        if d != "f32" && d != "f64" {
            return Err(IoError::Dtype { path: hp, dtype: d.to_string() });
        }
    }
    let header: VolumeHeader =
        serde_json::from_value(raw).map_err(|e| IoError::Header { path: hp.clone(), reason: e.to_string() })?;
    if header.byte_order != "little" {
        return Err(IoError::Header { path: hp, reason: format!("byte_order {:?} is not \"little\"", header.byte_order) });
    }
    let count = header
        .dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| IoError::Header { path: hp.clone(), reason: "dims overflow".into() })?;
    let expected = (count * header.dtype.size()) as u64;
    let actual = fs::metadata(path).map_err(fs_err(path))?.len();
    if actual != expected {
        return Err(IoError::LengthMismatch { path: path.to_path_buf(), expected, actual });
    }
    let bytes = fs::read(path).map_err(fs_err(path))?;
    if bytes.len() as u64 != expected {
        return Err(IoError::LengthMismatch { path: path.to_path_buf(), expected, actual: bytes.len() as u64 });
    }
    let values = decode(&bytes, header.dtype);
    Ok((header, values))
}

pub fn write_volume(path: &Path, img: &ImageGrid, dtype: Dtype) -> Result<(), IoError> {
    let repr = serde_json::to_value(&img.spec).expect("grid serializes");
    let field = |k: &str| serde_json::from_value::<Vec<f64>>(repr[k].clone()).expect("grid field");
    let header = VolumeHeader {
        dims: serde_json::from_value(repr["dims"].clone()).expect("grid dims"),
        spacing: field("spacing"),
        origin: field("origin"),
        dtype,
        byte_order: "little".into(),
        units: "cm^-1".into(),
        geometry: None,
    };
    write_raw(path, &header, &img.values)
}

pub fn read_volume(path: &Path) -> Result<ImageGrid, IoError> {
    let (h, values) = read_raw(path)?;
    if h.geometry.is_some() {
        return Err(IoError::Content { path: path.to_path_buf(), reason: "file holds a sinogram, not an image".into() });
    }
    let spec: GridSpec = serde_json::from_value(serde_json::json!({
        "dims": h.dims, "spacing": h.spacing, "origin": h.origin
    }))
    .map_err(|e| IoError::Header { path: header_path(path), reason: e.to_string() })?;
    ImageGrid::new(spec, values).map_err(|e| IoError::Content { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn write_sinogram(path: &Path, s: &Sinogram, dtype: Dtype) -> Result<(), IoError> {
    let g = &s.geometry;
    let header = VolumeHeader {
        dims: vec![g.n_bins, g.n_rows, g.n_views],
        spacing: vec![1.0; 3],
        origin: vec![0.0; 3],
        dtype,
        byte_order: "little".into(),
        units: "line integral (dimensionless)".into(),
        geometry: Some(g.clone()),
    };
    write_raw(path, &header, &s.values)
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram, IoError> {
    let (h, values) = read_raw(path)?;
    let Some(geometry) = h.geometry else {
        return Err(IoError::Content { path: path.to_path_buf(), reason: "file holds an image, not a sinogram".into() });
    };
    if h.dims != [geometry.n_bins, geometry.n_rows, geometry.n_views] {
        return Err(IoError::Header { path: header_path(path), reason: "dims disagree with the scan geometry".into() });
    }
    Sinogram::new(geometry, values).map_err(|e| IoError::Content { path: path.to_path_buf(), reason: e.to_string() })
}

/// Maps `[lo, hi]` linearly onto `[0, 65535]`, clamping outside values.
pub fn window_value(v: f64, lo: f64, hi: f64) -> u16 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 65535.0).round() as u16
}

/// Writes a 16-bit grayscale PNG of a 2D image, or of the `y = slice`
/// plane of a 3D image.
pub fn export_png(img: &ImageGrid, window: [f64; 2], slice: Option<usize>, path: &Path) -> Result<(), IoError> {
    let [lo, hi] = window;
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(IoError::Window { lo, hi });
    }
    let spec = &img.spec;
    let iy = match (spec.is_3d(), slice) {
        (false, _) => 0,
        (true, Some(s)) if s < spec.ny() => s,
        (true, Some(s)) => return Err(IoError::Png(format!("slice {s} out of range 0..{}", spec.ny()))),
        (true, None) => return Err(IoError::Png("3D images need a slice index".into())),
    };
    let (w, h) = (spec.nx(), spec.nz());
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for iz in 0..h {
        for ix in 0..w {
            buf.put_pixel(ix as u32, iz as u32, image::Luma([window_value(img.get(ix, iy, iz), lo, hi)]));
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    buf.save(path).map_err(|e| IoError::Png(format!("{}: {e}", path.display())))
}

/// Formats a float with 17 significant digits so it parses back exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_log(path: &Path, log: &ConvergenceLog) -> Result<(), IoError> {
    let csv_err = |source| IoError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["iter", "data_rmse", "image_rmse", "elapsed_seconds"]).map_err(csv_err)?;
    for s in &log.samples {
        w.write_record([s.iter.to_string(), fmt_f64(s.data_rmse), fmt_f64(s.image_rmse), fmt_f64(s.elapsed_seconds)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(fs_err(path))
}

pub fn read_log(path: &Path) -> Result<ConvergenceLog, IoError> {
    let csv_err = |source| IoError::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut samples = Vec::new();
    for rec in r.deserialize::<LogSample>() {
        samples.push(rec.map_err(csv_err)?);
    }
    Ok(ConvergenceLog { samples })
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut f = fs::File::create(path).map_err(fs_err(path))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| IoError::Content { path: path.to_path_buf(), reason: e.to_string() })?;
    f.write_all(b"\n").map_err(fs_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_endpoints_and_clamp() {
        assert_eq!(window_value(0.0, 0.0, 0.6), 0);
        assert_eq!(window_value(0.6, 0.0, 0.6), 65535);
        assert_eq!(window_value(2.0, 0.0, 0.6), 65535);
        assert_eq!(window_value(-1.0, 0.0, 0.6), 0);
        assert_eq!(window_value(0.3, 0.0, 0.6), 32768);
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, f64::MAX, -2.5e-7, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert!(fmt_f64(f64::NAN).parse::<f64>().unwrap().is_nan());
    }

    #[test]
    fn f32_encoding() {
        let v = [1.5, -0.25];
        assert_eq!(decode(&encode(&v, Dtype::F32), Dtype::F32), v);
    }
}
