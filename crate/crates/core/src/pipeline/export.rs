use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    PgmGrid,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "pgm" | "pgm-grid" => Ok(ExportFormat::PgmGrid),
            _ => Err(Error::config(format!("unknown export format `{s}` (expected csv|pgm)"))),
        }
    }
}

/// Header `dim0,...,dimK` then one row per sample. `{:?}` on f64 prints the
/// shortest string that parses back to the same value.
pub fn csv_string(samples: &Tensor) -> String {
    let dim = samples.cols();
    let mut out = (0..dim).map(|i| format!("dim{i}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for r in samples.iter_rows() {
        out.push_str(&r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Binary P5 image tiling each sample as a `side x side` square, row-major,
/// on a grid `ceil(sqrt(n))` tiles wide. Pixels are `round(255 x)`.
pub fn pgm_bytes(samples: &Tensor) -> Result<Vec<u8>> {
    let dim = samples.cols();
    let side = (dim as f64).sqrt().round() as usize;
    if dim == 0 || side * side != dim {
        return Err(Error::Format { offset: 0, msg: format!("pgm export needs square sample dims, got {dim}") });
    }
    let n = samples.rows();
    let cols = ((n as f64).sqrt().ceil() as usize).max(1);
    let rows = n.div_ceil(cols).max(1);
    let (w, h) = (cols * side, rows * side);
    let mut raster = vec![0u8; w * h];
    for (k, s) in samples.iter_rows().enumerate() {
        let (ty, tx) = (k / cols, k % cols);
        for (p, v) in s.iter().enumerate() {
            let (i, j) = (p / side, p % side);
            raster[(ty * side + i) * w + tx * side + j] = (255.0 * v).round().clamp(0.0, 255.0) as u8;
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(raster);
    Ok(out)
}

/// Writes `samples` atomically in the requested format.
pub fn export_samples(samples: &Tensor, path: &Path, format: ExportFormat) -> Result<()> {
    let bytes = match format {
        ExportFormat::Csv => csv_string(samples).into_bytes(),
        ExportFormat::PgmGrid => pgm_bytes(samples)?,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`export_samples`].
pub fn read_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::data("empty CSV"))?;
    let dim = header.split(',').filter(|s| !s.is_empty()).count();
    let mut data = Vec::new();
    let mut n = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::data(format!("line {}: bad number `{s}`", i + 2))))
            .collect::<Result<_>>()?;
        if row.len() != dim {
            return Err(Error::data(format!("line {}: {} fields, header has {dim}", i + 2, row.len())));
        }
        data.extend(row);
        n += 1;
    }
    Tensor::matrix(n, dim, data)
}
