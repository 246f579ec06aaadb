//! On-disk formats for FCN matrices and BOLD series.
//!
//! FCN binary layout (little endian): magic `FCN1`, `u32` dimension `D`, then
//! `D * D` row-major `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{BoldSeries, FcnMatrix};
use crate::error::{Error, Result};

pub const FCN_MAGIC: &[u8; 4] = b"FCN1";

pub fn encode_fcn(fcn: &FcnMatrix) -> Vec<u8> {
    let d = fcn.dim();
    let mut buf = Vec::with_capacity(8 + d * d * 8);
    buf.extend_from_slice(FCN_MAGIC);
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in fcn.values().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_fcn(bytes: &[u8], path: &Path) -> Result<FcnMatrix> {
    if bytes.len() < 8 || &bytes[..4] != FCN_MAGIC {
        return Err(Error::format(path, "missing FCN1 header"));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != d * d * 8 {
        return Err(Error::format(
            path,
            format!(
                "expected {} payload bytes for D={d}, found {}",
                d * d * 8,
                body.len()
            ),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let values = Array2::from_shape_vec((d, d), values).expect("length checked");
    FcnMatrix::from_values(values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_fcn(fcn: &FcnMatrix, path: &Path) -> Result<()> {
    write_atomic(path, &encode_fcn(fcn))
}

pub fn read_fcn(path: &Path) -> Result<FcnMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fcn(&bytes, path)
}

/// Headered CSV: first row `roi,<names..>`, then one labelled row per region.
pub fn write_fcn_csv(fcn: &FcnMatrix, roi_names: &[String], path: &Path) -> Result<()> {
    if roi_names.len() != fcn.dim() {
        return Err(Error::InvalidInput(format!(
            "{} names for a {}-region FCN",
            roi_names.len(),
            fcn.dim()
        )));
    }
    write_labelled_csv(fcn.values(), roi_names, roi_names, path)
}

pub fn read_fcn_csv(path: &Path) -> Result<(FcnMatrix, Vec<String>)> {
    let (values, rows, _) = read_labelled_csv(path)?;
    let fcn = FcnMatrix::from_values(values).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((fcn, rows))
}

/// Writes a matrix with a header row and a leading label column. Values use
/// the shortest representation that parses back to the same `f64`.
pub fn write_labelled_csv(
    values: &Array2<f64>,
    row_labels: &[String],
    col_labels: &[String],
    path: &Path,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("label".to_string()).chain(col_labels.iter().cloned());
    wtr.write_record(header)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for (i, label) in row_labels.iter().enumerate() {
        let row: Vec<String> = std::iter::once(label.clone())
            .chain(values.row(i).iter().map(|v| v.to_string()))
            .collect();
        wtr.write_record(row)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_labelled_csv(path: &Path) -> Result<(Array2<f64>, Vec<String>, Vec<String>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let col_labels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut row_labels = Vec::new();
    let mut data = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if record.len() != col_labels.len() + 1 {
            return Err(Error::format(path, "ragged row"));
        }
        row_labels.push(record[0].to_string());
        for field in record.iter().skip(1) {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(path, format!("bad number {field:?}")))?,
            );
        }
    }
    let values = Array2::from_shape_vec((row_labels.len(), col_labels.len()), data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((values, row_labels, col_labels))
}

/// BOLD series as CSV: header of region names, one row per time point.
pub fn write_bold_csv(series: &BoldSeries, roi_names: &[String], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(roi_names)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for row in series.samples().rows() {
        wtr.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_bold_csv(path: &Path, subject_id: &str) -> Result<(BoldSeries, Vec<String>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if record.len() != names.len() {
            return Err(Error::format(
                path,
                format!("row {} has {} fields", rows + 1, record.len()),
            ));
        }
        for field in record.iter() {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(path, format!("bad number {field:?}")))?,
            );
        }
        rows += 1;
    }
    let samples = Array2::from_shape_vec((rows, names.len()), data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let series =
        BoldSeries::new(subject_id, samples).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((series, names))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcn::pearson_fcn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_fcn() -> FcnMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = Array2::from_shape_fn((20, 5), |_| rng.random::<f64>());
        pearson_fcn(&BoldSeries::new("x", samples).unwrap()).unwrap()
    }

    #[test]
    fn binary_layout_is_exact() {
        let fcn = sample_fcn();
        let bytes = encode_fcn(&fcn);
        assert_eq!(&bytes[..4], b"FCN1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 8 + 25 * 8);
        let v01 = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        assert_eq!(v01, fcn.values()[[0, 1]]);
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fcn = sample_fcn();
        let bin = dir.path().join("a.fcn");
        write_fcn(&fcn, &bin).unwrap();
        assert_eq!(read_fcn(&bin).unwrap().values(), fcn.values());

        let names: Vec<String> = (0..5).map(|i| format!("r{i}")).collect();
        let csv_path = dir.path().join("a.csv");
        write_fcn_csv(&fcn, &names, &csv_path).unwrap();
        let (back, labels) = read_fcn_csv(&csv_path).unwrap();
        assert_eq!(labels, names);
        assert_eq!(back.values(), fcn.values());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode_fcn(&sample_fcn());
        assert!(decode_fcn(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        assert!(decode_fcn(b"FCN2\0\0\0\0", Path::new("x")).is_err());
    }

    #[test]
    fn bold_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = Array2::from_shape_fn((4, 3), |(t, j)| (t * 3 + j) as f64 * 0.1);
        let series = BoldSeries::new("s1", samples).unwrap();
        let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let path = dir.path().join("s1.csv");
        write_bold_csv(&series, &names, &path).unwrap();
        let (back, back_names) = read_bold_csv(&path, "s1").unwrap();
        assert_eq!(back_names, names);
        assert_eq!(back.samples(), series.samples());
    }
}
