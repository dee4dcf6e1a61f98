//! File formats: tensor descriptors, long CSV, linked manifests and models.
//!
//! A tensor descriptor is a JSON object
//! `{"format_version": 1, "shape": [..], "layout": "row-major", "dtype": "f64", ..}`
//! holding either inline `data` (with `null` or `"NaN"` for missing entries)
//! or a `data_file` of little-endian f64 values next to the descriptor, in
//! which NaN marks a missing entry. Long CSV files have a header
//! `i1,..,iN,value` with 1-based indices; unlisted cells and empty or NaN
//! values are missing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::LinkedTensorSet;
use crate::error::{Error, Result};
use crate::model::{ModelDocument, MultifacModel, FORMAT_VERSION};
use crate::tensor::{DenseTensor, ObservationMask, Shape};

/// JSON description of a dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub format_version: u32,
    pub shape: Vec<usize>,
    #[serde(default = "row_major")]
    pub layout: String,
    #[serde(default = "f64_name")]
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<Cell>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<String>,
    #[serde(default = "nan_name")]
    pub missing: String,
}

fn row_major() -> String {
    "row-major".into()
}

fn f64_name() -> String {
    "f64".into()
}

fn nan_name() -> String {
    "nan".into()
}

/// One inline value; `null` or the string `"NaN"` is missing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Value(f64),
    Text(MissingText),
    Missing(Option<()>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MissingText {
    NaN,
}

impl Cell {
    fn value(self) -> f64 {
        match self {
            Cell::Value(v) => v,
            _ => f64::NAN,
        }
    }

    fn from_value(v: f64) -> Self {
        if v.is_nan() {
            Cell::Missing(None)
        } else {
            Cell::Value(v)
        }
    }
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| format_err(path, e))
}

/// Reads any JSON document.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Reads a tensor from a `.csv` long table or a JSON descriptor.
pub fn read_tensor(path: &Path) -> Result<(DenseTensor, ObservationMask)> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        read_long_csv(path, None)
    } else {
        read_descriptor(path)
    }
}

fn read_descriptor(path: &Path) -> Result<(DenseTensor, ObservationMask)> {
    let d: TensorDescriptor = read_json(path)?;
    if d.format_version != FORMAT_VERSION {
        return Err(format_err(
            path,
            format!("unsupported format_version {}", d.format_version),
        ));
    }
    if d.layout != "row-major" {
        return Err(format_err(path, format!("unsupported layout '{}'", d.layout)));
    }
    if d.dtype != "f64" {
        return Err(format_err(path, format!("unsupported dtype '{}'", d.dtype)));
    }
    if !d.missing.eq_ignore_ascii_case("nan") {
        return Err(format_err(path, format!("unsupported missing marker '{}'", d.missing)));
    }
    let shape = Shape::new(d.shape.clone()).map_err(|e| format_err(path, e))?;
    let values: Vec<f64> = match (&d.data, &d.data_file) {
        (Some(cells), None) => cells.iter().map(|c| c.value()).collect(),
        (None, Some(file)) => {
            let full = path.parent().unwrap_or(Path::new(".")).join(file);
            let bytes = fs::read(&full).map_err(|e| format_err(&full, e))?;
            if bytes.len() % 8 != 0 {
                return Err(format_err(
                    &full,
                    format!("{} bytes is not a whole number of f64 values", bytes.len()),
                ));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        }
        (Some(_), Some(_)) => {
            return Err(format_err(path, "give either 'data' or 'data_file', not both"))
        }
        (None, None) => return Err(format_err(path, "missing 'data' or 'data_file'")),
    };
    if values.len() != shape.numel() {
        return Err(format_err(
            path,
            format!(
                "shape {:?} needs {} values, found {}",
                d.shape,
                shape.numel(),
                values.len()
            ),
        ));
    }
    if let Some(i) = values.iter().position(|v| v.is_infinite()) {
        return Err(format_err(path, format!("entry {} is infinite", i + 1)));
    }
    let mask = ObservationMask::from_nan(&values, shape.clone())?;
    let values = values
        .into_iter()
        .map(|v| if v.is_nan() { 0.0 } else { v })
        .collect();
    Ok((DenseTensor::new(shape, values)?, mask))
}

/// Writes a descriptor; with `sidecar`, the values go to `<stem>.bin` beside it.
pub fn write_tensor(
    path: &Path,
    tensor: &DenseTensor,
    mask: Option<&ObservationMask>,
    sidecar: bool,
) -> Result<()> {
    let values: Vec<f64> = tensor
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| match mask {
            Some(m) if !m.observed()[i] => f64::NAN,
            _ => v,
        })
        .collect();
    let mut d = TensorDescriptor {
        format_version: FORMAT_VERSION,
        shape: tensor.dims().to_vec(),
        layout: row_major(),
        dtype: f64_name(),
        data: None,
        data_file: None,
        missing: nan_name(),
    };
    if sidecar {
        let bin = path.with_extension("bin");
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&bin, bytes)?;
        d.data_file = bin.file_name().map(|n| n.to_string_lossy().into_owned());
    } else {
        d.data = Some(values.into_iter().map(Cell::from_value).collect());
    }
    write_json(path, &d)
}

/// Reads a long CSV table. The shape defaults to the largest index per mode.
pub fn read_long_csv(path: &Path, shape: Option<&[usize]>) -> Result<(DenseTensor, ObservationMask)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format_err(path, e))?;
    let header = reader.headers().map_err(|e| format_err(path, e))?.clone();
    let order = header.len().saturating_sub(1);
    let expected: Vec<String> = (1..=order).map(|i| format!("i{i}")).collect();
    let ok = order >= 1
        && header.iter().take(order).zip(&expected).all(|(h, e)| h == e)
        && header.get(order) == Some("value");
    if !ok {
        return Err(format_err(
            path,
            format!("header must be i1,..,iN,value; found '{}'", header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows: Vec<(Vec<usize>, f64)> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e))?;
        let lineno = line + 2;
        if rec.len() != order + 1 {
            return Err(format_err(
                path,
                format!("line {lineno}: expected {} fields, found {}", order + 1, rec.len()),
            ));
        }
        let mut idx = Vec::with_capacity(order);
        for (m, field) in rec.iter().take(order).enumerate() {
            let i: usize = field.parse().map_err(|_| {
                format_err(path, format!("line {lineno}: index i{} '{field}' is not a positive integer", m + 1))
            })?;
            if i == 0 {
                return Err(format_err(path, format!("line {lineno}: indices are 1-based, found 0")));
            }
            idx.push(i - 1);
        }
        let raw = &rec[order];
        let v = if raw.is_empty() || raw.eq_ignore_ascii_case("nan") || raw.eq_ignore_ascii_case("na") {
            f64::NAN
        } else {
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format_err(path, format!("line {lineno}: value '{raw}' is not a finite number")))?
        };
        rows.push((idx, v));
    }
    let dims: Vec<usize> = match shape {
        Some(s) => {
            if s.len() != order {
                return Err(format_err(path, format!("shape has {} modes, file has {order}", s.len())));
            }
            s.to_vec()
        }
        None => (0..order)
            .map(|m| rows.iter().map(|(i, _)| i[m] + 1).max().unwrap_or(0))
            .collect(),
    };
    let shape = Shape::new(dims).map_err(|e| format_err(path, e))?;
    let mut values = vec![0.0; shape.numel()];
    let mut observed = vec![false; shape.numel()];
    let mut seen = vec![false; shape.numel()];
    for (line, (idx, v)) in rows.iter().enumerate() {
        if idx.iter().zip(shape.dims()).any(|(&i, &d)| i >= d) {
            return Err(format_err(path, format!("line {}: index outside shape {:?}", line + 2, shape.dims())));
        }
        let flat = shape.ravel(idx);
        if seen[flat] {
            return Err(format_err(path, format!("line {}: duplicate cell", line + 2)));
        }
        seen[flat] = true;
        if !v.is_nan() {
            values[flat] = *v;
            observed[flat] = true;
        }
    }
    Ok((DenseTensor::new(shape.clone(), values)?, ObservationMask::new(shape, observed)?))
}

/// Writes a long CSV table with one row per observed entry.
pub fn write_long_csv(path: &Path, tensor: &DenseTensor, mask: Option<&ObservationMask>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let order = tensor.shape().order();
    let mut header: Vec<String> = (1..=order).map(|i| format!("i{i}")).collect();
    header.push("value".into());
    w.write_record(&header)?;
    let mut idx = vec![0; order];
    for (flat, v) in tensor.values().iter().enumerate() {
        if mask.is_some_and(|m| !m.observed()[flat]) {
            continue;
        }
        tensor.shape().unravel(flat, &mut idx);
        let mut rec: Vec<String> = idx.iter().map(|i| (i + 1).to_string()).collect();
        rec.push(format!("{v:?}"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// List of tensors linked along their first mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedManifest {
    #[serde(default = "version")]
    pub format_version: u32,
    /// Tensor files, relative to the manifest's directory.
    pub tensors: Vec<String>,
    /// 1-based shared mode; only the first mode is supported.
    #[serde(default = "first_mode")]
    pub shared_mode: usize,
}

fn version() -> u32 {
    FORMAT_VERSION
}

fn first_mode() -> usize {
    1
}

/// Reads every tensor named by a manifest.
pub fn read_linked(path: &Path) -> Result<LinkedTensorSet> {
    let m: LinkedManifest = read_json(path)?;
    if m.shared_mode != 1 {
        return Err(format_err(
            path,
            format!("shared_mode must be 1, found {}", m.shared_mode),
        ));
    }
    if m.tensors.is_empty() {
        return Err(format_err(path, "manifest lists no tensors"));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let paths: Vec<PathBuf> = m.tensors.iter().map(|t| dir.join(t)).collect();
    read_tensor_files(&paths)
}

/// Reads tensors from individual files into a linked set.
pub fn read_tensor_files(paths: &[PathBuf]) -> Result<LinkedTensorSet> {
    let mut tensors = Vec::with_capacity(paths.len());
    let mut masks = Vec::with_capacity(paths.len());
    for p in paths {
        let (t, m) = read_tensor(p)?;
        tensors.push(t);
        masks.push(m);
    }
    LinkedTensorSet::new(tensors, masks)
}

/// Saves a model with its zero threshold.
pub fn save_model(path: &Path, model: &MultifacModel, threshold: f64) -> Result<()> {
    write_json(path, &ModelDocument::from_model(model, threshold))
}

/// Loads a model and its zero threshold.
pub fn load_model(path: &Path) -> Result<(MultifacModel, f64)> {
    let doc: ModelDocument = read_json(path)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(format_err(
            path,
            format!("unsupported format_version {}", doc.format_version),
        ));
    }
    let threshold = doc.threshold;
    let model = doc.to_model().map_err(|e| format_err(path, e))?;
    Ok((model, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (DenseTensor, ObservationMask) {
        let shape = Shape::new(vec![2, 3, 2]).unwrap();
        let t = DenseTensor::from_fn(shape.clone(), |i| (i[0] * 6 + i[1] * 2 + i[2]) as f64 - 2.5);
        let mut obs = vec![true; 12];
        obs[4] = false;
        obs[9] = false;
        let m = ObservationMask::new(shape, obs).unwrap();
        (t, m)
    }

    fn masked(t: &DenseTensor, m: &ObservationMask) -> DenseTensor {
        let v = t
            .values()
            .iter()
            .zip(m.observed())
            .map(|(&v, &o)| if o { v } else { 0.0 })
            .collect();
        DenseTensor::new(t.shape().clone(), v).unwrap()
    }

    #[test]
    fn descriptor_round_trips_inline_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let (t, m) = sample();
        for sidecar in [false, true] {
            let p = dir.path().join(format!("x{sidecar}.json"));
            write_tensor(&p, &t, Some(&m), sidecar).unwrap();
            let (t2, m2) = read_tensor(&p).unwrap();
            assert_eq!(m2, m);
            assert_eq!(t2, masked(&t, &m));
        }
    }

    #[test]
    fn inline_nan_string_and_null_are_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        fs::write(
            &p,
            r#"{"format_version":1,"shape":[2,2],"data":[1.0,null,"NaN",4.0]}"#,
        )
        .unwrap();
        let (t, m) = read_tensor(&p).unwrap();
        assert_eq!(m.observed(), &[true, false, false, true]);
        assert_eq!(t.values(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn descriptor_errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        fs::write(&p, r#"{"format_version":1,"shape":[2,2],"data":[1.0,2.0,3.0]}"#).unwrap();
        let e = read_tensor(&p).unwrap_err().to_string();
        assert!(e.contains("needs 4 values, found 3"), "{e}");
        fs::write(&p, r#"{"format_version":1,"shape":[2,2],"layout":"col-major","data":[1,2,3,4]}"#).unwrap();
        assert!(read_tensor(&p).unwrap_err().to_string().contains("layout"));
        fs::write(&p, r#"{"format_version":7,"shape":[1],"data":[1]}"#).unwrap();
        assert!(read_tensor(&p).unwrap_err().to_string().contains("format_version"));
    }

    #[test]
    fn long_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (t, m) = sample();
        let p = dir.path().join("t.csv");
        write_long_csv(&p, &t, Some(&m)).unwrap();
        let (t2, m2) = read_long_csv(&p, Some(&[2, 3, 2])).unwrap();
        assert_eq!(m2, m);
        assert_eq!(t2, masked(&t, &m));
    }

    #[test]
    fn long_csv_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "i1,i2,value\n1,1,2.0\n0,1,3.0\n").unwrap();
        assert!(read_tensor(&p).unwrap_err().to_string().contains("line 3"));
        fs::write(&p, "a,b,value\n1,1,2.0\n").unwrap();
        assert!(read_tensor(&p).unwrap_err().to_string().contains("header"));
        fs::write(&p, "i1,i2,value\n1,1,2.0\n1,1,3.0\n").unwrap();
        assert!(read_tensor(&p).unwrap_err().to_string().contains("duplicate"));
        fs::write(&p, "i1,i2,value\n1,1,abc\n").unwrap();
        assert!(read_tensor(&p).unwrap_err().to_string().contains("abc"));
    }

    #[test]
    fn manifest_reads_linked_set() {
        let dir = tempfile::tempdir().unwrap();
        let (t, m) = sample();
        write_tensor(&dir.path().join("a.json"), &t, Some(&m), false).unwrap();
        let b = DenseTensor::from_fn(Shape::new(vec![2, 4]).unwrap(), |i| i[1] as f64);
        write_tensor(&dir.path().join("b.json"), &b, None, true).unwrap();
        let mp = dir.path().join("linked.json");
        fs::write(&mp, r#"{"tensors":["a.json","b.json"],"shared_mode":1}"#).unwrap();
        let set = read_linked(&mp).unwrap();
        assert_eq!(set.n_tensors(), 2);
        assert_eq!(set.shared_dim(), 2);
        fs::write(&mp, r#"{"tensors":["a.json"],"shared_mode":2}"#).unwrap();
        assert!(read_linked(&mp).unwrap_err().to_string().contains("shared_mode"));
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = MultifacModel::new(
            crate::Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap(),
            vec![vec![crate::Matrix::from_rows(&[vec![0.25, 1.0]]).unwrap()]],
            0.75,
        )
        .unwrap();
        let p = dir.path().join("m.json");
        save_model(&p, &model, 1e-6).unwrap();
        let (back, tau) = load_model(&p).unwrap();
        assert_eq!(back, model);
        assert_eq!(tau, 1e-6);
    }
}
