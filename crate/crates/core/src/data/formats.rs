use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::{Likelihood, SampleShape};

fn ingest(record: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Ingest {
        record: record.into(),
        reason: reason.into(),
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| ingest(path.display().to_string(), format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX file, returning its dimensions and payload.
fn parse_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    let name = path.display().to_string();
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(ingest(name, "missing IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(ingest(name, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(ingest(name, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    if bytes.len() - header != expected {
        return Err(ingest(
            name,
            format!("IDX payload has {} bytes, dimensions {dims:?} need {expected}", bytes.len() - header),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Loads `N × H × W` IDX images scaled to `[0, 1]` with optional IDX labels.
pub fn load_idx(images: &Path, labels: Option<&Path>, limit: Option<usize>) -> Result<Dataset> {
    let (dims, payload) = parse_idx(images)?;
    if dims.len() != 3 {
        return Err(ingest(
            images.display().to_string(),
            format!("expected 3 image dimensions, found {dims:?}"),
        ));
    }
    let (n_all, h, w) = (dims[0], dims[1], dims[2]);
    let n = limit.map_or(n_all, |l| l.min(n_all));
    let samples = Array2::from_shape_vec((n, h * w), payload[..n * h * w].iter().map(|&b| b as f32 / 255.0).collect())
        .expect("sizes checked");
    let labels = match labels {
        Some(path) => {
            let (ldims, lab) = parse_idx(path)?;
            if ldims != [n_all] {
                return Err(ingest(
                    path.display().to_string(),
                    format!("label dimensions {ldims:?} do not match {n_all} images"),
                ));
            }
            Some(lab[..n].iter().map(|&b| b as usize).collect())
        }
        None => None,
    };
    Dataset::new(
        samples,
        labels,
        SampleShape {
            channels: 1,
            height: h,
            width: w,
        },
        Likelihood::Bernoulli,
    )
}

fn parse_feature_column(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix('c')?;
    let (ch, step) = rest.split_once("_t")?;
    Some((ch.parse().ok()?, step.parse().ok()?))
}

/// Reads a timeseries CSV: one sample per row, an optional integer `label`
/// column and feature columns named `c<channel>_t<step>` (0-based). The
/// result has shape `channels × 1 × steps` in Gaussian mode.
pub fn load_csv_timeseries(path: &Path) -> Result<Dataset> {
    let name = path.display().to_string();
    let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let headers = reader
        .headers()
        .map_err(|e| ingest(&name, format!("header: {e}")))?
        .clone();
    let mut label_col = None;
    let mut features = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        let h = h.trim();
        if h == "label" {
            label_col = Some(i);
        } else if let Some(cs) = parse_feature_column(h) {
            features.push((i, cs));
        } else {
            return Err(ingest(format!("{name} header"), format!("unrecognized column `{h}`")));
        }
    }
    let channels = features.iter().map(|f| f.1 .0).max().map_or(0, |m| m + 1);
    let steps = features.iter().map(|f| f.1 .1).max().map_or(0, |m| m + 1);
    if channels * steps == 0 || features.len() != channels * steps {
        return Err(ingest(
            format!("{name} header"),
            format!("{} feature columns do not form a full {channels} × {steps} grid", features.len()),
        ));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut row = vec![0f32; channels * steps];
    for (r, record) in reader.records().enumerate() {
        let line = format!("{name} record {}", r + 1);
        let record = record.map_err(|e| ingest(&line, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(ingest(&line, format!("{} fields, header has {}", record.len(), headers.len())));
        }
        for &(col, (ch, step)) in &features {
            let v: f32 = record[col]
                .trim()
                .parse()
                .map_err(|_| ingest(&line, format!("column {} is not a number: `{}`", &headers[col], &record[col])))?;
            if !v.is_finite() {
                return Err(ingest(&line, format!("non-finite value in column {}", &headers[col])));
            }
            row[ch * steps + step] = v;
        }
        values.extend_from_slice(&row);
        if let Some(c) = label_col {
            labels.push(
                record[c]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| ingest(&line, format!("label `{}` is not a class index", &record[c])))?,
            );
        }
    }
    let n = values.len() / (channels * steps);
    Dataset::new(
        Array2::from_shape_vec((n, channels * steps), values).expect("row sizes fixed"),
        label_col.map(|_| labels),
        SampleShape {
            channels,
            height: 1,
            width: steps,
        },
        Likelihood::Gaussian,
    )
}

/// Leading bytes of the tensor cache.
pub const CACHE_MAGIC: &[u8; 8] = b"VDCDATA1";

/// Writes a dataset as: magic, mode byte (0 Bernoulli, 1 Gaussian),
/// `u32` channels, height, width, `u64` rows, label flag byte, row-major
/// little-endian `f32` values, then one `u32` label per row if flagged.
pub fn save_cache(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&[match dataset.mode {
        Likelihood::Bernoulli => 0,
        Likelihood::Gaussian => 1,
    }])?;
    for d in [dataset.shape.channels, dataset.shape.height, dataset.shape.width] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(dataset.len() as u64).to_le_bytes())?;
    w.write_all(&[dataset.labels.is_some() as u8])?;
    for v in dataset.samples.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(labels) = &dataset.labels {
        for &l in labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<Dataset> {
    let name = path.display().to_string();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let header = 8 + 1 + 12 + 8 + 1;
    if bytes.len() < header || &bytes[..8] != CACHE_MAGIC {
        return Err(ingest(name, "not a dataset cache"));
    }
    let mode = match bytes[8] {
        0 => Likelihood::Bernoulli,
        1 => Likelihood::Gaussian,
        m => return Err(ingest(name, format!("unknown mode byte {m}"))),
    };
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let shape = SampleShape {
        channels: u32_at(9),
        height: u32_at(13),
        width: u32_at(17),
    };
    let n = u64::from_le_bytes(bytes[21..29].try_into().expect("8 bytes")) as usize;
    let has_labels = bytes[29] != 0;
    let len = shape.len();
    let need = header + 4 * n * len + if has_labels { 4 * n } else { 0 };
    if bytes.len() != need {
        return Err(ingest(name, format!("cache has {} bytes, header implies {need}", bytes.len())));
    }
    let body = &bytes[header..header + 4 * n * len];
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = has_labels.then(|| {
        bytes[header + 4 * n * len..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect()
    });
    Dataset::new(
        Array2::from_shape_vec((n, len), values).expect("length checked"),
        labels,
        shape,
        mode,
    )
}
