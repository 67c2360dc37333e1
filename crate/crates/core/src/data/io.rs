//! Dataset file formats: CSV rows and the big-endian-magic binary image
//! format used by MNIST-style corpora.
//!
//! Parse failures carry the byte offset of the offending content so broken
//! files can be inspected with a hex dump.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Magic number of a binary image file (third byte = rank 3).
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
/// Magic number of a binary label file (third byte = rank 1).
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// One sample per row: `label,f1,...,fd`. Features are taken verbatim.
    Csv,
    /// Binary images plus a sibling label file; pixels are scaled to [0,1].
    Idx,
}

impl DataFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "idx" => Ok(DataFormat::Idx),
            other => Err(Error::Config(format!(
                "unknown data format `{other}` (expected csv or idx)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Idx => "idx",
        }
    }
}

/// Loads a dataset from disk.
///
/// `num_classes` bounds the label range; when `None` it is inferred as
/// `max label + 1`. For the binary format, `path` names the image file and
/// the label file is `labels_path` if given, otherwise inferred by replacing
/// `images`→`labels` and `idx3`→`idx1` in the file name.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    num_classes: Option<usize>,
    labels_path: Option<&Path>,
) -> Result<LabeledDataset> {
    match format {
        DataFormat::Csv => load_csv(path, num_classes),
        DataFormat::Idx => {
            let labels = match labels_path {
                Some(p) => p.to_path_buf(),
                None => infer_labels_path(path)?,
            };
            load_idx(path, &labels, num_classes)
        }
    }
}

fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let content = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    let mut max_label = 0usize;
    let mut width: Option<usize> = None;
    let mut offset = 0u64;
    for line in content.split_inclusive('\n') {
        let line_offset = offset;
        offset += line.len() as u64;
        let row = line.trim_end_matches(['\n', '\r']);
        if row.trim().is_empty() {
            continue;
        }
        let mut fields = row.split(',');
        let label_text = fields.next().expect("split yields at least one field");
        let label: usize = label_text.trim().parse().map_err(|_| Error::Parse {
            offset: line_offset,
            message: format!("`{label_text}` is not a valid label"),
        })?;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(Error::Parse {
                    offset: line_offset,
                    message: format!("label {label} is out of range for {c} classes"),
                });
            }
        }
        max_label = max_label.max(label);
        let mut features = Vec::new();
        let mut field_offset = line_offset + label_text.len() as u64 + 1;
        for field in fields {
            let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
                offset: field_offset,
                message: format!("`{field}` is not a valid feature value"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    offset: field_offset,
                    message: format!("feature value `{field}` is not finite"),
                });
            }
            features.push(value);
            field_offset += field.len() as u64 + 1;
        }
        match width {
            None => {
                if features.is_empty() {
                    return Err(Error::Parse {
                        offset: line_offset,
                        message: "row has a label but no features".into(),
                    });
                }
                width = Some(features.len());
            }
            Some(w) if w != features.len() => {
                return Err(Error::Parse {
                    offset: line_offset,
                    message: format!("row has {} features, expected {w}", features.len()),
                });
            }
            Some(_) => {}
        }
        samples.push((Tensor::from_vec(features), label));
    }
    if samples.is_empty() {
        return Err(Error::Parse { offset: 0, message: "file contains no data rows".into() });
    }
    LabeledDataset::new(samples, num_classes.unwrap_or(max_label + 1))
}

fn infer_labels_path(images: &Path) -> Result<PathBuf> {
    let name = images
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Data(format!("image path {} has no file name", images.display())))?;
    let replaced = name.replace("images", "labels").replace("idx3", "idx1");
    if replaced == name {
        return Err(Error::Data(format!(
            "cannot infer a label file for {}; pass the label path explicitly",
            images.display()
        )));
    }
    Ok(images.with_file_name(replaced))
}

fn load_idx(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", images.display())))?;
    let label_bytes = fs::read(labels)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", labels.display())))?;

    let magic = read_be_u32(&image_bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(&image_bytes, 4)? as usize;
    let height = read_be_u32(&image_bytes, 8)? as usize;
    let width = read_be_u32(&image_bytes, 12)? as usize;
    if height == 0 || width == 0 {
        return Err(Error::Parse { offset: 8, message: "zero image dimensions".into() });
    }
    let pixel_count = count
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or(Error::Parse { offset: 4, message: "image dimensions overflow".into() })?;
    if image_bytes.len() < 16 + pixel_count {
        return Err(Error::Parse {
            offset: image_bytes.len() as u64,
            message: format!(
                "image file truncated: need {} bytes, have {}",
                16 + pixel_count,
                image_bytes.len()
            ),
        });
    }

    let label_magic = read_be_u32(&label_bytes, 0)?;
    if label_magic != LABEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("label magic {label_magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let label_count = read_be_u32(&label_bytes, 4)? as usize;
    if label_count != count {
        return Err(Error::Data(format!(
            "{} has {count} images but {} has {label_count} labels",
            images.display(),
            labels.display()
        )));
    }
    if label_bytes.len() < 8 + count {
        return Err(Error::Parse {
            offset: label_bytes.len() as u64,
            message: format!(
                "label file truncated: need {} bytes, have {}",
                8 + count,
                label_bytes.len()
            ),
        });
    }

    let mut max_label = 0usize;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let label = label_bytes[8 + i] as usize;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(Error::Parse {
                    offset: (8 + i) as u64,
                    message: format!("label {label} is out of range for {c} classes"),
                });
            }
        }
        max_label = max_label.max(label);
        let start = 16 + i * height * width;
        let pixels: Vec<f64> = image_bytes[start..start + height * width]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        samples.push((Tensor::new(vec![1, height, width], pixels)?, label));
    }
    LabeledDataset::new(samples, num_classes.unwrap_or(max_label + 1))
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: format!("file truncated: need {end} header bytes"),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().expect("slice is 4 bytes")))
}

/// Writes a dataset as CSV rows. Feature values use the shortest decimal
/// form that parses back to the same number, so load-after-write is exact.
pub fn write_csv_dataset(data: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        out.push_str(&y.to_string());
        for v in x.data() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Writes a dataset in the binary image format. Samples must be rank-2
/// `[h, w]` or rank-3 `[1, h, w]` with features in [0,1]; pixels are stored
/// as `round(v * 255)`.
pub fn write_idx_dataset(data: &LabeledDataset, images: &Path, labels: &Path) -> Result<()> {
    if data.num_classes() > 256 {
        return Err(Error::Data("binary label files hold at most 256 classes".into()));
    }
    let (height, width) = match data.feature_shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::Data(format!(
                "binary image format needs [h, w] or [1, h, w] samples, got {other:?}"
            )))
        }
    };
    let mut image_out = Vec::with_capacity(16 + data.len() * height * width);
    image_out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    image_out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    image_out.extend_from_slice(&(height as u32).to_be_bytes());
    image_out.extend_from_slice(&(width as u32).to_be_bytes());
    let mut label_out = Vec::with_capacity(8 + data.len());
    label_out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    label_out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        for &v in x.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!(
                    "sample {i} has feature {v} outside [0,1]; cannot quantize to bytes"
                )));
            }
            image_out.push((v * 255.0).round() as u8);
        }
        label_out.push(y as u8);
    }
    fs::write(images, image_out)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", images.display())))?;
    fs::write(labels, label_out)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", labels.display())))?;
    Ok(())
}
