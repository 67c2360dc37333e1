//! Binary model checkpoints.
//!
//! A checkpoint is a flat sequence of tensor records — little-endian
//! `(name_len: u32, name, rank: u32, dims: u32 × rank, data: f64 × n)` — with
//! two records per layer (`<layer>.weight`, `<layer>.bias`) in canonical
//! block order, plus a `<file>.json` sidecar holding the partition layout.
//! `f64` bits pass through untouched, so save/load round-trips are exact.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{BlockEntry, ParameterBlock, PartitionLayout, PartitionedModel};
use crate::nn::{Architecture, LayerParams, Tensor};

const WEIGHT_SUFFIX: &str = ".weight";
const BIAS_SUFFIX: &str = ".bias";
/// Caps that keep a corrupt header from asking for gigabytes.
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 28;

/// `<path>.json`, next to the binary file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Writes the model's flattened parameters to `path` and its layout to the
/// JSON sidecar.
pub fn save_model(path: &Path, model: &PartitionedModel) -> Result<()> {
    write_block(path, &model.flatten())?;
    let json = serde_json::to_string_pretty(model.layout())
        .map_err(|e| Error::Internal(format!("layout serialization failed: {e}")))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Loads a model saved by [`save_model`], validating it against `arch`.
pub fn load_model(path: &Path, arch: Arc<Architecture>) -> Result<PartitionedModel> {
    let flat = read_block(path)?;
    let sidecar = sidecar_path(path);
    let json = fs::read_to_string(&sidecar)?;
    let layout: PartitionLayout = serde_json::from_str(&json).map_err(|e| {
        Error::Schema(format!("layout sidecar {} did not parse: {e}", sidecar.display()))
    })?;
    PartitionedModel::from_flat(arch, layout, &flat)
}

/// Writes one parameter block as a record stream.
pub fn write_block(path: &Path, blockb: &ParameterBlock) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in blockb.entries() {
        write_record(&mut w, &format!("{}{WEIGHT_SUFFIX}", e.name), &e.params.weights)?;
        write_record(&mut w, &format!("{}{BIAS_SUFFIX}", e.name), &e.params.bias)?;
    }
    w.flush()?;
    Ok(())
}

fn write_record(w: &mut impl Write, name: &str, tensor: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a record stream back into a block. Weight/bias records must appear
/// in pairs; entry positions follow file order (reassembly into a model
/// re-derives canonical positions from the architecture).
pub fn read_block(path: &Path) -> Result<ParameterBlock> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut offset = 0u64;
    let mut entries = Vec::new();
    let mut pending: Option<(String, Tensor, u64)> = None;
    loop {
        let record_start = offset;
        let Some((name, tensor)) = read_record(&mut r, &mut offset)? else {
            break;
        };
        if let Some(stem) = name.strip_suffix(WEIGHT_SUFFIX) {
            if let Some((prev, _, at)) = &pending {
                return Err(Error::Parse {
                    offset: *at,
                    message: format!("weight record `{prev}` has no matching bias record"),
                });
            }
            pending = Some((stem.to_string(), tensor, record_start));
        } else if let Some(stem) = name.strip_suffix(BIAS_SUFFIX) {
            match pending.take() {
                Some((prev, weights, _)) if prev == stem => {
                    entries.push(BlockEntry {
                        name: prev,
                        position: entries.len(),
                        params: LayerParams { weights, bias: tensor },
                    });
                }
                _ => {
                    return Err(Error::Parse {
                        offset: record_start,
                        message: format!("bias record `{name}` does not follow its weight record"),
                    });
                }
            }
        } else {
            return Err(Error::Parse {
                offset: record_start,
                message: format!("record `{name}` is neither a weight nor a bias"),
            });
        }
    }
    if let Some((prev, _, at)) = pending {
        return Err(Error::Parse {
            offset: at,
            message: format!("weight record `{prev}` has no matching bias record"),
        });
    }
    ParameterBlock::from_entries(entries)
}

/// Reads one record; `Ok(None)` on clean end-of-file, a parse error with the
/// failing byte offset on truncation.
fn read_record(r: &mut impl Read, offset: &mut u64) -> Result<Option<(String, Tensor)>> {
    let mut len_buf = [0u8; 4];
    let got = read_full(r, &mut len_buf)?;
    if got == 0 {
        return Ok(None);
    }
    if got < 4 {
        return Err(truncated(*offset + got as u64));
    }
    *offset += 4;
    let name_len = u32::from_le_bytes(len_buf);
    if name_len == 0 || name_len > MAX_NAME_LEN {
        return Err(Error::Parse {
            offset: *offset - 4,
            message: format!("implausible name length {name_len}"),
        });
    }
    let mut name_buf = vec![0u8; name_len as usize];
    read_exact_or_truncated(r, &mut name_buf, offset)?;
    let name = String::from_utf8(name_buf).map_err(|_| Error::Parse {
        offset: *offset - name_len as u64,
        message: "record name is not valid UTF-8".into(),
    })?;

    let mut rank_buf = [0u8; 4];
    read_exact_or_truncated(r, &mut rank_buf, offset)?;
    let rank = u32::from_le_bytes(rank_buf);
    if rank > MAX_RANK {
        return Err(Error::Parse {
            offset: *offset - 4,
            message: format!("implausible tensor rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let mut dim_buf = [0u8; 4];
        read_exact_or_truncated(r, &mut dim_buf, offset)?;
        shape.push(u32::from_le_bytes(dim_buf) as usize);
    }
    let elements: u64 = shape.iter().map(|&d| d as u64).product();
    if elements > MAX_ELEMENTS {
        return Err(Error::Parse {
            offset: *offset,
            message: format!("tensor `{name}` claims {elements} elements"),
        });
    }
    let mut data = Vec::with_capacity(elements as usize);
    let mut val_buf = [0u8; 8];
    for _ in 0..elements {
        read_exact_or_truncated(r, &mut val_buf, offset)?;
        data.push(f64::from_le_bytes(val_buf));
    }
    let tensor = Tensor::new(shape, data).map_err(|e| Error::Parse {
        offset: *offset,
        message: e.to_string(),
    })?;
    Ok(Some((name, tensor)))
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    Ok(got)
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let got = read_full(r, buf)?;
    if got < buf.len() {
        return Err(truncated(*offset + got as u64));
    }
    *offset += buf.len() as u64;
    Ok(())
}

fn truncated(offset: u64) -> Error {
    Error::Parse { offset, message: "file ends mid-record".into() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{server_init, HeadMode};
    use crate::nn::{LayerSpec, NamedLayer};

    fn dual_model() -> PartitionedModel {
        let arch = Arc::new(
            Architecture::new(
                vec![4],
                vec![
                    NamedLayer::new("fc1", LayerSpec::Dense { inputs: 4, outputs: 5 }),
                    NamedLayer::new("act1", LayerSpec::Relu),
                    NamedLayer::new("fc2", LayerSpec::Dense { inputs: 5, outputs: 3 }),
                    NamedLayer::new("out", LayerSpec::Softmax),
                ],
            )
            .unwrap(),
        );
        let layout = PartitionLayout::new(vec!["fc1".into()], vec!["fc2".into()], 3).unwrap();
        let server = server_init(&arch, &layout, 5).unwrap();
        PartitionedModel::client_init(arch, layout, HeadMode::Dual, &server, 5, 2).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = dual_model();
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path, model.arch().clone()).unwrap();
        assert_eq!(loaded.heads(), HeadMode::Dual);
        assert!(loaded.flatten().bit_eq(&model.flatten()));
        assert_eq!(loaded.layout(), model.layout());
    }

    #[test]
    fn truncated_file_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = dual_model();
        save_model(&path, &model).unwrap();
        let bytes = fs::read(&path).unwrap();
        let cut = bytes.len() - 11;
        fs::write(&path, &bytes[..cut]).unwrap();
        match read_block(&path) {
            Err(Error::Parse { offset, .. }) => {
                assert!(offset <= cut as u64, "offset {offset} beyond cut {cut}");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn garbage_name_length_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, u32::MAX.to_le_bytes()).unwrap();
        assert!(matches!(read_block(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn bias_without_weight_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("orphan.ckpt");
        let mut w = BufWriter::new(fs::File::create(&path).unwrap());
        write_record(&mut w, "fc1.bias", &Tensor::from_vec(vec![1.0])).unwrap();
        w.flush().unwrap();
        drop(w);
        assert!(matches!(read_block(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_sidecar_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = dual_model();
        save_model(&path, &model).unwrap();
        fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(load_model(&path, model.arch().clone()).is_err());
    }
}
