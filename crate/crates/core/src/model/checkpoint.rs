//! Named-parameter checkpoint container.
//!
//! Layout (all little-endian): magic `MSNC`, version u16, parameter count
//! u32, then per parameter: name length u16 + UTF-8 name, dtype byte
//! (0 = f32, 1 = f64), rank u8, dims as u32s, and the raw element payload.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::tensor::{Dtype, Scalar, Tensor};

use super::{parameter_manifest, CellParams, ConvParams, EncoderLayerParams, ForecasterLayerParams, ModelConfig, ModelError, ModelParams, Result};

const MAGIC: &[u8; 4] = b"MSNC";
const VERSION: u16 = 1;

fn dtype_code(d: Dtype) -> u8 {
    match d {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    }
}

/// Write every parameter of `params` to `path`.
pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    let named = params.named();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(dtype_code(T::DTYPE));
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.to_le_bytes(&mut buf);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(ModelError::Format {
                pos: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Read a checkpoint written for `config` back into a parameter set.
///
/// The file must contain exactly the parameters the config calls for, with
/// matching shapes, element type, and finite values.
pub fn load_checkpoint<T: Scalar>(path: &Path, config: &ModelConfig) -> Result<ModelParams<T>> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data, pos: 0 };

    if r.take(4, "magic")? != MAGIC {
        return Err(ModelError::Format {
            pos: 0,
            detail: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(ModelError::Format {
            pos: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("parameter count")? as usize;

    let mut records: HashMap<String, Tensor<T>> = HashMap::with_capacity(count);
    for i in 0..count {
        let rec_pos = r.pos as u64;
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| {
            ModelError::Format {
                pos: rec_pos,
                detail: format!("parameter {i}: name is not UTF-8"),
            }
        })?;
        let dtype = r.u8("dtype")?;
        if dtype != dtype_code(T::DTYPE) {
            return Err(ModelError::Format {
                pos: rec_pos,
                detail: format!("{name}: dtype code {dtype} does not match expected {:?}", T::DTYPE),
            });
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let esize = T::DTYPE.size_bytes();
        let payload = r.take(numel * esize, &format!("payload of {name}"))?;
        let values: Vec<T> = payload.chunks_exact(esize).map(T::from_le_slice).collect();
        let tensor = Tensor::new(shape, values);
        if !tensor.all_finite() {
            return Err(ModelError::Format {
                pos: rec_pos,
                detail: format!("{name}: non-finite value in payload"),
            });
        }
        if records.insert(name.clone(), tensor).is_some() {
            return Err(ModelError::Format {
                pos: rec_pos,
                detail: format!("duplicate parameter {name}"),
            });
        }
    }
    if r.pos != r.data.len() {
        return Err(ModelError::Format {
            pos: r.pos as u64,
            detail: format!("{} trailing bytes after last record", r.data.len() - r.pos),
        });
    }

    params_from_records(config, records)
}

fn params_from_records<T: Scalar>(
    config: &ModelConfig,
    mut records: HashMap<String, Tensor<T>>,
) -> Result<ModelParams<T>> {
    config.validate()?;
    let manifest = parameter_manifest(config);
    let mut take = |name: &str| -> Result<Tensor<T>> {
        let want = manifest
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.clone())
            .expect("manifest covers every constructed name");
        let t = records.remove(name).ok_or_else(|| ModelError::Format {
            pos: 0,
            detail: format!("missing parameter {name}"),
        })?;
        if t.shape() != want {
            return Err(ModelError::Format {
                pos: 0,
                detail: format!("{name}: shape {:?}, config expects {:?}", t.shape(), want),
            });
        }
        Ok(t)
    };

    let bridge_w = take("hidden-state-weights")?;
    let mut encoder = Vec::new();
    for i in 0..config.layers.len() {
        encoder.push(EncoderLayerParams {
            down: ConvParams {
                weight: take(&format!("L{i}-encoder-downsconv-weight"))?,
                bias: take(&format!("L{i}-encoder-downsconv-bias"))?,
            },
            cell: CellParams {
                weight: take(&format!("L{i}-encoder-convlstmcell-weight"))?,
                bias: take(&format!("L{i}-encoder-convlstmcell-bias"))?,
                gn_weight: take(&format!("L{i}-encoder-groupnorm-weight"))?,
                gn_bias: take(&format!("L{i}-encoder-groupnorm-bias"))?,
            },
        });
    }
    let mut hrrr = Vec::new();
    if config.use_hrrr {
        for i in 0..config.layers.len() {
            hrrr.push(ConvParams {
                weight: take(&format!("HRRR-conditioning-downconv-{i}-weight"))?,
                bias: take(&format!("HRRR-conditioning-downconv-{i}-bias"))?,
            });
        }
    }
    let mut forecaster = Vec::new();
    for i in 0..config.layers.len() {
        forecaster.push(ForecasterLayerParams {
            cell: CellParams {
                weight: take(&format!("L{i}-forecaster-convlstmcell-weight"))?,
                bias: take(&format!("L{i}-forecaster-convlstmcell-bias"))?,
                gn_weight: take(&format!("L{i}-forecaster-groupnorm-weight"))?,
                gn_bias: take(&format!("L{i}-forecaster-groupnorm-bias"))?,
            },
            up: ConvParams {
                weight: take(&format!("L{i}-forecaster-upconv-weight"))?,
                bias: take(&format!("L{i}-forecaster-upconv-bias"))?,
            },
        });
    }
    let head0 = ConvParams {
        weight: take("final-conv.0.weight")?,
        bias: take("final-conv.0.bias")?,
    };
    let head2 = ConvParams {
        weight: take("final-conv.2.weight")?,
        bias: take("final-conv.2.bias")?,
    };

    if !records.is_empty() {
        let mut extra: Vec<String> = records.into_keys().collect();
        extra.sort();
        return Err(ModelError::Format {
            pos: 0,
            detail: format!("unexpected parameters: {}", extra.join(", ")),
        });
    }

    Ok(ModelParams {
        bridge_w,
        encoder,
        hrrr,
        forecaster,
        head0,
        head2,
    })
}
