//! On-disk binary formats: "MDNX" checkpoints holding a config block and
//! named tensors, and "VOL1" files holding a single volume or label map.
//! All integers and payloads are little-endian; files are written to a
//! temporary sibling and renamed into place so readers never see a partial
//! file.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::network::{build_model_with_dtype, MedNeXtModel, ModelConfig};
use crate::tensor::{no_grad, Buffer, DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDNX";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;

/// A loaded or to-be-written checkpoint: the model configuration plus every
/// named tensor, sorted ascending by name bytes.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &MedNeXtModel) -> Checkpoint {
        Checkpoint {
            config: model.config.clone(),
            entries: model.named_parameters(),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Build a model of the stored configuration and overwrite every
    /// parameter with the stored tensors.
    pub fn into_model(&self) -> Result<MedNeXtModel> {
        let dtype = self
            .entries
            .first()
            .map(|(_, t)| t.dtype())
            .unwrap_or(DType::F32);
        let model = build_model_with_dtype(&self.config, 0, dtype)?;
        let params = model.named_parameters();
        if params.len() != self.entries.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint holds {} tensors but the configuration implies {}",
                self.entries.len(),
                params.len()
            )));
        }
        no_grad(|| -> Result<()> {
            for ((name, dst), (stored_name, src)) in params.iter().zip(&self.entries) {
                if name != stored_name {
                    return Err(Error::Compatibility(format!(
                        "checkpoint tensor {stored_name:?} does not match expected parameter {name:?}"
                    )));
                }
                if src.shape() != dst.shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        expected: dst.shape().to_vec(),
                        found: src.shape().to_vec(),
                    }
                    .into());
                }
                dst.copy_from(src)?;
            }
            Ok(())
        })?;
        Ok(model)
    }
}

fn dtype_code(dtype: DType) -> u8 {
    match dtype {
        DType::F32 => DTYPE_F32,
        DType::F64 => DTYPE_F64,
    }
}

fn push_payload(out: &mut Vec<u8>, buffer: &Buffer) {
    match buffer {
        Buffer::F32(v) => {
            out.reserve(v.len() * 4);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Buffer::F64(v) => {
            out.reserve(v.len() * 8);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

/// Serialize a checkpoint to bytes in the "MDNX" layout.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_bytes = ckpt.config.format().into_bytes();
    out.extend_from_slice(&(config_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_bytes);
    out.extend_from_slice(&(ckpt.entries.len() as u32).to_le_bytes());
    let mut previous: Option<&str> = None;
    for (name, tensor) in &ckpt.entries {
        match previous {
            Some(p) if p == name => {
                return Err(CheckpointError::DuplicateName(name.clone()).into())
            }
            Some(p) if p > name.as_str() => {
                return Err(CheckpointError::UnsortedNames {
                    previous: p.to_string(),
                    current: name.clone(),
                }
                .into())
            }
            _ => previous = Some(name),
        }
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Usage(format!("tensor name too long: {name:?}")));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(dtype_code(tensor.dtype()));
        out.push(tensor.shape().len() as u8);
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        tensor.with_data(|b| push_payload(&mut out, b));
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated { context }.into());
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parse bytes in the "MDNX" layout.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: "MDNX",
            found: magic.to_vec(),
        }
        .into());
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config block")?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|e| CheckpointError::BadMetadata(format!("config block is not UTF-8: {e}")))?;
    let config = ModelConfig::parse(config_text)
        .map_err(|e| CheckpointError::BadMetadata(e.to_string()))?;

    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut previous: Option<String> = None;
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| CheckpointError::BadMetadata(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        if let Some(prev) = &previous {
            if *prev == name {
                return Err(CheckpointError::DuplicateName(name).into());
            }
            if prev.as_str() > name.as_str() {
                return Err(CheckpointError::UnsortedNames {
                    previous: prev.clone(),
                    current: name,
                }
                .into());
            }
        }
        let dtype = match r.u8("dtype code")? {
            DTYPE_F32 => DType::F32,
            DTYPE_F64 => DType::F64,
            code => return Err(CheckpointError::BadDtype(code).into()),
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * dtype.size_bytes(), "tensor payload")?;
        let buffer = match dtype {
            DType::F32 => Buffer::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => Buffer::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        let tensor = Tensor::from_buffer(&shape, buffer)
            .map_err(|e| CheckpointError::BadMetadata(e.to_string()))?;
        previous = Some(name.clone());
        entries.push((name, tensor));
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::BadMetadata(format!(
            "{} trailing bytes after the last tensor",
            r.remaining()
        ))
        .into());
    }
    Ok(Checkpoint { config, entries })
}

/// Write bytes to a temporary sibling file, then rename over the target.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("path {path:?} has no file name")))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    if let Err(err) = std::fs::rename(&tmp, path) {
        let _ = std::fs::remove_file(&tmp);
        return Err(err.into());
    }
    Ok(())
}

pub fn save_checkpoint(model: &MedNeXtModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(&Checkpoint::from_model(model))?;
    atomic_write(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// One volume or label map as stored in a "VOL1" file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: Vec<usize>,
    pub data: VolumeData,
}

impl Volume {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn len(&self) -> usize {
        match &self.data {
            VolumeData::F32(v) => v.len(),
            VolumeData::F64(v) => v.len(),
            VolumeData::U8(v) => v.len(),
        }
    }
}

pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>> {
    if volume.len() != volume.numel() {
        return Err(Error::Usage(format!(
            "volume payload has {} elements, shape {:?} implies {}",
            volume.len(),
            volume.shape,
            volume.numel()
        )));
    }
    if volume.shape.len() > u8::MAX as usize {
        return Err(Error::Usage("volume rank exceeds 255".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(VOLUME_MAGIC);
    out.push(volume.shape.len() as u8);
    for &e in &volume.shape {
        if e > u32::MAX as usize {
            return Err(Error::Usage(format!("volume extent {e} exceeds u32 range")));
        }
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match &volume.data {
        VolumeData::F32(v) => {
            out.push(DTYPE_F32);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeData::F64(v) => {
            out.push(DTYPE_F64);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeData::U8(v) => {
            out.push(DTYPE_U8);
            out.extend_from_slice(v);
        }
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != VOLUME_MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: "VOL1",
            found: magic.to_vec(),
        }
        .into());
    }
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("extent")? as usize);
    }
    let numel: usize = shape.iter().product();
    let data = match r.u8("dtype code")? {
        DTYPE_F32 => VolumeData::F32(
            r.take(numel * 4, "volume payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DTYPE_F64 => VolumeData::F64(
            r.take(numel * 8, "volume payload")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DTYPE_U8 => VolumeData::U8(r.take(numel, "volume payload")?.to_vec()),
        code => return Err(CheckpointError::BadDtype(code).into()),
    };
    if r.remaining() != 0 {
        return Err(CheckpointError::BadMetadata(format!(
            "{} trailing bytes after the volume payload",
            r.remaining()
        ))
        .into());
    }
    Ok(Volume { shape, data })
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    atomic_write(path, &encode_volume(volume)?)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    decode_volume(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::count_parameters;
    use crate::network::{build_model, Preset};

    fn tiny_model() -> MedNeXtModel {
        build_model(
            &ModelConfig::preset(Preset::S).with_base_channels(2),
            42,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let model = tiny_model();
        let bytes = encode_checkpoint(&Checkpoint::from_model(&model)).unwrap();
        let loaded = decode_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.config, model.config);
        let params = model.named_parameters();
        assert_eq!(loaded.entries.len(), params.len());
        for ((name, original), (loaded_name, restored)) in params.iter().zip(&loaded.entries) {
            assert_eq!(name, loaded_name);
            assert!(restored.bits_eq(original), "{name} not restored exactly");
        }
    }

    #[test]
    fn roundtrip_through_files_and_model() {
        let dir = std::env::temp_dir().join(format!("mednext-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.mdnx");
        let model = tiny_model();
        save_checkpoint(&model, &path).unwrap();
        let restored = load_checkpoint(&path).unwrap().into_model().unwrap();
        for ((name, a), (_, b)) in model
            .named_parameters()
            .into_iter()
            .zip(restored.named_parameters())
        {
            assert!(a.bits_eq(&b), "{name} differs after reload");
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn float64_tensors_roundtrip() {
        let model = build_model_with_dtype(
            &ModelConfig::preset(Preset::S).with_base_channels(1),
            7,
            DType::F64,
        )
        .unwrap();
        let bytes = encode_checkpoint(&Checkpoint::from_model(&model)).unwrap();
        let loaded = decode_checkpoint(&bytes).unwrap();
        for ((name, a), (_, b)) in model.named_parameters().iter().zip(&loaded.entries) {
            assert_eq!(b.dtype(), DType::F64);
            assert!(a.bits_eq(b), "{name}");
        }
    }

    #[test]
    fn element_count_matches_parameter_count() {
        let model = tiny_model();
        let ckpt = Checkpoint::from_model(&model);
        assert_eq!(ckpt.total_elements(), count_parameters(&model));
    }

    #[test]
    fn corruption_produces_typed_errors() {
        let model = tiny_model();
        let bytes = encode_checkpoint(&Checkpoint::from_model(&model)).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad_magic),
            Err(Error::Checkpoint(CheckpointError::BadMagic { .. }))
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad_version),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(9)))
        ));

        for cut in [3, 5, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(
                    decode_checkpoint(&bytes[..cut]),
                    Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
                ),
                "cut at {cut}"
            );
        }

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            decode_checkpoint(&trailing),
            Err(Error::Checkpoint(CheckpointError::BadMetadata(_)))
        ));
    }

    #[test]
    fn unsorted_and_duplicate_names_rejected() {
        let model = tiny_model();
        let mut ckpt = Checkpoint::from_model(&model);
        ckpt.entries.swap(0, 1);
        assert!(matches!(
            encode_checkpoint(&ckpt),
            Err(Error::Checkpoint(CheckpointError::UnsortedNames { .. }))
        ));

        let mut ckpt = Checkpoint::from_model(&model);
        let first = ckpt.entries[0].clone();
        ckpt.entries.insert(0, first);
        assert!(matches!(
            encode_checkpoint(&ckpt),
            Err(Error::Checkpoint(CheckpointError::DuplicateName(_)))
        ));

        // The same violations must be caught when decoding foreign bytes,
        // so corrupt a valid image by swapping two adjacent name fields of
        // equal length.
        let bytes = encode_checkpoint(&Checkpoint::from_model(&model)).unwrap();
        let names: Vec<(usize, String)> = checkpoint_name_offsets(&bytes);
        let (off_a, name_a) = names
            .iter()
            .find(|(_, n)| n == "stage1.block1.comp.bias")
            .unwrap()
            .clone();
        let (off_b, name_b) = names
            .iter()
            .find(|(_, n)| n == "stage1.block2.comp.bias")
            .unwrap()
            .clone();
        assert_eq!(name_a.len(), name_b.len());
        let mut swapped = bytes.clone();
        swapped[off_a..off_a + name_a.len()].copy_from_slice(name_b.as_bytes());
        swapped[off_b..off_b + name_b.len()].copy_from_slice(name_a.as_bytes());
        assert!(matches!(
            decode_checkpoint(&swapped),
            Err(Error::Checkpoint(CheckpointError::UnsortedNames { .. }))
        ));
    }

    /// Byte offsets of every name field in an encoded checkpoint.
    fn checkpoint_name_offsets(bytes: &[u8]) -> Vec<(usize, String)> {
        let mut r = Reader { buf: bytes, pos: 0 };
        r.take(4, "magic").unwrap();
        r.u16("version").unwrap();
        let config_len = r.u32("config length").unwrap() as usize;
        r.take(config_len, "config").unwrap();
        let count = r.u32("count").unwrap() as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = r.u16("name length").unwrap() as usize;
            let off = r.pos;
            let name = std::str::from_utf8(r.take(len, "name").unwrap())
                .unwrap()
                .to_string();
            out.push((off, name));
            let dtype = r.u8("dtype").unwrap();
            let rank = r.u8("rank").unwrap() as usize;
            let mut numel = 1usize;
            for _ in 0..rank {
                numel *= r.u64("extent").unwrap() as usize;
            }
            let width = if dtype == DTYPE_F64 { 8 } else { 4 };
            r.take(numel * width, "payload").unwrap();
        }
        out
    }

    #[test]
    fn bad_dtype_code_rejected() {
        let model = tiny_model();
        let bytes = encode_checkpoint(&Checkpoint::from_model(&model)).unwrap();
        let names = checkpoint_name_offsets(&bytes);
        let (off, name) = names[0].clone();
        let mut bad = bytes.clone();
        bad[off + name.len()] = 7; // dtype code byte follows the name
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Checkpoint(CheckpointError::BadDtype(7)))
        ));
    }

    #[test]
    fn into_model_rejects_shape_mismatch() {
        let model = tiny_model();
        let mut ckpt = Checkpoint::from_model(&model);
        // Claim a different base width than the tensors were built with.
        ckpt.config.base_channels = 4;
        let err = match ckpt.into_model() {
            Err(e) => e,
            Ok(_) => panic!("mismatched config must not load"),
        };
        assert!(matches!(
            err,
            Error::Checkpoint(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn volume_roundtrip_all_dtypes() {
        let volumes = [
            Volume {
                shape: vec![2, 3, 4],
                data: VolumeData::U8((0..24).collect()),
            },
            Volume {
                shape: vec![1, 1, 2, 2, 2],
                data: VolumeData::F32((0..8).map(|i| i as f32 * 0.5 - 1.0).collect()),
            },
            Volume {
                shape: vec![3],
                data: VolumeData::F64(vec![1.5, -2.25, 1e-300]),
            },
        ];
        for v in volumes {
            let bytes = encode_volume(&v).unwrap();
            assert_eq!(decode_volume(&bytes).unwrap(), v);
        }
    }

    #[test]
    fn volume_errors_are_typed() {
        let v = Volume {
            shape: vec![2, 2],
            data: VolumeData::U8(vec![1, 2, 3, 4]),
        };
        let bytes = encode_volume(&v).unwrap();
        assert!(matches!(
            decode_volume(&bytes[..bytes.len() - 1]),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(
            decode_volume(&bad),
            Err(Error::Checkpoint(CheckpointError::BadMagic { .. }))
        ));
        let wrong_len = Volume {
            shape: vec![2, 3],
            data: VolumeData::U8(vec![0; 4]),
        };
        assert!(matches!(encode_volume(&wrong_len), Err(Error::Usage(_))));
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = std::env::temp_dir().join(format!("mednext-atomic-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("v.vol");
        let v = Volume {
            shape: vec![2],
            data: VolumeData::U8(vec![7, 8]),
        };
        save_volume(&v, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap(), v);
        let leftovers: Vec<_> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .filter(|n| n.to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty(), "{leftovers:?}");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
