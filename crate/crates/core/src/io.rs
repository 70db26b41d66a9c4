//! Volume container and PNG export.
//!
//! A container file is one line of compact JSON header, a `\n`, then the raw
//! little-endian row-major payload. Complex elements are stored as
//! interleaved `(re, im)` pairs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use qfit_autodiff::Tensor;

use crate::adam::AdamState;
use crate::error::{QfitError, Result};
use crate::network::{Network, NetworkConfig};
use crate::signal::Dictionary;
use crate::stack::{ContrastStack, ParameterMap};
use crate::subspace::SubspaceBasis;
use crate::train::TrainedModel;

pub const MAGIC: &str = "QFIT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    C128,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::C128 => 16,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f64" => Some(Dtype::F64),
            "c128" => Some(Dtype::C128),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub magic: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub labels: Vec<String>,
    pub units: String,
    #[serde(default)]
    pub metadata: Value,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::Real(v) => v.len(),
            VolumeData::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VolumeData::Real(_) => Dtype::F64,
            VolumeData::Complex(_) => Dtype::C128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub data: VolumeData,
}

impl Volume {
    pub fn new(dims: Vec<usize>, labels: &[&str], units: &str, data: VolumeData) -> Result<Self> {
        let v = Self {
            header: VolumeHeader {
                magic: MAGIC.into(),
                dtype: data.dtype(),
                dims,
                labels: labels.iter().map(|s| s.to_string()).collect(),
                units: units.into(),
                metadata: Value::Null,
                seed: None,
                config_hash: None,
            },
            data,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn with_metadata(mut self, metadata: Value) -> Self {
        self.header.metadata = metadata;
        self
    }

    pub fn with_provenance(mut self, seed: Option<u64>, config_hash: Option<String>) -> Self {
        self.header.seed = seed;
        self.header.config_hash = config_hash;
        self
    }

    pub fn element_count(&self) -> usize {
        self.header.dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.magic != MAGIC {
            return Err(QfitError::Invalid(format!("bad magic {:?}", h.magic)));
        }
        if h.labels.len() != h.dims.len() {
            return Err(QfitError::shape("dimension labels", h.dims.len(), h.labels.len()));
        }
        if h.dtype != self.data.dtype() {
            return Err(QfitError::Invalid("header dtype disagrees with payload".into()));
        }
        if self.data.len() != self.element_count() {
            return Err(QfitError::shape("volume payload", self.element_count(), self.data.len()));
        }
        Ok(())
    }

    pub fn real_data(&self) -> Result<&[f64]> {
        match &self.data {
            VolumeData::Real(v) => Ok(v),
            VolumeData::Complex(_) => Err(QfitError::Invalid("expected a real volume".into())),
        }
    }

    // ------------------------------------------------------------ conversions

    /// `(frames, y, x)`; complex stacks become `c128`.
    pub fn from_stack(stack: &ContrastStack) -> Result<Self> {
        stack.validate()?;
        let dims = vec![stack.frames, stack.height, stack.width];
        let labels = ["frame", "y", "x"];
        let data = match &stack.imag {
            None => VolumeData::Real(stack.real.clone()),
            Some(im) => VolumeData::Complex(stack.real.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect()),
        };
        Ok(Self::new(dims, &labels, "a.u.", data)?.with_metadata(serde_json::json!({ "timing_ms": stack.timing_ms })))
    }

    pub fn to_stack(&self) -> Result<ContrastStack> {
        let d = &self.header.dims;
        if d.len() != 3 {
            return Err(QfitError::shape("stack dims", 3, d.len()));
        }
        let timing: Vec<f64> = self
            .header
            .metadata
            .get("timing_ms")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()?
            .unwrap_or_default();
        match &self.data {
            VolumeData::Real(v) => ContrastStack::real(d[0], d[1], d[2], v.clone(), timing),
            VolumeData::Complex(v) => ContrastStack::complex(
                d[0],
                d[1],
                d[2],
                v.iter().map(|z| z.re).collect(),
                v.iter().map(|z| z.im).collect(),
                timing,
            ),
        }
    }

    /// `(y, x)` with invalid voxel indices listed in the metadata.
    pub fn from_map(map: &ParameterMap, units: &str) -> Result<Self> {
        let invalid: Vec<usize> = (0..map.len()).filter(|&v| !map.mask[v]).collect();
        Ok(Self::new(vec![map.height, map.width], &["y", "x"], units, VolumeData::Real(map.values.clone()))?
            .with_metadata(serde_json::json!({ "invalid_voxels": invalid })))
    }

    pub fn to_map(&self) -> Result<ParameterMap> {
        let d = &self.header.dims;
        if d.len() != 2 {
            return Err(QfitError::shape("map dims", 2, d.len()));
        }
        let mut mask = vec![true; d[0] * d[1]];
        if let Some(inv) = self.header.metadata.get("invalid_voxels") {
            let inv: Vec<usize> = serde_json::from_value(inv.clone())?;
            for v in inv {
                *mask
                    .get_mut(v)
                    .ok_or_else(|| QfitError::Invalid(format!("invalid voxel index {v} out of range")))? = false;
            }
        }
        ParameterMap::new(d[0], d[1], self.real_data()?.to_vec(), mask)
    }

    // ------------------------------------------------------------ bytes

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        match &self.data {
            VolumeData::Real(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VolumeData::Complex(v) => v.iter().for_each(|z| {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |msg: String| QfitError::Format {
            path: path.to_path_buf(),
            msg,
        };
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt(format!("not a {MAGIC} container: no header line")))?;
        let raw: Value = serde_json::from_slice(&bytes[..split])
            .map_err(|_| fmt(format!("not a {MAGIC} container: header is not JSON")))?;
        match raw.get("magic").and_then(Value::as_str) {
            Some(MAGIC) => {}
            other => return Err(fmt(format!("magic mismatch: expected {MAGIC:?}, found {other:?}"))),
        }
        let dtype_name = raw.get("dtype").and_then(Value::as_str).unwrap_or("<missing>");
        if Dtype::parse(dtype_name).is_none() {
            return Err(fmt(format!("unknown dtype {dtype_name:?}")));
        }
        let header: VolumeHeader = serde_json::from_value(raw).map_err(|e| fmt(format!("bad header: {e}")))?;
        let count: usize = header.dims.iter().product();
        let expected = (count * header.dtype.size()) as u64;
        let payload = &bytes[split + 1..];
        let actual = payload.len() as u64;
        if actual < expected {
            return Err(QfitError::Truncated {
                path: path.to_path_buf(),
                expected,
                actual,
            });
        }
        if actual > expected {
            return Err(fmt(format!("payload has {actual} bytes, header implies {expected}")));
        }
        let words: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let data = match header.dtype {
            Dtype::F64 => VolumeData::Real(words),
            Dtype::C128 => VolumeData::Complex(words.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()),
        };
        let v = Self { header, data };
        v.validate().map_err(|e| fmt(e.to_string()))?;
        Ok(v)
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| QfitError::Invalid(format!("{} has no file name", path.display())))?;
    let mut tmp = PathBuf::from(dir);
    tmp.push(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(QfitError::io(path, e));
    }
    Ok(())
}

pub fn save_volume(path: &Path, volume: &Volume) -> Result<()> {
    write_atomic(path, &volume.to_bytes()?)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| QfitError::io(path, e))?;
    Volume::from_bytes(&bytes, path)
}

/// 8-bit gray levels for a linear window centered on `level`; invalid voxels
/// are black.
pub fn map_to_gray(map: &ParameterMap, window: f64, level: f64) -> Result<Vec<u8>> {
    if !(window > 0.0) || !window.is_finite() || !level.is_finite() {
        return Err(QfitError::Config(format!("window must be positive, got {window} at level {level}")));
    }
    map.values
        .iter()
        .zip(&map.mask)
        .map(|(&v, &ok)| {
            if !ok {
                return Ok(0);
            }
            if !v.is_finite() {
                return Err(QfitError::Invalid("map has non-finite values inside its mask".into()));
            }
            let g = ((v - level) / window + 0.5) * 255.0;
            Ok(g.round().clamp(0.0, 255.0) as u8)
        })
        .collect()
}

pub fn encode_png(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| QfitError::Invalid(format!("png encoding: {e}")))?;
        w.write_image_data(gray)
            .map_err(|e| QfitError::Invalid(format!("png encoding: {e}")))?;
    }
    Ok(out)
}

pub fn export_map_png(map: &ParameterMap, window: f64, level: f64, path: &Path) -> Result<()> {
    let gray = map_to_gray(map, window, level)?;
    write_atomic(path, &encode_png(map.width, map.height, &gray)?)
}

// ---------------------------------------------------------------- typed payloads

/// Atoms as `c128 (atom, tr)` with grid values, norms and schedule hash.
pub fn dictionary_to_volume(dict: &Dictionary) -> Result<Volume> {
    Ok(Volume::new(
        vec![dict.len(), dict.n_tr],
        &["atom", "tr"],
        "a.u.",
        VolumeData::Complex(dict.atoms.clone()),
    )?
    .with_metadata(serde_json::json!({
        "params_ms": dict.params,
        "norms": dict.norms,
        "schedule_hash": dict.schedule_hash,
    })))
}

fn meta<T: serde::de::DeserializeOwned>(v: &Volume, key: &str) -> Result<T> {
    let field = v
        .header
        .metadata
        .get(key)
        .ok_or_else(|| QfitError::Invalid(format!("container metadata lacks {key:?}")))?;
    Ok(serde_json::from_value(field.clone())?)
}

pub fn volume_to_dictionary(v: &Volume) -> Result<Dictionary> {
    let d = &v.header.dims;
    let VolumeData::Complex(atoms) = &v.data else {
        return Err(QfitError::Invalid("dictionary container must be complex".into()));
    };
    if d.len() != 2 {
        return Err(QfitError::shape("dictionary dims", 2, d.len()));
    }
    let params: Vec<(f64, f64)> = meta(v, "params_ms")?;
    if params.len() != d[0] {
        return Err(QfitError::shape("dictionary grid values", d[0], params.len()));
    }
    Dictionary::from_atoms(params, atoms.clone(), d[1], meta(v, "schedule_hash")?)
}

/// `f64 (k, tr)` rows of phi with the spectrum and energy target.
pub fn basis_to_volume(b: &SubspaceBasis) -> Result<Volume> {
    Ok(Volume::new(vec![b.rank, b.n_tr], &["k", "tr"], "1", VolumeData::Real(b.phi.clone()))?.with_metadata(
        serde_json::json!({
            "singular_values": b.singular_values,
            "energy_target": b.energy_target,
            "retained_energy": b.retained_energy,
        }),
    ))
}

pub fn volume_to_basis(v: &Volume) -> Result<SubspaceBasis> {
    let d = &v.header.dims;
    if d.len() != 2 {
        return Err(QfitError::shape("basis dims", 2, d.len()));
    }
    SubspaceBasis::from_parts(
        d[0],
        d[1],
        v.real_data()?.to_vec(),
        meta(v, "singular_values")?,
        meta(v, "energy_target")?,
    )
}

/// `f64 (3, n_params)`: parameters, Adam first and second moments. The
/// network layout, Adam step count and loss history live in the header.
pub fn checkpoint_to_volume(model: &TrainedModel) -> Result<Volume> {
    let params: Vec<f64> = model.network.params().iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = params.len();
    let mut data = params;
    data.extend(model.optimizer.m.iter().flatten());
    data.extend(model.optimizer.v.iter().flatten());
    Ok(Volume::new(vec![3, n], &["slot", "param"], "1", VolumeData::Real(data))?.with_metadata(serde_json::json!({
        "network": model.network.config(),
        "adam_step": model.optimizer.step,
        "history": model.history,
        "input_scale": model.input_scale,
    })))
}

pub fn volume_to_checkpoint(v: &Volume) -> Result<TrainedModel> {
    let cfg: NetworkConfig = meta(v, "network")?;
    let mut network = Network::build(cfg, 0)?;
    let d = &v.header.dims;
    let n = network.parameter_count();
    if d != &[3, n] {
        return Err(QfitError::shape("checkpoint dims", [3, n], d.clone()));
    }
    let data = v.real_data()?;
    let split = |slot: usize| -> Vec<Vec<f64>> {
        let mut off = slot * n;
        network
            .params()
            .iter()
            .map(|t| {
                let chunk = data[off..off + t.len()].to_vec();
                off += t.len();
                chunk
            })
            .collect()
    };
    let (p, m, s) = (split(0), split(1), split(2));
    let tensors = network
        .params()
        .iter()
        .zip(p)
        .map(|(t, d)| Tensor::new(t.shape().to_vec(), d))
        .collect::<Result<Vec<_>, _>>()?;
    network.set_params(tensors)?;
    Ok(TrainedModel {
        network,
        optimizer: AdamState {
            step: meta(v, "adam_step")?,
            m,
            v: s,
        },
        history: meta(v, "history")?,
        input_scale: meta(v, "input_scale")?,
    })
}
