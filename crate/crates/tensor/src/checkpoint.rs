//! Parameter container file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "SGVOCKPT"
//! version     u32      1
//! n_meta      u32      then n_meta × (key: str, value: str)
//! n_layers    u32      then n_layers × str       (manifest of layer names)
//! n_arrays    u32      then n_arrays × array
//!
//! str   = u32 byte length, UTF-8 bytes
//! array = name: str, dtype: u8 (0 = f32, 1 = f64), ndim: u32,
//!         dims: ndim × u64, values: product(dims) raw little-endian
//! ```
//!
//! The manifest lists every distinct `layer{l}/{unit}` prefix of the array
//! names, so partial stacks can be located without reading the arrays.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SGVOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_slice<T: Scalar>(data: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size_of());
        for &v in data {
            v.write_le(&mut bytes);
        }
        Self::decode(T::DTYPE, &bytes)
    }

    fn decode(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => ArrayData::F32(bytes.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => ArrayData::F64(bytes.chunks_exact(8).map(f64::read_le).collect()),
        }
    }

    /// Values converted to `T`; exact when the dtypes agree.
    pub fn to_vec<T: Scalar>(&self) -> Vec<T> {
        match self {
            ArrayData::F32(v) if T::DTYPE == DType::F32 => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            ArrayData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        }
    }

    fn write_values(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8 string"))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every parameter of `params` under `prefix` + its name.
    pub fn add_params<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            self.add_array(format!("{prefix}{name}"), t.shape(), t.data());
        }
    }

    pub fn add_array<T: Scalar>(&mut self, name: impl Into<String>, shape: &[usize], data: &[T]) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data: ArrayData::from_slice(data),
        });
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Parameters stored under `prefix`, with the prefix stripped.
    pub fn params<T: Scalar>(&self, prefix: &str) -> Result<ParamSet<T>> {
        let mut out = ParamSet::new();
        for a in self.arrays.iter().filter(|a| a.name.starts_with(prefix)) {
            let t = Tensor::from_vec(a.data.to_vec::<T>(), &a.shape)?;
            out.insert(&a.name[prefix.len()..], &t);
        }
        Ok(out)
    }

    /// Distinct `layer{l}/{unit}` prefixes of the stored names.
    pub fn manifest(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for a in &self.arrays {
            if let Some(pos) = a.name.find("layer") {
                let parts: Vec<&str> = a.name[pos..].splitn(3, '/').collect();
                if parts.len() == 3 {
                    set.insert(format!("{}{}/{}", &a.name[..pos], parts[0], parts[1]));
                }
            }
        }
        set.into_iter().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        let manifest = self.manifest();
        put_u32(&mut out, manifest.len() as u32);
        for m in &manifest {
            put_str(&mut out, m);
        }
        put_u32(&mut out, self.arrays.len() as u32);
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.push(match a.data.dtype() {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            put_u32(&mut out, a.shape.len() as u32);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            a.data.write_values(&mut out);
        }
        out
    }

    /// Parses a container; returns the checkpoint and its manifest.
    pub fn from_bytes(buf: &[u8]) -> Result<(Checkpoint, Vec<String>)> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..cur.u32()? {
            let k = cur.string()?;
            let v = cur.string()?;
            metadata.insert(k, v);
        }
        let manifest = (0..cur.u32()?).map(|_| cur.string()).collect::<Result<Vec<_>>>()?;
        let n = cur.u32()?;
        let mut arrays = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = cur.string()?;
            let dtype = match cur.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                d => return Err(bad(format!("array `{name}`: unknown dtype tag {d}"))),
            };
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let bytes = cur.take(count * dtype.size_of())?;
            arrays.push(NamedArray {
                name,
                shape,
                data: ArrayData::decode(dtype, bytes),
            });
        }
        if cur.pos != buf.len() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok((Checkpoint { metadata, arrays }, manifest))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Ok(Self::from_bytes(&buf)?.0)
    }
}
