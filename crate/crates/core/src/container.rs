//! Portable array container.
//!
//! Layout (little-endian): magic `CSSM`, version `u32`, entry count `u32`,
//! then per entry: name length `u16`, UTF-8 name, dtype `u8`
//! (0=f32, 1=f64, 2=c64, 3=c128), rank `u8`, one `u64` per dim, and the
//! row-major payload. Complex values are stored as (re, im) pairs.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{complex_as_real, Real, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSSM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    C64(Vec<Complex<f32>>),
    C128(Vec<Complex<f64>>),
}

impl ArrayData {
    pub fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::C64(_) => 2,
            ArrayData::C128(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::C64(v) => v.len(),
            ArrayData::C128(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values as f64, complex entries flattened to (re, im).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
            ArrayData::C64(v) => complex_as_real(v).iter().map(|&x| x as f64).collect(),
            ArrayData::C128(v) => complex_as_real(v).to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

/// Element types that can be stored in a container entry.
pub trait Storable: Scalar {
    fn wrap(v: Vec<Self>) -> ArrayData;
    fn unwrap(d: &ArrayData) -> Option<Vec<Self>>;
}

macro_rules! storable {
    ($t:ty, $var:ident) => {
        impl Storable for $t {
            fn wrap(v: Vec<Self>) -> ArrayData {
                ArrayData::$var(v)
            }
            fn unwrap(d: &ArrayData) -> Option<Vec<Self>> {
                match d {
                    ArrayData::$var(v) => Some(v.clone()),
                    _ => None,
                }
            }
        }
    };
}
storable!(f32, F32);
storable!(f64, F64);
storable!(Complex<f32>, C64);
storable!(Complex<f64>, C128);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<E: Storable>(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<E>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.entries.push(Entry {
            name: name.into(),
            dims: dims.to_vec(),
            data: E::wrap(data),
        });
    }

    pub fn push_tensor<E: Storable>(&mut self, name: impl Into<String>, t: &Tensor<E>) {
        self.push(name, t.shape(), t.data().to_vec());
    }

    /// Real values are stored in the requested precision.
    pub fn push_real<T: Real>(&mut self, name: impl Into<String>, dims: &[usize], data: &[T]) {
        if T::DTYPE == 0 {
            self.push(name, dims, data.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>());
        } else {
            self.push(name, dims, data.iter().map(|x| x.as_f64()).collect::<Vec<f64>>());
        }
    }

    pub fn push_complex<T: Real>(&mut self, name: impl Into<String>, dims: &[usize], data: &[Complex<T>]) {
        if T::DTYPE == 0 {
            let v = data.iter().map(|z| Complex::new(z.re.as_f64() as f32, z.im.as_f64() as f32)).collect();
            self.push::<Complex<f32>>(name, dims, v);
        } else {
            let v = data.iter().map(|z| Complex::new(z.re.as_f64(), z.im.as_f64())).collect();
            self.push::<Complex<f64>>(name, dims, v);
        }
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.push(name, &[], vec![v]);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing entry {name:?}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let e = self.require(name)?;
        e.data
            .to_f64_vec()
            .first()
            .copied()
            .ok_or_else(|| Error::Format(format!("entry {name:?} is empty")))
    }

    pub fn tensor<E: Storable>(&self, name: &str) -> Result<Tensor<E>> {
        let e = self.require(name)?;
        let v = E::unwrap(&e.data)
            .ok_or_else(|| Error::Format(format!("entry {name:?} has dtype {}", e.data.dtype())))?;
        Tensor::new(e.dims.clone(), v)
    }

    /// Real entry converted to `T` whatever its stored precision.
    pub fn real_vec<T: Real>(&self, name: &str) -> Result<Vec<T>> {
        let e = self.require(name)?;
        match &e.data {
            ArrayData::F32(_) | ArrayData::F64(_) => Ok(e.data.to_f64_vec().into_iter().map(T::of).collect()),
            _ => Err(Error::Format(format!("entry {name:?} is complex, expected real"))),
        }
    }

    pub fn complex_vec<T: Real>(&self, name: &str) -> Result<Vec<Complex<T>>> {
        let e = self.require(name)?;
        match &e.data {
            ArrayData::C64(_) | ArrayData::C128(_) => Ok(e
                .data
                .to_f64_vec()
                .chunks_exact(2)
                .map(|p| Complex::new(T::of(p[0]), T::of(p[1])))
                .collect()),
            _ => Err(Error::Format(format!("entry {name:?} is real, expected complex"))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("entry name too long: {}", e.name)))?;
            let rank = u8::try_from(e.dims.len())
                .map_err(|_| Error::Format(format!("rank too large for {}", e.name)))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.data.dtype(), rank])?;
            for &d in &e.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &e.data {
                ArrayData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                ArrayData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                ArrayData::C64(v) => complex_as_real(v)
                    .iter()
                    .try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                ArrayData::C128(v) => complex_as_real(v)
                    .iter()
                    .try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            r.read_exact(&mut b2)?;
            let (dtype, rank) = (b2[0], b2[1]);
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let mut b8 = [0u8; 8];
                r.read_exact(&mut b8)?;
                dims.push(u64::from_le_bytes(b8) as usize);
            }
            let n: usize = dims.iter().product();
            let data = match dtype {
                0 => ArrayData::F32(read_vals(r, n, f32::from_le_bytes)?),
                1 => ArrayData::F64(read_vals(r, n, f64::from_le_bytes)?),
                2 => ArrayData::C64(pairs(read_vals(r, 2 * n, f32::from_le_bytes)?)),
                3 => ArrayData::C128(pairs(read_vals(r, 2 * n, f64::from_le_bytes)?)),
                other => return Err(Error::Format(format!("unknown dtype {other} for {name}"))),
            };
            entries.push(Entry { name, dims, data });
        }
        Ok(Self { entries })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vals<const N: usize, V>(r: &mut impl Read, n: usize, f: fn([u8; N]) -> V) -> Result<Vec<V>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; N];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f(b));
    }
    Ok(out)
}

fn pairs<T: Copy>(v: Vec<T>) -> Vec<Complex<T>> {
    v.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect()
}
