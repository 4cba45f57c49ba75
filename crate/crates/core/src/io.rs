//! Binary tensor files and CSV exports.
//!
//! Tensor layout (little-endian):
//!
//! | field   | type            |
//! |---------|-----------------|
//! | magic   | `b"MTEN"`       |
//! | version | `u16` (= 1)     |
//! | kind    | `u8`: 0 real64, 1 complex64 pairs |
//! | ndims   | `u32`           |
//! | shape   | `u64` × ndims   |
//! | payload | `f64` column-major; complex as interleaved (re, im) |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::tensor::{ComplexTensor, DenseTensor, ScalarKind};

pub const MAGIC: &[u8; 4] = b"MTEN";
pub const VERSION: u16 = 1;

/// A tensor read from disk, real or complex.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    Real(DenseTensor<f64>),
    Complex(ComplexTensor),
}

impl AnyTensor {
    pub fn kind(&self) -> ScalarKind {
        match self {
            AnyTensor::Real(_) => ScalarKind::Real,
            AnyTensor::Complex(_) => ScalarKind::Complex,
        }
    }

    pub fn into_real(self) -> Result<DenseTensor<f64>> {
        match self {
            AnyTensor::Real(t) => Ok(t),
            AnyTensor::Complex(_) => Err(Error::Format("expected a real tensor".into())),
        }
    }
}

fn write_header(w: &mut impl Write, kind: u8, shape: &[usize]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_real(w: &mut impl Write, t: &DenseTensor<f64>) -> Result<()> {
    write_header(w, 0, t.shape())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_complex(w: &mut impl Write, t: &ComplexTensor) -> Result<()> {
    write_header(w, 1, t.shape())?;
    for v in t.data() {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated tensor file".into())
        } else {
            Error::Io(e)
        }
    })?;
    Ok(buf)
}

pub fn read_tensor(r: &mut impl Read) -> Result<AnyTensor> {
    let magic = read_exact::<4>(r)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(read_exact::<2>(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = read_exact::<1>(r)?[0];
    let ndims = u32::from_le_bytes(read_exact::<4>(r)?) as usize;
    let mut shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        let d = u64::from_le_bytes(read_exact::<8>(r)?);
        shape.push(usize::try_from(d).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
    let mut next = || -> Result<f64> { Ok(f64::from_le_bytes(read_exact::<8>(r)?)) };
    let out = match kind {
        0 => {
            let data = (0..n).map(|_| next()).collect::<Result<Vec<_>>>()?;
            AnyTensor::Real(DenseTensor::new(shape, data)?)
        }
        1 => {
            let data = (0..n)
                .map(|_| Ok(Complex64::new(next()?, next()?)))
                .collect::<Result<Vec<_>>>()?;
            AnyTensor::Complex(DenseTensor::new(shape, data)?)
        }
        k => return Err(Error::Format(format!("unknown scalar kind {k}"))),
    };
    Ok(out)
}

pub fn save_real(path: impl AsRef<Path>, t: &DenseTensor<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_real(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn save_complex(path: impl AsRef<Path>, t: &ComplexTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_complex(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    save_real(path, &DenseTensor::from_matrix(m))
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

pub fn load_real(path: impl AsRef<Path>) -> Result<DenseTensor<f64>> {
    load(path)?.into_real()
}

/// Loads an order-2 tensor (or an order-1 tensor as a column) as a matrix.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Mat> {
    let t = load_real(path)?;
    match t.order() {
        1 => Ok(Mat::from_column_slice(t.len(), 1, t.data())),
        2 => t.to_matrix(),
        _ => Err(Error::Format(format!(
            "expected a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

/// Formats a float for CSV output with '.' as decimal separator.
fn csv_num(v: f64) -> String {
    format!("{v:e}")
}

/// Writes a matrix as CSV with the given header labels (one per column).
pub fn write_csv_matrix(w: &mut impl Write, header: &[String], m: &Mat) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(Error::Shape(format!(
            "{} header labels for {} columns",
            header.len(),
            m.ncols()
        )));
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| csv_num(m[(i, j)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Signature matrix as CSV with atom columns named `r1..rR`.
pub fn write_signatures_csv(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    let header: Vec<String> = (1..=m.ncols()).map(|r| format!("r{r}")).collect();
    let mut w = BufWriter::new(File::create(path)?);
    write_csv_matrix(&mut w, &header, m)?;
    w.flush()?;
    Ok(())
}
