//! Parameter checkpoints: a flat ordered list of named `f64` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"RGCK"
//! version u32            (currently 1)
//! count   u32
//! repeat count times:
//!     name_len u32, name bytes (UTF-8)
//!     ndim u32, dims u64 × ndim
//!     data f64 × product(dims)
//! ```

use std::io::{Read, Write};

use super::NnError;

pub const MAGIC: &[u8; 4] = b"RGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        self.entries.push(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for d in &e.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| NnError::Checkpoint(format!("entry name: {e}")))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            entries.push(NamedArray { name, shape, data });
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NnError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NnError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            arrays in prop::collection::vec(
                (
                    "[a-z_.]{1,12}",
                    prop::collection::vec(1usize..4, 0..3),
                    any::<u64>(),
                ),
                0..5,
            )
        ) {
            let mut ck = Checkpoint::default();
            for (name, shape, seed) in &arrays {
                let n: usize = shape.iter().product();
                // Arbitrary bit patterns, including NaN payloads and infinities.
                let data: Vec<f64> = (0..n as u64)
                    .map(|i| f64::from_bits(seed.wrapping_mul(i + 1).rotate_left(17)))
                    .collect();
                ck.push(name.clone(), shape, &data);
            }
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(back.entries.len(), ck.entries.len());
            for (a, b) in back.entries.iter().zip(&ck.entries) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.shape, &b.shape);
                let abits: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
                let bbits: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut buf = Vec::new();
        Checkpoint::default().write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(buf.as_slice()),
            Err(NnError::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let mut ck = Checkpoint::default();
        ck.push("w", &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Checkpoint::read_from(buf.as_slice()),
            Err(NnError::Io(_))
        ));
    }
}
