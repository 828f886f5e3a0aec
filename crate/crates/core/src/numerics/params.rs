use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use super::{standard_normal, Array, NumericsError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EQPM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-parameter gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Array>;

/// Named collection of parameter arrays. Names are unique and shapes never
/// change after insertion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Array>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u32 {
        CHECKPOINT_VERSION
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<(), NumericsError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    /// Mutable access to the values of one parameter. The shape stays fixed.
    pub fn values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.entries.get_mut(name).map(Array::data_mut)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut [f64])> {
        self.entries
            .iter_mut()
            .map(|(k, v)| (k.as_str(), v.data_mut()))
    }

    pub fn total_size(&self) -> usize {
        self.entries.values().map(Array::len).sum()
    }

    /// Inserts a parameter drawn from N(0, std²).
    pub fn insert_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<(), NumericsError> {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| standard_normal(rng) * std).collect();
        self.insert(name, Array::new(shape.to_vec(), data)?)
    }

    pub fn insert_constant(
        &mut self,
        name: &str,
        shape: &[usize],
        value: f64,
    ) -> Result<(), NumericsError> {
        self.insert(name, Array::full(shape, value))
    }

    /// Every parameter as the f32 value it would be stored as.
    pub fn rounded_to_f32(&self) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| x as f32 as f64)))
                .collect(),
        }
    }

    /// Writes the binary checkpoint: magic `EQPM`, u32 version, u32 entry
    /// count, then per entry u16 name length, UTF-8 name, u8 rank, u32 dims,
    /// and little-endian f32 values. Integers are little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), NumericsError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, value) in &self.entries {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| NumericsError::Checkpoint(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            let rank = u8::try_from(value.rank())
                .map_err(|_| NumericsError::Checkpoint(format!("rank too large: {name}")))?;
            w.write_all(&[rank])?;
            for &d in value.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| NumericsError::Checkpoint(format!("dim too large: {name}")))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for &x in value.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<ParameterSet, NumericsError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NumericsError::Checkpoint(format!(
                "bad magic bytes {magic:?}"
            )));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(NumericsError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let count = read_u32(&mut r, "entry count")?;
        let mut params = ParameterSet::new();
        for index in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len, "name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| {
                NumericsError::Checkpoint(format!("entry {index}: name is not UTF-8"))
            })?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank, "rank")?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r, "dimension")? as usize);
            }
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 4];
            read_exact(&mut r, &mut raw, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let array = Array::new(shape, data)
                .map_err(|e| NumericsError::Checkpoint(format!("entry `{name}`: {e}")))?;
            params.insert(name, array)?;
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NumericsError> {
        let file = File::create(path)?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParameterSet, NumericsError> {
        let file = File::open(path)?;
        Self::read_from(BufReader::new(file))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), NumericsError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NumericsError::Checkpoint(format!("truncated checkpoint while reading {what}"))
        } else {
            NumericsError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
