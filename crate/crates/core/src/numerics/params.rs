use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;

/// Which parameter group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    /// θ_e, kept after pretraining.
    Encoder,
    /// θ_d, pretraining-only readouts.
    AuxDecoder,
    /// Readout trained from scratch during fine-tuning.
    FinetuneDecoder,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Encoder => 0,
            Partition::AuxDecoder => 1,
            Partition::FinetuneDecoder => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Partition::Encoder),
            1 => Ok(Partition::AuxDecoder),
            2 => Ok(Partition::FinetuneDecoder),
            t => Err(Error::Format(format!("unknown partition tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor<f32>,
    pub partition: Partition,
}

/// Ordered, uniquely named parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: IndexMap<String, ParamEntry>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>, partition: Partition) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::arg(format!("duplicate parameter name {name}")));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, partition });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn partition(&self, name: &str) -> Option<Partition> {
        self.entries.get(name).map(|e| e.partition)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Drops every entry of the given partition.
    pub fn remove_partition(&mut self, partition: Partition) {
        self.entries.retain(|_, e| e.partition != partition);
    }

    /// Copies of the entries in `partition`, preserving order.
    pub fn subset(&self, partition: Partition) -> ModelParams {
        ModelParams {
            entries: self
                .entries
                .iter()
                .filter(|(_, e)| e.partition == partition)
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    /// Inserts or replaces every entry of `other`.
    pub fn merge(&mut self, other: &ModelParams) {
        for (k, e) in &other.entries {
            self.entries.insert(k.clone(), e.clone());
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, e) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[e.partition.tag(), e.tensor.rank() as u8])?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u32()?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let head = r.take(2)?;
            let partition = Partition::from_tag(head[0])?;
            let rank = head[1] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            params
                .insert(&name, tensor, partition)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated input".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ModelParams {
        let mut p = ModelParams::new();
        p.insert(
            "enc.w",
            Tensor::new(
                vec![2, 3],
                vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, -0.0],
            )
            .unwrap(),
            Partition::Encoder,
        )
        .unwrap();
        p.insert(
            "aux.b",
            Tensor::new(vec![4], vec![0.1; 4]).unwrap(),
            Partition::AuxDecoder,
        )
        .unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(p
            .insert("enc.w", Tensor::zeros(&[1]), Partition::Encoder)
            .is_err());
    }

    #[test]
    fn checkpoint_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"CKPT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 5);
        assert_eq!(&bytes[14..19], b"enc.w");
        assert_eq!(bytes[19], 0);
        assert_eq!(bytes[20], 2);
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(matches!(
                ModelParams::from_bytes(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
    }

    #[test]
    fn remove_partition_discards_decoder() {
        let mut p = sample();
        p.remove_partition(Partition::AuxDecoder);
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["enc.w"]);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            vals in proptest::collection::vec(any::<u32>(), 1..40),
            tag in 0u8..3,
        ) {
            let data: Vec<f32> = vals.iter().map(|&b| f32::from_bits(b)).collect();
            let mut p = ModelParams::new();
            p.insert("x", Tensor::new(vec![data.len()], data.clone()).unwrap(), Partition::from_tag(tag).unwrap()).unwrap();
            let back = ModelParams::from_bytes(&p.to_bytes()).unwrap();
            let got: Vec<u32> = back.get("x").unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, vals);
            prop_assert_eq!(back.partition("x"), Some(Partition::from_tag(tag).unwrap()));
        }
    }
}
