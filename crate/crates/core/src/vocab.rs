//! Byte-level vocabulary: ids `0..=255` are raw bytes, followed by three
//! reserved control symbols.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Byte(u8),
    Bos,
    Eos,
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Vocabulary;

impl Vocabulary {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const PAD: u32 = 258;
    pub const SIZE: usize = 259;

    pub fn byte_level() -> Self {
        Vocabulary
    }

    pub fn len(&self) -> usize {
        Self::SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, symbol: Symbol) -> u32 {
        match symbol {
            Symbol::Byte(b) => b as u32,
            Symbol::Bos => Self::BOS,
            Symbol::Eos => Self::EOS,
            Symbol::Pad => Self::PAD,
        }
    }

    pub fn symbol(&self, id: u32) -> Result<Symbol> {
        match id {
            0..=255 => Ok(Symbol::Byte(id as u8)),
            Self::BOS => Ok(Symbol::Bos),
            Self::EOS => Ok(Symbol::Eos),
            Self::PAD => Ok(Symbol::Pad),
            _ => Err(Error::Vocabulary(id)),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Decodes byte ids to text, dropping control symbols. Invalid UTF-8 is
    /// replaced rather than rejected since generated bytes are arbitrary.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if let Symbol::Byte(b) = self.symbol(id)? {
                bytes.push(b);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_symbols_are_a_bijection() {
        let v = Vocabulary::byte_level();
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.symbol(id).unwrap()), id);
        }
        assert!(v.symbol(259).is_err());
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary;
        let s = "where is the car? <12.0,40.0>";
        assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
        let mut ids = vec![Vocabulary::BOS];
        ids.extend(v.encode("ok"));
        ids.push(Vocabulary::EOS);
        assert_eq!(v.decode(&ids).unwrap(), "ok");
    }
}
