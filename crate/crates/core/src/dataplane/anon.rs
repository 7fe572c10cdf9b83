use std::fmt;
use std::str::FromStr;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Opaque 128-bit identifier that tags stored data instead of any platform
/// identity.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AnonId([u8; 16]);

impl AnonId {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        AnonId(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    /// Low 64 bits, used to derive per-participant trial seeds.
    pub fn seed(&self) -> u64 {
        u64::from_le_bytes(self.0[..8].try_into().expect("8 bytes"))
    }
}

impl fmt::Display for AnonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for AnonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AnonId({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a 32-digit hex identifier")]
pub struct ParseAnonIdError;

impl FromStr for AnonId {
    type Err = ParseAnonIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out).map_err(|_| ParseAnonIdError)?;
        Ok(AnonId(out))
    }
}

impl Serialize for AnonId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AnonId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Source of fresh identifiers. The default draws from the thread-local
/// CSPRNG; the seeded variant exists for reproducible test corpora.
#[derive(Debug, Default)]
pub enum IdMinter {
    #[default]
    Random,
    Seeded(Mutex<ChaCha20Rng>),
}

impl IdMinter {
    pub fn seeded(seed: u64) -> Self {
        IdMinter::Seeded(Mutex::new(ChaCha20Rng::seed_from_u64(seed)))
    }

    pub fn mint(&self) -> AnonId {
        let mut bytes = [0u8; 16];
        match self {
            IdMinter::Random => rand::rng().fill(&mut bytes),
            IdMinter::Seeded(rng) => rng.lock().fill(&mut bytes),
        }
        AnonId(bytes)
    }
}

/// Mints an identifier from the operating-system-seeded CSPRNG.
pub fn mint_anon_id() -> AnonId {
    IdMinter::Random.mint()
}
