//! Identifier arithmetic on the circular 128-bit space.
//!
//! A [`NodeId`] is split into an `m`-bit zone prefix and an `n`-bit
//! intra-zone suffix (`m + n = 128`). Application identifiers are the
//! top 128 bits of a SHA-1 digest.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha1::{Digest, Sha1};
use thiserror::Error;

/// Errors raised by identifier construction and parsing.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("zone prefix {prefix} does not fit in {bits} bits")]
    PrefixOutOfRange { prefix: u128, bits: u32 },
    #[error("suffix does not fit in {bits} bits")]
    SuffixOutOfRange { bits: u32 },
    #[error("zone prefix width must be in 1..=16, got {0}")]
    BadPrefixWidth(u32),
    #[error("invalid identifier `{0}`: expected 32 lowercase hex characters")]
    Parse(String),
}

/// Width of the zone prefix. The suffix takes the remaining `128 - m` bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ZoneConfig {
    m: u32,
}

impl ZoneConfig {
    pub const DEFAULT_PREFIX_BITS: u32 = 8;

    pub fn new(m: u32) -> Result<Self, IdError> {
        if !(1..=16).contains(&m) {
            return Err(IdError::BadPrefixWidth(m));
        }
        Ok(Self { m })
    }

    pub fn prefix_bits(&self) -> u32 {
        self.m
    }

    pub fn suffix_bits(&self) -> u32 {
        128 - self.m
    }

    /// Number of zones, `2^m`.
    pub fn zone_count(&self) -> u32 {
        1u32 << self.m
    }

    pub fn suffix_mask(&self) -> u128 {
        (1u128 << self.suffix_bits()) - 1
    }

    /// First identifier of a zone.
    pub fn zone_start(&self, prefix: u32) -> u128 {
        (prefix as u128) << self.suffix_bits()
    }

    pub fn zone_of(&self, id: u128) -> u32 {
        (id >> self.suffix_bits()) as u32
    }

    pub fn suffix_of(&self, id: u128) -> u128 {
        id & self.suffix_mask()
    }
}

impl Default for ZoneConfig {
    fn default() -> Self {
        Self {
            m: Self::DEFAULT_PREFIX_BITS,
        }
    }
}

macro_rules! hex_id {
    ($name:ident) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub u128);

        impl $name {
            pub const fn raw(self) -> u128 {
                self.0
            }

            /// 32-character lowercase hex form.
            pub fn to_hex(self) -> String {
                format!("{:032x}", self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:032x}", self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({:032x})", stringify!($name), self.0)
            }
        }

        impl FromStr for $name {
            type Err = IdError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                if s.len() != 32 || !s.bytes().all(|c| matches!(c, b'0'..=b'9' | b'a'..=b'f')) {
                    return Err(IdError::Parse(s.to_string()));
                }
                u128::from_str_radix(s, 16)
                    .map($name)
                    .map_err(|_| IdError::Parse(s.to_string()))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_id!(NodeId);
hex_id!(AppId);

impl NodeId {
    pub fn zone(self, cfg: &ZoneConfig) -> u32 {
        cfg.zone_of(self.0)
    }

    pub fn suffix(self, cfg: &ZoneConfig) -> u128 {
        cfg.suffix_of(self.0)
    }

    /// Inverse of [`make_node_id`].
    pub fn split(self, cfg: &ZoneConfig) -> (u32, u128) {
        (self.zone(cfg), self.suffix(cfg))
    }
}

/// Builds `prefix * 2^n + suffix`.
pub fn make_node_id(prefix: u128, suffix: u128, cfg: &ZoneConfig) -> Result<NodeId, IdError> {
    if prefix >> cfg.prefix_bits() != 0 {
        return Err(IdError::PrefixOutOfRange {
            prefix,
            bits: cfg.prefix_bits(),
        });
    }
    if suffix & !cfg.suffix_mask() != 0 {
        return Err(IdError::SuffixOutOfRange {
            bits: cfg.suffix_bits(),
        });
    }
    Ok(NodeId((prefix << cfg.suffix_bits()) | suffix))
}

/// SHA-1 over `name ‖ creator_key ‖ salt`, keeping the 128 most significant bits.
pub fn app_id(name: &str, creator_key: &[u8], salt: &[u8]) -> AppId {
    let mut hasher = Sha1::new();
    hasher.update(name.as_bytes());
    hasher.update(creator_key);
    hasher.update(salt);
    let digest = hasher.finalize();
    let mut top = [0u8; 16];
    top.copy_from_slice(&digest[..16]);
    AppId(u128::from_be_bytes(top))
}

/// Key of the shared advertise-discover tree.
pub fn ad_app_id() -> AppId {
    app_id("AD application", &[], &[])
}

/// Shortest distance between two points on the circle `[0, 2^128)`.
pub fn ring_distance(a: u128, b: u128) -> u128 {
    let d = a.wrapping_sub(b);
    d.min(d.wrapping_neg())
}

/// Clockwise distance from `from` to `to`.
pub fn clockwise_distance(from: u128, to: u128) -> u128 {
    to.wrapping_sub(from)
}

/// Orders two candidates by closeness to `key`; ties go to the clockwise
/// (numerically larger modulo the ring) identifier.
pub fn closer_to(key: u128, a: u128, b: u128) -> std::cmp::Ordering {
    ring_distance(a, key)
        .cmp(&ring_distance(b, key))
        .then_with(|| clockwise_distance(key, a).cmp(&clockwise_distance(key, b)))
}

/// Circular distance between two zone prefixes.
pub fn zone_distance(a: u32, b: u32, cfg: &ZoneConfig) -> u32 {
    let mask = cfg.zone_count() - 1;
    let d = a.wrapping_sub(b) & mask;
    d.min(cfg.zone_count() - d)
}
