//! 64-bit capability tokens.
//!
//! A token packs, from the most significant bit down: a 2-bit offset-type
//! header, a 16-bit nonce, the capability id field and the offset. The id
//! field stores the id relative to the first id of the offset type's
//! partition, so the four partitions are disjoint and ordered.
//!
//! The root capability has header, nonce and id all zero, which makes a
//! plain 32-bit physical address a valid root-relative token.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const NONCE_BITS: u32 = 16;
pub const HEADER_BITS: u32 = 2;
const NONCE_SHIFT: u32 = 64 - HEADER_BITS - NONCE_BITS;
const HEADER_SHIFT: u32 = 64 - HEADER_BITS;

/// Capability identifier (global, i.e. already offset by its partition base).
pub type CapId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OffsetType {
    Off32,
    Off24,
    Off16,
    Off8,
}

impl OffsetType {
    pub const ALL: [OffsetType; 4] = [OffsetType::Off32, OffsetType::Off24, OffsetType::Off16, OffsetType::Off8];

    pub const fn code(self) -> u64 {
        match self {
            OffsetType::Off32 => 0b00,
            OffsetType::Off24 => 0b01,
            OffsetType::Off16 => 0b10,
            OffsetType::Off8 => 0b11,
        }
    }

    pub const fn from_code(code: u64) -> OffsetType {
        match code & 0b11 {
            0b00 => OffsetType::Off32,
            0b01 => OffsetType::Off24,
            0b10 => OffsetType::Off16,
            _ => OffsetType::Off8,
        }
    }

    pub const fn offset_bits(self) -> u32 {
        match self {
            OffsetType::Off32 => 32,
            OffsetType::Off24 => 24,
            OffsetType::Off16 => 16,
            OffsetType::Off8 => 8,
        }
    }

    pub const fn id_bits(self) -> u32 {
        64 - HEADER_BITS - NONCE_BITS - self.offset_bits()
    }

    /// First global id of this type's partition.
    pub const fn id_base(self) -> CapId {
        match self {
            OffsetType::Off32 => 0,
            OffsetType::Off24 => 1 << 14,
            OffsetType::Off16 => 1 << 22,
            OffsetType::Off8 => 1 << 30,
        }
    }

    /// One past the last global id of this type's partition.
    pub const fn id_end(self) -> CapId {
        match self {
            OffsetType::Off32 => 1 << 14,
            OffsetType::Off24 => 1 << 22,
            OffsetType::Off16 => 1 << 30,
            OffsetType::Off8 => 1 << 38,
        }
    }

    /// Largest segment length addressable with this offset width.
    pub const fn max_len(self) -> u64 {
        1 << self.offset_bits()
    }

    pub fn contains_id(self, id: CapId) -> bool {
        (self.id_base()..self.id_end()).contains(&id)
    }

    /// Partition an id belongs to, if any.
    pub fn of_id(id: CapId) -> Option<OffsetType> {
        OffsetType::ALL.into_iter().find(|ot| ot.contains_id(id))
    }

    /// Smallest offset type whose offsets cover a segment of `len` bytes.
    pub fn covering(len: u64) -> Option<OffsetType> {
        [OffsetType::Off8, OffsetType::Off16, OffsetType::Off24, OffsetType::Off32]
            .into_iter()
            .find(|ot| len <= ot.max_len())
    }
}

impl fmt::Display for OffsetType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-bit", self.offset_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("capability id {id} outside the {ot} partition")]
    IdOutOfPartition { ot: OffsetType, id: CapId },
    #[error("offset {offset:#x} does not fit a {ot} offset field")]
    OffsetOverflow { ot: OffsetType, offset: u64 },
    #[error("malformed token {0:#018x}")]
    Malformed(u64),
}

/// The raw 64-bit capability token.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct CapToken(pub u64);

/// A token split into its fields; `id` is the global capability id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DecodedToken {
    pub offset_type: OffsetType,
    pub nonce: u16,
    pub id: CapId,
    pub offset: u64,
}

impl CapToken {
    pub const ROOT: CapToken = CapToken(0);

    pub fn encode(ot: OffsetType, nonce: u16, id: CapId, offset: u64) -> Result<CapToken, TokenError> {
        if !ot.contains_id(id) {
            return Err(TokenError::IdOutOfPartition { ot, id });
        }
        if offset >= ot.max_len() {
            return Err(TokenError::OffsetOverflow { ot, offset });
        }
        let field = id - ot.id_base();
        let raw = (ot.code() << HEADER_SHIFT) | ((nonce as u64) << NONCE_SHIFT) | (field << ot.offset_bits()) | offset;
        Ok(CapToken(raw))
    }

    pub fn decode(self) -> Result<DecodedToken, TokenError> {
        let ot = OffsetType::from_code(self.0 >> HEADER_SHIFT);
        let nonce = ((self.0 >> NONCE_SHIFT) & 0xffff) as u16;
        let field = (self.0 >> ot.offset_bits()) & ((1u64 << ot.id_bits()) - 1);
        let offset = self.0 & (ot.max_len() - 1);
        let id = field + ot.id_base();
        if id >= ot.id_end() {
            return Err(TokenError::Malformed(self.0));
        }
        Ok(DecodedToken { offset_type: ot, nonce, id, offset })
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn offset_type(self) -> OffsetType {
        OffsetType::from_code(self.0 >> HEADER_SHIFT)
    }

    /// Offset field, regardless of whether the id field is well formed.
    pub fn offset(self) -> u64 {
        self.0 & (self.offset_type().max_len() - 1)
    }

    /// Replaces the offset, keeping header, nonce and id.
    pub fn with_offset(self, offset: u64) -> Result<CapToken, TokenError> {
        let ot = self.offset_type();
        if offset >= ot.max_len() {
            return Err(TokenError::OffsetOverflow { ot, offset });
        }
        Ok(CapToken((self.0 & !(ot.max_len() - 1)) | offset))
    }

    /// Same capability at offset zero.
    pub fn base(self) -> CapToken {
        CapToken(self.0 & !(self.offset_type().max_len() - 1))
    }

    /// Pointer-style arithmetic inside the segment.
    pub fn add(self, delta: u64) -> Result<CapToken, TokenError> {
        let ot = self.offset_type();
        let offset = self.offset().checked_add(delta).ok_or(TokenError::OffsetOverflow { ot, offset: u64::MAX })?;
        self.with_offset(offset)
    }
}

impl fmt::Debug for CapToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CapToken({:#018x})", self.0)
    }
}

impl fmt::Display for CapToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

impl FromStr for CapToken {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
        u64::from_str_radix(digits, 16).map(CapToken)
    }
}

impl From<CapToken> for u64 {
    fn from(t: CapToken) -> u64 {
        t.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn field_widths_sum_to_64() {
        for ot in OffsetType::ALL {
            assert_eq!(ot.offset_bits() + ot.id_bits() + NONCE_BITS + HEADER_BITS, 64);
        }
        assert_eq!(OffsetType::Off32.id_bits(), 14);
        assert_eq!(OffsetType::Off24.id_bits(), 22);
        assert_eq!(OffsetType::Off16.id_bits(), 30);
        assert_eq!(OffsetType::Off8.id_bits(), 38);
    }

    #[test]
    fn partitions_are_ordered_and_disjoint() {
        let mut prev_end = 0;
        for ot in OffsetType::ALL {
            assert_eq!(ot.id_base(), prev_end);
            assert!(ot.id_end() > ot.id_base());
            // partition must fit the id field
            assert!(ot.id_end() - ot.id_base() <= 1 << ot.id_bits());
            prev_end = ot.id_end();
        }
        assert_eq!(prev_end, 1 << 38);
    }

    #[test]
    fn root_token_is_a_physical_address() {
        let t = CapToken::encode(OffsetType::Off32, 0, 0, 0x1000).unwrap();
        assert_eq!(t.raw(), 0x0000_0000_0000_1000);
        let d = CapToken(0x1000).decode().unwrap();
        assert_eq!(d.offset_type, OffsetType::Off32);
        assert_eq!((d.nonce, d.id, d.offset), (0, 0, 0x1000));
    }

    #[test]
    fn encode_known_value() {
        // (0 << 62) | (0xABCD << 46) | (5 << 32) | 0x10
        let expected = (0xABCDu64 << 46) | (5u64 << 32) | 0x10;
        assert_eq!(expected, 0x2AF3_4005_0000_0010);
        let t = CapToken::encode(OffsetType::Off32, 0xABCD, 5, 0x10).unwrap();
        assert_eq!(t.raw(), expected);
        let d = t.decode().unwrap();
        assert_eq!(d.offset_type, OffsetType::Off32);
        assert_eq!((d.nonce, d.id, d.offset), (0xABCD, 5, 0x10));
    }

    #[test]
    fn encode_rejects_id_at_partition_boundary() {
        assert_eq!(
            CapToken::encode(OffsetType::Off32, 0, 1 << 14, 0),
            Err(TokenError::IdOutOfPartition { ot: OffsetType::Off32, id: 1 << 14 })
        );
        assert!(CapToken::encode(OffsetType::Off24, 0, (1 << 14) - 1, 0).is_err());
        assert!(CapToken::encode(OffsetType::Off24, 0, 1 << 14, 0).is_ok());
    }

    #[test]
    fn encode_rejects_offset_overflow() {
        assert!(matches!(
            CapToken::encode(OffsetType::Off8, 0, 1 << 30, 0x100),
            Err(TokenError::OffsetOverflow { .. })
        ));
    }

    #[test]
    fn decode_rejects_id_past_partition() {
        // 24-bit header with an id field pointing beyond 2^22.
        let field = (1u64 << 22) - (1 << 14);
        let raw = (0b01 << 62) | (field << 24);
        assert_eq!(CapToken(raw).decode(), Err(TokenError::Malformed(raw)));
        let ok = (0b01 << 62) | ((field - 1) << 24);
        assert_eq!(CapToken(ok).decode().unwrap().id, (1 << 22) - 1);
    }

    #[test]
    fn with_offset_examples() {
        assert_eq!(CapToken::ROOT.with_offset(0x20).unwrap(), CapToken(0x20));
        let t = CapToken::encode(OffsetType::Off32, 0x1234, 5, 0x10).unwrap();
        let u = t.with_offset(0x18).unwrap().decode().unwrap();
        assert_eq!((u.nonce, u.id, u.offset), (0x1234, 5, 0x18));
        let small = CapToken::encode(OffsetType::Off8, 7, (1 << 30) + 3, 0).unwrap();
        assert!(matches!(small.with_offset(0x100), Err(TokenError::OffsetOverflow { .. })));
        assert_eq!(small.with_offset(0xff).unwrap().offset(), 0xff);
    }

    #[test]
    fn covering_picks_smallest_type() {
        assert_eq!(OffsetType::covering(1), Some(OffsetType::Off8));
        assert_eq!(OffsetType::covering(256), Some(OffsetType::Off8));
        assert_eq!(OffsetType::covering(257), Some(OffsetType::Off16));
        assert_eq!(OffsetType::covering(1 << 24), Some(OffsetType::Off24));
        assert_eq!(OffsetType::covering(1 << 32), Some(OffsetType::Off32));
        assert_eq!(OffsetType::covering((1 << 32) + 1), None);
    }

    #[test]
    fn hex_text_form() {
        let t = CapToken(0x2AF3_4005_0000_0010);
        assert_eq!(t.to_string(), "0x2af3400500000010");
        assert_eq!("0x2AF3400500000010".parse::<CapToken>().unwrap(), t);
    }

    fn valid_fields() -> impl Strategy<Value = (OffsetType, u16, u64, u64)> {
        (0usize..4, any::<u16>(), any::<u64>(), any::<u64>()).prop_map(|(i, nonce, a, b)| {
            let ot = OffsetType::ALL[i];
            let id = ot.id_base() + a % (ot.id_end() - ot.id_base());
            let offset = b % ot.max_len();
            (ot, nonce, id, offset)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100_000))]

        #[test]
        fn encode_decode_round_trip((ot, nonce, id, offset) in valid_fields()) {
            let t = CapToken::encode(ot, nonce, id, offset).unwrap();
            let d = t.decode().unwrap();
            prop_assert_eq!(d, DecodedToken { offset_type: ot, nonce, id, offset });
            prop_assert_eq!(CapToken::encode(d.offset_type, d.nonce, d.id, d.offset).unwrap(), t);
        }
    }

    proptest! {
        #[test]
        fn decode_valid_iff_id_in_partition(raw in any::<u64>()) {
            let ot = OffsetType::from_code(raw >> 62);
            let field = (raw >> ot.offset_bits()) & ((1u64 << ot.id_bits()) - 1);
            let id = field + ot.id_base();
            prop_assert_eq!(CapToken(raw).decode().is_ok(), ot.contains_id(id));
            if let Ok(d) = CapToken(raw).decode() {
                prop_assert_eq!(CapToken::encode(d.offset_type, d.nonce, d.id, d.offset).unwrap().raw(), raw);
            }
        }

        #[test]
        fn offset_arithmetic_preserves_identity((ot, nonce, id, offset) in valid_fields(), new in any::<u64>()) {
            let t = CapToken::encode(ot, nonce, id, offset).unwrap();
            let new = new % ot.max_len();
            let u = t.with_offset(new).unwrap().decode().unwrap();
            prop_assert_eq!((u.offset_type, u.nonce, u.id, u.offset), (ot, nonce, id, new));
        }
    }
}
