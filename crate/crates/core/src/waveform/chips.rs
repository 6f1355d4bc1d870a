//! IEEE 802.15.4 2.4 GHz DSSS spreading: 4-bit symbols to 32-chip sequences.

use crc::{Crc, CRC_16_KERMIT};

pub const CHIPS_PER_SYMBOL: usize = 32;
pub const SYMBOLS_PER_BYTE: usize = 2;
pub const CHIPS_PER_BYTE: usize = CHIPS_PER_SYMBOL * SYMBOLS_PER_BYTE;

/// Chip sequence of symbol 0, chips c0..c31.
const SYMBOL0: [u8; 32] = [
    1, 1, 0, 1, 1, 0, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 1, 0,
];

/// The 16 chip sequences in bipolar form (+1 for chip 1, -1 for chip 0).
///
/// Symbols 1..7 are symbol 0 cyclically shifted right by 4 chips per step;
/// symbols 8..15 are symbols 0..7 with every odd-indexed chip inverted.
pub static CHIP_TABLE: std::sync::LazyLock<[[i8; 32]; 16]> = std::sync::LazyLock::new(|| {
    let mut table = [[0i8; 32]; 16];
    for sym in 0..8 {
        for c in 0..32 {
            let bit = SYMBOL0[(c + 32 - 4 * sym) % 32];
            table[sym][c] = if bit == 1 { 1 } else { -1 };
            let inv = if c % 2 == 1 { 1 - bit } else { bit };
            table[sym + 8][c] = if inv == 1 { 1 } else { -1 };
        }
    }
    table
});

/// Byte to symbols, least significant nibble first.
pub fn byte_symbols(b: u8) -> [u8; 2] {
    [b & 0x0F, b >> 4]
}

pub fn bytes_to_symbols(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().flat_map(|&b| byte_symbols(b)).collect()
}

/// Pairs of symbols back to bytes. A trailing odd symbol is dropped.
pub fn symbols_to_bytes(symbols: &[u8]) -> Vec<u8> {
    symbols
        .chunks_exact(2)
        .map(|p| (p[0] & 0x0F) | (p[1] << 4))
        .collect()
}

pub fn symbols_to_chips(symbols: &[u8]) -> Vec<i8> {
    let table = &*CHIP_TABLE;
    symbols
        .iter()
        .flat_map(|&s| table[s as usize & 0x0F].iter().copied())
        .collect()
}

pub fn bytes_to_chips(bytes: &[u8]) -> Vec<i8> {
    symbols_to_chips(&bytes_to_symbols(bytes))
}

const FCS: Crc<u16> = Crc::<u16>::new(&CRC_16_KERMIT);

/// 802.15.4 frame check sequence (CCITT polynomial, reflected, zero init),
/// low byte first as transmitted.
pub fn checksum(payload: &[u8]) -> [u8; 2] {
    FCS.checksum(payload).to_le_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(row: &[i8; 32]) -> Vec<u8> {
        row.iter().map(|&c| u8::from(c > 0)).collect()
    }

    #[test]
    fn table_matches_published_rows() {
        let t = &*CHIP_TABLE;
        assert_eq!(
            bits(&t[1]),
            vec![1, 1, 1, 0, 1, 1, 0, 1, 1, 0, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0]
        );
        assert_eq!(
            bits(&t[7]),
            vec![1, 0, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 1, 0, 1, 1, 0, 1]
        );
        assert_eq!(
            bits(&t[8]),
            vec![1, 0, 0, 0, 1, 1, 0, 0, 1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 1, 1, 1, 1, 0, 1, 1]
        );
        assert_eq!(
            bits(&t[15]),
            vec![1, 1, 0, 0, 1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 0, 0, 0]
        );
    }

    #[test]
    fn sequences_are_distinct() {
        let t = &*CHIP_TABLE;
        for a in 0..16 {
            for b in 0..16 {
                let corr: i32 = (0..32).map(|c| t[a][c] as i32 * t[b][c] as i32).sum();
                if a == b {
                    assert_eq!(corr, 32);
                } else {
                    assert!(corr < 32);
                }
            }
        }
    }

    #[test]
    fn nibble_order_round_trips() {
        assert_eq!(byte_symbols(0xA7), [7, 0xA]);
        let bytes = [0x00, 0xA7, 0x3C, 0xFF];
        assert_eq!(symbols_to_bytes(&bytes_to_symbols(&bytes)), bytes);
    }

    #[test]
    fn kermit_check_value() {
        // Standard check input "123456789" -> 0x2189.
        assert_eq!(u16::from_le_bytes(checksum(b"123456789")), 0x2189);
    }
}
