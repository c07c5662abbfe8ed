//! Transfer-integrity checksum.
//!
//! Objects are compared with adler32, rendered as eight lowercase hex digits.

use std::fmt;

const MOD_ADLER: u32 = 65_521;
// Largest n such that 255 n (n + 1) / 2 + (n + 1)(MOD_ADLER - 1) fits in u32.
const NMAX: usize = 5552;

/// Incremental adler32 state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Adler32 {
    a: u32,
    b: u32,
}

impl Default for Adler32 {
    fn default() -> Self {
        Self::new()
    }
}

impl Adler32 {
    pub fn new() -> Self {
        Self { a: 1, b: 0 }
    }

    pub fn update(&mut self, data: &[u8]) {
        let (mut a, mut b) = (self.a, self.b);
        for block in data.chunks(NMAX) {
            for &byte in block {
                a += u32::from(byte);
                b += a;
            }
            a %= MOD_ADLER;
            b %= MOD_ADLER;
        }
        self.a = a;
        self.b = b;
    }

    pub fn value(&self) -> u32 {
        (self.b << 16) | self.a
    }

    pub fn finish(&self) -> Digest {
        Digest(self.value())
    }
}

/// A finished adler32 checksum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub u32);

impl Digest {
    pub fn of(data: &[u8]) -> Self {
        let mut state = Adler32::new();
        state.update(data);
        state.finish()
    }

    pub fn to_hex(&self) -> String {
        format!("{:08x}", self.0)
    }

    /// Parses the eight-digit hex form; case-insensitive.
    pub fn from_hex(text: &str) -> Option<Self> {
        if text.len() != 8 {
            return None;
        }
        u32::from_str_radix(text, 16).ok().map(Digest)
    }

    /// Value for a `Digest:` header, e.g. `adler32=0a1b2c3d`.
    pub fn header_value(&self) -> String {
        format!("adler32={}", self.to_hex())
    }

    /// Extracts the adler32 entry from a `Digest:` header value.
    pub fn from_header_value(value: &str) -> Option<Self> {
        value.split(',').find_map(|entry| {
            let (alg, hex) = entry.trim().split_once('=')?;
            alg.eq_ignore_ascii_case("adler32")
                .then(|| Digest::from_hex(hex.trim()))
                .flatten()
        })
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}
