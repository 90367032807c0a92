//! Bit-string genome for encoder-decoder architectures and the genetic
//! operators that act on it.
//!
//! An asymmetric genome holds `N` units of `14 + 4N` bits each:
//!
//! ```text
//! [E^s | E^f(3) | E^h(3) | D^s | D^f(3) | D^h(3) | rho^1(4) .. rho^N(4)]
//! ```
//!
//! Every field is stored most-significant-bit first. The epoch variant appends
//! a 2-bit code `t`; the symmetric variant packs each unit into 10 bits
//! (`[s | f(3) | h(3) | mirror gate(3)]`) with the decoder copying the encoder.

use std::fmt;

use bitvec::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest epoch budget a decoded epoch code may yield.
pub const MIN_EPOCHS: u32 = 100;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenomeError {
    #[error("malformed genome: expected {expected} bits, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("malformed genome hex: {0}")]
    Hex(String),
    #[error("genome layouts differ: {0} vs {1}")]
    LayoutMismatch(Layout, Layout),
    #[error("unit {unit}: {reason}")]
    NotRepresentable { unit: usize, reason: String },
    #[error("invalid search space: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Asymmetric,
    Symmetric,
    AsymmetricWithEpochs,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Asymmetric => "asymmetric",
            Variant::Symmetric => "symmetric",
            Variant::AsymmetricWithEpochs => "asymmetric_with_epochs",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = GenomeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "asymmetric" | "asym" => Ok(Variant::Asymmetric),
            "symmetric" | "sym" => Ok(Variant::Symmetric),
            "asymmetric_with_epochs" | "asymmetric-with-epochs" | "epochs" | "t" => {
                Ok(Variant::AsymmetricWithEpochs)
            }
            other => Err(GenomeError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The part of a search space that fixes the bit layout of a genome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub units: usize,
    pub variant: Variant,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.variant, self.units)
    }
}

impl Layout {
    pub fn new(units: usize, variant: Variant) -> Self {
        Self { units, variant }
    }

    /// Bits occupied by one unit.
    pub fn unit_bits(&self) -> usize {
        match self.variant {
            Variant::Symmetric => 10,
            _ => 14 + 4 * self.units,
        }
    }

    pub fn genome_length(&self) -> usize {
        let body = self.units * self.unit_bits();
        match self.variant {
            Variant::AsymmetricWithEpochs => body + 2,
            _ => body,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceConfig {
    pub units: usize,
    pub variant: Variant,
    pub mutation_rate: f64,
}

impl Default for SearchSpaceConfig {
    fn default() -> Self {
        Self {
            units: 5,
            variant: Variant::Asymmetric,
            mutation_rate: 0.05,
        }
    }
}

impl SearchSpaceConfig {
    pub fn new(units: usize, variant: Variant) -> Self {
        Self {
            units,
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GenomeError> {
        if self.units == 0 {
            return Err(GenomeError::Config("unit count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(GenomeError::Config(format!(
                "mutation rate {} outside [0, 1]",
                self.mutation_rate
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.units, self.variant)
    }
}

pub fn genome_length(config: &SearchSpaceConfig) -> usize {
    config.layout().genome_length()
}

/// Filter size selected by a 3-bit field: `2 * bits + 1`.
pub fn filter_size(bits: u8) -> usize {
    2 * bits as usize + 1
}

/// Channel count selected by a 3-bit field: `2^(bits - 1)`, with the zero
/// code clamped to one channel.
pub fn channel_count(bits: u8) -> usize {
    if bits == 0 {
        1
    } else {
        1 << (bits - 1)
    }
}

/// Epoch budget for a 2-bit epoch code: `500 * (2^t - 1)`, floored at
/// [`MIN_EPOCHS`].
pub fn decode_epochs(t: u8) -> u32 {
    let raw = 500 * ((1u32 << t) - 1);
    raw.max(MIN_EPOCHS)
}

/// Decoded parameters of one encoder/decoder unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitParams {
    pub enc_skip: bool,
    pub enc_filter_bits: u8,
    pub enc_chan_bits: u8,
    pub dec_skip: bool,
    pub dec_filter_bits: u8,
    pub dec_chan_bits: u8,
    /// `skip_gates[i]` is the channel width of the skip path from this unit's
    /// encoder into decoder `i`; zero means no connection.
    pub skip_gates: Vec<u8>,
}

impl UnitParams {
    pub fn enc_filter_size(&self) -> usize {
        filter_size(self.enc_filter_bits)
    }
    pub fn enc_channels(&self) -> usize {
        channel_count(self.enc_chan_bits)
    }
    pub fn dec_filter_size(&self) -> usize {
        filter_size(self.dec_filter_bits)
    }
    pub fn dec_channels(&self) -> usize {
        channel_count(self.dec_chan_bits)
    }
}

/// Everything a genome encodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub units: Vec<UnitParams>,
    /// Two-bit epoch code, present only for the epoch variant.
    pub epoch_code: Option<u8>,
}

impl Architecture {
    pub fn epochs(&self) -> Option<u32> {
        self.epoch_code.map(decode_epochs)
    }
}

/// Fixed-length bit string. Bit 0 is the most significant bit of byte 0.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Genome {
    bits: BitVec<u8, Msb0>,
    layout: Layout,
}

impl fmt::Debug for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Genome({}, {})", self.layout, self.to_hex())
    }
}

impl Genome {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            bits: bitvec![u8, Msb0; 0; layout.genome_length()],
            layout,
        }
    }

    pub fn from_bits(layout: Layout, bits: &[bool]) -> Result<Self, GenomeError> {
        let expected = layout.genome_length();
        if bits.len() != expected {
            return Err(GenomeError::Length {
                expected,
                actual: bits.len(),
            });
        }
        Ok(Self {
            bits: bits.iter().copied().collect(),
            layout,
        })
    }

    /// Uniformly random genome, reproducible for a fixed seed.
    pub fn random(config: &SearchSpaceConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(config.layout(), &mut rng)
    }

    pub fn random_with<R: Rng + ?Sized>(layout: Layout, rng: &mut R) -> Self {
        let len = layout.genome_length();
        let mut bytes = vec![0u8; len.div_ceil(8)];
        rng.fill(bytes.as_mut_slice());
        let mut bits = BitVec::<u8, Msb0>::from_vec(bytes);
        bits.truncate(len);
        Self { bits, layout }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.iter().by_vals()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn hamming(&self, other: &Genome) -> usize {
        self.bits
            .iter()
            .zip(other.bits.iter())
            .filter(|(a, b)| **a != **b)
            .count()
    }

    /// Lowercase hex of the bit string, zero-padded to a byte boundary.
    pub fn to_hex(&self) -> String {
        let mut padded = self.bits.clone();
        padded.resize(self.bits.len().div_ceil(8) * 8, false);
        hex::encode(padded.as_raw_slice())
    }

    pub fn from_hex(layout: Layout, text: &str) -> Result<Self, GenomeError> {
        let bytes = hex::decode(text.trim()).map_err(|e| GenomeError::Hex(e.to_string()))?;
        let len = layout.genome_length();
        if bytes.len() != len.div_ceil(8) {
            return Err(GenomeError::Length {
                expected: len,
                actual: bytes.len() * 8,
            });
        }
        let mut bits = BitVec::<u8, Msb0>::from_vec(bytes);
        if bits[len..].any() {
            return Err(GenomeError::Hex("nonzero padding bits".into()));
        }
        bits.truncate(len);
        Ok(Self { bits, layout })
    }

    fn field(&self, start: usize, width: usize) -> u8 {
        self.bits[start..start + width].load_be::<u8>()
    }

    pub fn decode(&self) -> Result<Architecture, GenomeError> {
        let expected = self.layout.genome_length();
        if self.bits.len() != expected {
            return Err(GenomeError::Length {
                expected,
                actual: self.bits.len(),
            });
        }
        let n = self.layout.units;
        let stride = self.layout.unit_bits();
        let mut units = Vec::with_capacity(n);
        for u in 0..n {
            let base = u * stride;
            let params = match self.layout.variant {
                Variant::Symmetric => {
                    let skip = self.bits[base];
                    let f = self.field(base + 1, 3);
                    let h = self.field(base + 4, 3);
                    let mut skip_gates = vec![0; n];
                    skip_gates[u] = self.field(base + 7, 3);
                    UnitParams {
                        enc_skip: skip,
                        enc_filter_bits: f,
                        enc_chan_bits: h,
                        dec_skip: skip,
                        dec_filter_bits: f,
                        dec_chan_bits: h,
                        skip_gates,
                    }
                }
                _ => UnitParams {
                    enc_skip: self.bits[base],
                    enc_filter_bits: self.field(base + 1, 3),
                    enc_chan_bits: self.field(base + 4, 3),
                    dec_skip: self.bits[base + 7],
                    dec_filter_bits: self.field(base + 8, 3),
                    dec_chan_bits: self.field(base + 11, 3),
                    skip_gates: (0..n).map(|i| self.field(base + 14 + 4 * i, 4)).collect(),
                },
            };
            units.push(params);
        }
        let epoch_code = match self.layout.variant {
            Variant::AsymmetricWithEpochs => Some(self.field(n * stride, 2)),
            _ => None,
        };
        Ok(Architecture { units, epoch_code })
    }

    pub fn encode(layout: Layout, arch: &Architecture) -> Result<Self, GenomeError> {
        let n = layout.units;
        if arch.units.len() != n {
            return Err(GenomeError::Config(format!(
                "expected {n} units, got {}",
                arch.units.len()
            )));
        }
        let mut g = Genome::zeros(layout);
        let stride = layout.unit_bits();
        for (u, p) in arch.units.iter().enumerate() {
            let bad = |reason: &str| GenomeError::NotRepresentable {
                unit: u,
                reason: reason.to_string(),
            };
            if p.enc_filter_bits > 7
                || p.enc_chan_bits > 7
                || p.dec_filter_bits > 7
                || p.dec_chan_bits > 7
            {
                return Err(bad("3-bit field out of range"));
            }
            if p.skip_gates.len() != n {
                return Err(bad("skip gate count differs from unit count"));
            }
            let base = u * stride;
            match layout.variant {
                Variant::Symmetric => {
                    if p.enc_skip != p.dec_skip
                        || p.enc_filter_bits != p.dec_filter_bits
                        || p.enc_chan_bits != p.dec_chan_bits
                    {
                        return Err(bad("symmetric units need identical encoder and decoder"));
                    }
                    if p.skip_gates
                        .iter()
                        .enumerate()
                        .any(|(i, &gate)| i != u && gate != 0)
                    {
                        return Err(bad("symmetric units only carry a mirror skip"));
                    }
                    if p.skip_gates[u] > 7 {
                        return Err(bad("mirror gate exceeds 3 bits"));
                    }
                    g.bits.set(base, p.enc_skip);
                    g.set_field(base + 1, 3, p.enc_filter_bits);
                    g.set_field(base + 4, 3, p.enc_chan_bits);
                    g.set_field(base + 7, 3, p.skip_gates[u]);
                }
                _ => {
                    if p.skip_gates.iter().any(|&gate| gate > 15) {
                        return Err(bad("skip gate exceeds 4 bits"));
                    }
                    g.bits.set(base, p.enc_skip);
                    g.set_field(base + 1, 3, p.enc_filter_bits);
                    g.set_field(base + 4, 3, p.enc_chan_bits);
                    g.bits.set(base + 7, p.dec_skip);
                    g.set_field(base + 8, 3, p.dec_filter_bits);
                    g.set_field(base + 11, 3, p.dec_chan_bits);
                    for (i, &gate) in p.skip_gates.iter().enumerate() {
                        g.set_field(base + 14 + 4 * i, 4, gate);
                    }
                }
            }
        }
        match (layout.variant, arch.epoch_code) {
            (Variant::AsymmetricWithEpochs, Some(t)) if t <= 3 => g.set_field(n * stride, 2, t),
            (Variant::AsymmetricWithEpochs, _) => {
                return Err(GenomeError::Config("epoch code must be in [0, 3]".into()))
            }
            (_, Some(_)) => {
                return Err(GenomeError::Config(
                    "epoch code given for a variant without epoch bits".into(),
                ))
            }
            (_, None) => {}
        }
        Ok(g)
    }

    fn set_field(&mut self, start: usize, width: usize, value: u8) {
        self.bits[start..start + width].store_be::<u8>(value);
    }

    /// Splice crossover at unit `splice` in `[1, N]`: units before the
    /// splice (1-based) come from `a`, the rest from `b`.
    pub fn crossover_at(a: &Genome, b: &Genome, splice: usize) -> Result<Genome, GenomeError> {
        if a.layout != b.layout {
            return Err(GenomeError::LayoutMismatch(a.layout, b.layout));
        }
        let n = a.layout.units;
        assert!(
            (1..=n).contains(&splice),
            "splice point {splice} outside [1, {n}]"
        );
        let cut = (splice - 1) * a.layout.unit_bits();
        let body = n * a.layout.unit_bits();
        let mut bits = BitVec::<u8, Msb0>::with_capacity(a.bits.len());
        bits.extend_from_bitslice(&a.bits[..cut]);
        bits.extend_from_bitslice(&b.bits[cut..body]);
        if a.bits.len() > body {
            // Epoch bits come from A when the splice lies past the midpoint.
            let tail = if 2 * splice > n { &a.bits } else { &b.bits };
            bits.extend_from_bitslice(&tail[body..]);
        }
        Ok(Genome {
            bits,
            layout: a.layout,
        })
    }

    /// Splice crossover with a uniformly drawn splice point.
    pub fn crossover<R: Rng + ?Sized>(
        a: &Genome,
        b: &Genome,
        rng: &mut R,
    ) -> Result<(Genome, usize), GenomeError> {
        if a.layout != b.layout {
            return Err(GenomeError::LayoutMismatch(a.layout, b.layout));
        }
        let splice = rng.gen_range(1..=a.layout.units);
        Ok((Self::crossover_at(a, b, splice)?, splice))
    }

    /// Flips every bit independently with probability `rate`.
    pub fn mutate<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Genome {
        let mut out = self.clone();
        for i in 0..out.bits.len() {
            if rng.gen_bool(rate) {
                let v = out.bits[i];
                out.bits.set(i, !v);
            }
        }
        out
    }
}

impl Serialize for Genome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            units: usize,
            variant: Variant,
            hex: &'a str,
        }
        Repr {
            units: self.layout.units,
            variant: self.layout.variant,
            hex: &self.to_hex(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Genome {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            units: usize,
            variant: Variant,
            hex: String,
        }
        let r = Repr::deserialize(d)?;
        Genome::from_hex(Layout::new(r.units, r.variant), &r.hex).map_err(serde::de::Error::custom)
    }
}
