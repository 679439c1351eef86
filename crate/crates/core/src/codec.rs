//! Orthogonal spreading codes, equidistant FEC codewords, and the
//! collision-tolerant ID payload built from them.
//!
//! An ID is first mapped to its FEC word. Every FEC bit is then spread with
//! the ID's chip code (bit 1) or the bitwise complement of it (bit 0). The
//! concatenation is zero-padded to a fixed 240-bit payload.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

/// Payload length in bytes.
pub const PAYLOAD_BYTES: usize = 30;
/// Payload length in bits.
pub const PAYLOAD_BITS: usize = PAYLOAD_BYTES * 8;
/// Largest supported Hadamard exponent (order 256).
pub const MAX_HADAMARD_EXPONENT: u32 = 8;
/// Smallest code distance that can correct at least one bit error.
pub const MIN_USABLE_DISTANCE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("hadamard exponent {0} outside 1..=8")]
    Exponent(u32),
    #[error("chip length {0} is not a power of two in 2..=256")]
    ChipLength(usize),
    #[error("requested {requested} codes but only {available} are available")]
    Capacity { requested: usize, available: usize },
    #[error("no equidistant code with {num_ids} words of length {word_length} and distance >= 3")]
    Construction { num_ids: usize, word_length: usize },
    #[error("id {0} is not in the codebook")]
    UnknownId(u16),
    #[error("payload must be {expected} bits, got {got}")]
    PayloadLength { expected: usize, got: usize },
    #[error("encoded length {0} bits exceeds the 240-bit payload")]
    TooLong(usize),
    #[error("codebook text: {0}")]
    Parse(String),
}

/// Sylvester Hadamard matrix with entries in {+1, -1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HadamardMatrix {
    order: usize,
    entries: Vec<i8>,
}

impl HadamardMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.entries[i * self.order..(i + 1) * self.order]
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.order + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[i8]> {
        self.entries.chunks(self.order)
    }
}

/// Builds `H_{2^k}` by repeated Kronecker product with `H_2`.
pub fn build_hadamard(k: u32) -> Result<HadamardMatrix, CodecError> {
    if !(1..=MAX_HADAMARD_EXPONENT).contains(&k) {
        return Err(CodecError::Exponent(k));
    }
    let mut order = 1usize;
    let mut entries = vec![1i8];
    for _ in 0..k {
        let next = order * 2;
        let mut grown = vec![0i8; next * next];
        for (bi, bj, sign) in [(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, -1)] {
            for i in 0..order {
                for j in 0..order {
                    grown[(bi * order + i) * next + bj * order + j] = sign * entries[i * order + j];
                }
            }
        }
        order = next;
        entries = grown;
    }
    Ok(HadamardMatrix { order, entries })
}

fn exponent_of(len: usize) -> Option<u32> {
    if len >= 2 && len.is_power_of_two() && len <= 1 << MAX_HADAMARD_EXPONENT {
        Some(len.trailing_zeros())
    } else {
        None
    }
}

/// Per-ID binary chip sequences taken from Hadamard rows, `-1` mapped to 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpreadingCodebook {
    chip_length: usize,
    codes: Vec<Vec<u8>>,
    rows: Vec<usize>,
}

impl SpreadingCodebook {
    pub fn chip_length(&self) -> usize {
        self.chip_length
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Chip bits (0/1) for `id`.
    pub fn code(&self, id: u16) -> Option<&[u8]> {
        self.codes.get(id as usize).map(Vec::as_slice)
    }

    /// Hadamard row index backing `id`.
    pub fn row_index(&self, id: u16) -> Option<usize> {
        self.rows.get(id as usize).copied()
    }

    pub fn codes(&self) -> &[Vec<u8>] {
        &self.codes
    }
}

/// Spreading codebook that skips the all-ones row.
pub fn build_spreading_codebook(
    num_ids: usize,
    chip_length: usize,
) -> Result<SpreadingCodebook, CodecError> {
    build_spreading_codebook_with(num_ids, chip_length, false)
}

/// Spreading codebook over rows `1..chip_length`. With `allow_all_ones`
/// the all-ones row is appended as the last code, which lifts capacity to
/// `chip_length` while keeping it away from ID 0.
pub fn build_spreading_codebook_with(
    num_ids: usize,
    chip_length: usize,
    allow_all_ones: bool,
) -> Result<SpreadingCodebook, CodecError> {
    let k = exponent_of(chip_length).ok_or(CodecError::ChipLength(chip_length))?;
    let available = if allow_all_ones { chip_length } else { chip_length - 1 };
    if num_ids > available {
        return Err(CodecError::Capacity { requested: num_ids, available });
    }
    let h = build_hadamard(k)?;
    let mut rows: Vec<usize> = (1..chip_length).collect();
    if allow_all_ones {
        rows.push(0);
    }
    rows.truncate(num_ids);
    let codes = rows
        .iter()
        .map(|&r| h.row(r).iter().map(|&e| u8::from(e > 0)).collect())
        .collect();
    Ok(SpreadingCodebook { chip_length, codes, rows })
}

/// Binary codewords with one common pairwise Hamming distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FecCodebook {
    word_length: usize,
    distance: usize,
    words: Vec<Vec<u8>>,
}

impl FecCodebook {
    pub fn word_length(&self) -> usize {
        self.word_length
    }

    pub fn distance(&self) -> usize {
        self.distance
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u16) -> Option<&[u8]> {
        self.words.get(id as usize).map(Vec::as_slice)
    }

    pub fn words(&self) -> &[Vec<u8>] {
        &self.words
    }

    /// Index of the unique word strictly within half the distance of `bits`.
    pub fn nearest(&self, bits: &[u8]) -> Option<u16> {
        self.words
            .iter()
            .position(|w| 2 * hamming(w, bits) < self.distance)
            .map(|i| i as u16)
    }
}

pub fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Equidistant code for `num_ids` words of `word_length` bits.
///
/// * one or two IDs: repetition words (`1^n`, or `{0^n, 1^n}`), distance `n`
/// * `word_length = 2^k`: Hadamard rows (+1 to 0, -1 to 1), distance `2^(k-1)`
/// * `word_length = 2^k - 1`: the same rows with the first column dropped
///
/// Codes with distance below 3 are rejected.
pub fn build_fec_codebook(num_ids: usize, word_length: usize) -> Result<FecCodebook, CodecError> {
    let infeasible = CodecError::Construction { num_ids, word_length };
    if num_ids == 0 || word_length == 0 {
        return Err(infeasible);
    }
    if num_ids <= 2 {
        if word_length < MIN_USABLE_DISTANCE {
            return Err(infeasible);
        }
        let words = if num_ids == 1 {
            vec![vec![1; word_length]]
        } else {
            vec![vec![0; word_length], vec![1; word_length]]
        };
        return Ok(FecCodebook { word_length, distance: word_length, words });
    }
    let (order, punctured) = if let Some(k) = exponent_of(word_length) {
        (1usize << k, false)
    } else if let Some(k) = exponent_of(word_length + 1) {
        (1usize << k, true)
    } else {
        return Err(infeasible);
    };
    let distance = order / 2;
    if distance < MIN_USABLE_DISTANCE || num_ids > order {
        return Err(infeasible);
    }
    let h = build_hadamard(order.trailing_zeros())?;
    let skip = usize::from(punctured);
    let words = (0..num_ids)
        .map(|r| h.row(r)[skip..].iter().map(|&e| u8::from(e < 0)).collect())
        .collect();
    Ok(FecCodebook { word_length, distance, words })
}

/// Fixed 240-bit payload, bit 0 is the MSB of byte 0.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodedPayload([u8; PAYLOAD_BYTES]);

impl EncodedPayload {
    pub const fn zeroed() -> Self {
        Self([0; PAYLOAD_BYTES])
    }

    pub fn from_bytes(bytes: [u8; PAYLOAD_BYTES]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CodecError> {
        let arr: [u8; PAYLOAD_BYTES] = bytes.try_into().map_err(|_| CodecError::PayloadLength {
            expected: PAYLOAD_BITS,
            got: bytes.len() * 8,
        })?;
        Ok(Self(arr))
    }

    /// Packs a 0/1 bit vector; shorter inputs are zero-padded.
    pub fn from_bits(bits: &[u8]) -> Result<Self, CodecError> {
        if bits.len() > PAYLOAD_BITS {
            return Err(CodecError::TooLong(bits.len()));
        }
        let mut p = Self::zeroed();
        for (i, &b) in bits.iter().enumerate() {
            p.set_bit(i, b != 0);
        }
        Ok(p)
    }

    pub fn bytes(&self) -> &[u8; PAYLOAD_BYTES] {
        &self.0
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 8] >> (7 - i % 8) & 1 == 1
    }

    pub fn set_bit(&mut self, i: usize, value: bool) {
        let mask = 1u8 << (7 - i % 8);
        if value {
            self.0[i / 8] |= mask;
        } else {
            self.0[i / 8] &= !mask;
        }
    }

    pub fn flip_bit(&mut self, i: usize) {
        self.0[i / 8] ^= 1 << (7 - i % 8);
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).map(|(a, b)| (a ^ b).count_ones() as usize).sum()
    }

    pub fn to_hex(&self) -> String {
        to_hex(&self.0)
    }
}

impl Default for EncodedPayload {
    fn default() -> Self {
        Self::zeroed()
    }
}

impl fmt::Debug for EncodedPayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncodedPayload({})", self.to_hex())
    }
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Matched pair of codebooks used on both ends of a link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebooks {
    pub fec: FecCodebook,
    pub spread: SpreadingCodebook,
}

impl Codebooks {
    pub fn new(fec: FecCodebook, spread: SpreadingCodebook) -> Result<Self, CodecError> {
        let bits = fec.word_length() * spread.chip_length();
        if bits > PAYLOAD_BITS {
            return Err(CodecError::TooLong(bits));
        }
        Ok(Self { fec, spread })
    }

    /// Default dimensioning for `num_ids` IDs: 8-bit FEC words with 16-chip
    /// codes up to 8 IDs, 15-bit punctured words with the full 16-row
    /// spreading set up to 16 IDs.
    pub fn for_ids(num_ids: usize) -> Result<Self, CodecError> {
        match num_ids {
            0..=8 => Self::new(build_fec_codebook(num_ids, 8)?, build_spreading_codebook(num_ids, 16)?),
            9..=15 => Self::new(build_fec_codebook(num_ids, 15)?, build_spreading_codebook(num_ids, 16)?),
            16 => Self::new(
                build_fec_codebook(num_ids, 15)?,
                build_spreading_codebook_with(num_ids, 16, true)?,
            ),
            n => Err(CodecError::Capacity { requested: n, available: 16 }),
        }
    }

    pub fn num_ids(&self) -> usize {
        self.fec.len().min(self.spread.len())
    }

    pub fn encoded_bits(&self) -> usize {
        self.fec.word_length() * self.spread.chip_length()
    }

    pub fn encode(&self, id: u16) -> Result<EncodedPayload, CodecError> {
        encode_id(id, &self.fec, &self.spread)
    }

    pub fn decode(&self, payload: &EncodedPayload) -> BTreeSet<u16> {
        self.decode_scored(payload).into_iter().map(|c| c.id).collect()
    }

    pub fn decode_scored(&self, payload: &EncodedPayload) -> Vec<DecodedCandidate> {
        decode_candidates(payload, &self.fec, &self.spread)
    }

    /// Structured text form: a header line with the dimensions, then one
    /// `id fec_hex chip_hex` line per ID. Bits are packed MSB first and
    /// padded to whole hex digits.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# fec_length={} distance={} chip_length={}\n",
            self.fec.word_length(),
            self.fec.distance(),
            self.spread.chip_length()
        );
        for id in 0..self.num_ids() as u16 {
            out.push_str(&format!(
                "{} {} {}\n",
                id,
                bits_to_hex(self.fec.word(id).unwrap()),
                bits_to_hex(self.spread.code(id).unwrap())
            ));
        }
        out
    }

    /// Parses [`Codebooks::to_text`] output and checks the result is a
    /// valid pair: equidistant words at the stated distance and mutually
    /// orthogonal codes.
    pub fn from_text(text: &str) -> Result<Self, CodecError> {
        let perr = |m: String| CodecError::Parse(m);
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| perr("empty input".into()))?;
        let header = header.strip_prefix('#').ok_or_else(|| perr("missing header".into()))?;
        let (mut fec_len, mut dist, mut chip_len) = (None, None, None);
        for kv in header.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| perr(format!("bad header field {kv:?}")))?;
            let v: usize = v.parse().map_err(|_| perr(format!("bad number in {kv:?}")))?;
            match k {
                "fec_length" => fec_len = Some(v),
                "distance" => dist = Some(v),
                "chip_length" => chip_len = Some(v),
                _ => return Err(perr(format!("unknown header field {k:?}"))),
            }
        }
        let fec_len = fec_len.ok_or_else(|| perr("header lacks fec_length".into()))?;
        let dist = dist.ok_or_else(|| perr("header lacks distance".into()))?;
        let chip_len = chip_len.ok_or_else(|| perr("header lacks chip_length".into()))?;
        exponent_of(chip_len).ok_or(CodecError::ChipLength(chip_len))?;

        let mut words = Vec::new();
        let mut codes = Vec::new();
        for (expect, line) in lines.enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr(format!("expected 3 fields: {line:?}")));
            }
            let id: usize = f[0].parse().map_err(|_| perr(format!("bad id {:?}", f[0])))?;
            if id != expect {
                return Err(perr(format!("ids must be consecutive from 0, found {id}")));
            }
            words.push(hex_to_bits(f[1], fec_len).ok_or_else(|| perr(format!("bad fec word {:?}", f[1])))?);
            codes.push(hex_to_bits(f[2], chip_len).ok_or_else(|| perr(format!("bad chip code {:?}", f[2])))?);
        }
        for i in 0..words.len() {
            for j in i + 1..words.len() {
                if hamming(&words[i], &words[j]) != dist {
                    return Err(perr(format!("words {i} and {j} are not at distance {dist}")));
                }
                if correlation(&codes[i], &codes[j]) != 0 {
                    return Err(perr(format!("codes {i} and {j} are not orthogonal")));
                }
            }
        }
        let h = build_hadamard(chip_len.trailing_zeros())?;
        let rows = codes
            .iter()
            .map(|c| {
                h.rows()
                    .position(|r| r.iter().zip(c).all(|(&e, &b)| (e > 0) == (b == 1)))
                    .ok_or_else(|| perr("chip code is not a hadamard row".into()))
            })
            .collect::<Result<_, _>>()?;
        Self::new(
            FecCodebook { word_length: fec_len, distance: dist, words },
            SpreadingCodebook { chip_length: chip_len, codes, rows },
        )
    }
}

fn bits_to_hex(bits: &[u8]) -> String {
    let mut s = String::new();
    for nib in bits.chunks(4) {
        let mut v = 0u8;
        for i in 0..4 {
            v = v << 1 | nib.get(i).copied().unwrap_or(0);
        }
        s.push(char::from_digit(v as u32, 16).unwrap());
    }
    s
}

fn hex_to_bits(hex: &str, len: usize) -> Option<Vec<u8>> {
    if hex.len() != len.div_ceil(4) {
        return None;
    }
    let mut bits = Vec::with_capacity(hex.len() * 4);
    for c in hex.chars() {
        let v = c.to_digit(16)?;
        bits.extend((0..4).rev().map(|i| (v >> i & 1) as u8));
    }
    if bits[len..].iter().any(|&b| b != 0) {
        return None;
    }
    bits.truncate(len);
    Some(bits)
}

/// Correlation of two 0/1 sequences over the ±1 alphabet.
pub fn correlation(a: &[u8], b: &[u8]) -> i32 {
    a.iter().zip(b).map(|(x, y)| if x == y { 1 } else { -1 }).sum()
}

pub fn encode_id(
    id: u16,
    fec: &FecCodebook,
    spread: &SpreadingCodebook,
) -> Result<EncodedPayload, CodecError> {
    let word = fec.word(id).ok_or(CodecError::UnknownId(id))?;
    let code = spread.code(id).ok_or(CodecError::UnknownId(id))?;
    let total = word.len() * code.len();
    if total > PAYLOAD_BITS {
        return Err(CodecError::TooLong(total));
    }
    let mut p = EncodedPayload::zeroed();
    for (j, &b) in word.iter().enumerate() {
        for (c, &chip) in code.iter().enumerate() {
            p.set_bit(j * code.len() + c, (chip == 1) == (b == 1));
        }
    }
    Ok(p)
}

/// A candidate ID accepted by the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodedCandidate {
    pub id: u16,
    /// Hamming distance between the despread bits and the ID's FEC word.
    pub errors: usize,
    /// Sum of per-block correlations signed by the expected FEC bit.
    pub score: i32,
}

/// Despreads `payload` against every ID and keeps those whose recovered
/// word lies strictly within half the code distance of their FEC word.
/// A block with zero correlation recovers no bit and counts as an error.
pub fn decode_candidates(
    payload: &EncodedPayload,
    fec: &FecCodebook,
    spread: &SpreadingCodebook,
) -> Vec<DecodedCandidate> {
    let n = fec.len().min(spread.len());
    let chips = spread.chip_length();
    let mut out = Vec::new();
    for id in 0..n as u16 {
        let word = fec.word(id).unwrap();
        let code = spread.code(id).unwrap();
        let mut errors = 0;
        let mut score = 0;
        for (j, &expected) in word.iter().enumerate() {
            let corr: i32 = code
                .iter()
                .enumerate()
                .map(|(c, &chip)| if payload.bit(j * chips + c) == (chip == 1) { 1 } else { -1 })
                .sum();
            let signed = if expected == 1 { corr } else { -corr };
            if signed <= 0 {
                errors += 1;
            }
            score += signed;
        }
        if 2 * errors < fec.distance() {
            out.push(DecodedCandidate { id, errors, score });
        }
    }
    out
}

pub fn decode_payload(
    payload: &[u8],
    fec: &FecCodebook,
    spread: &SpreadingCodebook,
) -> Result<BTreeSet<u16>, CodecError> {
    let p = EncodedPayload::from_slice(payload)?;
    Ok(decode_candidates(&p, fec, spread).into_iter().map(|c| c.id).collect())
}
