//! Synthetic data generation, dataset ingestion, and encodings between bit,
//! spin, and real-valued representations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Binary configuration with entries in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitVector {
    bits: Vec<u8>,
}

impl BitVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::OutOfRange("bit entries must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    /// Unpack a table index into bits, unit `a` at bit `a`.
    pub fn from_index(index: usize, dim: usize) -> Self {
        let bits = (0..dim).map(|a| ((index >> a) & 1) as u8).collect();
        Self { bits }
    }

    /// Pack bits into a table index, unit `a` at bit `a`. Only valid for
    /// vectors short enough to index a table.
    pub fn index(&self) -> usize {
        assert!(
            self.bits.len() < usize::BITS as usize,
            "configuration too wide to pack into an index"
        );
        self.bits
            .iter()
            .enumerate()
            .fold(0usize, |acc, (a, &b)| acc | ((b as usize) << a))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bits
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Spin configuration with entries in {-1, +1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpinVector {
    spins: Vec<i8>,
}

impl SpinVector {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if spins.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::OutOfRange("spin entries must be -1 or +1".into()));
        }
        Ok(Self { spins })
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.spins
    }
}

/// Map bits to spins: 0 -> -1, 1 -> +1.
pub fn bits_to_spins(z: &BitVector) -> SpinVector {
    SpinVector {
        spins: z.as_slice().iter().map(|&b| 2 * (b as i8) - 1).collect(),
    }
}

/// Inverse of [`bits_to_spins`].
pub fn spins_to_bits(s: &SpinVector) -> BitVector {
    BitVector {
        bits: s.as_slice().iter().map(|&v| ((v + 1) / 2) as u8).collect(),
    }
}

/// Mixture of Bernoulli product distributions centered on a set of modes.
///
/// Each mode `s^i` contributes a product distribution in which every bit of
/// `s^i` is flipped independently with probability `1 - q`, so a mode is the
/// most likely outcome of its own component. The mixture weights are uniform
/// and the whole distribution is normalized over the cube.
#[derive(Debug, Clone)]
pub struct BernoulliMixture {
    modes: Vec<BitVector>,
    q: f64,
}

impl BernoulliMixture {
    pub fn new(modes: Vec<BitVector>, q: f64) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = modes[0].len();
        if modes.iter().any(|m| m.len() != dim) {
            return Err(Error::DimMismatch {
                context: "mixture modes",
                expected: dim,
                got: modes.iter().map(|m| m.len()).find(|&l| l != dim).unwrap(),
            });
        }
        if !(q > 0.5 && q <= 1.0) {
            return Err(Error::OutOfRange(format!("q must lie in (0.5, 1], got {q}")));
        }
        Ok(Self { modes, q })
    }

    /// Draw `count` random modes of dimension `dim`.
    pub fn random(count: usize, dim: usize, q: f64, rng: &mut ChaCha12Rng) -> Result<Self> {
        let modes = (0..count)
            .map(|_| BitVector {
                bits: (0..dim).map(|_| rng.random_range(0..2u8)).collect(),
            })
            .collect();
        Self::new(modes, q)
    }

    pub fn dim(&self) -> usize {
        self.modes[0].len()
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[BitVector] {
        &self.modes
    }

    /// Probability of the configuration `z` under the normalized mixture.
    pub fn prob(&self, z: &BitVector) -> Result<f64> {
        let d = self.dim();
        if z.len() != d {
            return Err(Error::DimMismatch {
                context: "mixture_prob",
                expected: d,
                got: z.len(),
            });
        }
        let flip = 1.0 - self.q;
        let mut total = 0.0;
        for mode in &self.modes {
            let h = z.hamming(mode) as i32;
            total += self.q.powi(d as i32 - h) * flip.powi(h);
        }
        Ok(total / self.modes.len() as f64)
    }

    /// Full probability table over `{0,1}^d`, indexed by packed bits.
    pub fn prob_table(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        if d > 20 {
            return Err(Error::EnumerationBound { units: d, bound: 20 });
        }
        (0..1usize << d)
            .map(|idx| self.prob(&BitVector::from_index(idx, d)))
            .collect()
    }

    /// I.i.d. samples: pick a mode uniformly, flip each bit with probability
    /// `1 - q`.
    pub fn sample(&self, count: usize, rng: &mut ChaCha12Rng) -> Vec<BitVector> {
        self.sample_labeled(count, rng).0
    }

    /// Like [`sample`](Self::sample), also returning the index of the mode
    /// each sample was drawn from.
    pub fn sample_labeled(&self, count: usize, rng: &mut ChaCha12Rng) -> (Vec<BitVector>, Vec<u32>) {
        let flip = 1.0 - self.q;
        let mut samples = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let m = rng.random_range(0..self.modes.len());
            let bits = self.modes[m]
                .as_slice()
                .iter()
                .map(|&b| if rng.random::<f64>() < flip { 1 - b } else { b })
                .collect();
            samples.push(BitVector { bits });
            labels.push(m as u32);
        }
        (samples, labels)
    }
}

/// Independent Bernoulli draws with the given means.
pub fn bernoulli_round(p: &[f64], rng: &mut ChaCha12Rng) -> Result<BitVector> {
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::OutOfRange(
            "Bernoulli means must lie in [0, 1]".into(),
        ));
    }
    Ok(BitVector {
        bits: p
            .iter()
            .map(|&x| if rng.random::<f64>() < x { 1 } else { 0 })
            .collect(),
    })
}

/// Empirical probability table of bit samples over `{0,1}^dim`.
pub fn empirical_table(samples: &[BitVector], dim: usize) -> Vec<f64> {
    let mut table = vec![0.0; 1 << dim];
    for s in samples {
        table[s.index()] += 1.0;
    }
    let n = samples.len().max(1) as f64;
    for t in &mut table {
        *t /= n;
    }
    table
}

/// Records of real vectors interpreted as Bernoulli means, with optional
/// per-record class ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Vec<f64>>,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(records: Vec<Vec<f64>>, labels: Option<Vec<u32>>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = records[0].len();
        if records.iter().any(|r| r.len() != dim) {
            return Err(Error::DimMismatch {
                context: "dataset records",
                expected: dim,
                got: records.iter().map(|r| r.len()).find(|&l| l != dim).unwrap(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != records.len() {
                return Err(Error::DimMismatch {
                    context: "dataset labels",
                    expected: records.len(),
                    got: l.len(),
                });
            }
        }
        Ok(Self { records, labels })
    }

    pub fn from_bits(samples: &[BitVector], labels: Option<Vec<u32>>) -> Result<Self> {
        let records = samples
            .iter()
            .map(|s| s.as_slice().iter().map(|&b| b as f64).collect())
            .collect();
        Self::new(records, labels)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.records[0].len()
    }

    /// Affine copy of the records mapped from [0,1] into `[lo, hi]`.
    pub fn rescaled(&self, lo: f64, hi: f64) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .map(|r| r.iter().map(|&x| lo + x * (hi - lo)).collect())
            .collect()
    }

    /// Write the dataset in the self-describing binary format (f64 elements).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&1u16.to_le_bytes())?; // format version
        w.write_all(&[ELEM_F64, self.labels.is_some() as u8])?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for r in &self.records {
            for &x in r {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                w.write_all(&l.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"QBDS";
const ELEM_U8: u8 = 0;
const ELEM_F64: u8 = 1;

/// Write raw byte records (0..=255) in the self-describing binary format.
pub fn write_u8_records(path: &Path, rows: &[Vec<u8>]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = rows[0].len();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&1u16.to_le_bytes())?;
    w.write_all(&[ELEM_U8, 0u8])?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    w.write_all(&(dim as u64).to_le_bytes())?;
    for r in rows {
        if r.len() != dim {
            return Err(Error::DimMismatch {
                context: "u8 records",
                expected: dim,
                got: r.len(),
            });
        }
        w.write_all(r)?;
    }
    Ok(())
}

fn read_exact_or_malformed(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Malformed(format!("truncated {what}")))
}

/// Load a dataset file, rescaling every element into `[lo, hi]`.
///
/// Two on-disk layouts are recognized by magic: the crate's own header format
/// and the IDX image format (unsigned bytes, up to three dimensions). Raw byte
/// elements map 0 -> lo and 255 -> hi; f64 elements are assumed to be in
/// [0, 1] already and map 0 -> lo, 1 -> hi.
pub fn ingest_images(path: &Path, lo: f64, hi: f64) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_malformed(&mut r, &mut magic, "magic")?;
    if &magic == MAGIC {
        ingest_native(&mut r, lo, hi)
    } else if magic[0] == 0 && magic[1] == 0 && magic[2] == 0x08 {
        ingest_idx(&mut r, magic[3], lo, hi)
    } else {
        Err(Error::Malformed(format!("unrecognized magic {magic:?}")))
    }
}

fn ingest_native(r: &mut impl Read, lo: f64, hi: f64) -> Result<Dataset> {
    let mut u16buf = [0u8; 2];
    read_exact_or_malformed(r, &mut u16buf, "version")?;
    let version = u16::from_le_bytes(u16buf);
    if version != 1 {
        return Err(Error::Malformed(format!("unsupported version {version}")));
    }
    let mut head = [0u8; 2];
    read_exact_or_malformed(r, &mut head, "element header")?;
    let (elem, has_labels) = (head[0], head[1]);
    let mut u64buf = [0u8; 8];
    read_exact_or_malformed(r, &mut u64buf, "count")?;
    let count = u64::from_le_bytes(u64buf) as usize;
    read_exact_or_malformed(r, &mut u64buf, "dim")?;
    let dim = u64::from_le_bytes(u64buf) as usize;
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut records = Vec::with_capacity(count);
    match elem {
        ELEM_U8 => {
            let mut row = vec![0u8; dim];
            for _ in 0..count {
                read_exact_or_malformed(r, &mut row, "record")?;
                records.push(row.iter().map(|&b| lo + (b as f64 / 255.0) * (hi - lo)).collect());
            }
        }
        ELEM_F64 => {
            let mut row = vec![0u8; dim * 8];
            for _ in 0..count {
                read_exact_or_malformed(r, &mut row, "record")?;
                records.push(
                    row.chunks_exact(8)
                        .map(|c| {
                            let x = f64::from_le_bytes(c.try_into().unwrap());
                            lo + x * (hi - lo)
                        })
                        .collect(),
                );
            }
        }
        other => return Err(Error::Malformed(format!("unknown element type {other}"))),
    }
    let labels = if has_labels == 1 {
        let mut l = Vec::with_capacity(count);
        let mut u32buf = [0u8; 4];
        for _ in 0..count {
            read_exact_or_malformed(r, &mut u32buf, "label")?;
            l.push(u32::from_le_bytes(u32buf));
        }
        Some(l)
    } else {
        None
    };
    Dataset::new(records, labels)
}

fn ingest_idx(r: &mut impl Read, ndim: u8, lo: f64, hi: f64) -> Result<Dataset> {
    if ndim == 0 || ndim > 3 {
        return Err(Error::Malformed(format!("IDX rank {ndim} unsupported")));
    }
    let mut u32buf = [0u8; 4];
    let mut dims = Vec::new();
    for _ in 0..ndim {
        read_exact_or_malformed(r, &mut u32buf, "IDX dimension")?;
        dims.push(u32::from_be_bytes(u32buf) as usize);
    }
    let count = dims[0];
    let dim: usize = dims[1..].iter().product::<usize>().max(1);
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut records = Vec::with_capacity(count);
    let mut row = vec![0u8; dim];
    for _ in 0..count {
        read_exact_or_malformed(r, &mut row, "IDX record")?;
        records.push(row.iter().map(|&b| lo + (b as f64 / 255.0) * (hi - lo)).collect());
    }
    Dataset::new(records, None)
}
