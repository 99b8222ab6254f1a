//! Versioned binary checkpoints with bitwise round trips.
//!
//! Layout (little-endian): magic `QCKP`, format version u16, then
//! length-prefixed sections: module tag, epoch, config text, RNG stream
//! positions, named scalars, named strings, named arrays (f64 or u8 with a
//! shape prefix).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nn::{AdamState, DenseNet};

const MAGIC: &[u8; 4] = b"QCKP";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64 { dims: Vec<u64>, data: Vec<f64> },
    U8 { dims: Vec<u64>, data: Vec<u8> },
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64 { data, .. } => data.len(),
            ArrayData::U8 { data, .. } => data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a training driver needs to continue a run exactly where it
/// stopped: parameters, optimizer state, chain states, metric log, and the
/// positions of every named random stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub module: String,
    pub epoch: u64,
    pub config_text: String,
    /// `(stream name, stream index, word position)` per named RNG stream.
    pub rng_positions: Vec<(String, u64, u128)>,
    pub scalars: Vec<(String, f64)>,
    pub strings: Vec<(String, String)>,
    pub arrays: Vec<(String, ArrayData)>,
}

impl Checkpoint {
    pub fn new(module: &str, epoch: u64, config_text: &str) -> Self {
        Self {
            module: module.to_string(),
            epoch,
            config_text: config_text.to_string(),
            ..Default::default()
        }
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) {
        self.scalars.push((name.to_string(), value));
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Checkpoint(format!("missing scalar `{name}`")))
    }

    pub fn push_string(&mut self, name: &str, value: &str) {
        self.strings.push((name.to_string(), value.to_string()));
    }

    pub fn string(&self, name: &str) -> Result<&str> {
        self.strings
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing string `{name}`")))
    }

    pub fn push_f64s(&mut self, name: &str, dims: Vec<u64>, data: Vec<f64>) {
        self.arrays
            .push((name.to_string(), ArrayData::F64 { dims, data }));
    }

    pub fn push_u8s(&mut self, name: &str, dims: Vec<u64>, data: Vec<u8>) {
        self.arrays
            .push((name.to_string(), ArrayData::U8 { dims, data }));
    }

    pub fn array(&self, name: &str) -> Result<&ArrayData> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[u64], &[f64])> {
        match self.array(name)? {
            ArrayData::F64 { dims, data } => Ok((dims, data)),
            ArrayData::U8 { .. } => Err(Error::Checkpoint(format!("array `{name}` is not f64"))),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<(&[u64], &[u8])> {
        match self.array(name)? {
            ArrayData::U8 { dims, data } => Ok((dims, data)),
            ArrayData::F64 { .. } => Err(Error::Checkpoint(format!("array `{name}` is not u8"))),
        }
    }

    // Typed helpers for the common parameter containers.

    pub fn push_vector(&mut self, name: &str, v: &DVector<f64>) {
        self.push_f64s(name, vec![v.len() as u64], v.as_slice().to_vec());
    }

    pub fn vector(&self, name: &str) -> Result<DVector<f64>> {
        let (dims, data) = self.f64s(name)?;
        if dims.len() != 1 {
            return Err(Error::Checkpoint(format!("array `{name}` is not a vector")));
        }
        Ok(DVector::from_row_slice(data))
    }

    /// Matrices are stored column-major with dims `[rows, cols]`.
    pub fn push_matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        self.push_f64s(
            name,
            vec![m.nrows() as u64, m.ncols() as u64],
            m.as_slice().to_vec(),
        );
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let (dims, data) = self.f64s(name)?;
        if dims.len() != 2 {
            return Err(Error::Checkpoint(format!("array `{name}` is not a matrix")));
        }
        let (rows, cols) = (dims[0] as usize, dims[1] as usize);
        if rows * cols != data.len() {
            return Err(Error::Checkpoint(format!("array `{name}` shape mismatch")));
        }
        Ok(DMatrix::from_column_slice(rows, cols, data))
    }

    pub fn push_adam(&mut self, prefix: &str, adam: &AdamState) {
        self.push_f64s(
            &format!("{prefix}.m"),
            vec![adam.first_moment.len() as u64],
            adam.first_moment.clone(),
        );
        self.push_f64s(
            &format!("{prefix}.v"),
            vec![adam.second_moment.len() as u64],
            adam.second_moment.clone(),
        );
        self.push_scalar(&format!("{prefix}.t"), adam.step as f64);
        self.push_scalar(&format!("{prefix}.lr"), adam.lr);
        self.push_scalar(&format!("{prefix}.beta1"), adam.beta1);
        self.push_scalar(&format!("{prefix}.beta2"), adam.beta2);
    }

    pub fn adam(&self, prefix: &str) -> Result<AdamState> {
        let (_, m) = self.f64s(&format!("{prefix}.m"))?;
        let (_, v) = self.f64s(&format!("{prefix}.v"))?;
        if m.len() != v.len() {
            return Err(Error::Checkpoint(format!("adam `{prefix}` moment shapes differ")));
        }
        let mut adam = AdamState::new(
            m.len(),
            self.scalar(&format!("{prefix}.lr"))?,
            self.scalar(&format!("{prefix}.beta1"))?,
            self.scalar(&format!("{prefix}.beta2"))?,
        );
        adam.first_moment = m.to_vec();
        adam.second_moment = v.to_vec();
        adam.step = self.scalar(&format!("{prefix}.t"))? as u64;
        Ok(adam)
    }

    /// Store a network's parameters; the architecture is rebuilt from the
    /// configuration on load.
    pub fn push_net(&mut self, prefix: &str, net: &DenseNet) {
        self.push_f64s(
            &format!("{prefix}.params"),
            vec![net.param_count() as u64],
            net.flatten_params(),
        );
    }

    pub fn load_net(&self, prefix: &str, net: &mut DenseNet) -> Result<()> {
        let (_, data) = self.f64s(&format!("{prefix}.params"))?;
        net.set_params(data)
            .map_err(|_| Error::Checkpoint(format!("net `{prefix}` shape mismatch")))
    }

    pub fn push_rng(&mut self, name: &str, rng: &rand_chacha::ChaCha12Rng) {
        self.rng_positions
            .push((name.to_string(), rng.get_stream(), rng.get_word_pos()));
    }

    /// Rebuild a named stream at its saved position.
    pub fn restore_rng(&self, seed: u64, name: &str) -> Result<rand_chacha::ChaCha12Rng> {
        let (_, stream, pos) = self
            .rng_positions
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing rng stream `{name}`")))?;
        let mut rng = crate::rng::stream(seed, name);
        rng.set_stream(*stream);
        rng.set_word_pos(*pos);
        Ok(rng)
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, &ckpt.module)?;
    write_u64(&mut w, ckpt.epoch)?;
    write_str(&mut w, &ckpt.config_text)?;

    write_u64(&mut w, ckpt.rng_positions.len() as u64)?;
    for (name, stream, pos) in &ckpt.rng_positions {
        write_str(&mut w, name)?;
        write_u64(&mut w, *stream)?;
        w.write_all(&pos.to_le_bytes())?;
    }

    write_u64(&mut w, ckpt.scalars.len() as u64)?;
    for (name, value) in &ckpt.scalars {
        write_str(&mut w, name)?;
        w.write_all(&value.to_le_bytes())?;
    }

    write_u64(&mut w, ckpt.strings.len() as u64)?;
    for (name, value) in &ckpt.strings {
        write_str(&mut w, name)?;
        write_str(&mut w, value)?;
    }

    write_u64(&mut w, ckpt.arrays.len() as u64)?;
    for (name, array) in &ckpt.arrays {
        write_str(&mut w, name)?;
        match array {
            ArrayData::F64 { dims, data } => {
                w.write_all(&[0u8])?;
                write_u64(&mut w, dims.len() as u64)?;
                for &d in dims {
                    write_u64(&mut w, d)?;
                }
                write_u64(&mut w, data.len() as u64)?;
                for &x in data {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::U8 { dims, data } => {
                w.write_all(&[1u8])?;
                write_u64(&mut w, dims.len() as u64)?;
                for &d in dims {
                    write_u64(&mut w, d)?;
                }
                write_u64(&mut w, data.len() as u64)?;
                w.write_all(data)?;
            }
        }
    }
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated checkpoint while reading {what}")))?;
        Ok(buf)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        if n > (1 << 40) {
            return Err(Error::Checkpoint(format!("implausible {what} length {n}")));
        }
        Ok(n as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        String::from_utf8(self.bytes(n, what)?)
            .map_err(|_| Error::Checkpoint(format!("invalid utf-8 in {what}")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u16::from_le_bytes(r.bytes(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} not supported (expected {VERSION})"
        )));
    }
    let module = r.string("module tag")?;
    let epoch = r.u64("epoch")?;
    let config_text = r.string("config text")?;

    let n = r.len("rng count")?;
    let mut rng_positions = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.string("rng name")?;
        let stream = r.u64("rng stream")?;
        let pos = u128::from_le_bytes(r.bytes(16, "rng position")?.try_into().unwrap());
        rng_positions.push((name, stream, pos));
    }

    let n = r.len("scalar count")?;
    let mut scalars = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.string("scalar name")?;
        scalars.push((name, r.f64("scalar value")?));
    }

    let n = r.len("string count")?;
    let mut strings = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.string("string name")?;
        let value = r.string("string value")?;
        strings.push((name, value));
    }

    let n = r.len("array count")?;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.string("array name")?;
        let kind = r.bytes(1, "array kind")?[0];
        let ndim = r.len("array rank")?;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64("array dim")?);
        }
        let len = r.len("array length")?;
        let array = match kind {
            0 => {
                let mut data = Vec::with_capacity(len);
                for _ in 0..len {
                    data.push(r.f64("array data")?);
                }
                ArrayData::F64 { dims, data }
            }
            1 => ArrayData::U8 {
                dims,
                data: r.bytes(len, "array data")?,
            },
            other => {
                return Err(Error::Checkpoint(format!("unknown array kind {other}")));
            }
        };
        arrays.push((name, array));
    }

    Ok(Checkpoint {
        module,
        epoch,
        config_text,
        rng_positions,
        scalars,
        strings,
        arrays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::qbm::QbmParams;
    use crate::rbm::RbmParams;
    use crate::rng;
    use rand::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("boltzgen_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut r = rng::stream(1, "cli");
        let mut ckpt = Checkpoint::new("synthetic-bm", 7, "experiment = synthetic-bm\n");
        let rbm = RbmParams::xavier(4, 2, &mut r);
        ckpt.push_vector("rbm.vb", &rbm.visible_bias);
        ckpt.push_vector("rbm.hb", &rbm.hidden_bias);
        ckpt.push_matrix("rbm.w", &rbm.weights);
        let qbm = QbmParams::xavier(4, 2, 2.0, &mut r).unwrap();
        ckpt.push_vector("qbm.gamma", &qbm.transverse_field);
        ckpt.push_vector("qbm.bias", &qbm.bias);
        ckpt.push_matrix("qbm.w", &qbm.weights);
        let net = DenseNet::xavier(
            &[3, 5, 2],
            &[Activation::LeakyRelu(0.2), Activation::Sigmoid],
            None,
            &mut r,
        )
        .unwrap();
        ckpt.push_net("gen", &net);
        let mut adam = AdamState::new(6, 1e-3, 0.5, 0.9);
        adam.first_moment[2] = 0.25;
        adam.step = 17;
        ckpt.push_adam("opt", &adam);
        ckpt.push_u8s("chains", vec![2, 3], vec![1, 0, 1, 0, 0, 1]);
        ckpt.push_string("metrics", "1,rbm,kl,0.5,0\n");
        r.random::<u64>();
        ckpt.push_rng("rbm", &r);

        let path = tmp("roundtrip.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);

        // Bitwise: saving the loaded checkpoint reproduces the file exactly.
        let path2 = tmp("roundtrip2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // Typed recovery.
        assert_eq!(loaded.matrix("rbm.w").unwrap(), rbm.weights);
        assert_eq!(loaded.vector("qbm.bias").unwrap(), qbm.bias);
        let adam_back = loaded.adam("opt").unwrap();
        assert_eq!(adam_back.first_moment, adam.first_moment);
        assert_eq!(adam_back.step, 17);
        let mut net_back = net.clone();
        loaded.load_net("gen", &mut net_back).unwrap();
        assert_eq!(net_back.flatten_params(), net.flatten_params());
    }

    #[test]
    fn rng_positions_restore_the_exact_stream_state() {
        let seed = 99;
        let mut rng = rng::stream(seed, "pimc");
        for _ in 0..37 {
            rng.random::<f64>();
        }
        let mut ckpt = Checkpoint::new("test", 0, "");
        ckpt.push_rng("pimc", &rng);
        let path = tmp("rng.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut restored = loaded.restore_rng(seed, "pimc").unwrap();
        for _ in 0..16 {
            assert_eq!(rng.random::<u64>(), restored.random::<u64>());
        }
    }

    #[test]
    fn truncated_file_fails_cleanly() {
        let path = tmp("trunc.ckpt");
        let mut ckpt = Checkpoint::new("test", 3, "x = 1\n");
        ckpt.push_f64s("data", vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = tmp("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_and_magic_mismatches_are_rejected() {
        let path = tmp("magic.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());

        let path = tmp("version.ckpt");
        let mut bytes = Vec::new();
        bytes.extend(MAGIC);
        bytes.extend(9u16.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
