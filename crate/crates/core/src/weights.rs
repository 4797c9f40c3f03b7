//! Portable weight files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        8 bytes  "CADEQNET"
//! version      u32      1
//! fingerprint  8 bytes  config fingerprint
//! episodes     u64      training episodes completed
//! n_layers     u32
//! shapes       n_layers x (u32 inputs, u32 outputs)
//! values       per layer: weights row-major (inputs x outputs), then bias; f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::error::WeightsError;
use crate::qnet::{Dense, QNetwork, Scalar};

const MAGIC: &[u8; 8] = b"CADEQNET";
pub const FORMAT_VERSION: u32 = 1;

/// Short stable hash of a configuration's canonical text.
pub fn fingerprint(text: &str) -> [u8; 8] {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

pub fn fingerprint_hex(text: &str) -> String {
    hex::encode(fingerprint(text))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightsMeta {
    pub fingerprint: [u8; 8],
    pub episodes_done: u64,
}

pub fn write_params<F: Scalar, W: Write>(
    net: &QNetwork<F>,
    meta: &WeightsMeta,
    mut w: W,
) -> Result<(), WeightsError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&meta.fingerprint)?;
    w.write_all(&meta.episodes_done.to_le_bytes())?;
    w.write_all(&(net.layers().len() as u32).to_le_bytes())?;
    for l in net.layers() {
        let (i, o) = l.shape();
        w.write_all(&(i as u32).to_le_bytes())?;
        w.write_all(&(o as u32).to_le_bytes())?;
    }
    for l in net.layers() {
        for v in l.weights.iter().chain(l.bias.iter()) {
            w.write_all(&v.to_real().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightsError> {
        if self.buf.len() < n {
            return Err(WeightsError::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, WeightsError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WeightsError> {
        Ok(f64::from_le_bytes(self.take(8, "parameter values")?.try_into().unwrap()))
    }
}

/// Parses a weight file. With `expected` set, the layer sizes must match it.
pub fn read_params<R: Read>(
    mut r: R,
    expected: Option<&[usize]>,
) -> Result<(QNetwork<f64>, WeightsMeta), WeightsError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { buf: &bytes };
    if c.take(8, "magic").map_err(|_| WeightsError::BadMagic)? != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(WeightsError::Version(version));
    }
    let mut fp = [0u8; 8];
    fp.copy_from_slice(c.take(8, "fingerprint")?);
    let episodes_done = c.u64("episode counter")?;
    let n_layers = c.u32("layer count")? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(WeightsError::Truncated("implausible layer count"));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        shapes.push((c.u32("shape table")? as usize, c.u32("shape table")? as usize));
    }
    for k in 1..n_layers {
        if shapes[k].0 != shapes[k - 1].1 {
            return Err(WeightsError::ShapeMismatch {
                layer: k,
                found: shapes[k],
                expected: (shapes[k - 1].1, shapes[k].1),
            });
        }
    }
    let arch: Vec<usize> =
        std::iter::once(shapes[0].0).chain(shapes.iter().map(|s| s.1)).collect();
    if let Some(exp) = expected {
        if exp != arch.as_slice() {
            return Err(WeightsError::Architecture { found: arch, expected: exp.to_vec() });
        }
    }
    if shapes.last().unwrap().1 != 1 {
        return Err(WeightsError::ShapeMismatch {
            layer: n_layers - 1,
            found: *shapes.last().unwrap(),
            expected: (shapes.last().unwrap().0, 1),
        });
    }
    let mut layers = Vec::with_capacity(n_layers);
    for &(i, o) in &shapes {
        let w: Vec<f64> = (0..i * o).map(|_| c.f64()).collect::<Result<_, _>>()?;
        let b: Vec<f64> = (0..o).map(|_| c.f64()).collect::<Result<_, _>>()?;
        if w.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(WeightsError::NonFinite);
        }
        layers.push(Dense {
            weights: Array2::from_shape_vec((i, o), w).expect("shape"),
            bias: Array1::from(b),
        });
    }
    if !c.buf.is_empty() {
        return Err(WeightsError::Trailing(c.buf.len()));
    }
    Ok((QNetwork::from_layers(layers), WeightsMeta { fingerprint: fp, episodes_done }))
}

/// Writes atomically: a sibling temp file renamed into place.
pub fn save_params<F: Scalar>(
    net: &QNetwork<F>,
    meta: &WeightsMeta,
    path: &Path,
) -> Result<(), WeightsError> {
    let tmp = path.with_extension("tmp");
    {
        let f = fs::File::create(&tmp)?;
        write_params(net, meta, std::io::BufWriter::new(f))?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_params(
    path: &Path,
    expected: Option<&[usize]>,
) -> Result<(QNetwork<f64>, WeightsMeta), WeightsError> {
    read_params(fs::File::open(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta() -> WeightsMeta {
        WeightsMeta { fingerprint: fingerprint("cfg"), episodes_done: 17 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = QNetwork::<f64>::new(12, &[32, 16, 8], &mut rng);
        let mut buf = Vec::new();
        write_params(&net, &meta(), &mut buf).unwrap();
        let (back, m) = read_params(buf.as_slice(), Some(&[12, 32, 16, 8, 1])).unwrap();
        assert_eq!(m, meta());
        assert_eq!(back, net);
        for _ in 0..100 {
            let f: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = rng.random_range(-100.0..100.0);
            assert_eq!(net.q_value(&f, a, 100.0).to_bits(), back.q_value(&f, a, 100.0).to_bits());
        }
    }

    #[test]
    fn truncated_and_mismatched_files_are_rejected() {
        let net = QNetwork::<f64>::new(12, &[8], &mut ChaCha8Rng::seed_from_u64(9));
        let mut buf = Vec::new();
        write_params(&net, &meta(), &mut buf).unwrap();
        let cut = &buf[..buf.len() - 5];
        assert!(matches!(read_params(cut, None), Err(WeightsError::Truncated(_))));
        let err = read_params(buf.as_slice(), Some(&[12, 256, 128, 64, 1])).unwrap_err();
        assert!(err.to_string().contains("architecture mismatch"), "{err}");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_params(bad.as_slice(), None), Err(WeightsError::BadMagic)));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_params(extra.as_slice(), None), Err(WeightsError::Trailing(1))));
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(fingerprint_hex("abc"), "ba7816bf8f01cfea");
    }
}
