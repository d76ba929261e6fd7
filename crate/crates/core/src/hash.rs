//! Hash head: maps the final class token to a continuous hash feature and
//! quantizes it to a ternary code for retrieval.
//!
//! The head is `h = LN(z) W1 W2` with no nonlinearity between the two
//! projections; the chain is kept literal even though two stacked linear maps
//! collapse mathematically. Training always works on the continuous feature;
//! codes only exist at index/query time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{trunc_normal, Arr, BoundParams, ParamStore, Tx};
use crate::vit::LN_EPS;

/// Hash head dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashHeadConfig {
    /// Input dimension (the encoder's hidden dim D).
    pub input_dim: usize,
    /// Code length b in bits.
    pub code_bits: usize,
}

impl HashHeadConfig {
    pub fn new(input_dim: usize, code_bits: usize) -> Self {
        Self { input_dim, code_bits }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.code_bits == 0 {
            return Err(Error::config("hash head dimensions must be positive"));
        }
        Ok(())
    }
}

/// Ternary retrieval codes, one row per item, entries in {-1, 0, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryCodes {
    pub bits: usize,
    pub values: Array2<i8>,
}

impl TernaryCodes {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn row(&self, i: usize) -> Vec<i8> {
        self.values.row(i).to_vec()
    }
}

/// Hash head bound to a parameter namespace (`<prefix>.hash.*`).
pub struct HashHead {
    pub config: HashHeadConfig,
    prefix: String,
}

impl HashHead {
    pub fn new(config: HashHeadConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, prefix: prefix.into() })
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.hash.{}", self.prefix, suffix)
    }

    /// Projections use fan-in scaled init (std 1/sqrt(D)) so the hash
    /// feature starts at unit scale regardless of width; the row
    /// normalization inside the contrastive/triplet losses is badly
    /// conditioned when `|h|` starts near zero.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.config.input_dim;
        let b = self.config.code_bits;
        let std = 1.0 / (d as f64).sqrt();
        store.insert(self.name("ln.gamma"), crate::tensor::ones(&[d]));
        store.insert(self.name("ln.beta"), crate::tensor::zeros(&[d]));
        store.insert(self.name("w1"), trunc_normal(&[d, d], std, rng));
        store.insert(self.name("w2"), trunc_normal(&[d, b], std, rng));
    }

    /// `h = LN(class_token) W1 W2`, output `[batch, code_bits]`.
    pub fn forward(&self, bound: &BoundParams, class_token: Tx) -> Result<Tx> {
        let g = bound.graph();
        let shape = g.shape(class_token);
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::config(format!(
                "hash head expects [batch, {}], got {shape:?}",
                self.config.input_dim
            )));
        }
        let normed = g.layer_norm(
            class_token,
            bound.get(&self.name("ln.gamma")),
            bound.get(&self.name("ln.beta")),
            LN_EPS,
        );
        let h = g.matmul(normed, bound.get(&self.name("w1")));
        Ok(g.matmul(h, bound.get(&self.name("w2"))))
    }
}

/// Elementwise sign with `sign(0) = 0`.
pub fn sign_quantize(h: &Arr) -> Result<TernaryCodes> {
    if h.ndim() != 2 {
        return Err(Error::shape(format!("expected [batch, bits], got {:?}", h.shape())));
    }
    if let Some(bad) = h.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite hash feature {bad}")));
    }
    let (n, bits) = (h.shape()[0], h.shape()[1]);
    let mut values = Array2::<i8>::zeros((n, bits));
    for i in 0..n {
        for j in 0..bits {
            let x = h[[i, j]];
            values[[i, j]] = if x > 0.0 {
                1
            } else if x < 0.0 {
                -1
            } else {
                0
            };
        }
    }
    Ok(TernaryCodes { bits, values })
}

// Code file format ("TCOD", version 1), all integers little-endian:
//   magic: 4 bytes "TCOD"    version: u32
//   bits: u32                count: u64
//   then per item: id u64, ceil(bits/4) packed bytes.
// Each value takes 2 bits: 00 = 0, 01 = +1, 10 = -1 (11 is invalid).
// Value j of a row lives in byte j/4 at bit offset 2*(j%4), LSB first.

const CODE_MAGIC: &[u8; 4] = b"TCOD";
const CODE_VERSION: u32 = 1;

fn encode_symbol(v: i8) -> Result<u8> {
    match v {
        0 => Ok(0b00),
        1 => Ok(0b01),
        -1 => Ok(0b10),
        other => Err(Error::Numeric(format!("invalid ternary value {other}"))),
    }
}

fn decode_symbol(bits: u8) -> Result<i8> {
    match bits {
        0b00 => Ok(0),
        0b01 => Ok(1),
        0b10 => Ok(-1),
        _ => Err(Error::Checkpoint("invalid ternary symbol 0b11 in code file".into())),
    }
}

/// Pack one code row at 2 bits per value.
pub fn pack_code(row: &[i8]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; row.len().div_ceil(4)];
    for (j, &v) in row.iter().enumerate() {
        out[j / 4] |= encode_symbol(v)? << (2 * (j % 4));
    }
    Ok(out)
}

/// Unpack a row previously written by [`pack_code`].
pub fn unpack_code(bytes: &[u8], bits: usize) -> Result<Vec<i8>> {
    if bytes.len() != bits.div_ceil(4) {
        return Err(Error::Checkpoint(format!(
            "packed code has {} bytes, expected {}",
            bytes.len(),
            bits.div_ceil(4)
        )));
    }
    let mut out = Vec::with_capacity(bits);
    for j in 0..bits {
        out.push(decode_symbol((bytes[j / 4] >> (2 * (j % 4))) & 0b11)?);
    }
    Ok(out)
}

/// Write codes and their item ids to a compact binary file.
pub fn write_codes_file(path: &Path, codes: &TernaryCodes, ids: &[u64]) -> Result<()> {
    if ids.len() != codes.len() {
        return Err(Error::shape(format!(
            "{} ids for {} codes",
            ids.len(),
            codes.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CODE_MAGIC)?;
    w.write_all(&CODE_VERSION.to_le_bytes())?;
    w.write_all(&(codes.bits as u32).to_le_bytes())?;
    w.write_all(&(codes.len() as u64).to_le_bytes())?;
    for (i, &id) in ids.iter().enumerate() {
        w.write_all(&id.to_le_bytes())?;
        w.write_all(&pack_code(&codes.row(i))?)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a file written by [`write_codes_file`]. Returns codes and ids.
pub fn read_codes_file(path: &Path) -> Result<(TernaryCodes, Vec<u64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CODE_MAGIC {
        return Err(Error::Checkpoint(format!("bad code file magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CODE_VERSION {
        return Err(Error::Checkpoint(format!("unsupported code file version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let bits = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;

    let row_bytes = bits.div_ceil(4);
    let mut values = Array2::<i8>::zeros((count, bits));
    let mut ids = Vec::with_capacity(count);
    let mut packed = vec![0u8; row_bytes];
    for i in 0..count {
        r.read_exact(&mut u64buf)?;
        ids.push(u64::from_le_bytes(u64buf));
        r.read_exact(&mut packed)?;
        for (j, v) in unpack_code(&packed, bits)?.into_iter().enumerate() {
            values[[i, j]] = v;
        }
    }
    Ok((TernaryCodes { bits, values }, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use ndarray::{arr2, Array1, IxDyn};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head_with_store(d: usize, b: usize, seed: u64) -> (HashHead, ParamStore) {
        let head = HashHead::new(HashHeadConfig::new(d, b), "m").unwrap();
        let mut store = ParamStore::new();
        head.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (head, store)
    }

    #[test]
    fn identity_projections_pass_through_layer_norm() {
        let d = 6;
        let (head, mut store) = head_with_store(d, d, 0);
        for (name, eye) in [("m.hash.w1", true), ("m.hash.w2", true)] {
            let w = store.get_mut(name).unwrap();
            w.fill(0.0);
            if eye {
                for i in 0..d {
                    w[[i, i]] = 1.0;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let token = Arr::from_shape_fn(IxDyn(&[2, d]), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let g = Graph::new();
        let bound = BoundParams::inference(&g, &store);
        let h = g.value(head.forward(&bound, g.constant(token.clone())).unwrap());

        // expected: plain layer norm of the token
        for bi in 0..2 {
            let row: Array1<f64> =
                token.index_axis(ndarray::Axis(0), bi).to_owned().into_dimensionality().unwrap();
            let mu = row.mean().unwrap();
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                let expected = (row[j] - mu) * inv;
                assert!((h[[bi, j]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shape_is_batch_by_bits() {
        let (head, store) = head_with_store(512, 64, 2);
        let g = Graph::new();
        let bound = BoundParams::inference(&g, &store);
        let token = g.constant(Arr::zeros(IxDyn(&[3, 512])));
        let h = head.forward(&bound, token).unwrap();
        assert_eq!(g.shape(h), vec![3, 64]);
    }

    #[test]
    fn forward_matches_straight_line_recompute() {
        let (d, b) = (10, 4);
        let (head, store) = head_with_store(d, b, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let token = Arr::from_shape_fn(IxDyn(&[3, d]), |_| rand::Rng::gen_range(&mut rng, -2.0..2.0));
        let g = Graph::new();
        let bound = BoundParams::inference(&g, &store);
        let h = g.value(head.forward(&bound, g.constant(token.clone())).unwrap());

        let w1 = store.get("m.hash.w1").unwrap().view().into_shape_with_order((d, d)).unwrap().to_owned();
        let w2 = store.get("m.hash.w2").unwrap().view().into_shape_with_order((d, b)).unwrap().to_owned();
        let mut normed = token.view().into_shape_with_order((3, d)).unwrap().to_owned();
        for mut row in normed.rows_mut() {
            let mu = row.sum() / d as f64;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|x| (x - mu) * inv);
        }
        let expected = normed.dot(&w1).dot(&w2);
        let rel = expected
            .iter()
            .zip(h.iter())
            .map(|(a, x)| (a - x).abs() / a.abs().max(1e-9))
            .fold(0.0, f64::max);
        assert!(rel < 1e-9, "relative error {rel}");
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let (head, store) = head_with_store(8, 4, 5);
        let g = Graph::new();
        let bound = BoundParams::inference(&g, &store);
        let token = g.constant(Arr::zeros(IxDyn(&[2, 9])));
        assert!(matches!(head.forward(&bound, token), Err(Error::Config(_))));
    }

    #[test]
    fn sign_cases_from_definition() {
        let h = arr2(&[[0.3, -0.7, 0.0]]).into_dyn();
        let codes = sign_quantize(&h).unwrap();
        assert_eq!(codes.row(0), vec![1, -1, 0]);

        let zeros = Arr::zeros(IxDyn(&[2, 4]));
        let codes = sign_quantize(&zeros).unwrap();
        assert!(codes.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let h = arr2(&[[f64::NAN, 1.0]]).into_dyn();
        assert!(matches!(sign_quantize(&h), Err(Error::Numeric(_))));
    }

    #[test]
    fn quantization_idempotent_on_codes() {
        let h = arr2(&[[1.0, -1.0, 0.0], [0.0, 1.0, -1.0]]).into_dyn();
        let codes = sign_quantize(&h).unwrap();
        let as_real = codes.values.mapv(|v| v as f64).into_dyn();
        let again = sign_quantize(&as_real).unwrap();
        assert_eq!(codes, again);
    }

    #[test]
    fn hash_map_is_additive_in_w2_columns() {
        // with a fixed input, the full head equals the concatenation of the
        // head evaluated on column slices of W2
        let (d, b) = (8, 6);
        let (head, store) = head_with_store(d, b, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let token = Arr::from_shape_fn(IxDyn(&[2, d]), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let g = Graph::new();
        let bound = BoundParams::inference(&g, &store);
        let full = g.value(head.forward(&bound, g.constant(token.clone())).unwrap());

        let w2 = store.get("m.hash.w2").unwrap().clone();
        for split in [2usize, 4] {
            let mut store_a = store.clone();
            let left = w2.slice_axis(ndarray::Axis(1), ndarray::Slice::from(0..split)).to_owned();
            *store_a.get_mut("m.hash.w2").unwrap() = left;
            let head_a = HashHead::new(HashHeadConfig::new(d, split), "m").unwrap();
            let ga = Graph::new();
            let ba = BoundParams::inference(&ga, &store_a);
            let ha = ga.value(head_a.forward(&ba, ga.constant(token.clone())).unwrap());
            for bi in 0..2 {
                for j in 0..split {
                    assert!((ha[[bi, j]] - full[[bi, j]]).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn positive_scale_invariance(seed in 0u64..500, scale in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = Arr::from_shape_fn(IxDyn(&[3, 8]), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
            let a = sign_quantize(&h).unwrap();
            let b = sign_quantize(&h.mapv(|x| x * scale)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn pack_roundtrip(bits in 1usize..40, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let row: Vec<i8> = (0..bits).map(|_| [(-1i8), 0, 1][rand::Rng::gen_range(&mut rng, 0..3usize)]).collect();
            let packed = pack_code(&row).unwrap();
            prop_assert_eq!(packed.len(), bits.div_ceil(4));
            let unpacked = unpack_code(&packed, bits).unwrap();
            prop_assert_eq!(row, unpacked);
        }
    }

    #[test]
    fn codes_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.tern");
        let codes = TernaryCodes {
            bits: 5,
            values: arr2(&[[1, -1, 0, 0, 1], [0, 0, 0, -1, -1]]).mapv(|v: i32| v as i8),
        };
        write_codes_file(&path, &codes, &[10, 42]).unwrap();
        let (read, ids) = read_codes_file(&path).unwrap();
        assert_eq!(read, codes);
        assert_eq!(ids, vec![10, 42]);
    }
}
