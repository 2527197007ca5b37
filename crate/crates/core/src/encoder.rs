//! Linear dual encoder.
//!
//! Each side is a `d x F` projection of the sparse feature counts; the
//! relevance score is the raw inner product of the two embeddings. Weights are
//! kept feature-major in memory (the `d` weights of one feature are
//! contiguous) so that encoding a sparse vector touches `nnz * d` floats.
//! Checkpoints store them row-major `d x F` as described in [`save_checkpoint`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DistillConfig;
use crate::corpus::FeatureVector;
use crate::error::{Error, Result};
use crate::hashing::Fingerprinter;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UMR1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Document,
}

impl Side {
    fn block_name(self) -> &'static str {
        match self {
            Side::Query => "W_q",
            Side::Document => "W_d",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Inner product with f64 accumulation. Every score in the crate goes through
/// this function, so rankings computed in different places agree bit for bit.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dim: usize,
    feature_dim: usize,
    init_seed: u64,
    /// Feature-major: weights of feature `f` live at `f * dim .. (f + 1) * dim`.
    wq: Vec<f32>,
    wd: Vec<f32>,
}

impl EncoderParams {
    /// Entries i.i.d. uniform in `[-a, a]` with `a = sqrt(6 / (d + 1))`.
    pub fn init(dim: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || feature_dim == 0 {
            return Err(Error::Invalid("encoder dimensions must be >= 1".into()));
        }
        let bound = (6.0 / (dim as f64 + 1.0)).sqrt() as f32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dim * feature_dim;
        let wq: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        let wd: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Ok(EncoderParams {
            dim,
            feature_dim,
            init_seed: seed,
            wq,
            wd,
        })
    }

    /// Build from row-major `d x F` matrices.
    pub fn from_row_major(dim: usize, feature_dim: usize, init_seed: u64, wq: &[f32], wd: &[f32]) -> Result<Self> {
        let n = dim * feature_dim;
        if wq.len() != n || wd.len() != n {
            return Err(Error::Shape(format!(
                "expected {dim}x{feature_dim} matrices, got {} and {} entries",
                wq.len(),
                wd.len()
            )));
        }
        if wq.iter().chain(wd).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("encoder weights must be finite".into()));
        }
        Ok(EncoderParams {
            dim,
            feature_dim,
            init_seed,
            wq: transpose(wq, dim, feature_dim),
            wd: transpose(wd, dim, feature_dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    fn block(&self, side: Side) -> &[f32] {
        match side {
            Side::Query => &self.wq,
            Side::Document => &self.wd,
        }
    }

    fn block_mut(&mut self, side: Side) -> &mut [f32] {
        match side {
            Side::Query => &mut self.wq,
            Side::Document => &mut self.wd,
        }
    }

    /// Column `feature` of `W_side` (length `d`).
    pub fn column(&self, side: Side, feature: usize) -> &[f32] {
        &self.block(side)[feature * self.dim..(feature + 1) * self.dim]
    }

    pub fn column_mut(&mut self, side: Side, feature: usize) -> &mut [f32] {
        let d = self.dim;
        &mut self.block_mut(side)[feature * d..(feature + 1) * d]
    }

    /// Entry `(row, col)` of the row-major view of `W_side`.
    pub fn get(&self, side: Side, row: usize, col: usize) -> f32 {
        self.block(side)[col * self.dim + row]
    }

    pub fn set(&mut self, side: Side, row: usize, col: usize, value: f32) {
        let d = self.dim;
        self.block_mut(side)[col * d + row] = value;
    }

    /// Row-major `d x F` copy of `W_side`.
    pub fn to_row_major(&self, side: Side) -> Vec<f32> {
        transpose(self.block(side), self.feature_dim, self.dim)
    }

    fn check_features(&self, fv: &FeatureVector) -> Result<()> {
        if fv.dim != self.feature_dim {
            return Err(Error::Shape(format!(
                "feature vector has dimension {} but the encoder expects {}",
                fv.dim, self.feature_dim
            )));
        }
        if let Some(&(index, _)) = fv.entries.iter().find(|&&(i, _)| i as usize >= self.feature_dim) {
            return Err(Error::FeatureOutOfRange {
                index,
                dim: self.feature_dim,
            });
        }
        Ok(())
    }

    /// `W_side * phi` accumulated in f64.
    pub fn encode_f64(&self, side: Side, fv: &FeatureVector) -> Result<Vec<f64>> {
        self.check_features(fv)?;
        let mut out = vec![0.0f64; self.dim];
        for &(f, c) in &fv.entries {
            let c = c as f64;
            for (o, &w) in out.iter_mut().zip(self.column(side, f as usize)) {
                *o += c * w as f64;
            }
        }
        Ok(out)
    }

    pub fn encode(&self, side: Side, fv: &FeatureVector) -> Result<Embedding> {
        Ok(Embedding(self.encode_f64(side, fv)?.into_iter().map(|v| v as f32).collect()))
    }

    /// Hash of the shape and every weight of both blocks.
    pub fn fingerprint(&self) -> u64 {
        let mut fp = Fingerprinter::default();
        fp.write_u64(self.dim as u64);
        fp.write_u64(self.feature_dim as u64);
        fp.write_f32s(&self.wq);
        fp.write_f32s(&self.wd);
        fp.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.wq.iter().chain(&self.wd).all(|v| v.is_finite())
    }
}

fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `E_q(q)^T E_d(d)`.
pub fn score(params: &EncoderParams, q: &FeatureVector, d: &FeatureVector) -> Result<f64> {
    let qe = params.encode(Side::Query, q)?;
    let de = params.encode(Side::Document, d)?;
    Ok(dot(&qe.0, &de.0))
}

/// Block-sparse gradient with the shape of [`EncoderParams`]: only columns of
/// features that occurred in the batch are stored, absent columns are zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub dim: usize,
    pub query: BTreeMap<u32, Vec<f64>>,
    pub document: BTreeMap<u32, Vec<f64>>,
}

impl Gradients {
    pub fn new(dim: usize) -> Self {
        Gradients {
            dim,
            ..Default::default()
        }
    }

    pub fn block(&self, side: Side) -> &BTreeMap<u32, Vec<f64>> {
        match side {
            Side::Query => &self.query,
            Side::Document => &self.document,
        }
    }

    /// Add `scale * values` to column `feature` of `side`.
    pub fn add_column(&mut self, side: Side, feature: u32, scale: f64, values: &[f64]) {
        let dim = self.dim;
        let block = match side {
            Side::Query => &mut self.query,
            Side::Document => &mut self.document,
        };
        let col = block.entry(feature).or_insert_with(|| vec![0.0; dim]);
        for (c, &v) in col.iter_mut().zip(values) {
            *c += scale * v;
        }
    }

    /// Dense lookup of one entry (row-major coordinates).
    pub fn get(&self, side: Side, row: usize, col: usize) -> f64 {
        self.block(side).get(&(col as u32)).map_or(0.0, |c| c[row])
    }

    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (side, block) in [(Side::Query, &other.query), (Side::Document, &other.document)] {
            for (&f, col) in block {
                self.add_column(side, f, scale, col);
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.query
            .values()
            .chain(self.document.values())
            .flat_map(|c| c.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.query.values().chain(self.document.values()).all(|c| c.iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&DistillConfig> for AdamW {
    fn from(c: &DistillConfig) -> Self {
        AdamW {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// AdamW moments, laid out like the parameters (feature-major).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub hyper: AdamW,
    m_q: Vec<f32>,
    v_q: Vec<f32>,
    m_d: Vec<f32>,
    v_d: Vec<f32>,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams, hyper: AdamW) -> Self {
        let n = params.dim * params.feature_dim;
        OptimizerState {
            step: 0,
            hyper,
            m_q: vec![0.0; n],
            v_q: vec![0.0; n],
            m_d: vec![0.0; n],
            v_d: vec![0.0; n],
        }
    }

}

/// One AdamW step with decoupled weight decay:
///
/// ```text
/// p <- p - lr * wd * p
/// m <- b1 * m + (1 - b1) * g
/// v <- b2 * v + (1 - b2) * g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
///
/// Arithmetic is f64 per element; parameters and moments are stored as f32.
pub fn apply_gradients(params: &mut EncoderParams, state: &mut OptimizerState, grads: &Gradients) -> Result<()> {
    if grads.dim != params.dim {
        return Err(Error::Shape(format!(
            "gradient dimension {} does not match encoder dimension {}",
            grads.dim, params.dim
        )));
    }
    if state.m_q.len() != params.wq.len() {
        return Err(Error::Shape("optimizer state does not match encoder shape".into()));
    }
    for side in [Side::Query, Side::Document] {
        for (&f, col) in grads.block(side) {
            if f as usize >= params.feature_dim {
                return Err(Error::FeatureOutOfRange {
                    index: f,
                    dim: params.feature_dim,
                });
            }
            if col.len() != params.dim || col.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: side.block_name(),
                });
            }
        }
    }

    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let decay = 1.0 - h.lr * h.weight_decay;
    let d = params.dim;

    for side in [Side::Query, Side::Document] {
        let (p, m, v) = match side {
            Side::Query => (&mut params.wq, &mut state.m_q, &mut state.v_q),
            Side::Document => (&mut params.wd, &mut state.m_d, &mut state.v_d),
        };
        let mut sparse = grads.block(side).iter().peekable();
        for f in 0..params.feature_dim {
            let g: Option<&Vec<f64>> = match sparse.peek() {
                Some((&gf, _)) if gf as usize == f => sparse.next().map(|(_, c)| c),
                _ => None,
            };
            let range = f * d..(f + 1) * d;
            let (p, m, v) = (&mut p[range.clone()], &mut m[range.clone()], &mut v[range]);
            for i in 0..d {
                let gi = g.map_or(0.0, |c| c[i]);
                let mi = h.beta1 * m[i] as f64 + (1.0 - h.beta1) * gi;
                let vi = h.beta2 * v[i] as f64 + (1.0 - h.beta2) * gi * gi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
                let pi = p[i] as f64 * decay - h.lr * update;
                m[i] = mi as f32;
                v[i] = vi as f32;
                p[i] = pi as f32;
            }
        }
    }
    Ok(())
}

/// Write a checkpoint:
///
/// ```text
/// "UMR1" | version u32 | d u32 | F u32 | init_seed u64
/// | W_q (d*F f32, row-major) | W_d (d*F f32, row-major)
/// | step u64 | lr f64 | beta1 f64 | beta2 f64 | eps f64 | weight_decay f64
/// | m_q | v_q | m_d | v_d   (each d*F f32, row-major)
/// ```
///
/// All integers and floats little-endian. The file is written to a temporary
/// name and renamed into place.
pub fn save_checkpoint(path: &Path, params: &EncoderParams, state: &OptimizerState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(&tmp, e);
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(params.dim as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(params.feature_dim as u32).map_err(io)?;
        w.write_u64::<LittleEndian>(params.init_seed).map_err(io)?;
        let (d, f) = (params.dim, params.feature_dim);
        write_row_major(&mut w, &params.wq, d, f).map_err(io)?;
        write_row_major(&mut w, &params.wd, d, f).map_err(io)?;
        w.write_u64::<LittleEndian>(state.step).map_err(io)?;
        let h = state.hyper;
        for v in [h.lr, h.beta1, h.beta2, h.eps, h.weight_decay] {
            w.write_f64::<LittleEndian>(v).map_err(io)?;
        }
        for block in [&state.m_q, &state.v_q, &state.m_d, &state.v_d] {
            write_row_major(&mut w, block, d, f).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_row_major(w: &mut impl Write, feature_major: &[f32], d: usize, f: usize) -> std::io::Result<()> {
    let mut row = Vec::with_capacity(f * 4);
    for r in 0..d {
        row.clear();
        for c in 0..f {
            row.extend_from_slice(&feature_major[c * d + r].to_le_bytes());
        }
        w.write_all(&row)?;
    }
    Ok(())
}

fn read_row_major(r: &mut impl Read, d: usize, f: usize) -> std::io::Result<Vec<f32>> {
    let mut out = vec![0.0f32; d * f];
    let mut row = vec![0u8; f * 4];
    for rr in 0..d {
        r.read_exact(&mut row)?;
        for c in 0..f {
            let b = [row[c * 4], row[c * 4 + 1], row[c * 4 + 2], row[c * 4 + 3]];
            out[c * d + rr] = f32::from_le_bytes(b);
        }
    }
    Ok(out)
}

/// Header fields of a checkpoint, readable without loading the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub version: u32,
    pub dim: usize,
    pub feature_dim: usize,
    pub init_seed: u64,
    pub step: u64,
    pub hyper: AdamW,
    pub fingerprint: u64,
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, OptimizerState)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let bad = |reason: String| Error::format("checkpoint", path, reason);
    let io = |e: std::io::Error| bad(e.to_string());

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let d = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let f = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let init_seed = r.read_u64::<LittleEndian>().map_err(io)?;
    if d == 0 || f == 0 {
        return Err(bad(format!("degenerate shape {d}x{f}")));
    }
    let block = (d * f * 4) as u64;
    let expected = 4 + 4 + 4 + 4 + 8 + 2 * block + 8 + 5 * 8 + 4 * block;
    if len != expected {
        return Err(bad(format!("size {len} does not match shape {d}x{f} (expected {expected})")));
    }
    let wq = read_row_major(&mut r, d, f).map_err(io)?;
    let wd = read_row_major(&mut r, d, f).map_err(io)?;
    let step = r.read_u64::<LittleEndian>().map_err(io)?;
    let mut h = [0.0f64; 5];
    for v in h.iter_mut() {
        *v = r.read_f64::<LittleEndian>().map_err(io)?;
    }
    let m_q = read_row_major(&mut r, d, f).map_err(io)?;
    let v_q = read_row_major(&mut r, d, f).map_err(io)?;
    let m_d = read_row_major(&mut r, d, f).map_err(io)?;
    let v_d = read_row_major(&mut r, d, f).map_err(io)?;
    let params = EncoderParams {
        dim: d,
        feature_dim: f,
        init_seed,
        wq,
        wd,
    };
    if !params.is_finite() {
        return Err(bad("non-finite weights".into()));
    }
    let state = OptimizerState {
        step,
        hyper: AdamW {
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
            weight_decay: h[4],
        },
        m_q,
        v_q,
        m_d,
        v_d,
    };
    Ok((params, state))
}

pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointInfo> {
    let (params, state) = load_checkpoint(path)?;
    Ok(CheckpointInfo {
        version: CHECKPOINT_VERSION,
        dim: params.dim,
        feature_dim: params.feature_dim,
        init_seed: params.init_seed,
        step: state.step,
        hyper: state.hyper,
        fingerprint: params.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(lr: f64, wd: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    fn fv(dim: usize, pairs: &[(u32, u32)]) -> FeatureVector {
        FeatureVector::from_pairs(dim, pairs.iter().copied())
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = EncoderParams::init(8, 64, 1).unwrap();
        let b = EncoderParams::init(8, 64, 1).unwrap();
        let c = EncoderParams::init(8, 64, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.wq, c.wq);
        let bound = (6.0f64 / 9.0).sqrt() as f32;
        assert!(a.wq.iter().chain(&a.wd).all(|v| v.abs() <= bound));
        assert!(EncoderParams::init(0, 4, 0).is_err());
    }

    #[test]
    fn init_mean_is_zero_within_three_standard_errors() {
        let (d, f) = (16, 8192);
        let p = EncoderParams::init(d, f, 42).unwrap();
        let n = (d * f) as f64;
        let a = (6.0 / (d as f64 + 1.0)).sqrt();
        let mean = p.wq.iter().map(|&v| v as f64).sum::<f64>() / n;
        // Uniform[-a, a] has variance a^2 / 3.
        let se = (a * a / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn encode_is_linear() {
        let p = EncoderParams::init(4, 32, 3).unwrap();
        let z = p.encode(Side::Query, &FeatureVector::empty(32)).unwrap();
        assert_eq!(z.0, vec![0.0; 4]);
        let e = p.encode(Side::Document, &fv(32, &[(5, 2)])).unwrap();
        let col = p.column(Side::Document, 5);
        for i in 0..4 {
            assert_eq!(e.0[i], (2.0 * col[i] as f64) as f32);
        }
    }

    #[test]
    fn encode_rejects_out_of_range_features() {
        let p = EncoderParams::init(4, 32, 3).unwrap();
        let bad = FeatureVector {
            dim: 32,
            entries: vec![(40, 1)],
        };
        assert!(matches!(p.encode(Side::Query, &bad), Err(Error::FeatureOutOfRange { .. })));
        assert!(matches!(p.encode(Side::Query, &FeatureVector::empty(64)), Err(Error::Shape(_))));
    }

    #[test]
    fn score_is_dot_of_embeddings() {
        let p = EncoderParams::init(8, 64, 9).unwrap();
        let q = fv(64, &[(1, 1), (7, 3)]);
        let d = fv(64, &[(2, 2), (7, 1), (63, 4)]);
        let qe = p.encode(Side::Query, &q).unwrap();
        let de = p.encode(Side::Document, &d).unwrap();
        let expected: f64 = qe.0.iter().zip(&de.0).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert_eq!(score(&p, &q, &d).unwrap(), expected);
        assert_eq!(score(&p, &FeatureVector::empty(64), &d).unwrap(), 0.0);
    }

    #[test]
    fn zero_grad_no_decay_leaves_params() {
        let mut p = EncoderParams::init(4, 16, 0).unwrap();
        let before = p.clone();
        let mut s = OptimizerState::new(&p, hyper(1e-3, 0.0));
        apply_gradients(&mut p, &mut s, &Gradients::new(4)).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn decoupled_decay_shrinks_params() {
        let mut p = EncoderParams::init(4, 16, 0).unwrap();
        let before = p.clone();
        let (lr, wd) = (1e-2, 0.1);
        let mut s = OptimizerState::new(&p, hyper(lr, wd));
        for _ in 0..3 {
            apply_gradients(&mut p, &mut s, &Gradients::new(4)).unwrap();
        }
        for (a, b) in p.wq.iter().zip(&before.wq) {
            let expected = *b as f64 * (1.0 - lr * wd).powi(3);
            assert!((*a as f64 - expected).abs() <= 1e-6 * expected.abs().max(1e-6));
        }
    }

    #[test]
    fn single_scalar_adamw_matches_hand_computation() {
        let mut p = EncoderParams::from_row_major(1, 1, 0, &[0.5], &[0.0]).unwrap();
        let h = AdamW {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut s = OptimizerState::new(&p, h);
        let mut g = Gradients::new(1);
        g.add_column(Side::Query, 0, 1.0, &[0.2]);
        apply_gradients(&mut p, &mut s, &g).unwrap();
        // Step 1 by hand: p = 0.5 * (1 - 0.1 * 0.01) = 0.4995;
        // m = 0.02, v = 4e-5; m_hat = 0.2, v_hat = 0.04; update = 0.2 / (0.2 + 1e-8).
        let step1 = 0.4995 - 0.1 * (0.2 / (0.2 + 1e-8));
        assert!((p.get(Side::Query, 0, 0) as f64 - step1).abs() < 1e-7);
        // Step 2 with g = -0.1.
        let mut g2 = Gradients::new(1);
        g2.add_column(Side::Query, 0, 1.0, &[-0.1]);
        apply_gradients(&mut p, &mut s, &g2).unwrap();
        let p1 = p_f32(step1);
        let m2 = 0.9 * 0.02 + 0.1 * -0.1;
        let v2 = 0.999 * 4e-5 + 0.001 * 0.01;
        let m_hat = m2 / (1.0 - 0.9f64.powi(2));
        let v_hat = v2 / (1.0 - 0.999f64.powi(2));
        let step2 = p1 * (1.0 - 0.001) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.get(Side::Query, 0, 0) as f64 - step2).abs() < 1e-7);
        assert_eq!(s.step, 2);
    }

    fn p_f32(v: f64) -> f64 {
        v as f32 as f64
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = EncoderParams::init(2, 4, 0).unwrap();
        let mut s = OptimizerState::new(&p, hyper(1e-3, 0.0));
        let mut g = Gradients::new(2);
        g.add_column(Side::Document, 1, 1.0, &[f64::NAN, 0.0]);
        let err = apply_gradients(&mut p, &mut s, &g).unwrap_err();
        assert!(err.to_string().contains("W_d"), "{err}");
        assert_eq!(s.step, 0);
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let mut p = EncoderParams::init(3, 8, 11).unwrap();
        let mut s = OptimizerState::new(&p, hyper(1e-3, 0.01));
        let mut g = Gradients::new(3);
        g.add_column(Side::Query, 2, 1.0, &[0.1, -0.2, 0.3]);
        apply_gradients(&mut p, &mut s, &g).unwrap();
        save_checkpoint(&path, &p, &s).unwrap();
        let (p2, s2) = load_checkpoint(&path).unwrap();
        assert_eq!(p, p2);
        assert_eq!(s, s2);

        // Row-major layout on disk: W_q[0][1] sits right after W_q[0][0].
        let bytes = std::fs::read(&path).unwrap();
        let off = 24 + 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        assert_eq!(v, p.get(Side::Query, 0, 1));

        let info = inspect_checkpoint(&path).unwrap();
        assert_eq!((info.dim, info.feature_dim, info.init_seed, info.step), (3, 8, 11, 1));

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        std::fs::write(&path, &corrupt).unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn fingerprint_tracks_every_weight() {
        let mut p = EncoderParams::init(4, 16, 5).unwrap();
        let base = p.fingerprint();
        assert_eq!(base, p.clone().fingerprint());
        let v = p.get(Side::Document, 3, 15);
        p.set(Side::Document, 3, 15, v + 1e-6);
        assert_ne!(base, p.fingerprint());
    }
}
