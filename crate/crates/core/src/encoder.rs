//! Hashed bag-of-tokens encoder and triplet-loss training.
//!
//! Tokens are hashed into `H` buckets; the bucket rows of an `H×d` table are
//! mean-pooled, passed through a `d×d` affine layer and optionally
//! ℓ2-normalized. Gradients are derived by hand and optimized with Adam
//! (lazily for table rows, so only rows touched by a batch move).

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dataset, EmbeddingVector, SupervisionTriple};
use crate::prepare::{Preparer, Sentence};
use crate::supervise::rng_for;

/// Anything that maps token lists to fixed-size vectors can back the join.
pub trait Encoder: Sync {
    fn dim(&self) -> usize;
    fn encode_tokens(&self, tokens: &[String]) -> EmbeddingVector;

    fn encode(&self, sentence: &Sentence) -> EmbeddingVector {
        self.encode_tokens(&sentence.tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub hash_dim: usize,
    pub dim: usize,
    pub normalize: bool,
    pub hash_seed: u64,
    /// `hash_dim × dim`, row-major.
    pub table: Vec<f64>,
    /// `dim × dim`, row-major; output `i` is `Σ_j projection[i·d + j]·m_j + bias_i`.
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
struct Forward {
    buckets: Vec<usize>,
    pooled: Vec<f64>,
    /// ‖z‖ before normalization (0 when not normalizing).
    norm: f64,
    out: Vec<f64>,
}

/// Gradient of a loss with respect to every parameter. Table rows are
/// sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub table: BTreeMap<usize, Vec<f64>>,
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros(dim: usize) -> Self {
        Gradients {
            table: BTreeMap::new(),
            projection: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (row, g) in &other.table {
            let acc = self.table.entry(*row).or_insert_with(|| vec![0.0; g.len()]);
            axpy(acc, 1.0, g);
        }
        axpy(&mut self.projection, 1.0, &other.projection);
        axpy(&mut self.bias, 1.0, &other.bias);
    }

    fn scale(&mut self, s: f64) {
        for g in self.table.values_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
        self.projection.iter_mut().for_each(|x| *x *= s);
        self.bias.iter_mut().for_each(|x| *x *= s);
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Seeded 64-bit FNV-1a.
fn hash_token(token: &str, seed: u64) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

impl EncoderModel {
    /// Table entries ~ N(0, 1), projection entries ~ N(0, 1/d), zero bias.
    pub fn new(hash_dim: usize, dim: usize, normalize: bool, seed: u64) -> Result<Self> {
        if hash_dim == 0 || dim == 0 {
            return Err(Error::InvalidArgument("hash_dim and dim must be ≥ 1".into()));
        }
        let mut rng = rng_for(seed, "encoder-init");
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let proj = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid normal");
        let table = (0..hash_dim * dim).map(|_| unit.sample(&mut rng)).collect();
        let projection = (0..dim * dim).map(|_| proj.sample(&mut rng)).collect();
        Ok(EncoderModel {
            hash_dim,
            dim,
            normalize,
            hash_seed: seed,
            table,
            projection,
            bias: vec![0.0; dim],
        })
    }

    pub fn bucket(&self, token: &str) -> usize {
        (hash_token(token, self.hash_seed) % self.hash_dim as u64) as usize
    }

    pub fn buckets(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.bucket(t)).collect()
    }

    pub fn table_row(&self, bucket: usize) -> &[f64] {
        &self.table[bucket * self.dim..(bucket + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.table
            .iter()
            .chain(&self.projection)
            .chain(&self.bias)
            .all(|x| x.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.table.len() + self.projection.len() + self.bias.len()
    }

    fn forward(&self, buckets: &[usize]) -> Forward {
        let d = self.dim;
        if buckets.is_empty() {
            return Forward {
                buckets: Vec::new(),
                pooled: vec![0.0; d],
                norm: 0.0,
                out: vec![0.0; d],
            };
        }
        let mut pooled = vec![0.0; d];
        for &b in buckets {
            axpy(&mut pooled, 1.0, self.table_row(b));
        }
        let n = buckets.len() as f64;
        pooled.iter_mut().for_each(|x| *x /= n);
        let mut z = self.bias.clone();
        for (i, zi) in z.iter_mut().enumerate() {
            let row = &self.projection[i * d..(i + 1) * d];
            *zi += row.iter().zip(&pooled).map(|(p, m)| p * m).sum::<f64>();
        }
        let mut norm = 0.0;
        if self.normalize {
            norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                z.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Forward {
            buckets: buckets.to_vec(),
            pooled,
            norm,
            out: z,
        }
    }

    /// Accumulates into `grads` the gradient reaching the parameters when
    /// `upstream` is the gradient with respect to the output.
    fn backward(&self, fwd: &Forward, upstream: &[f64], grads: &mut Gradients) {
        if fwd.buckets.is_empty() {
            return;
        }
        let d = self.dim;
        let dz: Vec<f64> = if self.normalize && fwd.norm > 0.0 {
            let yg: f64 = fwd.out.iter().zip(upstream).map(|(y, g)| y * g).sum();
            upstream
                .iter()
                .zip(&fwd.out)
                .map(|(g, y)| (g - y * yg) / fwd.norm)
                .collect()
        } else {
            upstream.to_vec()
        };
        let mut dm = vec![0.0; d];
        for (i, &dzi) in dz.iter().enumerate() {
            let row = i * d;
            for (j, (dmj, &pj)) in dm.iter_mut().zip(&fwd.pooled).enumerate() {
                grads.projection[row + j] += dzi * pj;
                *dmj += self.projection[row + j] * dzi;
            }
            grads.bias[i] += dzi;
        }
        let share = 1.0 / fwd.buckets.len() as f64;
        for &b in &fwd.buckets {
            let acc = grads.table.entry(b).or_insert_with(|| vec![0.0; d]);
            axpy(acc, share, &dm);
        }
    }

    pub fn encode_buckets(&self, buckets: &[usize]) -> EmbeddingVector {
        EmbeddingVector(self.forward(buckets).out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }

    /// Magic, version, H, d, hash seed, normalize flag, then table,
    /// projection and bias as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<model>", e);
        w.write_all(MODEL_MAGIC).map_err(io)?;
        w.write_all(&MODEL_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.hash_dim as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dim as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&self.hash_seed.to_le_bytes()).map_err(io)?;
        w.write_all(&[u8::from(self.normalize)]).map_err(io)?;
        let mut buf = Vec::with_capacity(self.parameter_count() * 8);
        for x in self.table.iter().chain(&self.projection).chain(&self.bias) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::io("<model>", e))?;
        let mut cur = ByteCursor::new(&buf);
        if cur.take(8)? != MODEL_MAGIC {
            return Err(Error::ModelFormat("not a model file".into()));
        }
        let version = cur.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!(
                "format version {version}, expected {MODEL_VERSION}"
            )));
        }
        let hash_dim = cur.u64()? as usize;
        let dim = cur.u64()? as usize;
        let hash_seed = cur.u64()?;
        let normalize = match cur.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::ModelFormat(format!("bad normalize flag {other}"))),
        };
        if hash_dim == 0 || dim == 0 {
            return Err(Error::ModelFormat("zero dimension".into()));
        }
        let table_len = hash_dim
            .checked_mul(dim)
            .ok_or_else(|| Error::ModelFormat("dimensions overflow".into()))?;
        let table = cur.f64s(table_len)?;
        let projection = cur.f64s(dim * dim)?;
        let bias = cur.f64s(dim)?;
        cur.finish()?;
        Ok(EncoderModel {
            hash_dim,
            dim,
            normalize,
            hash_seed,
            table,
            projection,
            bias,
        })
    }
}

impl Encoder for EncoderModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_tokens(&self, tokens: &[String]) -> EmbeddingVector {
        self.encode_buckets(&self.buckets(tokens))
    }
}

const MODEL_MAGIC: &[u8; 8] = b"EMBRMODL";
const MODEL_VERSION: u32 = 1;

/// Bounds-checked little-endian reader for the binary artifacts.
pub(crate) struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteCursor { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::ModelFormat(format!("truncated file at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::ModelFormat("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::ModelFormat(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn save_model(model: &EncoderModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<EncoderModel> {
    EncoderModel::load(path)
}

pub fn encode(model: &EncoderModel, sentence: &Sentence) -> EmbeddingVector {
    model.encode(sentence)
}

/// `max(‖xa − xp‖₂ − ‖xa − xn‖₂ + α, 0)`.
pub fn triplet_loss(xa: &EmbeddingVector, xp: &EmbeddingVector, xn: &EmbeddingVector, alpha: f64) -> Result<f64> {
    for v in [xp, xn] {
        if v.dim() != xa.dim() {
            return Err(Error::DimensionMismatch {
                expected: xa.dim(),
                actual: v.dim(),
            });
        }
    }
    Ok((xa.l2_distance(xp) - xa.l2_distance(xn) + alpha).max(0.0))
}

/// Loss of one triple and its gradients: anchor through `anchor_model`,
/// positive and negative through `aux_model`. Pass the same model twice
/// for a shared encoder and add the two gradients.
pub fn triplet_gradients(
    anchor_model: &EncoderModel,
    aux_model: &EncoderModel,
    anchor: &[usize],
    positive: &[usize],
    negative: &[usize],
    alpha: f64,
) -> (f64, Gradients, Gradients) {
    let d = anchor_model.dim;
    let fa = anchor_model.forward(anchor);
    let fp = aux_model.forward(positive);
    let fn_ = aux_model.forward(negative);
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<f64>>();
    let ap = diff(&fa.out, &fp.out);
    let an = diff(&fa.out, &fn_.out);
    let dap = ap.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dan = an.iter().map(|x| x * x).sum::<f64>().sqrt();
    let loss = (dap - dan + alpha).max(0.0);
    let mut ga = Gradients::zeros(d);
    let mut gx = Gradients::zeros(aux_model.dim);
    if loss > 0.0 {
        // ∂‖u‖/∂u = u/‖u‖, taken as 0 at u = 0
        let unit = |u: &[f64], n: f64| -> Vec<f64> {
            if n > 0.0 {
                u.iter().map(|x| x / n).collect()
            } else {
                vec![0.0; u.len()]
            }
        };
        let up = unit(&ap, dap);
        let un = unit(&an, dan);
        let g_anchor: Vec<f64> = up.iter().zip(&un).map(|(p, n)| p - n).collect();
        let g_pos: Vec<f64> = up.iter().map(|p| -p).collect();
        anchor_model.backward(&fa, &g_anchor, &mut ga);
        aux_model.backward(&fp, &g_pos, &mut gx);
        aux_model.backward(&fn_, &un, &mut gx);
    }
    (loss, ga, gx)
}

/// Loss and gradient for a single shared model.
pub fn shared_triplet_gradients(
    model: &EncoderModel,
    anchor: &[usize],
    positive: &[usize],
    negative: &[usize],
    alpha: f64,
) -> (f64, Gradients) {
    let (loss, mut g, gx) = triplet_gradients(model, model, anchor, positive, negative, alpha);
    g.add(&gx);
    (loss, g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-5,
            margin: 1.0,
            seed: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with per-row state for the embedding table. A table row's moments
/// only advance on steps where the row receives a gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: i32,
    table_m: HashMap<usize, Vec<f64>>,
    table_v: HashMap<usize, Vec<f64>>,
    proj_m: Vec<f64>,
    proj_v: Vec<f64>,
    bias_m: Vec<f64>,
    bias_v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Adam {
            lr,
            t: 0,
            table_m: HashMap::new(),
            table_v: HashMap::new(),
            proj_m: vec![0.0; dim * dim],
            proj_v: vec![0.0; dim * dim],
            bias_m: vec![0.0; dim],
            bias_v: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, model: &mut EncoderModel, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let lr = self.lr;
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        };
        let d = model.dim;
        for (&row, g) in &grads.table {
            let m = self.table_m.entry(row).or_insert_with(|| vec![0.0; d]);
            let v = self.table_v.entry(row).or_insert_with(|| vec![0.0; d]);
            update(&mut model.table[row * d..(row + 1) * d], m, v, g);
        }
        update(
            &mut model.projection,
            &mut self.proj_m,
            &mut self.proj_v,
            &grads.projection,
        );
        update(&mut model.bias, &mut self.bias_m, &mut self.bias_v, &grads.bias);
    }
}

/// One encoder for both datasets, or one per side.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoders {
    Shared(EncoderModel),
    Separate { base: EncoderModel, aux: EncoderModel },
}

impl Encoders {
    /// `count` = 1 or 2; separate encoders start from identical weights.
    pub fn init(count: usize, hash_dim: usize, dim: usize, normalize: bool, seed: u64) -> Result<Self> {
        let m = EncoderModel::new(hash_dim, dim, normalize, seed)?;
        match count {
            1 => Ok(Encoders::Shared(m)),
            2 => Ok(Encoders::Separate {
                base: m.clone(),
                aux: m,
            }),
            n => Err(Error::InvalidArgument(format!("num_encoders must be 1 or 2, got {n}"))),
        }
    }

    pub fn base(&self) -> &EncoderModel {
        match self {
            Encoders::Shared(m) => m,
            Encoders::Separate { base, .. } => base,
        }
    }

    pub fn aux(&self) -> &EncoderModel {
        match self {
            Encoders::Shared(m) => m,
            Encoders::Separate { aux, .. } => aux,
        }
    }
}

/// Bucketized sentences of every base and aux record.
struct TokenCache {
    base: HashMap<String, Vec<usize>>,
    aux: HashMap<String, Vec<usize>>,
}

impl TokenCache {
    fn new(encoders: &Encoders, base: &Dataset, aux: &Dataset, preparer: &Preparer) -> Self {
        let build = |model: &EncoderModel, ds: &Dataset| {
            ds.records()
                .par_iter()
                .map(|r| (r.id.clone(), model.buckets(&preparer.prepare(r).tokens)))
                .collect()
        };
        TokenCache {
            base: build(encoders.base(), base),
            aux: build(encoders.aux(), aux),
        }
    }

    fn resolve<'a>(&'a self, t: &SupervisionTriple) -> Result<(&'a [usize], &'a [usize], &'a [usize])> {
        let mut missing = Vec::new();
        let a = self.base.get(&t.anchor_id);
        let p = self.aux.get(&t.positive_id);
        let n = self.aux.get(&t.negative_id);
        if a.is_none() {
            missing.push(format!("anchor_id {}", t.anchor_id));
        }
        if p.is_none() {
            missing.push(format!("positive_id {}", t.positive_id));
        }
        if n.is_none() {
            missing.push(format!("negative_id {}", t.negative_id));
        }
        match (a, p, n) {
            (Some(a), Some(p), Some(n)) => Ok((a, p, n)),
            _ => Err(Error::UnresolvedIds(missing)),
        }
    }
}

/// Mini-batch triplet training. `triples_for_epoch(e)` supplies the
/// triples of epoch `e`; batches are shuffled under `cfg.seed`. Returns the
/// mean loss of every epoch (measured before each batch's update).
pub fn train_with<F>(
    encoders: &mut Encoders,
    mut triples_for_epoch: F,
    base: &Dataset,
    aux: &Dataset,
    cfg: &TrainConfig,
    preparer: &Preparer,
) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Vec<SupervisionTriple>,
{
    if cfg.batch_size == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 || cfg.margin.is_nan() || cfg.margin < 0.0 {
        return Err(Error::InvalidArgument(
            "batch_size ≥ 1, learning_rate > 0 and margin ≥ 0 are required".into(),
        ));
    }
    let cache = TokenCache::new(encoders, base, aux, preparer);
    let d = encoders.base().dim;
    let mut adam_base = Adam::new(cfg.learning_rate, d);
    let mut adam_aux = Adam::new(cfg.learning_rate, d);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut triples = triples_for_epoch(epoch);
        if triples.is_empty() {
            return Err(Error::InvalidArgument("no training triples".into()));
        }
        triples.shuffle(&mut rng_for(cfg.seed, &format!("shuffle/{epoch}")));
        let resolved: Vec<_> = triples.iter().map(|t| cache.resolve(t)).collect::<Result<_>>()?;
        let mut total = 0.0;
        for (b, batch) in resolved.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut g_base = Gradients::zeros(d);
            let mut g_aux = Gradients::zeros(d);
            let mut batch_loss = 0.0;
            for (i, &(a, p, n)) in batch.iter().enumerate() {
                let (loss, ga, gx) = triplet_gradients(encoders.base(), encoders.aux(), a, p, n, cfg.margin);
                if !loss.is_finite() {
                    let t = &triples[b * cfg.batch_size + i];
                    return Err(Error::NonFiniteLoss(format!(
                        "loss {loss} at epoch {epoch}, batch {b}, triple ({}, {}, {})",
                        t.anchor_id, t.positive_id, t.negative_id
                    )));
                }
                batch_loss += loss;
                g_base.add(&ga);
                g_aux.add(&gx);
            }
            total += batch_loss;
            g_base.scale(scale);
            g_aux.scale(scale);
            match encoders {
                Encoders::Shared(m) => {
                    g_base.add(&g_aux);
                    adam_base.step(m, &g_base);
                }
                Encoders::Separate { base, aux } => {
                    adam_base.step(base, &g_base);
                    adam_aux.step(aux, &g_aux);
                }
            }
        }
        trace.push(total / triples.len() as f64);
    }
    Ok(trace)
}

/// Trains on a fixed list of triples.
pub fn train(
    encoders: &mut Encoders,
    triples: &[SupervisionTriple],
    base: &Dataset,
    aux: &Dataset,
    cfg: &TrainConfig,
    preparer: &Preparer,
) -> Result<Vec<f64>> {
    if triples.is_empty() {
        return Err(Error::InvalidArgument("no training triples".into()));
    }
    train_with(encoders, |_| triples.to_vec(), base, aux, cfg, preparer)
}

/// One embedding per record, in dataset order.
pub fn embed_dataset(model: &dyn Encoder, dataset: &Dataset, preparer: &Preparer) -> Vec<(String, EmbeddingVector)> {
    dataset
        .records()
        .par_iter()
        .map(|r| (r.id.clone(), model.encode(&preparer.prepare(r))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Record, Role};
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector(v.to_vec())
    }

    #[test]
    fn loss_examples() {
        let a = ev(&[0.0, 0.0]);
        assert_eq!(triplet_loss(&a, &ev(&[1.0, 0.0]), &ev(&[3.0, 0.0]), 1.0).unwrap(), 0.0);
        assert_eq!(triplet_loss(&a, &ev(&[2.0, 0.0]), &ev(&[0.0, 1.0]), 0.5).unwrap(), 1.5);
        assert_eq!(triplet_loss(&a, &a, &ev(&[0.0, 0.25]), 1.0).unwrap(), 0.75);
        assert!(triplet_loss(&a, &ev(&[1.0]), &a, 1.0).is_err());
    }

    #[test]
    fn one_token_identity_projection_is_table_row() {
        let mut m = EncoderModel::new(16, 3, false, 5).unwrap();
        m.projection = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let row = m.table_row(m.bucket("tok")).to_vec();
        assert_eq!(m.encode_tokens(&toks("tok")).0, row);
    }

    #[test]
    fn empty_input_is_unnormalized_zero() {
        let m = EncoderModel::new(16, 4, true, 1).unwrap();
        assert_eq!(m.encode_tokens(&[]).0, vec![0.0; 4]);
        let n = m.encode_tokens(&toks("a b c")).norm();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn model_round_trip_and_errors() {
        let m = EncoderModel::new(8, 4, true, 3).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = EncoderModel::read_from(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.encode_tokens(&toks("x y")), m.encode_tokens(&toks("x y")));
        assert!(EncoderModel::read_from(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(EncoderModel::read_from(&bad[..])
            .unwrap_err()
            .to_string()
            .contains("version 9"));
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central differences of the shared-model loss over every parameter.
    fn finite_difference_check(m: &EncoderModel, a: &[usize], p: &[usize], n: &[usize], alpha: f64) -> f64 {
        let (_, g) = shared_triplet_gradients(m, a, p, n, alpha);
        let h = 1e-5;
        let loss = |m: &EncoderModel| shared_triplet_gradients(m, a, p, n, alpha).0;
        let mut worst: f64 = 0.0;
        let d = m.dim;
        let mut check = |get: &dyn Fn(&mut EncoderModel) -> &mut f64, analytic: f64| {
            let mut plus = m.clone();
            *get(&mut plus) += h;
            let mut minus = m.clone();
            *get(&mut minus) -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            if numeric.abs() > 1e-7 || analytic.abs() > 1e-7 {
                worst = worst.max(relative_error(numeric, analytic));
            }
        };
        for row in 0..m.hash_dim {
            for j in 0..d {
                let analytic = g.table.get(&row).map_or(0.0, |r| r[j]);
                check(&|m: &mut EncoderModel| &mut m.table[row * d + j], analytic);
            }
        }
        for k in 0..d * d {
            check(&|m: &mut EncoderModel| &mut m.projection[k], g.projection[k]);
        }
        for k in 0..d {
            check(&|m: &mut EncoderModel| &mut m.bias[k], g.bias[k]);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            for normalize in [false, true] {
                let m = EncoderModel::new(8, 4, normalize, seed).unwrap();
                let (a, p, n) = (vec![0, 1, 1], vec![2, 3], vec![4, 5, 6, 7]);
                let alpha = if normalize { 2.0 } else { 10.0 };
                assert!(shared_triplet_gradients(&m, &a, &p, &n, alpha).0 > 0.0);
                let err = finite_difference_check(&m, &a, &p, &n, alpha);
                assert!(err < 1e-4, "seed {seed} normalize {normalize}: {err}");
            }
        }
    }

    #[test]
    fn inactive_hinge_leaves_parameters_unchanged() {
        let base = Dataset::new("b", Role::Base, vec!["t".into()], vec![Record::new("a", [("t", "x")])]).unwrap();
        let aux = Dataset::new(
            "x",
            Role::Auxiliary,
            vec!["t".into()],
            vec![Record::new("p", [("t", "x")]), Record::new("n", [("t", "y")])],
        )
        .unwrap();
        let mut enc = Encoders::init(1, 64, 4, true, 2).unwrap();
        let before = enc.clone();
        let cfg = TrainConfig {
            epochs: 3,
            margin: 0.0,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let trace = train(
            &mut enc,
            &[SupervisionTriple::new("a", "p", "n")],
            &base,
            &aux,
            &cfg,
            &Preparer::default(),
        )
        .unwrap();
        assert_eq!(trace, vec![0.0; 3]);
        assert_eq!(enc, before);
    }

    #[test]
    fn unresolved_triple_ids_error() {
        let ds = Dataset::new("b", Role::Base, vec!["t".into()], vec![Record::new("a", [("t", "x")])]).unwrap();
        let mut enc = Encoders::init(1, 8, 2, true, 0).unwrap();
        let err = train(
            &mut enc,
            &[SupervisionTriple::new("a", "zz", "a")],
            &ds,
            &ds,
            &TrainConfig::default(),
            &Preparer::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("positive_id zz"));
    }

    proptest! {
        #[test]
        fn bag_model_ignores_order(words in prop::collection::vec("[a-z]{1,5}", 1..10), seed in 0u64..50) {
            let m = EncoderModel::new(32, 5, true, seed).unwrap();
            let mut rev = words.clone();
            rev.reverse();
            let (x, y) = (m.encode_tokens(&words), m.encode_tokens(&rev));
            for (a, b) in x.0.iter().zip(&y.0) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(m.encode_tokens(&words), m.encode_tokens(&words));
        }

        #[test]
        fn loss_non_negative_and_zero_iff_margin_met(
            a in prop::collection::vec(-3.0f64..3.0, 3),
            p in prop::collection::vec(-3.0f64..3.0, 3),
            n in prop::collection::vec(-3.0f64..3.0, 3),
            alpha in 0.0f64..2.0,
        ) {
            let (a, p, n) = (EmbeddingVector(a), EmbeddingVector(p), EmbeddingVector(n));
            let l = triplet_loss(&a, &p, &n, alpha).unwrap();
            prop_assert!(l >= 0.0);
            let met = a.l2_distance(&p) + alpha <= a.l2_distance(&n);
            prop_assert_eq!(l == 0.0, met);
        }
    }
}
