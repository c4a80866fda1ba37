//! Hashed bag-of-n-grams text encoder with a trainable linear projection.
//!
//! `encode(text) = normalize(P · x)` where `x` is the L2-normalized hashed
//! unigram+bigram count vector of `text` and `P` is a `d × F` matrix.
//! `P` is stored column-major (one `d`-vector per hash bucket) so that both
//! the forward pass and its gradient only touch the buckets present in `x`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio;
use crate::error::{Error, Result};

/// Term emitted for text with no alphanumeric tokens.
pub const EMPTY_TERM: &str = "[EMPTY]";

/// Pre-normalization norms below this fall back to the first basis vector.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 4096,
            embed_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("embed_dim must be >= 2, got {}", self.embed_dim)));
        }
        if self.feature_dim < self.embed_dim {
            return Err(Error::Config(format!(
                "feature_dim ({}) must be >= embed_dim ({})",
                self.feature_dim, self.embed_dim
            )));
        }
        if self.feature_dim > u32::MAX as usize || self.embed_dim > u32::MAX as usize {
            return Err(Error::Config("encoder dimensions must fit in u32".into()));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Unigrams followed by space-joined adjacent bigrams.
pub fn terms(text: &str) -> Vec<String> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return vec![EMPTY_TERM.to_string()];
    }
    let bigrams = tokens.windows(2).map(|w| format!("{} {}", w[0], w[1]));
    let mut out = tokens.clone();
    out.extend(bigrams);
    out
}

/// Sparse, L2-normalized hashed term-count vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    /// `(bucket, weight)` pairs in ascending bucket order.
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self, feature_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; feature_dim];
        for &(b, w) in &self.entries {
            out[b as usize] = w;
        }
        out
    }
}

pub fn hash_features(text: &str, feature_dim: usize) -> FeatureVector {
    assert!(feature_dim >= 1, "feature_dim must be positive");
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for term in terms(text) {
        let bucket = (fnv1a64(term.as_bytes()) % feature_dim as u64) as u32;
        *counts.entry(bucket).or_insert(0.0) += 1.0;
    }
    let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
    FeatureVector {
        entries: counts.into_iter().map(|(b, c)| (b, c / norm)).collect(),
    }
}

#[inline]
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(v: &[f64]) -> f64 {
    similarity(v, v).sqrt()
}

/// Anything that maps text to a fixed-width embedding.
pub trait TextEncoder: Sync {
    fn embed_dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Raw hashed features, used as the untrained baseline representation.
#[derive(Debug, Clone, Copy)]
pub struct HashFeatureEncoder {
    pub feature_dim: usize,
}

impl TextEncoder for HashFeatureEncoder {
    fn embed_dim(&self) -> usize {
        self.feature_dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        Ok(hash_features(text, self.feature_dim).to_dense(self.feature_dim))
    }
}

/// Output of a forward pass, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub embedding: Vec<f64>,
    /// Norm of the projection before normalization.
    pub pre_norm: f64,
}

impl Encoded {
    pub fn is_degenerate(&self) -> bool {
        self.pre_norm < DEGENERATE_NORM
    }
}

/// Trainable projection of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    embed_dim: usize,
    feature_dim: usize,
    /// Column-major `d × F`: bucket `b` occupies `columns[b*d..(b+1)*d]`.
    columns: Vec<f64>,
}

impl EncoderParams {
    /// Gaussian init with standard deviation `1/sqrt(d)`, so a unit feature
    /// vector projects to norm about one.
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (config.embed_dim as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let columns = (0..config.embed_dim * config.feature_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Self {
            embed_dim: config.embed_dim,
            feature_dim: config.feature_dim,
            columns,
        })
    }

    /// Builds from a row-major `d × F` matrix.
    pub fn from_row_major(embed_dim: usize, feature_dim: usize, rows: &[f64]) -> Result<Self> {
        EncoderConfig { feature_dim, embed_dim }.validate()?;
        if rows.len() != embed_dim * feature_dim {
            return Err(Error::Validation(format!(
                "projection has {} entries, expected {}",
                rows.len(),
                embed_dim * feature_dim
            )));
        }
        let mut columns = vec![0.0; rows.len()];
        for i in 0..embed_dim {
            for b in 0..feature_dim {
                columns[b * embed_dim + i] = rows[i * feature_dim + b];
            }
        }
        let params = Self {
            embed_dim,
            feature_dim,
            columns,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut rows = vec![0.0; self.columns.len()];
        for b in 0..self.feature_dim {
            for i in 0..self.embed_dim {
                rows[i * self.feature_dim + b] = self.columns[b * self.embed_dim + i];
            }
        }
        rows
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            feature_dim: self.feature_dim,
            embed_dim: self.embed_dim,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn column(&self, bucket: usize) -> &[f64] {
        &self.columns[bucket * self.embed_dim..(bucket + 1) * self.embed_dim]
    }

    pub fn column_mut(&mut self, bucket: usize) -> &mut [f64] {
        &mut self.columns[bucket * self.embed_dim..(bucket + 1) * self.embed_dim]
    }

    /// Row-major entry `(row, bucket)`.
    pub fn get(&self, row: usize, bucket: usize) -> f64 {
        self.columns[bucket * self.embed_dim + row]
    }

    pub fn set(&mut self, row: usize, bucket: usize, value: f64) {
        self.columns[bucket * self.embed_dim + row] = value;
    }

    pub fn validate(&self) -> Result<()> {
        self.config().validate()?;
        if let Some(i) = self.columns.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "projection entry ({}, {})",
                i % self.embed_dim,
                i / self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn features(&self, text: &str) -> FeatureVector {
        hash_features(text, self.feature_dim)
    }

    /// Forward pass over precomputed features.
    pub fn forward(&self, x: &FeatureVector) -> Result<Encoded> {
        let d = self.embed_dim;
        let mut z = vec![0.0; d];
        for &(b, w) in x.entries() {
            let col = self.column(b as usize);
            if col.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("projection column {b}")));
            }
            for (zi, ci) in z.iter_mut().zip(col) {
                *zi += w * ci;
            }
        }
        let norm = l2_norm(&z);
        if norm < DEGENERATE_NORM {
            let mut e = vec![0.0; d];
            e[0] = 1.0;
            return Ok(Encoded {
                embedding: e,
                pre_norm: norm,
            });
        }
        z.iter_mut().for_each(|zi| *zi /= norm);
        Ok(Encoded {
            embedding: z,
            pre_norm: norm,
        })
    }

    pub fn encode_features(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.embedding)
    }

    /// Unit-norm embedding of `text`.
    pub fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.encode_features(&self.features(text))
    }

    /// Adds `∂(upstream · encode(x)) / ∂P` into `grad`.
    ///
    /// With `e = z/‖z‖` the Jacobian is `(I − e eᵀ)/‖z‖`; the degenerate
    /// fallback contributes nothing.
    pub fn accumulate_grad(
        &self,
        x: &FeatureVector,
        forward: &Encoded,
        upstream: &[f64],
        grad: &mut ProjectionGrad,
    ) {
        if forward.is_degenerate() {
            return;
        }
        let e = &forward.embedding;
        let proj = similarity(e, upstream);
        let gz: Vec<f64> = upstream
            .iter()
            .zip(e)
            .map(|(u, ei)| (u - ei * proj) / forward.pre_norm)
            .collect();
        for &(b, w) in x.entries() {
            let col = grad.column_mut(b);
            for (g, gzi) in col.iter_mut().zip(&gz) {
                *g += w * gzi;
            }
        }
    }

    /// Gradient of `upstream · encode(text)` with respect to the projection.
    pub fn encode_grad(&self, text: &str, upstream: &[f64]) -> Result<ProjectionGrad> {
        if upstream.len() != self.embed_dim {
            return Err(Error::Validation(format!(
                "upstream has dimension {}, expected {}",
                upstream.len(),
                self.embed_dim
            )));
        }
        if upstream.iter().any(|u| !u.is_finite()) {
            return Err(Error::NonFinite("upstream gradient".into()));
        }
        let x = self.features(text);
        let fwd = self.forward(&x)?;
        let mut grad = ProjectionGrad::new(self.embed_dim);
        self.accumulate_grad(&x, &fwd, upstream, &mut grad);
        Ok(grad)
    }

    /// `P ← P − lr · grad`.
    pub fn apply_sgd(&mut self, grad: &ProjectionGrad, lr: f64) {
        for (&b, g) in &grad.columns {
            let col = self.column_mut(b as usize);
            for (c, gi) in col.iter_mut().zip(g) {
                *c -= lr * gi;
            }
        }
    }
}

impl TextEncoder for EncoderParams {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        EncoderParams::encode(self, text)
    }
}

/// Sparse gradient over projection columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrad {
    embed_dim: usize,
    columns: BTreeMap<u32, Vec<f64>>,
}

impl ProjectionGrad {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            columns: BTreeMap::new(),
        }
    }

    pub fn column_mut(&mut self, bucket: u32) -> &mut Vec<f64> {
        let d = self.embed_dim;
        self.columns.entry(bucket).or_insert_with(|| vec![0.0; d])
    }

    pub fn columns(&self) -> impl Iterator<Item = (u32, &[f64])> + '_ {
        self.columns.iter().map(|(&b, g)| (b, g.as_slice()))
    }

    /// Entry at `(row, bucket)`, zero when the column was never touched.
    pub fn get(&self, row: usize, bucket: usize) -> f64 {
        self.columns.get(&(bucket as u32)).map_or(0.0, |c| c[row])
    }

    pub fn add_scaled(&mut self, other: &ProjectionGrad, scale: f64) {
        for (&b, g) in &other.columns {
            let col = self.column_mut(b);
            for (c, gi) in col.iter_mut().zip(g) {
                *c += scale * gi;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for col in self.columns.values_mut() {
            col.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.columns.values().flatten().map(|g| g * g).sum()
    }

    pub fn to_row_major(&self, feature_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.embed_dim * feature_dim];
        for (&b, g) in &self.columns {
            for (i, gi) in g.iter().enumerate() {
                out[i * feature_dim + b as usize] = *gi;
            }
        }
        out
    }
}

const ENC_MAGIC: &[u8; 4] = b"UENC";
const ENC_VERSION: u32 = 1;

impl EncoderParams {
    /// Layout: magic `UENC`, u32 version, u32 d, u32 F, row-major f32 projection.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, ENC_MAGIC)?;
        binio::write_u32(w, ENC_VERSION)?;
        binio::write_u32(w, self.embed_dim as u32)?;
        binio::write_u32(w, self.feature_dim as u32)?;
        for x in self.to_row_major() {
            binio::write_f32(w, x as f32)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, ENC_MAGIC)?;
        binio::expect_version(r, ENC_VERSION)?;
        let d = binio::read_u32(r)? as usize;
        let f = binio::read_u32(r)? as usize;
        EncoderConfig { feature_dim: f, embed_dim: d }.validate()?;
        let rows = (0..d * f)
            .map(|_| binio::read_f32(r).map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        binio::expect_eof(r)?;
        Self::from_row_major(d, f, &rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Parameters rounded through the f32 checkpoint representation.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        out.columns.iter_mut().for_each(|x| *x = *x as f32 as f64);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64-bit test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn golden_buckets() {
        // Frozen bucket ids; a change here breaks every saved checkpoint.
        let fv = hash_features("Graph learning", 4096);
        let expected: Vec<u32> = {
            let mut b: Vec<u32> = ["graph", "learning", "graph learning"]
                .iter()
                .map(|t| (fnv1a64(t.as_bytes()) % 4096) as u32)
                .collect();
            b.sort_unstable();
            b
        };
        let got: Vec<u32> = fv.entries().iter().map(|&(b, _)| b).collect();
        assert_eq!(got, expected);
        assert_eq!(got, GOLDEN_GRAPH_LEARNING);
    }

    const GOLDEN_GRAPH_LEARNING: &[u32] = &[647, 1611, 2987];

    #[test]
    fn empty_text_uses_reserved_term() {
        for text in ["", "   ", "!!"] {
            let fv = hash_features(text, 97);
            let bucket = (fnv1a64(EMPTY_TERM.as_bytes()) % 97) as u32;
            assert_eq!(fv.entries(), &[(bucket, 1.0)]);
        }
    }

    #[test]
    fn repeated_token_and_bigram() {
        let fv = hash_features("a a", 1 << 20);
        let a = (fnv1a64(b"a") % (1 << 20)) as u32;
        let aa = (fnv1a64(b"a a") % (1 << 20)) as u32;
        let get = |b: u32| fv.entries().iter().find(|e| e.0 == b).unwrap().1;
        assert!(get(a) > get(aa));
        assert!((get(a) - 2.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!((fv.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Hello, World-42!"), vec!["hello", "world", "42"]);
    }

    fn random_params(d: usize, f: usize, seed: u64) -> EncoderParams {
        EncoderParams::random(EncoderConfig { feature_dim: f, embed_dim: d }, seed).unwrap()
    }

    #[test]
    fn identity_projection_returns_features() {
        let f = 16;
        let mut rows = vec![0.0; f * f];
        for i in 0..f {
            rows[i * f + i] = 1.0;
        }
        let p = EncoderParams::from_row_major(f, f, &rows).unwrap();
        let text = "some words here";
        let e = p.encode(text).unwrap();
        let x = hash_features(text, f).to_dense(f);
        for (a, b) in e.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_projection_falls_back_to_basis() {
        let p = EncoderParams::from_row_major(4, 8, &[0.0; 32]).unwrap();
        let e = p.encode("anything").unwrap();
        assert_eq!(e, vec![1.0, 0.0, 0.0, 0.0]);
        let g = p.encode_grad("anything", &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(g.norm_sq(), 0.0);
    }

    #[test]
    fn non_finite_params_error() {
        let mut p = random_params(4, 8, 1);
        for b in 0..8 {
            p.set(0, b, f64::NAN);
        }
        assert!(matches!(p.encode("x"), Err(Error::NonFinite(_))));
        assert!(p.validate().is_err());
        let rows = vec![f64::INFINITY; 32];
        assert!(EncoderParams::from_row_major(4, 8, &rows).is_err());
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(EncoderParams::random(EncoderConfig { feature_dim: 8, embed_dim: 1 }, 0).is_err());
        assert!(EncoderParams::random(EncoderConfig { feature_dim: 4, embed_dim: 8 }, 0).is_err());
    }

    #[test]
    fn similarity_basics() {
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        assert_eq!(similarity(&e1, &e1), 1.0);
        assert_eq!(similarity(&e1, &e2), 0.0);
        let p = random_params(8, 64, 2);
        let a = p.encode("left words").unwrap();
        let b = p.encode("right terms").unwrap();
        assert_eq!(similarity(&a, &b), similarity(&b, &a));
    }

    #[test]
    fn disjoint_texts_not_parallel() {
        let p = random_params(16, 512, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..100 {
            let a = format!("alpha{} beta{}", rng.random::<u32>(), i);
            let b = format!("gamma{} delta{}", rng.random::<u32>(), i);
            let c = similarity(&p.encode(&a).unwrap(), &p.encode(&b).unwrap());
            assert!(c.abs() < 1.0);
        }
    }

    fn fd_grad_check(p: &EncoderParams, text: &str, upstream: &[f64]) -> f64 {
        let analytic = p.encode_grad(text, upstream).unwrap();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..p.embed_dim() {
            for b in 0..p.feature_dim() {
                let mut plus = p.clone();
                plus.set(i, b, p.get(i, b) + h);
                let mut minus = p.clone();
                minus.set(i, b, p.get(i, b) - h);
                let fp = similarity(&plus.encode(text).unwrap(), upstream);
                let fm = similarity(&minus.encode(text).unwrap(), upstream);
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.get(i, b);
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                if a != 0.0 || numeric != 0.0 {
                    max_rel = max_rel.max((a - numeric).abs() / denom);
                }
            }
        }
        max_rel
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = random_params(8, 32, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let upstream: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = fd_grad_check(&p, "the quick brown fox jumps", &upstream);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradient_is_linear_in_upstream() {
        let p = random_params(8, 32, 7);
        let up = [0.3, -0.1, 0.2, 0.5, -0.7, 0.0, 0.1, 0.9];
        let zero = p.encode_grad("a b c", &[0.0; 8]).unwrap();
        assert_eq!(zero.norm_sq(), 0.0);
        let g1 = p.encode_grad("a b c", &up).unwrap();
        let up3: Vec<f64> = up.iter().map(|u| 3.0 * u).collect();
        let g3 = p.encode_grad("a b c", &up3).unwrap();
        for (b, col) in g1.columns() {
            for (i, &v) in col.iter().enumerate() {
                assert!((g3.get(i, b as usize) - 3.0 * v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = random_params(4, 16, 8);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"UENC");
        assert_eq!(buf.len(), 16 + 4 * 4 * 16);
        // Row-major: second f32 is entry (0, 1).
        let second = f32::from_le_bytes(buf[20..24].try_into().unwrap());
        assert_eq!(second, p.get(0, 1) as f32);
        let back = EncoderParams::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, p.rounded_to_f32());
    }

    proptest! {
        #[test]
        fn encode_is_unit_norm(text in "\\PC{0,60}") {
            let p = random_params(8, 64, 9);
            let e = p.encode(&text).unwrap();
            prop_assert!((l2_norm(&e) - 1.0).abs() <= 1e-6);
            prop_assert_eq!(e, p.encode(&text).unwrap());
        }

        #[test]
        fn features_are_normalized(text in "\\PC{0,80}", f in 1usize..300) {
            let fv = hash_features(&text, f);
            prop_assert!((fv.norm() - 1.0).abs() < 1e-12);
            prop_assert!(fv.entries().iter().all(|&(b, w)| (b as usize) < f && w > 0.0));
        }
    }
}
