//! Hashed n-gram linear softmax policy.
//!
//! The logits for the next token are the sum of the weight rows of the active
//! feature buckets. Each suffix of length `1..=c` of the context hashes to one
//! bucket; an empty context activates a single dedicated bucket. Because the
//! model is linear in the weights, `∇ log π(v | ctx)` has the closed form
//! `1{v' = v} - π(v' | ctx)` on every active row.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab_env::TokenId;

/// Anything that yields a next-token log-distribution over the vocabulary.
pub trait TokenPolicy {
    fn vocab_size(&self) -> usize;
    fn logprobs(&self, context: &[TokenId]) -> Vec<f64>;
}

impl<P: TokenPolicy + ?Sized> TokenPolicy for &P {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn logprobs(&self, context: &[TokenId]) -> Vec<f64> {
        (**self).logprobs(context)
    }
}

/// Draws a token by inverse CDF on `exp(logprobs)`.
pub fn sample<P: TokenPolicy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    context: &[TokenId],
    rng: &mut R,
) -> (TokenId, f64) {
    let lp = policy.logprobs(context);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (v, &l) in lp.iter().enumerate() {
        let p = l.exp();
        if p > 0.0 {
            last_nonzero = v;
            acc += p;
            if u < acc {
                return (TokenId(v as u32), l);
            }
        }
    }
    // u landed in the rounding slack above the accumulated mass
    (TokenId(last_nonzero as u32), lp[last_nonzero])
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy<P: TokenPolicy + ?Sized>(policy: &P, context: &[TokenId]) -> (TokenId, f64) {
    let lp = policy.logprobs(context);
    let mut best = 0;
    for v in 1..lp.len() {
        if lp[v] > lp[best] {
            best = v;
        }
    }
    (TokenId(best as u32), lp[best])
}

const EMPTY_SUFFIX_TAG: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    feature_buckets: usize,
    vocab_size: usize,
    context_window: usize,
    hash_seed: u64,
    /// Row-major `feature_buckets x vocab_size`.
    weights: Vec<f64>,
}

impl PolicyParams {
    /// Zero-initialised (uniform) policy.
    pub fn new(
        feature_buckets: usize,
        vocab_size: usize,
        context_window: usize,
        hash_seed: u64,
    ) -> Result<Self> {
        if feature_buckets == 0 || vocab_size == 0 || context_window == 0 {
            return Err(Error::Config(
                "feature_buckets, vocab_size and context_window must be positive".into(),
            ));
        }
        Ok(Self {
            feature_buckets,
            vocab_size,
            context_window,
            hash_seed,
            weights: vec![0.0; feature_buckets * vocab_size],
        })
    }

    pub fn feature_buckets(&self) -> usize {
        self.feature_buckets
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn weight(&self, bucket: usize, token: usize) -> f64 {
        self.weights[bucket * self.vocab_size + token]
    }

    pub fn weight_mut(&mut self, bucket: usize, token: usize) -> &mut f64 {
        &mut self.weights[bucket * self.vocab_size + token]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Sorted, deduplicated bucket indices active for `context`.
    pub fn features(&self, context: &[TokenId]) -> Vec<usize> {
        let f = self.feature_buckets as u64;
        if context.is_empty() {
            return vec![(mix64(self.hash_seed ^ EMPTY_SUFFIX_TAG) % f) as usize];
        }
        let n_max = self.context_window.min(context.len());
        let mut buckets = Vec::with_capacity(n_max);
        let mut h = mix64(self.hash_seed);
        // extend the suffix one token at a time, newest first
        for (n, t) in context.iter().rev().take(n_max).enumerate() {
            h = mix64(h ^ (t.0 as u64 + 1).wrapping_mul(0x2545_f491_4f6c_dd1d) ^ ((n as u64) << 56));
            buckets.push((h % f) as usize);
        }
        buckets.sort_unstable();
        buckets.dedup();
        buckets
    }

    /// Summed logits of the active rows.
    pub fn logits_for(&self, buckets: &[usize]) -> Vec<f64> {
        let v = self.vocab_size;
        let mut logits = vec![0.0; v];
        for &b in buckets {
            let row = &self.weights[b * v..(b + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += w;
            }
        }
        logits
    }

    pub fn logprobs_for(&self, buckets: &[usize]) -> Vec<f64> {
        log_softmax(self.logits_for(buckets))
    }

    /// `∇_θ log π(token | context)`: the same row on every active bucket.
    pub fn grad_logprob(&self, context: &[TokenId], token: TokenId) -> SparseGrad {
        let buckets = self.features(context);
        let lp = self.logprobs_for(&buckets);
        SparseGrad::from_logprobs(buckets, &lp, token)
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(Arc::new(self.clone()))
    }

    /// θ ← θ + step · g
    pub fn apply_gradient(&mut self, grad: &Gradient, step: f64) {
        assert_eq!(grad.data.len(), self.weights.len(), "gradient shape mismatch");
        for (w, g) in self.weights.iter_mut().zip(&grad.data) {
            *w += step * g;
        }
    }

    pub fn zero_gradient(&self) -> Gradient {
        Gradient {
            feature_buckets: self.feature_buckets,
            vocab_size: self.vocab_size,
            data: vec![0.0; self.weights.len()],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.feature_buckets == 0 || self.vocab_size == 0 || self.context_window == 0 {
            return Err(Error::Checkpoint("zero dimension in header".into()));
        }
        if self.weights.len() != self.feature_buckets * self.vocab_size {
            return Err(Error::Checkpoint(format!(
                "expected {} weights, found {}",
                self.feature_buckets * self.vocab_size,
                self.weights.len()
            )));
        }
        if !self.is_finite() {
            return Err(Error::Checkpoint("non-finite weight".into()));
        }
        Ok(())
    }

    /// Binary checkpoint: magic, four little-endian u64 header fields
    /// (F, V, c, hash_seed), then row-major f64 weights.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for x in [
            self.feature_buckets as u64,
            self.vocab_size as u64,
            self.context_window as u64,
            self.hash_seed,
        ] {
            w.write_all(&x.to_le_bytes())?;
        }
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut header = [0u64; 4];
        let mut buf = [0u8; 8];
        for h in header.iter_mut() {
            r.read_exact(&mut buf)?;
            *h = u64::from_le_bytes(buf);
        }
        let [f, v, c, hash_seed] = header;
        let n = (f as usize)
            .checked_mul(v as usize)
            .ok_or_else(|| Error::Checkpoint("header overflow".into()))?;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            weights.push(f64::from_le_bytes(buf));
        }
        let p = Self {
            feature_buckets: f as usize,
            vocab_size: v as usize,
            context_window: c as usize,
            hash_seed,
            weights,
        };
        p.validate()?;
        Ok(p)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TTPOLv1\0";

impl TokenPolicy for PolicyParams {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logprobs(&self, context: &[TokenId]) -> Vec<f64> {
        self.logprobs_for(&self.features(context))
    }
}

/// Frozen copy of the parameters, playing the sampling / ratio-denominator policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot(Arc<PolicyParams>);

impl PolicySnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.0
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        self.clone()
    }
}

impl TokenPolicy for PolicySnapshot {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size
    }

    fn logprobs(&self, context: &[TokenId]) -> Vec<f64> {
        self.0.logprobs(context)
    }
}

pub fn log_softmax(mut logits: Vec<f64>) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    for l in logits.iter_mut() {
        *l -= lse;
    }
    logits
}

/// Gradient of one log-probability: `row` is added to every bucket in `buckets`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    pub buckets: Vec<usize>,
    pub row: Vec<f64>,
}

impl SparseGrad {
    pub fn from_logprobs(buckets: Vec<usize>, logprobs: &[f64], token: TokenId) -> Self {
        let mut row: Vec<f64> = logprobs.iter().map(|l| -l.exp()).collect();
        row[token.index()] += 1.0;
        Self { buckets, row }
    }

    pub fn add_scaled_to(&self, grad: &mut Gradient, scale: f64) {
        let v = grad.vocab_size;
        for &b in &self.buckets {
            for (g, r) in grad.data[b * v..(b + 1) * v].iter_mut().zip(&self.row) {
                *g += scale * r;
            }
        }
    }
}

/// Dense gradient with the same layout as [`PolicyParams`] weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub feature_buckets: usize,
    pub vocab_size: usize,
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn get(&self, bucket: usize, token: usize) -> f64 {
        self.data[bucket * self.vocab_size + token]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.data.iter_mut() {
            *g *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(xs: &[u32]) -> Vec<TokenId> {
        xs.iter().map(|&x| TokenId(x)).collect()
    }

    fn random_params(f: usize, v: usize, seed: u64, scale: f64) -> PolicyParams {
        let mut p = PolicyParams::new(f, v, 4, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in p.weights_mut() {
            *w = rng.gen_range(-scale..scale);
        }
        p
    }

    #[test]
    fn feature_counts() {
        let p = PolicyParams::new(1 << 20, 8, 4, 1).unwrap();
        assert_eq!(p.features(&[]).len(), 1);
        assert_eq!(p.features(&ids(&[3, 4])).len(), 2);
        assert_eq!(p.features(&ids(&[1, 2, 3, 4, 5, 6])).len(), 4);
        assert_eq!(p.features(&ids(&[1, 2, 3])), p.features(&ids(&[1, 2, 3])));
        // only the last c tokens matter
        assert_eq!(p.features(&ids(&[9, 1, 2, 3, 4])), p.features(&ids(&[7, 1, 2, 3, 4])));
        assert_ne!(p.features(&ids(&[1])), p.features(&ids(&[2])));
    }

    #[test]
    fn zero_weights_are_uniform() {
        let p = PolicyParams::new(16, 8, 4, 0).unwrap();
        for lp in p.logprobs(&ids(&[1, 2])) {
            assert!((lp + (8f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn normalization_by_direct_summation() {
        let p = random_params(32, 8, 5, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for len in 0..10 {
            let ctx: Vec<TokenId> = (0..len).map(|_| TokenId(rng.gen_range(0..8))).collect();
            let total: f64 = p.logprobs(&ctx).iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "sum {total}");
        }
    }

    #[test]
    fn raising_a_column_raises_its_probability() {
        let mut p = random_params(32, 8, 2, 1.0);
        let ctx = ids(&[1, 2, 3]);
        let before = p.logprobs(&ctx)[5];
        for b in p.features(&ctx) {
            *p.weight_mut(b, 5) += 0.5;
        }
        assert!(p.logprobs(&ctx)[5] > before);
    }

    #[test]
    fn dominant_column_is_sampled() {
        let mut p = PolicyParams::new(16, 8, 4, 0).unwrap();
        let ctx = ids(&[2, 3]);
        for b in p.features(&ctx) {
            *p.weight_mut(b, 6) = 50.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..10_000)
            .filter(|_| sample(&p, &ctx, &mut rng).0 == TokenId(6))
            .count();
        assert!(hits as f64 / 1e4 > 0.999);
    }

    #[test]
    fn uniform_sampling_passes_chi_square() {
        let p = PolicyParams::new(16, 8, 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            let (t, lp) = sample(&p, &[], &mut rng);
            assert!((lp + (8f64).ln()).abs() < 1e-15);
            counts[t.index()] += 1;
        }
        let expected = n as f64 / 8.0;
        let sd = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sd, "count {c}");
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 7 dof, 0.999 quantile
        assert!(chi2 < 24.32, "chi2 {chi2}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = random_params(32, 8, 3, 1.0);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = Vec::new();
            for _ in 0..20 {
                let (t, lp) = sample(&p, &ctx, &mut rng);
                assert_eq!(lp, p.logprobs(&ctx)[t.index()]);
                ctx.push(t);
            }
            ctx
        };
        assert_eq!(draw(4), draw(4));
    }

    #[test]
    fn gradient_rows_sum_to_zero_and_saturate() {
        let p = random_params(32, 8, 7, 2.0);
        let g = p.grad_logprob(&ids(&[1, 5]), TokenId(3));
        assert!(g.row.iter().sum::<f64>().abs() < 1e-12);

        let mut det = PolicyParams::new(16, 8, 4, 0).unwrap();
        let ctx = ids(&[4]);
        for b in det.features(&ctx) {
            *det.weight_mut(b, 2) = 60.0;
        }
        let g = det.grad_logprob(&ctx, TokenId(2));
        assert!(g.row[2].abs() < 1e-20);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..20 {
            let mut p = random_params(16, 8, seed, 1.5);
            let ctx = ids(&[(seed % 8) as u32, 3, 1]);
            let tok = TokenId(((seed * 3) % 8) as u32);
            let mut dense = p.zero_gradient();
            p.grad_logprob(&ctx, tok).add_scaled_to(&mut dense, 1.0);
            for b in 0..16 {
                for v in 0..8 {
                    let w0 = p.weight(b, v);
                    *p.weight_mut(b, v) = w0 + h;
                    let up = p.logprobs(&ctx)[tok.index()];
                    *p.weight_mut(b, v) = w0 - h;
                    let down = p.logprobs(&ctx)[tok.index()];
                    *p.weight_mut(b, v) = w0;
                    let fd = (up - down) / (2.0 * h);
                    let a = dense.get(b, v);
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "bucket {b} token {v}: {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn snapshot_is_frozen() {
        let mut p = random_params(16, 8, 1, 1.0);
        let snap = p.snapshot();
        let ctx = ids(&[1, 2]);
        let before = snap.logprobs(&ctx);
        assert_eq!(before, p.logprobs(&ctx));
        let mut g = p.zero_gradient();
        g.data.iter_mut().for_each(|x| *x = 1.0);
        p.apply_gradient(&g, 0.3);
        assert_eq!(snap.logprobs(&ctx), before);
        assert_eq!(snap.snapshot(), snap);
    }

    #[test]
    fn checkpoints_round_trip() {
        let p = random_params(8, 5, 11, 4.0);
        let back = PolicyParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 32 + 8 * 40);
        assert_eq!(PolicyParams::read_binary(&buf[..]).unwrap(), p);
        assert!(PolicyParams::read_binary(&buf[..20]).is_err());
        assert!(PolicyParams::from_json(r#"{"feature_buckets":2,"vocab_size":2,"context_window":1,"hash_seed":0,"weights":[0.0]}"#).is_err());
    }
}
