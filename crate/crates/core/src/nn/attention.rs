use super::layers::{GroupNorm, Linear, PRelu, Visitor};
use super::math::gemm;
use super::{NnError, Tensor};
use serde::{Deserialize, Serialize};

/// Sinusoidal position code: `sin` on even indices, `cos` on odd ones.
pub fn sinusoidal_encoding(pos: usize, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|i| {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 / rate;
            (if i % 2 == 0 { a.sin() } else { a.cos() }) as f32
        })
        .collect()
}

/// Softmax of scaled dot products between `query` and each row of `keys`.
pub fn attention_weights(query: &[f32], keys: &[f32], scale: f32) -> Vec<f32> {
    let d = query.len();
    let mut w: Vec<f32> = keys
        .chunks_exact(d)
        .map(|k| k.iter().zip(query).map(|(a, b)| a * b).sum::<f32>() * scale)
        .collect();
    softmax(&mut w);
    w
}

fn softmax(w: &mut [f32]) {
    let m = w.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in w.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in w.iter_mut() {
        *v /= s;
    }
}

/// Masked attention over `[L, d]` queries/keys and `[L, dv]` values:
/// position `i` sees positions `0..=i`. Scale is `1/sqrt(d)`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, NnError> {
    let (&[l, d], &[lk, dk], &[lv, dv]) = (q.dims(), k.dims(), v.dims()) else {
        return Err(NnError::Shape("attention inputs must be rank 2".into()));
    };
    if l != lk || l != lv || d != dk {
        return Err(NnError::Shape(format!(
            "attention dims q {:?} k {:?} v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0; l * dv];
    for i in 0..l {
        let w = attention_weights(&q.data()[i * d..(i + 1) * d], &k.data()[..(i + 1) * d], scale);
        let o = &mut out[i * dv..(i + 1) * dv];
        for (j, wj) in w.iter().enumerate() {
            for (ov, vv) in o.iter_mut().zip(&v.data()[j * dv..(j + 1) * dv]) {
                *ov += wj * vv;
            }
        }
    }
    Tensor::new(vec![l, dv], out)
}

/// Keys and values of past tokens for every head, capped at `capacity`
/// tokens; the oldest are dropped first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    pub capacity: usize,
    /// Absolute index of the next token.
    pub next_pos: usize,
    pub len: usize,
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

impl KvCache {
    pub const DEFAULT_CAPACITY: usize = 4096;

    pub fn new(heads: usize, capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            next_pos: 0,
            len: 0,
            keys: vec![Vec::new(); heads],
            values: vec![Vec::new(); heads],
        }
    }

    pub fn reset(&mut self) {
        self.next_pos = 0;
        self.len = 0;
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
    }

    fn trim(&mut self) {
        if self.len <= self.capacity {
            return;
        }
        let drop = self.len - self.capacity;
        for (k, v) in self.keys.iter_mut().zip(self.values.iter_mut()) {
            let kw = k.len() / self.len;
            let vw = v.len() / self.len;
            k.drain(..drop * kw);
            v.drain(..drop * vw);
        }
        self.len = self.capacity;
    }
}

/// Multi-head causal attention over tokens of shape `[freqs, dim]`.
///
/// Each head projects a token with per-frequency 1x1 maps, a PReLU and a
/// token-wide normalisation; queries and keys use `qk_dim` channels, values
/// keep `dim`. Heads are concatenated along channels and projected back.
#[derive(Debug, Clone)]
pub struct MaskedSelfAttention {
    pub freqs: usize,
    pub dim: usize,
    pub heads: usize,
    pub qk_dim: usize,
    pub q: Vec<(Linear, PRelu, GroupNorm)>,
    pub k: Vec<(Linear, PRelu, GroupNorm)>,
    pub v: Vec<(Linear, PRelu, GroupNorm)>,
    pub proj: (Linear, PRelu, GroupNorm),
}

fn branch(freqs: usize, din: usize, dout: usize) -> (Linear, PRelu, GroupNorm) {
    (Linear::new(din, dout), PRelu::default(), GroupNorm::new(freqs, dout))
}

fn run_branch(b: &(Linear, PRelu, GroupNorm), x: &[f32], rows: usize) -> Vec<f32> {
    let mut y = b.0.forward(x, rows);
    b.1.apply(&mut y);
    b.2.apply(&mut y);
    y
}

fn visit_branch(b: &mut (Linear, PRelu, GroupNorm), prefix: &str, v: &mut Visitor<'_>) {
    b.0.visit(&format!("{prefix}.conv"), v);
    b.1.visit(&format!("{prefix}.act"), v);
    b.2.visit(&format!("{prefix}.norm"), v);
}

impl MaskedSelfAttention {
    pub fn new(freqs: usize, dim: usize, heads: usize, qk_dim: usize) -> Self {
        Self {
            freqs,
            dim,
            heads,
            qk_dim,
            q: (0..heads).map(|_| branch(freqs, dim, qk_dim)).collect(),
            k: (0..heads).map(|_| branch(freqs, dim, qk_dim)).collect(),
            v: (0..heads).map(|_| branch(freqs, dim, dim)).collect(),
            proj: branch(freqs, heads * dim, dim),
        }
    }

    pub fn new_cache(&self, capacity: usize) -> KvCache {
        KvCache::new(self.heads, capacity)
    }

    /// Attends `n` new tokens `[n, freqs, dim]` to themselves and the cached
    /// past; returns `[n, freqs, dim]` (the residual is left to the caller).
    /// Feeding tokens one by one or all at once gives the same result.
    pub fn forward(&self, tokens: &[f32], n: usize, cache: &mut KvCache) -> Vec<f32> {
        let (f, d) = (self.freqs, self.dim);
        let tok = f * d;
        assert_eq!(tokens.len(), n * tok);
        let mut x = tokens.to_vec();
        for (i, t) in x.chunks_exact_mut(tok).enumerate() {
            let pe = sinusoidal_encoding(cache.next_pos + i, d);
            for row in t.chunks_exact_mut(d) {
                for (a, p) in row.iter_mut().zip(&pe) {
                    *a += p;
                }
            }
        }
        let base = cache.len;
        let qk = f * self.qk_dim;
        let scale = 1.0 / (qk as f32).sqrt();
        let mut cat = vec![0.0f32; n * f * self.heads * d];
        for h in 0..self.heads {
            let q = run_branch(&self.q[h], &x, n * f);
            cache.keys[h].extend(run_branch(&self.k[h], &x, n * f));
            cache.values[h].extend(run_branch(&self.v[h], &x, n * f));
            let total = base + n;
            let keys = &cache.keys[h];
            let vals = &cache.values[h];
            let mut scores = vec![0.0f32; n * total];
            gemm(n, qk, total, &q, qk, 1, keys, 1, qk, 0.0, &mut scores);
            for i in 0..n {
                let end = base + i + 1;
                let start = end.saturating_sub(cache.capacity);
                let row = &mut scores[i * total..(i + 1) * total];
                for s in row.iter_mut() {
                    *s *= scale;
                }
                row[..start].fill(f32::NEG_INFINITY);
                row[end..].fill(f32::NEG_INFINITY);
                softmax(row);
                row[..start].fill(0.0);
                row[end..].fill(0.0);
            }
            let mut out = vec![0.0f32; n * tok];
            gemm(n, total, tok, &scores, total, 1, vals, tok, 1, 0.0, &mut out);
            for (r, chunk) in out.chunks_exact(d).enumerate() {
                cat[r * self.heads * d + h * d..][..d].copy_from_slice(chunk);
            }
        }
        cache.len += n;
        cache.next_pos += n;
        cache.trim();
        run_branch(&self.proj, &cat, n * f)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut Visitor<'_>) {
        for h in 0..self.heads {
            visit_branch(&mut self.q[h], &format!("{prefix}.h{h}.q"), v);
            visit_branch(&mut self.k[h], &format!("{prefix}.h{h}.k"), v);
            visit_branch(&mut self.v[h], &format!("{prefix}.h{h}.v"), v);
        }
        visit_branch(&mut self.proj, &format!("{prefix}.proj"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Init;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_attends_to_itself() {
        let q = Tensor::new(vec![1, 2], vec![0.3, -1.0]).unwrap();
        let w = attention_weights(q.data(), q.data(), 1.0);
        assert_eq!(w, vec![1.0]);
        let v = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(causal_attention(&q, &q, &v).unwrap(), v);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let w = attention_weights(&[1.0, 2.0], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5], 0.7);
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_prefix_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (q, k, v) = (r(6 * 4), r(6 * 4), r(6 * 3));
        let full = causal_attention(
            &Tensor::new(vec![6, 4], q.clone()).unwrap(),
            &Tensor::new(vec![6, 4], k.clone()).unwrap(),
            &Tensor::new(vec![6, 3], v.clone()).unwrap(),
        )
        .unwrap();
        let prefix = causal_attention(
            &Tensor::new(vec![4, 4], q[..16].to_vec()).unwrap(),
            &Tensor::new(vec![4, 4], k[..16].to_vec()).unwrap(),
            &Tensor::new(vec![4, 3], v[..12].to_vec()).unwrap(),
        )
        .unwrap();
        assert_eq!(&full.data()[..12], prefix.data());
    }

    #[test]
    fn encoding_values() {
        let pe = sinusoidal_encoding(0, 4);
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0]);
        let pe3 = sinusoidal_encoding(3, 4);
        assert!((pe3[0] - 3f32.sin()).abs() < 1e-6);
        assert!((pe3[3] - (3.0f32 / 100.0).cos()).abs() < 1e-6);
    }

    fn random_mha(seed: u64) -> MaskedSelfAttention {
        let mut m = MaskedSelfAttention::new(5, 4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.visit("g", &mut |s| {
            if let Init::Uniform { .. } = s.init {
                s.data.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
            }
        });
        m
    }

    #[test]
    fn incremental_equals_full() {
        let m = random_mha(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let toks: Vec<f32> = (0..7 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let full = m.forward(&toks, 7, &mut m.new_cache(4096));
        let mut cache = m.new_cache(4096);
        let mut inc = Vec::new();
        for t in toks.chunks_exact(20) {
            inc.extend(m.forward(t, 1, &mut cache));
        }
        let diff = full.iter().zip(&inc).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-5, "{diff}");
        assert_eq!(cache.len, 7);
    }

    #[test]
    fn capped_cache_is_consistent() {
        let m = random_mha(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let toks: Vec<f32> = (0..6 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let full = m.forward(&toks, 6, &mut m.new_cache(3));
        let mut cache = m.new_cache(3);
        let mut inc = Vec::new();
        for t in toks.chunks_exact(20) {
            inc.extend(m.forward(t, 1, &mut cache));
        }
        assert_eq!(cache.len, 3);
        assert_eq!(cache.next_pos, 6);
        let diff = full.iter().zip(&inc).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-5, "{diff}");
    }
}
