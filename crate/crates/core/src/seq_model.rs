//! Compact pre-norm encoder-decoder. The vision embedding enters as a single
//! projected prefix token ahead of the routed text tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Embedding, Graph, Group, LayerNorm, Linear, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// Flattened vision embedding width.
    pub vision_dim: usize,
    /// Longest encoder input, prefix included.
    pub max_src_len: usize,
    /// Longest target, end token included.
    pub max_tgt_len: usize,
}

impl ModelConfig {
    pub fn new(vocab: usize, vision_dim: usize) -> Self {
        Self {
            vocab,
            d_model: 256,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff_dim: 1024,
            dropout: 0.2,
            vision_dim,
            max_src_len: 1 + 75,
            max_tgt_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let op = "ModelConfig";
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(invalid(op, format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.vocab <= UNK {
            return Err(invalid(op, "vocabulary must hold the special tokens"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(op, "dropout must lie in [0, 1)"));
        }
        if self.max_src_len < 2 || self.max_tgt_len < 1 {
            return Err(invalid(op, "maximum lengths too small"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Encoder input for a batch: `[b, T, d]` with a key mask over `b * T`.
#[derive(Debug, Clone)]
pub struct FusedInput {
    pub x: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl FusedInput {
    pub fn real_len(&self, i: usize) -> usize {
        self.mask[i * self.len..(i + 1) * self.len].iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone)]
pub struct SeqOutput {
    /// Mean cross-entropy over real target tokens, `[b]`.
    pub loss: Var,
    /// Per sequence, the max softmax probability at each real target token.
    pub max_probs: Vec<Vec<f64>>,
    /// Per sequence, the mean of final encoder states over real positions.
    pub encoder_mean: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SeqModel {
    pub cfg: ModelConfig,
    pub embed: Embedding,
    pub vision_proj: Linear,
    enc: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    dec: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    pub lm_head: Linear,
}

/// Sinusoidal position table `[len, d]`.
pub fn sinusoid<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        T::lit(if j % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() })
    })
}

impl SeqModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let lg = Group::Language;
        let d = cfg.d_model;
        let attn = |store: &mut ParamStore<T>, name: &str, rng: &mut _| Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, lg, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, lg, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, lg, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, lg, rng),
        };
        let ff = |store: &mut ParamStore<T>, name: &str, rng: &mut _| FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, cfg.ff_dim, true, lg, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.ff_dim, d, true, lg, rng),
        };
        let embed = Embedding::new(store, "lang.embed", cfg.vocab, d, lg, rng);
        let vision_proj = Linear::new(store, "lang.vision_proj", cfg.vision_dim, d, true, lg, rng);
        let enc = (0..cfg.enc_layers)
            .map(|i| {
                let n = format!("lang.enc{i}");
                EncoderLayer {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d, lg),
                    attn: attn(store, &format!("{n}.attn"), rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d, lg),
                    ff: ff(store, &format!("{n}.ff"), rng),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(store, "lang.enc_norm", d, lg);
        let dec = (0..cfg.dec_layers)
            .map(|i| {
                let n = format!("lang.dec{i}");
                DecoderLayer {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d, lg),
                    self_attn: attn(store, &format!("{n}.self"), rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d, lg),
                    cross_attn: attn(store, &format!("{n}.cross"), rng),
                    ln3: LayerNorm::new(store, &format!("{n}.ln3"), d, lg),
                    ff: ff(store, &format!("{n}.ff"), rng),
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(store, "lang.dec_norm", d, lg);
        let lm_head = Linear::new(store, "lang.lm_head", d, cfg.vocab, true, lg, rng);
        Ok(Self {
            cfg,
            embed,
            vision_proj,
            enc,
            enc_norm,
            dec,
            dec_norm,
            lm_head,
        })
    }

    fn add_positions<T: Scalar>(&self, g: &mut Graph<T>, x: Var, b: usize, t: usize) -> Result<Var> {
        let d = self.cfg.d_model;
        let table = sinusoid::<T>(t, d);
        let mut data = Vec::with_capacity(b * t * d);
        for _ in 0..b {
            data.extend_from_slice(table.data());
        }
        let pe = g.input(Tensor::new(&[b, t, d], data)?);
        g.tape.add(x, pe)
    }

    /// Prepends the projected vision embedding to each sequence of kept
    /// token ids and pads the batch.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, vision: Var, tokens: &[Vec<usize>]) -> Result<FusedInput> {
        let b = tokens.len();
        let vs = g.tape.shape(vision).to_vec();
        let width: usize = vs[1..].iter().product();
        if vs[0] != b || width != self.cfg.vision_dim {
            return Err(shape_err("fuse", "vision embedding", format!("[{b}, {}]", self.cfg.vision_dim), format!("{vs:?}")));
        }
        let longest = tokens.iter().map(Vec::len).max().unwrap_or(0);
        let len = 1 + longest;
        if len > self.cfg.max_src_len {
            return Err(shape_err("fuse", "fused length", format!("<= {}", self.cfg.max_src_len), len));
        }
        let d = self.cfg.d_model;
        let flat = g.tape.reshape(vision, &[b, width])?;
        let prefix = self.vision_proj.forward(g, flat)?;
        let prefix = g.tape.reshape(prefix, &[b, 1, d])?;
        let mut mask = Vec::with_capacity(b * len);
        let x = if longest == 0 {
            mask.resize(b, true);
            prefix
        } else {
            let mut ids = Vec::with_capacity(b * longest);
            for seq in tokens {
                mask.push(true);
                for i in 0..longest {
                    ids.push(seq.get(i).copied().unwrap_or(PAD));
                    mask.push(i < seq.len());
                }
            }
            let emb = self.embed.forward(g, &ids)?;
            let emb = g.tape.reshape(emb, &[b, longest, d])?;
            g.tape.concat(&[prefix, emb], 1)?
        };
        let x = self.add_positions(g, x, b, len)?;
        Ok(FusedInput { x, mask, batch: b, len })
    }

    /// Multi-head attention of queries `xq[b, tq, d]` over `xkv[b, tk, d]`;
    /// `keep(b, i, j)` decides which keys a query may see.
    fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        a: &Attention,
        xq: Var,
        xkv: Var,
        keep: impl Fn(usize, usize, usize) -> bool,
    ) -> Result<Var> {
        let (b, tq, d) = {
            let s = g.tape.shape(xq);
            (s[0], s[1], s[2])
        };
        let tk = g.tape.shape(xkv)[1];
        let h = self.cfg.heads;
        let dh = d / h;
        let split = |g: &mut Graph<T>, x: Var, t: usize| -> Result<Var> {
            let x = g.tape.reshape(x, &[b, t, h, dh])?;
            let x = g.tape.permute(x, &[0, 2, 1, 3])?;
            g.tape.reshape(x, &[b * h, t, dh])
        };
        let q = a.q.forward(g, xq)?;
        let q = split(g, q, tq)?;
        let k = a.k.forward(g, xkv)?;
        let k = split(g, k, tk)?;
        let v = a.v.forward(g, xkv)?;
        let v = split(g, v, tk)?;
        let scores = g.tape.matmul(q, k, true)?;
        let scores = g.tape.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let mut mask = Vec::with_capacity(b * h * tq * tk);
        for bi in 0..b {
            let mut block = Vec::with_capacity(tq * tk);
            for i in 0..tq {
                for j in 0..tk {
                    block.push(keep(bi, i, j));
                }
            }
            for _ in 0..h {
                mask.extend_from_slice(&block);
            }
        }
        let scores = g.tape.mask_fill(scores, mask)?;
        let probs = g.tape.softmax(scores)?;
        let probs = g.dropout(probs, self.cfg.dropout)?;
        let ctx = g.tape.matmul(probs, v, false)?;
        let ctx = g.tape.reshape(ctx, &[b, h, tq, dh])?;
        let ctx = g.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.tape.reshape(ctx, &[b, tq, d])?;
        let out = a.o.forward(g, ctx)?;
        g.dropout(out, self.cfg.dropout)
    }

    fn feed_forward<T: Scalar>(&self, g: &mut Graph<T>, f: &FeedForward, x: Var) -> Result<Var> {
        let hid = f.fc1.forward(g, x)?;
        let hid = g.tape.relu(hid);
        let hid = g.dropout(hid, self.cfg.dropout)?;
        let out = f.fc2.forward(g, hid)?;
        g.dropout(out, self.cfg.dropout)
    }

    /// Final encoder states `[b, T, d]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, fused: &FusedInput) -> Result<Var> {
        let mut x = g.dropout(fused.x, self.cfg.dropout)?;
        let (len, mask) = (fused.len, &fused.mask);
        for layer in &self.enc {
            let n = layer.ln1.forward(g, x)?;
            let a = self.attend(g, &layer.attn, n, n, |b, _, j| mask[b * len + j])?;
            x = g.tape.add(x, a)?;
            let n = layer.ln2.forward(g, x)?;
            let f = self.feed_forward(g, &layer.ff, n)?;
            x = g.tape.add(x, f)?;
        }
        self.enc_norm.forward(g, x)
    }

    /// Logits `[b, t, V]` for decoder inputs `dec_in` (each of length `t`).
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, memory: Var, src_mask: &[bool], dec_in: &[Vec<usize>]) -> Result<Var> {
        let b = dec_in.len();
        let t = dec_in.first().map_or(0, Vec::len);
        if dec_in.iter().any(|s| s.len() != t) || t == 0 {
            return Err(invalid("decode", "decoder inputs must share one positive length"));
        }
        if t > self.cfg.max_tgt_len {
            return Err(shape_err("decode", "target length", format!("<= {}", self.cfg.max_tgt_len), t));
        }
        let src_len = g.tape.shape(memory)[1];
        let d = self.cfg.d_model;
        let ids: Vec<usize> = dec_in.iter().flatten().copied().collect();
        let emb = self.embed.forward(g, &ids)?;
        let emb = g.tape.reshape(emb, &[b, t, d])?;
        let x = self.add_positions(g, emb, b, t)?;
        let mut x = g.dropout(x, self.cfg.dropout)?;
        for layer in &self.dec {
            let n = layer.ln1.forward(g, x)?;
            let a = self.attend(g, &layer.self_attn, n, n, |_, i, j| j <= i)?;
            x = g.tape.add(x, a)?;
            let n = layer.ln2.forward(g, x)?;
            let c = self.attend(g, &layer.cross_attn, n, memory, |b, _, j| src_mask[b * src_len + j])?;
            x = g.tape.add(x, c)?;
            let n = layer.ln3.forward(g, x)?;
            let f = self.feed_forward(g, &layer.ff, n)?;
            x = g.tape.add(x, f)?;
        }
        let x = self.dec_norm.forward(g, x)?;
        self.lm_head.forward(g, x)
    }

    /// Teacher-forced pass. `targets` hold answer ids followed by the end
    /// token; padding is implied by differing lengths.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, fused: &FusedInput, targets: &[Vec<usize>]) -> Result<SeqOutput> {
        let b = fused.batch;
        if targets.len() != b {
            return Err(shape_err("forward", "batch", b, targets.len()));
        }
        if targets.iter().any(Vec::is_empty) {
            return Err(invalid("forward", "every target needs at least one token"));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= self.cfg.vocab) {
            return Err(shape_err("forward", "target id", format!("< {}", self.cfg.vocab), bad));
        }
        let t = targets.iter().map(Vec::len).max().unwrap_or(0);
        let memory = self.encode(g, fused)?;
        let mut dec_in = Vec::with_capacity(b);
        let mut flat_targets = Vec::with_capacity(b * t);
        for seq in targets {
            let mut inp = vec![PAD];
            inp.extend_from_slice(&seq[..seq.len() - 1]);
            inp.resize(t, PAD);
            dec_in.push(inp);
            flat_targets.extend((0..t).map(|i| seq.get(i).copied()));
        }
        let logits = self.decode(g, memory, &fused.mask, &dec_in)?;
        let v = self.cfg.vocab;
        let logits = g.tape.reshape(logits, &[b * t, v])?;
        let ce = g.tape.cross_entropy(logits, &flat_targets)?;
        let ce = g.tape.reshape(ce, &[b, t])?;
        let summed = g.tape.sum_last(ce)?;
        let inv: Vec<T> = targets.iter().map(|s| T::lit(1.0 / s.len() as f64)).collect();
        let loss = g.tape.mul_const(summed, inv)?;

        let lv = g.tape.value(logits).data();
        let mut max_probs = Vec::with_capacity(b);
        for (bi, seq) in targets.iter().enumerate() {
            let probs = (0..seq.len())
                .map(|i| {
                    let row = &lv[(bi * t + i) * v..(bi * t + i + 1) * v];
                    let mx = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
                    let z: f64 = row.iter().map(|&x| (x - mx).as_f64().exp()).sum();
                    1.0 / z
                })
                .collect();
            max_probs.push(probs);
        }
        let mv = g.tape.value(memory).data();
        let d = self.cfg.d_model;
        let encoder_mean = (0..b)
            .map(|bi| {
                let mut acc = vec![0.0; d];
                let mut n = 0usize;
                for j in 0..fused.len {
                    if fused.mask[bi * fused.len + j] {
                        n += 1;
                        let row = &mv[(bi * fused.len + j) * d..(bi * fused.len + j + 1) * d];
                        for (a, &x) in acc.iter_mut().zip(row) {
                            *a += x.as_f64();
                        }
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n as f64);
                acc
            })
            .collect();
        Ok(SeqOutput {
            loss,
            max_probs,
            encoder_mean,
        })
    }

    /// Greedy decoding until every sequence has produced the end token or
    /// `max_len` tokens. The end token is not included in the result.
    pub fn generate<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        vision: &Tensor<T>,
        tokens: &[Vec<usize>],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let b = tokens.len();
        let max_len = max_len.min(self.cfg.max_tgt_len);
        let (memory, mask) = {
            let mut g = Graph::new(store, false, 0);
            let v = g.input(vision.clone());
            let fused = self.fuse(&mut g, v, tokens)?;
            let m = self.encode(&mut g, &fused)?;
            (g.tape.value(m).clone(), fused.mask)
        };
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        let mut dec_in: Vec<Vec<usize>> = vec![vec![PAD]; b];
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let mut g = Graph::new(store, false, 0);
            let mem = g.input(memory.clone());
            let logits = self.decode(&mut g, mem, &mask, &dec_in)?;
            let t = dec_in[0].len();
            let v = self.cfg.vocab;
            let lv = g.tape.value(logits).data();
            for bi in 0..b {
                let row = &lv[(bi * t + t - 1) * v..(bi * t + t) * v];
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                if !done[bi] {
                    if best == EOS {
                        done[bi] = true;
                    } else {
                        out[bi].push(best);
                    }
                }
                dec_in[bi].push(best);
            }
        }
        Ok(out)
    }

    /// FLOPs of one teacher-forced forward pass for the given lengths.
    pub fn flops(&self, src_len: usize, tgt_len: usize) -> u64 {
        let c = &self.cfg;
        let (d, f, s, t) = (c.d_model as u64, c.ff_dim as u64, src_len as u64, tgt_len as u64);
        let attn = |q: u64, k: u64| 2 * d * d * (2 * q + 2 * k) + 4 * q * k * d;
        let ff = |n: u64| 4 * n * d * f;
        let mut total = 2 * c.vision_dim as u64 * d;
        total += c.enc_layers as u64 * (attn(s, s) + ff(s));
        total += c.dec_layers as u64 * (attn(t, t) + attn(t, s) + ff(t));
        total + 2 * t * d * c.vocab as u64
    }
}

/// `sum(w_i * loss_i) / b`.
pub fn weighted_loss<T: Scalar>(g: &mut Graph<T>, losses: Var, weights: &[f64]) -> Result<Var> {
    let n = g.tape.value(losses).numel();
    if weights.len() != n {
        return Err(shape_err("weighted_loss", "weights", n, weights.len()));
    }
    let w: Vec<T> = weights.iter().map(|&w| T::lit(w)).collect();
    let scaled = g.tape.mul_const(losses, w)?;
    let total = g.tape.sum(scaled);
    Ok(g.tape.scale(total, T::lit(1.0 / n as f64)))
}
