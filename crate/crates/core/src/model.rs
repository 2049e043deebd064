//! GPT-2 style causal decoder with hand-written reverse-mode gradients.
//!
//! Layout per block: pre-norm → multi-head causal self-attention → residual
//! add → pre-norm → GELU feed-forward → residual add. A final layer norm
//! feeds an output projection tied to the token embedding table.
//!
//! Weights are stored `[in, out]` so a layer computes `y = x·W + b`.

use std::io::{Read, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::binio::{BinReader, BinWriter, FormatError};
use crate::linalg::gemm;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, position: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_positions = {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    Empty,
    #[error("sequence of length {0} has nothing to predict")]
    NothingToPredict(usize),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Three blocks, 256-wide embeddings, four heads, 4·d feed-forward.
    pub fn new(vocab_size: usize, max_positions: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_positions,
            embed_dim: 256,
            num_blocks: 3,
            num_heads: 4,
            ffn_dim: 1024,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size == 0 || self.max_positions == 0 || self.embed_dim == 0 {
            return bad("vocab_size, max_positions and embed_dim must be positive");
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad("embed_dim must be divisible by num_heads");
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Named parameter tensors, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tensor {
    TokenEmbedding,
    PositionEmbedding,
    AttnNormGain(usize),
    AttnNormShift(usize),
    QkvWeight(usize),
    QkvBias(usize),
    AttnProjWeight(usize),
    AttnProjBias(usize),
    FfnNormGain(usize),
    FfnNormShift(usize),
    FcWeight(usize),
    FcBias(usize),
    FcProjWeight(usize),
    FcProjBias(usize),
    FinalNormGain,
    FinalNormShift,
}

impl Tensor {
    pub fn shape(&self, c: &ModelConfig) -> (usize, usize) {
        let d = c.embed_dim;
        let f = c.ffn_dim;
        match self {
            Tensor::TokenEmbedding => (c.vocab_size, d),
            Tensor::PositionEmbedding => (c.max_positions, d),
            Tensor::QkvWeight(_) => (d, 3 * d),
            Tensor::QkvBias(_) => (1, 3 * d),
            Tensor::AttnProjWeight(_) => (d, d),
            Tensor::FcWeight(_) => (d, f),
            Tensor::FcBias(_) => (1, f),
            Tensor::FcProjWeight(_) => (f, d),
            _ => (1, d),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Tensor::TokenEmbedding => "wte".into(),
            Tensor::PositionEmbedding => "wpe".into(),
            Tensor::AttnNormGain(l) => format!("h{l}.ln_1.weight"),
            Tensor::AttnNormShift(l) => format!("h{l}.ln_1.bias"),
            Tensor::QkvWeight(l) => format!("h{l}.attn.c_attn.weight"),
            Tensor::QkvBias(l) => format!("h{l}.attn.c_attn.bias"),
            Tensor::AttnProjWeight(l) => format!("h{l}.attn.c_proj.weight"),
            Tensor::AttnProjBias(l) => format!("h{l}.attn.c_proj.bias"),
            Tensor::FfnNormGain(l) => format!("h{l}.ln_2.weight"),
            Tensor::FfnNormShift(l) => format!("h{l}.ln_2.bias"),
            Tensor::FcWeight(l) => format!("h{l}.mlp.c_fc.weight"),
            Tensor::FcBias(l) => format!("h{l}.mlp.c_fc.bias"),
            Tensor::FcProjWeight(l) => format!("h{l}.mlp.c_proj.weight"),
            Tensor::FcProjBias(l) => format!("h{l}.mlp.c_proj.bias"),
            Tensor::FinalNormGain => "ln_f.weight".into(),
            Tensor::FinalNormShift => "ln_f.bias".into(),
        }
    }

    fn block_tensors(l: usize) -> [Tensor; 12] {
        [
            Tensor::AttnNormGain(l),
            Tensor::AttnNormShift(l),
            Tensor::QkvWeight(l),
            Tensor::QkvBias(l),
            Tensor::AttnProjWeight(l),
            Tensor::AttnProjBias(l),
            Tensor::FfnNormGain(l),
            Tensor::FfnNormShift(l),
            Tensor::FcWeight(l),
            Tensor::FcBias(l),
            Tensor::FcProjWeight(l),
            Tensor::FcProjBias(l),
        ]
    }

    /// All tensors of a config in declared order.
    pub fn all(c: &ModelConfig) -> Vec<Tensor> {
        let mut v = vec![Tensor::TokenEmbedding, Tensor::PositionEmbedding];
        for l in 0..c.num_blocks {
            v.extend(Tensor::block_tensors(l));
        }
        v.push(Tensor::FinalNormGain);
        v.push(Tensor::FinalNormShift);
        v
    }
}

/// All learnable tensors in one flat buffer. Gradients and optimizer
/// moments use the same type.
#[derive(Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub data: Vec<f64>,
    block_len: usize,
}

impl std::fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelParams")
            .field("config", &self.config)
            .field("num_parameters", &self.data.len())
            .finish()
    }
}

fn tensor_len(t: Tensor, c: &ModelConfig) -> usize {
    let (r, k) = t.shape(c);
    r * k
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let block_len = Tensor::block_tensors(0)
            .iter()
            .map(|&t| tensor_len(t, config))
            .sum();
        let total: usize = Tensor::all(config).iter().map(|&t| tensor_len(t, config)).sum();
        ModelParams {
            config: config.clone(),
            data: vec![0.0; total],
            block_len,
        }
    }

    /// GPT-2 initialisation: N(0, 0.02) weights and embeddings, residual
    /// output projections N(0, 0.02/√(2L)), zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).unwrap();
        let resid = Normal::new(0.0, 0.02 / (2.0 * config.num_blocks as f64).sqrt()).unwrap();
        for t in Tensor::all(config) {
            let slot = p.tensor_mut(t);
            match t {
                Tensor::AttnNormGain(_) | Tensor::FfnNormGain(_) | Tensor::FinalNormGain => slot.fill(1.0),
                Tensor::AttnProjWeight(_) | Tensor::FcProjWeight(_) => {
                    slot.iter_mut().for_each(|v| *v = resid.sample(&mut rng))
                }
                Tensor::TokenEmbedding
                | Tensor::PositionEmbedding
                | Tensor::QkvWeight(_)
                | Tensor::FcWeight(_) => slot.iter_mut().for_each(|v| *v = base.sample(&mut rng)),
                _ => {}
            }
        }
        p
    }

    /// Every entry drawn from N(0, std²), norm gains around 1. For probing
    /// the network away from its initialisation.
    pub fn random(config: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, std).unwrap();
        for t in Tensor::all(config) {
            let gain = matches!(
                t,
                Tensor::AttnNormGain(_) | Tensor::FfnNormGain(_) | Tensor::FinalNormGain
            );
            for v in p.tensor_mut(t) {
                *v = n.sample(&mut rng) + if gain { 1.0 } else { 0.0 };
            }
        }
        p
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.data.len()
    }

    pub fn range(&self, t: Tensor) -> Range<usize> {
        let c = &self.config;
        let d = c.embed_dim;
        let emb = c.vocab_size * d + c.max_positions * d;
        let start = match t {
            Tensor::TokenEmbedding => 0,
            Tensor::PositionEmbedding => c.vocab_size * d,
            Tensor::FinalNormGain => emb + c.num_blocks * self.block_len,
            Tensor::FinalNormShift => emb + c.num_blocks * self.block_len + d,
            _ => {
                let l = match t {
                    Tensor::AttnNormGain(l)
                    | Tensor::AttnNormShift(l)
                    | Tensor::QkvWeight(l)
                    | Tensor::QkvBias(l)
                    | Tensor::AttnProjWeight(l)
                    | Tensor::AttnProjBias(l)
                    | Tensor::FfnNormGain(l)
                    | Tensor::FfnNormShift(l)
                    | Tensor::FcWeight(l)
                    | Tensor::FcBias(l)
                    | Tensor::FcProjWeight(l)
                    | Tensor::FcProjBias(l) => l,
                    _ => unreachable!(),
                };
                assert!(l < c.num_blocks, "block {l} out of range");
                let mut off = emb + l * self.block_len;
                for bt in Tensor::block_tensors(l) {
                    if bt == t {
                        break;
                    }
                    off += tensor_len(bt, c);
                }
                off
            }
        };
        start..start + tensor_len(t, c)
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[self.range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.range(t);
        &mut self.data[r]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// L2 norm of every tensor, in declared order.
    pub fn norms(&self) -> Vec<(String, f64)> {
        Tensor::all(&self.config)
            .into_iter()
            .map(|t| (t.name(), self.tensor(t).iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        if tokens.len() > self.config.max_positions {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                max: self.config.max_positions,
            });
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                token,
                position,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits of rows `rows` of the final hidden states (tied projection).
    fn project(&self, hidden: &[f64], rows: Range<usize>) -> Vec<f64> {
        let d = self.config.embed_dim;
        let v = self.config.vocab_size;
        let n = rows.len();
        let mut out = vec![0.0; n * v];
        gemm(
            n, d, v,
            1.0, &hidden[rows.start * d..rows.end * d], false,
            self.tensor(Tensor::TokenEmbedding), true,
            0.0, &mut out,
        );
        out
    }

    /// Per-position logits, `n × vocab_size` row-major.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        self.check_tokens(tokens)?;
        let cache = self.forward_cache(tokens, None);
        Ok(self.project(&cache.lnf.out, 0..tokens.len()))
    }

    /// Logits of the last position only.
    pub fn last_logits(&self, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let cache = self.forward_cache(tokens, None);
        Ok(self.project(&cache.lnf.out, n - 1..n))
    }

    /// Softmax of the last position's logits.
    pub fn next_token_distribution(&self, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut logits = self.last_logits(tokens)?;
        softmax_in_place(&mut logits);
        Ok(logits)
    }

    /// Mean next-token cross-entropy of `tokens` and its exact gradient.
    pub fn lm_loss(&self, tokens: &[u32]) -> Result<(f64, ModelParams), ModelError> {
        let mut grads = ModelParams::zeros(&self.config);
        let n = tokens.len();
        if n < 2 {
            self.check_tokens(tokens)?;
            return Err(ModelError::NothingToPredict(n));
        }
        let sum = self.accumulate_lm_gradient(tokens, 1.0 / (n - 1) as f64, &mut grads, None)?;
        Ok((sum / (n - 1) as f64, grads))
    }

    /// Adds `scale · ∇(Σ token losses)` of one sequence into `grads` and
    /// returns the summed (unscaled) loss over its `n − 1` predicted positions.
    pub fn accumulate_lm_gradient(
        &self,
        tokens: &[u32],
        scale: f64,
        grads: &mut ModelParams,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, ModelError> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        if n < 2 {
            return Err(ModelError::NothingToPredict(n));
        }
        let cfg = &self.config;
        let (d, vocab) = (cfg.embed_dim, cfg.vocab_size);
        let cache = self.forward_cache(tokens, dropout_rng);
        let predicted = n - 1;
        let mut dlogits = self.project(&cache.lnf.out, 0..predicted);
        let mut loss = 0.0;
        for (i, row) in dlogits.chunks_mut(vocab).enumerate() {
            let target = tokens[i + 1] as usize;
            let lse = log_sum_exp(row);
            loss += lse - row[target];
            for v in row.iter_mut() {
                *v = (*v - lse).exp() * scale;
            }
            row[target] -= scale;
        }

        // tied projection: logits = H · Wteᵀ
        let mut dhidden = vec![0.0; n * d];
        gemm(
            predicted, vocab, d,
            1.0, &dlogits, false, self.tensor(Tensor::TokenEmbedding), false,
            0.0, &mut dhidden[..predicted * d],
        );
        let r = grads.range(Tensor::TokenEmbedding);
        gemm(
            vocab, predicted, d,
            1.0, &dlogits, true, &cache.lnf.out[..predicted * d], false,
            1.0, &mut grads.data[r],
        );
        self.backward(&cache, &dhidden, grads);
        Ok(loss)
    }

    fn forward_cache(&self, tokens: &[u32], mut rng: Option<&mut ChaCha8Rng>) -> Cache {
        let cfg = &self.config;
        let (n, d, f) = (tokens.len(), cfg.embed_dim, cfg.ffn_dim);
        let p = cfg.dropout_rate;
        let wte = self.tensor(Tensor::TokenEmbedding);
        let wpe = self.tensor(Tensor::PositionEmbedding);
        let mut x = vec![0.0; n * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            let e = &wte[tok as usize * d..(tok as usize + 1) * d];
            let pe = &wpe[i * d..(i + 1) * d];
            for ((xv, ev), pv) in row.iter_mut().zip(e).zip(pe) {
                *xv = ev + pv;
            }
        }
        let drop0 = dropout_mask(&mut rng, p, n * d);
        apply_mask(&mut x, &drop0);

        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for l in 0..cfg.num_blocks {
            let ln1 = layer_norm(
                &x, d,
                self.tensor(Tensor::AttnNormGain(l)),
                self.tensor(Tensor::AttnNormShift(l)),
            );
            let qkv = linear(&ln1.out, n, d, 3 * d, self.tensor(Tensor::QkvWeight(l)), self.tensor(Tensor::QkvBias(l)));
            let (att, probs) = causal_attention(&qkv, n, d, cfg.num_heads);
            let mut proj = linear(&att, n, d, d, self.tensor(Tensor::AttnProjWeight(l)), self.tensor(Tensor::AttnProjBias(l)));
            let drop1 = dropout_mask(&mut rng, p, n * d);
            apply_mask(&mut proj, &drop1);
            let x_mid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

            let ln2 = layer_norm(
                &x_mid, d,
                self.tensor(Tensor::FfnNormGain(l)),
                self.tensor(Tensor::FfnNormShift(l)),
            );
            let fc_pre = linear(&ln2.out, n, d, f, self.tensor(Tensor::FcWeight(l)), self.tensor(Tensor::FcBias(l)));
            let fc_act: Vec<f64> = fc_pre.iter().map(|&v| gelu(v)).collect();
            let mut out = linear(&fc_act, n, f, d, self.tensor(Tensor::FcProjWeight(l)), self.tensor(Tensor::FcProjBias(l)));
            let drop2 = dropout_mask(&mut rng, p, n * d);
            apply_mask(&mut out, &drop2);
            let x_out: Vec<f64> = x_mid.iter().zip(&out).map(|(a, b)| a + b).collect();

            blocks.push(BlockCache {
                x_in: std::mem::replace(&mut x, x_out),
                ln1,
                qkv,
                probs,
                att,
                drop1,
                x_mid,
                ln2,
                fc_pre,
                fc_act,
                drop2,
            });
        }
        let lnf = layer_norm(
            &x, d,
            self.tensor(Tensor::FinalNormGain),
            self.tensor(Tensor::FinalNormShift),
        );
        Cache {
            tokens: tokens.to_vec(),
            drop0,
            blocks,
            x_final: x,
            lnf,
        }
    }

    /// Back-propagates `dhidden` (gradient w.r.t. the final-norm output).
    fn backward(&self, cache: &Cache, dhidden: &[f64], grads: &mut ModelParams) {
        let cfg = &self.config;
        let (n, d, f) = (cache.tokens.len(), cfg.embed_dim, cfg.ffn_dim);

        let mut dx = layer_norm_backward(
            &cache.x_final, &cache.lnf, dhidden, d,
            self.tensor(Tensor::FinalNormGain),
            grads, Tensor::FinalNormGain, Tensor::FinalNormShift,
        );

        for l in (0..cfg.num_blocks).rev() {
            let b = &cache.blocks[l];
            // feed-forward branch
            let mut dout = dx.clone();
            apply_mask(&mut dout, &b.drop2);
            let dact = linear_backward(
                &b.fc_act, n, f, d, &dout,
                self.tensor(Tensor::FcProjWeight(l)),
                grads, Tensor::FcProjWeight(l), Tensor::FcProjBias(l),
            );
            let dpre: Vec<f64> = dact.iter().zip(&b.fc_pre).map(|(g, &x)| g * gelu_grad(x)).collect();
            let dln2 = linear_backward(
                &b.ln2.out, n, d, f, &dpre,
                self.tensor(Tensor::FcWeight(l)),
                grads, Tensor::FcWeight(l), Tensor::FcBias(l),
            );
            let dmid = layer_norm_backward(
                &b.x_mid, &b.ln2, &dln2, d,
                self.tensor(Tensor::FfnNormGain(l)),
                grads, Tensor::FfnNormGain(l), Tensor::FfnNormShift(l),
            );
            for (a, g) in dx.iter_mut().zip(&dmid) {
                *a += g;
            }

            // attention branch
            let mut dproj = dx.clone();
            apply_mask(&mut dproj, &b.drop1);
            let datt = linear_backward(
                &b.att, n, d, d, &dproj,
                self.tensor(Tensor::AttnProjWeight(l)),
                grads, Tensor::AttnProjWeight(l), Tensor::AttnProjBias(l),
            );
            let dqkv = causal_attention_backward(&b.qkv, &b.probs, &datt, n, d, cfg.num_heads);
            let dln1 = linear_backward(
                &b.ln1.out, n, d, 3 * d, &dqkv,
                self.tensor(Tensor::QkvWeight(l)),
                grads, Tensor::QkvWeight(l), Tensor::QkvBias(l),
            );
            let din = layer_norm_backward(
                &b.x_in, &b.ln1, &dln1, d,
                self.tensor(Tensor::AttnNormGain(l)),
                grads, Tensor::AttnNormGain(l), Tensor::AttnNormShift(l),
            );
            for (a, g) in dx.iter_mut().zip(&din) {
                *a += g;
            }
        }

        apply_mask(&mut dx, &cache.drop0);
        let wte = grads.range(Tensor::TokenEmbedding);
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let row = &mut grads.data[wte.start + tok as usize * d..wte.start + (tok as usize + 1) * d];
            for (g, v) in row.iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                *g += v;
            }
        }
        let wpe = grads.range(Tensor::PositionEmbedding);
        for (g, v) in grads.data[wpe.start..wpe.start + n * d].iter_mut().zip(&dx) {
            *g += v;
        }
    }

    const MAGIC: [u8; 4] = *b"GRCK";
    const VERSION: u32 = 1;

    /// Checkpoint: config, then every tensor in declared order as f32 LE.
    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<(), ModelError> {
        let c = &self.config;
        let mut w = BinWriter::new(w);
        w.header(Self::MAGIC, Self::VERSION)?;
        for v in [c.vocab_size, c.max_positions, c.embed_dim, c.num_blocks, c.num_heads, c.ffn_dim] {
            w.u64(v as u64)?;
        }
        w.f64(c.dropout_rate)?;
        let tensors = Tensor::all(c);
        w.u32(tensors.len() as u32)?;
        for t in tensors {
            let slot = self.tensor(t);
            w.u64(slot.len() as u64)?;
            for &v in slot {
                w.f32(v as f32)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self, ModelError> {
        let mut r = BinReader::new(r);
        r.header(Self::MAGIC, Self::VERSION)?;
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.len_u64()?;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            max_positions: dims[1],
            embed_dim: dims[2],
            num_blocks: dims[3],
            num_heads: dims[4],
            ffn_dim: dims[5],
            dropout_rate: r.f64()?,
        };
        config.validate()?;
        let mut p = ModelParams::zeros(&config);
        let tensors = Tensor::all(&config);
        if r.u32()? as usize != tensors.len() {
            return Err(FormatError::Corrupt("tensor count mismatch".into()).into());
        }
        for t in tensors {
            let len = r.len_u64()?;
            let slot = p.tensor_mut(t);
            if len != slot.len() {
                return Err(FormatError::Corrupt(format!("{}: length {len} != {}", t.name(), slot.len())).into());
            }
            for v in slot.iter_mut() {
                *v = r.f32()? as f64;
            }
        }
        r.finish()?;
        Ok(p)
    }
}

struct LnCache {
    out: Vec<f64>,
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

struct BlockCache {
    x_in: Vec<f64>,
    ln1: LnCache,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    drop1: Option<Vec<f64>>,
    x_mid: Vec<f64>,
    ln2: LnCache,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
    drop2: Option<Vec<f64>>,
}

struct Cache {
    tokens: Vec<u32>,
    drop0: Option<Vec<f64>>,
    blocks: Vec<BlockCache>,
    x_final: Vec<f64>,
    lnf: LnCache,
}

fn dropout_mask(rng: &mut Option<&mut ChaCha8Rng>, p: f64, len: usize) -> Option<Vec<f64>> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            Some((0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect())
        }
        _ => None,
    }
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax; `-inf` entries get probability 0.
pub fn softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    for v in row.iter_mut() {
        *v = (*v - lse).exp();
    }
}

/// Log-softmax with max subtraction.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], shift: &[f64]) -> LnCache {
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut mean = vec![0.0; n];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let m = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for (j, o) in out[i * d..(i + 1) * d].iter_mut().enumerate() {
            *o = (row[j] - m) * rs * gain[j] + shift[j];
        }
        mean[i] = m;
        rstd[i] = rs;
    }
    LnCache { out, mean, rstd }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    x: &[f64],
    cache: &LnCache,
    dy: &[f64],
    d: usize,
    gain: &[f64],
    grads: &mut ModelParams,
    gain_t: Tensor,
    shift_t: Tensor,
) -> Vec<f64> {
    let n = x.len() / d;
    let gr = grads.range(gain_t);
    let sr = grads.range(shift_t);
    let mut dx = vec![0.0; x.len()];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let (m, rs) = (cache.mean[i], cache.rstd[i]);
        for j in 0..d {
            xhat[j] = (row[j] - m) * rs;
            dxhat[j] = dyr[j] * gain[j];
            grads.data[gr.start + j] += dyr[j] * xhat[j];
            grads.data[sr.start + j] += dyr[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[i * d + j] = rs * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    dx
}

fn linear(x: &[f64], n: usize, din: usize, dout: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * dout);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(n, din, dout, 1.0, x, false, w, false, 1.0, &mut y);
    y
}

/// Accumulates dW, db and returns dx for `y = x·W + b`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    dy: &[f64],
    w: &[f64],
    grads: &mut ModelParams,
    w_t: Tensor,
    b_t: Tensor,
) -> Vec<f64> {
    let wr = grads.range(w_t);
    gemm(din, n, dout, 1.0, x, true, dy, false, 1.0, &mut grads.data[wr]);
    let br = grads.range(b_t);
    let db = &mut grads.data[br];
    for row in dy.chunks(dout) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut dx = vec![0.0; n * din];
    gemm(n, dout, din, 1.0, dy, false, w, true, 0.0, &mut dx);
    dx
}

fn head_slice(qkv: &[f64], n: usize, d: usize, part: usize, h: usize, hd: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * hd);
    for i in 0..n {
        let base = i * 3 * d + part * d + h * hd;
        out.extend_from_slice(&qkv[base..base + hd]);
    }
    out
}

/// Returns the concatenated head outputs (n × d) and the attention
/// probabilities (heads × n × n, zero above the diagonal).
fn causal_attention(qkv: &[f64], n: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    let mut head_out = vec![0.0; n * hd];
    for h in 0..heads {
        let q = head_slice(qkv, n, d, 0, h, hd);
        let k = head_slice(qkv, n, d, 1, h, hd);
        let v = head_slice(qkv, n, d, 2, h, hd);
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        gemm(n, hd, n, scale, &q, false, &k, true, 0.0, p);
        for i in 0..n {
            let row = &mut p[i * n..(i + 1) * n];
            for s in row[i + 1..].iter_mut() {
                *s = f64::NEG_INFINITY;
            }
            softmax_in_place(row);
        }
        gemm(n, n, hd, 1.0, p, false, &v, false, 0.0, &mut head_out);
        for i in 0..n {
            out[i * d + h * hd..i * d + (h + 1) * hd].copy_from_slice(&head_out[i * hd..(i + 1) * hd]);
        }
    }
    (out, probs)
}

fn causal_attention_backward(
    qkv: &[f64],
    probs: &[f64],
    dout: &[f64],
    n: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dqkv = vec![0.0; n * 3 * d];
    let mut dp = vec![0.0; n * n];
    let mut dq = vec![0.0; n * hd];
    let mut dk = vec![0.0; n * hd];
    let mut dv = vec![0.0; n * hd];
    for h in 0..heads {
        let q = head_slice(qkv, n, d, 0, h, hd);
        let k = head_slice(qkv, n, d, 1, h, hd);
        let v = head_slice(qkv, n, d, 2, h, hd);
        let p = &probs[h * n * n..(h + 1) * n * n];
        let mut dh = Vec::with_capacity(n * hd);
        for i in 0..n {
            dh.extend_from_slice(&dout[i * d + h * hd..i * d + (h + 1) * hd]);
        }
        gemm(n, hd, n, 1.0, &dh, false, &v, true, 0.0, &mut dp);
        gemm(n, n, hd, 1.0, p, true, &dh, false, 0.0, &mut dv);
        // softmax backward, then the 1/sqrt(hd) scale
        for i in 0..n {
            let pr = &p[i * n..(i + 1) * n];
            let dr = &mut dp[i * n..(i + 1) * n];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot) * scale;
            }
        }
        gemm(n, n, hd, 1.0, &dp, false, &k, false, 0.0, &mut dq);
        gemm(n, n, hd, 1.0, &dp, true, &q, false, 0.0, &mut dk);
        for i in 0..n {
            for (part, src) in [(0, &dq), (1, &dk), (2, &dv)] {
                let base = i * 3 * d + part * d + h * hd;
                dqkv[base..base + hd].copy_from_slice(&src[i * hd..(i + 1) * hd]);
            }
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            max_positions: 6,
            embed_dim: 4,
            num_blocks: 2,
            num_heads: 2,
            ffn_dim: 8,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn zero_network_is_uniform() {
        let p = ModelParams::zeros(&tiny());
        let logits = p.forward(&[1, 2, 3]).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let dist = p.next_token_distribution(&[4]).unwrap();
        assert!(dist.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
        let (loss, _) = p.lm_loss(&[1, 2, 3, 4]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        let p = ModelParams::zeros(&tiny());
        assert!(matches!(p.forward(&[]), Err(ModelError::Empty)));
        assert!(matches!(p.forward(&[7]), Err(ModelError::TokenOutOfRange { token: 7, .. })));
        assert!(matches!(p.forward(&[0; 7]), Err(ModelError::TooLong { .. })));
        assert!(matches!(p.lm_loss(&[3]), Err(ModelError::NothingToPredict(1))));
    }

    #[test]
    fn layout_covers_buffer_exactly() {
        let cfg = tiny();
        let p = ModelParams::zeros(&cfg);
        let mut next = 0;
        for t in Tensor::all(&cfg) {
            let r = p.range(t);
            assert_eq!(r.start, next, "{}", t.name());
            next = r.end;
        }
        assert_eq!(next, p.num_parameters());
    }

    #[test]
    fn residual_projections_use_scaled_init() {
        let cfg = ModelConfig::new(50, 20);
        let p = ModelParams::init(&cfg, 1);
        let std = |t: Tensor| {
            let s = p.tensor(t);
            (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt()
        };
        let target = 0.02 / (2.0 * cfg.num_blocks as f64).sqrt();
        for l in 0..cfg.num_blocks {
            assert!((std(Tensor::AttnProjWeight(l)) / target - 1.0).abs() < 0.05);
            assert!((std(Tensor::FcProjWeight(l)) / target - 1.0).abs() < 0.05);
            assert!((std(Tensor::QkvWeight(l)) / 0.02 - 1.0).abs() < 0.05);
            assert!(p.tensor(Tensor::AttnNormGain(l)).iter().all(|&g| g == 1.0));
            assert!(p.tensor(Tensor::QkvBias(l)).iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn distribution_matches_last_row_of_forward() {
        let p = ModelParams::random(&tiny(), 3, 0.5);
        let seq = [1, 5, 2, 2];
        let logits = p.forward(&seq).unwrap();
        let mut last = logits[3 * 7..].to_vec();
        softmax_in_place(&mut last);
        let dist = p.next_token_distribution(&seq).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in last.iter().zip(&dist) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip_at_f32_precision() {
        let p = ModelParams::random(&tiny(), 9, 0.3);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = ModelParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(q.config(), p.config());
        for (a, b) in p.data.iter().zip(&q.data) {
            assert_eq!(*b, *a as f32 as f64);
        }
        let mut bad = buf.clone();
        bad[40] ^= 0xff;
        assert!(ModelParams::read_checkpoint(&bad[..]).is_err());
    }

    #[test]
    fn dropout_changes_training_pass_only() {
        let mut cfg = tiny();
        cfg.dropout_rate = 0.5;
        let p = ModelParams::random(&cfg, 2, 0.5);
        let seq = [1, 2, 3, 4];
        let mut g = ModelParams::zeros(&cfg);
        let clean = p.accumulate_lm_gradient(&seq, 1.0, &mut g, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noisy = p.accumulate_lm_gradient(&seq, 1.0, &mut g, Some(&mut rng)).unwrap();
        assert!((clean - noisy).abs() > 1e-9);
        assert_eq!(p.forward(&seq).unwrap(), p.forward(&seq).unwrap());
    }

    #[test]
    fn gelu_gradient_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
