//! Decoder checked against a dense nalgebra re-derivation, finite
//! differences and a causality probe.

use gptrec::model::{ModelConfig, ModelParams, Tensor};
use nalgebra::{DMatrix, RowDVector};

fn mat(p: &ModelParams, t: Tensor) -> DMatrix<f64> {
    let (r, c) = t.shape(p.config());
    DMatrix::from_row_slice(r, c, p.tensor(t))
}

fn row(p: &ModelParams, t: Tensor) -> RowDVector<f64> {
    RowDVector::from_row_slice(p.tensor(t))
}

fn norm(x: &DMatrix<f64>, g: &RowDVector<f64>, b: &RowDVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for i in 0..x.nrows() {
        let r = x.row(i);
        let mu = r.mean();
        let var = r.map(|v| (v - mu).powi(2)).mean();
        for j in 0..x.ncols() {
            out[(i, j)] = (x[(i, j)] - mu) / (var + 1e-5).sqrt() * g[j] + b[j];
        }
    }
    out
}

fn add_bias(mut x: DMatrix<f64>, b: &RowDVector<f64>) -> DMatrix<f64> {
    for mut r in x.row_iter_mut() {
        r += b;
    }
    x
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Whole-sequence logits recomputed with dense matrices.
fn reference_logits(p: &ModelParams, tokens: &[u32]) -> DMatrix<f64> {
    let cfg = p.config();
    let (n, d, h) = (tokens.len(), cfg.embed_dim, cfg.num_heads);
    let hd = d / h;
    let wte = mat(p, Tensor::TokenEmbedding);
    let wpe = mat(p, Tensor::PositionEmbedding);
    let mut x = DMatrix::from_fn(n, d, |i, j| wte[(tokens[i] as usize, j)] + wpe[(i, j)]);
    for l in 0..cfg.num_blocks {
        let a = norm(&x, &row(p, Tensor::AttnNormGain(l)), &row(p, Tensor::AttnNormShift(l)));
        let qkv = add_bias(&a * mat(p, Tensor::QkvWeight(l)), &row(p, Tensor::QkvBias(l)));
        let mut heads = DMatrix::zeros(n, d);
        for hh in 0..h {
            let q = qkv.columns(hh * hd, hd);
            let k = qkv.columns(d + hh * hd, hd);
            let v = qkv.columns(2 * d + hh * hd, hd);
            let mut s = q * k.transpose() / (hd as f64).sqrt();
            for i in 0..n {
                let m = (0..=i).map(|j| s[(i, j)]).fold(f64::MIN, f64::max);
                let z: f64 = (0..=i).map(|j| (s[(i, j)] - m).exp()).sum();
                for j in 0..n {
                    s[(i, j)] = if j <= i { (s[(i, j)] - m).exp() / z } else { 0.0 };
                }
            }
            heads.columns_mut(hh * hd, hd).copy_from(&(s * v));
        }
        x += add_bias(heads * mat(p, Tensor::AttnProjWeight(l)), &row(p, Tensor::AttnProjBias(l)));
        let b = norm(&x, &row(p, Tensor::FfnNormGain(l)), &row(p, Tensor::FfnNormShift(l)));
        let hidden = add_bias(b * mat(p, Tensor::FcWeight(l)), &row(p, Tensor::FcBias(l))).map(gelu);
        x += add_bias(hidden * mat(p, Tensor::FcProjWeight(l)), &row(p, Tensor::FcProjBias(l)));
    }
    norm(&x, &row(p, Tensor::FinalNormGain), &row(p, Tensor::FinalNormShift)) * wte.transpose()
}

fn reference_loss(p: &ModelParams, tokens: &[u32]) -> f64 {
    let logits = reference_logits(p, tokens);
    let n = tokens.len();
    let mut total = 0.0;
    for i in 0..n - 1 {
        let r = logits.row(i);
        let m = r.max();
        let lse = m + r.map(|v| (v - m).exp()).sum().ln();
        total += lse - r[tokens[i + 1] as usize];
    }
    total / (n - 1) as f64
}

fn config(vocab: usize, d: usize, blocks: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        max_positions: 8,
        embed_dim: d,
        num_blocks: blocks,
        num_heads: heads,
        ffn_dim: 4 * d,
        dropout_rate: 0.0,
    }
}

#[test]
fn one_block_logits_match_dense_reference() {
    let cfg = config(5, 4, 1, 2);
    for seed in [0, 1, 2] {
        let p = ModelParams::random(&cfg, seed, 0.5);
        let tokens = [1, 2, 3];
        let got = p.forward(&tokens).unwrap();
        let want = reference_logits(&p, &tokens);
        for i in 0..3 {
            for j in 0..5 {
                let g = got[i * 5 + j];
                assert!((g - want[(i, j)]).abs() < 1e-5, "({i},{j}): {g} vs {}", want[(i, j)]);
            }
        }
    }
}

#[test]
fn deeper_model_matches_dense_reference() {
    let p = ModelParams::random(&config(13, 12, 3, 3), 4, 0.3);
    let tokens = [0, 12, 5, 5, 7, 1, 3];
    let got = p.forward(&tokens).unwrap();
    let want = reference_logits(&p, &tokens);
    for (i, r) in got.chunks(13).enumerate() {
        for (j, g) in r.iter().enumerate() {
            assert!((g - want[(i, j)]).abs() < 1e-9);
        }
    }
    let (loss, _) = p.lm_loss(&tokens).unwrap();
    assert!((loss - reference_loss(&p, &tokens)).abs() < 1e-10);
}

#[test]
fn gradients_match_central_differences() {
    let cfg = config(11, 8, 1, 2);
    let tokens = [3, 7, 1, 10, 0, 7];
    let h = 1e-4;
    for seed in [11, 12, 13] {
        let p = ModelParams::random(&cfg, seed, 0.4);
        let (_, grads) = p.lm_loss(&tokens).unwrap();
        let mut worst: (f64, String) = (0.0, String::new());
        for t in Tensor::all(&cfg) {
            let range = p.range(t);
            for idx in range.clone() {
                let mut plus = p.clone();
                plus.data[idx] += h;
                let mut minus = p.clone();
                minus.data[idx] -= h;
                let numeric = (plus.lm_loss(&tokens).unwrap().0 - minus.lm_loss(&tokens).unwrap().0) / (2.0 * h);
                let analytic = grads.data[idx];
                // absolute floor: entries whose true gradient is ~0 (unused
                // position rows) are judged on absolute error instead
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                if rel > worst.0 {
                    worst = (rel, format!("{}[{}]: {analytic} vs {numeric}", t.name(), idx - range.start));
                }
            }
        }
        assert!(worst.0 < 1e-3, "seed {seed}: worst relative error {} at {}", worst.0, worst.1);
    }
}

#[test]
fn perturbing_a_token_leaves_earlier_logits_bit_identical() {
    let cfg = config(9, 8, 2, 2);
    let p = ModelParams::random(&cfg, 21, 0.5);
    let base = [1, 4, 2, 8, 0, 3];
    let ref_logits = p.forward(&base).unwrap();
    for j in 0..base.len() {
        let mut alt = base;
        alt[j] = (alt[j] + 5) % 9;
        let logits = p.forward(&alt).unwrap();
        assert_eq!(ref_logits[..j * 9], logits[..j * 9], "position {j}");
        assert_ne!(ref_logits[j * 9..(j + 1) * 9], logits[j * 9..(j + 1) * 9]);
    }
}
