//! Forward passes for the masking network, the asymmetric encoder/decoder and
//! the linear classification head. All take parameters already bound to a tape.

use crate::error::{Error, Result};
use crate::nn::ModelDims;
use crate::params::Bound;
use crate::tape::{Reduce, Tape, Var};

pub const LN_EPS: f64 = 1e-6;

fn linear(tape: &mut Tape<'_>, p: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{prefix}.w")))?;
    tape.add_rows(y, p.var(&format!("{prefix}.b")))
}

fn layer_norm(tape: &mut Tape<'_>, p: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{prefix}.g"));
    let b = p.var(&format!("{prefix}.b"));
    tape.layer_norm(x, g, b, LN_EPS)
}

fn attention(
    tape: &mut Tape<'_>,
    p: &Bound<'_>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(x).last_dim();
    let hd = d / heads;
    let q = linear(tape, p, &format!("{prefix}.q"), x)?;
    let k = linear(tape, p, &format!("{prefix}.k"), x)?;
    let v = linear(tape, p, &format!("{prefix}.v"), x)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow_cols(q, h * hd, hd)?;
        let kh = tape.narrow_cols(k, h * hd, hd)?;
        let vh = tape.narrow_cols(v, h * hd, hd)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    linear(tape, p, &format!("{prefix}.o"), merged)
}

/// Pre-LN transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn block_forward(
    tape: &mut Tape<'_>,
    p: &Bound<'_>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let h = layer_norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let a = attention(tape, p, &format!("{prefix}.attn"), h, heads)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, p, &format!("{prefix}.ln2"), x)?;
    let h = linear(tape, p, &format!("{prefix}.mlp.fc1"), h)?;
    let h = tape.relu(h);
    let h = linear(tape, p, &format!("{prefix}.mlp.fc2"), h)?;
    tape.add(x, h)
}

/// Per-patch masking probabilities `σ(P_i, X; T)`, shape `[N]`.
pub fn masking_net_forward(
    tape: &mut Tape<'_>,
    t: &Bound<'_>,
    dims: &ModelDims,
    grid: Var,
) -> Result<Var> {
    let n = dims.num_patches();
    let emb = linear(tape, t, "patch", grid)?;
    let flat = tape.reshape(emb, &[1, n * dims.emb_dim])?;
    let h = linear(tape, t, "fc1", flat)?;
    let h = tape.relu(h);
    let logits = linear(tape, t, "fc2", h)?;
    let probs = tape.sigmoid(logits);
    tape.reshape(probs, &[n])
}

/// Encodes the visible patch rows (`[|visible| × patch_pixels]`) whose grid
/// positions are `visible_idx`. Masked patches never reach the encoder.
pub fn encoder_forward(
    tape: &mut Tape<'_>,
    e: &Bound<'_>,
    dims: &ModelDims,
    visible: Var,
    visible_idx: &[usize],
) -> Result<Var> {
    if visible_idx.is_empty() {
        return Err(Error::EmptyVisible);
    }
    let rows = tape.value(visible).shape()[0];
    if rows != visible_idx.len() {
        return Err(Error::shape(
            "encoder_forward",
            tape.value(visible).shape(),
            &[visible_idx.len()],
        ));
    }
    let x = linear(tape, e, "patch", visible)?;
    let pos = tape.gather_rows(e.var("pos"), visible_idx)?;
    let mut x = tape.add(x, pos)?;
    for i in 0..dims.enc_blocks {
        x = block_forward(tape, e, &format!("blocks.{i}"), x, dims.heads)?;
    }
    layer_norm(tape, e, "norm", x)
}

/// Predicts pixels of the masked patches, rows in `masked_idx` order.
pub fn decoder_forward(
    tape: &mut Tape<'_>,
    d: &Bound<'_>,
    dims: &ModelDims,
    enc_tokens: Var,
    visible_idx: &[usize],
    masked_idx: &[usize],
) -> Result<Var> {
    let n = dims.num_patches();
    if masked_idx.is_empty() {
        return Err(Error::config("decoder needs at least one masked patch"));
    }
    // slot[p] = row of [projected visible tokens; mask token] placed at position p
    let mut slot = vec![usize::MAX; n];
    for (j, &p) in visible_idx.iter().enumerate() {
        if p >= n || slot[p] != usize::MAX {
            return Err(Error::NotAPartition { num_patches: n });
        }
        slot[p] = j;
    }
    for &p in masked_idx {
        if p >= n || slot[p] != usize::MAX {
            return Err(Error::NotAPartition { num_patches: n });
        }
        slot[p] = visible_idx.len();
    }
    if slot.contains(&usize::MAX) {
        return Err(Error::NotAPartition { num_patches: n });
    }
    let proj = linear(tape, d, "embed", enc_tokens)?;
    let table = tape.concat_rows(&[proj, d.var("mask_token")])?;
    let full = tape.gather_rows(table, &slot)?;
    let mut x = tape.add(full, d.var("pos"))?;
    for i in 0..dims.dec_blocks {
        x = block_forward(tape, d, &format!("blocks.{i}"), x, dims.heads)?;
    }
    let x = layer_norm(tape, d, "norm", x)?;
    let pred = linear(tape, d, "pred", x)?;
    tape.gather_rows(pred, masked_idx)
}

/// Mean-pools tokens and applies the single linear layer; logits `[K]`.
pub fn head_forward(tape: &mut Tape<'_>, c: &Bound<'_>, enc_tokens: Var) -> Result<Var> {
    let pooled = tape.reduce(Reduce::Mean, enc_tokens, Some(0))?;
    let d = tape.value(pooled).numel();
    let row = tape.reshape(pooled, &[1, d])?;
    let logits = linear(tape, c, "fc", row)?;
    let k = tape.value(logits).numel();
    tape.reshape(logits, &[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use crate::nn::{init_decoder, init_encoder, init_head, init_masker};
    use crate::params::ParamSet;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut r = rng(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random()).collect()).unwrap()
    }

    fn zeroed(mut p: ParamSet) -> ParamSet {
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    #[test]
    fn zero_masker_gives_one_half_everywhere() {
        let dims = ModelDims::default();
        let t = zeroed(init_masker(&dims, &mut rng(0)));
        let grid = random_rows(16, 16, 1);
        let mut tape = Tape::new();
        let tb = t.bind(&mut tape, false);
        let g = tape.constant(grid);
        let p = masking_net_forward(&mut tape, &tb, &dims, g).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5; 16]);
    }

    #[test]
    fn masker_output_length_is_num_patches() {
        for (side, patch) in [(8, 4), (16, 4), (28, 2)] {
            let dims = ModelDims {
                image_side: side,
                patch_size: patch,
                emb_dim: 4,
                mask_hidden: 8,
                ..ModelDims::default()
            };
            let t = init_masker(&dims, &mut rng(2));
            let mut tape = Tape::new();
            let tb = t.bind(&mut tape, false);
            let g = tape.constant(random_rows(dims.num_patches(), dims.patch_pixels(), 3));
            let p = masking_net_forward(&mut tape, &tb, &dims, g).unwrap();
            let probs = tape.value(p);
            assert_eq!(probs.shape(), &[dims.num_patches()]);
            assert!(probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(ModelDims { image_side: 28, patch_size: 2, ..ModelDims::default() }.num_patches(), 196);
    }

    #[test]
    fn encoder_without_blocks_matches_hand_computation() {
        let dims = ModelDims {
            image_side: 2,
            patch_size: 1,
            emb_dim: 2,
            dec_dim: 2,
            enc_blocks: 0,
            heads: 1,
            ..ModelDims::default()
        };
        let mut e = init_encoder(&dims, &mut rng(0));
        // patch pixel 0.5 -> embed [0.5*w0 + b0, 0.5*w1 + b1] = [1.0, -0.5], pos adds [0, 0.5]
        *e.get_mut("patch.w").unwrap() = Tensor::new(vec![1, 2], vec![2.0, -2.0]).unwrap();
        *e.get_mut("patch.b").unwrap() = Tensor::vector(vec![0.0, 0.5]);
        e.get_mut("pos").unwrap().data_mut()[2 * 3 + 1] = 0.5;
        *e.get_mut("norm.g").unwrap() = Tensor::vector(vec![2.0, 1.0]);
        *e.get_mut("norm.b").unwrap() = Tensor::vector(vec![0.0, 3.0]);
        let mut tape = Tape::new();
        let eb = e.bind(&mut tape, false);
        let vis = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let out = encoder_forward(&mut tape, &eb, &dims, vis, &[3]).unwrap();
        // token [1.0, 0.0]: mean 0.5, var 0.25 -> x̂ = [1, -1]/sqrt(1 + 4e-6)
        let s = 1.0 / (1.0f64 + 4.0 * LN_EPS).sqrt();
        let got = tape.value(out).data();
        assert!((got[0] - 2.0 * s).abs() < 1e-15);
        assert!((got[1] - (3.0 - s)).abs() < 1e-15);
    }

    #[test]
    fn encoder_is_permutation_equivariant_with_matched_positions() {
        let dims = ModelDims::default();
        let mut e = init_encoder(&dims, &mut rng(4));
        // non-zero positions so that the permutation actually matters
        let pos = random_rows(16, 32, 5);
        *e.get_mut("pos").unwrap() = pos;
        let grid = random_rows(16, 16, 6);
        let idx = [1usize, 5, 9, 14];
        let perm = [2usize, 0, 3, 1];
        let run = |order: &[usize]| {
            let sel: Vec<usize> = order.iter().map(|&i| idx[i]).collect();
            let rows = {
                let mut d = Vec::new();
                for &i in &sel {
                    d.extend_from_slice(grid.row(i));
                }
                Tensor::new(vec![4, 16], d).unwrap()
            };
            let mut tape = Tape::new();
            let eb = e.bind(&mut tape, false);
            let v = tape.constant(rows);
            let out = encoder_forward(&mut tape, &eb, &dims, v, &sel).unwrap();
            tape.value(out).clone()
        };
        let base = run(&[0, 1, 2, 3]);
        let permuted = run(&perm);
        for (r, &src) in perm.iter().enumerate() {
            for (a, b) in permuted.row(r).iter().zip(base.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(base.shape(), &[4, 32]);
    }

    #[test]
    fn encoder_rejects_empty_visible_set() {
        let dims = ModelDims::default();
        let e = init_encoder(&dims, &mut rng(0));
        let mut tape = Tape::new();
        let eb = e.bind(&mut tape, false);
        let v = tape.constant(Tensor::zeros(&[0, 16]));
        assert!(matches!(
            encoder_forward(&mut tape, &eb, &dims, v, &[]),
            Err(Error::EmptyVisible)
        ));
    }

    #[test]
    fn decoder_contract() {
        let dims = ModelDims::default();
        let d = init_decoder(&dims, &mut rng(7));
        let visible: Vec<usize> = vec![0, 3, 8, 12];
        let masked: Vec<usize> = (0..16).filter(|i| !visible.contains(i)).collect();
        let mut tape = Tape::new();
        let db = d.bind(&mut tape, false);
        let enc = tape.constant(random_rows(4, 32, 8));
        let out = decoder_forward(&mut tape, &db, &dims, enc, &visible, &masked).unwrap();
        assert_eq!(tape.value(out).shape(), &[12, 16]);

        let all: Vec<usize> = (0..16).collect();
        assert!(decoder_forward(&mut tape, &db, &dims, enc, &all[..4], &[]).is_err());
        assert!(matches!(
            decoder_forward(&mut tape, &db, &dims, enc, &visible, &masked[1..]),
            Err(Error::NotAPartition { .. })
        ));
        let mut overlapping = masked.clone();
        overlapping[0] = 0;
        assert!(decoder_forward(&mut tape, &db, &dims, enc, &visible, &overlapping).is_err());
    }

    #[test]
    fn decoder_with_zero_projection_repeats_the_mask_token_row() {
        let dims = ModelDims {
            dec_blocks: 0,
            ..ModelDims::default()
        };
        let mut d = init_decoder(&dims, &mut rng(9));
        for name in ["embed.w", "embed.b"] {
            d.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let visible = [2usize, 7, 11, 13];
        let masked: Vec<usize> = (0..16).filter(|i| !visible.contains(i)).collect();
        let mut tape = Tape::new();
        let db = d.bind(&mut tape, false);
        let enc = tape.constant(random_rows(4, 32, 10));
        let out = decoder_forward(&mut tape, &db, &dims, enc, &visible, &masked).unwrap();
        let out = tape.value(out);
        for r in 1..masked.len() {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn head_contracts() {
        let dims = ModelDims::default();
        let mut c = init_head(&dims, &mut rng(11));
        c.get_mut("fc.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        *c.get_mut("fc.b").unwrap() = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
        let mut tape = Tape::new();
        let cb = c.bind(&mut tape, false);
        let toks = tape.constant(random_rows(5, 32, 12));
        let l = head_forward(&mut tape, &cb, toks).unwrap();
        assert_eq!(tape.value(l).data(), &[1.0, -2.0, 0.5, 3.0]);

        let c = init_head(&dims, &mut rng(13));
        let toks = random_rows(3, 32, 14);
        let mut doubled = toks.data().to_vec();
        doubled.extend_from_slice(toks.data());
        let mut tape = Tape::new();
        let cb = c.bind(&mut tape, false);
        let a = tape.constant(toks);
        let b = tape.constant(Tensor::new(vec![6, 32], doubled).unwrap());
        let la = head_forward(&mut tape, &cb, a).unwrap();
        let lb = head_forward(&mut tape, &cb, b).unwrap();
        assert!(tape.value(la).max_abs_diff(tape.value(lb)).unwrap() < 1e-15);
    }

    #[test]
    fn head_with_antisymmetric_weights_on_symmetric_input() {
        let dims = ModelDims {
            emb_dim: 2,
            num_classes: 2,
            heads: 1,
            ..ModelDims::default()
        };
        let mut c = init_head(&dims, &mut rng(0));
        // column 1 is column 0 with its rows swapped; input is symmetric in its two features
        *c.get_mut("fc.w").unwrap() = Tensor::new(vec![2, 2], vec![0.7, -0.3, -0.3, 0.7]).unwrap();
        let mut tape = Tape::new();
        let cb = c.bind(&mut tape, false);
        let toks = tape.constant(Tensor::new(vec![2, 2], vec![1.5, 1.5, -0.2, -0.2]).unwrap());
        let l = head_forward(&mut tape, &cb, toks).unwrap();
        let v = tape.value(l).data();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn masker_gradient_passes_central_difference_check() {
        let dims = ModelDims {
            image_side: 4,
            patch_size: 2,
            emb_dim: 3,
            mask_hidden: 5,
            heads: 1,
            ..ModelDims::default()
        };
        let t = init_masker(&dims, &mut rng(21));
        let grid = random_rows(4, 4, 22);
        let weights = random_rows(1, 4, 23).reshape(&[4]).unwrap();
        let report = grad_check_params(
            |tape, tb| {
                let g = tape.constant(grid.clone());
                let probs = masking_net_forward(tape, tb, &dims, g)?;
                let w = tape.constant(weights.clone());
                let s = tape.mul(probs, w)?;
                Ok(tape.sum(s))
            },
            &t,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
