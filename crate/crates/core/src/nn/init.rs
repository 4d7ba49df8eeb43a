//! Parameter initialisation: Xavier-uniform weights, zero biases and
//! positional embeddings, unit layer-norm gains.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ModelDims;
use crate::params::{ParamSet, Role};
use crate::tensor::Tensor;

/// Xavier/Glorot bound `sqrt(6 / (fan_in + fan_out))` for an `[in × out × ..]` weight.
pub fn xavier_bound(shape: &[usize]) -> Result<f64> {
    if shape.len() < 2 {
        return Err(Error::config(format!(
            "xavier init needs a weight with >= 2 axes, got {shape:?}"
        )));
    }
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[0] * receptive;
    let fan_out = shape[1] * receptive;
    Ok((6.0 / (fan_in + fan_out) as f64).sqrt())
}

pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let b = xavier_bound(shape)?;
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-b..=b)).collect();
    Tensor::new(shape.to_vec(), data)
}

struct Builder<'r, R: Rng + ?Sized> {
    set: ParamSet,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) {
        let w = xavier_uniform(&[rows, cols], self.rng).expect("rank-2 weight");
        self.set.push(name, w);
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.set.push(name, Tensor::zeros(shape));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.weight(format!("{prefix}.w"), fan_in, fan_out);
        self.zeros(format!("{prefix}.b"), &[fan_out]);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.set.push(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
        self.zeros(format!("{prefix}.b"), &[d]);
    }

    fn block(&mut self, prefix: &str, d: usize) {
        self.layer_norm(&format!("{prefix}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.attn.{proj}"), d, d);
        }
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.linear(&format!("{prefix}.mlp.fc1"), d, MLP_RATIO * d);
        self.linear(&format!("{prefix}.mlp.fc2"), MLP_RATIO * d, d);
    }
}

/// Hidden width of transformer MLPs relative to the token width.
pub const MLP_RATIO: usize = 4;

pub fn init_encoder<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> ParamSet {
    let mut b = Builder {
        set: ParamSet::new(Role::Encoder),
        rng,
    };
    let d = dims.emb_dim;
    b.linear("patch", dims.patch_pixels(), d);
    b.zeros("pos".into(), &[dims.num_patches(), d]);
    for i in 0..dims.enc_blocks {
        b.block(&format!("blocks.{i}"), d);
    }
    b.layer_norm("norm", d);
    b.set
}

pub fn init_decoder<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> ParamSet {
    let mut b = Builder {
        set: ParamSet::new(Role::Decoder),
        rng,
    };
    let d = dims.dec_dim;
    b.linear("embed", dims.emb_dim, d);
    b.weight("mask_token".into(), 1, d);
    b.zeros("pos".into(), &[dims.num_patches(), d]);
    for i in 0..dims.dec_blocks {
        b.block(&format!("blocks.{i}"), d);
    }
    b.layer_norm("norm", d);
    b.linear("pred", d, dims.patch_pixels());
    b.set
}

pub fn init_head<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> ParamSet {
    let mut b = Builder {
        set: ParamSet::new(Role::Head),
        rng,
    };
    b.linear("fc", dims.emb_dim, dims.num_classes);
    b.set
}

pub fn init_masker<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> ParamSet {
    let mut b = Builder {
        set: ParamSet::new(Role::Masker),
        rng,
    };
    let n = dims.num_patches();
    b.linear("patch", dims.patch_pixels(), dims.emb_dim);
    b.linear("fc1", n * dims.emb_dim, dims.mask_hidden);
    b.linear("fc2", dims.mask_hidden, n);
    b.set
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bound_for_square_fan() {
        assert_eq!(xavier_bound(&[3, 3]).unwrap(), 1.0);
        assert!(xavier_bound(&[3]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = xavier_uniform(&[3, 3], &mut rng).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = xavier_uniform(&[7, 5], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = xavier_uniform(&[7, 5], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_matches_uniform_moments() {
        // mean of n uniform(-b, b) draws has std b / sqrt(3n)
        let shape = [400, 250];
        let t = xavier_uniform(&shape, &mut ChaCha8Rng::seed_from_u64(2024)).unwrap();
        let b = xavier_bound(&shape).unwrap();
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        assert!(mean.abs() <= 3.0 * b / (3.0 * n).sqrt(), "mean {mean}");
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var - b * b / 3.0).abs() < 0.02 * b * b);
    }

    #[test]
    fn masker_layout_and_zero_biases() {
        let dims = ModelDims::default();
        let t = init_masker(&dims, &mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<&str> = t.names().iter().map(String::as_str).collect();
        assert_eq!(names, ["patch.w", "patch.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"]);
        assert_eq!(t.get("fc1.w").unwrap().shape(), &[16 * 32, 64]);
        assert_eq!(t.get("fc2.w").unwrap().shape(), &[64, 16]);
        assert!(t.get("fc2.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(t.is_finite());
    }

    #[test]
    fn positional_embeddings_start_at_zero_and_mask_token_is_bounded() {
        let dims = ModelDims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = init_encoder(&dims, &mut rng);
        assert!(e.get("pos").unwrap().data().iter().all(|&v| v == 0.0));
        let d = init_decoder(&dims, &mut rng);
        let bound = (6.0 / (1 + dims.dec_dim) as f64).sqrt();
        let tok = d.get("mask_token").unwrap();
        assert!(tok.data().iter().all(|v| v.abs() <= bound));
        assert!(tok.data().iter().any(|&v| v != 0.0));
    }
}
