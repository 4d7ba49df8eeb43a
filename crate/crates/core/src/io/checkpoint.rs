//! Checkpoints: the full training state in an MLOM container.
//!
//! Tensor names: `meta/seed`, `meta/step`, `meta/cursor_{u,tr,val}` (u64
//! halves), `meta/dims` (the ten [`ModelDims`] fields), `<R>/<param>` for
//! each role tag `R`, and `opt/<R>/{m,v}/<param>`, `opt/<R>/t`.

use std::path::Path;

use crate::engine::{Cursors, Models, Optims, TrainState};
use crate::error::{Error, Result};
use crate::io::container::{decode, encode, u64_tensor, Entries};
use crate::nn::ModelDims;
use crate::optim::OptState;
use crate::params::{ParamSet, Role};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub dims: ModelDims,
    pub state: TrainState,
}

fn dims_tensor(d: &ModelDims) -> Tensor {
    let v = [
        d.image_side,
        d.channels,
        d.patch_size,
        d.emb_dim,
        d.dec_dim,
        d.enc_blocks,
        d.dec_blocks,
        d.heads,
        d.num_classes,
        d.mask_hidden,
    ];
    Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).unwrap()
}

fn tensor_dims(t: &Tensor) -> Result<ModelDims> {
    let bad = || Error::Decode {
        what: "checkpoint",
        reason: "meta/dims must hold ten small non-negative integers".into(),
    };
    if t.shape() != [10] {
        return Err(bad());
    }
    let mut v = [0usize; 10];
    for (slot, &x) in v.iter_mut().zip(t.data()) {
        if !(0.0..=65536.0).contains(&x) || x.fract() != 0.0 {
            return Err(bad());
        }
        *slot = x as usize;
    }
    let d = ModelDims {
        image_side: v[0],
        channels: v[1],
        patch_size: v[2],
        emb_dim: v[3],
        dec_dim: v[4],
        enc_blocks: v[5],
        dec_blocks: v[6],
        heads: v[7],
        num_classes: v[8],
        mask_hidden: v[9],
    };
    d.validate()?;
    Ok(d)
}

fn mismatch(name: &str, want: &[usize], got: &[usize]) -> Error {
    Error::Decode {
        what: "checkpoint",
        reason: format!("{name}: expected shape {want:?}, found {got:?}"),
    }
}

/// Replaces every tensor of `layout` with the stored one of the same shape.
fn fill(entries: &mut Entries, prefix: &str, layout: &ParamSet) -> Result<Vec<Tensor>> {
    layout
        .iter()
        .map(|(n, t)| {
            let name = format!("{prefix}/{n}");
            let got = entries.take(&name)?;
            if got.shape() != t.shape() {
                return Err(mismatch(&name, t.shape(), got.shape()));
            }
            Ok(got)
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut out = vec![
            ("meta/seed".to_string(), u64_tensor(self.seed)),
            ("meta/step".to_string(), u64_tensor(s.step)),
            ("meta/cursor_u".to_string(), u64_tensor(s.cursors.u)),
            ("meta/cursor_tr".to_string(), u64_tensor(s.cursors.tr)),
            ("meta/cursor_val".to_string(), u64_tensor(s.cursors.val)),
            ("meta/dims".to_string(), dims_tensor(&self.dims)),
        ];
        for role in Role::ALL {
            let tag = role.tag();
            let p = s.models.get(role);
            for (n, t) in p.iter() {
                out.push((format!("{tag}/{n}"), t.clone()));
            }
            let o = optim(&s.opt, role);
            for (kind, ts) in [("m", &o.m), ("v", &o.v)] {
                for (n, t) in p.names().iter().zip(ts) {
                    out.push((format!("opt/{tag}/{kind}/{n}"), t.clone()));
                }
            }
            out.push((format!("opt/{tag}/t"), u64_tensor(o.t)));
        }
        encode(&out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut e = Entries::new(decode(bytes)?)?;
        let seed = e.take_u64("meta/seed")?;
        let step = e.take_u64("meta/step")?;
        let cursors = Cursors {
            u: e.take_u64("meta/cursor_u")?,
            tr: e.take_u64("meta/cursor_tr")?,
            val: e.take_u64("meta/cursor_val")?,
        };
        let dims = tensor_dims(&e.take("meta/dims")?)?;
        let mut models = Models::init(&dims, 0);
        let mut opt = Optims::new(&models);
        for role in Role::ALL {
            let tag = role.tag();
            let layout = models.get(role).clone();
            let loaded = fill(&mut e, tag, &layout)?;
            let m = fill(&mut e, &format!("opt/{tag}/m"), &layout)?;
            let v = fill(&mut e, &format!("opt/{tag}/v"), &layout)?;
            let t = e.take_u64(&format!("opt/{tag}/t"))?;
            models.get_mut(role).tensors_mut().clone_from_slice(&loaded);
            *optim_mut(&mut opt, role) = OptState { m, v, t };
        }
        e.finish()?;
        Ok(Checkpoint {
            seed,
            dims,
            state: TrainState {
                models,
                opt,
                step,
                cursors,
            },
        })
    }

    /// Writes atomically: a sibling temporary file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn optim(o: &Optims, role: Role) -> &OptState {
    match role {
        Role::Encoder => &o.e,
        Role::Decoder => &o.d,
        Role::Head => &o.c,
        Role::Masker => &o.t,
    }
}

fn optim_mut(o: &mut Optims, role: Role) -> &mut OptState {
    match role {
        Role::Encoder => &mut o.e,
        Role::Decoder => &mut o.d,
        Role::Head => &mut o.c,
        Role::Masker => &mut o.t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::oracle::toy_dims;

    fn sample() -> Checkpoint {
        let dims = toy_dims();
        let mut state = TrainState::init(&dims, 7);
        state.step = 12;
        state.cursors = Cursors { u: 24, tr: 12, val: u64::MAX };
        state.opt.t.t = 3;
        state.opt.e.m[0].data_mut()[0] = -0.25;
        Checkpoint {
            seed: 0xdead_beef_0000_0001,
            dims,
            state,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
        assert!(!p.with_extension("tmp").exists());
    }

    #[test]
    fn layout_errors_are_reported() {
        let c = sample();
        let mut entries = decode(&c.to_bytes()).unwrap();
        let last = entries.pop().unwrap();
        assert!(Checkpoint::from_bytes(&encode(&entries)).is_err());
        entries.push(last.clone());
        entries.push(last);
        assert!(Checkpoint::from_bytes(&encode(&entries)).is_err());
        let mut entries = decode(&c.to_bytes()).unwrap();
        let i = entries.iter().position(|(n, _)| n.starts_with("E/")).unwrap();
        entries[i].1 = Tensor::zeros(&[1]);
        let err = Checkpoint::from_bytes(&encode(&entries)).unwrap_err().to_string();
        assert!(err.contains("expected shape"), "{err}");
    }
}
