//! Dataset bundles in the MLOM container.
//!
//! Tensors: `meta/split_seed` (u64 halves), `meta/image` = `[channels, side]`,
//! `u` and `{tr,val}/images` of shape `[n, channels, side, side]`,
//! `{tr,val}/labels` of shape `[n]`, and `meta/informative` when the bundle
//! is synthetic.

use crate::data::{DatasetBundle, Image, LabeledImage};
use crate::error::{Error, Result};
use crate::io::container::{decode, encode, u64_tensor, Entries};
use crate::tensor::Tensor;

fn bad(reason: String) -> Error {
    Error::Decode {
        what: "dataset bundle",
        reason,
    }
}

fn stack(images: &[&Image], channels: usize, side: usize) -> Tensor {
    let data = images.iter().flat_map(|i| i.pixels.iter().copied()).collect();
    Tensor::new(vec![images.len(), channels, side, side], data).unwrap()
}

fn index_tensor(v: &[usize]) -> Tensor {
    Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).unwrap()
}

fn indices(name: &str, t: &Tensor) -> Result<Vec<usize>> {
    if t.shape().len() != 1 {
        return Err(bad(format!("{name} must be rank 1")));
    }
    t.data()
        .iter()
        .map(|&x| {
            if (0.0..=1e9).contains(&x) && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(bad(format!("{name}: {x} is not an index")))
            }
        })
        .collect()
}

pub fn bundle_to_bytes(b: &DatasetBundle) -> Result<Vec<u8>> {
    let first = b
        .d_u
        .first()
        .or(b.d_tr.first().map(|x| &x.image))
        .ok_or_else(|| Error::config("cannot store an empty bundle"))?;
    let (c, s) = (first.channels, first.side);
    let all = b.d_u.iter().chain(b.d_tr.iter().chain(&b.d_val).map(|x| &x.image));
    if all.clone().any(|i| i.channels != c || i.side != s) {
        return Err(Error::config("bundle images differ in size"));
    }
    let mut out = vec![
        ("meta/split_seed".to_string(), u64_tensor(b.split_seed)),
        ("meta/image".to_string(), index_tensor(&[c, s])),
        ("u".to_string(), stack(&b.d_u.iter().collect::<Vec<_>>(), c, s)),
    ];
    for (tag, items) in [("tr", &b.d_tr), ("val", &b.d_val)] {
        let imgs: Vec<&Image> = items.iter().map(|x| &x.image).collect();
        let labels: Vec<usize> = items.iter().map(|x| x.label).collect();
        out.push((format!("{tag}/images"), stack(&imgs, c, s)));
        out.push((format!("{tag}/labels"), index_tensor(&labels)));
    }
    if let Some(inf) = &b.informative_set {
        out.push(("meta/informative".to_string(), index_tensor(inf)));
    }
    Ok(encode(&out))
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<DatasetBundle> {
    let items = decode(bytes)?;
    let has_informative = items.iter().any(|(n, _)| n == "meta/informative");
    let mut e = Entries::new(items)?;
    let split_seed = e.take_u64("meta/split_seed")?;
    let (c, s) = match indices("meta/image", &e.take("meta/image")?)?.as_slice() {
        &[c, s] if c > 0 && s > 0 => (c, s),
        _ => return Err(bad("meta/image must be [channels, side]".into())),
    };
    let unstack = |name: &str, t: Tensor| -> Result<Vec<Image>> {
        match t.shape() {
            &[_, tc, ts, ts2] if tc == c && ts == s && ts2 == s => t
                .data()
                .chunks_exact(c * s * s)
                .map(|px| Image::new(c, s, px.to_vec()))
                .collect(),
            other => Err(bad(format!("{name}: shape {other:?} is not [n, {c}, {s}, {s}]"))),
        }
    };
    let d_u = unstack("u", e.take("u")?)?;
    let mut labeled = |tag: &str| -> Result<Vec<LabeledImage>> {
        let imgs = unstack(tag, e.take(&format!("{tag}/images"))?)?;
        let labels = indices(tag, &e.take(&format!("{tag}/labels"))?)?;
        if labels.len() != imgs.len() {
            return Err(bad(format!("{tag}: {} images but {} labels", imgs.len(), labels.len())));
        }
        Ok(imgs
            .into_iter()
            .zip(labels)
            .map(|(image, label)| LabeledImage { image, label })
            .collect())
    };
    let d_tr = labeled("tr")?;
    let d_val = labeled("val")?;
    let informative_set = if has_informative {
        Some(indices("meta/informative", &e.take("meta/informative")?)?)
    } else {
        None
    };
    e.finish()?;
    Ok(DatasetBundle {
        d_u,
        d_tr,
        d_val,
        split_seed,
        informative_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    #[test]
    fn synthetic_bundle_round_trip() {
        let spec = SynthSpec {
            per_class: 5,
            ..SynthSpec::default()
        };
        let b = synth_generate(&spec, 3).unwrap();
        let bytes = bundle_to_bytes(&b).unwrap();
        let back = bundle_from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(bundle_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn label_count_must_match() {
        let spec = SynthSpec {
            per_class: 5,
            ..SynthSpec::default()
        };
        let b = synth_generate(&spec, 3).unwrap();
        let mut items = decode(&bundle_to_bytes(&b).unwrap()).unwrap();
        let i = items.iter().position(|(n, _)| n == "tr/labels").unwrap();
        items[i].1 = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(bundle_from_bytes(&encode(&items)).is_err());
    }
}
