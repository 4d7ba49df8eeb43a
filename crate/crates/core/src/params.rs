//! Named parameter collections and their gradient maps.

use std::fmt;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Which model component a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Encoder,
    Decoder,
    Head,
    Masker,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Encoder, Role::Decoder, Role::Head, Role::Masker];

    /// Single-letter tag used in checkpoint tensor names.
    pub fn tag(self) -> &'static str {
        match self {
            Role::Encoder => "E",
            Role::Decoder => "D",
            Role::Head => "C",
            Role::Masker => "T",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// An ordered collection of named tensors for one model component.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    role: Role,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(role: Role) -> Self {
        ParamSet {
            role,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(self.position(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every tensor on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t) } else { tape.constant_ref(t) })
            .collect();
        Bound { set: self, vars }
    }

    /// `self + eps · dir`, leaving `self` untouched.
    pub fn perturbed(&self, dir: &GradMap, eps: f64) -> Result<ParamSet> {
        self.check_layout(dir)?;
        let mut out = self.clone();
        for (p, d) in out.tensors.iter_mut().zip(&dir.tensors) {
            for (x, v) in p.data_mut().iter_mut().zip(d.data()) {
                *x += eps * v;
            }
        }
        Ok(out)
    }

    pub fn check_layout(&self, g: &GradMap) -> Result<()> {
        let same = self.names == g.names
            && self
                .tensors
                .iter()
                .zip(&g.tensors)
                .all(|(a, b)| a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(Error::config(format!(
                "gradient layout does not match parameter set {}",
                self.role
            )))
        }
    }

    /// Flattened copy of all entries, in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Mutable access to the `i`-th scalar in flattened order.
    pub fn flat_mut(&mut self, mut i: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if i < t.numel() {
                return &mut t.data_mut()[i];
            }
            i -= t.numel();
        }
        panic!("flat index out of range");
    }
}

/// A [`ParamSet`] recorded on a tape.
#[derive(Debug)]
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// Tape handle for the named parameter. Panics on unknown names, which
    /// indicate a model/parameter layout bug rather than bad input.
    pub fn var(&self, name: &str) -> Var {
        match self.set.position(name) {
            Some(i) => self.vars[i],
            None => panic!("parameter {name} missing from {}", self.set.role),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient map for this set; unreached parameters get zeros.
    pub fn grads(&self, g: &Gradients) -> GradMap {
        GradMap {
            names: self.set.names.clone(),
            tensors: self.vars.iter().map(|&v| g.wrt(v)).collect(),
        }
    }
}

/// Gradients (or any direction) over a parameter set, entry shapes matching
/// the parameters one to one.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl GradMap {
    pub fn zeros_like(p: &ParamSet) -> Self {
        GradMap {
            names: p.names.clone(),
            tensors: p.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::config("gradient map names/tensors length mismatch"));
        }
        Ok(GradMap { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Adds the bound set's gradients from `g` in place.
    pub fn accumulate(&mut self, bound: &Bound<'_>, g: &Gradients) {
        for (acc, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if g.reached(v) {
                for (a, x) in acc.data_mut().iter_mut().zip(g.wrt(v).data()) {
                    *a += x;
                }
            }
        }
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: f64, other: &GradMap) {
        debug_assert_eq!(self.names, other.names);
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn scaled(&self, s: f64) -> GradMap {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    pub fn dot(&self, other: &GradMap) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    /// Global L2 norm over all entries.
    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn max_abs_diff(&self, other: &GradMap) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ParamSet {
        let mut p = ParamSet::new(Role::Head);
        p.push("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        p.push("b", Tensor::vector(vec![0.5, -0.5]));
        p
    }

    #[test]
    fn unreached_parameters_get_zero_entries() {
        let p = toy();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, true);
        let b = bound.var("b");
        let loss = tape.sum(b);
        let g = bound.grads(&tape.backward(loss).unwrap());
        assert_eq!(g.get("w").unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(g.get("b").unwrap().data(), &[1.0, 1.0]);
        p.check_layout(&g).unwrap();
    }

    #[test]
    fn perturbation_does_not_touch_the_base() {
        let p = toy();
        let before = p.clone();
        let mut dir = GradMap::zeros_like(&p);
        dir.axpy(1.0, &GradMap::from_parts(p.names().to_vec(), p.tensors().to_vec()).unwrap());
        let q = p.perturbed(&dir, 0.5).unwrap();
        assert_eq!(p, before);
        assert_eq!(q.get("w").unwrap().data(), &[1.5, 3.0, 4.5, 6.0]);
        assert!((dir.l2_norm() - (1.0f64 + 4.0 + 9.0 + 16.0 + 0.5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn flat_indexing_spans_tensors() {
        let mut p = toy();
        *p.flat_mut(4) = 9.0;
        assert_eq!(p.get("b").unwrap().data(), &[9.0, -0.5]);
        assert_eq!(p.flatten().len(), p.numel());
    }
}
