//! Named-parameter visitation shared by layers, optimizers, and checkpoints.
//!
//! A model's trainable tensors are walked in a fixed order with stable names.
//! Gradients reuse the same struct type as parameters, so a params/grads pair
//! always visits in lockstep.

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Borrowed view of one named tensor.
pub enum ParamRef<'a, F> {
    Vector(&'a Array1<F>),
    Matrix(&'a Array2<F>),
}

/// Mutable view of one named tensor.
pub enum ParamMut<'a, F> {
    Vector(&'a mut Array1<F>),
    Matrix(&'a mut Array2<F>),
}

impl<F: Scalar> ParamRef<'_, F> {
    pub fn len(&self) -> usize {
        match self {
            ParamRef::Vector(v) => v.len(),
            ParamRef::Matrix(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            ParamRef::Vector(v) => vec![v.len()],
            ParamRef::Matrix(m) => vec![m.nrows(), m.ncols()],
        }
    }

    /// Elements in standard (row-major) order.
    pub fn iter(&self) -> Box<dyn Iterator<Item = F> + '_> {
        match self {
            ParamRef::Vector(v) => Box::new(v.iter().copied()),
            ParamRef::Matrix(m) => Box::new(m.iter().copied()),
        }
    }
}

impl<F: Scalar> ParamMut<'_, F> {
    pub fn len(&self) -> usize {
        match self {
            ParamMut::Vector(v) => v.len(),
            ParamMut::Matrix(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A set of named tensors visited in a fixed, deterministic order.
pub trait ParamSet<F: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamRef<'_, F>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>));
}

/// Total number of scalar parameters.
pub fn param_count<F: Scalar>(set: &impl ParamSet<F>) -> usize {
    let mut n = 0;
    set.visit(&mut |_, p| n += p.len());
    n
}

/// Parameters flattened in visit order.
pub fn flatten<F: Scalar>(set: &impl ParamSet<F>) -> Vec<F> {
    let mut out = Vec::new();
    set.visit(&mut |_, p| out.extend(p.iter()));
    out
}

/// Loads a flat vector produced by [`flatten`] back into the set.
pub fn load_flat<F: Scalar>(set: &mut impl ParamSet<F>, flat: &[F]) -> Result<()> {
    let expected = param_count(set);
    if flat.len() != expected {
        return Err(Error::Validation(format!(
            "flat parameter vector has {} elements, set holds {expected}",
            flat.len()
        )));
    }
    let mut offset = 0;
    set.visit_mut(&mut |_, p| match p {
        ParamMut::Vector(v) => {
            for x in v.iter_mut() {
                *x = flat[offset];
                offset += 1;
            }
        }
        ParamMut::Matrix(m) => {
            for x in m.iter_mut() {
                *x = flat[offset];
                offset += 1;
            }
        }
    });
    Ok(())
}

/// Overwrites one element at flat index `i` (visit order), returning the old
/// value. Used by the finite-difference harness.
pub fn set_flat_element<F: Scalar>(set: &mut impl ParamSet<F>, i: usize, value: F) -> F {
    let mut offset = 0;
    let mut old = F::zero();
    set.visit_mut(&mut |_, p| {
        let len = match &p {
            ParamMut::Vector(v) => v.len(),
            ParamMut::Matrix(m) => m.len(),
        };
        if i >= offset && i < offset + len {
            let local = i - offset;
            match p {
                ParamMut::Vector(v) => {
                    old = v[local];
                    v[local] = value;
                }
                ParamMut::Matrix(m) => {
                    let cols = m.ncols();
                    old = m[(local / cols, local % cols)];
                    m[(local / cols, local % cols)] = value;
                }
            }
        }
        offset += len;
    });
    old
}

/// Name of the tensor owning flat index `i`, for gradient-check reports.
pub fn name_of_flat_index<F: Scalar>(set: &impl ParamSet<F>, i: usize) -> String {
    let mut offset = 0;
    let mut found = String::from("<out of range>");
    set.visit(&mut |name, p| {
        let len = p.len();
        if i >= offset && i < offset + len {
            found = format!("{name}[{}]", i - offset);
        }
        offset += len;
    });
    found
}

/// Sets every tensor in the set to zero (for fresh gradient accumulators).
pub fn zero_params<F: Scalar>(set: &mut impl ParamSet<F>) {
    set.visit_mut(&mut |_, p| match p {
        ParamMut::Vector(v) => v.fill(F::zero()),
        ParamMut::Matrix(m) => m.fill(F::zero()),
    });
}

/// `dst += scale * src`, pairing tensors by visit order (names must agree).
pub fn accumulate_scaled<F: Scalar, P: ParamSet<F>>(dst: &mut P, src: &P, scale: F) {
    let mut flat = Vec::new();
    src.visit(&mut |name, p| flat.push((name.to_string(), p.iter().collect::<Vec<F>>())));
    let mut i = 0;
    dst.visit_mut(&mut |name, p| {
        let (src_name, values) = &flat[i];
        debug_assert_eq!(name, src_name, "param visit order mismatch");
        match p {
            ParamMut::Vector(v) => {
                for (x, &s) in v.iter_mut().zip(values.iter()) {
                    *x += scale * s;
                }
            }
            ParamMut::Matrix(m) => {
                for (x, &s) in m.iter_mut().zip(values.iter()) {
                    *x += scale * s;
                }
            }
        }
        i += 1;
    });
}

/// Multiplies every parameter by `scale` in place.
pub fn scale_params<F: Scalar>(set: &mut impl ParamSet<F>, scale: F) {
    set.visit_mut(&mut |_, p| match p {
        ParamMut::Vector(v) => v.mapv_inplace(|x| x * scale),
        ParamMut::Matrix(m) => m.mapv_inplace(|x| x * scale),
    });
}

/// Errors when any parameter is non-finite.
pub fn check_finite<F: Scalar>(set: &impl ParamSet<F>, what: &str) -> Result<()> {
    let mut bad: Option<String> = None;
    set.visit(&mut |name, p| {
        if bad.is_none() && p.iter().any(|v| !v.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::Numeric(format!("non-finite value in {what} tensor {name}"))),
        None => Ok(()),
    }
}

/// SHA-256 over names, shapes, and little-endian `f64` element bytes.
/// Stable across runs; used to verify the frozen-augmentor contract.
pub fn param_hash<F: Scalar>(set: &impl ParamSet<F>) -> [u8; 32] {
    let mut hasher = Sha256::new();
    set.visit(&mut |name, p| {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for d in p.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in p.iter() {
            hasher.update(v.to_f64_lossy().to_le_bytes());
        }
    });
    hasher.finalize().into()
}

/// Hex rendering of [`param_hash`].
pub fn param_hash_hex<F: Scalar>(set: &impl ParamSet<F>) -> String {
    param_hash(set).iter().map(|b| format!("{b:02x}")).collect()
}
