//! Dense tensors and trainable parameters.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{self, CoreRng};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(alloc::format!("zero extent in {shape:?}")));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Shape(alloc::format!(
                "shape {shape:?} needs {count} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("tensor value at {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count = shape.iter().product();
        Self { shape, data: vec![0.0; count] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut CoreRng) -> Self {
        let count: usize = shape.iter().product();
        let data = (0..count).map(|_| std * rng::normal(rng)).collect();
        Self { shape, data }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let count = shape.iter().product();
        Self { shape, data: vec![value; count] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix; 1-D tensors are one row.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.as_matrix_dims();
        &self.data[r * cols..(r + 1) * cols]
    }
}

/// A named trainable tensor with its gradient and AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Identifies which parameter set a graph leaf belongs to.
pub type SetTag = u16;

/// The parameters of one trainable component.
///
/// Each component (recommender, tokenizer, reference tokenizer, CSA head)
/// owns one set with a distinct tag; graph leaves remember the tag so
/// gradients land only in the set they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tag: SetTag,
    params: Vec<Parameter>,
    /// AdamW step counter for this set.
    pub step: u64,
}

impl ParamSet {
    pub fn new(tag: SetTag) -> Self {
        Self { tag, params: Vec::new(), step: 0 }
    }

    pub fn tag(&self) -> SetTag {
        self.tag
    }

    /// Retags a copy, e.g. to build a twin model over copied weights.
    pub fn with_tag(mut self, tag: SetTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Sum of absolute gradient entries over the whole set.
    pub fn grad_abs_sum(&self) -> f64 {
        self.params.iter().flat_map(|p| p.grad.iter()).map(|g| g.abs()).sum()
    }

    /// Copies values (not gradients or moments) from another set with the
    /// same layout.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape("parameter set layouts differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(alloc::format!("parameter {} shape differs", dst.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
