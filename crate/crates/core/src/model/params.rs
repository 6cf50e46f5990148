//! Named, partition-tagged parameter storage shared by the LM, the GNN
//! prompt encoder, and the PEFT adapters.
//!
//! Parameters live outside any tape as plain matrices/vectors. Each
//! training step binds them onto a fresh tape (trainable subsets become
//! requires_grad leaves), reads gradients back by name after the backward
//! pass, and applies optimizer updates in place.

use crate::error::Result;
use crate::rng::standard_normal;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};
use rand_chacha::ChaCha8Rng;

/// Which of the three disjoint parameter sets a tensor belongs to:
/// the frozen backbone, the adapters, or the GNN prompt encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Pre,
    Peft,
    Gnn,
}

impl Partition {
    pub fn tag(self) -> &'static str {
        match self {
            Partition::Pre => "pre",
            Partition::Peft => "peft",
            Partition::Gnn => "g",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pre" => Some(Partition::Pre),
            "peft" => Some(Partition::Peft),
            "g" => Some(Partition::Gnn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| S::c(standard_normal(rng) * std)).collect();
        Mat { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vect<S> {
    pub data: Vec<S>,
}

impl<S: Scalar> Vect<S> {
    pub fn zeros(n: usize) -> Self {
        Vect { data: vec![S::zero(); n] }
    }

    pub fn ones(n: usize) -> Self {
        Vect { data: vec![S::one(); n] }
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.data.len()]
    }
}

/// Borrowed view of one named parameter, for enumeration.
pub enum TensorRef<'a, S> {
    Mat(&'a Mat<S>),
    Vect(&'a Vect<S>),
}

impl<'a, S: Scalar> TensorRef<'a, S> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Mat(m) => m.shape(),
            TensorRef::Vect(v) => v.shape(),
        }
    }

    pub fn values(&self) -> &'a [S] {
        match self {
            TensorRef::Mat(m) => &m.data,
            TensorRef::Vect(v) => &v.data,
        }
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.values().is_empty()
    }
}

/// Enumeration of every parameter with a stable name and partition tag.
pub trait VisitParams<S: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, Partition, TensorRef<'_, S>));
    fn visit_values_mut(&mut self, f: &mut dyn FnMut(&str, Partition, &mut Vec<S>));
}

/// Registers parameters as tape leaves, remembering (name, id) so that
/// gradients can be read back after the backward pass.
pub struct Binder<'t, S: Scalar> {
    pub tape: &'t mut Tape<S>,
    pub table: Vec<(String, Partition, TensorId)>,
}

impl<'t, S: Scalar> Binder<'t, S> {
    pub fn new(tape: &'t mut Tape<S>) -> Self {
        Binder { tape, table: Vec::new() }
    }

    pub fn mat(&mut self, name: &str, m: &Mat<S>, partition: Partition, trainable: bool) -> Result<TensorId> {
        let id = self.tape.leaf(&[m.rows, m.cols], m.data.clone(), trainable)?;
        self.table.push((name.to_string(), partition, id));
        Ok(id)
    }

    pub fn vect(&mut self, name: &str, v: &Vect<S>, partition: Partition, trainable: bool) -> Result<TensorId> {
        let id = self.tape.leaf(&[v.data.len()], v.data.clone(), trainable)?;
        self.table.push((name.to_string(), partition, id));
        Ok(id)
    }
}
