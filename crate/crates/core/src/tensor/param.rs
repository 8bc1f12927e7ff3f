//! Trainable parameter storage.
//!
//! Parameters outlive any single tape. They are identified by a stable name
//! (used for checkpointing and optimizer state) and carry their gradient
//! buffer after a backward pass. `ParamRef` is shared between the owning
//! module and the tape that watches it; tapes and parameters are confined to
//! one training thread.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::numel;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    /// Filled by `Tape::backward` for trainable parameters; same shape as `data`.
    pub grad: Option<Vec<f64>>,
    /// Frozen parameters (e.g. static node features) are watched as constants.
    pub trainable: bool,
}

pub type ParamRef = Rc<RefCell<Param>>;

impl Param {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: Vec<usize>) -> ParamRef {
        assert_eq!(data.len(), numel(&shape), "param data/shape mismatch");
        Rc::new(RefCell::new(Param {
            name: name.into(),
            data,
            shape,
            grad: None,
            trainable: true,
        }))
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn uniform(
        name: impl Into<String>,
        shape: &[usize],
        lo: f64,
        hi: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamRef {
        let n = numel(shape);
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Param::new(name, data, shape.to_vec())
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> ParamRef {
        Param::new(name, vec![0.0; numel(shape)], shape.to_vec())
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> ParamRef {
        Param::new(name, vec![1.0; numel(shape)], shape.to_vec())
    }

    /// Frozen copy of externally supplied data.
    pub fn frozen(name: impl Into<String>, data: Vec<f64>, shape: Vec<usize>) -> ParamRef {
        let p = Param::new(name, data, shape);
        p.borrow_mut().trainable = false;
        p
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Euclidean norm of the current values.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
