//! Dense tensor type with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit floats in row-major order. A [`Tape`] records
//! operations during the forward pass and replays them in reverse to
//! accumulate gradients on leaf tensors. Model parameters live outside the
//! tape as [`Param`] values and are bound to a tape per forward pass via
//! [`Tape::watch`].

mod param;
mod tape;

pub use param::{Param, ParamRef};
pub use tape::{Tape, TensorId};

/// Product of extents; the flat buffer length of a tensor with this shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Format a shape for error messages.
pub fn fmt_shape(shape: &[usize]) -> String {
    let inner: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", inner.join("x"))
}
