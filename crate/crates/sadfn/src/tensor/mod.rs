//! Dense tensors and the reverse-mode autodiff engine.
//!
//! [`Tensor`] is a shape-tagged, row-major, heap-allocated value type that
//! optionally owns a gradient buffer. [`Graph`] is a tape of executed
//! operations over tensors; calling [`Graph::backward`] on a scalar node
//! accumulates gradients into every tensor on the path that requires them.
//!
//! Layout conventions used by the spatial operators:
//! * images/features: `[H, W, C]` or batched `[B, H, W, C]`, channels fastest;
//! * convolution weights: `[k, k, Cin, Cout]` (also for transposed
//!   convolutions, where `Cin` is the layer's input channel count);
//! * biases and batch-norm parameters: `[C]`.

pub mod adam;
pub mod gradcheck;
mod graph;
mod ops;

pub use graph::{BnMode, CustomOp, Graph, NodeId};

use crate::{Error, Real, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Dense row-major tensor with an optional gradient buffer.
///
/// The gradient, when present, always has the same number of elements as
/// the data. Gradients are accumulated (never overwritten) by
/// [`Graph::backward`], so running two backward passes through the same
/// tensor doubles its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Whether backward passes should deposit a gradient here.
    pub requires_grad: bool,
    /// Accumulated gradient, same length as `data`, allocated on demand.
    pub grad: Option<Vec<T>>,
}

/// Number of elements implied by a shape (empty shape = scalar = 1).
pub(crate) fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor from a shape and matching flat data.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape_len(&shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} elements for shape {}", shape_len(&shape), shape_str(&shape)),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape_len(&shape);
        Tensor {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape_len(&shape);
        Tensor {
            shape,
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Tensor built by evaluating `f` at each flat (row-major) index.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape_len(&shape);
        Tensor {
            shape,
            data: (0..n).map(|i| f(i)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as requiring gradients (builder style).
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Shape as a slice of dimension sizes.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of dimensions.
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements (some dimension is zero).
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat row-major data.
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable flat data.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Height/width of a rank-2 tensor.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape("Tensor::hw", "[H, W]", shape_str(&self.shape))),
        }
    }

    /// Returns the same data under a new shape with an equal element count.
    ///
    /// The gradient buffer is dropped; `requires_grad` is preserved.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if shape_len(&shape) != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshaped",
                format!("shape with {} elements", self.data.len()),
                shape_str(&shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    /// Element-wise conversion to another scalar type (via `f64`).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Applies `f` element-wise, returning a new tensor of the same shape.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the tensor to the binary `.tns` format.
    ///
    /// Layout: magic `TNS1`, `u32` rank, `rank × u32` dimension sizes, then
    /// the elements as little-endian `f32` in row-major order. Values are
    /// narrowed to `f32` on disk regardless of the in-memory scalar type.
    pub fn save_tns(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let put = |w: &mut BufWriter<std::fs::File>, bytes: &[u8]| {
            w.write_all(bytes).map_err(|e| Error::io(path, e))
        };
        put(&mut w, b"TNS1")?;
        put(&mut w, &(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            if d > u32::MAX as usize {
                return Err(Error::Invalid(format!("dimension {d} too large for .tns")));
            }
            put(&mut w, &(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            put(&mut w, &(v.to_f64() as f32).to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a `.tns` file written by [`Tensor::save_tns`].
    pub fn load_tns(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != b"TNS1" {
            return Err(Error::parse(path, "bad magic, not a .tns file"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank > 8 {
            return Err(Error::parse(path, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n = shape_len(&shape);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
            data.push(T::from_f64(f64::from(f32::from_le_bytes(u32buf))));
        }
        // Trailing bytes indicate a corrupt or mislabeled file.
        let mut extra = [0u8; 1];
        match r.read(&mut extra) {
            Ok(0) => {}
            Ok(_) => return Err(Error::parse(path, "trailing bytes after tensor data")),
            Err(e) => return Err(Error::io(path, e)),
        }
        Tensor::new(shape, data)
    }
}
