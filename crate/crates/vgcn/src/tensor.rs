//! Dense 64-bit float tensors.
//!
//! A [`Tensor`] is an immutable row-major value with a shape. Tensors start
//! life detached; attaching them to a [`crate::tape::Tape`] (via `leaf` or by
//! participating in a recorded op) gives them a node id on that tape. After
//! `backward`, leaves expose their gradient through [`Tensor::grad`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Position of a recorded value on the active tape.
pub type NodeId = usize;

/// Shared slot the tape writes leaf gradients into.
pub(crate) type GradCell = Rc<RefCell<Option<Vec<f64>>>>;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    pub(crate) node: Option<NodeId>,
    requires_grad: bool,
    pub(crate) grad_cell: Option<GradCell>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("node", &self.node)
            .finish()
    }
}

impl Tensor {
    /// Build a tensor from a flat row-major value array.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Rc::new(values),
            node: None,
            requires_grad: false,
            grad_cell: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![], vec![v]).unwrap()
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).unwrap()
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![1.0; n]).unwrap()
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![v; n]).unwrap()
    }

    /// n-by-n identity matrix.
    pub fn eye(n: usize) -> Tensor {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Tensor::new(vec![n, n], v).unwrap()
    }

    /// Build a matrix from rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut v = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("ragged rows"));
            }
            v.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    /// Gradient of the last backward pass with respect to this tensor.
    /// Populated only on `requires_grad` leaves.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.grad_cell.as_ref().and_then(|c| c.borrow().clone())
    }

    /// True if every value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Detached copy: same values, no tape attachment.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
            requires_grad: false,
            grad_cell: None,
        }
    }

    /// Plain (untracked) tensor sharing an existing buffer.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Rc<Vec<f64>>) -> Tensor {
        Tensor {
            shape,
            data,
            node: None,
            requires_grad: false,
            grad_cell: None,
        }
    }

    pub(crate) fn tracked(shape: Vec<usize>, data: Rc<Vec<f64>>, node: NodeId) -> Tensor {
        Tensor {
            shape,
            data,
            node: Some(node),
            requires_grad: true,
            grad_cell: None,
        }
    }

    pub(crate) fn leaf_from(t: &Tensor, node: NodeId, cell: GradCell) -> Tensor {
        Tensor {
            shape: t.shape.clone(),
            data: Rc::clone(&t.data),
            node: Some(node),
            requires_grad: true,
            grad_cell: Some(cell),
        }
    }
}
