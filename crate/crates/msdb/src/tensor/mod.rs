//! Dense tensor value type with reverse-mode automatic differentiation over a
//! recorded tape, a finite-difference gradient checker, and the binary tensor
//! container used by datasets and checkpoints.

mod container;
mod gradcheck;
mod graph;

pub use container::{read_tensor, write_tensor, TensorPayload};
pub use gradcheck::grad_check;
pub use graph::{backward, GradSink, Graph};

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Opaque identity of a tensor allocation; used by the tape to track which
/// tensors were produced on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

struct TensorInner<T> {
    id: TensorId,
    shape: Vec<usize>,
    // Mutated only by optimizer updates; ops treat tensors as immutable.
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
}

/// Dense N-dimensional array of real scalars, row-major. Cloning copies a
/// cheap handle; the underlying buffer is shared.
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.shape(),
            self.requires_grad()
        )
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "zero extent".into(),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("product {} != data length {}", numel, len),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(TensorInner {
                id: TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Constant tensor (no gradient slot is ever populated).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, false))
    }

    /// Learnable tensor: backward() accumulates into its grad slot.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![T::zero(); n], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value], false)
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // zero extents are rejected at construction
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the backing buffer.
    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Copy the backing buffer out.
    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Current gradient, if any has been accumulated.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    /// Drop any accumulated gradient. Called by the optimizer after a step.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Accumulate into the persistent gradient slot, allocating zeros on first
    /// touch. Used by the tape for requires_grad leaves.
    pub(crate) fn accumulate_grad(&self, add: impl FnOnce(&mut [T])) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.len()]);
        add(buf);
    }

    /// In-place update of the backing buffer. Reserved for optimizer steps and
    /// checkpoint reloads; never called by tape operations.
    pub fn apply_update(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Deep copy into a fresh constant tensor.
    pub fn detached_copy(&self) -> Tensor<T> {
        Self::from_parts(self.inner.shape.clone(), self.to_vec(), false)
    }

    /// Deep copy into a fresh learnable tensor.
    pub fn param_copy(&self) -> Tensor<T> {
        Self::from_parts(self.inner.shape.clone(), self.to_vec(), true)
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_len() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            Tensor::<f32>::new(&[2, 0], vec![]),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn grad_slot_matches_shape() {
        let p = Tensor::<f32>::param(&[2, 2], vec![1.0; 4]).unwrap();
        p.accumulate_grad(|g| g[3] = 5.0);
        let g = p.grad().unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g[3], 5.0);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn ids_are_unique() {
        let a = Tensor::<f32>::zeros(&[1]);
        let b = Tensor::<f32>::zeros(&[1]);
        assert_ne!(a.id(), b.id());
        assert_eq!(a.id(), a.clone().id());
    }
}
