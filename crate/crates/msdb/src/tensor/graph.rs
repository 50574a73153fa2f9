//! The tape: an ordered record of primitive operations. Backward walks the
//! record in exact reverse of execution order.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorId};

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Step<T: Scalar> {
    output: Tensor<T>,
    backward: BackwardFn<T>,
}

/// Records every primitive applied through it. A graph instance is confined to
/// one thread of execution; batch-level parallelism uses independent graphs.
pub struct Graph<T: Scalar> {
    steps: RefCell<Vec<Step<T>>>,
    produced: RefCell<HashSet<TensorId>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            steps: RefCell::new(Vec::new()),
            produced: RefCell::new(HashSet::new()),
        }
    }

    pub fn num_steps(&self) -> usize {
        self.steps.borrow().len()
    }

    /// Record one primitive. `backward` receives the output gradient and a
    /// sink to route input contributions through; it captures the input
    /// handles and whatever local values its derivative needs.
    pub(crate) fn record(&self, output: &Tensor<T>, backward: BackwardFn<T>) {
        self.produced.borrow_mut().insert(output.id());
        self.steps.borrow_mut().push(Step {
            output: output.clone(),
            backward,
        });
    }

    pub(crate) fn was_produced(&self, id: TensorId) -> bool {
        self.produced.borrow().contains(&id)
    }
}

/// Routes gradient contributions during backward: requires_grad leaves go to
/// their persistent slot, tape intermediates to per-pass scratch, and anything
/// else is skipped without evaluating the contribution.
pub struct GradSink<'g, T: Scalar> {
    scratch: &'g mut HashMap<TensorId, Vec<T>>,
    produced: &'g HashSet<TensorId>,
}

impl<T: Scalar> GradSink<'_, T> {
    /// Whether `t`'s gradient is needed at all. Lets expensive backwards skip
    /// work for constant-leaf inputs.
    pub fn wants(&self, t: &Tensor<T>) -> bool {
        t.requires_grad() || self.produced.contains(&t.id())
    }

    /// Accumulate into `target`'s gradient. The closure is handed a buffer to
    /// add into and only runs when the gradient is actually needed.
    pub fn accumulate(&mut self, target: &Tensor<T>, add: impl FnOnce(&mut [T])) {
        if target.requires_grad() {
            target.accumulate_grad(add);
        } else if self.produced.contains(&target.id()) {
            let buf = self
                .scratch
                .entry(target.id())
                .or_insert_with(|| vec![T::zero(); target.len()]);
            add(buf);
        }
        // Constant leaves: contribution not needed, closure never runs.
    }

    /// Elementwise-add a locally computed gradient buffer.
    pub fn add_buffer(&mut self, target: &Tensor<T>, local: &[T]) {
        self.accumulate(target, |g| {
            for (gi, li) in g.iter_mut().zip(local) {
                *gi = *gi + *li;
            }
        });
    }
}

/// Reverse-mode sweep from a scalar loss. Persistent gradients of
/// requires_grad tensors are accumulated (not reset); intermediates live in
/// scratch buffers local to this call, so repeated sweeps add up exactly once
/// per call.
pub fn backward<T: Scalar>(loss: &Tensor<T>, graph: &Graph<T>) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if !graph.was_produced(loss.id()) {
        return Err(Error::NotOnGraph);
    }

    let mut scratch: HashMap<TensorId, Vec<T>> = HashMap::new();
    scratch.insert(loss.id(), vec![T::one()]);

    let steps = graph.steps.borrow();
    let produced = graph.produced.borrow();
    for step in steps.iter().rev() {
        // Each id is produced by exactly one step, and all of its consumers
        // sit later on the tape, so the grad is complete here; take it out.
        let Some(out_grad) = scratch.remove(&step.output.id()) else {
            continue; // not on the path from loss
        };
        let mut sink = GradSink {
            scratch: &mut scratch,
            produced: &produced,
        };
        (step.backward)(&out_grad, &mut sink);
    }
    Ok(())
}
