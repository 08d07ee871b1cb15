use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Stable identity of a [`Parameter`], used to map graph leaves back to
/// the owning parameter after `backward`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        Self(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    id: ParamId,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    /// Whether weight decay applies. Off for norm affine terms and spans.
    pub decay: bool,
}

impl<T: Float> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self {
            id: ParamId::fresh(),
            value,
            grad: None,
            requires_grad: true,
            decay: true,
        }
    }

    pub fn without_decay(mut self) -> Self {
        self.decay = false;
        self
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Arguments handed to a backward rule.
pub struct BackwardArgs<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// `needs[i]` is false when input `i` does not require a gradient.
    pub needs: &'a [bool],
}

/// Adjoint rule of a recorded operation: maps the output gradient to one
/// optional gradient per input.
pub trait Backward<T> {
    fn backward(&self, args: &BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

impl<T, F> Backward<T> for F
where
    F: Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>>,
{
    fn backward(&self, args: &BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        self(args)
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<Box<dyn Backward<T>>>,
}

/// Execution record for one forward pass.
///
/// Nodes are appended in execution order, which is a valid topological
/// order, so `backward` simply walks the node list in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
    recording: bool,
    consumed: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    /// A graph that records adjoints.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A graph that only computes values (evaluation mode).
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.recording;
        self.push(value, rg)
    }

    /// Registers a parameter as a leaf. Repeated calls with the same
    /// parameter return the same node so shared weights accumulate.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id) {
            return v;
        }
        let rg = self.recording && p.requires_grad;
        let v = self.push(p.value.clone(), rg);
        self.params.insert(p.id, v);
        v
    }

    /// Appends the result of an operation. The backward rule is kept only
    /// when some input requires a gradient.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var {
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad: rg,
            inputs: if rg { inputs.to_vec() } else { Vec::new() },
            backward: if rg { Some(Box::new(backward)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grad(&self, p: &Parameter<T>) -> Option<&Tensor<T>> {
        self.params.get(&p.id).and_then(|&v| self.grad(v))
    }

    /// Reverse sweep from a scalar loss. The tape is released afterwards;
    /// a second call without a fresh forward pass fails with `StaleTape`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.sweep(loss, false)
    }

    /// Like [`Graph::backward`] but keeps the tape for another sweep.
    /// Gradients from both sweeps accumulate.
    pub fn backward_retain(&mut self, loss: Var) -> Result<()> {
        self.sweep(loss, true)
    }

    fn sweep(&mut self, loss: Var, retain: bool) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        accumulate(&mut self.grads[loss.0], Tensor::ones(lv.shape()))?;

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = self.grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = rule.backward(&BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                needs: &needs,
            })?;
            let targets = node.inputs.clone();
            for (target, g) in targets.into_iter().zip(input_grads) {
                if let Some(g) = g {
                    if !self.nodes[target.0].requires_grad {
                        continue;
                    }
                    if g.shape() != self.nodes[target.0].value.shape() {
                        return Err(Error::ShapeMismatch(format!(
                            "gradient {:?} for node of shape {:?}",
                            g.shape(),
                            self.nodes[target.0].value.shape()
                        )));
                    }
                    accumulate(&mut self.grads[target.0], g)?;
                }
            }
        }
        if !retain {
            for node in &mut self.nodes {
                node.backward = None;
            }
            self.consumed = true;
        }
        Ok(())
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
