//! Eager tape of array operations with reverse-mode differentiation.
//!
//! Values are computed as the graph is built; `backward` then walks the
//! tape in reverse. Nodes are append-only, so node ids are already a
//! topological order.

use ndarray::ArrayD;

pub type Arr = ArrayD<f64>;

/// Tensors an op saves during `forward` for reuse in `backward`.
pub type Stash = Vec<Arr>;

pub trait GraphOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash);

    /// Gradient of the loss w.r.t. each input, given the gradient w.r.t.
    /// the output. `None` entries mean "no gradient flows to this input".
    fn backward(&self, inputs: &[&Arr], stash: &Stash, grad: &Arr) -> Vec<Option<Arr>>;
}

struct Node {
    value: Arr,
    inputs: Vec<Var>,
    op: Option<Box<dyn GraphOp>>,
    stash: Stash,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a leaf value. Parameters want gradients; inputs do not.
    pub fn leaf(&mut self, value: Arr, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            stash: Vec::new(),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Arr) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn apply(&mut self, op: impl GraphOp + 'static, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let refs: Vec<&Arr> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, stash) = op.forward(&refs);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: Some(Box::new(op)),
            stash,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root (any shape is accepted; the seed
    /// gradient is all-ones). Returns per-node gradients for nodes that
    /// needed them.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::ones(self.nodes[root.0].value.raw_dim()));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            let grad = grads[id].take();
            let grad = grad.unwrap();
            let refs: Vec<&Arr> = node
                .inputs
                .iter()
                .map(|v| &self.nodes[v.0].value)
                .collect();
            let input_grads = op.backward(&refs, &node.stash, &grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    ig.shape(),
                    self.nodes[v.0].value.shape(),
                    "gradient shape mismatch into {}",
                    op.name()
                );
                match &mut grads[v.0] {
                    Some(acc) => *acc += &ig,
                    slot => *slot = Some(ig),
                }
            }
            // keep the root's grad available to callers
            if id == root.0 {
                grads[id] = Some(grad);
            }
        }
        Gradients { by_node: grads }
    }
}

pub struct Gradients {
    by_node: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
    }
}
