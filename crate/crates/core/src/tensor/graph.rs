use super::params::{Gradients, ParamId, ParamStore};
use super::{Mask, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A primitive whose backward rule is supplied by the caller.
///
/// `backward` receives the recorded input values, the output value and the
/// gradient flowing into the output; it returns one optional gradient per
/// input, each shaped like that input.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Powf(Var, T),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Cos(Var),
    Sin(Var),
    Abs(Var),
    SmoothL1(Var),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Sum(Var, usize),
    Max(Var, usize, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    Softmax(Var),
    RmsNorm(Var, Var, Vec<T>),
    IndexSelect(Var, usize, Vec<usize>),
    MaskedFill(Var, Vec<bool>),
    Dropout(Var, Vec<T>),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

impl<T: Real> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Powf(..) => "powf",
            Op::Sigmoid(_) => "sigmoid",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::Cos(_) => "cos",
            Op::Sin(_) => "sin",
            Op::Abs(_) => "abs",
            Op::SmoothL1(_) => "smooth_l1",
            Op::Matmul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::Narrow(..) => "narrow",
            Op::Sum(..) => "sum",
            Op::Max(..) => "max",
            Op::SegmentMax(..) => "segment_max",
            Op::Softmax(_) => "softmax",
            Op::RmsNorm(..) => "rms_norm",
            Op::IndexSelect(..) => "index_select",
            Op::MaskedFill(..) => "masked_fill",
            Op::Dropout(..) => "dropout",
            Op::Custom(_, op) => op.name(),
        }
    }
}

pub(crate) struct Node<T: Real> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<T>>,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted.
pub struct Graph<'p, T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    dropout_seed: u64,
    pub(crate) dropout_calls: u64,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            training: false,
            dropout_seed: 0,
            dropout_calls: 0,
        }
    }

    /// A graph that can read parameters from `params`.
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            param_vars: vec![None; params.len()],
            params: Some(params),
            ..Self::new()
        }
    }

    /// Enable dropout with the given per-graph seed.
    pub fn train_mode(mut self, seed: u64) -> Self {
        self.training = true;
        self.dropout_seed = seed;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub(crate) fn dropout_seed(&self) -> u64 {
        self.dropout_seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// The graph node for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return Ok(*v);
        }
        let store = self.params.ok_or(TensorError::NoParams)?;
        let value = store
            .get(id)
            .ok_or_else(|| TensorError::UnknownParam(format!("#{}", id.0)))?
            .clone();
        let v = self.push(value, Op::Param, true)?;
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    /// Record a caller-defined primitive whose forward value was computed
    /// outside the tape.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let rg = self.any_grad(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 || !shape.iter().all(|&d| d == 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Param => {
                    let node = &mut self.nodes[i];
                    node.grad = Some(match node.grad.take() {
                        None => g,
                        Some(prev) => super::ops::add_same(&prev, &g),
                    });
                }
                _ => {
                    let contribs = super::ops::backward_node(self, i, &g)?;
                    for (input, gin) in contribs {
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        if !gin.all_finite() {
                            return Err(TensorError::NonFinite {
                                op: format!("backward of {}", self.nodes[i].op.name()),
                            });
                        }
                        grads[input.0] = Some(match grads[input.0].take() {
                            None => gin,
                            Some(prev) => super::ops::add_same(&prev, &gin),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Parameter gradients from the last backward pass.
    pub fn param_grads(&self) -> Gradients<T> {
        let mut out = Gradients::new(self.param_vars.len());
        for (id, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = &self.nodes[v.0].grad {
                    out.accumulate(ParamId(id), g);
                }
            }
        }
        out
    }

    pub(crate) fn mask_for(&self, mask: &Mask, shape: &[usize], op: &'static str) -> Result<Vec<bool>> {
        mask.expand(shape, op)
    }
}
