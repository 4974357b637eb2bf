use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Graph operations. Image tensors are NCHW.
#[derive(Clone, Debug)]
pub enum Op {
    /// The i-th runtime input.
    Input(usize),
    /// A named parameter looked up in the `ParamSet`.
    Param(String),
    Const(Tensor),
    /// `x[N,In] * w[In,Out] + b[Out]`.
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// Cross-correlation `x[N,C,H,W]` with `w[O,C,k,k]` plus `b[O]`, zero padding.
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    /// Non-overlapping max pooling over `size x size` windows.
    MaxPool {
        x: NodeId,
        size: usize,
    },
    /// Global spatial mean `[N,C,H,W] -> [N,C]`.
    MeanPool(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Softmax along `axis`.
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Log(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise smooth-L1 with beta = 1.
    SmoothL1(NodeId),
    /// Sum of all entries, shape `[1]`.
    Sum(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// `x^p` for `x >= 0`.
    Pow(NodeId, f64),
    /// Clamp into `[lo, hi]`; gradient is zero where clamping is active.
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    /// Inverted dropout with a mask drawn from `seed`.
    Dropout {
        x: NodeId,
        rate: f64,
        seed: u64,
    },
    /// Identity forward; backward multiplies the incoming gradient by `-scale`.
    GradReverse {
        x: NodeId,
        scale: f64,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Input(_) | Param(_) | Const(_) => vec![],
            Affine { x, w, b } | Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Add(a, b) | Mul(a, b) => vec![*a, *b],
            MaxPool { x, .. }
            | Softmax { x, .. }
            | Clamp { x, .. }
            | Dropout { x, .. }
            | GradReverse { x, .. } => vec![*x],
            MeanPool(x)
            | Relu(x)
            | Sigmoid(x)
            | Log(x)
            | SmoothL1(x)
            | Sum(x)
            | Scale(x, _)
            | AddScalar(x, _)
            | Pow(x, _) => vec![*x],
        }
    }

    pub fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Input(_) => "input",
            Param(_) => "param",
            Const(_) => "const",
            Affine { .. } => "affine",
            Conv2d { .. } => "conv2d",
            MaxPool { .. } => "maxpool",
            MeanPool(_) => "meanpool",
            Relu(_) => "relu",
            Sigmoid(_) => "sigmoid",
            Softmax { .. } => "softmax",
            Log(_) => "log",
            Add(..) => "add",
            Mul(..) => "mul",
            SmoothL1(_) => "smooth_l1",
            Sum(_) => "sum",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Pow(..) => "pow",
            Clamp { .. } => "clamp",
            Dropout { .. } => "dropout",
            GradReverse { .. } => "grad_reverse",
        }
    }
}

/// Append-only computation graph. Nodes can only reference earlier nodes, so
/// graphs built through this API are acyclic and topologically ordered.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Op>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, index: usize) -> NodeId {
        self.push(Op::Input(index))
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param(name.into()))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        self.push(Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        })
    }

    pub fn max_pool(&mut self, x: NodeId, size: usize) -> NodeId {
        self.push(Op::MaxPool { x, size })
    }

    pub fn mean_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanPool(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::Softmax { x, axis })
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn smooth_l1(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SmoothL1(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(x, c))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn pow(&mut self, x: NodeId, p: f64) -> NodeId {
        self.push(Op::Pow(x, p))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp { x, lo, hi })
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> NodeId {
        self.push(Op::Dropout { x, rate, seed })
    }

    pub fn grad_reverse(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.push(Op::GradReverse { x, scale })
    }

    /// Sum of `x * weights`, with `weights` a constant of the same shape.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> NodeId {
        let w = self.constant(weights);
        let prod = self.mul(x, w);
        self.sum(prod)
    }
}
