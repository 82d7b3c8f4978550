//! Small layer types shared by the fusion modules and the encoder.
//!
//! Every layer is generic over how its weights are held: `ParamId` for
//! trainable weights inside a [`ParamStore`], or `Array2<f64>` for fixed
//! weights supplied by a caller.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub trait Bindable {
    fn bind(&self, g: &mut Graph) -> NodeId;
    fn dim(&self, store: &ParamStore) -> (usize, usize);
}

impl Bindable for ParamId {
    fn bind(&self, g: &mut Graph) -> NodeId {
        g.param(*self)
    }

    fn dim(&self, store: &ParamStore) -> (usize, usize) {
        store.get(*self).dim()
    }
}

impl Bindable for Array2<f64> {
    fn bind(&self, g: &mut Graph) -> NodeId {
        g.constant(self.clone())
    }

    fn dim(&self, _: &ParamStore) -> (usize, usize) {
        Array2::dim(self)
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: Option<T>,
}

impl Linear<ParamId> {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.uniform_fan_in(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), 1, fan_out));
        Self { weight, bias }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

impl Linear<Array2<f64>> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Some(Array2::zeros((1, fan_out))),
        }
    }
}

impl<T: Bindable> Linear<T> {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = self.weight.bind(g);
        let y = g.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let b = b.bind(g);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Two-layer perceptron with a GELU hidden activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl Mlp<ParamId> {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::init(store, &format!("{name}.fc1"), input, hidden, true, rng),
            fc2: Linear::init(store, &format!("{name}.fc2"), hidden, output, true, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}

impl Mlp<Array2<f64>> {
    /// Weights given as `(w1, b1, w2, b2)` with `w: in x out`, `b: 1 x out`.
    pub fn from_weights(w1: Array2<f64>, b1: Array2<f64>, w2: Array2<f64>, b2: Array2<f64>) -> Self {
        Self {
            fc1: Linear {
                weight: w1,
                bias: Some(b1),
            },
            fc2: Linear {
                weight: w2,
                bias: Some(b2),
            },
        }
    }

    /// All-zero perceptron; its output is identically zero.
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::zeros(input, hidden),
            fc2: Linear::zeros(hidden, output),
        }
    }
}

impl<T: Bindable> Mlp<T> {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        self.fc1.weight.dim(store).0
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        self.fc2.weight.dim(store).1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNorm<ParamId> {
    pub fn init(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.filled(format!("{name}.gamma"), 1, width, 1.0),
            beta: store.zeros(format!("{name}.beta"), 1, width),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

impl<T: Bindable> LayerNorm<T> {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let gamma = self.gamma.bind(g);
        let beta = self.beta.bind(g);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}
