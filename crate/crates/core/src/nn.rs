//! Parameter storage and the layers shared by the encoder, extractor,
//! bottleneck and decoder.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Gradients, Graph, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors. Order is registration order and is the
/// order used for serialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    fn add_trunc_normal(&mut self, name: String, shape: &[usize], rng: &mut Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.trunc_normal(INIT_STD))).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Errors unless `other` has the same names and shapes in the same order.
    pub fn check_compatible(&self, other: &ParamSet<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::State(format!(
                "parameter sets differ in length: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if a.shape() != b.shape() || self.names[i] != other.names[i] {
                return Err(Error::State(format!(
                    "parameter {} mismatch: {} {:?} vs {} {:?}",
                    i,
                    self.names[i],
                    a.shape(),
                    other.names[i],
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Euclidean distance between two compatible sets, flattened.
    pub fn distance(&self, other: &ParamSet<T>) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(&x, &y)| (x.f64() - y.f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Graph leaves for every tensor of a [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Records each parameter as a leaf; `track` controls whether gradients
    /// are computed for them.
    pub fn new<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, track: bool) -> Bound {
        let vars = params
            .values()
            .iter()
            .map(|t| g.leaf(t.clone(), track))
            .collect();
        Bound { vars }
    }

    pub fn from_vars(vars: Vec<Var>) -> Bound {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// One gradient tensor per parameter (zero where nothing flowed).
    pub fn gradients<T: Real>(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = ps.add_trunc_normal(format!("{name}.weight"), &[fan_in, fan_out], rng);
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.weight))?;
        g.add_row(h, p.var(self.bias))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn init<T: Real>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Norm { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layernorm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs; self-attention passes the same tensor twice.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per-head attention weights, `queries × keys`, rows summing to one.
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            q: Linear::init(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::init(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::init(ps, &format!("{name}.v"), dim, dim, rng),
            out: Linear::init(ps, &format!("{name}.out"), dim, dim, rng),
            heads,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: Var,
        context: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, queries, context)?.out)
    }

    pub fn forward_with_weights<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: Var,
        context: Var,
    ) -> Result<AttentionOutput> {
        let dim = self.q.fan_out;
        let head_dim = dim / self.heads;
        let scale = T::lit(1.0 / (head_dim as f64).sqrt());
        let q = self.q.forward(g, p, queries)?;
        let k = self.k.forward(g, p, context)?;
        let v = self.v.forward(g, p, context)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v, h * head_dim, head_dim)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let out = self.out.forward(g, p, merged)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        FeedForward {
            fc1: Linear::init(ps, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::init(ps, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Errors with the offending location if `v` holds non-finite values.
pub fn check_finite<T: Real>(
    g: &Graph<T>,
    v: Var,
    location: impl FnOnce() -> String,
) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(location(), "non-finite activation"))
    }
}
