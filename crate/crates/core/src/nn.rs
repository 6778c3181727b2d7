//! Named parameters and the layers built from them.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::real::Real;
use crate::tensor::{numel, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter's initial values were drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
    /// Deterministic values supplied by the layer.
    Custom(&'static str),
}

#[derive(Clone, Debug)]
pub struct Parameter<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub init: Init,
}

/// All trainable tensors of a model in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    params: Vec<Parameter<R>>,
    by_name: HashMap<String, ParamId>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<R>, init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("param", format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, init });
        Ok(id)
    }

    /// Draws a parameter from `init`.
    pub fn init(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> Result<ParamId> {
        let value = match init {
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| R::of(rng.gen_range(-bound..bound)))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, R::one()),
            Init::Custom(what) => return Err(Error::invalid("param", format!("custom init `{what}` needs values"))),
        };
        self.insert(name, value, init)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<R> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<R>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<R>> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), init: p.init.clone() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces the value of the named parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<R>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("param", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }
}

/// `y = x W + b` on `[L, in]` rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.init(format!("{name}.weight"), &[d_in, d_out], Init::FanInUniform { fan_in: d_in }, rng)?;
        let b = if bias { Some(store.init(format!("{name}.bias"), &[d_out], Init::Zeros, rng)?) } else { None };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                let rows = g.shape(y)[0];
                let shape = g.shape(y).to_vec();
                let bb = g.expand(b, rows, 1, &shape)?;
                g.add(y, bb)
            }
            None => Ok(y),
        }
    }
}

/// 3D convolution with bias on a `[C, H, W, D]` map.
#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
    pub c_out: usize,
}

impl Conv3d {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = spec.kernel;
        let fan_in = c_in * k * k * k;
        let w = store.init(format!("{name}.weight"), &[c_out, c_in, k, k, k], Init::FanInUniform { fan_in }, rng)?;
        let b = store.init(format!("{name}.bias"), &[c_out], Init::Zeros, rng)?;
        Ok(Self { w, b, spec, c_out })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.conv3d(x, w, self.spec)?;
        add_channel_bias(g, y, self.b)
    }
}

/// Adds a per-channel vector to a `[C, ...]` map.
pub fn add_channel_bias<R: Real>(g: &mut Graph<'_, R>, y: Var, b: ParamId) -> Result<Var> {
    let b = g.param(b);
    let shape = g.shape(y).to_vec();
    let inner = numel(&shape[1..]);
    let bb = g.expand(b, 1, inner, &shape)?;
    g.add(y, bb)
}

/// Normalization followed by a learned per-feature scale and shift.
///
/// `Instance` normalizes each channel of `[C, ...]` over its spatial extent;
/// `Layer` normalizes each row of `[L, T]` over its features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Instance,
    Layer,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub features: usize,
}

impl Norm {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        kind: NormKind,
        features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let gamma = store.init(format!("{name}.weight"), &[features], Init::Ones, rng)?;
        let beta = store.init(format!("{name}.bias"), &[features], Init::Zeros, rng)?;
        Ok(Self { kind, gamma, beta, features })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (n, outer, inner) = match self.kind {
            NormKind::Instance => {
                let n = numel(&shape[1..]);
                (n, 1, n)
            }
            NormKind::Layer => (shape[shape.len() - 1], numel(&shape) / shape[shape.len() - 1], 1),
        };
        let xhat = g.normalize_rows(x, n, NORM_EPS)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let gb = g.expand(gamma, outer, inner, &shape)?;
        let bb = g.expand(beta, outer, inner, &shape)?;
        let y = g.mul(xhat, gb)?;
        g.add(y, bb)
    }
}

/// Conv, instance norm, leaky ReLU.
#[derive(Clone, Copy, Debug)]
pub struct ConvNormAct {
    pub conv: Conv3d,
    pub norm: Norm,
}

impl ConvNormAct {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = Conv3d::new(store, &format!("{name}.conv"), c_in, c_out, spec, rng)?;
        let norm = Norm::new(store, &format!("{name}.norm"), NormKind::Instance, c_out, rng)?;
        Ok(Self { conv, norm })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        Ok(g.act(y, crate::graph::Activation::LeakyRelu(crate::graph::LEAKY_SLOPE)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut s, "a", 2, 3, true, &mut rng).unwrap();
        assert!(Linear::new(&mut s, "a", 2, 3, true, &mut rng).is_err());
    }

    #[test]
    fn layer_norm_of_pair() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = Norm::new(&mut s, "ln", NormKind::Layer, 2, &mut rng).unwrap();
        let mut g = Graph::with_params(&s);
        let x = g.input(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
        let y = n.forward(&mut g, x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn instance_norm_of_constant_is_zero() {
        let mut s = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = Norm::new(&mut s, "in", NormKind::Instance, 2, &mut rng).unwrap();
        let mut g = Graph::with_params(&s);
        let x = g.input(Tensor::full(&[2, 2, 2, 2], 3.5));
        let y = n.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
