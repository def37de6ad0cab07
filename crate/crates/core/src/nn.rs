//! Parameters, initialisation and the handful of layers the model is built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors, keyed by dotted module path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: String, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
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

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &self.values[id.0]))
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Scalar count of parameters whose path starts with `prefix`.
    pub fn numel_under(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, v)| v.numel())
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// `U(-bound, bound)`.
    Uniform(f64),
}

/// Registers parameters under a path prefix, drawing initial values from a
/// shared seeded generator.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Sub-builder for a child module.
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Uniform(b) => Tensor::from_fn(shape, |_| T::lit(self.rng.gen_range(-b..=b))),
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.register(full, value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvInit {
    /// Uniform with bound `1/sqrt(fan_in)` for weight and bias.
    Default,
    /// All zeros (used for offset heads so training starts at zero offset).
    Zero,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: ConvInit,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let i = match init {
            ConvInit::Default => Init::Uniform(1.0 / fan_in.sqrt()),
            ConvInit::Zero => Init::Zeros,
        };
        let weight = pb.var("weight", &[out_channels, in_channels, kernel, kernel], i)?;
        let bias = Some(pb.var("bias", &[out_channels], i)?);
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    /// "Same" padding, stride 1.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.kernel / 2)
    }

    pub fn numel(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

/// `x + Conv(ReLU(Conv(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut pb.pp("conv1"), channels, channels, 3, ConvInit::Default)?,
            conv2: Conv2d::new(&mut pb.pp("conv2"), channels, channels, 3, ConvInit::Default)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_paths_nest() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let conv = Conv2d::new(&mut pb.pp("a").pp("b"), 2, 3, 3, ConvInit::Default).unwrap();
        assert_eq!(store.name(conv.weight), "a.b.weight");
        assert_eq!(store.numel(), conv.numel());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("x".into(), Tensor::zeros(&[1])).unwrap();
        assert!(store.register("x".into(), Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ResBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), 4).unwrap();
        for id in [block.conv1.weight, block.conv2.weight, block.conv2.bias.unwrap()] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor::from_fn(&[1, 4, 5, 5], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }
}
