use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }

    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Identity => x,
        }
    }
}

/// Layer sizes (input first) plus the activation between layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    /// Apply the activation after the final layer too.
    pub activate_output: bool,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Self {
        Self {
            sizes,
            activation,
            activate_output: false,
        }
    }

    pub fn with_output_activation(mut self) -> Self {
        self.activate_output = true;
        self
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("nonempty spec")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform fan-in init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for both
    /// weights and bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = Tensor::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..=bound));
        let b = Tensor::from_shape_simple_fn((1, fan_out), || rng.gen_range(-bound..=bound));
        Self {
            weight: store.add(format!("{name}.w"), w),
            bias: store.add(format!("{name}.b"), b),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let z = tape.matmul(x, w)?;
        tape.add_bias(z, b)
    }
}

/// Fully connected network. Built once; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Mlp {
    name: String,
    spec: MlpSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        spec: MlpSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.sizes.len() < 2 {
            return Err(Error::config(format!(
                "network {name}: needs at least input and output sizes"
            )));
        }
        if let Some(pos) = spec.sizes.iter().position(|&s| s == 0) {
            return Err(Error::config(format!(
                "network {name}: layer size {pos} is zero"
            )));
        }
        let layers = spec
            .sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self {
            name: name.to_string(),
            spec,
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let width = tape.shape(x).1;
        if width != self.spec.input_width() {
            return Err(Error::config(format!(
                "network {} layer 0: input width {width}, expected {}",
                self.name,
                self.spec.input_width()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h).map_err(|e| {
                Error::config(format!("network {} layer {i}: {e}", self.name))
            })?;
            if i < last || self.spec.activate_output {
                h = self.spec.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}

/// Action-value network with an optional dueling head
/// `Q = V + A - mean(A)`.
#[derive(Clone, Debug)]
pub struct QNet {
    trunk: Mlp,
    value: Option<Linear>,
    advantage: Linear,
    actions: usize,
}

impl QNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: &[usize],
        actions: usize,
        activation: Activation,
        dueling: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::config(format!("network {name}: no hidden layers")));
        }
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        let trunk = Mlp::new(
            store,
            &format!("{name}.trunk"),
            MlpSpec::new(sizes, activation).with_output_activation(),
            rng,
        )?;
        let last = *hidden.last().expect("hidden nonempty");
        let value = dueling.then(|| Linear::new(store, &format!("{name}.value"), last, 1, rng));
        let advantage = Linear::new(store, &format!("{name}.adv"), last, actions, rng);
        Ok(Self {
            trunk,
            value,
            advantage,
            actions,
        })
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn input_width(&self) -> usize {
        self.trunk.spec().input_width()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.trunk.forward(tape, store, x)?;
        let adv = self.advantage.forward(tape, store, h)?;
        match &self.value {
            Some(v) => {
                let val = v.forward(tape, store, h)?;
                let centered = tape.center_cols(adv);
                tape.add_col(centered, val)
            }
            None => Ok(adv),
        }
    }

    /// Forward pass without keeping a tape around.
    pub fn eval(&self, store: &ParamStore, input: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let q = self.forward(&mut tape, store, x)?;
        Ok(tape.value(q).clone())
    }
}
