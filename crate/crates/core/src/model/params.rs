use std::collections::HashMap;

use super::config::{ModelConfig, ENCODER_BLOCKS};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Which encoder a lookup refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Target,
    Context,
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total scalar count of tensors whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a leaf, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .tensors()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters registered on one tape.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients in store order; parameters the loss never reached get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

/// Parameter-name prefix of an encoder. Shared encoders resolve both streams
/// to the same storage.
pub fn encoder_prefix(config: &ModelConfig, stream: Stream) -> &'static str {
    match (config.share_encoders, stream) {
        (true, _) => "encoder.shared",
        (false, Stream::Target) => "encoder.target",
        (false, Stream::Context) => "encoder.context",
    }
}

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal() * std).collect()).expect("valid shape")
}

fn linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut Rng,
) {
    let std = (gain / fan_in as f64).sqrt();
    store.insert(
        format!("{name}.weight"),
        normal(&[fan_in, fan_out], std, rng),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
}

/// Draws fresh parameters for `config`.
///
/// Conv and ReLU-fed layers use He-normal scaling, the rest `1 / fan_in`
/// variance; biases and layernorm shifts start at zero, layernorm gains at one.
pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    let d = config.feat_channels;
    let widths = [3, config.encoder_channels[0], config.encoder_channels[1], d];
    let streams: &[Stream] = if config.share_encoders {
        &[Stream::Target]
    } else {
        &[Stream::Target, Stream::Context]
    };
    for &stream in streams {
        let prefix = encoder_prefix(config, stream);
        for block in 0..ENCODER_BLOCKS {
            let (cin, cout) = (widths[block], widths[block + 1]);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            store.insert(
                format!("{prefix}.conv{}.weight", block + 1),
                normal(&[cout, cin, 3, 3], std, rng),
            );
            store.insert(
                format!("{prefix}.conv{}.bias", block + 1),
                Tensor::zeros(&[cout]),
            );
        }
    }
    store.insert("pos_embedding", normal(&[config.tokens(), d], 0.1, rng));
    for layer in 0..config.decoder_layers {
        let p = format!("decoder.{layer}");
        for proj in ["q", "k", "v", "o"] {
            linear(&mut store, &format!("{p}.attn.{proj}"), d, d, 1.0, rng);
        }
        linear(
            &mut store,
            &format!("{p}.mlp.fc1"),
            d,
            config.mlp_hidden,
            2.0,
            rng,
        );
        linear(
            &mut store,
            &format!("{p}.mlp.fc2"),
            config.mlp_hidden,
            d,
            1.0,
            rng,
        );
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{p}.{ln}.gamma"), Tensor::ones(&[d]));
            store.insert(format!("{p}.{ln}.beta"), Tensor::zeros(&[d]));
        }
    }
    linear(&mut store, "head.context", d, config.num_classes, 1.0, rng);
    linear(&mut store, "head.target", d, config.num_classes, 1.0, rng);
    linear(
        &mut store,
        "head.confidence.fc1",
        d,
        config.confidence_hidden,
        2.0,
        rng,
    );
    linear(
        &mut store,
        "head.confidence.fc2",
        config.confidence_hidden,
        1,
        1.0,
        rng,
    );
    Ok(store)
}

/// Checks that `store` holds exactly the tensors `config` expects.
pub fn check_layout(config: &ModelConfig, store: &ParamStore) -> Result<()> {
    let reference = init_params(config, &mut Rng::new(0))?;
    if reference.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            reference.len(),
            store.len()
        )));
    }
    for (name, t) in reference.iter() {
        match store.get(name) {
            Some(s) if s.shape() == t.shape() => {}
            Some(s) => {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    s.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("parameter '{name}' missing"))),
        }
    }
    Ok(())
}
