use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Vision,
    Connector,
    Lm,
    Head,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<S>,
}

impl<S> Param<S> {
    /// Biases and layer-norm parameters are exempt from weight decay.
    pub fn decays(&self) -> bool {
        let leaf = self.name.rsplit('.').next().unwrap_or("");
        !(leaf == "b" || leaf == "g" || self.name.contains(".ln"))
    }
}

/// Every learnable tensor of the model, in a fixed registration order.
#[derive(Clone, Debug)]
pub struct ParamSet<S> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

struct Spec {
    name: String,
    group: Group,
    shape: Vec<usize>,
    init: Init,
}

fn linear(out: &mut Vec<Spec>, group: Group, name: &str, n_out: usize, n_in: usize) {
    out.push(Spec {
        name: format!("{name}.w"),
        group,
        shape: vec![n_out, n_in],
        init: Init::Normal(1.0 / (n_in as f64).sqrt()),
    });
    out.push(Spec {
        name: format!("{name}.b"),
        group,
        shape: vec![n_out],
        init: Init::Zeros,
    });
}

fn layer_norm(out: &mut Vec<Spec>, group: Group, name: &str, dim: usize) {
    out.push(Spec {
        name: format!("{name}.g"),
        group,
        shape: vec![dim],
        init: Init::Ones,
    });
    out.push(Spec {
        name: format!("{name}.b"),
        group,
        shape: vec![dim],
        init: Init::Zeros,
    });
}

fn attention(out: &mut Vec<Spec>, group: Group, name: &str, dim: usize) {
    for p in ["q", "k", "v", "o"] {
        linear(out, group, &format!("{name}.{p}"), dim, dim);
    }
}

fn ffn(out: &mut Vec<Spec>, group: Group, name: &str, dim: usize, mult: usize) {
    linear(out, group, &format!("{name}.up"), dim * mult, dim);
    linear(out, group, &format!("{name}.down"), dim, dim * mult);
}

fn embedding(out: &mut Vec<Spec>, group: Group, name: &str, shape: Vec<usize>, std: f64) {
    out.push(Spec {
        name: name.to_string(),
        group,
        shape,
        init: Init::Normal(std),
    });
}

fn specs(cfg: &ModelConfig) -> Vec<Spec> {
    let mut s = Vec::new();
    let (hv, ht) = (cfg.h_v, cfg.h_t);

    linear(&mut s, Group::Vision, "vision.patch", hv, cfg.d_raw);
    embedding(&mut s, Group::Vision, "vision.cls", vec![1, hv], 1.0);
    embedding(
        &mut s,
        Group::Vision,
        "vision.pos",
        vec![cfg.vision_len(), hv],
        0.1,
    );
    for i in 0..cfg.vision_layers {
        let b = format!("vision.blocks.{i}");
        layer_norm(&mut s, Group::Vision, &format!("{b}.ln1"), hv);
        attention(&mut s, Group::Vision, &format!("{b}.attn"), hv);
        layer_norm(&mut s, Group::Vision, &format!("{b}.ln2"), hv);
        ffn(&mut s, Group::Vision, &format!("{b}.ffn"), hv, cfg.ffn_mult);
    }
    layer_norm(&mut s, Group::Vision, "vision.ln_f", hv);

    embedding(
        &mut s,
        Group::Connector,
        "conn.queries",
        vec![cfg.l_c, hv],
        1.0,
    );
    for i in 0..cfg.connector_layers {
        let b = format!("conn.blocks.{i}");
        layer_norm(&mut s, Group::Connector, &format!("{b}.ln_self"), hv);
        attention(&mut s, Group::Connector, &format!("{b}.self_attn"), hv);
        layer_norm(&mut s, Group::Connector, &format!("{b}.ln_cross"), hv);
        attention(&mut s, Group::Connector, &format!("{b}.cross_attn"), hv);
        layer_norm(&mut s, Group::Connector, &format!("{b}.ln_ffn"), hv);
        ffn(
            &mut s,
            Group::Connector,
            &format!("{b}.ffn"),
            hv,
            cfg.ffn_mult,
        );
    }
    layer_norm(&mut s, Group::Connector, "conn.ln_out", hv);
    linear(&mut s, Group::Connector, "conn.out", ht, hv);

    embedding(&mut s, Group::Lm, "lm.tok", vec![cfg.vocab_size, ht], 1.0);
    embedding(
        &mut s,
        Group::Lm,
        "lm.pos",
        vec![cfg.max_positions, ht],
        0.1,
    );
    for i in 0..cfg.lm_layers {
        let b = format!("lm.blocks.{i}");
        layer_norm(&mut s, Group::Lm, &format!("{b}.ln1"), ht);
        attention(&mut s, Group::Lm, &format!("{b}.attn"), ht);
        layer_norm(&mut s, Group::Lm, &format!("{b}.ln2"), ht);
        ffn(&mut s, Group::Lm, &format!("{b}.ffn"), ht, cfg.ffn_mult);
    }
    layer_norm(&mut s, Group::Lm, "lm.ln_f", ht);

    linear(&mut s, Group::Head, "vis_proj", ht, hv);
    linear(&mut s, Group::Head, "gate_v", ht, 2 * ht);
    linear(&mut s, Group::Head, "gate_m", ht, 2 * ht);
    linear(&mut s, Group::Head, "proj", cfg.out_dim, ht);
    embedding(&mut s, Group::Head, "null_image", vec![1, ht], 1.0);
    s
}

impl<S: Scalar> ParamSet<S> {
    /// Random initialization, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs(cfg)
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data: Vec<S> = match spec.init {
                    Init::Zeros => vec![S::zero(); n],
                    Init::Ones => vec![S::one(); n],
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| S::lit(d.sample(&mut rng))).collect()
                    }
                };
                Param {
                    name: spec.name,
                    group: spec.group,
                    value: Tensor::new(spec.shape, data).expect("spec shape"),
                }
            })
            .collect();
        Ok(Self::from_params(params))
    }

    /// All-zero parameters with the shapes of `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = specs(cfg)
            .into_iter()
            .map(|spec| Param {
                name: spec.name,
                group: spec.group,
                value: Tensor::zeros(&spec.shape),
            })
            .collect();
        Ok(Self::from_params(params))
    }

    fn from_params(params: Vec<Param<S>>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        ParamSet { params, index }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        let i = self.index_of(name)?;
        Some(&mut self.params[i].value)
    }

    pub fn param(&self, i: usize) -> &Param<S> {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Param<S> {
        &mut self.params[i]
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces `name`; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set parameter",
                p.value.shape(),
                value.shape(),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Order-sensitive checksum of one group, for frozen-weight checks.
    pub fn group_checksum(&self, group: Group) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            p.name.hash(&mut h);
            for x in p.value.values() {
                x.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}
