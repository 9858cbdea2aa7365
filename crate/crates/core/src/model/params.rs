use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::WwtConfig;
use crate::error::{Result, WwtError};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, std: f64) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::TruncNormal(std),
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![fan_out],
        init: Init::Zeros,
    });
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.gain"),
        shape: vec![d],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn mlp(out: &mut Vec<ParamSpec>, prefix: &str, i: usize, h: usize, o: usize, std: f64) {
    linear(out, &format!("{prefix}.fc1"), i, h, std);
    linear(out, &format!("{prefix}.fc2"), h, o, std);
}

impl WwtConfig {
    /// Every learnable tensor of backbone and heads, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, s, m, c) = (self.embed_dim, self.slots, self.heads, self.num_classes);
        let std = self.init_std;
        let mut out = Vec::new();
        linear(&mut out, "patch_embed", self.patch_dim(), d, std);
        out.push(ParamSpec {
            name: "pos_embed".into(),
            shape: vec![self.tokens(), d],
            init: Init::TruncNormal(std),
        });
        out.push(ParamSpec {
            name: "slot_queries".into(),
            shape: vec![s, d],
            init: Init::TruncNormal(std),
        });
        for b in 0..self.blocks {
            let p = format!("blocks.{b}");
            for n in ["norm_x1", "norm_z1", "norm_x2", "norm_z2"] {
                norm(&mut out, &format!("{p}.{n}"), d);
            }
            for proj in ["q", "k", "v1", "v2"] {
                linear(&mut out, &format!("{p}.{proj}"), d, d, std);
            }
            mlp(
                &mut out,
                &format!("{p}.mlp_t"),
                d,
                self.mlp_hidden_t,
                d,
                std,
            );
            mlp(
                &mut out,
                &format!("{p}.mlp_s"),
                d,
                self.mlp_hidden_s,
                d,
                std,
            );
            if self.mlp_over_attention {
                mlp(
                    &mut out,
                    &format!("{p}.mlp_a"),
                    m * s + d,
                    self.mlp_hidden_a,
                    m * s,
                    std,
                );
            }
        }
        norm(&mut out, "cls.norm", d);
        mlp(&mut out, "cls", d, self.cls_hidden, c, std);
        mlp(&mut out, "ae", d, self.ae_hidden, 3, std);
        mlp(
            &mut out,
            "distill",
            d,
            self.ae_hidden,
            self.teacher_dim,
            std,
        );
        mlp(&mut out, "det.box", d + 2, self.det_hidden, 4, std);
        mlp(&mut out, "det.cls", d, self.det_hidden, c + 1, std);
        mlp(&mut out, "seg", d, self.cls_hidden, c + 1, std);
        out
    }
}

/// All learnable weights, addressable by hierarchical name.
#[derive(Clone, Debug, PartialEq)]
pub struct WwtParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> WwtParams<T> {
    /// Truncated-normal weights, zero biases, unit norm gains.
    pub fn init(config: &WwtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in config.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::TruncNormal(std) => {
                    let dist = Normal::new(0.0, std)
                        .map_err(|e| WwtError::Config(format!("init std: {e}")))?;
                    (0..n)
                        .map(|_| loop {
                            let v: f64 = dist.sample(&mut rng);
                            if v.abs() <= 2.0 * std {
                                break T::of(v);
                            }
                        })
                        .collect()
                }
            };
            tensors.insert(spec.name, Tensor::from_vec(&spec.shape, data)?);
        }
        Ok(WwtParams { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        WwtParams { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| WwtError::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| WwtError::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> WwtParams<U> {
        WwtParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Check that every parameter the config expects is present with the
    /// expected shape.
    pub fn check_against(&self, config: &WwtConfig) -> Result<()> {
        for spec in config.param_specs() {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(WwtError::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Zero every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    /// Relabel slots: new slot `i` takes the role of old slot `perm[i]`.
    /// Moves the learned queries and every slot-indexed channel of the mask
    /// MLPs so the network computes the same function up to slot order.
    pub fn permute_slots(&mut self, config: &WwtConfig, perm: &[usize]) -> Result<()> {
        let (s, m, d) = (config.slots, config.heads, config.embed_dim);
        if perm.len() != s {
            return Err(WwtError::invalid(
                "permute_slots",
                "permutation length != slots",
            ));
        }
        let q = self.get("slot_queries")?.clone();
        let mut nq = q.clone();
        for (i, &src) in perm.iter().enumerate() {
            nq.data_mut()[i * d..(i + 1) * d].copy_from_slice(q.row(src));
        }
        self.insert("slot_queries", nq);
        // channel h*S + i of the mask layout maps to h*S + perm[i]
        let chan = |c: usize| (c / s) * s + perm[c % s];
        for b in 0..config.blocks {
            if !config.mlp_over_attention {
                break;
            }
            let w1n = format!("blocks.{b}.mlp_a.fc1.weight");
            let w1 = self.get(&w1n)?.clone();
            let h = w1.cols();
            let mut nw1 = w1.clone();
            for c in 0..m * s {
                let src = chan(c);
                nw1.data_mut()[c * h..(c + 1) * h].copy_from_slice(w1.row(src));
            }
            self.insert(&w1n, nw1);
            let w2n = format!("blocks.{b}.mlp_a.fc2.weight");
            let w2 = self.get(&w2n)?.clone();
            let mut nw2 = w2.clone();
            for r in 0..w2.rows() {
                for c in 0..m * s {
                    nw2.data_mut()[r * m * s + c] = w2.at2(r, chan(c));
                }
            }
            self.insert(&w2n, nw2);
            let b2n = format!("blocks.{b}.mlp_a.fc2.bias");
            let b2 = self.get(&b2n)?.clone();
            let mut nb2 = b2.clone();
            for c in 0..m * s {
                nb2.data_mut()[c] = b2.data()[chan(c)];
            }
            self.insert(&b2n, nb2);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = WwtConfig::micro(8);
        let a = WwtParams::<f32>::init(&cfg, 3).unwrap();
        let b = WwtParams::<f32>::init(&cfg, 3).unwrap();
        assert_eq!(a, b);
        a.check_against(&cfg).unwrap();
        let w = a.get("blocks.0.q.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a
            .get("blocks.0.q.bias")
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));
        assert!(a
            .get("cls.norm.gain")
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 1.0));
        let c = WwtParams::<f32>::init(&cfg, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_mask_mlp_when_ablated() {
        let mut cfg = WwtConfig::micro(8);
        cfg.mlp_over_attention = false;
        assert!(cfg.param_specs().iter().all(|s| !s.name.contains("mlp_a")));
    }
}
