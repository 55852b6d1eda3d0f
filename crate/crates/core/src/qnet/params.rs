use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use super::{Fusion, NetworkConfig};

/// Every learnable array of the Q-network.
///
/// Layouts: convolution weights are `(in, kh, kw, out)`; affine and recurrent
/// weights are `(out, in)`; GRU gate blocks are stacked as reset, update, new.
/// The gate projection exists only under gated-attention fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub embedding: Tensor,
    pub gru_w_ih: Tensor,
    pub gru_w_hh: Tensor,
    pub gru_b_ih: Tensor,
    pub gru_b_hh: Tensor,
    pub gate_w: Option<Tensor>,
    pub gate_b: Option<Tensor>,
    pub trunk_w: Tensor,
    pub trunk_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub adv_w: Tensor,
    pub adv_b: Tensor,
}

/// Name and shape of every parameter for `cfg`, in canonical order.
pub fn param_shapes(cfg: &NetworkConfig) -> Vec<(&'static str, Vec<usize>)> {
    let k = cfg.kernel;
    let h3 = 3 * cfg.instr_dim;
    let mut v = vec![
        (
            "conv1.weight",
            vec![cfg.in_channels, k, k, cfg.conv1_filters],
        ),
        ("conv1.bias", vec![cfg.conv1_filters]),
        (
            "conv2.weight",
            vec![cfg.conv1_filters, k, k, cfg.conv2_filters],
        ),
        ("conv2.bias", vec![cfg.conv2_filters]),
        ("embedding", vec![cfg.vocab_size, cfg.embed_dim]),
        ("gru.w_ih", vec![h3, cfg.embed_dim]),
        ("gru.w_hh", vec![h3, cfg.instr_dim]),
        ("gru.b_ih", vec![h3]),
        ("gru.b_hh", vec![h3]),
    ];
    if cfg.fusion == Fusion::GatedAttention {
        v.push(("gate.weight", vec![cfg.conv2_filters, cfg.instr_dim]));
        v.push(("gate.bias", vec![cfg.conv2_filters]));
    }
    v.extend([
        ("trunk.weight", vec![cfg.hidden, cfg.trunk_input_len()]),
        ("trunk.bias", vec![cfg.hidden]),
        ("value.weight", vec![1, cfg.hidden]),
        ("value.bias", vec![1]),
        ("advantage.weight", vec![cfg.n_actions, cfg.hidden]),
        ("advantage.bias", vec![cfg.n_actions]),
    ]);
    v
}

impl ParameterSet {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let shapes = param_shapes(cfg);
        let get = |name: &str| {
            shapes
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, s)| Tensor::zeros(s))
        };
        let req = |name: &str| get(name).expect("always present");
        Self {
            conv1_w: req("conv1.weight"),
            conv1_b: req("conv1.bias"),
            conv2_w: req("conv2.weight"),
            conv2_b: req("conv2.bias"),
            embedding: req("embedding"),
            gru_w_ih: req("gru.w_ih"),
            gru_w_hh: req("gru.w_hh"),
            gru_b_ih: req("gru.b_ih"),
            gru_b_hh: req("gru.b_hh"),
            gate_w: get("gate.weight"),
            gate_b: get("gate.bias"),
            trunk_w: req("trunk.weight"),
            trunk_b: req("trunk.bias"),
            value_w: req("value.weight"),
            value_b: req("value.bias"),
            adv_w: req("advantage.weight"),
            adv_b: req("advantage.bias"),
        }
    }

    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)` (gain
    /// sqrt(2) ahead of rectifiers, 1 elsewhere), unit-variance embeddings,
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let k2 = (cfg.kernel * cfg.kernel) as f64;
        let relu_gain = 2f64.sqrt();
        let mut fill = |t: &mut Tensor, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in &mut t.data {
                *x = normal.sample(rng);
            }
        };
        fill(
            &mut p.conv1_w,
            relu_gain / (cfg.in_channels as f64 * k2).sqrt(),
        );
        fill(
            &mut p.conv2_w,
            relu_gain / (cfg.conv1_filters as f64 * k2).sqrt(),
        );
        fill(&mut p.embedding, 1.0);
        fill(&mut p.gru_w_ih, 1.0 / (cfg.embed_dim as f64).sqrt());
        fill(&mut p.gru_w_hh, 1.0 / (cfg.instr_dim as f64).sqrt());
        if let Some(g) = p.gate_w.as_mut() {
            fill(g, 1.0 / (cfg.instr_dim as f64).sqrt());
        }
        fill(
            &mut p.trunk_w,
            relu_gain / (cfg.trunk_input_len() as f64).sqrt(),
        );
        fill(&mut p.value_w, 1.0 / (cfg.hidden as f64).sqrt());
        fill(&mut p.adv_w, 1.0 / (cfg.hidden as f64).sqrt());
        p
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("conv1.weight", &self.conv1_w),
            ("conv1.bias", &self.conv1_b),
            ("conv2.weight", &self.conv2_w),
            ("conv2.bias", &self.conv2_b),
            ("embedding", &self.embedding),
            ("gru.w_ih", &self.gru_w_ih),
            ("gru.w_hh", &self.gru_w_hh),
            ("gru.b_ih", &self.gru_b_ih),
            ("gru.b_hh", &self.gru_b_hh),
        ];
        if let (Some(w), Some(b)) = (&self.gate_w, &self.gate_b) {
            v.push(("gate.weight", w));
            v.push(("gate.bias", b));
        }
        v.extend([
            ("trunk.weight", &self.trunk_w),
            ("trunk.bias", &self.trunk_b),
            ("value.weight", &self.value_w),
            ("value.bias", &self.value_b),
            ("advantage.weight", &self.adv_w),
            ("advantage.bias", &self.adv_b),
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v = vec![
            ("conv1.weight", &mut self.conv1_w),
            ("conv1.bias", &mut self.conv1_b),
            ("conv2.weight", &mut self.conv2_w),
            ("conv2.bias", &mut self.conv2_b),
            ("embedding", &mut self.embedding),
            ("gru.w_ih", &mut self.gru_w_ih),
            ("gru.w_hh", &mut self.gru_w_hh),
            ("gru.b_ih", &mut self.gru_b_ih),
            ("gru.b_hh", &mut self.gru_b_hh),
        ];
        if let (Some(w), Some(b)) = (self.gate_w.as_mut(), self.gate_b.as_mut()) {
            v.push(("gate.weight", w));
            v.push(("gate.bias", b));
        }
        v.extend([
            ("trunk.weight", &mut self.trunk_w),
            ("trunk.bias", &mut self.trunk_b),
            ("value.weight", &mut self.value_w),
            ("value.bias", &mut self.value_b),
            ("advantage.weight", &mut self.adv_w),
            ("advantage.bias", &mut self.adv_b),
        ]);
        v
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for (_, t) in self.tensors_mut() {
            t.data.fill(value);
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ParameterSet) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Exact equality of every bit of every value.
    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape == tb.shape
                    && ta
                        .data
                        .iter()
                        .zip(&tb.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
