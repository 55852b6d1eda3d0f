//! Forward and backward passes of the full Q-network.

use super::layers::{
    conv_backward, conv_forward, dueling_backward, dueling_combine, gate_backward, gate_features,
    gru_backward, gru_forward, linear_backward, linear_forward, relu_backward_inplace,
    relu_inplace, GruGrads, GruTrace, GruWeights,
};
use super::params::ParameterSet;
use super::{Fusion, NetworkConfig, QNetError};

fn gru_weights(p: &ParameterSet) -> GruWeights<'_> {
    GruWeights {
        embedding: &p.embedding,
        w_ih: &p.gru_w_ih,
        w_hh: &p.gru_w_hh,
        b_ih: &p.gru_b_ih,
        b_hh: &p.gru_b_hh,
    }
}

fn check_tokens(cfg: &NetworkConfig, tokens: &[usize]) -> Result<(), QNetError> {
    if tokens.is_empty() {
        return Err(QNetError::EmptyInstruction);
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(QNetError::TokenOutOfRange {
            token: t,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

fn check_input(cfg: &NetworkConfig, input: &[f64]) -> Result<(), QNetError> {
    let expected = cfg.input_len();
    if input.len() != expected {
        return Err(QNetError::ShapeMismatch {
            what: "image input".into(),
            expected: vec![expected],
            got: vec![input.len()],
        });
    }
    Ok(())
}

/// Final hidden state of the recurrent encoder over the token embeddings.
pub fn encode_instruction(
    cfg: &NetworkConfig,
    p: &ParameterSet,
    tokens: &[usize],
) -> Result<Vec<f64>, QNetError> {
    check_tokens(cfg, tokens)?;
    Ok(gru_forward(&gru_weights(p), tokens).output)
}

pub(crate) fn encode_instruction_traced(
    cfg: &NetworkConfig,
    p: &ParameterSet,
    tokens: &[usize],
) -> Result<GruTrace, QNetError> {
    check_tokens(cfg, tokens)?;
    Ok(gru_forward(&gru_weights(p), tokens))
}

pub(crate) fn encode_instruction_backward(
    p: &ParameterSet,
    grads: &mut ParameterSet,
    trace: &GruTrace,
    d_out: &[f64],
) {
    let mut g = GruGrads {
        embedding: &mut grads.embedding,
        w_ih: &mut grads.gru_w_ih,
        w_hh: &mut grads.gru_w_hh,
        b_ih: &mut grads.gru_b_ih,
        b_hh: &mut grads.gru_b_hh,
    };
    gru_backward(&gru_weights(p), &mut g, trace, d_out);
}

/// Two rectified valid convolutions; output is `(y, x, channel)` flattened.
pub fn encode_image(
    cfg: &NetworkConfig,
    p: &ParameterSet,
    input: &[f64],
) -> Result<Vec<f64>, QNetError> {
    check_input(cfg, input)?;
    Ok(image_activations(cfg, p, input).1)
}

fn image_activations(cfg: &NetworkConfig, p: &ParameterSet, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (g1, g2) = cfg.conv_geoms();
    let mut a1 = conv_forward(&g1, input, &p.conv1_w, &p.conv1_b);
    relu_inplace(&mut a1);
    let mut a2 = conv_forward(&g2, &a1, &p.conv2_w, &p.conv2_b);
    relu_inplace(&mut a2);
    (a1, a2)
}

/// Per-channel sigmoid gate computed from the instruction vector, broadcast
/// over spatial positions.
pub fn fuse_gated_attention(
    p: &ParameterSet,
    features: &[f64],
    instr: &[f64],
) -> Result<Vec<f64>, QNetError> {
    let (Some(gw), Some(gb)) = (&p.gate_w, &p.gate_b) else {
        return Err(QNetError::MissingGate);
    };
    if instr.len() != gw.shape[1] || !features.len().is_multiple_of(gw.shape[0]) {
        return Err(QNetError::ShapeMismatch {
            what: "gated attention input".into(),
            expected: vec![gw.shape[0], gw.shape[1]],
            got: vec![features.len(), instr.len()],
        });
    }
    Ok(gate_features(features, &linear_forward(gw, gb, instr)))
}

/// Flattened features followed by the instruction vector.
pub fn fuse_concat(features: &[f64], instr: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(features.len() + instr.len());
    out.extend_from_slice(features);
    out.extend_from_slice(instr);
    out
}

/// Activations of one forward pass, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vec<f64>,
    a1: Vec<f64>,
    features: Vec<f64>,
    gate_logits: Option<Vec<f64>>,
    instr: Vec<f64>,
    fused: Vec<f64>,
    hidden: Vec<f64>,
    pub q: Vec<f64>,
}

impl ForwardTrace {
    /// Appends which rectified units are active.
    pub(crate) fn push_active_units(&self, out: &mut Vec<bool>) {
        out.extend(
            self.a1
                .iter()
                .chain(&self.features)
                .chain(&self.hidden)
                .map(|&v| v > 0.0),
        );
    }
}

/// Q-values for one stacked observation given an already encoded instruction.
pub fn forward_encoded(
    cfg: &NetworkConfig,
    p: &ParameterSet,
    input: Vec<f64>,
    instr: &[f64],
) -> Result<ForwardTrace, QNetError> {
    check_input(cfg, &input)?;
    let (a1, features) = image_activations(cfg, p, &input);
    let (gate_logits, fused, kept_instr) = match cfg.fusion {
        Fusion::GatedAttention => {
            let (Some(gw), Some(gb)) = (&p.gate_w, &p.gate_b) else {
                return Err(QNetError::MissingGate);
            };
            let logits = linear_forward(gw, gb, instr);
            let fused = gate_features(&features, &logits);
            (Some(logits), fused, instr.to_vec())
        }
        Fusion::Concatenation => (None, fuse_concat(&features, instr), Vec::new()),
    };
    let mut hidden = linear_forward(&p.trunk_w, &p.trunk_b, &fused);
    relu_inplace(&mut hidden);
    let value = linear_forward(&p.value_w, &p.value_b, &hidden)[0];
    let adv = linear_forward(&p.adv_w, &p.adv_b, &hidden);
    let q = dueling_combine(value, &adv);
    Ok(ForwardTrace {
        input,
        a1,
        features,
        gate_logits,
        instr: kept_instr,
        fused,
        hidden,
        q,
    })
}

/// Q-values for a dense `(y, x, channel)` stacked observation and a token id
/// sequence.
pub fn forward(
    cfg: &NetworkConfig,
    p: &ParameterSet,
    input: &[f64],
    tokens: &[usize],
) -> Result<Vec<f64>, QNetError> {
    let instr = encode_instruction(cfg, p, tokens)?;
    Ok(forward_encoded(cfg, p, input.to_vec(), &instr)?.q)
}

/// Backpropagates `d_q` through one forward pass. Parameter gradients are
/// accumulated into `grads`; the gradient with respect to the instruction
/// vector is accumulated into `d_instr`.
pub fn backward(
    cfg: &NetworkConfig,
    p: &ParameterSet,
    trace: &ForwardTrace,
    d_q: &[f64],
    grads: &mut ParameterSet,
    d_instr: &mut [f64],
) {
    let (d_value, d_adv) = dueling_backward(d_q);
    let mut d_hidden = vec![0.0; trace.hidden.len()];
    linear_backward(
        &p.value_w,
        &trace.hidden,
        &[d_value],
        &mut grads.value_w,
        &mut grads.value_b,
        Some(&mut d_hidden),
    );
    linear_backward(
        &p.adv_w,
        &trace.hidden,
        &d_adv,
        &mut grads.adv_w,
        &mut grads.adv_b,
        Some(&mut d_hidden),
    );
    relu_backward_inplace(&trace.hidden, &mut d_hidden);
    let mut d_fused = vec![0.0; trace.fused.len()];
    linear_backward(
        &p.trunk_w,
        &trace.fused,
        &d_hidden,
        &mut grads.trunk_w,
        &mut grads.trunk_b,
        Some(&mut d_fused),
    );

    let mut d_features = match cfg.fusion {
        Fusion::Concatenation => {
            let n = trace.features.len();
            for (d, g) in d_instr.iter_mut().zip(&d_fused[n..]) {
                *d += g;
            }
            d_fused.truncate(n);
            d_fused
        }
        Fusion::GatedAttention => {
            let logits = trace.gate_logits.as_ref().expect("gated trace has logits");
            let (d_features, d_logits) = gate_backward(&trace.features, logits, &d_fused);
            let gw = p.gate_w.as_ref().expect("gate weights");
            let (Some(dgw), Some(dgb)) = (grads.gate_w.as_mut(), grads.gate_b.as_mut()) else {
                panic!("gradient set lacks gate tensors");
            };
            linear_backward(gw, &trace.instr, &d_logits, dgw, dgb, Some(d_instr));
            d_features
        }
    };
    let (g1, g2) = cfg.conv_geoms();
    relu_backward_inplace(&trace.features, &mut d_features);
    let mut d_a1 = vec![0.0; trace.a1.len()];
    conv_backward(
        &g2,
        &trace.a1,
        &p.conv2_w,
        &d_features,
        &mut grads.conv2_w,
        &mut grads.conv2_b,
        Some(&mut d_a1),
    );
    relu_backward_inplace(&trace.a1, &mut d_a1);
    conv_backward(
        &g1,
        &trace.input,
        &p.conv1_w,
        &d_a1,
        &mut grads.conv1_w,
        &mut grads.conv1_b,
        None,
    );
}
