//! Transformer seq2seq forward pass (graph-convolutional and dense
//! variants).
//!
//! Tokens are (timestep, sensor) pairs carrying the projected value plus
//! embeddings plus a sinusoidal positional encoding over the time axis.
//! Attention runs per sensor across time; the graph convolution then mixes
//! sensors at every timestep inside each layer. Decoding starts from the
//! last observed value and is causal; without teacher forcing the decoder
//! is re-run per step on its own predictions.

use super::layers::{
    build_step_input, dense, dense_prediction, dual_walk_gconv, multi_head_attention,
    positional_encoding, residual_norm, step_embedding, tiled_sensor_embedding,
};
use super::{BatchInputs, EmbeddingMode, Forecaster, TeacherInputs};
use crate::diffengine::{NodeId, Tape, Tensor};
use crate::Real;

fn emb_at(model: &Forecaster, tape: &mut Tape<Real>, inputs: &BatchInputs, step: usize) -> Option<NodeId> {
    if model.cfg.embedding == EmbeddingMode::None {
        None
    } else {
        Some(step_embedding(model, tape, &inputs.embedding_rows[step]))
    }
}

fn encoder_layer(model: &Forecaster, tape: &mut Tape<Real>, l: usize, x: NodeId) -> NodeId {
    let store = &model.store;
    let p = format!("enc{l}");
    let attn = multi_head_attention(tape, store, &format!("{p}.attn"), model.cfg.n_heads, x, x, false);
    let x = residual_norm(tape, store, &format!("{p}.ln1"), x, attn);
    let gc = dual_walk_gconv(tape, store, &format!("{p}.gc"), model.graph(), model.cfg.k_diffusion, x);
    let x = residual_norm(tape, store, &format!("{p}.ln2"), x, gc);
    let ff = feed_forward(model, tape, &p, x);
    residual_norm(tape, store, &format!("{p}.ln3"), x, ff)
}

fn feed_forward(model: &Forecaster, tape: &mut Tape<Real>, prefix: &str, x: NodeId) -> NodeId {
    let h = dense(tape, &model.store, &format!("{prefix}.ff1"), x);
    let h = tape.relu(h);
    dense(tape, &model.store, &format!("{prefix}.ff2"), h)
}

fn decoder_layer(
    model: &Forecaster,
    tape: &mut Tape<Real>,
    l: usize,
    x: NodeId,
    enc_out: NodeId,
) -> NodeId {
    let store = &model.store;
    let p = format!("dec{l}");
    let self_attn =
        multi_head_attention(tape, store, &format!("{p}.self_attn"), model.cfg.n_heads, x, x, true);
    let x = residual_norm(tape, store, &format!("{p}.ln1"), x, self_attn);
    let cross = multi_head_attention(
        tape,
        store,
        &format!("{p}.cross_attn"),
        model.cfg.n_heads,
        x,
        enc_out,
        false,
    );
    let x = residual_norm(tape, store, &format!("{p}.ln2"), x, cross);
    let gc = dual_walk_gconv(tape, store, &format!("{p}.gc"), model.graph(), model.cfg.k_diffusion, x);
    let x = residual_norm(tape, store, &format!("{p}.ln3"), x, gc);
    let ff = feed_forward(model, tape, &p, x);
    residual_norm(tape, store, &format!("{p}.ln4"), x, ff)
}

/// Runs the decoder over the given value tokens (however many steps are
/// filled in so far) and projects predictions for each position.
fn decode(
    model: &Forecaster,
    tape: &mut Tape<Real>,
    inputs: &BatchInputs,
    se: Option<NodeId>,
    enc_out: NodeId,
    values: &[Tensor<Real>],
) -> NodeId {
    let cfg = &model.cfg;
    let mut tokens = Vec::with_capacity(values.len());
    for (qi, v) in values.iter().enumerate() {
        let value = tape.input(v.clone());
        let emb = emb_at(model, tape, inputs, cfg.p_steps + qi);
        tokens.push(build_step_input(model, tape, value, se, emb));
    }
    let mut x = tape.stack_steps(&tokens);
    let pe = tape.input(positional_encoding(values.len(), cfg.dim));
    x = tape.add(x, pe);
    for l in 0..cfg.n_layers {
        x = decoder_layer(model, tape, l, x, enc_out);
    }
    dense_prediction(model, tape, x)
}

pub(super) fn forward(
    model: &Forecaster,
    tape: &mut Tape<Real>,
    inputs: &BatchInputs,
    teacher: Option<TeacherInputs>,
) -> NodeId {
    let cfg = &model.cfg;
    let rows = inputs.batch * cfg.n_sensors;
    let se = tiled_sensor_embedding(model, tape, inputs.batch);

    let mut enc_tokens = Vec::with_capacity(cfg.p_steps);
    for t in 0..cfg.p_steps {
        let value = tape.input(inputs.history[t].clone());
        let emb = emb_at(model, tape, inputs, t);
        enc_tokens.push(build_step_input(model, tape, value, se, emb));
    }
    let mut enc_x = tape.stack_steps(&enc_tokens);
    let pe = tape.input(positional_encoding(cfg.p_steps, cfg.dim));
    enc_x = tape.add(enc_x, pe);
    for l in 0..cfg.n_layers {
        enc_x = encoder_layer(model, tape, l, enc_x);
    }

    // Start token: the last observed value.
    let start = inputs.history[cfg.p_steps - 1].clone();
    match teacher {
        Some(t) => {
            // One causal pass over [start, truth_0, .., truth_{Q-2}].
            let mut values = Vec::with_capacity(cfg.q_steps);
            values.push(start);
            for q in 0..cfg.q_steps - 1 {
                values.push(t.values[q].clone());
            }
            decode(model, tape, inputs, se, enc_x, &values)
        }
        None => {
            // Autoregressive rollout on own predictions.
            let mut values = vec![start];
            let mut out = None;
            for fill in 1..=cfg.q_steps {
                let preds = decode(model, tape, inputs, se, enc_x, &values);
                if fill < cfg.q_steps {
                    let pv = tape.value(preds);
                    let step: Vec<Real> =
                        (0..rows).map(|r| pv.data()[r * fill + fill - 1]).collect();
                    values.push(Tensor::from_vec(&[rows, 1], step));
                }
                out = Some(preds);
            }
            out.expect("q_steps >= 1")
        }
    }
}
