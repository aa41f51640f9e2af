//! Recurrent seq2seq forward pass (graph-convolutional GRU and its dense
//! variant).
//!
//! The encoder folds P steps into a hidden state; the decoder starts from
//! it with a zero "go" value token and rolls out Q steps, consuming ground
//! truth under teacher forcing or its own predictions otherwise.

use rand::Rng;

use super::layers::{
    build_step_input, dense_prediction, gcgru_cell, step_embedding, tiled_sensor_embedding,
};
use super::{BatchInputs, EmbeddingMode, Forecaster, TeacherInputs};
use crate::diffengine::{NodeId, Tape, Tensor};
use crate::Real;

pub(super) fn forward(
    model: &Forecaster,
    tape: &mut Tape<Real>,
    inputs: &BatchInputs,
    teacher: Option<TeacherInputs>,
) -> NodeId {
    let cfg = &model.cfg;
    let rows = inputs.batch * cfg.n_sensors;
    let graph = model.graph();

    let se = tiled_sensor_embedding(model, tape, inputs.batch);
    let emb_at = |tape: &mut Tape<Real>, step: usize| -> Option<NodeId> {
        if cfg.embedding == EmbeddingMode::None {
            None
        } else {
            Some(step_embedding(model, tape, &inputs.embedding_rows[step]))
        }
    };

    let ones = tape.input(Tensor::filled(&[rows, cfg.dim], 1.0));
    let mut h = tape.input(Tensor::zeros(&[rows, cfg.dim]));
    for t in 0..cfg.p_steps {
        let value = tape.input(inputs.history[t].clone());
        let emb = emb_at(tape, t);
        let x = build_step_input(model, tape, value, se, emb);
        h = gcgru_cell(tape, &model.store, "enc", graph, cfg.k_diffusion, x, h, ones);
    }

    let mut teacher = teacher;
    let mut predictions = Vec::with_capacity(cfg.q_steps);
    // Zero "go" token: the dataset mean in standardized space.
    let mut prev = tape.input(Tensor::zeros(&[rows, 1]));
    for q in 0..cfg.q_steps {
        let emb = emb_at(tape, cfg.p_steps + q);
        let x = build_step_input(model, tape, prev, se, emb);
        h = gcgru_cell(tape, &model.store, "dec", graph, cfg.k_diffusion, x, h, ones);
        let y = dense_prediction(model, tape, h);
        predictions.push(y);
        if q + 1 < cfg.q_steps {
            prev = match teacher.as_mut() {
                Some(t) => {
                    let feed_truth = match t.rng.as_deref_mut() {
                        Some(rng) => rng.random_range(0.0..1.0) < t.feed_probability,
                        None => t.feed_probability >= 1.0,
                    };
                    if feed_truth {
                        tape.input(t.values[q].clone())
                    } else {
                        y
                    }
                }
                None => y,
            };
        }
    }
    tape.stack_steps(&predictions)
}
