//! Shared building blocks: parameter construction, the dual-walk graph
//! convolution, the gated recurrent cell, multi-head attention and the
//! embedding MLPs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Architecture, EmbeddingMode, Forecaster, GraphOperators, ModelConfig};
use crate::diffengine::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::Real;

/// Glorot-uniform dense weight.
fn dense_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<Real> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<Real> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(&[fan_in, fan_out], data)
}

fn add_dense(store: &mut ParamStore<Real>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    store.add(&format!("{name}.w"), dense_init(rng, fan_in, fan_out), true);
    store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]), true);
}

fn add_layer_norm(store: &mut ParamStore<Real>, name: &str, dim: usize) {
    store.add(&format!("{name}.gain"), Tensor::filled(&[dim], 1.0), true);
    store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]), true);
}

/// Dual-walk convolution weights: the identity mix always exists; the
/// forward/backward walk mixes exist per diffusion step when the
/// architecture convolves over the graph.
fn add_gconv(
    store: &mut ParamStore<Real>,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    k_diffusion: usize,
    with_graph: bool,
) {
    store.add(&format!("{name}.self"), dense_init(rng, fan_in, fan_out), true);
    if with_graph {
        for k in 1..=k_diffusion {
            store.add(&format!("{name}.fwd{k}"), dense_init(rng, fan_in, fan_out), true);
            store.add(&format!("{name}.bwd{k}"), dense_init(rng, fan_in, fan_out), true);
        }
    }
    store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), true);
}

fn add_attention(store: &mut ParamStore<Real>, rng: &mut ChaCha8Rng, name: &str, dim: usize) {
    for part in ["q", "k", "v", "o"] {
        add_dense(store, rng, &format!("{name}.{part}"), dim, dim);
    }
}

/// Creates the full parameter bank for a configuration, in a fixed order
/// that defines the checkpoint layout. The standardization scaler rides
/// along as two non-trainable entries.
pub fn build_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore<Real> {
    let d = cfg.dim;
    let with_graph = cfg.architecture.uses_graph();
    let mut store = ParamStore::new();

    store.add("scaler.mean", Tensor::scalar(0.0), false);
    store.add("scaler.std", Tensor::scalar(1.0), false);

    if cfg.use_sensor_embedding {
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let data: Vec<Real> = (0..cfg.n_sensors * d).map(|_| normal.sample(rng)).collect();
        store.add("se", Tensor::from_vec(&[cfg.n_sensors, d], data), true);
    }
    add_dense(&mut store, rng, "in_proj", 1, d);
    if cfg.embedding != EmbeddingMode::None {
        let k_in = cfg.embedding_input_width();
        add_dense(&mut store, rng, "emb.fc1", k_in, d);
        add_dense(&mut store, rng, "emb.fc2", d, d);
        add_layer_norm(&mut store, "emb.ln", d);
    }

    match cfg.architecture {
        Architecture::Gcrn | Architecture::Lstm => {
            for section in ["enc", "dec"] {
                for gate in ["reset", "update", "cand"] {
                    add_gconv(
                        &mut store,
                        rng,
                        &format!("{section}.{gate}"),
                        2 * d,
                        d,
                        cfg.k_diffusion,
                        with_graph,
                    );
                }
            }
        }
        Architecture::Gctf | Architecture::Tf => {
            for l in 0..cfg.n_layers {
                let p = format!("enc{l}");
                add_attention(&mut store, rng, &format!("{p}.attn"), d);
                add_layer_norm(&mut store, &format!("{p}.ln1"), d);
                add_gconv(&mut store, rng, &format!("{p}.gc"), d, d, cfg.k_diffusion, with_graph);
                add_layer_norm(&mut store, &format!("{p}.ln2"), d);
                add_dense(&mut store, rng, &format!("{p}.ff1"), d, 4 * d);
                add_dense(&mut store, rng, &format!("{p}.ff2"), 4 * d, d);
                add_layer_norm(&mut store, &format!("{p}.ln3"), d);
            }
            for l in 0..cfg.n_layers {
                let p = format!("dec{l}");
                add_attention(&mut store, rng, &format!("{p}.self_attn"), d);
                add_layer_norm(&mut store, &format!("{p}.ln1"), d);
                add_attention(&mut store, rng, &format!("{p}.cross_attn"), d);
                add_layer_norm(&mut store, &format!("{p}.ln2"), d);
                add_gconv(&mut store, rng, &format!("{p}.gc"), d, d, cfg.k_diffusion, with_graph);
                add_layer_norm(&mut store, &format!("{p}.ln3"), d);
                add_dense(&mut store, rng, &format!("{p}.ff1"), d, 4 * d);
                add_dense(&mut store, rng, &format!("{p}.ff2"), 4 * d, d);
                add_layer_norm(&mut store, &format!("{p}.ln4"), d);
            }
        }
    }
    add_dense(&mut store, rng, "out_proj", d, 1);
    store
}

pub(super) fn pid(store: &ParamStore<Real>, name: &str) -> ParamId {
    store
        .id(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
}

/// `x · W + b` with stored weights.
pub(super) fn dense(
    tape: &mut Tape<Real>,
    store: &ParamStore<Real>,
    name: &str,
    x: NodeId,
) -> NodeId {
    let w = tape.param(store, pid(store, &format!("{name}.w")));
    let b = tape.param(store, pid(store, &format!("{name}.b")));
    let y = tape.matmul(x, w);
    tape.add(y, b)
}

/// Dual-walk graph convolution: identity mix plus, per diffusion step k,
/// the k-step forward and backward walk mixes with independent weights.
/// Walk powers are applied iteratively. With `graph` absent only the
/// identity mix remains, i.e. a dense layer.
pub(super) fn dual_walk_gconv(
    tape: &mut Tape<Real>,
    store: &ParamStore<Real>,
    name: &str,
    graph: Option<&GraphOperators>,
    k_diffusion: usize,
    z: NodeId,
) -> NodeId {
    let w_self = tape.param(store, pid(store, &format!("{name}.self")));
    let mut acc = tape.matmul(z, w_self);
    if let Some(g) = graph {
        let mut z_fwd = z;
        let mut z_bwd = z;
        for k in 1..=k_diffusion {
            z_fwd = tape.sparse_matmul(g.fwd.clone(), z_fwd);
            let w = tape.param(store, pid(store, &format!("{name}.fwd{k}")));
            let term = tape.matmul(z_fwd, w);
            acc = tape.add(acc, term);
            z_bwd = tape.sparse_matmul(g.bwd.clone(), z_bwd);
            let w = tape.param(store, pid(store, &format!("{name}.bwd{k}")));
            let term = tape.matmul(z_bwd, w);
            acc = tape.add(acc, term);
        }
    }
    let bias = tape.param(store, pid(store, &format!("{name}.bias")));
    tape.add(acc, bias)
}

/// Gated recurrent cell where every gate is a dual-walk convolution from
/// the concatenated `[input, state]` (2D channels) down to D channels:
/// reset/update gates are sigmoids, the candidate uses the reset-scaled
/// state, and the new state interpolates via the update gate.
pub(super) fn gcgru_cell(
    tape: &mut Tape<Real>,
    store: &ParamStore<Real>,
    section: &str,
    graph: Option<&GraphOperators>,
    k_diffusion: usize,
    input: NodeId,
    h_prev: NodeId,
    ones: NodeId,
) -> NodeId {
    let xh = tape.concat(input, h_prev);
    let r_pre = dual_walk_gconv(tape, store, &format!("{section}.reset"), graph, k_diffusion, xh);
    let r = tape.sigmoid(r_pre);
    let u_pre = dual_walk_gconv(tape, store, &format!("{section}.update"), graph, k_diffusion, xh);
    let u = tape.sigmoid(u_pre);
    let rh = tape.mul(r, h_prev);
    let xrh = tape.concat(input, rh);
    let c_pre = dual_walk_gconv(tape, store, &format!("{section}.cand"), graph, k_diffusion, xrh);
    let c = tape.tanh(c_pre);
    let uh = tape.mul(u, h_prev);
    let one_minus_u = tape.sub(ones, u);
    let uc = tape.mul(one_minus_u, c);
    tape.add(uh, uc)
}

/// Sinusoidal positional encoding `(len, dim)`:
/// `pe[pos, 2i] = sin(pos / 10000^(2i/dim))`, `pe[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor<Real> {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let exponent = 2.0 * (i / 2) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(&[len, dim], data)
}

/// Multi-head attention block: project, split heads into the batch axis,
/// attend, merge, project out.
pub(super) fn multi_head_attention(
    tape: &mut Tape<Real>,
    store: &ParamStore<Real>,
    name: &str,
    n_heads: usize,
    query_in: NodeId,
    keyval_in: NodeId,
    causal: bool,
) -> NodeId {
    let q = dense(tape, store, &format!("{name}.q"), query_in);
    let k = dense(tape, store, &format!("{name}.k"), keyval_in);
    let v = dense(tape, store, &format!("{name}.v"), keyval_in);
    let qh = tape.split_heads(q, n_heads);
    let kh = tape.split_heads(k, n_heads);
    let vh = tape.split_heads(v, n_heads);
    let out = tape.scaled_dot_attention(qh, kh, vh, causal);
    let merged = tape.merge_heads(out, n_heads);
    dense(tape, store, &format!("{name}.o"), merged)
}

/// Residual connection followed by layer normalization.
pub(super) fn residual_norm(
    tape: &mut Tape<Real>,
    store: &ParamStore<Real>,
    name: &str,
    x: NodeId,
    sublayer: NodeId,
) -> NodeId {
    let sum = tape.add(x, sublayer);
    let gain = tape.param(store, pid(store, &format!("{name}.gain")));
    let bias = tape.param(store, pid(store, &format!("{name}.bias")));
    tape.layer_norm(sum, gain, bias)
}

/// Embedding MLP for one step: `(B, K_in) -> (B, D)`, two dense layers
/// with a relu between and a layer norm on top, then rows repeated per
/// sensor to `(B*N, D)`.
pub(super) fn step_embedding(
    model: &Forecaster,
    tape: &mut Tape<Real>,
    row: &Tensor<Real>,
) -> NodeId {
    let store = &model.store;
    let x = tape.input(row.clone());
    let h = dense(tape, store, "emb.fc1", x);
    let h = tape.relu(h);
    let h = dense(tape, store, "emb.fc2", h);
    let gain = tape.param(store, pid(store, "emb.ln.gain"));
    let bias = tape.param(store, pid(store, "emb.ln.bias"));
    let h = tape.layer_norm(h, gain, bias);
    tape.repeat_rows(h, model.cfg.n_sensors)
}

/// The per-step token: projected value plus sensor embedding plus the
/// step's activity/timestamp embedding (terms that are configured off are
/// simply absent).
pub(super) fn build_step_input(
    model: &Forecaster,
    tape: &mut Tape<Real>,
    value: NodeId,
    se_tiled: Option<NodeId>,
    step_emb: Option<NodeId>,
) -> NodeId {
    let mut x = dense(tape, &model.store, "in_proj", value);
    if let Some(se) = se_tiled {
        x = tape.add(x, se);
    }
    if let Some(emb) = step_emb {
        x = tape.add(x, emb);
    }
    x
}

/// Output projection to one value per sensor row.
pub(super) fn dense_prediction(model: &Forecaster, tape: &mut Tape<Real>, h: NodeId) -> NodeId {
    dense(tape, &model.store, "out_proj", h)
}

/// Sensor-embedding rows tiled across the batch: `(B*N, D)`.
pub(super) fn tiled_sensor_embedding(
    model: &Forecaster,
    tape: &mut Tape<Real>,
    batch: usize,
) -> Option<NodeId> {
    if !model.cfg.use_sensor_embedding {
        return None;
    }
    let se = tape.param(&model.store, pid(&model.store, "se"));
    Some(tape.tile_rows(se, batch))
}
