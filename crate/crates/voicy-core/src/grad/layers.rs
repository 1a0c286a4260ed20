use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{GradError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentCell {
    Gru,
    Lstm,
}

/// The closed layer vocabulary. Recurrent kinds scan over the row (time)
/// axis; `Concat` splices in the next auxiliary input, broadcasting a
/// single-row tensor across time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSpec {
    Linear {
        name: String,
        in_dim: usize,
        out_dim: usize,
    },
    Conv1d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
    },
    GruCell {
        name: String,
        in_dim: usize,
        hidden: usize,
    },
    LstmCell {
        name: String,
        in_dim: usize,
        hidden: usize,
    },
    BidirectionalRecurrent {
        name: String,
        cell: RecurrentCell,
        in_dim: usize,
        hidden: usize,
    },
    Activation {
        activation: Activation,
    },
    TemporalDownsample {
        factor: usize,
    },
    TemporalUpsample {
        factor: usize,
    },
    Concat {
        broadcast_rows: bool,
    },
    MeanPoolTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter store. BTreeMap keeps iteration (and therefore every
/// initialization, update, and serialization order) deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    pub entries: BTreeMap<String, ParamEntry>,
}

impl Parameters {
    pub fn get(&self, path: &str) -> Result<&ParamEntry> {
        self.entries
            .get(path)
            .ok_or_else(|| GradError::UnknownParam(path.to_string()))
    }

    pub fn insert(&mut self, path: &str, tensor: Tensor, trainable: bool) {
        self.entries
            .insert(path.to_string(), ParamEntry { tensor, trainable });
    }

    /// Loads a parameter onto the tape.
    pub fn var(&self, tape: &mut Tape, path: &str) -> Result<Var> {
        let entry = self.get(path)?;
        Ok(tape.param_leaf(path, entry.trainable, entry.tensor.clone()))
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (path, entry) in self.entries.iter_mut() {
            if path.starts_with(prefix) {
                entry.trainable = trainable;
            }
        }
    }

    /// Merges `other` under `prefix.`; path collisions are a caller bug.
    pub fn absorb(&mut self, prefix: &str, other: Parameters) {
        for (path, entry) in other.entries {
            let key = format!("{prefix}.{path}");
            assert!(
                self.entries.insert(key.clone(), entry).is_none(),
                "duplicate parameter path {key}"
            );
        }
    }
}

/// Uniform weights in +/- sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(
    rng: &mut ChaCha20Rng,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape, values }
}

fn init_cell(
    params: &mut Parameters,
    rng: &mut ChaCha20Rng,
    name: &str,
    in_dim: usize,
    hidden: usize,
    gates: usize,
) {
    let g = gates * hidden;
    params.insert(
        &format!("{name}.w_ih"),
        glorot_uniform(rng, vec![in_dim, g], in_dim, g),
        true,
    );
    params.insert(
        &format!("{name}.w_hh"),
        glorot_uniform(rng, vec![hidden, g], hidden, g),
        true,
    );
    params.insert(&format!("{name}.b_ih"), Tensor::zeros(vec![g]), true);
    params.insert(&format!("{name}.b_hh"), Tensor::zeros(vec![g]), true);
}

/// Seeded Glorot-uniform weights, zero biases, in declaration order.
pub fn init_parameters(specs: &[LayerSpec], seed: u64) -> Parameters {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = Parameters::default();
    for spec in specs {
        match spec {
            LayerSpec::Linear {
                name,
                in_dim,
                out_dim,
            } => {
                params.insert(
                    &format!("{name}.w"),
                    glorot_uniform(&mut rng, vec![*in_dim, *out_dim], *in_dim, *out_dim),
                    true,
                );
                params.insert(&format!("{name}.b"), Tensor::zeros(vec![*out_dim]), true);
            }
            LayerSpec::Conv1d {
                name,
                in_channels,
                out_channels,
                kernel_size,
            } => {
                params.insert(
                    &format!("{name}.w"),
                    glorot_uniform(
                        &mut rng,
                        vec![*kernel_size, *in_channels, *out_channels],
                        kernel_size * in_channels,
                        kernel_size * out_channels,
                    ),
                    true,
                );
                params.insert(&format!("{name}.b"), Tensor::zeros(vec![*out_channels]), true);
            }
            LayerSpec::GruCell { name, in_dim, hidden } => {
                init_cell(&mut params, &mut rng, name, *in_dim, *hidden, 3);
            }
            LayerSpec::LstmCell { name, in_dim, hidden } => {
                init_cell(&mut params, &mut rng, name, *in_dim, *hidden, 4);
            }
            LayerSpec::BidirectionalRecurrent {
                name,
                cell,
                in_dim,
                hidden,
            } => {
                let gates = match cell {
                    RecurrentCell::Gru => 3,
                    RecurrentCell::Lstm => 4,
                };
                init_cell(&mut params, &mut rng, &format!("{name}.fwd"), *in_dim, *hidden, gates);
                init_cell(&mut params, &mut rng, &format!("{name}.bwd"), *in_dim, *hidden, gates);
            }
            LayerSpec::Activation { .. }
            | LayerSpec::TemporalDownsample { .. }
            | LayerSpec::TemporalUpsample { .. }
            | LayerSpec::Concat { .. }
            | LayerSpec::MeanPoolTime => {}
        }
    }
    params
}

pub fn linear(tape: &mut Tape, params: &Parameters, name: &str, x: Var) -> Result<Var> {
    let w = params.var(tape, &format!("{name}.w"))?;
    let b = params.var(tape, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

pub fn conv1d(tape: &mut Tape, params: &Parameters, name: &str, x: Var) -> Result<Var> {
    let w = params.var(tape, &format!("{name}.w"))?;
    let b = params.var(tape, &format!("{name}.b"))?;
    tape.conv1d(x, w, b)
}

struct CellVars {
    w_hh: Var,
    b_hh: Var,
    hidden: usize,
}

fn load_cell(
    tape: &mut Tape,
    params: &Parameters,
    name: &str,
    x: Var,
    gates: usize,
) -> Result<(Var, CellVars)> {
    let w_ih = params.var(tape, &format!("{name}.w_ih"))?;
    let b_ih = params.var(tape, &format!("{name}.b_ih"))?;
    let w_hh = params.var(tape, &format!("{name}.w_hh"))?;
    let b_hh = params.var(tape, &format!("{name}.b_hh"))?;
    let hidden = tape.value(w_hh).rows();
    debug_assert_eq!(tape.value(w_hh).cols(), gates * hidden);
    // Input-to-hidden projections for every step in one matmul.
    let gi = tape.matmul(x, w_ih)?;
    let gi = tape.add_bias(gi, b_ih)?;
    Ok((gi, CellVars { w_hh, b_hh, hidden }))
}

/// One GRU step. Gate layout r|z|n, candidate n = tanh(gi_n + r * gh_n),
/// new state (1-z)*n + z*h; with zero parameters and zero state this is the
/// zero state again.
fn gru_step(tape: &mut Tape, gi_t: Var, h: Var, cell: &CellVars) -> Result<Var> {
    let hd = cell.hidden;
    let gh = tape.matmul(h, cell.w_hh)?;
    let gh = tape.add_bias(gh, cell.b_hh)?;
    let gi_r = tape.slice_cols(gi_t, 0, hd)?;
    let gh_r = tape.slice_cols(gh, 0, hd)?;
    let gi_z = tape.slice_cols(gi_t, hd, 2 * hd)?;
    let gh_z = tape.slice_cols(gh, hd, 2 * hd)?;
    let gi_n = tape.slice_cols(gi_t, 2 * hd, 3 * hd)?;
    let gh_n = tape.slice_cols(gh, 2 * hd, 3 * hd)?;

    let r_pre = tape.add(gi_r, gh_r)?;
    let r = tape.sigmoid(r_pre);
    let z_pre = tape.add(gi_z, gh_z)?;
    let z = tape.sigmoid(z_pre);
    let gated = tape.mul(r, gh_n)?;
    let n_pre = tape.add(gi_n, gated)?;
    let n = tape.tanh(n_pre);

    let one_minus_z = tape.affine(z, -1.0, 1.0);
    let blend_new = tape.mul(one_minus_z, n)?;
    let blend_old = tape.mul(z, h)?;
    tape.add(blend_new, blend_old)
}

/// One LSTM step. Gate layout i|f|g|o.
fn lstm_step(tape: &mut Tape, gi_t: Var, h: Var, c: Var, cell: &CellVars) -> Result<(Var, Var)> {
    let hd = cell.hidden;
    let gh = tape.matmul(h, cell.w_hh)?;
    let gh = tape.add_bias(gh, cell.b_hh)?;
    let pre = tape.add(gi_t, gh)?;
    let i_pre = tape.slice_cols(pre, 0, hd)?;
    let f_pre = tape.slice_cols(pre, hd, 2 * hd)?;
    let g_pre = tape.slice_cols(pre, 2 * hd, 3 * hd)?;
    let o_pre = tape.slice_cols(pre, 3 * hd, 4 * hd)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(o, c_act)?;
    Ok((h_new, c_new))
}

/// Unidirectional GRU scan over rows; returns [T, hidden].
pub fn run_gru(tape: &mut Tape, params: &Parameters, name: &str, x: Var) -> Result<Var> {
    let rows = tape.value(x).rows();
    let (gi, cell) = load_cell(tape, params, name, x, 3)?;
    let mut h = tape.leaf(Tensor::zeros(vec![1, cell.hidden]));
    let mut steps = Vec::with_capacity(rows);
    for t in 0..rows {
        let gi_t = tape.slice_rows(gi, t, t + 1)?;
        h = gru_step(tape, gi_t, h, &cell)?;
        steps.push(h);
    }
    tape.stack_rows(&steps)
}

/// Unidirectional LSTM scan over rows; returns [T, hidden].
pub fn run_lstm(tape: &mut Tape, params: &Parameters, name: &str, x: Var) -> Result<Var> {
    let rows = tape.value(x).rows();
    let (gi, cell) = load_cell(tape, params, name, x, 4)?;
    let mut h = tape.leaf(Tensor::zeros(vec![1, cell.hidden]));
    let mut c = tape.leaf(Tensor::zeros(vec![1, cell.hidden]));
    let mut steps = Vec::with_capacity(rows);
    for t in 0..rows {
        let gi_t = tape.slice_rows(gi, t, t + 1)?;
        let (h_new, c_new) = lstm_step(tape, gi_t, h, c, &cell)?;
        h = h_new;
        c = c_new;
        steps.push(h);
    }
    tape.stack_rows(&steps)
}

/// Forward scan concatenated with a time-reversed backward scan: [T, 2·hidden].
pub fn run_bidirectional(
    tape: &mut Tape,
    params: &Parameters,
    name: &str,
    cell: RecurrentCell,
    x: Var,
) -> Result<Var> {
    let scan = |tape: &mut Tape, sub: &str, input: Var| match cell {
        RecurrentCell::Gru => run_gru(tape, params, &format!("{name}.{sub}"), input),
        RecurrentCell::Lstm => run_lstm(tape, params, &format!("{name}.{sub}"), input),
    };
    let fwd = scan(tape, "fwd", x)?;
    let rev_in = tape.reverse_rows(x);
    let bwd_rev = scan(tape, "bwd", rev_in)?;
    let bwd = tape.reverse_rows(bwd_rev);
    tape.concat_cols(&[fwd, bwd])
}

/// Runs a sequential stack. `inputs[0]` is the main input; each `Concat`
/// layer consumes the next auxiliary input in order.
pub fn forward(
    specs: &[LayerSpec],
    params: &Parameters,
    inputs: &[Tensor],
) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let mut aux = inputs[1..].iter();
    let mut x = tape.leaf(inputs[0].clone());
    for spec in specs {
        x = apply_layer(&mut tape, params, spec, x, &mut aux)?;
    }
    Ok((tape, x))
}

pub(crate) fn apply_layer<'a>(
    tape: &mut Tape,
    params: &Parameters,
    spec: &LayerSpec,
    x: Var,
    aux: &mut impl Iterator<Item = &'a Tensor>,
) -> Result<Var> {
    match spec {
        LayerSpec::Linear { name, in_dim, .. } => {
            if tape.value(x).cols() != *in_dim {
                return Err(GradError::ShapeMismatch {
                    layer: name.clone(),
                    expected: format!("{in_dim} input cols"),
                    actual: format!("{:?}", tape.value(x).shape),
                });
            }
            linear(tape, params, name, x)
        }
        LayerSpec::Conv1d {
            name, in_channels, ..
        } => {
            if tape.value(x).cols() != *in_channels {
                return Err(GradError::ShapeMismatch {
                    layer: name.clone(),
                    expected: format!("{in_channels} input channels"),
                    actual: format!("{:?}", tape.value(x).shape),
                });
            }
            conv1d(tape, params, name, x)
        }
        LayerSpec::GruCell { name, .. } => run_gru(tape, params, name, x),
        LayerSpec::LstmCell { name, .. } => run_lstm(tape, params, name, x),
        LayerSpec::BidirectionalRecurrent { name, cell, .. } => {
            run_bidirectional(tape, params, name, *cell, x)
        }
        LayerSpec::Activation { activation } => Ok(match activation {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }),
        LayerSpec::TemporalDownsample { factor } => tape.downsample_rows(x, *factor),
        LayerSpec::TemporalUpsample { factor } => tape.upsample_rows(x, *factor),
        LayerSpec::Concat { broadcast_rows } => {
            let t = aux.next().ok_or_else(|| GradError::ShapeMismatch {
                layer: "concat".into(),
                expected: "an auxiliary input".into(),
                actual: "none left".into(),
            })?;
            let mut a = tape.leaf(t.clone());
            let rows = tape.value(x).rows();
            if *broadcast_rows && tape.value(a).rows() == 1 && rows > 1 {
                a = tape.upsample_rows(a, rows)?;
            }
            tape.concat_cols(&[x, a])
        }
        LayerSpec::MeanPoolTime => Ok(tape.mean_rows(x)),
    }
}
