use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::layers::{init_parameters, Activation, LayerSpec, RecurrentCell};
use super::tape::{Tape, Var};
use super::{Parameters, Result, Tensor};

/// Above this many trainable scalars the checker perturbs a seeded random
/// subsample instead of every coordinate.
const EXHAUSTIVE_LIMIT: usize = 10_000;
const SUBSAMPLE_SEED: u64 = 0x5eed_c0de;

/// Outcome of a finite-difference sweep: the worst relative error and the
/// parameter coordinate it occurred at.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub worst: f64,
    /// Path of the worst coordinate; empty when nothing was trainable.
    pub path: String,
    pub coord: usize,
}

/// Compares analytic gradients of a scalar-valued builder against central
/// finite differences over the trainable parameters. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1).
pub fn gradient_check_report<F>(params: &Parameters, eps: f64, build: F) -> Result<CheckReport>
where
    F: Fn(&Parameters, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(params, &mut tape)?;
    let analytic = tape.backward(loss)?;

    let eval = |p: &Parameters| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(p, &mut tape)?;
        Ok(tape.value(loss).values[0])
    };

    // (path, coordinate) pairs in deterministic order.
    let coords: Vec<(String, usize)> = params
        .entries
        .iter()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(path, e)| (0..e.tensor.numel()).map(move |i| (path.clone(), i)))
        .collect();
    let selected: Vec<(String, usize)> = if coords.len() > EXHAUSTIVE_LIMIT {
        let mut rng = ChaCha20Rng::seed_from_u64(SUBSAMPLE_SEED);
        let mut picks: Vec<usize> = sample(&mut rng, coords.len(), EXHAUSTIVE_LIMIT).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| coords[i].clone()).collect()
    } else {
        coords
    };

    let mut report = CheckReport {
        worst: 0.0,
        path: String::new(),
        coord: 0,
    };
    let mut perturbed = params.clone();
    for (path, i) in selected {
        let base = perturbed.entries[&path].tensor.values[i];
        perturbed.entries.get_mut(&path).unwrap().tensor.values[i] = base + eps;
        let up = eval(&perturbed)?;
        perturbed.entries.get_mut(&path).unwrap().tensor.values[i] = base - eps;
        let down = eval(&perturbed)?;
        perturbed.entries.get_mut(&path).unwrap().tensor.values[i] = base;

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(&path).map(|t| t.values[i]).unwrap_or(0.0);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if rel > report.worst {
            report.worst = rel;
            report.path = path;
            report.coord = i;
        }
    }
    Ok(report)
}

/// [`gradient_check_report`] reduced to the worst relative error.
pub fn gradient_check<F>(params: &Parameters, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&Parameters, &mut Tape) -> Result<Var>,
{
    Ok(gradient_check_report(params, eps, build)?.worst)
}

fn layers_builder<'a>(
    specs: &'a [LayerSpec],
    inputs: &'a [Tensor],
) -> impl Fn(&Parameters, &mut Tape) -> Result<Var> + 'a {
    move |p, tape| {
        let mut aux = inputs[1..].iter();
        let mut x = tape.leaf(inputs[0].clone());
        for spec in specs {
            x = super::layers::apply_layer(tape, p, spec, x, &mut aux)?;
        }
        Ok(tape.sum_all(x))
    }
}

/// Convenience wrapper: runs a layer stack on fixed inputs and checks the
/// gradient of the summed output.
pub fn gradient_check_layers(
    specs: &[LayerSpec],
    params: &Parameters,
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64> {
    gradient_check(params, eps, layers_builder(specs, inputs))
}

/// One named, self-contained check: a layer stack with its parameters and
/// inputs already built.
#[derive(Debug, Clone)]
pub struct CheckCase {
    pub name: &'static str,
    pub specs: Vec<LayerSpec>,
    pub params: Parameters,
    pub inputs: Vec<Tensor>,
}

impl CheckCase {
    pub fn run(&self, eps: f64) -> Result<CheckReport> {
        gradient_check_report(&self.params, eps, layers_builder(&self.specs, &self.inputs))
    }
}

fn random_input(rng: &mut ChaCha20Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor {
        shape: vec![rows, cols],
        values: (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
    }
}

/// A check per layer kind (each activation and each recurrent flavor counts
/// as its own kind), `units` wide over `steps` time rows. The relu case gets
/// engineered weights that keep every preactivation at least 0.2 from the
/// kink, since finite differences are meaningless across it.
pub fn layer_battery(units: usize, steps: usize, seed: u64) -> Vec<CheckCase> {
    let u = units.max(2);
    let t = steps.max(2);
    let mut cases = Vec::new();
    let mut build = |name: &'static str,
                     specs: Vec<LayerSpec>,
                     shapes: &[(usize, usize)],
                     range: (f64, f64)| {
        let idx = cases.len() as u64;
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(1 + idx));
        let params = init_parameters(&specs, seed.wrapping_add(101 + idx));
        let inputs = shapes
            .iter()
            .map(|&(r, c)| random_input(&mut rng, r, c, range.0, range.1))
            .collect();
        cases.push(CheckCase {
            name,
            specs,
            params,
            inputs,
        });
    };

    let lin = |name: &str, i: usize, o: usize| LayerSpec::Linear {
        name: name.into(),
        in_dim: i,
        out_dim: o,
    };
    let act = |a: Activation| LayerSpec::Activation { activation: a };

    build("linear", vec![lin("l", u, u)], &[(t, u)], (-1.0, 1.0));
    build(
        "tanh",
        vec![lin("l", u, u), act(Activation::Tanh)],
        &[(t, u)],
        (-1.0, 1.0),
    );
    build(
        "sigmoid",
        vec![lin("l", u, u), act(Activation::Sigmoid)],
        &[(t, u)],
        (-1.0, 1.0),
    );
    build(
        "relu",
        vec![lin("l", u, u), act(Activation::Relu)],
        &[(t, u)],
        (0.05, 0.3),
    );
    build(
        "conv1d",
        vec![LayerSpec::Conv1d {
            name: "c".into(),
            in_channels: u,
            out_channels: u,
            kernel_size: 5,
        }],
        &[(t, u)],
        (-1.0, 1.0),
    );
    build(
        "gru",
        vec![LayerSpec::GruCell {
            name: "g".into(),
            in_dim: u,
            hidden: u,
        }],
        &[(t, u)],
        (-1.0, 1.0),
    );
    build(
        "lstm",
        vec![LayerSpec::LstmCell {
            name: "s".into(),
            in_dim: u,
            hidden: u,
        }],
        &[(t, u)],
        (-1.0, 1.0),
    );
    build(
        "bigru",
        vec![LayerSpec::BidirectionalRecurrent {
            name: "b".into(),
            cell: RecurrentCell::Gru,
            in_dim: u,
            hidden: u,
        }],
        &[(t, u)],
        (-1.0, 1.0),
    );
    build(
        "bilstm",
        vec![LayerSpec::BidirectionalRecurrent {
            name: "b".into(),
            cell: RecurrentCell::Lstm,
            in_dim: u,
            hidden: u,
        }],
        &[(t, u)],
        (-1.0, 1.0),
    );
    build(
        "downsample",
        vec![lin("l", u, u), LayerSpec::TemporalDownsample { factor: 2 }],
        &[(t, u)],
        (-1.0, 1.0),
    );
    build(
        "upsample",
        vec![lin("l", u, u), LayerSpec::TemporalUpsample { factor: 2 }],
        &[(t, u)],
        (-1.0, 1.0),
    );
    build(
        "concat",
        vec![
            LayerSpec::Concat {
                broadcast_rows: true,
            },
            lin("l", 2 * u, u),
        ],
        &[(t, u), (1, u)],
        (-1.0, 1.0),
    );
    build(
        "meanpool",
        vec![
            LayerSpec::GruCell {
                name: "g".into(),
                in_dim: u,
                hidden: u,
            },
            LayerSpec::MeanPoolTime,
            lin("l", u, u),
        ],
        &[(t, u)],
        (-1.0, 1.0),
    );

    // Pin the relu preactivations: identity weights plus a +-0.5 bias
    // comb, inputs in (0.05, 0.3), so nothing sits near zero.
    let relu = cases.iter_mut().find(|c| c.name == "relu").expect("relu case");
    let mut w = Tensor::zeros(vec![u, u]);
    for i in 0..u {
        w.values[i * u + i] = 1.0;
    }
    let b = Tensor {
        shape: vec![u],
        values: (0..u).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect(),
    };
    relu.params.insert("l.w", w, true);
    relu.params.insert("l.b", b, true);

    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::layers::{init_parameters, Activation, RecurrentCell};
    use rand::Rng;

    fn seeded_input(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_tanh_stack_is_tight() {
        let specs = [
            LayerSpec::Linear {
                name: "l1".into(),
                in_dim: 6,
                out_dim: 5,
            },
            LayerSpec::Activation {
                activation: Activation::Tanh,
            },
            LayerSpec::Linear {
                name: "l2".into(),
                in_dim: 5,
                out_dim: 3,
            },
        ];
        let params = init_parameters(&specs, 1);
        let x = seeded_input(4, 6, 2, -1.0, 1.0);
        let err = gradient_check_layers(&specs, &params, &[x], 1e-4).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let specs = [
            LayerSpec::Linear {
                name: "l".into(),
                in_dim: 4,
                out_dim: 4,
            },
            LayerSpec::Activation {
                activation: Activation::Relu,
            },
        ];
        let mut params = init_parameters(&specs, 3);
        // Keep every preactivation away from zero: identity weights plus a
        // strong bias offset on half the units.
        params.insert(
            "l.w",
            Tensor::new(
                vec![4, 4],
                vec![
                    1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
                ],
            )
            .unwrap(),
            true,
        );
        params.insert(
            "l.b",
            Tensor::new(vec![4], vec![0.5, -0.5, 0.5, -0.5]).unwrap(),
            true,
        );
        let x = seeded_input(3, 4, 4, 0.05, 0.3);
        let err = gradient_check_layers(&specs, &params, &[x], 1e-4).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn bidirectional_recurrent_over_eight_steps() {
        let specs = [LayerSpec::BidirectionalRecurrent {
            name: "b".into(),
            cell: RecurrentCell::Gru,
            in_dim: 3,
            hidden: 4,
        }];
        let params = init_parameters(&specs, 5);
        let x = seeded_input(8, 3, 6, -1.0, 1.0);
        let err = gradient_check_layers(&specs, &params, &[x], 1e-4).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn lstm_and_pooling_compose() {
        let specs = [
            LayerSpec::Conv1d {
                name: "c".into(),
                in_channels: 3,
                out_channels: 4,
                kernel_size: 3,
            },
            LayerSpec::LstmCell {
                name: "l".into(),
                in_dim: 4,
                hidden: 4,
            },
            LayerSpec::MeanPoolTime,
            LayerSpec::Linear {
                name: "proj".into(),
                in_dim: 4,
                out_dim: 2,
            },
        ];
        let params = init_parameters(&specs, 8);
        let x = seeded_input(6, 3, 9, -1.0, 1.0);
        let err = gradient_check_layers(&specs, &params, &[x], 1e-4).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn embedding_and_normalize_through_custom_graph() {
        let mut params = Parameters::default();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        params.insert(
            "emb",
            Tensor::new(vec![5, 3], (0..15).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap(),
            true,
        );
        params.insert(
            "w",
            Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap(),
            true,
        );
        let err = gradient_check(&params, 1e-4, |p, tape| {
            let table = p.var(tape, "emb")?;
            let e = tape.embedding(table, &[1, 4, 2, 2])?;
            let n = tape.l2_normalize_rows(e);
            let w = p.var(tape, "w")?;
            let y = tape.matmul(n, w)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn battery_covers_every_layer_kind() {
        let names: Vec<&str> = layer_battery(4, 3, 1).iter().map(|c| c.name).collect();
        assert_eq!(
            names,
            [
                "linear", "tanh", "sigmoid", "relu", "conv1d", "gru", "lstm", "bigru", "bilstm",
                "downsample", "upsample", "concat", "meanpool"
            ]
        );
    }

    #[test]
    fn battery_passes_at_moderate_size() {
        for case in layer_battery(6, 5, 9) {
            let report = case.run(1e-5).unwrap();
            assert!(
                report.worst < 1e-4,
                "{}: relative error {} at {}[{}]",
                case.name,
                report.worst,
                report.path,
                report.coord
            );
        }
    }

    #[test]
    fn report_locates_the_worst_coordinate() {
        let specs = [LayerSpec::Linear {
            name: "l".into(),
            in_dim: 3,
            out_dim: 2,
        }];
        let params = init_parameters(&specs, 7);
        let x = seeded_input(4, 3, 8, -1.0, 1.0);
        let report =
            gradient_check_report(&params, 1e-5, layers_builder(&specs, &[x])).unwrap();
        assert!(!report.path.is_empty());
        assert!(report.path == "l.w" || report.path == "l.b");
        assert!(report.coord < 6);
    }

    #[test]
    fn mae_against_a_stop_grad_target() {
        let mut params = Parameters::default();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        params.insert(
            "a",
            Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap(),
            true,
        );
        let target = Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(-1.0..-0.1)).collect())
            .unwrap();
        let err = gradient_check(&params, 1e-4, |p, tape| {
            let a = p.var(tape, "a")?;
            let t = tape.leaf(target.clone());
            let frozen = tape.stop_grad(t);
            tape.mae(a, frozen)
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
