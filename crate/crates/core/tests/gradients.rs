//! Reverse-mode gradients against central finite differences in f64.

use cellscale_core::model::{BatchInput, ModelConfig, ParameterSet};
use cellscale_core::rng::stream;
use cellscale_core::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, "grad-input");
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar objective `sum(build(inputs) * probe)` with a fixed random probe so
/// every output element contributes a distinct weight.
fn objective<F>(build: &F, inputs: &[Tensor<f64>]) -> (Tape<f64>, Var, Vec<Var>)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()).unwrap())
        .collect();
    let out = build(&mut tape, &vars);
    let probe = random(tape.value(out).shape(), 999);
    let probe = tape.leaf(probe).unwrap();
    let weighted = tape.mul(out, probe).unwrap();
    let loss = tape.sum(weighted).unwrap();
    (tape, loss, vars)
}

fn max_relative_error<F>(build: F, inputs: Vec<Tensor<f64>>) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let (tape, loss, vars) = objective(&build, &inputs);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..inputs[i].len() {
            let eval = |delta: f64| {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] += delta;
                let (t, l, _) = objective(&build, &shifted);
                t.value(l).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

const TOL: f64 = 1e-6;

#[test]
fn matmul_and_linear() {
    let e = max_relative_error(
        |t, v| t.matmul(v[0], v[1]).unwrap(),
        vec![random(&[3, 4], 1), random(&[4, 2], 2)],
    );
    assert!(e < TOL, "matmul {e}");
    let e = max_relative_error(
        |t, v| t.linear(v[0], v[1], v[2]).unwrap(),
        vec![random(&[5, 3], 3), random(&[3, 4], 4), random(&[4], 5)],
    );
    assert!(e < TOL, "linear {e}");
}

#[test]
fn elementwise_ops() {
    let e = max_relative_error(
        |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let m = t.mul(s, v[0]).unwrap();
            t.scale(m, 0.7).unwrap()
        },
        vec![random(&[2, 3], 6), random(&[2, 3], 7)],
    );
    assert!(e < TOL, "add/mul/scale {e}");
    let e = max_relative_error(|t, v| t.gelu(v[0]).unwrap(), vec![random(&[4, 5], 8)]);
    assert!(e < TOL, "gelu {e}");
}

#[test]
fn layer_norm_and_softmax() {
    let e = max_relative_error(
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        vec![random(&[4, 6], 9), random(&[6], 10), random(&[6], 11)],
    );
    assert!(e < TOL, "layer_norm {e}");
    let e = max_relative_error(
        |t, v| t.softmax_rows(v[0]).unwrap(),
        vec![random(&[3, 5], 12)],
    );
    assert!(e < TOL, "softmax {e}");
}

#[test]
fn attention_plumbing() {
    let e = max_relative_error(
        |t, v| t.bmm(v[0], v[1], true).unwrap(),
        vec![random(&[2, 3, 4], 13), random(&[2, 5, 4], 14)],
    );
    assert!(e < TOL, "bmm transposed {e}");
    let e = max_relative_error(
        |t, v| t.bmm(v[0], v[1], false).unwrap(),
        vec![random(&[2, 3, 4], 15), random(&[2, 4, 5], 16)],
    );
    assert!(e < TOL, "bmm {e}");
    let e = max_relative_error(
        |t, v| {
            let s = t.split_heads(v[0], 2, 3).unwrap();
            let s = t.mul(s, s).unwrap();
            t.merge_heads(s, 2, 3).unwrap()
        },
        vec![random(&[2 * 4, 3 * 2], 17)],
    );
    assert!(e < TOL, "split/merge heads {e}");
}

#[test]
fn embedding_and_masked_loss() {
    let ids = [3usize, 0, 2, 1, 0, 3];
    let values = [0.5, -1.0, 2.0, 0.1, 0.7, -0.3];
    let mask = [false, true, false, true, false, false];
    let e = max_relative_error(
        |t, v| {
            t.embed(v[0], v[1], v[2], v[3], &ids, &values, &mask)
                .unwrap()
        },
        vec![
            random(&[4, 3], 18),
            random(&[1, 3], 19),
            random(&[3], 20),
            random(&[3], 21),
        ],
    );
    assert!(e < TOL, "embed {e}");
    let target = [0.2, 0.4, -1.0, 3.0];
    let e = max_relative_error(
        |t, v| {
            t.masked_mse(v[0], &target, &[true, false, true, true])
                .unwrap()
        },
        vec![random(&[4, 1], 22)],
    );
    assert!(e < TOL, "masked_mse {e}");
}

/// Parameters with every tensor randomized, so zero-initialized biases, unit
/// gains and the mask token all carry generic gradients.
fn generic_params(config: &ModelConfig, seed: u64) -> ParameterSet<f64> {
    let mut p = ParameterSet::<f64>::init(config, seed).unwrap();
    let mut rng = stream(seed, "perturb");
    for (_, _, t) in p.named_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
    p
}

#[test]
fn full_model_matches_finite_differences() {
    let config = ModelConfig::custom(16, 8, 2, 2, 4).unwrap();
    let params = generic_params(&config, 5);
    let (cells, tokens) = (2, 16);
    let mut rng = stream(6, "inputs");
    let ids: Vec<usize> = (0..cells)
        .flat_map(|c| (0..tokens).map(move |g| (g * 5 + c) % 16))
        .collect();
    let values: Vec<f64> = (0..cells * tokens)
        .map(|_| rng.random_range(0.0..3.0))
        .collect();
    let mask: Vec<bool> = (0..cells * tokens).map(|i| i % 5 == 1).collect();
    let input = BatchInput {
        tokens_per_cell: tokens,
        gene_ids: &ids,
        values: &values,
        mask: &mask,
    };
    let loss_of = |p: &ParameterSet<f64>| {
        let mut tape = Tape::new();
        let out = p.forward_batch(&mut tape, &input).unwrap();
        let loss = tape.masked_mse(out.predictions, &values, &mask).unwrap();
        (tape, loss, out.params)
    };

    let (tape, loss, vars) = loss_of(&params);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-4;
    let names: Vec<String> = params.named().into_iter().map(|(n, _, _)| n).collect();
    for (k, name) in names.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let mut worst: f64 = 0.0;
        for j in 0..analytic.len() {
            let eval = |delta: f64| {
                let mut q = params.clone();
                q.named_mut()[k].2.data_mut()[j] += delta;
                let (t, l, _) = loss_of(&q);
                t.value(l).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[j];
            // Key biases have an exactly zero gradient (softmax ignores a shift);
            // the floor keeps rounding noise from reading as relative error.
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
        assert!(worst < 1e-4, "{name}: max relative error {worst}");
    }
}
