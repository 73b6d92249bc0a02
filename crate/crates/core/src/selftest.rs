//! Quick gradient, streaming and identity checks runnable from the CLI.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::compute_eer;
use crate::layers::{Activation, DenseParams, DenseVars, FilmParams, FilmVars, SvdfLayerParams, SvdfVars};
use crate::model::{Conditioning, KwsModel, KwsModelConfig};
use crate::numerics::{grad_check, Tape, Tensor, Var};
use crate::seed;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const STREAM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-r..r)).collect()).expect("valid shape")
}

/// `Σ out ⊙ weights`, a scalar whose gradient exercises every output.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn grad(name: &str, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, params: &[Tensor]) -> Result<Check> {
    let r = grad_check(f, params, GRAD_EPS, GRAD_TOL)?;
    Ok(Check {
        name: format!("grad_check {name}"),
        passed: r.passed,
        detail: format!("max rel err {:.2e} over {} entries", r.max_rel_error, r.checked),
    })
}

/// Tiny conditioned model with non-trivial FiLM weights.
pub fn tiny_conditioned_model(seed_: u64) -> Result<KwsModel> {
    let cfg = KwsModelConfig {
        input_dim: 4,
        encoder: vec![crate::model::EncoderLayerConfig {
            nodes: 5,
            memory: 3,
            bottleneck: 3,
        }],
        decoder: vec![crate::model::DecoderLayerConfig { nodes: 4, memory: 2 }],
        num_classes: 2,
        conditioning: Conditioning::Film { embedding_dim: 3 },
    };
    let mut model = KwsModel::build(&cfg, seed_)?;
    let mut rng = seed::rng(seed::derive(seed_, "selftest/film"));
    if let Some(film) = model.film.as_mut() {
        for t in [&mut film.w_gamma, &mut film.b_gamma, &mut film.w_beta, &mut film.b_beta] {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    Ok(model)
}

pub fn gradient_checks(seed_: u64) -> Result<Vec<Check>> {
    let mut rng = seed::rng(seed::derive(seed_, "selftest/grad"));
    let mut out = Vec::new();

    let svdf = SvdfLayerParams::init(3, 4, 3, &mut rng)?;
    let x = uniform(&mut rng, &[6, 4], 1.0);
    let c = uniform(&mut rng, &[6, 3], 1.0);
    let mut bias = svdf.bias.clone();
    bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(0.1..0.4));
    out.push(grad(
        "svdf",
        |t, v| {
            let xv = t.constant(x.clone());
            let vars = SvdfVars {
                feature_filters: v[0],
                time_filters: v[1],
                bias: v[2],
            };
            let y = vars.forward(t, xv)?;
            weighted_sum(t, y, &c)
        },
        &[svdf.feature_filters.clone(), svdf.time_filters.clone(), bias],
    )?);

    for (name, act) in [("dense relu", Activation::Relu), ("dense linear", Activation::None)] {
        let d = DenseParams::init(3, 4, act, &mut rng)?;
        let x = uniform(&mut rng, &[5, 4], 1.0);
        let c = uniform(&mut rng, &[5, 3], 1.0);
        out.push(grad(
            name,
            |t, v| {
                let xv = t.constant(x.clone());
                let vars = DenseVars {
                    weights: v[0],
                    bias: v[1],
                    activation: act,
                };
                let y = vars.forward(t, xv)?;
                weighted_sum(t, y, &c)
            },
            &[d.weights.clone(), d.bias.clone()],
        )?);
    }

    let film = FilmParams {
        w_gamma: uniform(&mut rng, &[3, 2], 1.0),
        b_gamma: uniform(&mut rng, &[3], 1.0),
        w_beta: uniform(&mut rng, &[3, 2], 1.0),
        b_beta: uniform(&mut rng, &[3], 1.0),
    };
    let l = uniform(&mut rng, &[4, 3], 1.0);
    let e = uniform(&mut rng, &[1, 2], 1.0);
    let c = uniform(&mut rng, &[4, 3], 1.0);
    out.push(grad(
        "film projection",
        |t, v| {
            let vars = FilmVars {
                w_gamma: v[0],
                b_gamma: v[1],
                w_beta: v[2],
                b_beta: v[3],
            };
            let ev = t.constant(e.clone());
            let (g, b) = vars.project(t, ev)?;
            let y = FilmVars::apply(t, v[4], g, b)?;
            weighted_sum(t, y, &c)
        },
        &[film.w_gamma, film.b_gamma, film.w_beta, film.b_beta, l],
    )?);

    let logits = uniform(&mut rng, &[5, 3], 3.0);
    let labels = [0, 2, 1, 1, 0];
    out.push(grad("softmax cross-entropy", |t, v| t.softmax_cross_entropy(v[0], &labels), &[logits])?);

    let model = tiny_conditioned_model(seed_)?;
    let xs = [uniform(&mut rng, &[7, 4], 1.0), uniform(&mut rng, &[5, 4], 1.0)];
    let ys = [vec![0, 0, 1, 1, 1, 0, 0], vec![1, 0, 0, 1, 0]];
    let es = [uniform(&mut rng, &[3], 1.0), uniform(&mut rng, &[3], 1.0)];
    let params = model.param_tensors();
    out.push(grad(
        "conditioned model loss",
        |t, v| {
            let bound = model.bind_vars(v)?;
            let mut total = None;
            for ((x, y), e) in xs.iter().zip(&ys).zip(&es) {
                let logits = bound.forward(t, x, Some(e.data()))?;
                let ce = t.softmax_cross_entropy(logits, y)?;
                total = Some(match total {
                    None => ce,
                    Some(acc) => t.add(acc, ce)?,
                });
            }
            Ok(t.scale(total.expect("two utterances"), 0.5))
        },
        &params,
    )?);
    Ok(out)
}

pub fn streaming_checks(seed_: u64, cases: usize) -> Result<Vec<Check>> {
    let mut rng = seed::rng(seed::derive(seed_, "selftest/stream"));
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let nodes = rng.random_range(1..6);
        let input = rng.random_range(1..6);
        let memory = rng.random_range(1..6);
        let frames = rng.random_range(1..20);
        let layer = SvdfLayerParams::init(nodes, input, memory, &mut rng)?;
        let x = uniform(&mut rng, &[frames, input], 2.0);
        let batch = layer.forward_batch(&x)?;
        let mut state = layer.new_state();
        for f in 0..frames {
            let y = layer.forward_stream(&mut state, x.row(f))?;
            for (a, b) in y.iter().zip(batch.row(f)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let model = KwsModel::build(&KwsModelConfig::desk(6, Conditioning::Film { embedding_dim: 4 }), seed_)?;
    let x = uniform(&mut rng, &[30, 6], 2.0);
    let e = uniform(&mut rng, &[4], 1.0);
    let batch = model.posteriors(&x, Some(e.data()))?;
    let mut session = model.new_session(Some(e.data()))?;
    let mut model_worst: f64 = 0.0;
    for f in 0..30 {
        let p = model.stream_step(&mut session, x.row(f))?;
        for (a, b) in p.iter().zip(batch.row(f)) {
            model_worst = model_worst.max((a - b).abs());
        }
    }
    Ok(vec![
        Check {
            name: format!("svdf streaming == batch ({cases} cases)"),
            passed: worst <= STREAM_TOL,
            detail: format!("max abs diff {worst:.2e}"),
        },
        Check {
            name: "model streaming == batch".into(),
            passed: model_worst <= STREAM_TOL,
            detail: format!("max abs diff {model_worst:.2e}"),
        },
    ])
}

pub fn film_identity_check(seed_: u64, cases: usize) -> Result<Check> {
    let mut rng = seed::rng(seed::derive(seed_, "selftest/film-identity"));
    let base_cfg = KwsModelConfig::desk(5, Conditioning::None);
    let base = KwsModel::build(&base_cfg, seed_)?;
    let cond = KwsModel::build(&base_cfg.with_conditioning(Conditioning::Film { embedding_dim: 6 }), seed_)?;
    let mut mismatches = 0;
    for _ in 0..cases {
        let frames = rng.random_range(1..25);
        let x = uniform(&mut rng, &[frames, 5], 3.0);
        let e = uniform(&mut rng, &[6], 10.0);
        if base.forward(&x, None)? != cond.forward(&x, Some(e.data()))? {
            mismatches += 1;
        }
    }
    Ok(Check {
        name: format!("film identity at init ({cases} cases)"),
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatching cases"),
    })
}

pub fn eer_checks() -> Result<Check> {
    let a = compute_eer(&[0.9, 0.8], &[0.1, 0.2])?.eer;
    let b = compute_eer(&[0.8, 0.4], &[0.6, 0.2])?.eer;
    let c = compute_eer(&[0.2, 0.5], &[0.2, 0.5])?.eer;
    Ok(Check {
        name: "eer hand cases".into(),
        passed: a == 0.0 && b == 0.5 && c == 0.5,
        detail: format!("{a} / {b} / {c}"),
    })
}

/// Every check, in a fixed order.
pub fn run(seed_: u64) -> Result<Vec<Check>> {
    let mut out = gradient_checks(seed_)?;
    out.extend(streaming_checks(seed_, 100)?);
    out.push(film_identity_check(seed_, 50)?);
    out.push(eer_checks()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run(11).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
