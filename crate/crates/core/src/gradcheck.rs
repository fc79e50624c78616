//! Central finite-difference verification of analytic gradients.
//!
//! Every graph primitive is registered here with a generator for random
//! inputs and a forward builder that reduces to a scalar. The check
//! compares reverse-mode gradients against central differences
//! `(f(x+h) − f(x−h)) / 2h` entry by entry, using the relative error
//! `|analytic − numeric| / max(1, |numeric|)`.

use std::collections::BTreeMap;

use crate::graph::{Tape, Value};
use crate::rng::Rng;
use crate::tensor::{NumericError, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Named inputs for one check instance.
pub type Inputs = BTreeMap<String, Tensor>;

/// Builds the scalar output from variables already bound on the tape.
pub type Forward = dyn Fn(&Tape, &BTreeMap<String, Value>) -> Result<Value, NumericError>;

/// Result of checking one operation.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    /// Input name and flat index where the worst error occurred.
    pub worst_at: Option<(String, usize)>,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `forward` against central finite
/// differences over every entry of every input.
pub fn check_gradients(
    name: &str,
    inputs: &Inputs,
    forward: &Forward,
    step: f64,
    tolerance: f64,
) -> Result<CheckOutcome, NumericError> {
    let eval = |perturbed: &Inputs| -> Result<f64, NumericError> {
        let tape = Tape::new();
        let mut bound = BTreeMap::new();
        for (k, v) in perturbed {
            bound.insert(k.clone(), tape.var(k.clone(), v.clone()));
        }
        let out = forward(&tape, &bound)?;
        Ok(tape.scalar_of(out))
    };

    // Analytic pass.
    let tape = Tape::new();
    let mut bound = BTreeMap::new();
    for (k, v) in inputs {
        bound.insert(k.clone(), tape.var(k.clone(), v.clone()));
    }
    let out = forward(&tape, &bound)?;
    let analytic = tape.gradient(out)?;

    let mut max_rel_err = 0.0;
    let mut worst_at = None;
    let mut work = inputs.clone();
    for (pname, tensor) in inputs {
        for idx in 0..tensor.len() {
            let orig = tensor.data()[idx];
            work.get_mut(pname).unwrap().data_mut()[idx] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(pname).unwrap().data_mut()[idx] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(pname).unwrap().data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pname].data()[idx];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_at = Some((pname.clone(), idx));
            }
        }
    }

    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_err,
        worst_at,
        passed: max_rel_err <= tolerance,
    })
}

/// A registered gradient check: generates its own random inputs from a
/// seed and knows how to build its forward pass.
pub struct GradCheckCase {
    pub name: &'static str,
    pub gen: Box<dyn Fn(&mut Rng) -> Inputs + Send + Sync>,
    pub forward: Box<Forward>,
}

fn randn(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Random values bounded away from zero, for kinked ops like relu.
fn rand_off_kink(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            sign * rng.uniform_in(0.1, 2.0)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn one(name: &str, t: Tensor) -> Inputs {
    let mut m = Inputs::new();
    m.insert(name.to_string(), t);
    m
}

/// All primitive gradient checks, one per graph operation.
pub fn primitive_cases() -> Vec<GradCheckCase> {
    vec![
        GradCheckCase {
            name: "matmul",
            gen: Box::new(|rng| {
                let mut m = one("a", randn(rng, vec![3, 4]));
                m.insert("b".into(), randn(rng, vec![4, 2]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.matmul(v["a"], v["b"])?;
                Ok(tape.mean_all(y))
            }),
        },
        GradCheckCase {
            name: "add",
            gen: Box::new(|rng| {
                let mut m = one("a", randn(rng, vec![3, 3]));
                m.insert("b".into(), randn(rng, vec![3, 3]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.add(v["a"], v["b"])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            }),
        },
        GradCheckCase {
            name: "sub",
            gen: Box::new(|rng| {
                let mut m = one("a", randn(rng, vec![3, 3]));
                m.insert("b".into(), randn(rng, vec![3, 3]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.sub(v["a"], v["b"])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            }),
        },
        GradCheckCase {
            name: "mul",
            gen: Box::new(|rng| {
                let mut m = one("a", randn(rng, vec![2, 4]));
                m.insert("b".into(), randn(rng, vec![2, 4]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.mul(v["a"], v["b"])?;
                Ok(tape.sum_all(y))
            }),
        },
        GradCheckCase {
            name: "scale",
            gen: Box::new(|rng| one("a", randn(rng, vec![3, 2]))),
            forward: Box::new(|tape, v| {
                let y = tape.scale(v["a"], -1.7);
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            }),
        },
        GradCheckCase {
            name: "add_row_bias",
            gen: Box::new(|rng| {
                let mut m = one("a", randn(rng, vec![3, 4]));
                m.insert("bias".into(), randn(rng, vec![1, 4]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.add_row_bias(v["a"], v["bias"])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            }),
        },
        GradCheckCase {
            name: "relu",
            gen: Box::new(|rng| one("a", rand_off_kink(rng, vec![3, 4]))),
            forward: Box::new(|tape, v| {
                let y = tape.relu(v["a"]);
                Ok(tape.sum_all(y))
            }),
        },
        GradCheckCase {
            name: "transpose",
            gen: Box::new(|rng| {
                let mut m = one("a", randn(rng, vec![3, 2]));
                m.insert("b".into(), randn(rng, vec![3, 2]));
                m
            }),
            forward: Box::new(|tape, v| {
                let at = tape.transpose(v["a"])?;
                let y = tape.matmul(at, v["b"])?;
                Ok(tape.mean_all(y))
            }),
        },
        GradCheckCase {
            name: "row_softmax",
            gen: Box::new(|rng| {
                let mut m = one("a", randn(rng, vec![3, 5]));
                m.insert("w".into(), randn(rng, vec![3, 5]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.row_softmax(v["a"])?;
                let weighted = tape.mul(y, v["w"])?;
                Ok(tape.sum_all(weighted))
            }),
        },
        GradCheckCase {
            name: "causal_row_softmax",
            gen: Box::new(|rng| {
                let mut m = one("a", randn(rng, vec![4, 4]));
                m.insert("w".into(), randn(rng, vec![4, 4]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.causal_row_softmax(v["a"])?;
                let weighted = tape.mul(y, v["w"])?;
                Ok(tape.sum_all(weighted))
            }),
        },
        GradCheckCase {
            name: "row_log_softmax",
            gen: Box::new(|rng| {
                let mut m = one("a", randn(rng, vec![3, 5]));
                m.insert("w".into(), randn(rng, vec![3, 5]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.row_log_softmax(v["a"])?;
                let weighted = tape.mul(y, v["w"])?;
                Ok(tape.sum_all(weighted))
            }),
        },
        GradCheckCase {
            name: "layer_norm",
            gen: Box::new(|rng| {
                let mut m = one("x", randn(rng, vec![3, 6]));
                m.insert("gain".into(), randn(rng, vec![1, 6]));
                m.insert("bias".into(), randn(rng, vec![1, 6]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.layer_norm(v["x"], v["gain"], v["bias"], 1e-5)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            }),
        },
        GradCheckCase {
            name: "embedding_lookup",
            gen: Box::new(|rng| one("table", randn(rng, vec![6, 3]))),
            forward: Box::new(|tape, v| {
                let y = tape.embedding_lookup(v["table"], &[4, 0, 4, 2])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            }),
        },
        GradCheckCase {
            name: "concat_cols",
            gen: Box::new(|rng| {
                let mut m = one("a", randn(rng, vec![3, 2]));
                m.insert("b".into(), randn(rng, vec![3, 3]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.concat_cols(&[v["a"], v["b"]])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            }),
        },
        GradCheckCase {
            name: "concat_rows",
            gen: Box::new(|rng| {
                let mut m = one("a", randn(rng, vec![2, 3]));
                m.insert("b".into(), randn(rng, vec![1, 3]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.concat_rows(&[v["a"], v["b"]])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            }),
        },
        GradCheckCase {
            name: "slice_rows",
            gen: Box::new(|rng| one("a", randn(rng, vec![5, 3]))),
            forward: Box::new(|tape, v| {
                let y = tape.slice_rows(v["a"], 1, 4)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            }),
        },
        GradCheckCase {
            name: "gather_entries",
            gen: Box::new(|rng| one("a", randn(rng, vec![4, 5]))),
            forward: Box::new(|tape, v| {
                let y = tape.gather_entries(v["a"], &[(0, 3), (2, 2), (3, 0), (0, 3)])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            }),
        },
        GradCheckCase {
            name: "sum_all",
            gen: Box::new(|rng| one("a", randn(rng, vec![3, 4]))),
            forward: Box::new(|tape, v| {
                let s = tape.sum_all(v["a"]);
                let sq = tape.mul(s, s)?;
                Ok(sq)
            }),
        },
        GradCheckCase {
            name: "mean_all",
            gen: Box::new(|rng| one("a", randn(rng, vec![3, 4]))),
            forward: Box::new(|tape, v| {
                let s = tape.mean_all(v["a"]);
                let sq = tape.mul(s, s)?;
                Ok(sq)
            }),
        },
        GradCheckCase {
            name: "mean_rows",
            gen: Box::new(|rng| one("a", randn(rng, vec![4, 3]))),
            forward: Box::new(|tape, v| {
                let y = tape.mean_rows(v["a"])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            }),
        },
        GradCheckCase {
            name: "l2_normalize_rows",
            gen: Box::new(|rng| {
                let mut m = one("a", rand_off_kink(rng, vec![3, 4]));
                m.insert("w".into(), randn(rng, vec![3, 4]));
                m
            }),
            forward: Box::new(|tape, v| {
                let y = tape.l2_normalize_rows(v["a"])?;
                let weighted = tape.mul(y, v["w"])?;
                Ok(tape.sum_all(weighted))
            }),
        },
        GradCheckCase {
            name: "kl_from_const_rows",
            gen: Box::new(|rng| one("logits", randn(rng, vec![4, 4]))),
            forward: Box::new(|tape, v| {
                let attn = tape.causal_row_softmax(v["logits"])?;
                let target = Tensor::from_rows(&[
                    vec![0.0, 0.0, 0.0, 0.0],
                    vec![1.0, 0.0, 0.0, 0.0],
                    vec![0.5, 0.5, 0.0, 0.0],
                    vec![0.0, 1.0, 0.0, 0.0],
                ])
                .unwrap();
                tape.kl_from_const_rows(attn, &target, &[1, 2, 3])
            }),
        },
    ]
}

/// Runs a list of cases at one seed, optionally corrupting the analytic
/// gradient of the named case first (negative-control hook for tests).
pub fn run_cases(
    cases: &[GradCheckCase],
    seed: u64,
    corrupt: Option<&str>,
) -> Result<Vec<CheckOutcome>, NumericError> {
    let mut outcomes = Vec::with_capacity(cases.len());
    for case in cases {
        let mut rng = Rng::stream(seed, "gradcheck", 0);
        let inputs = (case.gen)(&mut rng);
        let mut outcome = check_gradients(
            case.name,
            &inputs,
            case.forward.as_ref(),
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
        )?;
        if corrupt == Some(case.name) {
            outcome.max_rel_err += 1.0;
            outcome.passed = false;
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
