//! Randomized gradient-oracle suite: every differentiable primitive, the
//! dense composites built from them, and the full encoder are checked
//! against central finite differences on randomized shapes and values.
//!
//! Each case pairs a parameter map with a scalar objective; the reverse-mode
//! gradient must agree with the numerical one within a small relative error.
//! Inputs are kept away from non-differentiable points (clamp thresholds,
//! zero-norm rows), where a difference quotient would not estimate a
//! derivative at all.

use crate::episodes::Batch;
use crate::error::Result;
use crate::models::{EncoderConfig, ParamSet};
use crate::rng::SeedTree;
use crate::tensor::{finite_difference_grad, grad, max_rel_err, ops, NamedTensors, Tensor};
use rand::Rng;

type T = Tensor<f64>;
type Objective = Box<dyn Fn(&NamedTensors<f64>) -> Result<T>>;

/// One finished check.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub rel_err: f64,
}

/// Outcome of the whole suite.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub cases: Vec<CaseResult>,
    pub max_rel_err: f64,
    pub worst_case: String,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

/// Largest relative error the suite tolerates.
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

const FD_EPS: f64 = 1e-6;
const INSTANCES_PER_KIND: u64 = 5;

struct Case {
    name: String,
    params: NamedTensors<f64>,
    objective: Objective,
}

fn named(pairs: Vec<(&str, T)>) -> NamedTensors<f64> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn leaf(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> T {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    T::leaf(shape, data).expect("leaf shape")
}

/// Constant weights that turn an `[shape]` output into a scalar via a random
/// linear functional; plain `sum()` would hide transposed or permuted
/// adjoints.
fn functional(rng: &mut impl Rng, shape: &[usize]) -> T {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    T::from_vec(shape, data).expect("functional shape")
}

fn reduce(out: &T, weights: &T) -> Result<T> {
    Ok(out.mul(weights)?.sum())
}

fn dims(rng: &mut impl Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(2..=5))
}

#[allow(clippy::too_many_lines)]
fn build_cases(seed: u64) -> Result<Vec<Case>> {
    let tree = SeedTree::new(seed);
    let mut cases = Vec::new();
    let mut case_idx = 0u64;
    let rng_for = |idx: u64| tree.stream("gradcheck-case", &[idx]);

    for inst in 0..INSTANCES_PER_KIND {
        let mut rng = rng_for(case_idx);
        case_idx += 1;

        // --- elementwise binary, same shapes ---
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        cases.push(Case {
            name: format!("add/{inst}"),
            params: named(vec![
                ("a", leaf(&mut rng, &[m, n], -2.0, 2.0)),
                ("b", leaf(&mut rng, &[m, n], -2.0, 2.0)),
            ]),
            objective: Box::new(move |p| {
                reduce(&p["a"].add(&p["b"])?, &c)
            }),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        cases.push(Case {
            name: format!("sub-broadcast-row/{inst}"),
            params: named(vec![
                ("a", leaf(&mut rng, &[m, n], -2.0, 2.0)),
                ("b", leaf(&mut rng, &[1, n], -2.0, 2.0)),
            ]),
            objective: Box::new(move |p| reduce(&p["a"].sub(&p["b"])?, &c)),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        cases.push(Case {
            name: format!("mul-broadcast-col/{inst}"),
            params: named(vec![
                ("a", leaf(&mut rng, &[m, n], -2.0, 2.0)),
                ("b", leaf(&mut rng, &[m, 1], -2.0, 2.0)),
            ]),
            objective: Box::new(move |p| reduce(&p["a"].mul(&p["b"])?, &c)),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        // Denominators bounded away from zero in both signs.
        let bdata: Vec<f64> = (0..m * n)
            .map(|_| rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        cases.push(Case {
            name: format!("div/{inst}"),
            params: named(vec![
                ("a", leaf(&mut rng, &[m, n], -2.0, 2.0)),
                ("b", T::leaf(&[m, n], bdata)?),
            ]),
            objective: Box::new(move |p| reduce(&p["a"].div(&p["b"])?, &c)),
        });

        // --- scalar ops, negation ---
        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        let shift = rng.gen_range(-1.0..1.0);
        let scale = rng.gen_range(0.3..2.5);
        cases.push(Case {
            name: format!("neg-addscalar-mulscalar/{inst}"),
            params: named(vec![("a", leaf(&mut rng, &[m, n], -2.0, 2.0))]),
            objective: Box::new(move |p| {
                reduce(&p["a"].neg().add_scalar(shift).scale(scale), &c)
            }),
        });

        // --- matmul and transpose ---
        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, k) = dims(&mut rng);
        let n = rng.gen_range(1..=4);
        let c = functional(&mut rng, &[m, n]);
        cases.push(Case {
            name: format!("matmul/{inst}"),
            params: named(vec![
                ("a", leaf(&mut rng, &[m, k], -1.5, 1.5)),
                ("b", leaf(&mut rng, &[k, n], -1.5, 1.5)),
            ]),
            objective: Box::new(move |p| reduce(&p["a"].matmul(&p["b"])?, &c)),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[n, m]);
        cases.push(Case {
            name: format!("transpose/{inst}"),
            params: named(vec![("a", leaf(&mut rng, &[m, n], -2.0, 2.0))]),
            objective: Box::new(move |p| reduce(&p["a"].t()?, &c)),
        });

        // --- nonlinearities ---
        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        cases.push(Case {
            name: format!("tanh/{inst}"),
            params: named(vec![("a", leaf(&mut rng, &[m, n], -2.0, 2.0))]),
            objective: Box::new(move |p| reduce(&p["a"].tanh(), &c)),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        cases.push(Case {
            name: format!("exp/{inst}"),
            params: named(vec![("a", leaf(&mut rng, &[m, n], -1.5, 1.5))]),
            objective: Box::new(move |p| reduce(&p["a"].exp(), &c)),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        cases.push(Case {
            name: format!("ln/{inst}"),
            params: named(vec![("a", leaf(&mut rng, &[m, n], 0.4, 3.0))]),
            objective: Box::new(move |p| reduce(&p["a"].ln(), &c)),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        cases.push(Case {
            name: format!("sqrt/{inst}"),
            params: named(vec![("a", leaf(&mut rng, &[m, n], 0.3, 4.0))]),
            objective: Box::new(move |p| reduce(&p["a"].sqrt(), &c)),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        let t = rng.gen_range(-0.5..0.5);
        // Keep samples off the clamp threshold: the kink has no defined
        // derivative and a straddling difference quotient measures nothing.
        let adata: Vec<f64> = (0..m * n)
            .map(|_| {
                let x: f64 = rng.gen_range(-2.0..2.0);
                if (x - t).abs() < 0.05 {
                    x + 0.1
                } else {
                    x
                }
            })
            .collect();
        cases.push(Case {
            name: format!("clamp-min/{inst}"),
            params: named(vec![("a", T::leaf(&[m, n], adata)?)]),
            objective: Box::new(move |p| reduce(&p["a"].clamp_min(t), &c)),
        });

        // --- shape ops ---
        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c_row = functional(&mut rng, &[1, n]);
        let c_col = functional(&mut rng, &[m, 1]);
        cases.push(Case {
            name: format!("sum-to/{inst}"),
            params: named(vec![("a", leaf(&mut rng, &[m, n], -2.0, 2.0))]),
            objective: Box::new(move |p| {
                let rows = reduce(&p["a"].sum_to(&[1, n])?, &c_row)?;
                let cols = reduce(&p["a"].sum_to(&[m, 1])?, &c_col)?;
                rows.add(&cols)
            }),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        cases.push(Case {
            name: format!("broadcast-to/{inst}"),
            params: named(vec![("a", leaf(&mut rng, &[1, n], -2.0, 2.0))]),
            objective: Box::new(move |p| reduce(&p["a"].broadcast_to(&[m, n])?, &c)),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m * n]);
        cases.push(Case {
            name: format!("reshape/{inst}"),
            params: named(vec![("a", leaf(&mut rng, &[m, n], -2.0, 2.0))]),
            objective: Box::new(move |p| reduce(&p["a"].reshape(&[m * n])?, &c)),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c0 = functional(&mut rng, &[n]);
        let c1 = functional(&mut rng, &[m]);
        let w = rng.gen_range(0.3..2.0);
        cases.push(Case {
            name: format!("mean-axes/{inst}"),
            params: named(vec![("a", leaf(&mut rng, &[m, n], -2.0, 2.0))]),
            objective: Box::new(move |p| {
                let a = &p["a"];
                let by_rows = reduce(&a.mean_axis(0, false)?, &c0)?;
                let by_cols = reduce(&a.mean_axis(1, false)?, &c1)?;
                Ok(by_rows.add(&by_cols)?.add(&a.mean().scale(w))?)
            }),
        });

        // --- composites ---
        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, _) = dims(&mut rng);
        let classes = rng.gen_range(2..=4);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
        cases.push(Case {
            name: format!("cross-entropy/{inst}"),
            params: named(vec![("logits", leaf(&mut rng, &[m, classes], -3.0, 3.0))]),
            objective: Box::new(move |p| ops::softmax_cross_entropy(&p["logits"], &labels)),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let (m, n) = dims(&mut rng);
        let c = functional(&mut rng, &[m, n]);
        // Rows bounded away from zero norm: normalization's gradient blows
        // up at the origin where the epsilon guard takes over.
        let mut rows: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for i in 0..m {
            let norm: f64 = rows[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 0.3 {
                rows[i * n] += 1.0;
            }
        }
        cases.push(Case {
            name: format!("l2-normalize-rows/{inst}"),
            params: named(vec![("a", T::leaf(&[m, n], rows)?)]),
            objective: Box::new(move |p| {
                reduce(&ops::l2_normalize_rows(&p["a"], 1e-12)?, &c)
            }),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let m = rng.gen_range(1..=4);
        let n = rng.gen_range(3..=5);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n.min(3))).collect();
        cases.push(Case {
            name: format!("layer-norm-ce/{inst}"),
            params: named(vec![
                ("x", leaf(&mut rng, &[m, n], -2.0, 2.0)),
                ("gamma", leaf(&mut rng, &[n], 0.5, 1.5)),
                ("beta", leaf(&mut rng, &[n], -0.5, 0.5)),
            ]),
            objective: Box::new(move |p| {
                let y = ops::layer_norm(&p["x"], &p["gamma"], &p["beta"], 1e-12)?;
                ops::softmax_cross_entropy(&y, &labels)
            }),
        });

        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let m = rng.gen_range(1..=4);
        let classes = rng.gen_range(2..=3);
        let d = rng.gen_range(2..=4);
        let c = functional(&mut rng, &[m, classes]);
        cases.push(Case {
            name: format!("pairwise-sq-dists/{inst}"),
            params: named(vec![
                ("q", leaf(&mut rng, &[m, d], -2.0, 2.0)),
                ("p", leaf(&mut rng, &[classes, d], -2.0, 2.0)),
            ]),
            objective: Box::new(move |p| {
                reduce(&ops::pairwise_sq_dists(&p["q"], &p["p"])?, &c)
            }),
        });

        // Full prototype episode loss: centering, normalization, prototype
        // averaging, distances, and cross-entropy in one graph.
        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let d = rng.gen_range(3..=4);
        let per_class = rng.gen_range(2..=3);
        let n_s = 2 * per_class;
        let m_q = rng.gen_range(2..=4);
        let s_labels: Vec<usize> = (0..n_s).map(|i| i % 2).collect();
        let q_labels: Vec<usize> = (0..m_q).map(|_| rng.gen_range(0..2)).collect();
        // Spread the support so no centered row collapses onto the origin.
        let mut sdata: Vec<f64> = (0..n_s * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for (i, v) in sdata.iter_mut().enumerate() {
            *v += ((i / d) as f64) * 0.4;
        }
        cases.push(Case {
            name: format!("prototype-episode-loss/{inst}"),
            params: named(vec![
                ("support", T::leaf(&[n_s, d], sdata)?),
                ("query", leaf(&mut rng, &[m_q, d], -2.0, 2.0)),
            ]),
            objective: Box::new(move |p| {
                let logits =
                    crate::meta::protonet_logits(&p["query"], &p["support"], &s_labels, 2, true)?;
                ops::softmax_cross_entropy(&logits, &q_labels)
            }),
        });

        // The composed encoder end to end, including each layer-norm copy.
        let mut rng = rng_for(case_idx);
        case_idx += 1;
        let config = EncoderConfig {
            input_dim: 4,
            hidden_dims: vec![5],
            output_dim: 4,
            n_classes: 3,
            inner_steps: 1,
            per_step_layer_norm: true,
            init_seed: seed.wrapping_add(inst),
        };
        let step = (inst % 2) as usize; // alternate layer-norm copies
        let batch = Batch {
            ids: (0..6).map(|i| format!("g{i}")).collect(),
            features: (0..6)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect(),
            labels: (0..6).map(|_| rng.gen_range(0..3)).collect(),
        };
        let labels = batch.labels.clone();
        let x = batch.to_x::<f64>()?;
        let cfg = config.clone();
        cases.push(Case {
            name: format!("encoder-ce-step{step}/{inst}"),
            params: ParamSet::<f64>::init(&config)?.named().clone(),
            objective: Box::new(move |p| {
                let ps = ParamSet::from_named(&cfg, p.clone())?;
                let logits = ps.forward(&x, step)?;
                ops::softmax_cross_entropy(&logits, &labels)
            }),
        });
    }

    Ok(cases)
}

/// Run the whole suite; deterministic for a given seed.
pub fn run_gradient_suite(seed: u64) -> Result<GradCheckReport> {
    let cases = build_cases(seed)?;
    let mut results = Vec::with_capacity(cases.len());
    let mut worst = 0.0f64;
    let mut worst_case = String::new();
    for case in &cases {
        let loss = (case.objective)(&case.params)?;
        let analytic = grad(&loss, &case.params, false)?;
        let numeric = finite_difference_grad(&case.objective, &case.params, FD_EPS)?;
        let rel = max_rel_err(&analytic, &numeric);
        if rel > worst {
            worst = rel;
            worst_case = case.name.clone();
        }
        results.push(CaseResult {
            name: case.name.clone(),
            rel_err: rel,
        });
    }
    Ok(GradCheckReport {
        cases: results,
        max_rel_err: worst,
        worst_case,
        threshold: GRADCHECK_THRESHOLD,
    })
}
