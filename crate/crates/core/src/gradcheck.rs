//! Central finite-difference checks of every differentiable tape op, run in
//! 64-bit precision.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{init_params, BoundParams, prototype_on, segment_on, ModelConfig, ModelParams};
use crate::objectives::{nn_loss, weighted_ce, LossConfig, PrototypeRegistry, RegistryEntry};
use crate::phantom::stream_seed;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const CASES_PER_OP: usize = 12;

type Forward = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One function to differentiate and the point to differentiate it at.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub forward: Forward,
}

impl Case {
    pub fn new(inputs: Vec<Tensor<f64>>, forward: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            inputs,
            forward: Box::new(forward),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CaseOutcome {
    /// Largest per-input `max|analytic - numeric| / max(|analytic|, |numeric|)`.
    pub rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink and were not compared.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub cases: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

struct Evaluation {
    loss: f64,
    signature: u64,
    grads: Vec<Vec<f64>>,
}

fn evaluate(case: &Case, inputs: &[Tensor<f64>], weights: &Option<Tensor<f64>>, with_grads: bool) -> Result<Evaluation> {
    let mut tape = Tape::<f64>::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.forward)(&mut tape, &vars)?;
    let loss = match weights {
        None => tape.reshape(out, vec![1])?,
        Some(w) => {
            let w = tape.constant(w.clone())?;
            let weighted = tape.mul(out, w)?;
            tape.sum(weighted)?
        }
    };
    let grads = if with_grads {
        let g = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| g.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    } else {
        Vec::new()
    };
    Ok(Evaluation {
        loss: tape.value(loss).item(),
        signature: tape.branch_signature(),
        grads,
    })
}

/// Compares reverse-mode gradients of `case` with central differences of
/// step `h`. Non-scalar outputs are contracted with random weights first.
pub fn check_case(case: &Case, h: f64, rng: &mut ChaCha8Rng) -> Result<CaseOutcome> {
    let probe = {
        let mut tape = Tape::<f64>::new();
        let vars = case
            .inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = (case.forward)(&mut tape, &vars)?;
        tape.value(out).clone()
    };
    let weights = if probe.numel() == 1 {
        None
    } else {
        Some(uniform(rng, probe.shape(), -1.0, 1.0))
    };
    let base = evaluate(case, &case.inputs, &weights, true)?;
    let mut outcome = CaseOutcome::default();
    let mut inputs = case.inputs.clone();
    for i in 0..inputs.len() {
        let analytic = &base.grads[i];
        let mut numeric = vec![f64::NAN; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + h;
            let plus = evaluate(case, &inputs, &weights, false)?;
            inputs[i].data_mut()[j] = orig - h;
            let minus = evaluate(case, &inputs, &weights, false)?;
            inputs[i].data_mut()[j] = orig;
            if plus.signature != base.signature || minus.signature != base.signature {
                outcome.skipped += 1;
                continue;
            }
            *slot = (plus.loss - minus.loss) / (2.0 * h);
            outcome.checked += 1;
        }
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for (&a, &n) in analytic.iter().zip(&numeric) {
            if n.is_nan() {
                continue;
            }
            diff = diff.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
        let rel = if scale > 1e-8 { diff / scale } else { diff };
        outcome.rel_err = outcome.rel_err.max(rel);
    }
    Ok(outcome)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive shape")
}

/// Values with magnitude in `[0.05, 1)` and random sign, away from relu's kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Distinct values at least 0.05 apart, so no pooling window is near a tie.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks.iter().map(|&r| r as f64 * 0.05 - 0.5).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

fn extent(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn even_extent(rng: &mut ChaCha8Rng) -> usize {
    2 * rng.random_range(1..=3usize)
}

fn nchw(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![extent(rng, 1, 2), extent(rng, 1, 3), extent(rng, 1, 6), extent(rng, 1, 6)]
}

type CaseMaker = fn(&mut ChaCha8Rng) -> Case;

fn conv_case(rng: &mut ChaCha8Rng) -> Case {
    let k = if rng.random_bool(0.3) { 1 } else { 3 };
    let padding = if k == 3 { rng.random_range(0..=1) } else { 0 };
    let stride = rng.random_range(1..=2);
    let (n, c, f) = (extent(rng, 1, 2), extent(rng, 1, 3), extent(rng, 1, 3));
    let h = extent(rng, k.max(3), 6);
    let w = extent(rng, k.max(3), 6);
    Case::new(
        vec![
            uniform(rng, &[n, c, h, w], -1.0, 1.0),
            uniform(rng, &[f, c, k, k], -1.0, 1.0),
            uniform(rng, &[f], -0.5, 0.5),
        ],
        move |t, v| t.conv2d(v[0], v[1], v[2], stride, padding),
    )
}

fn maxpool_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, c) = (extent(rng, 1, 2), extent(rng, 1, 3));
    let (h, w) = (even_extent(rng), even_extent(rng));
    Case::new(vec![well_separated(rng, &[n, c, h, w])], |t, v| t.maxpool2(v[0]))
}

fn upsample_case(rng: &mut ChaCha8Rng) -> Case {
    let s = vec![extent(rng, 1, 2), extent(rng, 1, 3), extent(rng, 1, 3), extent(rng, 1, 3)];
    Case::new(vec![uniform(rng, &s, -1.0, 1.0)], |t, v| t.upsample2(v[0]))
}

fn relu_case(rng: &mut ChaCha8Rng) -> Case {
    let s = nchw(rng);
    Case::new(vec![off_kink(rng, &s)], |t, v| t.relu(v[0]))
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Case {
    let s = nchw(rng);
    Case::new(vec![uniform(rng, &s, -4.0, 4.0)], |t, v| t.sigmoid(v[0]))
}

fn scale_case(rng: &mut ChaCha8Rng) -> Case {
    let s = nchw(rng);
    let factor = rng.random_range(-3.0..3.0);
    Case::new(vec![uniform(rng, &s, -1.0, 1.0)], move |t, v| t.scale(v[0], factor))
}

fn mul_case(rng: &mut ChaCha8Rng) -> Case {
    let s = nchw(rng);
    let other = if rng.random_bool(0.5) {
        s.clone()
    } else {
        vec![s[0], 1, s[2], s[3]]
    };
    Case::new(
        vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &other, -1.0, 1.0)],
        |t, v| t.mul(v[0], v[1]),
    )
}

fn add_case(rng: &mut ChaCha8Rng) -> Case {
    let s = nchw(rng);
    Case::new(
        vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)],
        |t, v| t.add(v[0], v[1]),
    )
}

fn concat_case(rng: &mut ChaCha8Rng) -> Case {
    let a = nchw(rng);
    let b = vec![a[0], extent(rng, 1, 3), a[2], a[3]];
    Case::new(
        vec![uniform(rng, &a, -1.0, 1.0), uniform(rng, &b, -1.0, 1.0)],
        |t, v| t.concat_channels(v[0], v[1]),
    )
}

fn gap_case(rng: &mut ChaCha8Rng) -> Case {
    let s = nchw(rng);
    Case::new(vec![uniform(rng, &s, -1.0, 1.0)], |t, v| t.global_avg_pool(v[0]))
}

fn reshape_case(rng: &mut ChaCha8Rng) -> Case {
    let s = nchw(rng);
    let flat = s.iter().product();
    Case::new(vec![uniform(rng, &s, -1.0, 1.0)], move |t, v| t.reshape(v[0], vec![flat]))
}

fn sum_case(rng: &mut ChaCha8Rng) -> Case {
    let s = nchw(rng);
    Case::new(vec![uniform(rng, &s, -1.0, 1.0)], |t, v| t.sum(v[0]))
}

fn mean_case(rng: &mut ChaCha8Rng) -> Case {
    let s = nchw(rng);
    let n = extent(rng, 1, 4);
    let inputs = (0..n).map(|_| uniform(rng, &s, -1.0, 1.0)).collect();
    Case::new(inputs, |t, v| t.mean(v))
}

fn stack_case(rng: &mut ChaCha8Rng) -> Case {
    let n = extent(rng, 1, 6);
    let inputs = (0..n).map(|_| uniform(rng, &[1], -1.0, 1.0)).collect();
    Case::new(inputs, |t, v| t.stack(v))
}

/// A random direction with norm in `[0.5, 2)`.
fn sized_vector(rng: &mut ChaCha8Rng, d: usize) -> Tensor<f64> {
    let mut t = off_kink(rng, &[d]);
    let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = rng.random_range(0.5..2.0);
    t.data_mut().iter_mut().for_each(|v| *v *= target / norm);
    t
}

fn cosine_case(rng: &mut ChaCha8Rng) -> Case {
    let d = extent(rng, 2, 6);
    // Nearly parallel pairs have a vanishing gradient, which turns the
    // difference quotient's truncation error into a large relative error.
    let (u, v) = loop {
        let (u, v) = (sized_vector(rng, d), sized_vector(rng, d));
        let dot: f64 = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let nu = u.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        if (dot / (nu * nv)).abs() < 0.9 {
            break (u, v);
        }
    };
    Case::new(
        vec![u, v],
        |t, v| t.cosine_similarity(v[0], v[1]),
    )
}

fn softmax_case(rng: &mut ChaCha8Rng) -> Case {
    let n = extent(rng, 1, 6);
    let target = rng.random_range(0..n);
    Case::new(vec![uniform(rng, &[n], -3.0, 3.0)], move |t, v| t.neg_log_softmax(v[0], target))
}

fn bce_case(rng: &mut ChaCha8Rng) -> Case {
    let s = vec![1, extent(rng, 1, 6), extent(rng, 1, 6)];
    let n: usize = s.iter().product();
    let target: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let beta = rng.random_range(1.0..20.0);
    // ln p curves sharply near 0 and 1; the central difference itself would
    // be off by more than the tolerance there.
    Case::new(vec![uniform(rng, &s, 0.1, 0.9)], move |t, v| {
        t.weighted_bce(v[0], &target, beta, 1e-7)
    })
}

fn conv_relu_gap_case(rng: &mut ChaCha8Rng) -> Case {
    let (c, f) = (extent(rng, 1, 3), extent(rng, 1, 3));
    let (h, w) = (extent(rng, 3, 6), extent(rng, 3, 6));
    Case::new(
        vec![
            uniform(rng, &[1, c, h, w], -1.0, 1.0),
            uniform(rng, &[f, c, 3, 3], -1.0, 1.0),
            uniform(rng, &[f], -0.5, 0.5),
        ],
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let y = t.relu(y)?;
            t.global_avg_pool(y)
        },
    )
}

/// Every op with its case generator, in the order the table lists them.
pub fn op_suite() -> Vec<(&'static str, CaseMaker)> {
    vec![
        ("conv2d", conv_case as CaseMaker),
        ("maxpool2", maxpool_case),
        ("upsample2", upsample_case),
        ("relu", relu_case),
        ("sigmoid", sigmoid_case),
        ("scale", scale_case),
        ("mul", mul_case),
        ("add", add_case),
        ("concat_channels", concat_case),
        ("global_avg_pool", gap_case),
        ("reshape", reshape_case),
        ("sum", sum_case),
        ("mean", mean_case),
        ("stack", stack_case),
        ("cosine_similarity", cosine_case),
        ("neg_log_softmax", softmax_case),
        ("weighted_bce", bce_case),
        ("conv2d+relu+global_avg_pool", conv_relu_gap_case),
    ]
}

/// Checks `name` over `cases` random draws.
pub fn check_op(name: &str, make: CaseMaker, cases: usize, seed: u64, tolerance: f64) -> Result<GradCheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 7]));
    // Keep draws for different ops independent of list order.
    for b in name.bytes() {
        rng = ChaCha8Rng::seed_from_u64(stream_seed(&[rng.random(), b as u64]));
    }
    let mut row = GradCheckRow {
        name: name.to_string(),
        cases,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        tolerance,
        passed: false,
    };
    for _ in 0..cases {
        let case = make(&mut rng);
        let out = check_case(&case, STEP, &mut rng)?;
        row.checked += out.checked;
        row.skipped += out.skipped;
        row.max_rel_err = row.max_rel_err.max(out.rel_err);
    }
    row.passed = row.max_rel_err < tolerance && row.checked > 0;
    Ok(row)
}

/// The small model used for the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        levels: 3,
        base_channels: 2,
        proto_dim: 4,
        input_size: [16, 16],
        paper_scale: false,
    }
}

/// Both objectives through a 16x16 masked U-Net, differentiated with respect
/// to every parameter.
pub fn model_case(seed: u64) -> Result<Case> {
    let cfg = tiny_model_config();
    let mut params: ModelParams<f64> = init_params(&cfg, seed)?.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 8]));
    // Zero biases leave the prototype near the origin, where cosine
    // similarity is too curved for a step of 1e-3; check a generic point.
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            *t = uniform(&mut rng, t.shape(), -0.2, 0.2);
        }
    }
    let image = uniform(&mut rng, &[1, 16, 16], 0.0, 1.0);
    // A filled rectangle, like an annotation.
    let (y0, x0) = (rng.random_range(2..6), rng.random_range(2..6));
    let (y1, x1) = (rng.random_range(10..15), rng.random_range(10..15));
    let mut mask = vec![0.0; 256];
    let mut label = vec![0.0; 256];
    for y in 0..16 {
        for x in 0..16 {
            mask[y * 16 + x] = if (y0..y1).contains(&y) && (x0..x1).contains(&x) { 1.0 } else { 0.0 };
            label[y * 16 + x] = if (y0 + 1..y1).contains(&y) && (x0..x1 - 1).contains(&x) { 1.0 } else { 0.0 };
        }
    }
    let mask = Tensor::new(vec![1, 16, 16], mask)?;
    let label = Tensor::new(vec![1, 16, 16], label)?;
    let mut registry = PrototypeRegistry::default();
    for k in 1..=3u8 {
        let p = uniform(&mut rng, &[cfg.proto_dim()], -1.0, 1.0);
        registry.insert(
            k,
            RegistryEntry {
                prototype: p.data().iter().map(|&v| v as f32).collect(),
                count: 1,
            },
        );
    }
    let loss_cfg = LossConfig::default();
    Ok(Case::new(params.tensors().to_vec(), move |t, v| {
        let bound = BoundParams::from_vars(v.to_vec(), &cfg)?;
        let x = t.constant(image.clone())?;
        let m = t.constant(mask.clone())?;
        let p = prototype_on(t, &bound, x, m)?;
        let nn = nn_loss(t, p, &registry, 2, &loss_cfg)?;
        let pred = segment_on(t, &bound, x, Some(m))?;
        let (wce, _) = weighted_ce(t, pred, &label, &loss_cfg)?;
        t.add(nn, wce)
    }))
}

pub fn check_model(seed: u64) -> Result<GradCheckRow> {
    let case = model_case(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 9]));
    let out = check_case(&case, STEP, &mut rng)?;
    Ok(GradCheckRow {
        name: "masked_unet_16x16".into(),
        cases: 1,
        checked: out.checked,
        skipped: out.skipped,
        max_rel_err: out.rel_err,
        tolerance: MODEL_TOLERANCE,
        passed: out.rel_err < MODEL_TOLERANCE && out.checked > 0,
    })
}

/// Every op plus the end-to-end model.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rows = op_suite()
        .into_iter()
        .map(|(name, make)| check_op(name, make, CASES_PER_OP, seed, OP_TOLERANCE))
        .collect::<Result<Vec<_>>>()?;
    rows.push(check_model(seed)?);
    Ok(rows)
}

pub fn format_table(rows: &[GradCheckRow]) -> String {
    let mut out = format!(
        "{:<30} {:>6} {:>8} {:>8} {:>12} {:>10}  result\n",
        "op", "cases", "checked", "skipped", "max rel err", "tolerance"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<30} {:>6} {:>8} {:>8} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.cases,
            r.checked,
            r.skipped,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_a_polynomial() {
        let case = Case::new(vec![Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap()], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ok = check_case(&case, STEP, &mut rng).unwrap();
        assert!(ok.rel_err < 1e-8, "{ok:?}");
        assert_eq!(ok.checked, 3);
    }

    #[test]
    fn detects_a_missing_gradient_path() {
        // One factor enters as a constant copy, so the tape sees half the
        // true derivative of x * x.
        let case = Case::new(vec![Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap()], |t, v| {
            let copy = t.constant(t.value(v[0]).clone())?;
            let sq = t.mul(v[0], copy)?;
            t.sum(sq)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = check_case(&case, STEP, &mut rng).unwrap();
        assert!((out.rel_err - 0.5).abs() < 1e-6, "{out:?}");
    }

    #[test]
    fn every_op_listed_once() {
        let names: Vec<_> = op_suite().iter().map(|(n, _)| *n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }
}
