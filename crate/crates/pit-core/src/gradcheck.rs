//! Central-difference verification of analytic gradients.
//!
//! The checker runs the real graph once for analytic gradients, then probes
//! each input element with `(f(x+h) - f(x-h)) / 2h` on a fresh tape. Step
//! functions are probed in identity-surrogate mode
//! ([`Tape::new_ste_identity`]): at 0/1-valued binarization inputs the
//! surrogate value agrees with the binarized forward, so the difference
//! quotient measures exactly the derivative the straight-through backward
//! claims.

use crate::error::{PitError, Result};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    /// (input index, element index) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn eval<F>(inputs: &[Tensor], f: &F, surrogate: bool) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = if surrogate { Tape::new_ste_identity() } else { Tape::new() };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(PitError::NonScalarLoss(v.shape().to_vec()));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(PitError::NonFinite("gradient_check probe"));
    }
    Ok(y)
}

/// Check the analytic gradient of a scalar-valued graph against central
/// finite differences on every element of every input.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(PitError::invalid("gradient_check: h must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(PitError::NonScalarLoss(tape.value(out).shape().to_vec()));
    }
    tape.backward(out)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|v| tape.grad(*v).expect("requires-grad leaf has a gradient"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        tol,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fp = eval(&plus, &f, true)?;
            let fm = eval(&minus, &f, true)?;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[i].data()[j];
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            let rel = (analytic - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j));
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// One named case of the standard suite.
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn rand_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Random values in [-1,1] kept away from 0, for ops with a kink there.
fn rand_tensor_off_kink(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.uniform(0.05, 1.0);
            if rng.next_f64() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Gradient checks for every differentiable op plus the full masked-conv,
/// regularized composite. Returns one report per case.
pub fn standard_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<SuiteCase>> {
    use crate::layers::{build_network, Trainability};
    use crate::layers::{LayerConfig, NetworkConfig, TaskKind};
    use crate::loss::{performance_loss, size_regularizer, total_loss, LossKind};
    use crate::mask;

    let mut rng = SplitMix64::new(seed);
    let mut cases: Vec<SuiteCase> = Vec::new();
    let mut push = |name: &'static str, report: GradCheckReport| {
        cases.push(SuiteCase { name, report });
    };

    // Scalar projection with fixed random coefficients; catches index bugs
    // a plain sum would miss.
    fn project(tape: &mut Tape, v: Var, coeffs: &Tensor) -> Result<Var> {
        let flat_len = coeffs.len();
        let c = tape.constant(coeffs.clone());
        let flat = tape.reshape(v, vec![flat_len])?;
        let p = tape.mul(flat, c)?;
        tape.sum(p)
    }

    let a = rand_tensor(&mut rng, vec![3, 4]);
    let b = rand_tensor(&mut rng, vec![3, 4]);
    let coeffs12 = rand_tensor(&mut rng, vec![12]);
    {
        let c = coeffs12.clone();
        push(
            "add",
            gradient_check(&[a.clone(), b.clone()], h, tol, |t, v| {
                let s = t.add(v[0], v[1])?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let c = coeffs12.clone();
        push(
            "sub",
            gradient_check(&[a.clone(), b.clone()], h, tol, |t, v| {
                let s = t.sub(v[0], v[1])?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let c = coeffs12.clone();
        push(
            "mul",
            gradient_check(&[a.clone(), b.clone()], h, tol, |t, v| {
                let s = t.mul(v[0], v[1])?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let c = coeffs12.clone();
        push(
            "scalar_mul",
            gradient_check(&[a.clone()], h, tol, |t, v| {
                let s = t.scalar_mul(v[0], -1.7)?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let x = rand_tensor_off_kink(&mut rng, vec![3, 4]);
        let c = coeffs12.clone();
        push(
            "abs",
            gradient_check(&[x], h, tol, |t, v| {
                let s = t.abs(v[0])?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let x = rand_tensor_off_kink(&mut rng, vec![3, 4]);
        let c = coeffs12.clone();
        push(
            "relu",
            gradient_check(&[x], h, tol, |t, v| {
                let s = t.relu(v[0])?;
                project(t, s, &c)
            })?,
        );
    }
    push(
        "sum",
        gradient_check(&[a.clone()], h, tol, |t, v| t.sum(v[0]))?,
    );
    push(
        "mean",
        gradient_check(&[a.clone()], h, tol, |t, v| t.mean(v[0]))?,
    );
    {
        let m1 = rand_tensor(&mut rng, vec![3, 4]);
        let m2 = rand_tensor(&mut rng, vec![4, 2]);
        let c = rand_tensor(&mut rng, vec![6]);
        push(
            "matmul",
            gradient_check(&[m1, m2], h, tol, |t, v| {
                let s = t.matmul(v[0], v[1])?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let m = rand_tensor(&mut rng, vec![3, 4]);
        let x = rand_tensor(&mut rng, vec![4]);
        let c = rand_tensor(&mut rng, vec![3]);
        push(
            "matvec",
            gradient_check(&[m, x], h, tol, |t, v| {
                let s = t.matvec(v[0], v[1])?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let m = rand_tensor(&mut rng, vec![3, 5]);
        let c = rand_tensor(&mut rng, vec![5]);
        push(
            "column_product",
            gradient_check(&[m], h, tol, |t, v| {
                let s = t.column_product(v[0])?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let x = rand_tensor(&mut rng, vec![4]);
        let c = rand_tensor(&mut rng, vec![12]);
        push(
            "broadcast_rows",
            gradient_check(&[x], h, tol, |t, v| {
                let s = t.broadcast_rows(v[0], 3)?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let x = rand_tensor(&mut rng, vec![4]);
        let c = rand_tensor(&mut rng, vec![12]);
        push(
            "broadcast_cols",
            gradient_check(&[x], h, tol, |t, v| {
                let s = t.broadcast_cols(v[0], 3)?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let x = rand_tensor(&mut rng, vec![2, 6]);
        let c = rand_tensor(&mut rng, vec![12]);
        push(
            "reshape",
            gradient_check(&[x], h, tol, |t, v| {
                let s = t.reshape(v[0], vec![4, 3])?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let x = rand_tensor(&mut rng, vec![3, 7]);
        let c = rand_tensor(&mut rng, vec![3]);
        push(
            "avg_pool_time",
            gradient_check(&[x], h, tol, |t, v| {
                let s = t.avg_pool_time(v[0])?;
                project(t, s, &c)
            })?,
        );
    }
    {
        // Probe at 0/1 values where the surrogate agrees with the step.
        let g = Tensor::vector(vec![1.0, 1.0, 0.0, 1.0]);
        let c = rand_tensor(&mut rng, vec![4]);
        push(
            "heaviside_ste",
            gradient_check(&[g], h, tol, |t, v| {
                let s = t.heaviside_ste(v[0], 0.5)?;
                project(t, s, &c)
            })?,
        );
    }
    {
        let x = rand_tensor(&mut rng, vec![2, 9]);
        let w = rand_tensor(&mut rng, vec![3, 2, 3]);
        let bias = rand_tensor(&mut rng, vec![3]);
        let c = rand_tensor(&mut rng, vec![27]);
        push(
            "conv1d_causal_d1",
            gradient_check(&[x.clone(), w.clone(), bias.clone()], h, tol, |t, v| {
                let s = t.conv1d_causal(v[0], v[1], v[2], 1)?;
                project(t, s, &c)
            })?,
        );
        let c2 = rand_tensor(&mut rng, vec![27]);
        push(
            "conv1d_causal_d2",
            gradient_check(&[x, w, bias], h, tol, |t, v| {
                let s = t.conv1d_causal(v[0], v[1], v[2], 2)?;
                project(t, s, &c2)
            })?,
        );
    }
    {
        let z = rand_tensor(&mut rng, vec![6]);
        let mut y = Tensor::zeros(vec![6]);
        for (i, t) in y.data_mut().iter_mut().enumerate() {
            *t = (i % 2) as f64;
        }
        push(
            "bce_with_logits",
            gradient_check(&[z], h, tol, |t, v| {
                let tgt = t.constant(y.clone());
                t.bce_with_logits(v[0], tgt)
            })?,
        );
    }
    {
        let p = rand_tensor(&mut rng, vec![2, 5]);
        let q = rand_tensor(&mut rng, vec![2, 5]);
        push(
            "mse",
            gradient_check(&[p.clone(), q.clone()], h, tol, |t, v| {
                performance_loss(t, v[0], v[1], LossKind::Mse)
            })?,
        );
        // Keep pred and target apart so |pred - target| stays off its kink.
        let mut q2 = q;
        for d in q2.data_mut() {
            *d += 3.0;
        }
        push(
            "mae",
            gradient_check(&[p, q2], h, tol, |t, v| {
                performance_loss(t, v[0], v[1], LossKind::Mae)
            })?,
        );
    }
    {
        // Mask transform: gradient w.r.t. the binarization input.
        let spec = mask::MaskSpec::new(9)?;
        let mats = mask::build_constant_matrices(&spec);
        let g = Tensor::vector(vec![1.0, 1.0, 0.0, 1.0]);
        let c = rand_tensor(&mut rng, vec![9]);
        push(
            "mask_transform",
            gradient_check(&[g], h, tol, move |t, v| {
                let bin = t.heaviside_ste(v[0], 0.5)?;
                let m = mask::build_mask_graph(t, bin, &mats)?;
                project(t, m, &c)
            })?,
        );
    }
    {
        // Full composite: masked conv + performance loss + size regularizer,
        // differentiated w.r.t. weights, bias and the dilation parameters.
        for (name, gamma) in [
            ("composite_gamma_ones", vec![1.0, 1.0, 1.0]),
            ("composite_gamma_pruned", vec![1.0, 1.0, 0.0]),
        ] {
            let cfg = NetworkConfig {
                task: TaskKind::Regression,
                loss: LossKind::Mse,
                layers: vec![LayerConfig::PitConv {
                    c_in: 1,
                    c_out: 1,
                    rf_max: 5,
                    activation: Default::default(),
                }],
            };
            let mut net = build_network(&cfg, seed ^ 0xABCD)?;
            if let crate::layers::Layer::PitConv(l) = &mut net.layers[0] {
                l.gamma.set_g_hat(&gamma)?;
            }
            let x = rand_tensor(&mut rng, vec![1, 8]);
            let tgt = rand_tensor(&mut rng, vec![1, 8]);
            let w0 = rand_tensor(&mut rng, vec![1, 1, 5]);
            let b0 = rand_tensor(&mut rng, vec![1]);
            let g0 = Tensor::vector(gamma);
            let report = gradient_check(&[w0, b0, g0], h, tol, move |t, v| {
                let mut net = net.clone();
                if let crate::layers::Layer::PitConv(l) = &mut net.layers[0] {
                    l.w = t.value(v[0]).clone();
                    l.bias = t.value(v[1]).clone();
                    l.gamma.set_g_hat(t.value(v[2]).data())?;
                }
                let vars = net.begin_forward_with_leaves(t, Trainability::WeightsAndGamma, &[v[0], v[1], v[2]])?;
                let xv = t.constant(x.clone());
                let y = net.forward_sample(t, &vars, xv)?;
                let tv = t.constant(tgt.clone());
                let perf = performance_loss(t, y, tv, LossKind::Mse)?;
                let reg = size_regularizer(t, &net, &vars, 0.3)?;
                total_loss(t, perf, reg)
            })?;
            push(name, report);
        }
    }
    Ok(cases)
}
