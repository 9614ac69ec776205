//! Central finite-difference verification of analytic gradients.
//!
//! Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)`, so
//! gradients much smaller than `floor` are compared absolutely.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::trunc_normal;
use crate::net::Model;
use crate::tensor::{Module, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

impl GradReport {
    fn new(tol: f64) -> Self {
        GradReport {
            max_rel_err: 0.0,
            worst: None,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            checked: 0,
            tol,
            pass: true,
        }
    }

    fn record(&mut self, input: usize, coord: usize, analytic: f64, numeric: f64, floor: f64) {
        let rel = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = rel;
            self.worst = Some((input, coord));
            self.analytic_at_worst = analytic;
            self.numeric_at_worst = numeric;
        }
        self.pass = self.max_rel_err <= self.tol;
    }

    /// Fold another report into this one, keeping the worst coordinate.
    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
            self.analytic_at_worst = other.analytic_at_worst;
            self.numeric_at_worst = other.numeric_at_worst;
        }
        self.pass = self.max_rel_err <= self.tol;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Check `f`, which returns a scalar value and the analytic gradient with
/// respect to each of `inputs`.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradReport>
where
    F: FnMut(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>),
{
    let (value, analytic) = f(inputs);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("value at base point is {value}")));
    }
    if analytic.len() != inputs.len() {
        return Err(Error::Internal(format!(
            "{} gradients returned for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let mut report = GradReport::new(tol);
    let mut work = inputs.to_vec();
    for (idx, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[idx].shape() {
            return Err(Error::Internal(format!("gradient shape mismatch for input {idx}")));
        }
        if let Some(c) = grad.first_non_finite() {
            return Err(Error::Numerical(format!("analytic gradient of input {idx} non-finite at {c}")));
        }
        for c in 0..inputs[idx].len() {
            let orig = inputs[idx].data()[c];
            work[idx].data_mut()[c] = orig + step;
            let plus = f(&work).0;
            work[idx].data_mut()[c] = orig - step;
            let minus = f(&work).0;
            work[idx].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(format!("non-finite value perturbing input {idx} coord {c}")));
            }
            let numeric = (plus - minus) / (2.0 * step);
            report.record(idx, c, grad.data()[c], numeric, DEFAULT_FLOOR);
        }
    }
    Ok(report)
}

/// Flat-vector variant: `value` evaluates the scalar at a point, `analytic`
/// is the gradient at `x0`. `coords` restricts the checked coordinates.
pub fn check_flat<F>(
    mut value: F,
    x0: &[f64],
    analytic: &[f64],
    coords: impl IntoIterator<Item = usize>,
    step: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut report = GradReport::new(tol);
    let mut x = x0.to_vec();
    for c in coords {
        let orig = x[c];
        x[c] = orig + step;
        let plus = value(&x);
        x[c] = orig - step;
        let minus = value(&x);
        x[c] = orig;
        if !plus.is_finite() || !minus.is_finite() || !analytic[c].is_finite() {
            return Err(Error::Numerical(format!("non-finite value at coordinate {c}")));
        }
        report.record(0, c, analytic[c], (plus - minus) / (2.0 * step), DEFAULT_FLOOR);
    }
    Ok(report)
}

/// Check the accumulated gradients of every learnable parameter of `module`
/// against central differences of `loss`. At most `max_coords` evenly spaced
/// coordinates are checked per parameter. Returns one report per parameter,
/// in visiting order.
pub fn check_parameters<M, F>(
    module: &M,
    mut loss: F,
    max_coords: usize,
    step: f64,
    tol: f64,
) -> Result<Vec<(String, GradReport)>>
where
    M: Module<f64> + Clone,
    F: FnMut(&M) -> f64,
{
    let mut params = Vec::new();
    module.visit(&mut |p| {
        if p.learnable {
            params.push((p.name.clone(), p.numel(), p.grad.as_ref().map(|g| g.data().to_vec())));
        }
    });
    let mut originals = Vec::new();
    module.visit(&mut |p| {
        if p.learnable {
            originals.push(p.value.data().to_vec());
        }
    });
    let mut reports = Vec::with_capacity(params.len());
    let mut work = module.clone();
    for (idx, (name, numel, grad)) in params.into_iter().enumerate() {
        let grad = grad.ok_or_else(|| Error::Numerical(format!("{name} has no gradient")))?;
        let coords: Vec<usize> = if numel <= max_coords {
            (0..numel).collect()
        } else {
            (0..max_coords).map(|i| i * numel / max_coords).collect()
        };
        let mut report = GradReport::new(tol);
        for c in coords {
            let set = |work: &mut M, delta: Option<f64>| {
                let mut k = 0;
                work.visit_mut(&mut |p| {
                    if p.learnable {
                        if k == idx {
                            let v = &mut p.value.data_mut()[c];
                            *v = match delta {
                                Some(d) => *v + d,
                                None => originals[idx][c],
                            };
                        }
                        k += 1;
                    }
                });
            };
            let mut eval = |delta: f64, work: &mut M| {
                set(work, Some(delta));
                let v = loss(work);
                set(work, None);
                v
            };
            let plus = eval(step, &mut work);
            let minus = eval(-step, &mut work);
            if !plus.is_finite() || !minus.is_finite() || !grad[c].is_finite() {
                return Err(Error::Numerical(format!("non-finite value at {name}[{c}]")));
            }
            report.record(idx, c, grad[c], (plus - minus) / (2.0 * step), DEFAULT_FLOOR);
        }
        reports.push((name, report));
    }
    Ok(reports)
}

/// Add Gaussian noise to every parameter so zero-initialized projections
/// carry gradient through their branch.
pub fn perturb<M: Module<f64>>(module: &mut M, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    module.visit_mut(&mut |p| {
        let noise: Tensor<f64> = trunc_normal(&mut rng, p.value.shape(), std);
        p.value.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    });
}

/// Block a parameter belongs to: `pfe`, `stageK.blockJ`, `stageK.pool`,
/// `stageK.proj` or `head`.
pub fn block_of(name: &str) -> &str {
    let mut dots = name.match_indices('.').map(|(i, _)| i);
    let cut = if name.starts_with("stage") {
        dots.nth(1)
    } else {
        dots.next()
    };
    cut.map_or(name, |i| &name[..i])
}

/// Whole-model check in double precision: a perturbed model under a random
/// linear functional of its logits. Returns the worst error per block, with
/// the image gradient reported as `input`.
pub fn model_suite(config: &ModelConfig, seed: u64, batch: usize, max_coords: usize, tol: f64) -> Result<Vec<(String, GradReport)>> {
    let mut model = Model::<f64>::build(config, seed)?;
    perturb(&mut model, seed.wrapping_add(1), 0.2);
    let (h, w) = config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let images: Tensor<f64> = trunc_normal(&mut rng, &[batch, h, w, 3], 1.0);
    let r: Vec<f64> = trunc_normal::<f64, _>(&mut rng, &[batch * config.num_classes], 1.0).into_vec();
    let dot = |a: &[f64]| a.iter().zip(&r).map(|(x, y)| x * y).sum::<f64>();

    let (_, cache) = model.forward_cached(&images)?;
    model.zero_grad();
    let dimages = model.backward(&cache, &r);

    let eval = |m: &Model<f64>, x: &Tensor<f64>| m.forward(x, false).map(|(l, _)| dot(l.data())).unwrap_or(f64::NAN);
    let n = images.len();
    let coords = (0..max_coords.min(n)).map(|i| i * n / max_coords.min(n));
    let input = check_flat(
        |xs| eval(&model, &Tensor::from_vec(images.shape(), xs.to_vec()).expect("shape")),
        images.data(),
        &dimages,
        coords,
        DEFAULT_STEP,
        tol,
    )?;
    let mut out: Vec<(String, GradReport)> = vec![("input".into(), input)];
    for (name, rep) in check_parameters(&model, |m| eval(m, &images), max_coords, DEFAULT_STEP, tol)? {
        let block = block_of(&name);
        match out.iter_mut().find(|(b, _)| b == block) {
            Some((_, acc)) => acc.merge(&rep),
            None => out.push((block.to_string(), rep)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{trunc_normal, DwConv, Init, Linear};
    use crate::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_names() {
        assert_eq!(block_of("pfe.proj.weight"), "pfe");
        assert_eq!(block_of("stage2.block1.w_s.weight"), "stage2.block1");
        assert_eq!(block_of("stage3.pool.proj_f.bias"), "stage3.pool");
        assert_eq!(block_of("head.fc.weight"), "head");
    }

    #[test]
    fn linear_sum_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = trunc_normal(&mut rng, &[2, 3], 1.0);
        let w: Tensor<f64> = trunc_normal(&mut rng, &[4, 3], 1.0);
        let report = grad_check(
            |ins| {
                let (x, w) = (&ins[0], &ins[1]);
                let y = ops::linear_forward(x.data(), 2, 3, w.data(), None, 4);
                let dy = vec![1.0; 8];
                let g = ops::linear_backward(x.data(), 2, 3, w.data(), &dy, 4);
                (
                    y.iter().sum(),
                    vec![
                        Tensor::from_vec(&[2, 3], g.dx).unwrap(),
                        Tensor::from_vec(&[4, 3], g.dw).unwrap(),
                    ],
                )
            },
            &[x, w],
            DEFAULT_STEP,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.checked, 18);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 2.0, 1.0, 1.5, -3.0]).unwrap();
        let report = grad_check(
            |ins| {
                let mut s = ins[0].data().to_vec();
                ops::softmax_rows(&mut s, 3);
                let dx = ops::softmax_rows_backward(&s, &[1.0; 6], 3);
                assert!(dx.iter().all(|v| v.abs() < 1e-15));
                (s.iter().sum(), vec![Tensor::from_vec(&[2, 3], dx).unwrap()])
            },
            &[x],
            DEFAULT_STEP,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn dwconv_identity_kernel_passes_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = DwConv::<f64>::new("dw", 3, 2, Init::Zeros, &mut rng).unwrap();
        conv.kernel.value.set(&[1, 1, 0], 1.0);
        conv.kernel.value.set(&[1, 1, 1], 1.0);
        let x: Tensor<f64> = trunc_normal(&mut rng, &[3, 4, 2], 1.0);
        let dx = conv.backward(x.data(), 1, 3, 4, &[1.0; 24]);
        assert!(dx.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |ins| {
                let v = ins[0].data();
                (v[0] * v[0] + v[1], vec![Tensor::from_vec(&[2], vec![v[0], 1.0]).unwrap()])
            },
            &[x],
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
        assert_eq!(report.worst, Some((0, 0)));
    }

    #[test]
    fn non_finite_reported() {
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let err = grad_check(
            |ins| (1.0 / ins[0].data()[0], vec![Tensor::from_vec(&[1], vec![0.0]).unwrap()]),
            &[x],
            DEFAULT_STEP,
            1e-4,
        );
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn linear_layer_parameters_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = Linear::<f64>::new("l", 3, 2, true, Init::TruncNormal(1.0), &mut rng);
        let x: Tensor<f64> = trunc_normal(&mut rng, &[4, 3], 1.0);
        let r: Vec<f64> = trunc_normal::<f64, _>(&mut rng, &[8], 1.0).into_vec();
        let w0 = layer.weight.value.clone();
        let report = grad_check(
            |ins| {
                let mut l = layer.clone();
                l.weight.value = ins[0].clone();
                let y = l.forward(x.data(), 4);
                l.backward(x.data(), 4, &r);
                let v = y.iter().zip(&r).map(|(a, b)| a * b).sum();
                (v, vec![l.weight.grad.clone().unwrap()])
            },
            &[w0],
            DEFAULT_STEP,
            1e-7,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }
}
