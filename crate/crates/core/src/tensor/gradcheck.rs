use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (input index, coordinate) where the maximum was attained.
    pub worst: (usize, usize),
    pub coords_checked: usize,
    /// Coordinates with a kink within `±eps`: the one-sided differences
    /// disagree by more than [`KINK_TOLERANCE`]·max(1, |numeric|). These are
    /// scored against whichever of the central and one-sided differences is
    /// nearest.
    pub nonsmooth: usize,
}

pub const KINK_TOLERANCE: f64 = 1e-3;

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares reverse-mode gradients of a scalar computation against central
/// finite differences `(f(x+eps·e_i) − f(x−eps·e_i)) / (2·eps)`, checking
/// every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::invalid(
            "grad_check",
            format!("eps {eps} outside [1e-7, 1e-3]"),
        ));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let f0 = eval(inputs)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
        nonsmooth: 0,
    };
    let mut offset = 0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut work: Vec<Tensor> = inputs.to_vec();
        for i in 0..x.numel() {
            let a = analytic.data()[i];
            if !a.is_finite() {
                return Err(TensorError::NonFiniteGradient { index: offset + i });
            }
            let orig = x.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            report.coords_checked += 1;
            let (ahead, behind) = ((fp - f0) / eps, (f0 - fm) / eps);
            let rel = |d: f64| (a - d).abs() / d.abs().max(1.0);
            let err = if (ahead - behind).abs() > KINK_TOLERANCE * numeric.abs().max(1.0) {
                report.nonsmooth += 1;
                rel(numeric).min(rel(ahead)).min(rel(behind))
            } else {
                rel(numeric)
            };
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst = (k, i);
            }
        }
        offset += x.numel();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_function_has_ones_gradient() {
        let x = rand_tensor(&[5], 1);
        let r = grad_check(|t, v| Ok(t.sum(v[0])), &[x.clone()], 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        let mut t = Tape::new();
        let v = t.leaf(x, true);
        let s = t.sum(v);
        let g = t.backward(s).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn quadratic_at_three() {
        let x = Tensor::scalar(3.0);
        let f = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        };
        let r = grad_check(f, &[x.clone()], 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-8);
        let mut t = Tape::new();
        let v = t.leaf(x, true);
        let out = f(&mut t, &[v]).unwrap();
        assert!((t.backward(out).unwrap().get(v).unwrap().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn mse_of_softmax_of_linear_map() {
        let w = rand_tensor(&[4, 4], 7);
        let x = rand_tensor(&[4, 1], 8);
        let target = rand_tensor(&[4, 1], 9);
        let r = grad_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let p = t.softmax(y, 0)?;
                let tg = t.constant(target.clone());
                let d = t.sub(p, tg)?;
                let sq = t.square(d);
                Ok(t.mean(sq))
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn kinks_are_scored_one_sided() {
        let x = Tensor::new(vec![3], vec![0.5, 2e-6, -0.25]).unwrap();
        let r = grad_check(|t, v| { let a = t.abs(v[0]); Ok(t.sum(a)) }, &[x.clone()], 1e-5).unwrap();
        assert_eq!((r.nonsmooth, r.coords_checked), (1, 3));
        assert!(r.passed(1e-9), "{r:?}");
        // 2·|x| whose reported slope is only ±1.
        let r = grad_check(
            |t, v| {
                let a = t.abs(v[0]);
                let held = t.value(a).clone();
                let c = t.constant(held);
                let d = t.add(a, c)?;
                Ok(t.sum(d))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.nonsmooth, 1);
        assert!(!r.passed(1e-4), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_not_mistaken_for_a_kink() {
        let x = rand_tensor(&[6], 3);
        // d/dx of x·stop(x) is reported as x, half the true 2x.
        let r = grad_check(
            |t, v| {
                let value = t.value(v[0]).clone();
                let c = t.constant(value);
                let p = t.mul(v[0], c)?;
                Ok(t.sum(p))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.nonsmooth, 0);
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[x.clone()], 1e-2).is_err());
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[x], 1e-9).is_err());
    }

    #[test]
    fn non_finite_analytic_gradient_is_reported() {
        // sqrt'(0) is clamped, so use a division by zero instead.
        let x = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let one = t.constant(Tensor::ones(&[2]));
                let d = t.div(one, v[0])?;
                Ok(t.sum(d))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient { index: 1 });
    }
}
