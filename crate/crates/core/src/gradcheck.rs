//! Central finite-difference checks of tape gradients.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// One scalar probed by the check: tensor index and flat element index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Probe {
    pub tensor: usize,
    pub element: usize,
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub probe: Probe,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub results: Vec<ProbeResult>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ProbeResult> {
        self.results
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Vacuously true when nothing was probed.
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.rel_err <= self.tolerance)
    }
}

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Picks `n` distinct probes uniformly over all elements of `sizes`
/// (every element when `n` covers them all). Output is sorted.
pub fn sample_probes<R: Rng + ?Sized>(sizes: &[usize], n: usize, rng: &mut R) -> Vec<Probe> {
    let total: usize = sizes.iter().sum();
    let flat: Vec<usize> = if n >= total {
        (0..total).collect()
    } else {
        let mut picked = rand::seq::index::sample(rng, total, n).into_vec();
        picked.sort_unstable();
        picked
    };
    flat.into_iter()
        .map(|mut f| {
            let mut tensor = 0;
            while f >= sizes[tensor] {
                f -= sizes[tensor];
                tensor += 1;
            }
            Probe { tensor, element: f }
        })
        .collect()
}

/// Compares tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives a tape and one leaf per entry of `params` and must
/// return a scalar. It is called once on a tracking tape and twice per probe
/// on non-tracking tapes.
pub fn check<F>(params: &[Tensor], probes: &[Probe], step: f64, tolerance: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = loss_fn(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut work = params.to_vec();
    let mut results = Vec::with_capacity(probes.len());
    for &probe in probes {
        let tensor = work
            .get(probe.tensor)
            .ok_or_else(|| Error::Contract(format!("probe {probe:?} out of range")))?;
        if probe.element >= tensor.numel() {
            return Err(Error::Contract(format!("probe {probe:?} out of range")));
        }
        let analytic = tape
            .grad(vars[probe.tensor])
            .map_or(0.0, |g| g[probe.element]);
        let orig = work[probe.tensor].data()[probe.element];
        work[probe.tensor].data_mut()[probe.element] = orig + step;
        let plus = eval(&work)?;
        work[probe.tensor].data_mut()[probe.element] = orig - step;
        let minus = eval(&work)?;
        work[probe.tensor].data_mut()[probe.element] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        results.push(ProbeResult {
            probe,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { results, tolerance })
}

/// [`check`] on every element of every tensor, with default step and tolerance.
pub fn check_all<F>(params: &[Tensor], loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probes: Vec<Probe> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.numel()).map(move |e| Probe { tensor: t, element: e }))
        .collect();
    check(params, &probes, DEFAULT_STEP, DEFAULT_TOLERANCE, loss_fn)
}

/// One probe per tensor, at a uniformly drawn element.
pub fn probes_per_tensor<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Vec<Probe> {
    sizes
        .iter()
        .enumerate()
        .map(|(tensor, &n)| Probe { tensor, element: rng.random_range(0..n) })
        .collect()
}

/// [`check`] for a loss built from a parameter store through a [`Ctx`].
pub fn check_params<F>(store: &ParamStore, probes: &[Probe], step: f64, tolerance: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, true);
    let loss = loss_fn(&mut ctx)?;
    ctx.tape.backward(loss)?;
    let grads = ctx.param_grads();
    drop(ctx);

    let eval = |ps: &ParamStore| -> Result<f64> {
        let mut c = Ctx::new(ps, false);
        let l = loss_fn(&mut c)?;
        Ok(c.tape.value(l).item())
    };
    let mut work = store.clone();
    let mut results = Vec::with_capacity(probes.len());
    for &probe in probes {
        let numel = work.tensors().get(probe.tensor).map(Tensor::numel);
        if numel.is_none_or(|n| probe.element >= n) {
            return Err(Error::Contract(format!("probe {probe:?} out of range")));
        }
        let at = |w: &mut ParamStore, v: f64| w.tensors_mut()[probe.tensor].data_mut()[probe.element] = v;
        let orig = work.tensors()[probe.tensor].data()[probe.element];
        at(&mut work, orig + step);
        let plus = eval(&work)?;
        at(&mut work, orig - step);
        let minus = eval(&work)?;
        at(&mut work, orig);
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads[probe.tensor][probe.element];
        results.push(ProbeResult {
            probe,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { results, tolerance })
}
