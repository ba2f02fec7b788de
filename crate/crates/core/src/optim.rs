//! Flat parameter vectors, L-BFGS with backtracking Armijo line search,
//! momentum SGD, and a central-difference gradient checker.

use std::collections::VecDeque;
use std::fmt;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor};
use crate::scalar::Scalar;

/// A model whose parameters can be enumerated in a fixed order.
///
/// The three methods must agree in length and order; that order is the
/// manifest order used by [`FlatParams`].
pub trait ParamSet<T: Scalar> {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn manifest(&self) -> Vec<ParamSpec> {
        let mut offset = 0;
        self.param_names()
            .into_iter()
            .zip(self.params())
            .map(|(name, t)| {
                let spec = ParamSpec {
                    name,
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                spec
            })
            .collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All parameters of a model concatenated in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams<T> {
    pub values: Vec<T>,
    pub manifest: Vec<ParamSpec>,
}

impl<T: Scalar> FlatParams<T> {
    pub fn from_model<M: ParamSet<T> + ?Sized>(model: &M) -> Self {
        let manifest = model.manifest();
        let mut values = Vec::with_capacity(model.num_params());
        for t in model.params() {
            values.extend_from_slice(t.data());
        }
        Self { values, manifest }
    }

    /// Copies the values back into `model`, which must have the same manifest.
    pub fn write_into<M: ParamSet<T> + ?Sized>(&self, model: &mut M) -> Result<()> {
        write_flat(&self.values, &self.manifest, model)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `name[i]` label for a flat coordinate.
    pub fn describe(&self, index: usize) -> String {
        describe_index(&self.manifest, index)
    }
}

pub fn describe_index(manifest: &[ParamSpec], index: usize) -> String {
    manifest
        .iter()
        .find(|s| index >= s.offset && index < s.offset + s.len())
        .map(|s| format!("{}[{}]", s.name, index - s.offset))
        .unwrap_or_else(|| format!("#{index}"))
}

/// Copies a flat vector into a model after checking the manifest.
pub fn write_flat<T: Scalar, M: ParamSet<T> + ?Sized>(
    values: &[T],
    manifest: &[ParamSpec],
    model: &mut M,
) -> Result<()> {
    if model.manifest() != manifest {
        return Err(Error::Contract(
            "parameter manifest does not match model".into(),
        ));
    }
    let total: usize = manifest.iter().map(ParamSpec::len).sum();
    if values.len() != total {
        return Err(Error::dim("write_flat", &[total], &[values.len()]));
    }
    for (t, spec) in model.params_mut().into_iter().zip(manifest) {
        t.data_mut()
            .copy_from_slice(&values[spec.offset..spec.offset + spec.len()]);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub history: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            grad_tol: 1e-5,
            max_iter: 200,
            armijo_c: 1e-4,
            shrink: 0.5,
            max_backtracks: 30,
        }
    }
}

/// Minimum `sᵀy` for a curvature pair to enter the history.
pub const CURVATURE_MIN: f64 = 1e-10;

/// Rolling `(s, y)` history for the two-loop recursion.
#[derive(Clone, Debug)]
pub struct LbfgsState<T> {
    pairs: VecDeque<(Vec<T>, Vec<T>, T)>,
    cap: usize,
    pub iteration: usize,
}

impl<T: Scalar> LbfgsState<T> {
    pub fn new(cap: usize) -> Self {
        Self {
            pairs: VecDeque::with_capacity(cap),
            cap: cap.max(1),
            iteration: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Stores the pair when `sᵀy > 1e-10`; returns whether it was admitted.
    pub fn admit(&mut self, s: Vec<T>, y: Vec<T>) -> bool {
        let sy = dot(&s, &y);
        if !(sy.as_f64() > CURVATURE_MIN) {
            return false;
        }
        if self.pairs.len() == self.cap {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, T::one() / sy));
        true
    }

    pub fn pairs_satisfy_curvature(&self) -> bool {
        self.pairs
            .iter()
            .all(|(s, y, _)| dot(s, y).as_f64() > CURVATURE_MIN)
    }

    /// `-H·g` via the two-loop recursion. With no history, the steepest
    /// descent direction scaled to at most unit length.
    pub fn direction(&self, grad: &[T]) -> Vec<T> {
        let mut q = grad.to_vec();
        if self.pairs.is_empty() {
            let norm = dot(grad, grad).sqrt();
            let scale = if norm > T::one() {
                T::one() / norm
            } else {
                T::one()
            };
            return q.into_iter().map(|v| -v * scale).collect();
        }
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = *rho * dot(s, &q);
            for (qi, &yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let (s, y, _) = self.pairs.back().expect("non-empty");
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = *rho * dot(y, &q);
            for (qi, &si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.into_iter().map(|v| -v).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub f: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    /// Both the quasi-Newton step and a steepest-descent retry failed the
    /// Armijo test; `x` is the last accepted point.
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome<T> {
    pub x: Vec<T>,
    pub f: T,
    pub iterations: usize,
    pub stop: StopReason,
    /// Entry 0 is the starting point; one entry per accepted step after it.
    pub trace: Vec<TraceEntry>,
}

fn check_finite<T: Scalar>(f: T, g: &[T], at: &str) -> Result<()> {
    if !f.is_finite() {
        return Err(Error::NonFinite(format!("objective is {f} at {at}")));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient coordinate {i} is {} at {at}",
            g[i]
        )));
    }
    Ok(())
}

/// Minimizes `oracle` (value and gradient) from `x0`.
pub fn lbfgs_minimize<T, F>(
    mut oracle: F,
    x0: Vec<T>,
    config: &LbfgsConfig,
) -> Result<LbfgsOutcome<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let mut x = x0;
    let (mut f, mut g) = oracle(&x)?;
    if g.len() != x.len() {
        return Err(Error::dim("lbfgs gradient", &[x.len()], &[g.len()]));
    }
    check_finite(f, &g, "the starting point")?;
    let mut state = LbfgsState::new(config.history);
    let mut trace = vec![TraceEntry {
        iter: 0,
        f: f.as_f64(),
        grad_norm: dot(&g, &g).sqrt().as_f64(),
    }];
    let c = T::lit(config.armijo_c);
    let shrink = T::lit(config.shrink);
    let mut retrying = false;

    let stop = loop {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm.as_f64() <= config.grad_tol {
            break StopReason::GradientTolerance;
        }
        if state.iteration >= config.max_iter {
            break StopReason::MaxIterations;
        }
        let mut d = state.direction(&g);
        let mut gtd = dot(&g, &d);
        if gtd >= T::zero() {
            state.clear();
            d = state.direction(&g);
            gtd = dot(&g, &d);
        }

        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let trial: Vec<T> = x.iter().zip(&d).map(|(&xi, &di)| xi + step * di).collect();
            let (ft, gt) = oracle(&trial)?;
            if ft.is_finite() && ft <= f + c * step * gtd {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= shrink;
        }

        let Some((xn, fnew, gnew)) = accepted else {
            if retrying || state.is_empty() {
                warn!("l-bfgs line search failed at iteration {}", state.iteration);
                break StopReason::LineSearchFailed;
            }
            debug!(
                "l-bfgs: retrying iteration {} with steepest descent",
                state.iteration
            );
            state.clear();
            retrying = true;
            continue;
        };
        retrying = false;
        check_finite(fnew, &gnew, &format!("iteration {}", state.iteration + 1))?;

        let s: Vec<T> = xn.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = gnew.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        state.admit(s, y);
        x = xn;
        f = fnew;
        g = gnew;
        state.iteration += 1;
        trace.push(TraceEntry {
            iter: state.iteration,
            f: f.as_f64(),
            grad_norm: dot(&g, &g).sqrt().as_f64(),
        });
    };

    Ok(LbfgsOutcome {
        x,
        f,
        iterations: state.iteration,
        stop,
        trace,
    })
}

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// `v ← μ·v + g; p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], lr: T, momentum: T, velocity: &mut [T]) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Momentum SGD over a whole [`ParamSet`], one velocity buffer per tensor.
#[derive(Clone, Debug)]
pub struct MomentumSgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<T>,
}

impl<T: Scalar> MomentumSgd<T> {
    pub fn new(lr: T, num_params: usize) -> Self {
        Self {
            lr,
            momentum: T::lit(DEFAULT_MOMENTUM),
            velocity: vec![T::zero(); num_params],
        }
    }

    /// `grads` is flat, in manifest order.
    pub fn step<M: ParamSet<T> + ?Sized>(&mut self, model: &mut M, grads: &[T]) {
        let mut offset = 0;
        for t in model.params_mut() {
            let n = t.len();
            sgd_step(
                t.data_mut(),
                &grads[offset..offset + n],
                self.lr,
                self.momentum,
                &mut self.velocity[offset..offset + n],
            );
            offset += n;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Relative error is only meaningful where `|fd|` exceeds this.
    pub fd_floor: f64,
    /// Mismatches below `roundoff_factor · ε · max(|f|, 1) / step` are
    /// within the rounding noise of the central difference and never flagged.
    pub roundoff_factor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            fd_floor: 1e-8,
            roundoff_factor: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    /// `|a − fd| / max(|a|, |fd|)`; `None` where `|fd|` is below the floor.
    pub rel_error: Option<f64>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub entries: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Absolute mismatch attributable to rounding in the objective.
    pub roundoff_bound: f64,
    pub flagged: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .entries
            .iter()
            .map(|e| e.label.len())
            .max()
            .unwrap_or(0)
            .max("coordinate".len());
        writeln!(
            f,
            "{:<width$}  {:>14}  {:>14}  {:>10}  flag",
            "coordinate", "analytic", "numeric", "rel_err"
        )?;
        for e in &self.entries {
            let rel = e
                .rel_error
                .map(|r| format!("{r:10.2e}"))
                .unwrap_or_else(|| format!("{:>10}", "-"));
            writeln!(
                f,
                "{:<width$}  {:>14.6e}  {:>14.6e}  {rel}  {}",
                e.label,
                e.analytic,
                e.numeric,
                if e.flagged { "!!" } else { "" }
            )?;
        }
        write!(
            f,
            "checked {} coordinates: max rel err {:.3e}, mean {:.3e}, roundoff bound {:.1e}, {} flagged",
            self.entries.len(),
            self.max_rel_error,
            self.mean_rel_error,
            self.roundoff_bound,
            self.flagged.len()
        )
    }
}

/// Compares the oracle's gradient against central differences on `samples`
/// randomly chosen coordinates (all of them when `samples >= x.len()`).
///
/// A coordinate is flagged when its relative error exceeds the tolerance
/// and its absolute mismatch exceeds the roundoff bound, or, below the
/// `|fd|` floor, when the absolute mismatch exceeds the tolerance.
pub fn grad_check<T, F>(
    mut oracle: F,
    x: &[T],
    samples: usize,
    seed: u64,
    config: &GradCheckConfig,
    manifest: Option<&[ParamSpec]>,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let (f0, analytic) = oracle(x)?;
    if analytic.len() != x.len() {
        return Err(Error::dim("grad_check", &[x.len()], &[analytic.len()]));
    }
    let mut coords: Vec<usize> = if samples >= x.len() {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, x.len(), samples).into_vec()
    };
    coords.sort_unstable();

    let h = T::lit(config.step);
    let roundoff_bound =
        config.roundoff_factor * T::epsilon().as_f64() * f0.as_f64().abs().max(1.0) / config.step;
    let mut probe = x.to_vec();
    let mut entries = Vec::with_capacity(coords.len());
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let (fp, _) = oracle(&probe)?;
        probe[i] = orig - h;
        let (fm, _) = oracle(&probe)?;
        probe[i] = orig;
        let numeric = ((fp - fm) / (h + h)).as_f64();
        let a = analytic[i].as_f64();
        let (rel_error, flagged) = if numeric.abs() > config.fd_floor {
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            let resolvable = (a - numeric).abs() > roundoff_bound;
            (
                Some(rel),
                (rel > config.tolerance && resolvable) || !rel.is_finite(),
            )
        } else {
            (None, (a - numeric).abs() > config.tolerance)
        };
        entries.push(CoordinateCheck {
            index: i,
            label: manifest
                .map(|m| describe_index(m, i))
                .unwrap_or_else(|| format!("#{i}")),
            analytic: a,
            numeric,
            rel_error,
            flagged,
        });
    }
    let rels: Vec<f64> = entries.iter().filter_map(|e| e.rel_error).collect();
    let max_rel_error = rels.iter().copied().fold(0.0, f64::max);
    let mean_rel_error = if rels.is_empty() {
        0.0
    } else {
        rels.iter().sum::<f64>() / rels.len() as f64
    };
    let flagged = entries
        .iter()
        .filter(|e| e.flagged)
        .map(|e| e.index)
        .collect();
    Ok(GradCheckReport {
        config: config.clone(),
        entries,
        max_rel_error,
        mean_rel_error,
        roundoff_bound,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((dot(x, x), x.iter().map(|v| 2.0 * v).collect()))
    }

    #[test]
    fn lbfgs_sphere_from_3_4() {
        let out = lbfgs_minimize(sphere, vec![3.0, 4.0], &LbfgsConfig::default()).unwrap();
        assert!(out.iterations <= 5, "{} iterations", out.iterations);
        assert!(out.f <= 1e-12);
        assert!(out.x.iter().all(|v| v.abs() < 1e-6));
        assert!(out.trace.windows(2).all(|w| w[1].f <= w[0].f));
    }

    #[test]
    fn lbfgs_quadratic_matches_linear_solve() {
        // f = ½xᵀAx − bᵀx, A SPD; minimizer solves Ax = b.
        let a = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let b = [1.0, -2.0, 0.5];
        let oracle = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let ax: Vec<f64> = a.iter().map(|r| dot(r, x)).collect();
            let f = 0.5 * dot(x, &ax) - dot(&b, x);
            Ok((f, ax.iter().zip(&b).map(|(p, q)| p - q).collect()))
        };
        let config = LbfgsConfig {
            grad_tol: 1e-12,
            ..LbfgsConfig::default()
        };
        let out = lbfgs_minimize(oracle, vec![0.0; 3], &config).unwrap();
        // Oracle: Gaussian elimination.
        let mut m = a;
        let mut rhs = b;
        for col in 0..3 {
            for row in col + 1..3 {
                let factor = m[row][col] / m[col][col];
                for k in col..3 {
                    m[row][k] -= factor * m[col][k];
                }
                rhs[row] -= factor * rhs[col];
            }
        }
        let mut sol = [0.0; 3];
        for row in (0..3).rev() {
            let tail: f64 = (row + 1..3).map(|k| m[row][k] * sol[k]).sum();
            sol[row] = (rhs[row] - tail) / m[row][row];
        }
        let err: f64 = out
            .x
            .iter()
            .zip(sol)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-8, "error {err}");
    }

    #[test]
    fn lbfgs_at_minimum_takes_no_steps() {
        let out = lbfgs_minimize(sphere, vec![0.0, 0.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.stop, StopReason::GradientTolerance);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn lbfgs_rejects_non_finite_start() {
        let bad = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(matches!(
            lbfgs_minimize(bad, vec![1.0], &LbfgsConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn lbfgs_stops_when_no_descent_is_possible() {
        // The gradient lies: it points uphill, so no step satisfies Armijo.
        let liar = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((x[0], vec![-1.0])) };
        let out = lbfgs_minimize(liar, vec![0.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(out.stop, StopReason::LineSearchFailed);
        assert_eq!(out.x, vec![0.0]);
    }

    #[test]
    fn lbfgs_history_is_capped_and_curvature_filtered() {
        let mut state = LbfgsState::<f64>::new(2);
        assert!(!state.admit(vec![1.0, 0.0], vec![-1.0, 0.0]));
        assert!(!state.admit(vec![1e-6, 0.0], vec![1e-6, 0.0]));
        for k in 1..5 {
            assert!(state.admit(vec![k as f64, 1.0], vec![1.0, 1.0]));
        }
        assert_eq!(state.len(), 2);
        assert!(state.pairs_satisfy_curvature());
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], 0.1, 0.9, &mut v);
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![1.0f64];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[2.0], 0.1, 0.9, &mut v);
        assert!((p[0] - (1.0 - 0.1 * 2.0)).abs() < 1e-15);

        let mut p = vec![0.0f64];
        let mut v = vec![0.0];
        let (lr, g) = (0.01, 3.0);
        sgd_step(&mut p, &[g], lr, 0.9, &mut v);
        sgd_step(&mut p, &[g], lr, 0.9, &mut v);
        assert!((p[0] + lr * g * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn grad_check_affine_is_exact() {
        let w = [0.5, -1.5, 2.0];
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((dot(&w, x) + 3.0, w.to_vec())) };
        let r = grad_check(
            f,
            &[0.1, 0.2, 0.3],
            10,
            0,
            &GradCheckConfig::default(),
            None,
        )
        .unwrap();
        assert!(r.passed());
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn grad_check_sphere() {
        let r = grad_check(
            sphere,
            &[0.3, -1.2, 2.5, 0.7],
            4,
            1,
            &GradCheckConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(r.entries.len(), 4);
        assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn grad_check_flags_corrupted_coordinate() {
        let corrupt = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (f, mut g) = sphere(x)?;
            g[2] *= 2.0;
            Ok((f, g))
        };
        let r = grad_check(
            corrupt,
            &[0.3, -1.2, 2.5, 0.7],
            10,
            1,
            &GradCheckConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(r.flagged, vec![2]);
        let text = r.to_string();
        assert!(text.contains("1 flagged"), "{text}");
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["flagged"][0], 2);
    }

    #[test]
    fn grad_check_samples_subset_deterministically() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let a = grad_check(sphere, &x, 7, 9, &GradCheckConfig::default(), None).unwrap();
        let b = grad_check(sphere, &x, 7, 9, &GradCheckConfig::default(), None).unwrap();
        assert_eq!(a.entries.len(), 7);
        assert_eq!(a, b);
    }
}
