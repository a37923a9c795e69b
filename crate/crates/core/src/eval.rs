//! Evaluation protocols and the report they fill in.
//!
//! All errors are position MSEs averaged over particle coordinates and then
//! over trajectories. Predictions that leave the finite range or the
//! divergence cap are counted and excluded from the averages instead of
//! poisoning them.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::integrator::{rollout_with, DIVERGENCE_CAP};
use crate::model::{Model, ModelSpec, NumericalSolver, Predictor};
use crate::physics::{
    accel_at, sample_charged_of_type, sample_initial_gravity, ForceLaw, GenerationConfig, SystemKind,
    SystemState, Trajectory,
};
use crate::tensor::no_grad;
use crate::training::{evaluate_mse, make_samples, train, TrainConfig, TrainSample};

/// Tolerance recorded next to fitted truncation slopes.
pub const SLOPE_TOLERANCE: f64 = 0.2;

/// Mean squared difference over all coordinates.
pub fn position_mse(pred: &[Vec3], truth: &[Vec3]) -> f64 {
    let n = (pred.len() * 3).max(1) as f64;
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            let d = geometry::sub(*p, *t);
            geometry::dot(d, d)
        })
        .sum::<f64>()
        / n
}

fn finite_mse(pred: &[Vec3], truth: &[Vec3], cap: f64) -> Option<f64> {
    let ok = pred.iter().all(|p| p.iter().all(|c| c.is_finite()) && geometry::norm(*p) <= cap);
    ok.then(|| position_mse(pred, truth))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMse {
    pub horizon: f64,
    /// `None` when every trajectory diverged.
    pub mse: Option<f64>,
    pub n_diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionMse {
    pub fraction: String,
    pub value: f64,
    pub mse: Option<f64>,
    pub n_diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMse {
    pub window: usize,
    pub mse: Option<f64>,
    pub n_active: usize,
    pub n_diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericalCurve {
    pub dt: f64,
    pub windows: Vec<WindowMse>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauMse {
    pub tau: usize,
    pub mse: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceResult {
    pub max_relative_deviation: f64,
    pub n_transforms: usize,
    pub n_states: usize,
    pub transform_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationResult {
    pub dts: Vec<f64>,
    pub local_errors: Vec<f64>,
    pub global_errors: Vec<f64>,
    pub local_slope: f64,
    pub global_slope: f64,
    pub slope_tolerance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model: Option<String>,
    pub model_hash: Option<String>,
    pub dataset_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub command: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub direct: Vec<HorizonMse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intermediate: Vec<FractionMse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rollout: Vec<WindowMse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub numerical: Vec<NumericalCurve>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tau_scan: Vec<TauMse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivariance: Option<EquivarianceResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<TruncationResult>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn initial_states(test: &[Trajectory]) -> Vec<&SystemState> {
    test.iter().map(|t| &t.states[0]).collect()
}

fn frame(t: &Trajectory, elapsed: f64) -> Result<&SystemState> {
    t.frame_at(elapsed).map(|k| &t.states[k]).ok_or_else(|| Error::Horizon {
        horizon: elapsed,
        reason: format!(
            "ground truth stores frames every {} up to {}",
            t.frame_dt(),
            t.frame_dt() * (t.states.len() - 1) as f64
        ),
    })
}

/// MSE at each horizon, predicting from the first frame.
pub fn eval_direct(pred: &dyn Predictor, test: &[Trajectory], horizons: &[f64]) -> Result<Vec<HorizonMse>> {
    let inputs = initial_states(test);
    horizons
        .iter()
        .map(|&h| {
            let truth = test.iter().map(|t| frame(t, h)).collect::<Result<Vec<_>>>()?;
            let preds = pred.predict(&inputs, h)?;
            let errs: Vec<Option<f64>> = preds
                .iter()
                .zip(&truth)
                .map(|(p, t)| finite_mse(&p.positions, &t.positions, DIVERGENCE_CAP))
                .collect();
            Ok(HorizonMse {
                horizon: h,
                mse: mean(errs.iter().flatten().copied()),
                n_diverged: errs.iter().filter(|e| e.is_none()).count(),
            })
        })
        .collect()
}

/// MSE at fractions of the training horizon.
pub fn eval_intermediate(
    pred: &dyn Predictor,
    test: &[Trajectory],
    horizon: f64,
    fractions: &[(usize, usize)],
) -> Result<Vec<FractionMse>> {
    let inputs = initial_states(test);
    let preds = pred.intermediate(&inputs, horizon, fractions)?;
    fractions
        .iter()
        .zip(preds)
        .map(|(&(n, d), per_system)| {
            let value = n as f64 / d as f64;
            let errs = per_system
                .iter()
                .zip(test)
                .map(|(p, t)| Ok(finite_mse(p, &frame(t, horizon * value)?.positions, DIVERGENCE_CAP)))
                .collect::<Result<Vec<_>>>()?;
            Ok(FractionMse {
                fraction: format!("{n}/{d}"),
                value,
                mse: mean(errs.iter().flatten().copied()),
                n_diverged: errs.iter().filter(|e| e.is_none()).count(),
            })
        })
        .collect()
}

/// Per-trajectory rollout errors, `[trajectory][window]`; `None` after the
/// trajectory diverged.
pub fn rollout_errors(
    pred: &dyn Predictor,
    test: &[Trajectory],
    n_windows: usize,
    window_time: f64,
    cap: f64,
) -> Result<Vec<Vec<Option<f64>>>> {
    for t in test {
        frame(t, window_time * n_windows as f64)?;
    }
    let inputs = initial_states(test);
    let rolls = rollout_with(&inputs, n_windows, window_time, cap, |s| pred.predict(s, window_time))?;
    test.iter()
        .zip(rolls)
        .map(|(t, r)| {
            (1..=n_windows)
                .map(|w| {
                    Ok(match r.windows.get(w - 1) {
                        Some(s) => Some(position_mse(&s.positions, &frame(t, window_time * w as f64)?.positions)),
                        None => None,
                    })
                })
                .collect()
        })
        .collect()
}

fn curve(errors: &[Vec<Option<f64>>], n_windows: usize) -> Vec<WindowMse> {
    (0..n_windows)
        .map(|w| {
            let col: Vec<Option<f64>> = errors.iter().map(|e| e[w]).collect();
            WindowMse {
                window: w + 1,
                mse: mean(col.iter().flatten().copied()),
                n_active: col.iter().filter(|e| e.is_some()).count(),
                n_diverged: col.iter().filter(|e| e.is_none()).count(),
            }
        })
        .collect()
}

/// MSE at every window boundary of a multi-window rollout.
pub fn eval_rollout(
    pred: &dyn Predictor,
    test: &[Trajectory],
    n_windows: usize,
    window_time: f64,
) -> Result<Vec<WindowMse>> {
    let errors = rollout_errors(pred, test, n_windows, window_time, DIVERGENCE_CAP)?;
    Ok(curve(&errors, n_windows))
}

/// Symplectic Euler with the true force at each coarse step, rolled out over
/// the same windows as the learned models.
pub fn compare_numerical(
    test: &[Trajectory],
    law: &ForceLaw,
    dts: &[f64],
    n_windows: usize,
    window_time: f64,
) -> Result<Vec<NumericalCurve>> {
    dts.iter()
        .map(|&dt| {
            let solver = NumericalSolver { law: *law, dt };
            Ok(NumericalCurve {
                dt,
                windows: eval_rollout(&solver, test, n_windows, window_time)?,
            })
        })
        .collect()
}

/// Train one model per (tau, seed) with the same budget and report the mean
/// test MSE at the training horizon.
pub fn tau_scan(
    base: &ModelSpec,
    taus: &[usize],
    seeds: &[u64],
    train_set: &[TrainSample],
    valid_set: &[TrainSample],
    test_set: &[TrainSample],
    config: &TrainConfig,
) -> Result<Vec<TauMse>> {
    let ModelSpec::Pingo {
        backbone,
        integrator,
        variant,
    } = base
    else {
        return Err(Error::config("tau scan needs an integrator-based model"));
    };
    taus.iter()
        .map(|&tau| {
            let spec = ModelSpec::Pingo {
                backbone: backbone.clone(),
                integrator: crate::integrator::IntegratorConfig::new(tau, integrator.horizon)?,
                variant: *variant,
            };
            let per_seed = seeds
                .iter()
                .map(|&seed| {
                    let model = Model::new(&spec, seed)?;
                    let cfg = TrainConfig { seed, ..config.clone() };
                    train(&model, train_set, valid_set, &cfg, None)?;
                    evaluate_mse(&model, test_set, cfg.batch_size)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(TauMse {
                tau,
                mse: per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64,
                per_seed,
            })
        })
        .collect()
}

/// Training samples for every split at one horizon.
pub fn samples_for(splits: [&[Trajectory]; 3], horizon: f64) -> Result<[Vec<TrainSample>; 3]> {
    Ok([
        make_samples(splits[0], horizon)?,
        make_samples(splits[1], horizon)?,
        make_samples(splits[2], horizon)?,
    ])
}

/// Every stored snapshot of a model's prediction over one horizon: positions
/// first, then velocities where the model produces them.
fn snapshots(model: &Model, states: &[&SystemState]) -> Result<Snapshots> {
    match model {
        Model::Pingo(m) => Ok(m
            .forward_batch(states, m.integrator.horizon, false)?
            .into_iter()
            .map(|p| (p.positions, p.velocities))
            .collect()),
        Model::Direct(m) => no_grad(|| {
            let batch = crate::egnn::GraphBatch::from_states(states)?;
            let q0 = crate::egnn::GraphBatch::positions(states)?;
            let v0 = crate::egnn::GraphBatch::velocities(states)?;
            let out = m.network.forward(&batch, &q0, &v0, m.horizon)?;
            let layers: Vec<Vec<Vec<Vec3>>> = out.positions.iter().map(|q| batch.split_rows(&q.data())).collect();
            let vel = batch.split_rows(&out.velocity.data());
            Ok((0..states.len())
                .map(|s| (layers.iter().map(|l| l[s].clone()).collect(), vec![vel[s].clone()]))
                .collect())
        }),
    }
}

/// Largest relative deviation between predicting on the transformed states
/// and transforming the predictions, over all snapshots.
pub fn transform_deviation(model: &Model, states: &[&SystemState], rotation: &Mat3, shift: Vec3) -> Result<f64> {
    deviation_from(&snapshots(model, states)?, model, states, rotation, shift)
}

type Snapshots = Vec<(Vec<Vec<Vec3>>, Vec<Vec<Vec3>>)>;

fn deviation_from(base: &Snapshots, model: &Model, states: &[&SystemState], rotation: &Mat3, shift: Vec3) -> Result<f64> {
    let moved: Vec<SystemState> = states.iter().map(|s| s.transformed(rotation, shift)).collect();
    let moved_refs: Vec<&SystemState> = moved.iter().collect();
    let after = snapshots(model, &moved_refs)?;
    let mut worst: f64 = 0.0;
    let apply = |p: &Vec3, with_shift: bool| {
        let r = geometry::mat_vec(rotation, *p);
        if with_shift {
            geometry::add(r, shift)
        } else {
            r
        }
    };
    for ((bq, bv), (aq, av)) in base.iter().zip(&after) {
        let mut diff = 0.0;
        let mut size = 0.0;
        for (b, a) in bq.iter().zip(aq) {
            for (x, y) in b.iter().zip(a) {
                let t = apply(x, true);
                diff += geometry::dot(geometry::sub(t, *y), geometry::sub(t, *y));
                size += geometry::dot(t, t);
            }
        }
        for (b, a) in bv.iter().zip(av) {
            for (x, y) in b.iter().zip(a) {
                let t = apply(x, false);
                diff += geometry::dot(geometry::sub(t, *y), geometry::sub(t, *y));
                size += geometry::dot(t, t);
            }
        }
        let rel = if size > 0.0 { (diff / size).sqrt() } else { diff.sqrt() };
        worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    Ok(worst)
}

/// Random orthogonal maps (either determinant) with Gaussian shifts.
/// Transform `k` draws from stream `k` of `seed`, so any single transform can
/// be replayed.
pub fn random_transform(seed: u64, k: u64) -> (Mat3, Vec3) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    let reflection = rng.gen_bool(0.5);
    let q = geometry::random_orthogonal(&mut rng, reflection);
    let b = geometry::gaussian_vec3(&mut rng);
    (q, b)
}

pub fn equivariance_audit(
    model: &Model,
    states: &[&SystemState],
    n_transforms: usize,
    seed: u64,
) -> Result<EquivarianceResult> {
    let base = snapshots(model, states)?;
    let mut worst: f64 = 0.0;
    for k in 0..n_transforms {
        let (q, b) = random_transform(seed, k as u64);
        worst = worst.max(deviation_from(&base, model, states, &q, b)?);
    }
    Ok(EquivarianceResult {
        max_relative_deviation: worst,
        n_transforms,
        n_states: states.len(),
        transform_seed: seed,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

type Field<'a> = dyn Fn(&[Vec3]) -> Result<Vec<Vec3>> + 'a;

/// Classical Runge-Kutta on `(q, v)` with `substeps` equal steps.
fn rk4_flow(q0: &[Vec3], v0: &[Vec3], accel: &Field, time: f64, substeps: usize) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let h = time / substeps as f64;
    let axpy = |x: &[Vec3], d: &[Vec3], c: f64| -> Vec<Vec3> {
        x.iter().zip(d).map(|(a, b)| geometry::add(*a, geometry::scale(*b, c))).collect()
    };
    let mut q = q0.to_vec();
    let mut v = v0.to_vec();
    for _ in 0..substeps {
        let k1q = v.clone();
        let k1v = accel(&q)?;
        let k2q = axpy(&v, &k1v, h / 2.0);
        let k2v = accel(&axpy(&q, &k1q, h / 2.0))?;
        let k3q = axpy(&v, &k2v, h / 2.0);
        let k3v = accel(&axpy(&q, &k2q, h / 2.0))?;
        let k4q = axpy(&v, &k3v, h);
        let k4v = accel(&axpy(&q, &k3q, h))?;
        for i in 0..q.len() {
            for c in 0..3 {
                q[i][c] += h / 6.0 * (k1q[i][c] + 2.0 * k2q[i][c] + 2.0 * k3q[i][c] + k4q[i][c]);
                v[i][c] += h / 6.0 * (k1v[i][c] + 2.0 * k2v[i][c] + 2.0 * k3v[i][c] + k4v[i][c]);
            }
        }
    }
    Ok((q, v))
}

fn euclid(a: &[Vec3], b: &[Vec3]) -> f64 {
    geometry::distance(a, b)
}

/// Local and global errors of symplectic Euler against a fine reference.
///
/// Local: `|q(dt) - q - v dt - f(q) dt^2|` from each initial state.
/// Global: `|q_k - q(horizon)|` after `k = horizon / dt` steps.
/// Errors are averaged over `systems` before fitting.
pub fn truncation_scan_with(
    systems: &[(Vec<Vec3>, Vec<Vec3>)],
    accel: &Field,
    dts: &[f64],
    horizon: f64,
) -> Result<TruncationResult> {
    if dts.len() < 3 {
        return Err(Error::config(format!(
            "slope fit needs at least three step sizes, got {}",
            dts.len()
        )));
    }
    if systems.is_empty() {
        return Err(Error::config("truncation scan needs at least one system"));
    }
    const REF_STEP: f64 = 1e-3;
    let mut local_errors = Vec::with_capacity(dts.len());
    let mut global_errors = Vec::with_capacity(dts.len());
    for &dt in dts {
        if !(dt > 0.0) {
            return Err(Error::config(format!("step sizes must be positive, got {dt}")));
        }
        let steps = crate::integrator::IntegratorConfig { tau: 1, horizon: dt }.steps_for(horizon)?;
        let mut local = 0.0;
        let mut global = 0.0;
        for (q0, v0) in systems {
            let sub = ((dt / REF_STEP).ceil() as usize).max(16);
            let (q_true, _) = rk4_flow(q0, v0, accel, dt, sub)?;
            let f0 = accel(q0)?;
            let one_step: Vec<Vec3> = q0
                .iter()
                .zip(v0)
                .zip(&f0)
                .map(|((q, v), a)| geometry::add(geometry::add(*q, geometry::scale(*v, dt)), geometry::scale(*a, dt * dt)))
                .collect();
            local += euclid(&q_true, &one_step);

            let (q_ref, _) = rk4_flow(q0, v0, accel, horizon, ((horizon / REF_STEP).ceil() as usize).max(16))?;
            let mut q = q0.clone();
            let mut v = v0.clone();
            for _ in 0..steps {
                let a = accel(&q)?;
                for i in 0..q.len() {
                    v[i] = geometry::add(v[i], geometry::scale(a[i], dt));
                    q[i] = geometry::add(q[i], geometry::scale(v[i], dt));
                }
            }
            global += euclid(&q, &q_ref);
        }
        local_errors.push(local / systems.len() as f64);
        global_errors.push(global / systems.len() as f64);
    }
    Ok(TruncationResult {
        dts: dts.to_vec(),
        local_slope: loglog_slope(dts, &local_errors),
        global_slope: loglog_slope(dts, &global_errors),
        local_errors,
        global_errors,
        slope_tolerance: SLOPE_TOLERANCE,
    })
}

/// Samples systems whose particles stay at least `min_separation` apart over
/// `horizon` (checked on a fine reference), so the force field is smooth
/// along the path.
pub fn sample_smooth_systems(
    kind: SystemKind,
    n_bodies: usize,
    count: usize,
    seed: u64,
    horizon: f64,
    min_separation: f64,
) -> Result<Vec<SystemState>> {
    let config = GenerationConfig::new(kind, n_bodies);
    config.validate()?;
    let law = config.force_law();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(Error::config(format!(
                "no {kind} system keeps particles {min_separation} apart over {horizon}"
            )));
        }
        let s = match kind {
            SystemKind::Gravity => sample_initial_gravity(&config, &mut rng)?,
            SystemKind::Charged => sample_charged_of_type(&config, out.len() % 3, &mut rng)?,
        };
        let mut cur = s.clone();
        let dt = 1e-3;
        let mut ok = true;
        for _ in 0..(horizon / dt).ceil() as usize {
            let a = accel_at(&cur.positions, &cur.graph, &law)?;
            cur = crate::physics::symplectic_euler_step(&cur, &a, dt);
            if min_pair_distance(&cur.positions) < min_separation {
                ok = false;
                break;
            }
        }
        if ok && min_pair_distance(&s.positions) >= min_separation {
            out.push(s);
        }
    }
    Ok(out)
}

fn min_pair_distance(q: &[Vec3]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            m = m.min(geometry::norm(geometry::sub(q[i], q[j])));
        }
    }
    m
}

/// Truncation scan for the true force law of `states`' system.
pub fn truncation_scan(states: &[SystemState], law: &ForceLaw, dts: &[f64], horizon: f64) -> Result<TruncationResult> {
    let graph = match states.first() {
        Some(s) => s.graph.clone(),
        None => return Err(Error::config("truncation scan needs at least one system")),
    };
    if states.iter().any(|s| s.graph != graph) {
        return Err(Error::config("truncation scan systems must share one particle graph"));
    }
    let systems: Vec<(Vec<Vec3>, Vec<Vec3>)> = states
        .iter()
        .map(|s| (s.positions.clone(), s.velocities.clone()))
        .collect();
    let field = |q: &[Vec3]| accel_at(q, &graph, law);
    truncation_scan_with(&systems, &field, dts, horizon)
}

fn sha256_hex(bytes: impl IntoIterator<Item = u8>) -> String {
    let mut h = Sha256::new();
    let buf: Vec<u8> = bytes.into_iter().collect();
    h.update(&buf);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the model specification and parameter values.
pub fn model_hash(model: &Model) -> Result<String> {
    Ok(sha256_hex(model.to_checkpoint(serde_json::Value::Null).to_bytes()?))
}

/// Hash of every stored array of the given trajectories.
pub fn dataset_hash(trajectories: &[Trajectory]) -> String {
    let mut h = Sha256::new();
    for t in trajectories {
        for s in &t.states {
            for p in s.positions.iter().chain(&s.velocities) {
                for c in p {
                    h.update(c.to_le_bytes());
                }
            }
        }
        if let Some(s) = t.states.first() {
            for a in s.graph.attributes() {
                h.update(a.to_le_bytes());
            }
        }
        h.update(t.dt_ground_truth.to_le_bytes());
        h.update((t.stride as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes rows as CSV (`sep = ','`) or a whitespace table with a `#` header
/// line for plotting tools (`sep = ' '`).
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>], sep: char) -> Result<()> {
    ensure_parent(path)?;
    let mut out = Vec::new();
    let head = header.join(&sep.to_string());
    if sep == ',' {
        writeln!(out, "{head}").expect("write to memory");
    } else {
        writeln!(out, "# {head}").expect("write to memory");
    }
    for r in rows {
        writeln!(out, "{}", r.join(&sep.to_string())).expect("write to memory");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| format!("{v:e}"))
}

pub fn window_rows(curve: &[WindowMse]) -> Vec<Vec<String>> {
    curve
        .iter()
        .map(|w| {
            vec![
                w.window.to_string(),
                fmt_opt(w.mse),
                w.n_active.to_string(),
                w.n_diverged.to_string(),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let x = [0.2, 0.1, 0.05, 0.025];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn fewer_than_three_steps_rejected() {
        let systems = vec![(vec![[0.0; 3]], vec![[0.0; 3]])];
        let field = |q: &[Vec3]| Ok(vec![[0.0; 3]; q.len()]);
        assert!(truncation_scan_with(&systems, &field, &[0.1, 0.05], 1.0).is_err());
    }

    #[test]
    fn mse_matches_hand_value() {
        let a = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let b = [[0.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        assert_eq!(position_mse(&a, &b), 5.0 / 6.0);
    }

    #[test]
    fn transforms_replay_from_seed() {
        assert_eq!(random_transform(9, 4), random_transform(9, 4));
        assert_ne!(random_transform(9, 4), random_transform(9, 5));
    }
}
