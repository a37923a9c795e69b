use std::fs;
use std::path::{Path, PathBuf};

use pingo::eval::{
    self, dataset_hash, fmt_opt, model_hash, samples_for, window_rows, write_table, EvalReport, ReportMetadata,
};
use pingo::integrator::{write_path_csv_file, PredictedPath};
use pingo::model::{Model, ModelSpec, Predictor};
use pingo::physics::{build_dataset, load_dataset, Dataset, SystemState};
use pingo::tensor::read_checkpoint;
use pingo::training::{self, TrainReport};

use crate::config::{Fraction, List, RunConfig};
use crate::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes the fully resolved config next to the outputs. The output path
/// itself is left out so identical runs into different directories produce
/// identical files.
fn echo_config(cfg: &RunConfig, out: &Path, command: &str) -> Result<(), CliError> {
    create_dir(out)?;
    let mut shown = cfg.clone();
    shown.output_dir = None;
    let path = out.join(format!("config.{command}.toml"));
    fs::write(&path, shown.to_toml()).map_err(|e| CliError::io(&path, e))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    Ok(load_dataset(&cfg.data_dir()?)?)
}

fn load_model(cfg: &RunConfig) -> Result<Model, CliError> {
    Ok(Model::from_checkpoint(&read_checkpoint(&cfg.checkpoint_path()?)?)?)
}

fn metadata(cfg: &mut RunConfig, model: Option<&Model>, data: &Dataset, command: &str) -> Result<ReportMetadata, CliError> {
    Ok(ReportMetadata {
        model: model.map(|m| m.name()),
        model_hash: model.map(model_hash).transpose()?,
        dataset_hash: Some(dataset_hash(&data.test)),
        seeds: vec![cfg.seed()],
        command: Some(command.to_string()),
    })
}

fn write_report(report: &EvalReport, out: &Path, name: &str) -> Result<PathBuf, CliError> {
    let path = out.join(format!("{name}.json"));
    report.write_json(&path)?;
    Ok(path)
}

pub fn gen(mut cfg: RunConfig) -> Result<(), CliError> {
    let gc = cfg.generation_config();
    gc.validate()?;
    let out = cfg.output_dir();
    echo_config(&cfg, &out, "gen")?;
    let data = build_dataset(&gc, &out)?;
    let m = &data.manifest;
    println!(
        "{} system, {} bodies: {} train / {} valid / {} test trajectories, {} frames every {} time units",
        m.system_kind,
        m.n_bodies,
        m.counts.train,
        m.counts.valid,
        m.counts.test,
        m.frames,
        m.frame_dt()
    );
    println!(
        "rejected {} / {} / {}; written to {}",
        m.rejected.train,
        m.rejected.valid,
        m.rejected.test,
        out.display()
    );
    Ok(())
}

pub fn train(mut cfg: RunConfig, resume: bool) -> Result<(), CliError> {
    let data = load_data(&cfg)?;
    let spec = cfg.model_spec(data.manifest.attr_dim)?;
    let tc = cfg.train_config();
    let seed = cfg.seed();
    let out = cfg.output_dir();
    echo_config(&cfg, &out, "train")?;
    let [tr, va, _] = samples_for([&data.train, &data.valid, &data.test], spec.horizon())?;
    let model = Model::new(&spec, seed)?;
    let report: TrainReport = if resume {
        training::resume(&model, &tr, &va, &tc, &out)?
    } else {
        training::train(&model, &tr, &va, &tc, Some(&out))?
    };
    if let Some(last) = report.log.last() {
        println!(
            "epoch {}: train mse {:.6e}, valid mse {:.6e}",
            last.epoch, last.train_mse, last.valid_mse
        );
    }
    println!(
        "best epoch {} (valid mse {:.6e}){}; checkpoints and log in {}",
        report.best_epoch,
        report.best_valid_mse,
        if report.stopped_early { ", stopped early" } else { "" },
        out.display()
    );
    Ok(())
}

pub fn eval_direct(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = load_data(&cfg)?;
    let model = load_model(&cfg)?;
    let horizons = cfg
        .evaluation
        .horizons
        .get_or_insert_with(|| List(vec![model.horizon()]))
        .0
        .clone();
    let out = cfg.output_dir();
    echo_config(&cfg, &out, "eval-direct")?;
    let report = EvalReport {
        direct: eval::eval_direct(&model, &data.test, &horizons)?,
        metadata: metadata(&mut cfg, Some(&model), &data, "eval direct")?,
        ..EvalReport::default()
    };
    let rows: Vec<Vec<String>> = report
        .direct
        .iter()
        .map(|h| vec![h.horizon.to_string(), fmt_opt(h.mse), h.n_diverged.to_string()])
        .collect();
    write_table(&out.join("direct.csv"), &["horizon", "mse", "n_diverged"], &rows, ',')?;
    write_report(&report, &out, "direct")?;
    for h in &report.direct {
        println!("horizon {}: mse {}", h.horizon, fmt_opt(h.mse));
    }
    Ok(())
}

pub fn eval_intermediate(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = load_data(&cfg)?;
    let model = load_model(&cfg)?;
    let e = &mut cfg.evaluation;
    let horizon = *e.horizon.get_or_insert(model.horizon());
    let fractions: Vec<(usize, usize)> = e
        .fractions
        .get_or_insert_with(|| List(vec![Fraction { num: 1, den: 4 }, Fraction { num: 1, den: 2 }, Fraction { num: 3, den: 4 }]))
        .0
        .iter()
        .map(|f| (f.num, f.den))
        .collect();
    let out = cfg.output_dir();
    echo_config(&cfg, &out, "eval-intermediate")?;
    let report = EvalReport {
        intermediate: eval::eval_intermediate(&model, &data.test, horizon, &fractions)?,
        metadata: metadata(&mut cfg, Some(&model), &data, "eval intermediate")?,
        ..EvalReport::default()
    };
    let rows: Vec<Vec<String>> = report
        .intermediate
        .iter()
        .map(|f| vec![f.fraction.clone(), f.value.to_string(), fmt_opt(f.mse), f.n_diverged.to_string()])
        .collect();
    write_table(&out.join("intermediate.csv"), &["fraction", "time", "mse", "n_diverged"], &rows, ',')?;
    write_report(&report, &out, "intermediate")?;
    for f in &report.intermediate {
        println!("fraction {}: mse {}", f.fraction, fmt_opt(f.mse));
    }
    Ok(())
}

const WINDOW_HEADER: [&str; 4] = ["window", "mse", "n_active", "n_diverged"];

pub fn eval_rollout(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = load_data(&cfg)?;
    let model = load_model(&cfg)?;
    let e = &mut cfg.evaluation;
    let windows = *e.windows.get_or_insert(10);
    let window_time = *e.window_time.get_or_insert(model.horizon());
    let out = cfg.output_dir();
    echo_config(&cfg, &out, "eval-rollout")?;
    let report = EvalReport {
        rollout: eval::eval_rollout(&model, &data.test, windows, window_time)?,
        metadata: metadata(&mut cfg, Some(&model), &data, "eval rollout")?,
        ..EvalReport::default()
    };
    let rows = window_rows(&report.rollout);
    write_table(&out.join("rollout.csv"), &WINDOW_HEADER, &rows, ',')?;
    write_table(&out.join("rollout.dat"), &WINDOW_HEADER, &rows, ' ')?;
    write_report(&report, &out, "rollout")?;
    for w in &report.rollout {
        println!("window {}: mse {} ({} diverged)", w.window, fmt_opt(w.mse), w.n_diverged);
    }
    let diverged = report.rollout.last().map_or(0, |w| w.n_diverged);
    if diverged > 0 {
        return Err(CliError::Divergence(format!(
            "{diverged} of {} trajectories left the divergence cap",
            data.test.len()
        )));
    }
    Ok(())
}

pub fn eval_numerical(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = load_data(&cfg)?;
    let law = data.manifest.generation_config().force_law();
    let e = &mut cfg.evaluation;
    let dts = e.dts.get_or_insert_with(|| List(vec![0.1, 0.05, 0.025])).0.clone();
    let windows = *e.windows.get_or_insert(10);
    let window_time = *e.window_time.get_or_insert(1.0);
    let out = cfg.output_dir();
    echo_config(&cfg, &out, "eval-numerical")?;
    let report = EvalReport {
        numerical: eval::compare_numerical(&data.test, &law, &dts, windows, window_time)?,
        metadata: metadata(&mut cfg, None, &data, "eval numerical")?,
        ..EvalReport::default()
    };
    let rows: Vec<Vec<String>> = report
        .numerical
        .iter()
        .flat_map(|c| {
            window_rows(&c.windows).into_iter().map(move |mut r| {
                r.insert(0, c.dt.to_string());
                r
            })
        })
        .collect();
    let header = ["dt", "window", "mse", "n_active", "n_diverged"];
    write_table(&out.join("numerical.csv"), &header, &rows, ',')?;
    write_table(&out.join("numerical.dat"), &header, &rows, ' ')?;
    write_report(&report, &out, "numerical")?;
    for c in &report.numerical {
        let last = c.windows.last().expect("at least one window");
        println!("dt {}: window-{} mse {}", c.dt, last.window, fmt_opt(last.mse));
    }
    Ok(())
}

pub fn eval_tau_scan(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = load_data(&cfg)?;
    let spec = cfg.model_spec(data.manifest.attr_dim)?;
    if !matches!(spec, ModelSpec::Pingo { .. }) {
        return Err(CliError::Usage("tau-scan needs --model pingo".into()));
    }
    let tc = cfg.train_config();
    let e = &mut cfg.evaluation;
    let taus = e.taus.get_or_insert_with(|| List(vec![1, 2, 4, 8])).0.clone();
    let seeds = e.seeds.get_or_insert_with(|| List(vec![0, 1, 2])).0.clone();
    let out = cfg.output_dir();
    echo_config(&cfg, &out, "eval-tau-scan")?;
    let [tr, va, te] = samples_for([&data.train, &data.valid, &data.test], spec.horizon())?;
    let mut meta = metadata(&mut cfg, None, &data, "eval tau-scan")?;
    meta.seeds = seeds.clone();
    let report = EvalReport {
        tau_scan: eval::tau_scan(&spec, &taus, &seeds, &tr, &va, &te, &tc)?,
        metadata: meta,
        ..EvalReport::default()
    };
    let rows: Vec<Vec<String>> = report
        .tau_scan
        .iter()
        .map(|t| {
            let per_seed: Vec<String> = t.per_seed.iter().map(|x| format!("{x:e}")).collect();
            vec![t.tau.to_string(), format!("{:e}", t.mse), per_seed.join(";")]
        })
        .collect();
    write_table(&out.join("tau_scan.csv"), &["tau", "mse", "per_seed"], &rows, ',')?;
    let dat: Vec<Vec<String>> = rows.iter().map(|r| r[..2].to_vec()).collect();
    write_table(&out.join("tau_scan.dat"), &["tau", "mse"], &dat, ' ')?;
    write_report(&report, &out, "tau_scan")?;
    for t in &report.tau_scan {
        println!("tau {}: mean test mse {:e}", t.tau, t.mse);
    }
    Ok(())
}

pub fn eval_equivariance(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = load_data(&cfg)?;
    let model = match cfg.checkpoint {
        Some(_) => load_model(&cfg)?,
        None => {
            let spec = cfg.model_spec(data.manifest.attr_dim)?;
            Model::new(&spec, cfg.seed())?
        }
    };
    let seed = cfg.seed();
    let e = &mut cfg.evaluation;
    let transforms = *e.transforms.get_or_insert(100);
    let threshold = *e.threshold.get_or_insert(1e-6);
    let transform_seed = *e.transform_seed.get_or_insert(seed);
    let out = cfg.output_dir();
    echo_config(&cfg, &out, "eval-equivariance")?;
    let states: Vec<&SystemState> = data.test.iter().map(|t| &t.states[0]).collect();
    let result = eval::equivariance_audit(&model, &states, transforms, transform_seed)?;
    let report = EvalReport {
        equivariance: Some(result.clone()),
        metadata: metadata(&mut cfg, Some(&model), &data, "eval equivariance")?,
        ..EvalReport::default()
    };
    write_report(&report, &out, "equivariance")?;
    println!(
        "max relative deviation {:.3e} over {} transforms x {} states (transform seed {})",
        result.max_relative_deviation, result.n_transforms, result.n_states, result.transform_seed
    );
    if !(result.max_relative_deviation <= threshold) {
        return Err(CliError::Check(format!(
            "deviation {:.3e} exceeds threshold {threshold:e}",
            result.max_relative_deviation
        )));
    }
    Ok(())
}

pub fn eval_truncation(mut cfg: RunConfig) -> Result<(), CliError> {
    let gc = cfg.generation_config();
    let law = gc.force_law();
    let seed = cfg.seed();
    let e = &mut cfg.evaluation;
    let dts = e.dts.get_or_insert_with(|| List(vec![0.2, 0.1, 0.05, 0.025])).0.clone();
    let horizon = *e.horizon.get_or_insert(1.0);
    let n_systems = *e.n_systems.get_or_insert(10);
    let min_sep = *e.min_separation.get_or_insert(0.5);
    let out = cfg.output_dir();
    echo_config(&cfg, &out, "eval-truncation")?;
    let systems = eval::sample_smooth_systems(gc.system, gc.n_bodies, n_systems, seed, horizon, min_sep)?;
    let result = eval::truncation_scan(&systems, &law, &dts, horizon)?;
    let rows: Vec<Vec<String>> = result
        .dts
        .iter()
        .zip(result.local_errors.iter().zip(&result.global_errors))
        .map(|(dt, (l, g))| vec![dt.to_string(), format!("{l:e}"), format!("{g:e}")])
        .collect();
    let header = ["dt", "local_error", "global_error"];
    write_table(&out.join("truncation.csv"), &header, &rows, ',')?;
    write_table(&out.join("truncation.dat"), &header, &rows, ' ')?;
    let report = EvalReport {
        truncation: Some(result.clone()),
        metadata: ReportMetadata {
            seeds: vec![seed],
            command: Some("eval truncation".into()),
            ..ReportMetadata::default()
        },
        ..EvalReport::default()
    };
    write_report(&report, &out, "truncation")?;
    println!("local slope {:.4}", result.local_slope);
    println!("global slope {:.4}", result.global_slope);
    Ok(())
}

pub fn export_traj(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = load_data(&cfg)?;
    let model = load_model(&cfg)?;
    let Model::Pingo(pingo) = &model else {
        return Err(CliError::Usage("export-traj needs a PINGO checkpoint".into()));
    };
    let e = &mut cfg.evaluation;
    let index = *e.index.get_or_insert(0);
    let windows = *e.windows.get_or_insert(1);
    let traj = data.test.get(index).ok_or_else(|| {
        CliError::Usage(format!("test index {index} out of range ({} trajectories)", data.test.len()))
    })?;
    let out = cfg.output_dir();
    echo_config(&cfg, &out, "export-traj")?;
    let mut state = traj.states[0].clone();
    let mut paths: Vec<PredictedPath> = Vec::with_capacity(windows);
    for _ in 0..windows {
        let path = pingo.forward_batch(&[&state], model.horizon(), true)?.remove(0);
        state = SystemState::new(
            path.final_positions().to_vec(),
            path.final_velocities().to_vec(),
            state.graph.clone(),
        )?;
        paths.push(path);
    }
    let file = out.join(format!("trajectory_{index}.csv"));
    write_path_csv_file(&file, &paths)?;
    println!("wrote {} windows of trajectory {index} to {}", windows, file.display());
    Ok(())
}
