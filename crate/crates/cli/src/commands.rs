use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use hyperweno::benchmarks::{Benchmark, ExperimentKind, InitialCondition, ProblemInstance, StepRule};
use hyperweno::grid::Grid;
use hyperweno::io::{csv_string, write_csv, Cell, Trajectory};
use hyperweno::networks::Model;
use hyperweno::scheme::Scheme;
use hyperweno::stepper::{
    conservation_remainder, mass_scale, mse_and_order, remap_conservative, snapshot_times, FluxLog, RolloutRecord,
};
use hyperweno::training::{
    generate_dataset, optimizer_entries, train_with, write_loss_history, DatasetSpec, ReferenceSource, TrainConfig,
    TrajectoryDataset,
};

use crate::exit::Incomplete;
use crate::{
    BenchCostArgs, ConvergeArgs, DiagnoseArgs, GenDataArgs, LearnedScheme, LogKind, ReferenceArgs, ReferenceKind,
    RolloutArgs, RunArgs, TrainArgs,
};

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let b = Benchmark::resolve(&a.benchmark)?;
    let mut spec = DatasetSpec::from_benchmark(&b, a.seed);
    if a.full {
        spec.mesh_levels = b.training.full_mesh_levels.clone();
        spec.n_traj = b.training.full_n_traj;
    }
    if let Some(n) = a.n_traj {
        spec.n_traj = n;
    }
    if let Some(levels) = a.mesh_levels {
        spec.mesh_levels = levels;
    }
    if let Some(r) = a.cfl {
        spec.step = StepRule::Ratio(r);
    }
    spec.source = match a.reference {
        ReferenceKind::Native => ReferenceSource::Native,
        ReferenceKind::Coarsened => ReferenceSource::Coarsened { mesh: a.reference_mesh.unwrap_or(b.reference_mesh) },
    };
    let clock = Instant::now();
    let ds = generate_dataset(&spec)?;
    ds.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "{}: {} trajectories x {} levels {:?} in {:.1} s, {} redraws -> {}",
        b.id,
        ds.n_instances(),
        ds.n_levels(),
        spec.mesh_levels,
        clock.elapsed().as_secs_f64(),
        ds.resampled.len(),
        a.out.display()
    );
    Ok(())
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let b = Benchmark::resolve(&a.benchmark)?;
    let ds = TrajectoryDataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    if ds.spec.system != b.system || ds.spec.bc != b.bc {
        bail!(hyperweno::Error::Config(format!("data set in {} was not generated for {}", a.data.display(), b.id)));
    }
    let mut cfg = match &a.config {
        Some(p) => {
            let src = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<TrainConfig>(&src).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::for_benchmark(&b),
    };
    cfg.seed = a.seed;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.unroll = a.k.unwrap_or(cfg.unroll);
    cfg.window = a.l.unwrap_or(cfg.window);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    let flux_kernel = match a.scheme {
        LearnedScheme::Hcfcnn => None,
        LearnedScheme::HcfcnnF => Some(b.flux_kernel),
    };
    let model = Model::new(b.system.n_components(), flux_kernel, a.seed)?;
    let every = a.checkpoint_every.unwrap_or(0);
    let out = a.out.clone();
    let outcome = train_with(&cfg, &ds, model, |s, m, opt| {
        eprintln!("epoch {:>4}  loss {:.6e}  invalid {:>3}/{}  {:.1} s", s.epoch, s.loss, s.invalid, s.windows, s.wall_seconds);
        if every > 0 && s.epoch % every == 0 {
            m.save_with(&out, &optimizer_entries(m, opt, s.epoch))?;
        }
        Ok(())
    })?;
    let epochs = outcome.history.len();
    outcome.model.save_with(&a.out, &optimizer_entries(&outcome.model, &outcome.optimizer, epochs))?;
    let loss_csv = a.loss_csv.unwrap_or_else(|| with_extension(&a.out, ".loss.csv"));
    write_loss_history(&loss_csv, &outcome.history)?;
    eprintln!("wrote {} and {}", a.out.display(), loss_csv.display());
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    benchmark: String,
    ic: Option<InitialCondition>,
}

/// Benchmark and initial data named by an id, a benchmark TOML or an
/// instance TOML.
fn resolve_instance(spec: &str) -> Result<(Benchmark, InitialCondition)> {
    let path = Path::new(spec);
    if path.is_file() {
        let src = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        if let Ok(f) = toml::from_str::<InstanceFile>(&src) {
            let b = Benchmark::resolve(&f.benchmark)?;
            let ic = f.ic.unwrap_or_else(|| b.test.clone());
            ic.validate(&b.system)?;
            return Ok((b, ic));
        }
    }
    let b = Benchmark::resolve(spec)?;
    let ic = b.test.clone();
    Ok((b, ic))
}

fn problem(b: &Benchmark, ic: InitialCondition, t: f64, dt_ratio: Option<f64>) -> ProblemInstance {
    b.instance(ic, t, StepRule::Ratio(dt_ratio.unwrap_or(b.dt_ratio)))
}

/// `weno5`, `linear`, or a checkpoint file.
fn load_scheme(spec: &str) -> Result<Scheme> {
    match spec {
        "weno5" => Ok(Scheme::classical()),
        "linear" => Ok(Scheme::Linear),
        path => {
            let (model, _) = Model::load(Path::new(path)).with_context(|| format!("loading checkpoint {path}"))?;
            Ok(Scheme::Learned(model))
        }
    }
}

fn snapshot_rows(rec: &RolloutRecord, grid: &Grid) -> Vec<Vec<Cell>> {
    let times = snapshot_times(rec);
    let mut rows = Vec::new();
    for (snap, t) in rec.snapshots.iter().zip(times) {
        for (j, row) in snap.u.rows().into_iter().enumerate() {
            let mut r = vec![Cell::from(grid.x_mid[j])];
            r.extend(row.iter().map(|v| Cell::from(*v)));
            r.push(Cell::from(t));
            rows.push(r);
        }
    }
    rows
}

fn run_and_write(scheme: &Scheme, inst: &ProblemInstance, mesh: usize, save_every: usize, out: &Path, record: Option<&Path>) -> Result<()> {
    let (grid, u0, steps, dt) = inst.setup(mesh)?;
    let rec = scheme.rollout(&grid, inst.bc, inst.system, &u0, steps, dt, save_every)?;
    let mut header = vec!["x".to_string()];
    header.extend((0..inst.system.n_components()).map(|c| format!("component_{c}")));
    header.push("t".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(out, &header, snapshot_rows(&rec, &grid))?;
    if let Some(path) = record {
        Trajectory::from_record(&rec, inst.ic.params())?.save(path)?;
    }
    eprintln!(
        "{} on {} cells: {} of {steps} steps, dt {dt:.6e}{} -> {}",
        scheme.name(),
        mesh,
        rec.n_steps(),
        if inst.extrapolation { ", outside the training range" } else { "" },
        out.display()
    );
    match &rec.failure {
        None => Ok(()),
        Some(f) => Err(Incomplete(format!("run stopped at step {}: {}", f.step, f.message)).into()),
    }
}

fn run_common(scheme: &Scheme, r: RunArgs) -> Result<()> {
    let (b, ic) = resolve_instance(&r.instance)?;
    let inst = problem(&b, ic, r.t, r.dt_ratio);
    run_and_write(scheme, &inst, r.mesh, r.save_every, &r.out, r.record.as_deref())
}

pub fn rollout(a: RolloutArgs) -> Result<()> {
    let scheme = load_scheme(&a.ckpt)?;
    run_common(&scheme, a.run)
}

pub fn reference(a: ReferenceArgs) -> Result<()> {
    let (b, ic) = match &a.instance {
        Some(s) => resolve_instance(s)?,
        None => {
            let b = Benchmark::resolve(&a.benchmark)?;
            let ic = b.test.clone();
            (b, ic)
        }
    };
    let inst = problem(&b, ic, a.t, a.dt_ratio);
    run_and_write(&Scheme::classical(), &inst, a.mesh, a.save_every, &a.out, a.record.as_deref())
}

pub fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let traj = Trajectory::load(&a.rollout).with_context(|| format!("loading {}", a.rollout.display()))?;
    let rec = traj.to_record()?;
    let log = match a.log {
        LogKind::Effective => FluxLog::Effective,
        LogKind::TimeLevel => FluxLog::TimeLevel,
    };
    let c = traj.n_components();
    let series: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let scale = if a.relative { mass_scale(&rec, k).max(f64::MIN_POSITIVE) } else { 1.0 };
            conservation_remainder(&rec, k, log).into_iter().map(|v| v / scale).collect()
        })
        .collect();
    let mut header = vec!["t".to_string()];
    header.extend((0..c).map(|k| format!("C_q{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = snapshot_times(&rec).into_iter().enumerate().map(|(m, t)| {
        let mut r = vec![Cell::from(t)];
        r.extend(series.iter().map(|s| Cell::from(s[m])));
        r
    });
    write_csv(&a.out, &header, rows)?;
    let worst: Vec<String> = series.iter().map(|s| format!("{:.3e}", s.iter().fold(0.0f64, |m, v| m.max(*v)))).collect();
    eprintln!("max C per component: {} -> {}", worst.join(", "), a.out.display());
    Ok(())
}

fn default_horizon(b: &Benchmark, kind: ExperimentKind) -> f64 {
    b.experiments.iter().find(|e| e.kind == kind).map(|e| e.times[0]).unwrap_or(b.training.t_final)
}

pub fn converge(a: ConvergeArgs) -> Result<()> {
    let b = Benchmark::resolve(&a.benchmark)?;
    let scheme = load_scheme(&a.ckpt)?;
    let ic = match &a.instance {
        Some(s) => {
            let (ib, ic) = resolve_instance(s)?;
            if ib.system != b.system || ib.bc != b.bc {
                bail!(hyperweno::Error::Config(format!("instance {s} does not belong to {}", b.id)));
            }
            ic
        }
        None => b.test.clone(),
    };
    let error_exp = b.experiments.iter().find(|e| e.kind == ExperimentKind::Error);
    let meshes = a
        .meshes
        .or_else(|| error_exp.map(|e| e.meshes.clone()))
        .unwrap_or_else(|| b.training.mesh_levels.clone());
    let t = a.t.unwrap_or_else(|| default_horizon(&b, ExperimentKind::Error));
    let inst = problem(&b, ic, t, a.dt_ratio);
    let fine = a.reference_mesh.unwrap_or(b.reference_mesh);
    let (rg, ru0, rsteps, rdt) = inst.setup(fine)?;
    let reference = Scheme::classical().rollout(&rg, inst.bc, inst.system, &ru0, rsteps, rdt, rsteps)?.into_result()?;
    let mut preds = Vec::new();
    let mut refs = Vec::new();
    for &n in &meshes {
        let (grid, u0, steps, dt) = inst.setup(n)?;
        let rec = scheme.rollout(&grid, inst.bc, inst.system, &u0, steps, dt, steps)?;
        if let Some(f) = &rec.failure {
            return Err(Incomplete(format!("{} on {n} cells stopped at step {}: {}", scheme.name(), f.step, f.message)).into());
        }
        preds.push(rec.last().u.clone());
        refs.push(remap_conservative(reference.last().u.view(), n)?);
    }
    let d = mse_and_order(&preds, &refs)?;
    let rows = meshes.iter().enumerate().map(|(k, &n)| {
        let order = if k == 0 { Cell::Text(String::new()) } else { Cell::from(d.orders[k - 1]) };
        vec![Cell::from(n), Cell::from(d.mse[k]), order]
    });
    write_csv(&a.out, &["N", "mse", "order"], rows)?;
    eprintln!("{} on {:?} at T={t}: mse {:?}, orders {:.3?}", scheme.name(), meshes, d.mse, d.orders);
    Ok(())
}

fn default_benchmark(n_components: usize) -> &'static str {
    match n_components {
        1 => "burgers1",
        2 => "shallow",
        _ => "euler",
    }
}

pub fn bench_cost(a: BenchCostArgs) -> Result<()> {
    let (model, _) = Model::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let b = Benchmark::resolve(a.benchmark.as_deref().unwrap_or(default_benchmark(model.n_components())))?;
    let t = a.t.unwrap_or_else(|| default_horizon(&b, ExperimentKind::Cost));
    let inst = b.test_instance(t);
    let scheme = Scheme::Learned(model.clone());
    let mut rows = Vec::new();
    for &n in &a.meshes {
        let (grid, u0, steps, dt) = inst.setup(n)?;
        let params = model.generate(&grid, inst.bc, &u0)?.n_params();
        let mut best = f64::INFINITY;
        for _ in 0..a.repeats.max(1) {
            let clock = Instant::now();
            let rec = scheme.rollout(&grid, inst.bc, inst.system, &u0, steps, dt, steps)?;
            best = best.min(clock.elapsed().as_secs_f64());
            if let Some(f) = &rec.failure {
                return Err(Incomplete(format!("{n} cells stopped at step {}: {}", f.step, f.message)).into());
            }
        }
        rows.push(vec![Cell::from(n), Cell::from(params), Cell::from(best)]);
    }
    let header = ["N", "params", "wall_seconds"];
    match &a.out {
        Some(p) => write_csv(p, &header, rows)?,
        None => {
            print!("{}", csv_string(&header, rows));
        }
    }
    Ok(())
}
