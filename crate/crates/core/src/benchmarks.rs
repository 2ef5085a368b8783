//! Benchmark problems: initial-condition families, samplers, fixed test
//! instances and the experiment schedule. Definitions are TOML data; the four
//! built-in benchmarks are embedded from `configs/`.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{make_grid, BoundaryCondition, Grid, State};
use crate::physics::System;

pub const BUILTIN_IDS: [&str; 4] = ["burgers1", "burgers2", "shallow", "euler"];

const BUILTIN_SOURCES: [(&str, &str); 4] = [
    ("burgers1", include_str!("../../../configs/burgers1.toml")),
    ("burgers2", include_str!("../../../configs/burgers2.toml")),
    ("shallow", include_str!("../../../configs/shallow.toml")),
    ("euler", include_str!("../../../configs/euler.toml")),
];

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

pub const QUADRATURE_POINTS: usize = 4;

/// Initial data given as point formulas; [`InitialCondition::cell_averages`]
/// integrates them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCondition {
    /// Burgers `a + b sin x`.
    Sine { a: f64, b: f64 },
    /// Burgers: `y1` on `[min(x1, x2), max(x1, x2)]`, `y2` elsewhere.
    TwoState { y1: f64, y2: f64, x1: f64, x2: f64 },
    /// Burgers: `values[k]` on `[breaks[k-1], breaks[k])`.
    Piecewise { breaks: Vec<f64>, values: Vec<f64> },
    /// Shallow water `(h, v)` jump at `x0`; the left state holds at `x = x0`.
    Riemann { h_l: f64, h_r: f64, v_l: f64, v_r: f64, x0: f64 },
    /// Euler Shu-Osher profile with the smoothed right tail beyond `x1`.
    ShuOsher { rho_l: f64, u_l: f64, p_l: f64, p_r: f64, eps: f64, x0: f64, x1: f64 },
}

impl InitialCondition {
    pub fn family(&self) -> &'static str {
        match self {
            InitialCondition::Sine { .. } => "sine",
            InitialCondition::TwoState { .. } => "two-state",
            InitialCondition::Piecewise { .. } => "piecewise",
            InitialCondition::Riemann { .. } => "riemann",
            InitialCondition::ShuOsher { .. } => "shu-osher",
        }
    }

    pub fn n_components(&self) -> usize {
        match self {
            InitialCondition::Riemann { .. } => 2,
            InitialCondition::ShuOsher { .. } => 3,
            _ => 1,
        }
    }

    /// Flat parameter vector, stored with trajectories.
    pub fn params(&self) -> Vec<f64> {
        match self {
            InitialCondition::Sine { a, b } => vec![*a, *b],
            InitialCondition::TwoState { y1, y2, x1, x2 } => vec![*y1, *y2, *x1, *x2],
            InitialCondition::Piecewise { breaks, values } => breaks.iter().chain(values).copied().collect(),
            InitialCondition::Riemann { h_l, h_r, v_l, v_r, x0 } => vec![*h_l, *h_r, *v_l, *v_r, *x0],
            InitialCondition::ShuOsher { rho_l, u_l, p_l, p_r, eps, x0, x1 } => {
                vec![*rho_l, *u_l, *p_l, *p_r, *eps, *x0, *x1]
            }
        }
    }

    pub fn validate(&self, system: &System) -> Result<()> {
        if self.n_components() != system.n_components() {
            return Err(Error::Config(format!("{} initial data does not fit {system:?}", self.family())));
        }
        if !self.params().iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("non-finite {} parameters", self.family())));
        }
        match self {
            InitialCondition::Piecewise { breaks, values } => {
                if values.len() != breaks.len() + 1 || breaks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config("piecewise data needs increasing breaks and one more value".into()));
                }
            }
            InitialCondition::Riemann { h_l, h_r, .. } if *h_l <= 0.0 || *h_r <= 0.0 => {
                return Err(Error::Config("water depths must be positive".into()));
            }
            InitialCondition::ShuOsher { rho_l, p_l, p_r, eps, .. }
                if *rho_l <= 0.0 || *p_l <= 0.0 || *p_r <= 0.0 || eps.abs() >= 1.0 =>
            {
                return Err(Error::Config("Shu-Osher data must keep density and pressure positive".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Positions where the data jumps or changes formula.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            InitialCondition::Sine { .. } => vec![],
            InitialCondition::TwoState { x1, x2, .. } => vec![x1.min(*x2), x1.max(*x2)],
            InitialCondition::Piecewise { breaks, .. } => breaks.clone(),
            InitialCondition::Riemann { x0, .. } => vec![*x0],
            InitialCondition::ShuOsher { x0, x1, .. } => vec![*x0, *x1],
        }
    }

    /// Conserved variables at `x`, written into `out`.
    pub fn point(&self, system: &System, x: f64, out: &mut [f64]) {
        match self {
            InitialCondition::Sine { a, b } => out[0] = a + b * x.sin(),
            InitialCondition::TwoState { y1, y2, x1, x2 } => {
                out[0] = if x >= x1.min(*x2) && x <= x1.max(*x2) { *y1 } else { *y2 };
            }
            InitialCondition::Piecewise { breaks, values } => {
                out[0] = values[breaks.iter().take_while(|&&b| x >= b).count()];
            }
            InitialCondition::Riemann { h_l, h_r, v_l, v_r, x0 } => {
                let (h, v) = if x <= *x0 { (h_l, v_l) } else { (h_r, v_r) };
                out[0] = *h;
                out[1] = h * v;
            }
            InitialCondition::ShuOsher { rho_l, u_l, p_l, p_r, eps, x0, x1 } => {
                let gamma = match system {
                    System::Euler { gamma } => *gamma,
                    _ => 1.4,
                };
                let (rho, u, p) = if x <= *x0 {
                    (*rho_l, *u_l, *p_l)
                } else if x <= *x1 {
                    (1.0 + eps * (5.0 * x).sin(), 0.0, *p_r)
                } else {
                    (1.0 + eps * (5.0 * x).sin() * (-(x - x1).powi(4)).exp(), 0.0, *p_r)
                };
                out[0] = rho;
                out[1] = rho * u;
                out[2] = p / (gamma - 1.0) + 0.5 * rho * u * u;
            }
        }
    }

    /// Cell averages with `points`-node Gauss-Legendre quadrature on every
    /// sub-interval between breakpoints.
    pub fn cell_averages(&self, grid: &Grid, system: &System, points: usize) -> Result<Array2<f64>> {
        self.validate(system)?;
        if points == 0 {
            return Err(Error::invalid("quadrature needs at least one point"));
        }
        let (xs, ws) = gauss_legendre(points);
        let c = system.n_components();
        let mut breaks = self.breakpoints();
        breaks.sort_by(f64::total_cmp);
        let mut out = Array2::zeros((grid.n_cells, c));
        let mut val = vec![0.0; c];
        for i in 0..grid.n_cells {
            let (lo, hi) = (grid.face(i), grid.face(i + 1));
            let mut edges = vec![lo];
            edges.extend(breaks.iter().copied().filter(|&b| b > lo && b < hi));
            edges.push(hi);
            for seg in edges.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
                for (x, w) in xs.iter().zip(&ws) {
                    self.point(system, mid + half * x, &mut val);
                    for k in 0..c {
                        out[[i, k]] += w * half * val[k];
                    }
                }
            }
        }
        out.mapv_inplace(|v| v / grid.dx);
        Ok(out)
    }

    pub fn instantiate(&self, grid: &Grid, system: &System) -> Result<State> {
        Ok(State::new(self.cell_averages(grid, system, QUADRATURE_POINTS)?, 0.0))
    }
}

pub type Range = [f64; 2];

fn draw<R: Rng>(rng: &mut R, r: Range) -> f64 {
    if r[0] == r[1] { r[0] } else { rng.gen_range(r[0]..r[1]) }
}

fn inside(r: Range, v: f64) -> bool {
    v >= r[0] && v <= r[1]
}

fn spread_range(nominal: f64, spread: f64) -> Range {
    let (a, b) = (nominal * (1.0 - spread), nominal * (1.0 + spread));
    [a.min(b), a.max(b)]
}

/// Uniform parameter distributions of a training family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IcSampler {
    Sine { a: Range, b: Range },
    TwoState { y: Range, x: Range },
    Riemann { h_l: Range, h_r: Range, v_l: Range, v_r: Range, x0: Range },
    /// Nominal values, each perturbed uniformly by a relative `spread`; `x1` fixed.
    ShuOsher { rho_l: f64, u_l: f64, p_l: f64, p_r: f64, eps: f64, x0: f64, x1: f64, spread: f64 },
}

impl IcSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> InitialCondition {
        match self {
            IcSampler::Sine { a, b } => InitialCondition::Sine { a: draw(rng, *a), b: draw(rng, *b) },
            IcSampler::TwoState { y, x } => {
                InitialCondition::TwoState { y1: draw(rng, *y), y2: draw(rng, *y), x1: draw(rng, *x), x2: draw(rng, *x) }
            }
            IcSampler::Riemann { h_l, h_r, v_l, v_r, x0 } => InitialCondition::Riemann {
                h_l: draw(rng, *h_l),
                h_r: draw(rng, *h_r),
                v_l: draw(rng, *v_l),
                v_r: draw(rng, *v_r),
                x0: draw(rng, *x0),
            },
            IcSampler::ShuOsher { rho_l, u_l, p_l, p_r, eps, x0, x1, spread } => InitialCondition::ShuOsher {
                rho_l: draw(rng, spread_range(*rho_l, *spread)),
                u_l: draw(rng, spread_range(*u_l, *spread)),
                p_l: draw(rng, spread_range(*p_l, *spread)),
                p_r: draw(rng, spread_range(*p_r, *spread)),
                eps: draw(rng, spread_range(*eps, *spread)),
                x0: draw(rng, spread_range(*x0, *spread)),
                x1: *x1,
            },
        }
    }

    /// Whether `ic` could have been drawn by this sampler.
    pub fn contains(&self, ic: &InitialCondition) -> bool {
        match (self, ic) {
            (IcSampler::Sine { a, b }, InitialCondition::Sine { a: va, b: vb }) => inside(*a, *va) && inside(*b, *vb),
            (IcSampler::TwoState { y, x }, InitialCondition::TwoState { y1, y2, x1, x2 }) => {
                inside(*y, *y1) && inside(*y, *y2) && inside(*x, *x1) && inside(*x, *x2)
            }
            (IcSampler::Riemann { h_l, h_r, v_l, v_r, x0 }, InitialCondition::Riemann { h_l: a, h_r: b, v_l: c, v_r: d, x0: e }) => {
                inside(*h_l, *a) && inside(*h_r, *b) && inside(*v_l, *c) && inside(*v_r, *d) && inside(*x0, *e)
            }
            (
                IcSampler::ShuOsher { rho_l, u_l, p_l, p_r, eps, x0, x1, spread },
                InitialCondition::ShuOsher { rho_l: a, u_l: b, p_l: c, p_r: d, eps: e, x0: f, x1: g },
            ) => {
                let s = *spread;
                inside(spread_range(*rho_l, s), *a)
                    && inside(spread_range(*u_l, s), *b)
                    && inside(spread_range(*p_l, s), *c)
                    && inside(spread_range(*p_r, s), *d)
                    && inside(spread_range(*eps, s), *e)
                    && inside(spread_range(*x0, s), *f)
                    && x1 == g
            }
            _ => false,
        }
    }
}

/// How a run picks its fixed step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// `dt = cfl * dx / max wave speed of the initial state`.
    Cfl(f64),
    /// `dt = ratio * dx`.
    Ratio(f64),
}

impl StepRule {
    pub fn max_dt(&self, system: &System, grid: &Grid, initial: &State) -> Result<f64> {
        match *self {
            StepRule::Cfl(c) if c > 0.0 => {
                let s = system.max_speed(initial.u.view())?;
                if s > 0.0 { Ok(c * grid.dx / s) } else { Ok(c * grid.dx) }
            }
            StepRule::Ratio(r) if r > 0.0 => Ok(r * grid.dx),
            _ => Err(Error::Config(format!("step rule {self:?} must be positive"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSetup {
    pub t_final: f64,
    /// Desk-scale mesh levels.
    pub mesh_levels: Vec<usize>,
    /// Mesh levels of the full-scale setup.
    pub full_mesh_levels: Vec<usize>,
    pub n_traj: usize,
    pub full_n_traj: usize,
    pub window: usize,
    pub unroll: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Solution profiles against the reference.
    Solution,
    /// Conservation remainders over time.
    Conservation,
    /// MSE and refinement order table.
    Error,
    /// Parameter count and wall-clock table.
    Cost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub name: String,
    pub kind: ExperimentKind,
    pub meshes: Vec<usize>,
    pub times: Vec<f64>,
    pub schemes: Vec<String>,
    /// Empty means the benchmark's fixed test instance.
    #[serde(default)]
    pub ics: Vec<InitialCondition>,
    /// Empty means the benchmark's step ratio.
    #[serde(default)]
    pub dt_ratios: Vec<f64>,
}

pub const SCHEME_NAMES: [&str; 4] = ["weno5", "linear", "hcfcnn", "hcfcnn-f"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark {
    pub id: String,
    pub system: System,
    pub bc: BoundaryCondition,
    pub domain: [f64; 2],
    /// Default `dt / dx` of training data and test runs.
    pub dt_ratio: f64,
    pub reference_mesh: usize,
    /// FluxNet kernel width for the learned-flux variant.
    pub flux_kernel: usize,
    pub training: TrainingSetup,
    pub sampler: IcSampler,
    pub test: InitialCondition,
    pub experiments: Vec<Experiment>,
}

/// One problem to solve: system, boundary, domain, data and time horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub system: System,
    pub bc: BoundaryCondition,
    pub domain: [f64; 2],
    pub ic: InitialCondition,
    pub t_final: f64,
    pub step: StepRule,
    /// Data outside the training sampler's ranges.
    pub extrapolation: bool,
}

impl ProblemInstance {
    pub fn grid(&self, n: usize) -> Result<Grid> {
        make_grid(self.domain[0], self.domain[1], n)
    }

    pub fn initial_state(&self, grid: &Grid) -> Result<State> {
        self.ic.instantiate(grid, &self.system)
    }

    /// Grid, initial state, step count and step size landing on `t_final`.
    pub fn setup(&self, n: usize) -> Result<(Grid, State, usize, f64)> {
        let grid = self.grid(n)?;
        let u0 = self.initial_state(&grid)?;
        let max_dt = self.step.max_dt(&self.system, &grid, &u0)?;
        let (steps, dt) = crate::stepper::steps_to(self.t_final, max_dt)?;
        Ok((grid, u0, steps, dt))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEntry {
    pub experiment: String,
    pub kind: ExperimentKind,
    pub instance: ProblemInstance,
    pub mesh: usize,
    pub scheme: String,
}

impl Benchmark {
    pub fn builtin(id: &str) -> Result<Self> {
        let src = BUILTIN_SOURCES
            .iter()
            .find(|(k, _)| *k == id)
            .ok_or_else(|| Error::Config(format!("unknown benchmark {id:?}; known: {}", BUILTIN_IDS.join(", "))))?
            .1;
        Benchmark::from_toml_str(src)
    }

    pub fn from_toml_str(src: &str) -> Result<Self> {
        let b: Benchmark = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        b.validate()?;
        Ok(b)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Benchmark::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// A built-in id, or a path to a TOML file.
    pub fn resolve(id_or_path: &str) -> Result<Self> {
        if BUILTIN_IDS.contains(&id_or_path) {
            Benchmark::builtin(id_or_path)
        } else if Path::new(id_or_path).is_file() {
            Benchmark::from_file(Path::new(id_or_path))
        } else {
            Err(Error::Config(format!(
                "unknown benchmark {id_or_path:?}; use one of {} or a config file",
                BUILTIN_IDS.join(", ")
            )))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if !(self.domain[1] > self.domain[0]) || !(self.dt_ratio > 0.0) {
            return Err(Error::Config(format!("{}: bad domain or dt_ratio", self.id)));
        }
        self.test.validate(&self.system)?;
        let t = &self.training;
        if t.unroll == 0 || t.unroll > t.window || t.mesh_levels.is_empty() || t.n_traj == 0 {
            return Err(Error::Config(format!("{}: need 1 <= unroll <= window and a nonempty training set", self.id)));
        }
        self.sampler.sample(&mut ChaCha8Rng::seed_from_u64(0)).validate(&self.system)?;
        for e in &self.experiments {
            if e.meshes.is_empty() || e.times.is_empty() || e.schemes.is_empty() {
                return Err(Error::Config(format!("{}/{}: empty meshes, times or schemes", self.id, e.name)));
            }
            if let Some(s) = e.schemes.iter().find(|s| !SCHEME_NAMES.contains(&s.as_str())) {
                return Err(Error::Config(format!("{}/{}: unknown scheme {s:?}", self.id, e.name)));
            }
            for ic in &e.ics {
                ic.validate(&self.system)?;
            }
        }
        Ok(())
    }

    pub fn grid(&self, n: usize) -> Result<Grid> {
        make_grid(self.domain[0], self.domain[1], n)
    }

    pub fn instance(&self, ic: InitialCondition, t_final: f64, step: StepRule) -> ProblemInstance {
        let extrapolation = !self.sampler.contains(&ic);
        ProblemInstance { system: self.system, bc: self.bc, domain: self.domain, ic, t_final, step, extrapolation }
    }

    /// The fixed test instance at `t_final` with the benchmark's step ratio.
    pub fn test_instance(&self, t_final: f64) -> ProblemInstance {
        self.instance(self.test.clone(), t_final, StepRule::Ratio(self.dt_ratio))
    }

    /// Every run of the schedule. Solution and error experiments also get one
    /// classical reference run per data set, time and step rule on the
    /// reference mesh.
    pub fn matrix(&self) -> Vec<ExperimentEntry> {
        let mut out = Vec::new();
        for e in &self.experiments {
            let ics = if e.ics.is_empty() { vec![self.test.clone()] } else { e.ics.clone() };
            let steps: Vec<StepRule> = if e.dt_ratios.is_empty() {
                vec![StepRule::Ratio(self.dt_ratio)]
            } else {
                e.dt_ratios.iter().map(|&r| StepRule::Ratio(r)).collect()
            };
            for ic in &ics {
                for &t in &e.times {
                    for &step in &steps {
                        let inst = self.instance(ic.clone(), t, step);
                        for &mesh in &e.meshes {
                            for scheme in &e.schemes {
                                out.push(ExperimentEntry {
                                    experiment: e.name.clone(),
                                    kind: e.kind,
                                    instance: inst.clone(),
                                    mesh,
                                    scheme: scheme.clone(),
                                });
                            }
                        }
                        if matches!(e.kind, ExperimentKind::Solution | ExperimentKind::Error) {
                            out.push(ExperimentEntry {
                                experiment: e.name.clone(),
                                kind: e.kind,
                                instance: inst.clone(),
                                mesh: self.reference_mesh,
                                scheme: "weno5".into(),
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Full schedule of a built-in benchmark.
pub fn experiment_matrix(id: &str) -> Result<Vec<ExperimentEntry>> {
    Ok(Benchmark::builtin(id)?.matrix())
}
