//! Command-line front end: run configuration, initial-data presets, snapshot
//! and time-series files, checkpoints and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amplitude::{IntegralEquationSettings, SolveMethod};
use crate::curve::{self, ConditionResult, Domain, InterfaceCurve, MapDirection, SplashShape, ValidationOptions, ValidationReport};
use crate::diagnostics::{self, DiagnosticsConfig, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::evolution::{
    self, Formulation, InitialDataReport, Observer, RunStart, SheetState, StepView, StepperConfig, StopConditions,
    Termination, TouchVelocity,
};
use crate::spectral::{self, Grid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const TIMESERIES_COLUMNS: [&str; 15] = [
    "t",
    "E_S",
    "E_k",
    "E_p",
    "arc_chord_sup",
    "max_abs_omega",
    "min_sigma",
    "min_Q2_sigma",
    "m_q0",
    "m_q1",
    "m_q2",
    "m_q3",
    "m_q4",
    "sobolev_E",
    "dt_used",
];

/// Exit status for an error raised before or outside the time loop.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Io(_) | Error::Fit(_) | Error::InvalidGrid(_) | Error::Construction(_) => {
            EXIT_CONFIG
        }
        Error::Validation(_)
        | Error::Compatibility { .. }
        | Error::MeanViolation { .. }
        | Error::Singular { .. }
        | Error::ArcChordViolation { .. }
        | Error::DegenerateTangent { .. }
        | Error::BranchAmbiguity { .. } => EXIT_VALIDATION,
        _ => EXIT_NUMERICAL,
    }
}

pub fn termination_exit_code(t: &Termination) -> i32 {
    match t {
        Termination::Aborted { .. } | Termination::Sigma { .. } => EXIT_NUMERICAL,
        _ => EXIT_OK,
    }
}

// ----- configuration -----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    FlatRest,
    StandingWave,
    NearSplash,
    Splash,
    Splat,
    CustomFile,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::FlatRest => "flat_rest",
            Preset::StandingWave => "standing_wave",
            Preset::NearSplash => "near_splash",
            Preset::Splash => "splash",
            Preset::Splat => "splat",
            Preset::CustomFile => "custom_file",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "flat_rest" => Preset::FlatRest,
            "standing_wave" => Preset::StandingWave,
            "near_splash" => Preset::NearSplash,
            "splash" => Preset::Splash,
            "splat" => Preset::Splat,
            "custom_file" => Preset::CustomFile,
            _ => return Err(Error::Config(format!("unknown preset '{s}'"))),
        })
    }

    fn splash_like(self) -> bool {
        matches!(self, Preset::NearSplash | Preset::Splash | Preset::Splat)
    }
}

/// Gap tracking: `auto` tracks the splash-family presets at 1e-4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GapStop {
    Auto,
    Off,
    At(f64),
}

const AUTO_GAP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverChoice {
    Auto,
    Dense,
    Iterative,
}

impl SolverChoice {
    fn method(self) -> Option<SolveMethod> {
        match self {
            SolverChoice::Auto => None,
            SolverChoice::Dense => Some(SolveMethod::DenseDirect),
            SolverChoice::Iterative => Some(SolveMethod::Iterative),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SolverChoice::Auto => "auto",
            SolverChoice::Dense => "dense",
            SolverChoice::Iterative => "iterative",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => SolverChoice::Auto,
            "dense" => SolverChoice::Dense,
            "iterative" => SolverChoice::Iterative,
            _ => return Err(Error::Config(format!("unknown solver '{s}'"))),
        })
    }
}

/// Everything a run depends on. Written and read as flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub formulation: Formulation,
    pub domain: Domain,
    pub n_points: usize,
    pub dt: f64,
    pub t_end: f64,
    pub gravity: f64,
    pub filter_threshold: f64,
    pub preset: Preset,
    pub height: f64,
    pub eps: f64,
    pub k: f64,
    pub pinch: f64,
    pub splat_arc: f64,
    pub custom_file: String,
    pub shape_alpha_c: f64,
    pub shape_c3: f64,
    pub shape_b0: f64,
    pub shape_b1: f64,
    pub shape_b2: f64,
    pub velocity_a1: f64,
    pub velocity_a2: f64,
    pub velocity_power: f64,
    pub output_dir: String,
    pub snapshot_every: usize,
    pub record_every: usize,
    pub checkpoint_every: usize,
    pub splash_gap: GapStop,
    pub gap_exclusion: f64,
    pub q_margin: f64,
    pub sigma_warn: f64,
    pub sigma_hard: f64,
    pub arc_chord_max: f64,
    pub cfl: f64,
    pub uniformity_tol: f64,
    pub max_halvings: u32,
    pub solver: SolverChoice,
    pub residual_tol: f64,
    pub max_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let shape = SplashShape::default();
        let vel = TouchVelocity::default();
        let stop = StopConditions::default();
        let step = StepperConfig::default();
        let solver = IntegralEquationSettings::default();
        RunConfig {
            formulation: Formulation::Phi,
            domain: Domain::Physical,
            n_points: 64,
            dt: step.dt,
            t_end: step.t_end,
            gravity: step.gravity,
            filter_threshold: step.filter_threshold,
            preset: Preset::FlatRest,
            height: 0.0,
            eps: 0.1,
            k: 1.0,
            pinch: 0.05,
            splat_arc: 0.5,
            custom_file: String::new(),
            shape_alpha_c: shape.alpha_c,
            shape_c3: shape.c3,
            shape_b0: shape.b0,
            shape_b1: shape.b1,
            shape_b2: shape.b2,
            velocity_a1: vel.a1,
            velocity_a2: vel.a2,
            velocity_power: vel.power,
            output_dir: "out".into(),
            snapshot_every: 0,
            record_every: 1,
            checkpoint_every: 0,
            splash_gap: GapStop::Auto,
            gap_exclusion: stop.gap_exclusion,
            q_margin: stop.q_margin,
            sigma_warn: stop.sigma_warn,
            sigma_hard: stop.sigma_hard,
            arc_chord_max: stop.arc_chord_max,
            cfl: step.cfl,
            uniformity_tol: step.uniformity_tol,
            max_halvings: step.max_halvings,
            solver: SolverChoice::Auto,
            residual_tol: solver.residual_tol,
            max_iterations: solver.max_iterations,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

impl RunConfig {
    pub fn shape(&self) -> SplashShape {
        SplashShape {
            n: self.n_points,
            alpha_c: self.shape_alpha_c,
            c3: self.shape_c3,
            b0: self.shape_b0,
            b1: self.shape_b1,
            b2: self.shape_b2,
        }
    }

    pub fn velocity(&self) -> TouchVelocity {
        TouchVelocity { a1: self.velocity_a1, a2: self.velocity_a2, power: self.velocity_power }
    }

    pub fn solver_settings(&self) -> IntegralEquationSettings {
        IntegralEquationSettings {
            residual_tol: self.residual_tol,
            max_iterations: self.max_iterations,
            method: self.solver.method(),
            ..Default::default()
        }
    }

    pub fn gap_threshold(&self) -> Option<f64> {
        match self.splash_gap {
            GapStop::Auto => self.preset.splash_like().then_some(AUTO_GAP),
            GapStop::Off => None,
            GapStop::At(g) => Some(g),
        }
    }

    pub fn stepper(&self) -> StepperConfig {
        StepperConfig {
            dt: self.dt,
            t_end: self.t_end,
            filter_threshold: self.filter_threshold,
            gravity: self.gravity,
            stop: StopConditions {
                splash_gap: self.gap_threshold(),
                gap_exclusion: self.gap_exclusion,
                q_margin: self.q_margin,
                sigma_warn: self.sigma_warn,
                sigma_hard: self.sigma_hard,
                arc_chord_max: self.arc_chord_max,
            },
            solver: self.solver_settings(),
            cfl: self.cfl,
            uniformity_tol: self.uniformity_tol,
            max_halvings: self.max_halvings,
            record_every: self.record_every,
        }
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "formulation" => self.formulation = v.parse()?,
            "domain" => self.domain = v.parse()?,
            "n_points" => self.n_points = num(key, v)?,
            "dt" => self.dt = num(key, v)?,
            "t_end" => self.t_end = num(key, v)?,
            "gravity" => self.gravity = num(key, v)?,
            "filter_threshold" => self.filter_threshold = num(key, v)?,
            "preset" => self.preset = Preset::parse(v)?,
            "height" => self.height = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "k" => self.k = num(key, v)?,
            "pinch" => self.pinch = num(key, v)?,
            "splat_arc" => self.splat_arc = num(key, v)?,
            "custom_file" => self.custom_file = v.to_string(),
            "shape_alpha_c" => self.shape_alpha_c = num(key, v)?,
            "shape_c3" => self.shape_c3 = num(key, v)?,
            "shape_b0" => self.shape_b0 = num(key, v)?,
            "shape_b1" => self.shape_b1 = num(key, v)?,
            "shape_b2" => self.shape_b2 = num(key, v)?,
            "velocity_a1" => self.velocity_a1 = num(key, v)?,
            "velocity_a2" => self.velocity_a2 = num(key, v)?,
            "velocity_power" => self.velocity_power = num(key, v)?,
            "output_dir" => self.output_dir = v.to_string(),
            "snapshot_every" => self.snapshot_every = num(key, v)?,
            "record_every" => self.record_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "splash_gap" => {
                self.splash_gap = match v {
                    "auto" => GapStop::Auto,
                    "none" => GapStop::Off,
                    _ => GapStop::At(num(key, v)?),
                }
            }
            "gap_exclusion" => self.gap_exclusion = num(key, v)?,
            "q_margin" => self.q_margin = num(key, v)?,
            "sigma_warn" => self.sigma_warn = num(key, v)?,
            "sigma_hard" => self.sigma_hard = num(key, v)?,
            "arc_chord_max" => self.arc_chord_max = num(key, v)?,
            "cfl" => self.cfl = num(key, v)?,
            "uniformity_tol" => self.uniformity_tol = num(key, v)?,
            "max_halvings" => self.max_halvings = num(key, v)?,
            "solver" => self.solver = SolverChoice::parse(v)?,
            "residual_tol" => self.residual_tol = num(key, v)?,
            "max_iterations" => self.max_iterations = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parse config text: one `key = value` per line, `#` starts a comment.
    /// Keys not given keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got '{line}'") })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Parse { line: i + 1, msg: format!("duplicate key '{k}'") });
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Parse { line: i + 1, msg },
                other => other,
            })?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Canonical text listing every key. Parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let gap = match self.splash_gap {
            GapStop::Auto => "auto".to_string(),
            GapStop::Off => "none".to_string(),
            GapStop::At(g) => g.to_string(),
        };
        let pairs: Vec<(&str, String)> = vec![
            ("formulation", self.formulation.to_string()),
            ("domain", self.domain.to_string()),
            ("n_points", self.n_points.to_string()),
            ("dt", self.dt.to_string()),
            ("t_end", self.t_end.to_string()),
            ("gravity", self.gravity.to_string()),
            ("filter_threshold", self.filter_threshold.to_string()),
            ("preset", self.preset.name().to_string()),
            ("height", self.height.to_string()),
            ("eps", self.eps.to_string()),
            ("k", self.k.to_string()),
            ("pinch", self.pinch.to_string()),
            ("splat_arc", self.splat_arc.to_string()),
            ("custom_file", self.custom_file.clone()),
            ("shape_alpha_c", self.shape_alpha_c.to_string()),
            ("shape_c3", self.shape_c3.to_string()),
            ("shape_b0", self.shape_b0.to_string()),
            ("shape_b1", self.shape_b1.to_string()),
            ("shape_b2", self.shape_b2.to_string()),
            ("velocity_a1", self.velocity_a1.to_string()),
            ("velocity_a2", self.velocity_a2.to_string()),
            ("velocity_power", self.velocity_power.to_string()),
            ("output_dir", self.output_dir.clone()),
            ("snapshot_every", self.snapshot_every.to_string()),
            ("record_every", self.record_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("splash_gap", gap),
            ("gap_exclusion", self.gap_exclusion.to_string()),
            ("q_margin", self.q_margin.to_string()),
            ("sigma_warn", self.sigma_warn.to_string()),
            ("sigma_hard", self.sigma_hard.to_string()),
            ("arc_chord_max", self.arc_chord_max.to_string()),
            ("cfl", self.cfl.to_string()),
            ("uniformity_tol", self.uniformity_tol.to_string()),
            ("max_halvings", self.max_halvings.to_string()),
            ("solver", self.solver.name().to_string()),
            ("residual_tol", self.residual_tol.to_string()),
            ("max_iterations", self.max_iterations.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text without output_dir, hex encoded.
    pub fn hash(&self) -> String {
        let text: String = self.to_text().lines().filter(|l| !l.starts_with("output_dir ")).map(|l| format!("{l}\n")).collect();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn check(&self) -> Result<()> {
        Grid::new(self.n_points).map_err(|e| Error::Config(e.to_string()))?;
        self.stepper().check()?;
        if self.preset == Preset::CustomFile && self.custom_file.is_empty() {
            return Err(Error::Config("custom_file preset needs custom_file".into()));
        }
        if matches!(self.preset, Preset::Splash | Preset::Splat) && self.domain != Domain::Tilde {
            return Err(Error::Config(format!("{} data touches itself and must run in the tilde domain", self.preset.name())));
        }
        if self.preset == Preset::NearSplash && !(self.pinch > 0.0) {
            return Err(Error::Config("near_splash needs pinch > 0; use the splash preset for pinch 0".into()));
        }
        Ok(())
    }
}

// ----- snapshots -----

/// One curve state on disk: `# key = value` metadata, a header row, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub domain: Domain,
    pub formulation: Formulation,
    pub time: f64,
    pub step: usize,
    pub dt_used: f64,
    pub gravity: f64,
    pub solver: SolverChoice,
    pub residual_tol: f64,
    pub max_iterations: usize,
    pub config_hash: Option<String>,
    /// z1 is the periodic part (x - alpha) for physical curves.
    pub curve: InterfaceCurve,
    pub omega: Vec<f64>,
    pub phi: Option<Vec<f64>>,
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

impl Snapshot {
    /// Snapshot of a state; w is solved for when the state carries Phi.
    pub fn from_state(state: &SheetState, step: usize, dt_used: f64, cfg: &RunConfig) -> Result<Self> {
        let (omega, phi) = match state.formulation {
            Formulation::Omega => (state.variable.clone(), None),
            Formulation::Phi => {
                let f = evolution::frame(state, &cfg.solver_settings())?;
                (f.omega, Some(state.variable.clone()))
            }
        };
        Ok(Snapshot {
            domain: state.curve.domain,
            formulation: state.formulation,
            time: state.time,
            step,
            dt_used,
            gravity: cfg.gravity,
            solver: cfg.solver,
            residual_tol: cfg.residual_tol,
            max_iterations: cfg.max_iterations,
            config_hash: Some(cfg.hash()),
            curve: state.curve.clone(),
            omega,
            phi,
        })
    }

    pub fn settings(&self) -> IntegralEquationSettings {
        IntegralEquationSettings {
            residual_tol: self.residual_tol,
            max_iterations: self.max_iterations,
            method: self.solver.method(),
            ..Default::default()
        }
    }

    /// State carrying the variable of the recorded formulation.
    pub fn state(&self) -> Result<SheetState> {
        let variable = match self.formulation {
            Formulation::Omega => self.omega.clone(),
            Formulation::Phi => self
                .phi
                .clone()
                .ok_or_else(|| Error::Validation("phi formulation snapshot without a phi column".into()))?,
        };
        SheetState::new(self.curve.clone(), self.formulation, variable, self.time)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# wavesheet snapshot");
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "# config_hash = {h}");
        }
        let _ = writeln!(s, "# domain = {}", self.domain);
        let _ = writeln!(s, "# formulation = {}", self.formulation);
        let _ = writeln!(s, "# time = {}", fmt_f(self.time));
        let _ = writeln!(s, "# step = {}", self.step);
        let _ = writeln!(s, "# dt_used = {}", fmt_f(self.dt_used));
        let _ = writeln!(s, "# gravity = {}", self.gravity);
        let _ = writeln!(s, "# solver = {}", self.solver.name());
        let _ = writeln!(s, "# residual_tol = {}", self.residual_tol);
        let _ = writeln!(s, "# max_iterations = {}", self.max_iterations);
        let _ = writeln!(s, "# has_phi = {}", self.phi.is_some());
        s.push_str(if self.phi.is_some() { "alpha,z1,z2,omega,phi\n" } else { "alpha,z1,z2,omega\n" });
        let g = self.curve.grid;
        for j in 0..self.curve.n() {
            let _ = write!(
                s,
                "{},{},{},{}",
                fmt_f(g.alpha(j)),
                fmt_f(self.curve.z1[j]),
                fmt_f(self.curve.z2[j]),
                fmt_f(self.omega[j])
            );
            if let Some(p) = &self.phi {
                let _ = write!(s, ",{}", fmt_f(p[j]));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut header: Option<(usize, Vec<String>)> = None;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let ln = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some((k, v)) = c.split_once('=') {
                    meta.insert(k.trim().to_string(), (ln, v.trim().to_string()));
                }
                continue;
            }
            match &header {
                None => header = Some((ln, line.split(',').map(|c| c.trim().to_string()).collect())),
                Some((_, cols)) => {
                    let vals: Vec<f64> = line
                        .split(',')
                        .map(|c| c.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Parse { line: ln, msg: format!("bad number in '{line}'") })?;
                    if vals.len() != cols.len() {
                        return Err(Error::Parse { line: ln, msg: format!("expected {} columns, got {}", cols.len(), vals.len()) });
                    }
                    rows.push((ln, vals));
                }
            }
        }
        let (hl, cols) = header.ok_or_else(|| Error::Parse { line: 0, msg: "missing header row".into() })?;
        let has_phi = match cols.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            ["alpha", "z1", "z2", "omega"] => false,
            ["alpha", "z1", "z2", "omega", "phi"] => true,
            _ => return Err(Error::Parse { line: hl, msg: format!("unexpected header '{}'", cols.join(",")) }),
        };
        let get = |k: &str| -> Result<(usize, String)> {
            meta.get(k).cloned().ok_or_else(|| Error::Parse { line: 0, msg: format!("missing metadata '{k}'") })
        };
        let field = |k: &str| -> Result<f64> {
            let (ln, v) = get(k)?;
            v.parse().map_err(|_| Error::Parse { line: ln, msg: format!("bad value '{v}' for {k}") })
        };
        let meta_err = |k: &str, e: Error| match (e, meta.get(k)) {
            (Error::Config(msg), Some((ln, _))) => Error::Parse { line: *ln, msg },
            (e, _) => e,
        };
        let domain: Domain = get("domain")?.1.parse().map_err(|e| meta_err("domain", e))?;
        let formulation: Formulation = get("formulation")?.1.parse().map_err(|e| meta_err("formulation", e))?;
        let solver = match meta.get("solver") {
            Some((ln, v)) => SolverChoice::parse(v).map_err(|_| Error::Parse { line: *ln, msg: format!("unknown solver '{v}'") })?,
            None => SolverChoice::Auto,
        };
        let defaults = IntegralEquationSettings::default();
        let n = rows.len();
        let grid = Grid::new(n).map_err(|e| Error::Parse { line: hl, msg: e.to_string() })?;
        for (j, (ln, r)) in rows.iter().enumerate() {
            if (r[0] - grid.alpha(j)).abs() > 1e-12 {
                return Err(Error::Parse { line: *ln, msg: format!("alpha {} is not grid node {j}", r[0]) });
            }
        }
        let col = |c: usize| rows.iter().map(|(_, r)| r[c]).collect::<Vec<f64>>();
        let curve = InterfaceCurve::new(domain, col(1), col(2))?;
        let has_flag = meta.get("has_phi").map(|(_, v)| v == "true");
        if has_flag.is_some_and(|f| f != has_phi) {
            return Err(Error::Parse { line: hl, msg: "has_phi flag disagrees with the header".into() });
        }
        Ok(Snapshot {
            domain,
            formulation,
            time: field("time")?,
            step: meta.get("step").map(|(_, v)| v.parse().unwrap_or(0)).unwrap_or(0),
            dt_used: if meta.contains_key("dt_used") { field("dt_used")? } else { 0.0 },
            gravity: if meta.contains_key("gravity") { field("gravity")? } else { 1.0 },
            solver,
            residual_tol: if meta.contains_key("residual_tol") { field("residual_tol")? } else { defaults.residual_tol },
            max_iterations: if meta.contains_key("max_iterations") {
                field("max_iterations")? as usize
            } else {
                defaults.max_iterations
            },
            config_hash: meta.get("config_hash").map(|(_, v)| v.clone()),
            curve,
            omega: col(3),
            phi: has_phi.then(|| col(4)),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Snapshot::parse(&text)
    }

    /// Relative Fourier tails of the curve and the sheet fields must be small.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let mut worst = curve::spectral_tail(&self.curve.z1)?.max(curve::spectral_tail(&self.curve.z2)?);
        for f in std::iter::once(&self.omega).chain(self.phi.as_ref()) {
            if f.iter().any(|v| v.abs() > 0.0) {
                worst = worst.max(curve::spectral_tail(f)?);
            }
        }
        if !(worst <= tol) {
            return Err(Error::Validation(format!(
                "snapshot is not a smooth periodic sample: relative spectral tail {worst:.3e} above {tol:.1e}"
            )));
        }
        Ok(())
    }
}

/// Default limit of the snapshot smoothness check.
pub const SNAPSHOT_TAIL_TOL: f64 = 1e-5;

// ----- time series -----

pub fn timeseries_header() -> String {
    TIMESERIES_COLUMNS.join(",")
}

pub fn format_record(r: &DiagnosticsRecord) -> String {
    let mut v = vec![r.time, r.e_total, r.e_kinetic, r.e_potential, r.arc_chord_sup, r.max_abs_omega, r.min_sigma, r.min_q2_sigma];
    v.extend_from_slice(&r.m_q);
    v.push(r.sobolev_e);
    v.push(r.dt_used);
    v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(",")
}

/// Columns of a CSV file by header name; `#` lines are skipped.
pub fn read_csv_columns(text: &str) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut cols: Vec<String> = Vec::new();
    let mut data: Vec<Vec<f64>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if cols.is_empty() {
            cols = line.split(',').map(|c| c.trim().to_string()).collect();
            data = vec![Vec::new(); cols.len()];
            continue;
        }
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != cols.len() {
            return Err(Error::Parse { line: i + 1, msg: format!("expected {} columns, got {}", cols.len(), vals.len()) });
        }
        for (d, v) in data.iter_mut().zip(vals) {
            d.push(v.trim().parse().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad number '{v}'") })?);
        }
    }
    if cols.is_empty() {
        return Err(Error::Parse { line: 0, msg: "missing header row".into() });
    }
    Ok(cols.into_iter().zip(data).collect())
}

// ----- initial data -----

#[derive(Debug, Clone, Serialize)]
pub struct InitialReport {
    pub preset: String,
    pub domain: Domain,
    pub formulation: Formulation,
    pub n_points: usize,
    pub validation: Option<ValidationReport>,
    pub touch: Option<InitialDataReport>,
    /// Named pass/fail checks on the data.
    pub checks: Vec<ConditionResult>,
    pub uniformity_spread: f64,
}

impl InitialReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.validation.as_ref().map(|v| v.passed()).unwrap_or(true)
    }

    /// One line per failed item.
    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        if let Some(v) = &self.validation {
            out.extend(v.failed().iter().map(|c| format!("condition {}: {}", c.name, c.detail)));
        }
        out.extend(self.checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)));
        out
    }
}

fn check(name: &str, passed: bool, detail: String) -> ConditionResult {
    ConditionResult { name: name.into(), passed, detail }
}

fn touch_checks(r: &InitialDataReport) -> Vec<ConditionResult> {
    vec![
        check("zero flux", r.flux.abs() <= 1e-10, format!("flux {:.3e} (limit 1e-10)", r.flux)),
        check(
            "normal velocity into the water at both touch points",
            r.u_normal_at_touch[0] < 0.0 && r.u_normal_at_touch[1] < 0.0,
            format!("u.n = {:.6e}, {:.6e}", r.u_normal_at_touch[0], r.u_normal_at_touch[1]),
        ),
    ]
}

/// Convert a snapshot into a state of the configured domain and formulation.
fn state_from_snapshot(snap: &Snapshot, cfg: &RunConfig) -> Result<SheetState> {
    let direct = snap.state()?;
    let uniform = snap.curve.uniformity_spread()? <= cfg.uniformity_tol;
    if snap.domain == cfg.domain && snap.formulation == cfg.formulation && uniform {
        return Ok(direct);
    }
    // Phi is the same function on the curve in both planes
    let settings = cfg.solver_settings();
    let f = evolution::frame(&direct, &settings)?;
    let mut pa = f.phi_alpha;
    let m = spectral::mean(&pa);
    pa.iter_mut().for_each(|v| *v -= m);
    let phi = spectral::antiderivative(&pa)?;
    let c = match (snap.domain, cfg.domain) {
        (a, b) if a == b => snap.curve.clone(),
        (Domain::Physical, _) => curve::map_curve(&snap.curve, MapDirection::ToTilde)?,
        _ => curve::map_curve(&snap.curve, MapDirection::ToPhysical)?,
    };
    let (c, phi) = evolution::uniformize(&c, &phi)?;
    let s = SheetState::new(c, Formulation::Phi, phi, snap.time)?;
    match cfg.formulation {
        Formulation::Phi => Ok(s),
        Formulation::Omega => {
            let w = evolution::frame(&s, &settings)?.omega;
            SheetState::new(s.curve, Formulation::Omega, w, s.time)
        }
    }
}

/// Build the initial state of a preset together with its checks.
pub fn make_initial(cfg: &RunConfig) -> Result<(SheetState, InitialReport)> {
    cfg.check()?;
    let n = cfg.n_points;
    let settings = cfg.solver_settings();
    let mut validation = None;
    let mut touch = None;
    let mut checks = Vec::new();
    let state = match cfg.preset {
        Preset::FlatRest => {
            let c = InterfaceCurve::flat(n, cfg.height)?;
            let c = match cfg.domain {
                Domain::Physical => c,
                Domain::Tilde => curve::map_curve(&c, MapDirection::ToTilde)?,
            };
            evolution::rest_state(&c, cfg.formulation)?
        }
        Preset::StandingWave => evolution::standing_wave_state(n, cfg.eps, cfg.k, cfg.height, cfg.domain, cfg.formulation)?,
        Preset::NearSplash | Preset::Splash | Preset::Splat => {
            let shape = cfg.shape();
            let ac = shape.snapped_alpha_c()?;
            let opts = ValidationOptions::default();
            let phys = match cfg.preset {
                Preset::NearSplash => curve::make_splash_family(cfg.pinch, &shape)?,
                Preset::Splash => curve::make_splash_family(0.0, &shape)?,
                _ => curve::make_splat_fixture(cfg.splat_arc, &shape)?,
            };
            match cfg.preset {
                Preset::Splash => validation = Some(curve::validate_splash_curve(&phys, &opts)?),
                Preset::Splat => validation = Some(curve::validate_splat_curve(&phys, &opts)?),
                _ => {}
            }
            let (s, r) = evolution::touch_state(&phys, ac, &cfg.velocity(), cfg.domain, cfg.formulation, &settings)?;
            if cfg.preset != Preset::NearSplash {
                checks.extend(touch_checks(&r));
            }
            touch = Some(r);
            s
        }
        Preset::CustomFile => {
            let snap = Snapshot::read(Path::new(&cfg.custom_file))?;
            snap.validate(SNAPSHOT_TAIL_TOL)?;
            if snap.curve.n() != n {
                return Err(Error::Config(format!("n_points = {n} but {} has {} points", cfg.custom_file, snap.curve.n())));
            }
            state_from_snapshot(&snap, cfg)?
        }
    };
    let report = InitialReport {
        preset: cfg.preset.name().into(),
        domain: cfg.domain,
        formulation: cfg.formulation,
        n_points: n,
        validation,
        touch,
        checks,
        uniformity_spread: state.curve.uniformity_spread()?,
    };
    Ok((state, report))
}

// ----- checkpoints and manifest -----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: String,
    pub config_hash: String,
    pub state: SheetState,
    pub start: RunStart,
    /// Time-series rows written so far, in file order.
    pub timeseries_rows: Vec<String>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GapSummary {
    pub threshold: f64,
    pub first: f64,
    pub last: f64,
    pub strictly_increasing: bool,
    pub series: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub termination: Termination,
    pub exit_code: i32,
    pub steps: usize,
    pub rejections: u32,
    pub sigma_warnings: usize,
    pub final_time: f64,
    pub wall_time_s: f64,
    pub resumed_from_step: Option<usize>,
    pub gap: Option<GapSummary>,
    pub initial_data: Option<InitialReport>,
    pub files: Vec<String>,
}

fn config_map(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.to_text()
        .lines()
        .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

struct RunWriter<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    series: fs::File,
    rows: Vec<String>,
    files: Vec<String>,
    skip_first: bool,
}

impl RunWriter<'_> {
    fn snapshot(&mut self, state: &SheetState, step: usize, dt_used: f64, name: &str) -> Result<()> {
        let snap = Snapshot::from_state(state, step, dt_used, self.cfg)?;
        let rel = format!("snapshots/{name}");
        write_file(&self.dir.join(&rel), &snap.to_text())?;
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
        Ok(())
    }

    fn checkpoint(&mut self, v: &StepView) -> Result<()> {
        let ck = Checkpoint {
            config: self.cfg.to_text(),
            config_hash: self.cfg.hash(),
            state: v.state.clone(),
            start: v.resume_point(),
            timeseries_rows: self.rows.clone(),
        };
        let text = serde_json::to_string(&ck).map_err(|e| Error::Io(e.to_string()))?;
        write_file(&self.dir.join("checkpoint.json"), &text)?;
        if !self.files.iter().any(|f| f == "checkpoint.json") {
            self.files.push("checkpoint.json".into());
        }
        Ok(())
    }
}

impl Observer for RunWriter<'_> {
    fn on_step(&mut self, v: &StepView) -> Result<()> {
        let first = std::mem::take(&mut self.skip_first);
        if first {
            return Ok(());
        }
        if let Some(r) = v.record {
            let row = format_record(r);
            writeln!(self.series, "{row}").map_err(Error::from)?;
            self.rows.push(row);
        }
        if self.cfg.snapshot_every > 0 && v.step % self.cfg.snapshot_every == 0 {
            self.snapshot(v.state, v.step, v.dt_used, &format!("snap_{:06}.csv", v.step))?;
        }
        if self.cfg.checkpoint_every > 0 && v.step > 0 && v.step % self.cfg.checkpoint_every == 0 {
            self.checkpoint(v)?;
        }
        Ok(())
    }
}

/// Outcome of a simulation: the manifest written to disk.
pub fn simulate(cfg: &RunConfig, resume: Option<&Checkpoint>) -> Result<Manifest> {
    let clock = Instant::now();
    cfg.check()?;
    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(dir.join("snapshots"))?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    let hash = cfg.hash();
    let (initial, start, report, rows) = match resume {
        Some(ck) => (ck.state.clone(), ck.start.clone(), None, ck.timeseries_rows.clone()),
        None => {
            let (s, r) = make_initial(cfg)?;
            if !r.passed() {
                return Err(Error::Validation(r.failures().join("; ")));
            }
            (s, RunStart::default(), Some(r), Vec::new())
        }
    };
    let mut series = fs::File::create(dir.join("timeseries.csv"))?;
    writeln!(series, "# config_hash = {hash}")?;
    writeln!(series, "{}", timeseries_header())?;
    for r in &rows {
        writeln!(series, "{r}")?;
    }
    let mut w = RunWriter {
        cfg,
        dir: dir.clone(),
        series,
        rows,
        files: vec!["config.txt".into(), "timeseries.csv".into()],
        skip_first: resume.is_some(),
    };
    let resumed_from_step = resume.map(|ck| ck.start.step);
    let stepper = cfg.stepper();
    let res = evolution::run_from(&initial, &stepper, &mut w, start)?;
    let last = res.steps;
    w.snapshot(&res.final_state, last, res.records.last().map(|r| r.dt_used).unwrap_or(0.0), "snap_final.csv")?;
    let gap = stepper.stop.splash_gap.map(|th| GapSummary {
        threshold: th,
        first: res.gaps.first().map(|g| g.1).unwrap_or(f64::NAN),
        last: res.gaps.last().map(|g| g.1).unwrap_or(f64::NAN),
        strictly_increasing: res.gaps.windows(2).all(|p| p[1].1 > p[0].1),
        series: res.gaps.clone(),
    });
    let manifest = Manifest {
        config_hash: hash,
        config: config_map(cfg),
        exit_code: termination_exit_code(&res.termination),
        termination: res.termination,
        steps: res.steps,
        rejections: res.rejections,
        sigma_warnings: res.sigma_warnings,
        final_time: res.final_state.time,
        wall_time_s: clock.elapsed().as_secs_f64(),
        resumed_from_step,
        gap,
        initial_data: report,
        files: w.files.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    write_file(&dir.join("manifest.json"), &text)?;
    Ok(manifest)
}

// ----- diagnose and fit -----

/// Recompute the time-series row of each snapshot.
pub fn diagnose(snaps: &[Snapshot]) -> Result<Vec<DiagnosticsRecord>> {
    snaps
        .iter()
        .map(|s| {
            let cfg = DiagnosticsConfig { gravity: s.gravity, solver: s.settings() };
            diagnostics::record(&s.state()?, &cfg, s.dt_used)
        })
        .collect()
}

/// Largest absolute difference between recomputed records and time-series rows
/// with the same t. NaN entries must match NaN. Returns (matched rows, max diff).
pub fn compare_records(records: &[DiagnosticsRecord], series: &BTreeMap<String, Vec<f64>>) -> Result<(usize, f64)> {
    let t = series.get("t").ok_or_else(|| Error::Parse { line: 0, msg: "time series has no t column".into() })?;
    let mut matched = 0;
    let mut worst = 0.0f64;
    for r in records {
        let Some(i) = t.iter().position(|v| *v == r.time) else { continue };
        matched += 1;
        let ours: Vec<f64> = format_record(r).split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect();
        for (c, name) in TIMESERIES_COLUMNS.iter().enumerate() {
            let theirs = series.get(*name).map(|col| col[i]).unwrap_or(f64::NAN);
            let d = match (ours[c].is_nan(), theirs.is_nan()) {
                (true, true) => 0.0,
                (false, false) if ours[c] == theirs => 0.0,
                (false, false) => (ours[c] - theirs).abs(),
                _ => f64::INFINITY,
            };
            worst = worst.max(d);
        }
    }
    Ok((matched, worst))
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub column: String,
    pub samples: usize,
    pub t_range: (f64, f64),
    pub fit: diagnostics::PowerLawFit,
    pub overlay: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub rezero: bool,
    pub fraction: Option<f64>,
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub fix_exponent: Option<f64>,
}

/// Column by name; `inv_<name>` gives 1/value and `inv_arc_chord` is an alias
/// of `inv_arc_chord_sup`.
pub fn series_column(cols: &BTreeMap<String, Vec<f64>>, name: &str) -> Result<Vec<f64>> {
    if let Some(c) = cols.get(name) {
        return Ok(c.clone());
    }
    let base = match name.strip_prefix("inv_") {
        Some("arc_chord") => "arc_chord_sup",
        Some(b) => b,
        None => return Err(Error::Config(format!("no column '{name}'"))),
    };
    let c = cols.get(base).ok_or_else(|| Error::Config(format!("no column '{name}'")))?;
    Ok(c.iter().map(|v| 1.0 / v).collect())
}

/// Fit a * t^b + c to one column. Rows with t <= 0 (after re-zeroing) or
/// non-finite values are left out.
pub fn fit_series(cols: &BTreeMap<String, Vec<f64>>, column: &str, opts: &FitOptions) -> Result<(FitReport, Vec<(f64, f64)>)> {
    let t = cols.get("t").ok_or_else(|| Error::Config("time series has no t column".into()))?;
    let y = series_column(cols, column)?;
    let t0 = if opts.rezero { t.first().copied().unwrap_or(0.0) } else { 0.0 };
    let tt: Vec<f64> = t.iter().map(|v| v - t0).collect();
    let span = tt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let hi = opts.t_max.unwrap_or(f64::INFINITY).min(opts.fraction.map(|f| f * span).unwrap_or(f64::INFINITY));
    let lo = opts.t_min.unwrap_or(0.0);
    let (ts, ys): (Vec<f64>, Vec<f64>) =
        tt.iter().zip(&y).filter(|(t, y)| **t > 0.0 && **t >= lo && **t <= hi && y.is_finite()).map(|(t, y)| (*t, *y)).unzip();
    let fit = diagnostics::fit_power_law(&ts, &ys, opts.fix_exponent)?;
    let overlay = ts.iter().map(|t| (*t, fit.eval(*t))).collect();
    let report = FitReport {
        column: column.into(),
        samples: ts.len(),
        t_range: (ts.first().copied().unwrap_or(f64::NAN), ts.last().copied().unwrap_or(f64::NAN)),
        fit,
        overlay: None,
    };
    Ok((report, overlay))
}

// ----- command line -----

#[derive(Parser, Debug)]
#[command(name = "wavesheet", version, about = "Free-surface water waves by boundary integrals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run an evolution and write time series, snapshots, checkpoints and a manifest.
    Simulate {
        /// Config file (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key, e.g. --set t_end=0.5 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a checkpoint; --set still applies on top of its config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Recompute diagnostics from snapshot files.
    Diagnose {
        snapshots: Vec<PathBuf>,
        /// Output CSV (stdout when absent).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Time series to compare against; rows are matched by t.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Largest accepted discrepancy for --compare.
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        /// Limit of the relative spectral tail of the stored fields.
        #[arg(long, default_value_t = SNAPSHOT_TAIL_TOL)]
        periodicity_tol: f64,
    },
    /// Fit a * t^b + c to a time-series column.
    Fit {
        timeseries: PathBuf,
        /// Column name; inv_<name> fits the reciprocal (inv_arc_chord, inv_max_abs_omega).
        #[arg(long)]
        column: String,
        /// Measure t from the first row.
        #[arg(long)]
        rezero: bool,
        /// Use only the first fraction of the time span.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        t_min: Option<f64>,
        #[arg(long)]
        t_max: Option<f64>,
        /// Fix the exponent b (linear least squares for a and c).
        #[arg(long)]
        fix_exponent: Option<f64>,
        /// Two-column overlay file (t, fitted value) for gnuplot.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Build the initial data of a preset and write it as a snapshot with a report.
    MakeInitialData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Shortcut for --set preset=NAME.
        #[arg(long)]
        preset: Option<String>,
        /// Snapshot path; the report goes next to it with suffix .report.json.
        #[arg(long)]
        output: PathBuf,
    },
}

fn apply_sets(cfg: &mut RunConfig, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.check()
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_sets(&mut cfg, sets)?;
    Ok(cfg)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))
}

fn run_command(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Simulate { config, set, resume } => {
            let (cfg, ck) = match resume {
                Some(p) => {
                    let ck = Checkpoint::read(&p)?;
                    let mut cfg = RunConfig::parse(&ck.config)?;
                    apply_sets(&mut cfg, &set)?;
                    (cfg, Some(ck))
                }
                None => (load_config(config.as_deref(), &set)?, None),
            };
            let m = simulate(&cfg, ck.as_ref())?;
            println!(
                "{}: {} steps to t = {:.6e}, {} rejections; output in {}",
                match &m.termination {
                    Termination::EndTime => "end time reached".to_string(),
                    t => format!("stopped ({})", serde_json::to_string(t).unwrap_or_default()),
                },
                m.steps,
                m.final_time,
                m.rejections,
                cfg.output_dir
            );
            Ok(m.exit_code)
        }
        Command::Diagnose { snapshots, output, compare, tol, periodicity_tol } => {
            if snapshots.is_empty() {
                return Err(Error::Config("no snapshot files given".into()));
            }
            let snaps = snapshots.iter().map(|p| Snapshot::read(p)).collect::<Result<Vec<_>>>()?;
            for (s, p) in snaps.iter().zip(&snapshots) {
                s.validate(periodicity_tol).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
            }
            let recs = diagnose(&snaps)?;
            let mut text = timeseries_header() + "\n";
            for r in &recs {
                text.push_str(&format_record(r));
                text.push('\n');
            }
            match output {
                Some(p) => write_file(&p, &text)?,
                None => print!("{text}"),
            }
            if let Some(c) = compare {
                let ctext = fs::read_to_string(&c).map_err(|e| Error::Io(format!("{}: {e}", c.display())))?;
                let (matched, worst) = compare_records(&recs, &read_csv_columns(&ctext)?)?;
                eprintln!("compared {matched} rows, max discrepancy {worst:.3e}");
                if matched == 0 || !(worst <= tol) {
                    return Err(Error::Validation(format!("{matched} rows matched, max discrepancy {worst:.3e} above {tol:.1e}")));
                }
            }
            Ok(EXIT_OK)
        }
        Command::Fit { timeseries, column, rezero, fraction, t_min, t_max, fix_exponent, overlay } => {
            let text = fs::read_to_string(&timeseries).map_err(|e| Error::Io(format!("{}: {e}", timeseries.display())))?;
            let cols = read_csv_columns(&text)?;
            let opts = FitOptions { rezero, fraction, t_min, t_max, fix_exponent };
            let (mut report, pts) = fit_series(&cols, &column, &opts)?;
            let path = overlay.unwrap_or_else(|| timeseries.with_extension(format!("{column}.fit.dat")));
            let mut body = format!("# t {column}_fit  a={:.10e} b={:.10e} c={:.10e}\n", report.fit.a, report.fit.b, report.fit.c);
            for (t, v) in pts {
                let _ = writeln!(body, "{} {}", fmt_f(t), fmt_f(v));
            }
            write_file(&path, &body)?;
            report.overlay = Some(path.display().to_string());
            println!("{}", to_json(&report)?);
            Ok(EXIT_OK)
        }
        Command::MakeInitialData { config, mut set, preset, output } => {
            if let Some(p) = preset {
                set.push(format!("preset={p}"));
            }
            let cfg = load_config(config.as_deref(), &set)?;
            let (state, report) = make_initial(&cfg)?;
            let report_path = PathBuf::from(format!("{}.report.json", output.display()));
            if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_file(&report_path, &to_json(&report)?)?;
            if !report.passed() {
                for f in report.failures() {
                    eprintln!("failed: {f}");
                }
                return Err(Error::Validation(format!("initial data checks failed, see {}", report_path.display())));
            }
            let snap = Snapshot::from_state(&state, 0, 0.0, &cfg)?;
            write_file(&output, &snap.to_text())?;
            for c in report.validation.iter().flat_map(|v| v.conditions.iter()).chain(report.checks.iter()) {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            println!("wrote {} and {}", output.display(), report_path.display());
            Ok(EXIT_OK)
        }
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run_command(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
