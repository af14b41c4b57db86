//! End-to-end stages driven by a `RunConfig`: bands, frame, hopping, the
//! per-ε magnetic quantities and the reports built from them.

use crate::bloch::{self, BandStructure, IsolatedFamily, PeriodicModel};
use crate::config::{ButterflyModel, RunConfig};
use crate::effective::{self, MagneticMatrix};
use crate::error::{Error, Result};
use crate::frame::{self, FiberFrame, HoppingSequence, WannierFrame};
use crate::geometry::MagneticFieldSpec;
use crate::lattice::{BrillouinGrid, LatticeWindow};
use crate::linalg;
use crate::magnetic_frame::{self, GramSpectrum, MagneticFrame, TightFrameCorrection};
use crate::reference::{self, ReferenceOperator, WindowSpectrum};
use crate::supercell::Supercell;
use faer::Mat;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Stage timings in seconds, kept apart from the deterministic artifacts.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings(pub Vec<(String, f64)>);

impl Timings {
    pub fn record<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().map_err(|e| tag(name, e))?;
        self.0.push((name.to_string(), t.elapsed().as_secs_f64()));
        Ok(out)
    }
}

/// Prefixes the failing stage to the message, keeping the error class.
pub fn tag(stage: &str, e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::InvalidInput(format!("[{stage}] {m}")),
        Error::Resolution(m) => Error::Resolution(format!("[{stage}] {m}")),
        Error::Degenerate(m) => Error::Degenerate(format!("[{stage}] {m}")),
        Error::NotIsolated(m) => Error::NotIsolated(format!("[{stage}] {m}")),
        Error::Numerical(m) => Error::Numerical(format!("[{stage}] {m}")),
        Error::Invariant(m) => Error::Invariant(format!("[{stage}] {m}")),
        other => other,
    }
}

pub fn cache_path(dir: &Path, model: &PeriodicModel, m: usize, n_bands: usize) -> PathBuf {
    dir.join(format!("bands-{}-m{m}-n{n_bands}.json", &model.hash()[..16]))
}

/// Bands of the energy-normalized model, read from or written to the cache.
pub fn bands_with_cache(cfg: &RunConfig, cache_dir: Option<&Path>) -> Result<BandStructure> {
    let grid = BrillouinGrid::new(cfg.model.m)?;
    let model = bloch::normalize_energy_shift(&cfg.periodic_model(), &grid, 1.0)?;
    let n_bands = cfg.n_bands();
    if let Some(dir) = cache_dir {
        let path = cache_path(dir, &model, cfg.model.m, n_bands);
        if let Some(b) = bloch::load_band_cache(&path, &model, &grid, n_bands) {
            log::info!("band cache hit: {}", path.display());
            return Ok(b);
        }
        if path.exists() {
            log::warn!("band cache {} is stale or corrupt; recomputing", path.display());
        }
        let b = bloch::compute_bands(&model, &grid, n_bands)?;
        std::fs::create_dir_all(dir)?;
        bloch::save_band_cache(&path, &b)?;
        return Ok(b);
    }
    bloch::compute_bands(&model, &grid, n_bands)
}

pub fn write_bands_csv(bands: &BandStructure, mut w: impl Write) -> Result<()> {
    writeln!(w, "theta1,theta2,k,lambda")?;
    for (t, vals) in bands.eigenvalues.iter().enumerate() {
        let th = bands.grid.node(t).coords();
        for (k, v) in vals.iter().enumerate() {
            writeln!(w, "{:.17e},{:.17e},{},{:.17e}", th[0], th[1], k + 1, v)?;
        }
    }
    Ok(())
}

/// The field-independent stages.
pub struct Stages {
    pub config: RunConfig,
    pub bands: BandStructure,
    pub family: IsolatedFamily,
    pub delta: f64,
    pub frame: FiberFrame,
    pub wannier: WannierFrame,
    pub hopping: HoppingSequence,
    pub supercell: Supercell,
    pub timings: Timings,
}

fn build_frame(cfg: &RunConfig, bands: &BandStructure, family: &IsolatedFamily) -> Result<FiberFrame> {
    let seed = cfg.frame.trials_seed;
    match cfg.frame.n_b {
        Some(nb) if nb > family.size() => {
            let t = frame::default_trials(bands, family);
            let extra = linalg::random_matrix(t.nrows(), nb - t.ncols(), seed);
            let all = Mat::from_fn(t.nrows(), nb, |r, c| if c < t.ncols() { t[(r, c)] } else { extra[(r, c - t.ncols())] });
            let mut f = frame::build_fiber_frame(bands, family, all.as_ref())?;
            f.seed = Some(seed);
            Ok(f)
        }
        _ => frame::build_fiber_frame_auto(bands, family, seed),
    }
}

impl Stages {
    pub fn prepare(cfg: &RunConfig, cache_dir: Option<&Path>) -> Result<Self> {
        if !cfg.is_grid() {
            return Err(Error::InvalidInput("frame and field stages need the grid backend".into()));
        }
        let mut timings = Timings::default();
        let bands = timings.record("bands", || bands_with_cache(cfg, cache_dir))?;
        let family = timings.record("family", || bloch::detect_isolated_family(&bands, cfg.family.k0, cfg.family.n))?;
        let delta = cfg.family.delta.unwrap_or_else(|| family.default_delta());
        let frame = timings.record("frame", || build_frame(cfg, &bands, &family))?;
        let wannier = timings.record("wannier", || frame::synthesize_wannier(&frame, &bands, cfg.frame.l))?;
        let hopping = timings.record("hopping", || frame::hopping_from_bands(&bands, &family, &frame, cfg.frame.radius))?;
        let supercell = Supercell::torus(cfg.model.m, wannier.ns)?;
        Ok(Stages {
            config: cfg.clone(),
            bands,
            family,
            delta,
            frame,
            wannier,
            hopping,
            supercell,
            timings,
        })
    }

    pub fn model(&self) -> &PeriodicModel {
        &self.bands.model
    }

    pub fn window(&self) -> (f64, f64) {
        self.family.window(self.delta)
    }

    pub fn spec(&self, epsilon: f64) -> MagneticFieldSpec {
        self.config.field_spec(epsilon)
    }

    pub fn centers(&self) -> LatticeWindow {
        LatticeWindow::Torus { m: self.supercell.m() }
    }

    /// Number of states of the family on the supercell.
    pub fn expected_states(&self) -> usize {
        self.supercell.n_cells() * self.family.size()
    }

    pub fn epsilon_run(&self, epsilon: f64) -> Result<EpsilonRun> {
        let spec = self.spec(epsilon);
        let stage = format!("ε={epsilon}");
        let run = || -> Result<EpsilonRun> {
            let reference = reference::build_reference(self.model(), &spec, &self.supercell)?;
            let mframe = magnetic_frame::build_magnetic_frame(&self.wannier, &spec, &self.supercell)?;
            let gram = magnetic_frame::gram_spectrum(&mframe)?;
            let correction = magnetic_frame::tighten_magnetic_frame(&mframe, &gram)?;
            let direct = effective::direct_matrix_elements(&correction, &reference.h, mframe.centers, mframe.n_b)?;
            Ok(EpsilonRun {
                epsilon,
                spec: spec.clone(),
                reference,
                frame: mframe,
                gram,
                correction,
                direct,
            })
        };
        run().map_err(|e| tag(&stage, e))
    }

    pub fn window_spectrum(&self, run: &EpsilonRun) -> Result<WindowSpectrum> {
        reference::window_eigenpairs(&run.reference.h, self.window(), self.expected_states(), self.config.run.seed)
    }

    pub fn commutator(&self, run: &EpsilonRun) -> Result<f64> {
        let mask = self.supercell.interior_mask(0);
        magnetic_frame::projector_commutator_norm(&run.correction, &run.reference.h, &mask)
    }

    /// Peierls matrix of the zero-field sequence, optionally with the
    /// first-order correction added.
    pub fn peierls(&self, run: &EpsilonRun, correction: Option<&HoppingSequence>) -> Result<MagneticMatrix> {
        let seq = match correction {
            Some(c) => self.hopping.add_scaled(c, run.epsilon),
            None => self.hopping.clone(),
        };
        effective::assemble_fluctuation(&seq, &run.spec, self.centers())
    }

    /// m¹ as a sequence (constant fields only).
    pub fn first_order(&self, radius: usize) -> Result<HoppingSequence> {
        let spec = self.spec(1.0);
        let kernel = effective::CorrectionKernel::new(&self.wannier, self.model(), &spec)?;
        effective::first_order_sequence(&kernel, &self.hopping, radius)
    }
}

/// All field-dependent objects at one ε.
pub struct EpsilonRun {
    pub epsilon: f64,
    pub spec: MagneticFieldSpec,
    pub reference: ReferenceOperator,
    pub frame: MagneticFrame,
    pub gram: GramSpectrum,
    pub correction: TightFrameCorrection,
    pub direct: MagneticMatrix,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvolutionPoint {
    pub t: f64,
    pub err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonEntry {
    pub epsilon: f64,
    pub delta: f64,
    pub spectral_distance: f64,
    pub commutator_norm: f64,
    pub evolution_errors: Vec<EvolutionPoint>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Slopes {
    pub spectral: f64,
    pub commutator: f64,
    pub evolution: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub window: (f64, f64),
    pub delta: f64,
    pub entries: Vec<ComparisonEntry>,
    /// log-log slopes in ε over the positive ε values; evolution at t = 1
    pub slopes: Slopes,
}

/// Spectral distance, commutator and evolution errors at one ε.
pub fn compare_at(stages: &Stages, run: &EpsilonRun, times: &[f64]) -> Result<ComparisonEntry> {
    let window = stages.window_spectrum(run)?;
    let direct = linalg::eigvalsh(run.direct.matrix.as_ref())?;
    let sd = reference::spectral_distance(&window.values, &direct, stages.window());
    let commutator_norm = stages.commutator(run)?;
    let errors = evolve_at(stages, run, &window, times)?;
    Ok(ComparisonEntry {
        epsilon: run.epsilon,
        delta: stages.delta,
        spectral_distance: sd.value,
        commutator_norm,
        evolution_errors: times.iter().zip(errors).map(|(&t, err)| EvolutionPoint { t, err }).collect(),
    })
}

pub fn evolve_at(stages: &Stages, run: &EpsilonRun, window: &WindowSpectrum, times: &[f64]) -> Result<Vec<f64>> {
    let v = reference::window_state(window, stages.config.run.seed)?;
    let full = reference::Propagator::new(&run.reference.h)?;
    let eff = reference::EffectivePropagator::new(run.correction.vectors.as_ref(), &run.direct)?;
    reference::evolution_errors(&full, &eff, &v, times)
}

fn slope_of(entries: &[ComparisonEntry], f: impl Fn(&ComparisonEntry) -> Option<f64>) -> f64 {
    let (x, y): (Vec<f64>, Vec<f64>) = entries
        .iter()
        .filter(|e| e.epsilon > 0.0)
        .filter_map(|e| f(e).map(|v| (e.epsilon, v)))
        .unzip();
    reference::loglog_slope(&x, &y)
}

pub fn comparison_report(stages: &Stages, entries: Vec<ComparisonEntry>) -> ComparisonReport {
    let slopes = Slopes {
        spectral: slope_of(&entries, |e| Some(e.spectral_distance)),
        commutator: slope_of(&entries, |e| Some(e.commutator_norm)),
        evolution: slope_of(&entries, |e| e.evolution_errors.iter().find(|p| p.t == 1.0).map(|p| p.err)),
    };
    ComparisonReport {
        config_hash: stages.config.hash(),
        window: stages.window(),
        delta: stages.delta,
        entries,
        slopes,
    }
}

pub fn write_decay_csv(w: &WannierFrame, mut out: impl Write) -> Result<()> {
    writeln!(out, "shell,max_abs")?;
    for (r, v) in w.decay_profile.iter().enumerate() {
        writeln!(out, "{r},{v:.17e}")?;
    }
    Ok(())
}

pub fn write_evolution_csv(rec: &reference::EvolutionRecord, mut out: impl Write) -> Result<()> {
    writeln!(out, "epsilon,t,err")?;
    for (e, row) in rec.epsilons.iter().zip(&rec.errors) {
        for (t, err) in rec.times.iter().zip(row) {
            writeln!(out, "{e:.17e},{t:.17e},{err:.17e}")?;
        }
    }
    Ok(())
}

/// Flux values j/n for j = 0..n.
pub fn flux_grid(n: usize) -> Vec<f64> {
    (0..n).map(|j| j as f64 / n as f64).collect()
}

pub fn butterfly_hopping(cfg: &RunConfig, cache_dir: Option<&Path>) -> Result<HoppingSequence> {
    match cfg.run.butterfly_model {
        ButterflyModel::Harper => Ok(effective::harper_hopping()),
        ButterflyModel::Bands => Ok(Stages::prepare(cfg, cache_dir)?.hopping),
    }
}

/// Outcome of one validation check.
#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: String,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        let ok = value <= threshold;
        Check {
            name: name.into(),
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
            value: Some(value),
            threshold: Some(threshold),
            detail: String::new(),
        }
    }

    fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        let ok = value >= threshold;
        Check {
            name: name.into(),
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
            value: Some(value),
            threshold: Some(threshold),
            detail: String::new(),
        }
    }

    fn failed(name: impl Into<String>, detail: String) -> Self {
        Check {
            name: name.into(),
            status: CheckStatus::Fail,
            value: None,
            threshold: None,
            detail,
        }
    }

    fn skipped(name: impl Into<String>, detail: &str) -> Self {
        Check {
            name: name.into(),
            status: CheckStatus::Skipped,
            value: None,
            threshold: None,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config_hash: String,
    pub version: String,
    pub checks: Vec<Check>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }
}

/// Runs the invariant suite on the configured model and ε list.
pub fn validate(stages: &Stages) -> Result<RunReport> {
    let cfg = &stages.config;
    let mut checks = Vec::new();
    checks.push(Check::at_most(
        "fiber_parseval_defect",
        frame::fiber_parseval_defect(&stages.bands, &stages.family, &stages.frame)?,
        1e-10,
    ));
    checks.push(Check::at_most("hopping_hermiticity", stages.hopping.hermiticity_defect(), 1e-10));
    checks.push(Check::at_most("wannier_tail", stages.wannier.tail, 1e-6 * stages.wannier.decay_profile[0]));

    let mut entries = Vec::new();
    let mut gram_defects = Vec::new();
    for &eps in &cfg.field.epsilons {
        let run = match stages.epsilon_run(eps) {
            Ok(r) => r,
            Err(e) => {
                checks.push(Check::failed(format!("gram_cluster[ε={eps}]"), e.to_string()));
                continue;
            }
        };
        checks.push(Check::at_least(format!("gram_min_eigenvalue[ε={eps}]"), run.gram.eigenvalues[0], -1e-11));
        checks.push(Check::at_most(
            format!("corrected_gram_idempotency[ε={eps}]"),
            run.correction.corrected_gram_defect,
            5e-9,
        ));
        if cfg.field.c == 0.0 {
            let d = magnetic_frame::zak_covariance_defect(&run.frame, &run.gram, &vec![true; stages.supercell.n_cells()], stages.hopping.radius)?;
            checks.push(Check::at_most(format!("gram_zak_covariance[ε={eps}]"), d, 1e-9));
        }
        if eps == 0.0 {
            checks.push(Check::at_most(
                "frame_correction_identity[ε=0]",
                magnetic_frame::correction_size(&run.frame, &run.correction),
                1e-10,
            ));
            let window = stages.window_spectrum(&run)?;
            let bands_union = band_union_distance(stages, &window.values);
            checks.push(Check::at_most("reference_vs_bands[ε=0]", bands_union, 0.02));
        }
        gram_defects.push((eps, run.gram.idempotency_defect, run.gram.half_width));
        entries.push(compare_at(stages, &run, &cfg.run.times)?);
    }
    let positive = entries.iter().filter(|e| e.epsilon > 0.0).count();
    if positive < 2 {
        for name in ["gram_slope", "half_width_slope", "commutator_slope", "spectral_slope", "evolution_slope"] {
            checks.push(Check::skipped(name, "needs at least two positive ε values"));
        }
    } else {
        let (x, y): (Vec<f64>, Vec<f64>) = gram_defects.iter().filter(|g| g.0 > 0.0).map(|g| (g.0, g.1)).unzip();
        checks.push(Check::at_least("gram_slope", reference::loglog_slope(&x, &y), 0.9));
        let (x, y): (Vec<f64>, Vec<f64>) = gram_defects.iter().filter(|g| g.0 > 0.0).map(|g| (g.0, g.2)).unzip();
        checks.push(Check::at_least("half_width_slope", reference::loglog_slope(&x, &y), 0.9));
        let report = comparison_report(stages, entries.clone());
        checks.push(Check::at_least("commutator_slope", report.slopes.commutator, 0.9));
        checks.push(Check::at_least("spectral_slope", report.slopes.spectral, 1.8));
        if report.slopes.evolution.is_nan() {
            checks.push(Check::skipped("evolution_slope", "t = 1 is not among run.times"));
        } else {
            checks.push(Check::at_least("evolution_slope", report.slopes.evolution, 0.9));
        }
    }
    for e in &entries {
        if let Some(p) = e.evolution_errors.iter().find(|p| p.t == 0.0) {
            checks.push(Check::at_most(format!("evolution_at_t0[ε={}]", e.epsilon), p.err, 1e-8));
        }
    }
    Ok(RunReport {
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        checks,
    })
}

/// Largest distance from a window eigenvalue to the family's band union,
/// each band taken as the interval between its extreme sampled values.
pub fn band_union_distance(stages: &Stages, values: &[f64]) -> f64 {
    let (lo, hi) = stages.family.k_range();
    let ranges: Vec<(f64, f64)> = (lo..=hi)
        .map(|k| {
            let b = stages.bands.band(k);
            (b.iter().copied().fold(f64::INFINITY, f64::min), b.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect();
    values
        .iter()
        .map(|&v| {
            ranges
                .iter()
                .map(|&(a, b)| if v < a { a - v } else if v > b { v - b } else { 0.0 })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}
