//! Dataset generation, the three training losses and the Adam loop.
//!
//! A dataset directory holds `manifest.json` plus plain-text matrix and
//! vector files (see `npo_core::io`). For every right-hand side the
//! two-grid-preconditioned GMRES trajectory is recorded and each iterate
//! `x_k` is stored together with its true residual `r_k = b - A x_k`.

use crate::autodiff::{Mat, Tape, Var};
use crate::checkpoint;
use crate::error::{NeuralError, Result};
use crate::namg::{self, NamgConfig, NamgModel, Structure};
use crate::optim::{AdamConfig, AdamState};
use npo_core::io::{read_matrix, read_vector, write_matrix, write_vector};
use npo_core::{
    assemble, record_dataset, sample_rhs, CsrMatrix, GridSpec, GrfSpec, PdeFamily, SolveConfig, StationaryKind,
    StationaryPrecond, TwoGridPrecond,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub k: usize,
    pub x: String,
    pub r: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhsEntry {
    pub rhs: String,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub snapshots: Vec<SnapshotEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemEntry {
    pub id: usize,
    pub family: String,
    pub grid: Vec<usize>,
    pub spacing: f64,
    pub matrix: String,
    pub rhs: Vec<RhsEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub tol: f64,
    pub max_iters: usize,
    pub length_scale: f64,
    pub variance: f64,
    pub systems: Vec<SystemEntry>,
}

/// Where and how much data to generate.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub families: Vec<PdeFamily>,
    pub grids: Vec<GridSpec>,
    /// Systems per (family, grid) pair.
    pub n_systems: usize,
    pub n_rhs: usize,
    pub length_scale: f64,
    pub variance: f64,
    pub seed: u64,
    pub solve: SolveConfig,
}

impl DatasetSpec {
    pub fn new(families: Vec<PdeFamily>, grids: Vec<GridSpec>, n_systems: usize, n_rhs: usize, seed: u64) -> Self {
        Self {
            families,
            grids,
            n_systems,
            n_rhs,
            length_scale: 0.1,
            variance: 1.0,
            seed,
            solve: SolveConfig::dataset(),
        }
    }
}

/// Assembles every system, samples GRF right-hand sides and records the
/// two-grid GMRES trajectories. Non-converged solves are kept and flagged.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    if spec.families.is_empty() || spec.grids.is_empty() || spec.n_systems == 0 || spec.n_rhs == 0 {
        return Err(NeuralError::Dataset("need at least one family, grid, system and rhs".into()));
    }
    if !spec.solve.record_trajectory {
        return Err(NeuralError::Dataset("dataset solves must record their trajectory".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut systems = Vec::new();
    for family in &spec.families {
        for grid in &spec.grids {
            let a = Arc::new(assemble(family, grid)?);
            let smoother = StationaryPrecond::new(a.clone(), StationaryKind::damped_jacobi(), 1)?;
            let two_grid = TwoGridPrecond::build(a.clone(), grid, smoother)?;
            for _ in 0..spec.n_systems {
                let id = systems.len();
                let dir = format!("sys{id:04}");
                std::fs::create_dir_all(out.join(&dir))?;
                let matrix = format!("{dir}/matrix.txt");
                write_matrix(out.join(&matrix), &a)?;
                let mut rhs = Vec::new();
                for j in 0..spec.n_rhs {
                    let seed = spec.seed.wrapping_add((id * spec.n_rhs + j) as u64);
                    let b = sample_rhs(family, grid, &GrfSpec::new(spec.length_scale, spec.variance, seed)?);
                    let name = format!("{dir}/rhs{j:03}");
                    write_vector(out.join(format!("{name}.txt")), &b)?;
                    let (snaps, trace) = record_dataset(&a, &b, &two_grid, &spec.solve)?;
                    let mut snapshots = Vec::new();
                    for s in &snaps {
                        let x = format!("{name}_x{:04}.txt", s.k);
                        let r = format!("{name}_r{:04}.txt", s.k);
                        write_vector(out.join(&x), &s.x)?;
                        write_vector(out.join(&r), &s.r)?;
                        snapshots.push(SnapshotEntry { k: s.k, x, r });
                    }
                    log::debug!("system {id} rhs {j}: {} iterations, converged {}", trace.iterations, trace.converged);
                    rhs.push(RhsEntry {
                        rhs: format!("{name}.txt"),
                        seed,
                        converged: trace.converged,
                        iterations: trace.iterations,
                        snapshots,
                    });
                }
                systems.push(SystemEntry {
                    id,
                    family: family.to_string(),
                    grid: grid.sizes().to_vec(),
                    spacing: grid.spacing(),
                    matrix,
                    rhs,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        seed: spec.seed,
        tol: spec.solve.tol,
        max_iters: spec.solve.max_iters,
        length_scale: spec.length_scale,
        variance: spec.variance,
        systems,
    };
    std::fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// One recorded state `(k, x_k, r_k)` of one right-hand side.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub system: usize,
    pub rhs: usize,
    pub k: usize,
    pub x: Vec<f64>,
    pub r: Vec<f64>,
}

/// A right-hand side with its recorded trajectory.
#[derive(Debug, Clone)]
pub struct RhsData {
    pub b: Vec<f64>,
    pub converged: bool,
    pub samples: Vec<TrainSample>,
}

impl RhsData {
    /// The final iterate if the solve converged.
    pub fn solution(&self) -> Option<&[f64]> {
        self.converged.then(|| self.samples.last().map(|s| s.x.as_slice())).flatten()
    }
}

#[derive(Debug, Clone)]
pub struct SystemData {
    pub id: usize,
    pub a: Arc<CsrMatrix>,
    pub grid: GridSpec,
    pub rhs: Vec<RhsData>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub systems: Vec<SystemData>,
}

impl Dataset {
    /// Loads every file listed in the manifest and checks
    /// `r_k = b - A x_k` for each snapshot.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| NeuralError::Dataset(format!("cannot read {}: {e}", path.display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let mut systems = Vec::new();
        for s in &manifest.systems {
            let a = Arc::new(read_matrix(dir.join(&s.matrix))?);
            let grid = GridSpec::new(s.grid.clone(), s.spacing)?;
            let mut rhs = Vec::new();
            for (j, e) in s.rhs.iter().enumerate() {
                let b = read_vector(dir.join(&e.rhs))?;
                if b.len() != a.n_rows() {
                    return Err(NeuralError::Dataset(format!("{}: length {} for n = {}", e.rhs, b.len(), a.n_rows())));
                }
                let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                let mut samples = Vec::new();
                for snap in &e.snapshots {
                    let x = read_vector(dir.join(&snap.x))?;
                    let r = read_vector(dir.join(&snap.r))?;
                    let true_r = a.residual(&b, &x)?;
                    if r.len() != true_r.len() || r.iter().zip(&true_r).any(|(p, q)| (p - q).abs() > 1e-10 * scale) {
                        return Err(NeuralError::Dataset(format!("{}: residual does not match b - A x", snap.r)));
                    }
                    samples.push(TrainSample { system: s.id, rhs: j, k: snap.k, x, r });
                }
                if samples.is_empty() {
                    return Err(NeuralError::Dataset(format!("{}: no snapshots", e.rhs)));
                }
                rhs.push(RhsData { b, converged: e.converged, samples });
            }
            systems.push(SystemData { id: s.id, a, grid, rhs });
        }
        if systems.is_empty() {
            return Err(NeuralError::Dataset("manifest lists no systems".into()));
        }
        Ok(Self { manifest, systems })
    }
}

/// Training data for one distinct matrix, packed as column blocks.
#[derive(Debug, Clone)]
pub struct Group {
    pub structure: Structure,
    /// Every recorded residual `r_k`, one per column.
    pub residuals: Mat,
    /// Right-hand sides.
    pub rhs: Mat,
    /// Right-hand sides whose solve converged, with their solutions.
    pub data_rhs: Mat,
    pub solutions: Mat,
}

fn columns(n: usize, cols: &[&[f64]]) -> Mat {
    let mut m = Mat::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.column_mut(j).copy_from_slice(c);
    }
    m
}

/// Groups systems that share the same matrix and grid, so the network's
/// matrix-dependent part is evaluated once per group.
pub fn build_groups(dataset: &Dataset, config: &NamgConfig) -> Result<Vec<Group>> {
    let mut keys: Vec<(&Arc<CsrMatrix>, &GridSpec)> = Vec::new();
    let mut members: Vec<Vec<&SystemData>> = Vec::new();
    for s in &dataset.systems {
        match keys.iter().position(|(a, g)| **a == s.a && **g == s.grid) {
            Some(i) => members[i].push(s),
            None => {
                keys.push((&s.a, &s.grid));
                members.push(vec![s]);
            }
        }
    }
    keys.into_iter()
        .zip(members)
        .map(|((a, grid), systems)| {
            let n = a.n_rows();
            let rhs: Vec<&RhsData> = systems.iter().flat_map(|s| &s.rhs).collect();
            let residuals: Vec<&[f64]> = rhs.iter().flat_map(|d| d.samples.iter().map(|s| s.r.as_slice())).collect();
            let b: Vec<&[f64]> = rhs.iter().map(|d| d.b.as_slice()).collect();
            let data: Vec<(&[f64], &[f64])> = rhs.iter().filter_map(|d| Some((d.b.as_slice(), d.solution()?))).collect();
            Ok(Group {
                structure: Structure::new(a.clone(), grid, config)?,
                residuals: columns(n, &residuals),
                rhs: columns(n, &b),
                data_rhs: columns(n, &data.iter().map(|d| d.0).collect::<Vec<_>>()),
                solutions: columns(n, &data.iter().map(|d| d.1).collect::<Vec<_>>()),
            })
        })
        .collect()
}

/// Sum over groups of `sum_squares(term(group))`, divided by the total
/// column count. Fails on an empty batch.
fn batch_mean<'t>(
    tape: &'t Tape,
    groups: &[&Group],
    count: impl Fn(&Group) -> usize,
    mut term: impl FnMut(usize, &Group) -> Result<Option<Var<'t>>>,
) -> Result<Var<'t>> {
    let total: usize = groups.iter().map(|g| count(g)).sum();
    if total == 0 {
        return Err(NeuralError::Dataset("empty batch".into()));
    }
    let mut acc: Option<Var<'t>> = None;
    for (i, g) in groups.iter().enumerate() {
        if count(g) == 0 {
            continue;
        }
        if let Some(t) = term(i, g)? {
            let s = t.sum_squares();
            acc = Some(match acc {
                Some(a) => a.add(s)?,
                None => s,
            });
        }
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Mat::zeros(1, 1))).scale(1.0 / total as f64))
}

/// A preconditioner evaluated on the tape: `(group index, R) -> M R`.
pub trait TapeOperator<'t> {
    fn apply(&self, group: usize, r: Var<'t>) -> Result<Var<'t>>;
}

impl<'t, F: Fn(usize, Var<'t>) -> Result<Var<'t>>> TapeOperator<'t> for F {
    fn apply(&self, group: usize, r: Var<'t>) -> Result<Var<'t>> {
        self(group, r)
    }
}

/// Pins a closure to the tape lifetime so it can serve as a [`TapeOperator`].
pub fn tape_op<'t, F: Fn(usize, Var<'t>) -> Result<Var<'t>>>(f: F) -> F {
    f
}

/// Mean of `‖r − A M r‖²` over every recorded residual.
pub fn condition_loss<'t>(tape: &'t Tape, groups: &[&Group], m: &dyn TapeOperator<'t>) -> Result<Var<'t>> {
    batch_mean(tape, groups, |g| g.residuals.ncols(), |i, g| {
        let r = tape.constant(g.residuals.clone());
        let z = m.apply(i, r)?;
        Ok(Some(r.sub(z.spmm(&g.structure.a)?)?))
    })
}

/// Mean of `‖A M b − b‖²` over right-hand sides.
pub fn residual_loss<'t>(tape: &'t Tape, groups: &[&Group], m: &dyn TapeOperator<'t>) -> Result<Var<'t>> {
    batch_mean(tape, groups, |g| g.rhs.ncols(), |i, g| {
        let b = tape.constant(g.rhs.clone());
        let z = m.apply(i, b)?;
        Ok(Some(z.spmm(&g.structure.a)?.sub(b)?))
    })
}

/// Mean of `‖M b − x*‖²` over right-hand sides with a converged solution.
pub fn data_loss<'t>(tape: &'t Tape, groups: &[&Group], m: &dyn TapeOperator<'t>) -> Result<Var<'t>> {
    batch_mean(tape, groups, |g| g.data_rhs.ncols(), |i, g| {
        let z = m.apply(i, tape.constant(g.data_rhs.clone()))?;
        Ok(Some(z.sub(tape.constant(g.solutions.clone()))?))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_data: f64,
    pub w_residual: f64,
    pub w_condition: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_data: 1.0,
            w_residual: 1.0,
            w_condition: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_data, self.w_residual, self.w_condition];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().all(|&x| x == 0.0) {
            return Err(NeuralError::Config(format!("loss weights must be >= 0 and not all zero: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Matrix groups per optimizer step; `None` uses all of them.
    pub batch_size: Option<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: NamgConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: None,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            model: NamgConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub data: f64,
    pub residual: f64,
    pub condition: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss_total,loss_data,loss_residual,loss_condition\n");
    for e in log {
        writeln!(s, "{},{:e},{:e},{:e},{:e}", e.epoch, e.total, e.data, e.residual, e.condition).unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest logged loss.
    pub model: NamgModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// The NAMG network as a [`TapeOperator`] over a list of groups.
pub struct ModelOperator<'a, 't> {
    pub bound: namg::Bound<'t>,
    pub groups: &'a [&'a Group],
    pub config: &'a NamgConfig,
}

impl<'t> TapeOperator<'t> for ModelOperator<'_, 't> {
    fn apply(&self, group: usize, r: Var<'t>) -> Result<Var<'t>> {
        namg::forward(&self.bound, &self.groups[group].structure, self.config, r)
    }
}

/// Weighted losses of `model` on `groups`; with `grads` also returns the
/// parameter gradients in [`namg::PARAM_NAMES`] order.
pub fn evaluate(
    model: &NamgModel,
    groups: &[&Group],
    weights: &LossWeights,
    grads: bool,
) -> Result<(EpochLog, Option<Vec<Mat>>)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, grads);
    let op = ModelOperator { bound, groups, config: &model.config };
    let mut total = tape.constant(Mat::zeros(1, 1));
    let mut parts = [0.0; 3];
    let ws = [weights.w_data, weights.w_residual, weights.w_condition];
    for (k, w) in ws.into_iter().enumerate() {
        let l = match k {
            0 => data_loss(&tape, groups, &op),
            1 => residual_loss(&tape, groups, &op),
            _ => condition_loss(&tape, groups, &op),
        };
        // Disabled terms are still logged when they can be evaluated.
        let l = match l {
            Ok(l) => l,
            Err(NeuralError::Dataset(_)) if w == 0.0 => continue,
            Err(e) => return Err(e),
        };
        parts[k] = l.scalar();
        if w != 0.0 {
            total = total.add(l.scale(w))?;
        }
    }
    let log = EpochLog {
        epoch: 0,
        total: total.scalar(),
        data: parts[0],
        residual: parts[1],
        condition: parts[2],
    };
    if !grads {
        return Ok((log, None));
    }
    let vars = bound.all();
    let g = tape.backward(total)?;
    let out = vars
        .iter()
        .zip(model.params())
        .map(|(v, p)| g.get(*v).cloned().unwrap_or_else(|| Mat::zeros(p.nrows(), p.ncols())))
        .collect();
    Ok((log, Some(out)))
}

/// Trains from a loaded dataset. Logs the loss of the parameters entering
/// each epoch and keeps the best of them.
pub fn train_on(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, cfg, |_| Ok(()))
}

/// Like [`train_on`], calling `on_best` whenever the best model improves.
pub fn train_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_best: impl FnMut(&NamgModel) -> Result<()>,
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Err(NeuralError::Config("epochs must be >= 1".into()));
    }
    cfg.weights.validate()?;
    let groups = build_groups(dataset, &cfg.model)?;
    let refs: Vec<&Group> = groups.iter().collect();
    let batch = cfg.batch_size.unwrap_or(refs.len()).clamp(1, refs.len());
    let mut model = NamgModel::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam, model.params())?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, NamgModel)> = None;
    for epoch in 0..cfg.epochs {
        let mut sums = EpochLog { epoch, total: 0.0, data: 0.0, residual: 0.0, condition: 0.0 };
        let chunks: Vec<&[&Group]> = refs.chunks(batch).collect();
        let snapshot = model.clone();
        for chunk in &chunks {
            let (l, g) = evaluate(&model, chunk, &cfg.weights, true)?;
            if !l.total.is_finite() {
                return Err(NeuralError::NonFinite(format!("loss at epoch {epoch}")));
            }
            let w = chunk.len() as f64 / refs.len() as f64;
            sums.total += w * l.total;
            sums.data += w * l.data;
            sums.residual += w * l.residual;
            sums.condition += w * l.condition;
            adam.step(model.params_mut(), &g.expect("gradients requested"))?;
        }
        log::debug!("epoch {epoch}: loss {:e}", sums.total);
        if best.as_ref().is_none_or(|(b, _, _)| sums.total < *b) {
            on_best(&snapshot)?;
            best = Some((sums.total, epoch, snapshot));
        }
        log.push(sums);
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, best_epoch, log })
}

/// Paths written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub outcome: TrainOutcome,
}

/// Loads the dataset in `data_dir`, trains, and writes the best checkpoint
/// and the CSV log into `out_dir`. The checkpoint is refreshed whenever the
/// loss improves, so an aborted run keeps its last good model.
pub fn train(data_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>, cfg: &TrainConfig) -> Result<TrainArtifacts> {
    let dataset = Dataset::load(data_dir)?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let outcome = train_with(&dataset, cfg, |m| checkpoint::save(&ckpt, m))?;
    checkpoint::save(&ckpt, &outcome.model)?;
    let log = out.join(LOG_FILE);
    std::fs::write(&log, log_csv(&outcome.log))?;
    Ok(TrainArtifacts { checkpoint: ckpt, log, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(dir: &Path, n: usize, n_systems: usize, n_rhs: usize) -> DatasetManifest {
        let spec = DatasetSpec::new(vec![PdeFamily::Poisson1D], vec![GridSpec::unit_1d(n).unwrap()], n_systems, n_rhs, 7);
        generate_dataset(&spec, dir).unwrap()
    }

    #[test]
    fn minimal_dataset_contract() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(dir.path(), 15, 1, 1);
        assert_eq!(m.systems.len(), 1);
        assert_eq!(m.systems[0].rhs.len(), 1);
        let snaps = &m.systems[0].rhs[0].snapshots;
        assert!(snaps.len() >= 2);
        assert_eq!(snaps[0].k, 0);
        assert!(dir.path().join(MANIFEST).exists());
        let d = Dataset::load(dir.path()).unwrap();
        assert!(d.systems[0].rhs[0].converged);
    }

    #[test]
    fn reloaded_snapshots_satisfy_residual_identity() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 31, 2, 2);
        let d = Dataset::load(dir.path()).unwrap();
        for s in &d.systems {
            for rhs in &s.rhs {
                for t in &rhs.samples {
                    let r = s.a.residual(&rhs.b, &t.x).unwrap();
                    for (p, q) in r.iter().zip(&t.r) {
                        assert!((p - q).abs() <= 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        tiny_dataset(a.path(), 15, 2, 1);
        tiny_dataset(b.path(), 15, 2, 1);
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), MANIFEST), read(b.path(), MANIFEST));
        assert_eq!(read(a.path(), "sys0001/rhs000_x0002.txt"), read(b.path(), "sys0001/rhs000_x0002.txt"));
    }

    #[test]
    fn tampered_snapshot_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 15, 1, 1);
        std::fs::write(dir.path().join("sys0000/rhs000_r0001.txt"), "1\n".repeat(15)).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(NeuralError::Dataset(_))));
        assert!(Dataset::load(dir.path().join("missing")).is_err());
    }

    #[test]
    fn identical_matrices_share_a_group() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 15, 3, 2);
        let d = Dataset::load(dir.path()).unwrap();
        let groups = build_groups(&d, &NamgConfig::default()).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].rhs.ncols(), 6);
        assert_eq!(groups[0].solutions.ncols(), 6);
    }

    fn groups(n: usize) -> Vec<Group> {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), n, 2, 2);
        build_groups(&Dataset::load(dir.path()).unwrap(), &NamgConfig::default()).unwrap()
    }

    #[test]
    fn loss_oracles() {
        let gs = groups(31);
        let refs: Vec<&Group> = gs.iter().collect();
        let tape = Tape::new();
        let zero = tape_op(|_, r: Var<'_>| Ok(r.tape().constant(Mat::zeros(r.shape().0, r.shape().1))));
        let mean_sq = |m: &Mat| m.norm_squared() / m.ncols() as f64;
        let g = &gs[0];
        let cl = condition_loss(&tape, &refs, &zero).unwrap().scalar();
        let rl = residual_loss(&tape, &refs, &zero).unwrap().scalar();
        let dl = data_loss(&tape, &refs, &zero).unwrap().scalar();
        assert!((cl - mean_sq(&g.residuals)).abs() <= 1e-12 * cl);
        assert!((rl - mean_sq(&g.rhs)).abs() <= 1e-12 * rl);
        assert!((dl - mean_sq(&g.solutions)).abs() <= 1e-12 * dl);

        let inv = g.structure.a.to_dense().unwrap().try_inverse().unwrap();
        let exact = tape_op(|_, r: Var<'_>| Ok(r.tape().constant(&inv * r.value())));
        assert!(condition_loss(&tape, &refs, &exact).unwrap().scalar() < 1e-18 * cl);
        assert!(residual_loss(&tape, &refs, &exact).unwrap().scalar() < 1e-18 * rl);
    }

    #[test]
    fn residual_loss_is_condition_loss_on_rhs() {
        let gs = groups(15);
        let model = NamgModel::new(NamgConfig::default(), 3).unwrap();
        let tape = Tape::new();
        let p = model.bind(&tape, false);
        let op = tape_op(|i, r| namg::forward(&p, &gs[i].structure, &model.config, r));
        let mut swapped = gs.clone();
        swapped[0].residuals = swapped[0].rhs.clone();
        let a = residual_loss(&tape, &[&gs[0]], &op).unwrap().scalar();
        let b = condition_loss(&tape, &[&swapped[0]], &op).unwrap().scalar();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn losses_ignore_sample_order() {
        let gs = groups(15);
        let model = NamgModel::new(NamgConfig::default(), 4).unwrap();
        let tape = Tape::new();
        let p = model.bind(&tape, false);
        let op = tape_op(|_, r| namg::forward(&p, &gs[0].structure, &model.config, r));
        let mut rev = gs[0].clone();
        let k = rev.residuals.ncols();
        rev.residuals = Mat::from_fn(rev.residuals.nrows(), k, |i, j| gs[0].residuals[(i, k - 1 - j)]);
        let a = condition_loss(&tape, &[&gs[0]], &op).unwrap().scalar();
        let b = condition_loss(&tape, &[&rev], &op).unwrap().scalar();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { w_data: 0.0, w_residual: 0.0, w_condition: 0.0 }.validate().is_err());
        assert!(LossWeights { w_data: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn one_epoch_smoke_and_gradient_flow() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path(), 15, 1, 1);
        let out = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let art = train(data.path(), out.path(), &cfg).unwrap();
        let loaded = checkpoint::load(&art.checkpoint).unwrap();
        let csv = std::fs::read_to_string(&art.log).unwrap();
        assert!(csv.starts_with("epoch,loss_total,loss_data,loss_residual,loss_condition\n"));
        assert_eq!(csv.lines().count(), 3);
        let init = NamgModel::new(cfg.model.clone(), cfg.seed).unwrap();
        let d = Dataset::load(data.path()).unwrap();
        let after = train_on(&d, &TrainConfig { epochs: 2, ..cfg }).unwrap();
        assert_eq!(after.model, loaded);
        // epoch 1 logs the parameters after one step
        assert_ne!(after.log[0].total, after.log[1].total);
        assert!(init.params().iter().zip(after.model.params()).any(|(a, b)| a != b) || after.best_epoch == 0);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path(), 15, 1, 1);
        // Blow the right-hand side up so squared norms overflow.
        let path = data.path().join("sys0000/rhs000.txt");
        std::fs::write(&path, "1e200\n".repeat(15)).unwrap();
        let mut m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(data.path().join(MANIFEST)).unwrap()).unwrap();
        m.systems[0].rhs[0].snapshots.truncate(1);
        std::fs::write(data.path().join("sys0000/rhs000_r0000.txt"), "1e200\n".repeat(15)).unwrap();
        std::fs::write(data.path().join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let err = train(data.path(), out.path(), &TrainConfig { epochs: 3, ..Default::default() }).unwrap_err();
        assert!(matches!(err, NeuralError::NonFinite(_)), "{err}");
    }
}
