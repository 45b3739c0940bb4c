use crate::manifest::Recorder;
use crate::{
    usage, BenchArgs, Failure, GenDataArgs, MethodArg, PrecondArg, PrecondOpts, SolveArgs, SolverArg, SpectrumArgs,
    Suite, TrainArgs,
};
use anyhow::Context;
use npo_core::io::{read_matrix, read_vector, write_vector};
use npo_core::krylov::{solve as krylov_solve, IdentityPrecond};
use npo_core::spectral::{contraction_factor, estimate_spectrum, SpectrumMethod};
use npo_core::{
    assemble, sample_rhs, CsrMatrix, ExactInverse, GridSpec, GrfSpec, PdeFamily, Preconditioner, SolveConfig,
    SolverKind, StationaryKind, StationaryPrecond, TwoGridPrecond,
};
use npo_neural::checkpoint;
use npo_neural::namg::{NamgModel, NamgPreconditioner};
use npo_neural::training::{self, DatasetSpec, TrainConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

type CmdResult = Result<(), Failure>;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Tolerance columns read off each bench trace.
pub const BENCH_TOLS: [f64; 3] = [1e-10, 1e-6, 1e-4];

/// `128` is a 1D grid, `64x64` a square 2D grid, both on the unit domain.
fn parse_grid(s: &str) -> Result<GridSpec, Failure> {
    let bad = || usage(format!("invalid value '{s}' for '--grid': expected N or NxN"));
    let sizes: Vec<usize> = s
        .split('x')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    match sizes[..] {
        [n] => GridSpec::unit_1d(n).map_err(|e| usage(format!("--grid: {e}"))),
        [n, m] if n == m => GridSpec::unit_2d(n).map_err(|e| usage(format!("--grid: {e}"))),
        _ => Err(bad()),
    }
}

fn parse_grids(s: &str) -> Result<Vec<GridSpec>, Failure> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(parse_grid).collect()
}

fn load_model(opts: &PrecondOpts) -> Result<NamgModel, Failure> {
    let path = opts
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage("--precond namg requires --checkpoint <path>"))?;
    checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(Failure::Runtime)
}

/// Checks flag combinations before any work is done.
fn check_precond(kind: PrecondArg, opts: &PrecondOpts) -> Result<Option<NamgModel>, Failure> {
    if opts.sweeps == 0 {
        return Err(usage("--sweeps must be at least 1"));
    }
    match kind {
        PrecondArg::Namg => load_model(opts).map(Some),
        _ => Ok(None),
    }
}

fn build_precond(
    kind: PrecondArg,
    opts: &PrecondOpts,
    model: Option<&NamgModel>,
    a: &Arc<CsrMatrix>,
    grid: &GridSpec,
) -> anyhow::Result<Box<dyn Preconditioner>> {
    let stationary = |k| StationaryPrecond::new(a.clone(), k, opts.sweeps);
    Ok(match kind {
        PrecondArg::None => Box::new(IdentityPrecond),
        PrecondArg::Jacobi => Box::new(stationary(StationaryKind::jacobi())?),
        PrecondArg::Gs => Box::new(stationary(StationaryKind::GaussSeidel)?),
        PrecondArg::Sor => Box::new(stationary(StationaryKind::Sor { omega: opts.omega })?),
        PrecondArg::Twogrid => {
            let smoother = StationaryPrecond::new(a.clone(), StationaryKind::damped_jacobi(), 1)?;
            Box::new(TwoGridPrecond::build(a.clone(), grid, smoother)?)
        }
        PrecondArg::Namg => {
            let model = model.context("NAMG preconditioner needs a model")?;
            Box::new(NamgPreconditioner::new(model, a.clone(), grid)?)
        }
        PrecondArg::Exact => Box::new(ExactInverse::new(a)?),
    })
}

fn precond_name(kind: PrecondArg) -> &'static str {
    match kind {
        PrecondArg::None => "none",
        PrecondArg::Jacobi => "jacobi",
        PrecondArg::Gs => "gs",
        PrecondArg::Sor => "sor",
        PrecondArg::Twogrid => "twogrid",
        PrecondArg::Namg => "namg",
        PrecondArg::Exact => "exact",
    }
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(args: &GenDataArgs, argv: &[String]) -> CmdResult {
    let rec = Recorder::start("gen-data", argv, Some(args.seed));
    let grids = parse_grids(&args.grid)?;
    if grids.is_empty() {
        return Err(usage("--grid needs at least one size"));
    }
    if let Some(g) = grids.iter().find(|g| g.dims() != args.family.dims()) {
        return Err(usage(format!(
            "--grid {:?} does not match --family {} ({}D)",
            g.sizes(),
            args.family,
            args.family.dims()
        )));
    }
    if args.n_systems == 0 || args.n_rhs == 0 {
        return Err(usage("--n-systems and --n-rhs must be at least 1"));
    }
    let mut spec = DatasetSpec::new(vec![args.family], grids, args.n_systems, args.n_rhs, args.seed);
    spec.length_scale = args.length_scale;
    spec.variance = args.variance;
    let manifest = training::generate_dataset(&spec, &args.out)?;
    let unconverged = manifest.systems.iter().flat_map(|s| &s.rhs).filter(|r| !r.converged).count();
    if unconverged > 0 {
        log::warn!("{unconverged} right-hand sides did not reach tol {} within {} iterations", spec.solve.tol, spec.solve.max_iters);
    }
    println!("wrote {} systems to {}", manifest.systems.len(), args.out.display());
    rec.finish(&args.out.join(RUN_MANIFEST), vec![args.out.join(training::MANIFEST)])?;
    Ok(())
}

pub fn train(args: &TrainArgs, argv: &[String]) -> CmdResult {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    set(&mut cfg.adam.learning_rate, args.lr);
    set(&mut cfg.weights.w_data, args.w_data);
    set(&mut cfg.weights.w_residual, args.w_residual);
    set(&mut cfg.weights.w_condition, args.w_condition);
    cfg.model.pre_sweeps = args.pre_sweeps.unwrap_or(cfg.model.pre_sweeps);
    cfg.model.post_sweeps = args.post_sweeps.unwrap_or(cfg.model.post_sweeps);
    cfg.model.num_coarse = args.num_coarse.unwrap_or(cfg.model.num_coarse);
    cfg.model.use_network &= !args.no_network;
    cfg.model.use_matrix_features &= !args.no_matrix_features;
    if let Err(e) = cfg.weights.validate().and_then(|_| cfg.model.validate()) {
        return Err(usage(e.to_string()));
    }
    if !args.data.join(training::MANIFEST).is_file() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "no dataset at {} (missing {})",
            args.data.display(),
            training::MANIFEST
        )));
    }
    let rec = Recorder::start("train", argv, Some(cfg.seed));
    let out = training::train(&args.data, &args.out, &cfg)?;
    let last = out.outcome.log.last().map(|l| l.total).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs, final loss {last:e}, best epoch {}; checkpoint {}",
        cfg.epochs,
        out.outcome.best_epoch,
        out.checkpoint.display()
    );
    std::fs::write(args.out.join("train_config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    rec.finish(
        &args.out.join(RUN_MANIFEST),
        vec![out.checkpoint, out.log, args.out.join("train_config.json")],
    )?;
    Ok(())
}

pub fn solve(args: &SolveArgs, argv: &[String]) -> CmdResult {
    let model = check_precond(args.precond, &args.opts)?;
    if args.solver == SolverArg::Cg && args.restart.is_some() {
        return Err(usage("--restart applies to gmres only"));
    }
    let rec = Recorder::start("solve", argv, None);
    let a = Arc::new(read_matrix(&args.matrix).with_context(|| format!("reading {}", args.matrix.display()))?);
    let b = read_vector(&args.rhs).with_context(|| format!("reading {}", args.rhs.display()))?;
    let grid = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => GridSpec::unit_1d(a.n_rows()).map_err(|e| usage(format!("--grid: {e}")))?,
    };
    let m = build_precond(args.precond, &args.opts, model.as_ref(), &a, &grid)?;
    let mut cfg = SolveConfig::new(args.tol, args.max_iters);
    cfg.restart = args.restart;
    let kind = match args.solver {
        SolverArg::Cg => SolverKind::Cg,
        SolverArg::Gmres => SolverKind::Gmres,
    };
    let (x, trace) = krylov_solve(kind, &a, &b, m.as_ref(), &cfg)?;
    println!("converged,iterations,final_residual");
    println!("{},{},{:e}", trace.converged, trace.iterations, trace.final_residual());
    let mut outputs = Vec::new();
    if let Some(path) = &args.trace_out {
        write_file(path, &trace.to_csv())?;
        outputs.push(path.clone());
    }
    if let Some(path) = &args.x_out {
        write_vector(path, &x)?;
        outputs.push(path.clone());
    }
    if let Some(path) = &args.manifest {
        rec.finish(path, outputs)?;
    }
    Ok(())
}

fn suite_problem(suite: Suite, n: usize) -> anyhow::Result<(PdeFamily, GridSpec)> {
    Ok(match suite {
        Suite::Poisson => (PdeFamily::Poisson1D, GridSpec::unit_1d(n)?),
        Suite::Diffusion => (PdeFamily::diffusion_default(), GridSpec::unit_2d(n)?),
        Suite::Elasticity => (PdeFamily::elasticity_default(), GridSpec::unit_2d(n)?),
    })
}

pub fn bench(args: &BenchArgs, argv: &[String]) -> CmdResult {
    if args.resolutions.is_empty() || args.precond_list.is_empty() {
        return Err(usage("--resolutions and --precond-list must be non-empty"));
    }
    let model = if args.precond_list.contains(&PrecondArg::Namg) {
        check_precond(PrecondArg::Namg, &args.opts)?
    } else {
        check_precond(PrecondArg::None, &args.opts)?
    };
    let rec = Recorder::start("bench", argv, Some(args.seed));
    let mut csv = String::from("method,resolution,tol,iterations,seconds\n");
    for &n in &args.resolutions {
        let (family, grid) = suite_problem(args.suite, n)?;
        let a = Arc::new(assemble(&family, &grid)?);
        // Every method at a resolution sees the same right-hand side.
        let b = sample_rhs(&family, &grid, &GrfSpec::new(0.1, 1.0, args.seed)?);
        let mut cfg = SolveConfig::new(BENCH_TOLS[0], args.max_iters);
        cfg.restart = args.restart;
        for &kind in &args.precond_list {
            let start = Instant::now();
            let m = build_precond(kind, &args.opts, model.as_ref(), &a, &grid)?;
            let (_, trace) = npo_core::gmres_solve(&a, &b, m.as_ref(), &cfg)
                .with_context(|| format!("{} at resolution {n}", precond_name(kind)))?;
            let secs = if args.timing { start.elapsed().as_secs_f64() } else { 0.0 };
            for tol in BENCH_TOLS {
                let iters = trace.first_crossing(tol).map_or("NA".to_string(), |k| k.to_string());
                writeln!(csv, "{},{n},{tol:e},{iters},{secs}", precond_name(kind)).expect("write to String");
            }
            log::info!("{} n={n}: {} iterations", precond_name(kind), trace.iterations);
        }
    }
    write_file(&args.out, &csv)?;
    print!("{csv}");
    if let Some(path) = &args.manifest {
        rec.finish(path, vec![args.out.clone()])?;
    }
    Ok(())
}

pub fn spectrum(args: &SpectrumArgs, argv: &[String]) -> CmdResult {
    let model = check_precond(args.precond, &args.opts)?;
    let problems: Vec<(Arc<CsrMatrix>, GridSpec)> = match (&args.matrix, args.family, &args.grid) {
        (Some(path), None, None) => {
            let a = read_matrix(path).with_context(|| format!("reading {}", path.display()))?;
            let grid = GridSpec::unit_1d(a.n_rows()).map_err(|e| usage(format!("--matrix: {e}")))?;
            vec![(Arc::new(a), grid)]
        }
        (None, Some(family), Some(g)) => {
            let grids = parse_grids(g)?;
            if grids.is_empty() {
                return Err(usage("--grid needs at least one size"));
            }
            let mut out = Vec::new();
            for grid in grids {
                let a = assemble(&family, &grid).map_err(|e| usage(format!("--family/--grid: {e}")))?;
                out.push((Arc::new(a), grid));
            }
            out
        }
        _ => return Err(usage("give either --matrix or both --family and --grid")),
    };
    let method = match args.method {
        MethodArg::Dense => SpectrumMethod::DenseOracle,
        MethodArg::Lanczos => SpectrumMethod::Lanczos,
        MethodArg::Power => SpectrumMethod::PowerIteration,
    };
    let rec = Recorder::start("spectrum", argv, None);
    let mut csv = String::from("size,lambda_min,lambda_max,kappa,rho\n");
    for (a, grid) in &problems {
        let m = build_precond(args.precond, &args.opts, model.as_ref(), a, grid)?;
        let s = estimate_spectrum(a, m.as_ref(), method)?;
        let c = contraction_factor(m.as_ref(), a)?;
        writeln!(csv, "{},{:e},{:e},{:e},{:e}", a.n_rows(), s.lambda_min, s.lambda_max, s.kappa, c.rho)
            .expect("write to String");
    }
    let mut outputs: Vec<PathBuf> = Vec::new();
    match &args.out {
        Some(path) => {
            write_file(path, &csv)?;
            outputs.push(path.clone());
        }
        None => print!("{csv}"),
    }
    if let Some(path) = &args.manifest {
        rec.finish(path, outputs)?;
    }
    Ok(())
}
