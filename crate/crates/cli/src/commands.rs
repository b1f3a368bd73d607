//! Subcommand implementations. Each returns its `key=value` summary line.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lvrt_pinn::analysis::{
    compare_curves, delta_v_grid, ground_truth_curve, read_curve, sidecar_path, AnalysisError,
    BoundaryCurve, BoundaryProblem, PointStatus, QueryKind,
};
use lvrt_pinn::dataset::{generate_training_set, read_set, DatasetError};
use lvrt_pinn::dynamics::{simulate, DynamicsError};
use lvrt_pinn::milp::{
    interval_bounds, lp_string, read_bounds, tighten_bounds_lp, BoundsFile, BoundsSource,
    InputDomain, MilpError, NeuronBounds, TightenOptions,
};
use lvrt_pinn::pinn::{load_model, train, MlpModel, PinnError};

use crate::config::RunConfig;
use crate::{CliError, Command, Kind};

/// Header of the long-format plotting table.
pub const PLOT_HEADER: &str = "series,kind,param,delta_V,delta_T,status";

#[derive(Clone, Copy)]
enum Class {
    Usage,
    Numeric,
    Io,
}

/// Which exit class a library error belongs to.
trait Classify: Display {
    fn class(&self) -> Class;
}

impl Classify for DynamicsError {
    fn class(&self) -> Class {
        match self {
            DynamicsError::InvalidParams(_) | DynamicsError::InvalidInput(_) => Class::Usage,
            DynamicsError::Io(_) => Class::Io,
            _ => Class::Numeric,
        }
    }
}

impl Classify for DatasetError {
    fn class(&self) -> Class {
        match self {
            DatasetError::InvalidGrid(_) => Class::Usage,
            DatasetError::Simulation { .. } => Class::Numeric,
            DatasetError::Dynamics(e) => e.class(),
            DatasetError::Parse { .. } | DatasetError::Consistency(_) | DatasetError::Io(_) => Class::Io,
        }
    }
}

impl Classify for PinnError {
    fn class(&self) -> Class {
        match self {
            PinnError::Dimension(_) | PinnError::InvalidModel(_) | PinnError::InvalidConfig(_) => {
                Class::Usage
            }
            PinnError::TrainingDiverged { .. } => Class::Numeric,
            PinnError::SchemaVersion { .. } | PinnError::Format(_) | PinnError::Io(_) => Class::Io,
        }
    }
}

impl Classify for MilpError {
    fn class(&self) -> Class {
        match self {
            MilpError::InvalidProblem(_)
            | MilpError::InfiniteBound(_)
            | MilpError::UnboundedNeuron { .. } => Class::Usage,
            MilpError::BoundLp { .. }
            | MilpError::IterationLimit(_)
            | MilpError::NodeLimit { .. }
            | MilpError::Numerical(_) => Class::Numeric,
            MilpError::Format(_) | MilpError::Io(_) => Class::Io,
            MilpError::Pinn(e) => e.class(),
        }
    }
}

impl Classify for AnalysisError {
    fn class(&self) -> Class {
        match self {
            AnalysisError::InvalidQuery(_) | AnalysisError::EmptyOverlap => Class::Usage,
            AnalysisError::Parse { .. } | AnalysisError::Format(_) | AnalysisError::Io(_) => Class::Io,
            AnalysisError::Milp(e) => e.class(),
            AnalysisError::Dynamics(e) => e.class(),
        }
    }
}

impl Classify for std::io::Error {
    fn class(&self) -> Class {
        Class::Io
    }
}

impl Classify for serde_json::Error {
    fn class(&self) -> Class {
        Class::Io
    }
}

/// Map a library error to a CLI error naming the failing operation.
fn op<E: Classify>(name: &'static str) -> impl Fn(E) -> CliError {
    move |e| {
        let msg = format!("{name}: {e}");
        match e.class() {
            Class::Usage => CliError::Usage(msg),
            Class::Numeric => CliError::Numeric(msg),
            Class::Io => CliError::Io(msg),
        }
    }
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parent_of(path: &Path) -> Result<&Path, CliError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).map_err(op("create output directory"))?;
    Ok(parent)
}

/// Write `bytes` to a temp file next to `path`, then rename it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = tempfile::NamedTempFile::new_in(parent_of(path)?).map_err(op("write output"))?;
    tmp.write_all(bytes).map_err(op("write output"))?;
    tmp.persist(path)
        .map_err(|e| CliError::Io(format!("write output {}: {}", path.display(), e.error)))?;
    Ok(())
}

/// Fill a fresh sibling directory, then swap it in for `dir`.
fn write_dir_atomic(
    dir: &Path,
    fill: impl FnOnce(&Path) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempdir_in(parent_of(dir)?)
        .map_err(op("write output directory"))?;
    fill(tmp.path())?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(op("replace output directory"))?;
    }
    fs::rename(tmp.keep(), dir).map_err(op("replace output directory"))?;
    Ok(())
}

/// `<out>.config.toml` next to a file or directory output.
fn write_snapshot(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    write_atomic(&with_suffix(out, ".config.toml"), cfg.to_toml().as_bytes())
}

fn write_curve_atomic(cfg: &RunConfig, curve: &mut BoundaryCurve, csv: &Path) -> Result<(), CliError> {
    curve.meta.config = Some(cfg.to_toml());
    write_atomic(csv, curve.to_csv_with(cfg.analysis.solve_times_in_csv).as_bytes())?;
    let meta = curve.meta_json().map_err(op("write curve metadata"))?;
    write_atomic(&sidecar_path(csv), meta.as_bytes())
}

fn load(path: &Path) -> Result<MlpModel, CliError> {
    require(path, "model")?;
    load_model(path).map_err(op("load model"))
}

fn compute_bounds(cfg: &RunConfig, model: &MlpModel, source: BoundsSource) -> Result<NeuronBounds, CliError> {
    let domain = InputDomain::from(&cfg.grid.input_box());
    let b = interval_bounds(model, &domain);
    match source {
        BoundsSource::Interval => Ok(b),
        BoundsSource::LpTightened => tighten_bounds_lp(model, &domain, &b, &TightenOptions::default())
            .map_err(op("tighten bounds")),
    }
}

/// Bounds from a cache file if given, otherwise computed per configuration.
fn bounds_for(
    cfg: &RunConfig,
    model: &MlpModel,
    file: Option<&Path>,
) -> Result<(NeuronBounds, BoundsSource), CliError> {
    match file.or(cfg.paths.bounds.as_deref()) {
        Some(path) => {
            require(path, "bounds file")?;
            let f = read_bounds(path).map_err(op("read bounds"))?;
            let hash = model.hash();
            if f.model_hash != hash {
                return Err(CliError::Usage(format!(
                    "bounds file {} belongs to model {}, not {hash}",
                    path.display(),
                    f.model_hash
                )));
            }
            Ok((f.to_bounds().map_err(op("read bounds"))?, f.source))
        }
        None => {
            let source = cfg.analysis.bounds_source;
            Ok((compute_bounds(cfg, model, source)?, source))
        }
    }
}

fn boundary_problem(
    cfg: &RunConfig,
    model: Option<PathBuf>,
    bounds: Option<PathBuf>,
) -> Result<BoundaryProblem, CliError> {
    let model = load(&model.unwrap_or_else(|| cfg.paths.model.clone()))?;
    let (b, source) = bounds_for(cfg, &model, bounds.as_deref())?;
    BoundaryProblem::new(&model, cfg.grid.input_box(), b, source, &cfg.converter)
        .map_err(op("encode network"))
}

fn sweep_grid(cfg: &RunConfig) -> Result<Vec<f64>, CliError> {
    let a = &cfg.analysis;
    delta_v_grid(a.delta_v_start, a.delta_v_stop, a.delta_v_step).map_err(op("delta_V grid"))
}

fn count(curve: &BoundaryCurve, status: PointStatus) -> usize {
    curve.points.iter().filter(|p| p.status == status).count()
}

/// `<stem>_<param>.csv` when several parameters share one output path.
fn per_param_path(out: &Path, param: f64, several: bool) -> PathBuf {
    if !several {
        return out.to_path_buf();
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    out.with_file_name(format!("{stem}_{param}.{ext}"))
}

fn sweep_all(
    cfg: &RunConfig,
    bp: &BoundaryProblem,
    kinds: Vec<QueryKind>,
    out: PathBuf,
    name: &str,
) -> Result<String, CliError> {
    let grid = sweep_grid(cfg)?;
    let several = kinds.len() > 1;
    let mut parts = Vec::new();
    let mut files = Vec::new();
    for kind in kinds {
        let mut curve = bp.sweep(kind, &grid).map_err(op("boundary sweep"))?;
        let path = per_param_path(&out, kind.param(), several);
        write_curve_atomic(cfg, &mut curve, &path)?;
        parts.push(format!(
            "{}:{}/{}/{}/{}",
            kind.param(),
            count(&curve, PointStatus::Optimal),
            count(&curve, PointStatus::NeverCritical),
            count(&curve, PointStatus::Infeasible),
            count(&curve, PointStatus::Failed)
        ));
        files.push(path.display().to_string());
    }
    Ok(format!(
        "command={name} points={} optimal/never/infeasible/failed={} bounds_source={} out={}",
        grid.len(),
        parts.join(","),
        bp.bounds_source,
        files.join(",")
    ))
}

fn kind_name(kind: &QueryKind) -> &'static str {
    match kind {
        QueryKind::Lvrt { .. } => "lvrt",
        QueryKind::Power { .. } => "power",
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn dispatch(cfg: &RunConfig, command: Command) -> Result<String, CliError> {
    let out_dir = &cfg.paths.out_dir;
    match command {
        Command::Simulate { dv, dt_dist, out } => {
            let out = out.unwrap_or_else(|| out_dir.join("trajectory.csv"));
            let traj = simulate(&cfg.converter, dv, dt_dist, &cfg.simulation).map_err(op("simulate"))?;
            write_atomic(&out, traj.to_csv().as_bytes())?;
            write_snapshot(cfg, &out)?;
            Ok(format!(
                "command=simulate delta_V={dv} delta_T={dt_dist} samples={} min_V_meas={} final_P_total={} out={}",
                traj.len(),
                traj.min_v_meas,
                traj.last_algebraic().p_total,
                out.display()
            ))
        }
        Command::GenData { out } => {
            let out = out.unwrap_or_else(|| cfg.paths.dataset.clone());
            let set = generate_training_set(
                &cfg.grid,
                &cfg.converter,
                cfg.dataset.stride,
                cfg.dataset.n_collocation,
                cfg.seed,
            )
            .map_err(op("generate training set"))?;
            write_dir_atomic(&out, |dir| {
                lvrt_pinn::dataset::write_set(&set, dir).map_err(op("write training set"))
            })?;
            write_snapshot(cfg, &out)?;
            Ok(format!(
                "command=gen-data trajectories={} labeled={} collocation={} seed={} out={}",
                cfg.grid.n_trajectories(),
                set.n_labeled(),
                set.n_collocation(),
                cfg.seed,
                out.display()
            ))
        }
        Command::Train { data, out } => {
            let data = data.unwrap_or_else(|| cfg.paths.dataset.clone());
            let out = out.unwrap_or_else(|| cfg.paths.model.clone());
            require(&data, "dataset")?;
            let set = read_set(&data).map_err(op("read training set"))?;
            let (model, history) = train(&set, &cfg.train_config(), &set.params).map_err(op("train"))?;
            write_atomic(&out, model.to_json().as_bytes())?;
            write_atomic(&with_suffix(&out, ".history.csv"), history.to_csv().as_bytes())?;
            write_snapshot(cfg, &out)?;
            let best = history.best();
            Ok(format!(
                "command=train epochs={} best_epoch={} validation_total={} train_total={} model_hash={} out={}",
                history.epochs.len() - 1,
                history.best_epoch,
                best.validation_total,
                best.train.total,
                model.hash(),
                out.display()
            ))
        }
        Command::Bounds { model, source, out } => {
            let model = load(&model.unwrap_or_else(|| cfg.paths.model.clone()))?;
            let source = source.unwrap_or(cfg.analysis.bounds_source);
            let out = out.unwrap_or_else(|| out_dir.join("bounds.json"));
            let b = compute_bounds(cfg, &model, source)?;
            let file = BoundsFile::new(&b, &model.hash(), source);
            let text = serde_json::to_string_pretty(&file).map_err(op("write bounds"))?;
            write_atomic(&out, text.as_bytes())?;
            write_snapshot(cfg, &out)?;
            Ok(format!(
                "command=bounds source={source} unstable={} total_width={} model_hash={} out={}",
                b.n_unstable(),
                b.total_width(),
                file.model_hash,
                out.display()
            ))
        }
        Command::Encode { model, bounds, out } => {
            let bp = boundary_problem(cfg, model, bounds)?;
            let out = out.unwrap_or_else(|| out_dir.join("encoding.json"));
            let p = bp.base();
            let text = serde_json::to_string_pretty(p).map_err(op("write encoding"))?;
            write_atomic(&out, text.as_bytes())?;
            write_snapshot(cfg, &out)?;
            Ok(format!(
                "command=encode variables={} binaries={} constraints={} out={}",
                p.variables.len(),
                p.n_binaries(),
                p.constraints.len(),
                out.display()
            ))
        }
        Command::ExportLp { model, bounds, kind, param, dv, out } => {
            let bp = boundary_problem(cfg, model, bounds)?;
            let out = out.unwrap_or_else(|| out_dir.join("encoding.lp"));
            let p = match dv {
                Some(dv) => {
                    let kind = match kind {
                        Kind::Lvrt => QueryKind::Lvrt { epsilon: param },
                        Kind::Power => QueryKind::Power { mu: param },
                    };
                    bp.formulate(kind, dv).map_err(op("formulate query"))?
                }
                None => bp.base().clone(),
            };
            write_atomic(&out, lp_string(&p).as_bytes())?;
            write_snapshot(cfg, &out)?;
            Ok(format!(
                "command=export-lp variables={} binaries={} constraints={} out={}",
                p.variables.len(),
                p.n_binaries(),
                p.constraints.len(),
                out.display()
            ))
        }
        Command::Boundary { model, bounds, eps, out } => {
            let bp = boundary_problem(cfg, model, bounds)?;
            let eps = if eps.is_empty() { cfg.analysis.epsilons.clone() } else { eps };
            let kinds = eps.into_iter().map(|epsilon| QueryKind::Lvrt { epsilon }).collect();
            let out = out.unwrap_or_else(|| out_dir.join("boundary.csv"));
            sweep_all(cfg, &bp, kinds, out, "boundary")
        }
        Command::PowerBoundary { model, bounds, mu, out } => {
            let bp = boundary_problem(cfg, model, bounds)?;
            let mu = if mu.is_empty() { cfg.analysis.mus.clone() } else { mu };
            let kinds = mu.into_iter().map(|mu| QueryKind::Power { mu }).collect();
            let out = out.unwrap_or_else(|| out_dir.join("power_boundary.csv"));
            sweep_all(cfg, &bp, kinds, out, "power-boundary")
        }
        Command::GroundTruth { kind, mu, out } => {
            let kind = match kind {
                Kind::Lvrt => QueryKind::Lvrt { epsilon: 0.0 },
                Kind::Power => QueryKind::Power { mu },
            };
            let out = out.unwrap_or_else(|| out_dir.join("ground_truth.csv"));
            let [lo, hi] = cfg.analysis.ground_truth_bracket;
            let mut curve = ground_truth_curve(&sweep_grid(cfg)?, kind, &cfg.converter, &cfg.simulation, (lo, hi))
                .map_err(op("ground truth"))?;
            write_curve_atomic(cfg, &mut curve, &out)?;
            Ok(format!(
                "command=ground-truth kind={} param={} points={} optimal={} never_critical={} out={}",
                kind_name(&kind),
                kind.param(),
                curve.len(),
                count(&curve, PointStatus::Optimal),
                count(&curve, PointStatus::NeverCritical),
                out.display()
            ))
        }
        Command::Compare { predicted, reference, out } => {
            require(&predicted, "curve")?;
            require(&reference, "curve")?;
            let a = read_curve(&predicted).map_err(op("read curve"))?;
            let b = read_curve(&reference).map_err(op("read curve"))?;
            let cmp = compare_curves(&a, &b).map_err(op("compare curves"))?;
            let out = out.unwrap_or_else(|| out_dir.join("comparison.json"));
            let text = serde_json::to_string_pretty(&cmp).map_err(op("write comparison"))?;
            write_atomic(&out, text.as_bytes())?;
            write_snapshot(cfg, &out)?;
            Ok(format!(
                "command=compare points={} max_abs={} mean_abs={} non_conservative={} out={}",
                cmp.points.len(),
                fmt_opt(cmp.max_abs),
                fmt_opt(cmp.mean_abs),
                cmp.n_non_conservative,
                out.display()
            ))
        }
        Command::PlotData { curves, out } => {
            let out = out.unwrap_or_else(|| out_dir.join("plot.csv"));
            let mut text = String::from(PLOT_HEADER);
            text.push('\n');
            let mut rows = 0;
            for path in &curves {
                require(path, "curve")?;
                let c = read_curve(path).map_err(op("read curve"))?;
                let series = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                for p in &c.points {
                    text.push_str(&format!(
                        "{series},{},{},{},{},{}\n",
                        kind_name(&c.meta.query),
                        c.meta.query.param(),
                        p.delta_v,
                        fmt_opt(p.delta_t),
                        p.status
                    ));
                    rows += 1;
                }
            }
            write_atomic(&out, text.as_bytes())?;
            write_snapshot(cfg, &out)?;
            Ok(format!("command=plot-data series={} rows={rows} out={}", curves.len(), out.display()))
        }
    }
}
