use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use regen_stability::lift::MultiIndexBasis;
use regen_stability::montecarlo::{
    ensemble_path, estimate_moments, uniform_grid, write_moments_csv, write_per_path_csv, write_switching_csv,
    InitialCondition, MomentConfig, TrajectoryEnsemble,
};
use regen_stability::stability::{crossing_bracket, sweep_growth_rate, write_sweep_csv, SpectralTest, SweepRow};
use regen_stability::{analyze, load_model, Error, SwitchedSystemModel, SystemClass, Verdict};
use serde_json::json;

use crate::args::{AnalyzeArgs, Command, Format, LiftArgs, ModelArgs, SimulateArgs, SweepArgs, OUT_DIR_ENV};

pub const EXIT_SYNTAX: u8 = 10;
pub const EXIT_INVALID: u8 = 11;
pub const EXIT_USAGE: u8 = 12;
pub const EXIT_IO: u8 = 13;
pub const EXIT_NUMERIC: u8 = 14;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Model { path: PathBuf, source: Error },
    Core(Error),
    Output { path: PathBuf, source: io::Error },
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        let core = match self {
            Failure::Usage(_) => return EXIT_USAGE,
            Failure::Output { .. } => return EXIT_IO,
            Failure::Model { source, .. } | Failure::Core(source) => source,
        };
        match core {
            Error::Syntax { .. } => EXIT_SYNTAX,
            Error::Invalid { .. } | Error::AssumptionA1(_) | Error::Dimension(_) | Error::NonSquare { .. } => {
                EXIT_INVALID
            }
            Error::Unsupported(_) => EXIT_USAGE,
            Error::Io(_) => EXIT_IO,
            Error::NonFinite
            | Error::NoConvergence(_)
            | Error::TooLarge { .. }
            | Error::QuadratureDiverged { .. }
            | Error::InvalidInterval { .. } => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "{msg}"),
            Failure::Model { path, source } => write!(f, "{}: {source}", path.display()),
            Failure::Core(source) => write!(f, "{source}"),
            Failure::Output { path, source } => write!(f, "cannot write {}: {source}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<u8, Failure>;
type Body<'a> = Box<dyn FnOnce(&mut dyn Write) -> io::Result<()> + 'a>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Lift(args) => cmd_lift(&args),
    }
}

fn load(args: &ModelArgs, h: Option<f64>) -> Result<SwitchedSystemModel, Failure> {
    let wrap = |source| Failure::Model { path: args.model.clone(), source };
    let mut model = load_model(&args.model).map_err(wrap)?;
    if let Some(m) = args.m {
        model = model.with_m(m).map_err(wrap)?;
    }
    if let Some(h) = h {
        model = model.with_h(h).map_err(wrap)?;
    }
    Ok(model)
}

struct Output {
    path: PathBuf,
    writer: Box<dyn Write>,
}

impl Output {
    /// `--out`, else `$REGENSTAB_OUT_DIR/<default_name>`, else stdout.
    fn open(explicit: Option<&Path>, default_name: &str) -> Result<Self, Failure> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => {
                std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()).map(|d| PathBuf::from(d).join(default_name))
            }
        };
        match path {
            Some(path) => Self::file(&path),
            None => {
                Ok(Output { path: PathBuf::from("<stdout>"), writer: Box::new(BufWriter::new(io::stdout().lock())) })
            }
        }
    }

    fn file(path: &Path) -> Result<Self, Failure> {
        let fail = |source| Failure::Output { path: path.to_path_buf(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(fail)?;
        }
        let file = File::create(path).map_err(fail)?;
        Ok(Output { path: path.to_path_buf(), writer: Box::new(BufWriter::new(file)) })
    }

    fn write_with(mut self, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), Failure> {
        f(&mut self.writer)
            .and_then(|_| self.writer.flush())
            .map_err(|source| Failure::Output { path: self.path, source })
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Usage(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn verdict_exit(verdict: Verdict) -> u8 {
    match verdict {
        Verdict::Stable => 0,
        Verdict::Unstable => 1,
        Verdict::Marginal => 2,
    }
}

fn cmd_analyze(args: &AnalyzeArgs) -> Outcome {
    let model = load(&args.model, args.h)?;
    let report = analyze(&model)?;
    let text = match args.format {
        Format::Text => report.to_text(),
        Format::Json => report.to_json() + "\n",
        Format::Csv => {
            let s = report.summary();
            let h = s.h.map(|h| h.to_string()).unwrap_or_default();
            format!(
                "class,test,dimension,decisive_value,verdict,growth_rate,h\n{},{},{},{},{},{},{}\n",
                report.class.as_str(),
                match s.test {
                    SpectralTest::Schur => "schur",
                    SpectralTest::Hurwitz => "hurwitz",
                },
                s.dimension,
                s.decisive_value,
                s.verdict,
                s.growth_rate,
                h
            )
        }
    };
    let ext = match args.format {
        Format::Text => "txt",
        Format::Csv => "csv",
        Format::Json => "json",
    };
    Output::open(args.out.as_deref(), &format!("analyze.{ext}"))?.write_with(|w| w.write_all(text.as_bytes()))?;
    Ok(verdict_exit(report.verdict))
}

fn cmd_sweep(args: &SweepArgs) -> Outcome {
    let model = load(&args.model, None)?;
    let SystemClass::PeriodicObservation(periodic) = model.class() else {
        return Err(Failure::Usage(format!(
            "sweep needs a periodic-observation model, `{}` is `{}`",
            args.model.model.display(),
            model.class().tag().as_str()
        )));
    };
    let grid = args.h_grid.points();
    let rows = with_threads(args.threads, || sweep_growth_rate(periodic, model.m(), &grid))??;

    let (name, body): (&str, Body) = match args.format {
        Format::Csv => ("sweep.csv", Box::new(|w| write_sweep_csv(&rows, w))),
        Format::Json => (
            "sweep.json",
            Box::new(|w| {
                serde_json::to_writer_pretty(&mut *w, &rows)?;
                w.write_all(b"\n")
            }),
        ),
        Format::Text => ("sweep.txt", Box::new(|w| write_sweep_table(&rows, w))),
    };
    Output::open(args.out.as_deref(), name)?.write_with(body)?;

    match crossing_bracket(&rows) {
        Some((lo, hi)) => eprintln!("spectral radius crosses 1 between h = {lo} and h = {hi}"),
        None => eprintln!("spectral radius does not cross 1 on this grid"),
    }
    Ok(0)
}

fn write_sweep_table(rows: &[SweepRow], w: &mut dyn Write) -> io::Result<()> {
    writeln!(w, "{:>10} {:>18} {:>18}", "h", "rho", "growth_rate")?;
    for r in rows {
        writeln!(w, "{:>10} {:>18.12} {:>18.12}", r.h, r.rho, r.growth_rate)?;
    }
    Ok(())
}

fn ensemble_json(ens: &TrajectoryEnsemble, seed: u64) -> serde_json::Value {
    // non-finite values become null
    let finite = |v: &[f64]| v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>();
    json!({
        "m": ens.m,
        "paths": ens.path_count,
        "seed": seed,
        "empirical_growth_rate": ens.empirical_growth_rate,
        "saturation_time": ens.saturation_time,
        "t": ens.time_grid,
        "moment_mean": finite(&ens.moment_mean),
        "log_moment_mean": finite(&ens.log_moment_mean),
    })
}

fn cmd_simulate(args: &SimulateArgs) -> Outcome {
    if args.paths == 0 {
        return Err(Failure::Usage("--paths must be at least 1".into()));
    }
    if !(args.horizon.is_finite() && args.horizon > 0.0) {
        return Err(Failure::Usage("--horizon must be positive".into()));
    }
    if !(args.grid_step.is_finite() && args.grid_step > 0.0) {
        return Err(Failure::Usage("--grid-step must be positive".into()));
    }
    let model = load(&args.model, args.h)?;
    let config = MomentConfig {
        m: model.m(),
        initial: InitialCondition::UnitSphere,
        paths: args.paths,
        horizon: args.horizon,
        grid: uniform_grid(args.horizon, args.grid_step)?,
        seed: args.seed,
        keep_paths: args.per_path.is_some(),
    };
    let ens = with_threads(args.threads, || estimate_moments(&model, &config))??;

    match args.format {
        Format::Csv => Output::open(args.out.as_deref(), "moments.csv")?.write_with(|w| write_moments_csv(&ens, w))?,
        Format::Json => Output::open(args.out.as_deref(), "moments.json")?.write_with(|w| {
            serde_json::to_writer_pretty(&mut *w, &ensemble_json(&ens, args.seed))?;
            w.write_all(b"\n")
        })?,
        Format::Text => Output::open(args.out.as_deref(), "moments.txt")?.write_with(|w| {
            writeln!(w, "{:>10} {:>24}", "t", "moment_mean")?;
            for (t, v) in ens.time_grid.iter().zip(&ens.moment_mean) {
                writeln!(w, "{t:>10} {v:>24.12e}")?;
            }
            Ok(())
        })?,
    }
    if let Some(path) = &args.per_path {
        Output::file(path)?.write_with(|w| write_per_path_csv(&ens, w))?;
    }
    if let Some(path) = &args.switching_out {
        let sample = ensemble_path(&model, &config, 0)?;
        Output::file(path)?.write_with(|w| write_switching_csv(&sample, model.modes(), w))?;
    }

    let empirical = ens.empirical_growth_rate.map_or_else(|| "undefined".to_string(), |g| format!("{g:.6}"));
    eprintln!("empirical growth rate (per unit time, m = {}): {empirical}", ens.m);
    match analyze(&model) {
        Ok(report) => {
            let unit = match (report.test, report.h) {
                (SpectralTest::Hurwitz, _) | (_, Some(_)) => "per unit time",
                _ => "per regeneration cycle",
            };
            eprintln!("analytic growth rate ({unit}): {:.6} [{}]", report.growth_rate, report.verdict);
        }
        Err(e) => eprintln!("analytic growth rate unavailable: {e}"),
    }
    if let Some(t) = ens.saturation_time {
        eprintln!("moment mean overflows f64 from t = {t}; log-moment remains finite");
    }
    Ok(0)
}

fn rows_of(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn write_matrix(w: &mut dyn Write, a: &DMatrix<f64>) -> io::Result<()> {
    for row in a.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>13.6}")).collect();
        writeln!(w, "  {}", cells.join(" "))?;
    }
    Ok(())
}

fn cmd_lift(args: &LiftArgs) -> Outcome {
    let matrices: Vec<(String, DMatrix<f64>)> = match (&args.model, &args.matrix) {
        (Some(path), _) => {
            let model = load_model(path).map_err(|source| Failure::Model { path: path.clone(), source })?;
            let modes = model.modes();
            modes.labels().iter().cloned().zip(modes.matrices().iter().cloned()).collect()
        }
        (None, Some(inline)) => {
            let rows = &inline.0;
            let a = DMatrix::from_row_iterator(rows.len(), rows[0].len(), rows.iter().flatten().copied());
            vec![("matrix".to_string(), a)]
        }
        (None, None) => return Err(Failure::Usage("lift needs --model or --matrix".into())),
    };
    let n = matrices[0].1.nrows();
    let basis = MultiIndexBasis::new(n, args.m)?;
    let mut lifted = Vec::with_capacity(matrices.len());
    for (label, a) in &matrices {
        lifted.push((label.clone(), basis.induced(a)?, basis.infinitesimal(a)?));
    }

    match args.format {
        Format::Csv => Err(Failure::Usage("lift supports --format text or json".into())),
        Format::Json => {
            let doc = json!({
                "n": n,
                "m": args.m,
                "dimension": basis.len(),
                "basis": basis.indices(),
                "matrices": lifted.iter().map(|(label, induced, inf)| json!({
                    "label": label,
                    "induced": rows_of(induced),
                    "infinitesimal": rows_of(inf),
                })).collect::<Vec<_>>(),
            });
            Output::open(args.out.as_deref(), "lift.json")?.write_with(|w| {
                serde_json::to_writer_pretty(&mut *w, &doc)?;
                w.write_all(b"\n")
            })?;
            Ok(0)
        }
        Format::Text => {
            Output::open(args.out.as_deref(), "lift.txt")?.write_with(|w| {
                writeln!(w, "basis: n = {n}, m = {}, dimension = {}", args.m, basis.len())?;
                for (k, alpha) in basis.indices().iter().enumerate() {
                    writeln!(w, "  {k:>3}  {alpha:?}  multinomial {}", basis.multinomial(k))?;
                }
                for (label, induced, inf) in &lifted {
                    writeln!(w, "\n{label}: induced matrix")?;
                    write_matrix(w, induced)?;
                    writeln!(w, "{label}: infinitesimal lift")?;
                    write_matrix(w, inf)?;
                }
                Ok(())
            })?;
            Ok(0)
        }
    }
}
