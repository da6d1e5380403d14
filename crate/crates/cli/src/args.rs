use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the directory for outputs without `--out`.
pub const OUT_DIR_ENV: &str = "REGENSTAB_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "regenstab", version, about = "Moment stability of regenerative switched linear systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the stability matrix of a model and report the verdict.
    Analyze(AnalyzeArgs),
    /// Spectral radius and growth rate over a grid of sampling periods.
    Sweep(SweepArgs),
    /// Monte Carlo estimate of the moment E‖x(t)‖^m.
    Simulate(SimulateArgs),
    /// Print the lift basis and the lifted matrices.
    Lift(LiftArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model document (JSON).
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// Moment order, overriding the document.
    #[arg(long, value_name = "INT")]
    pub m: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Sampling period for periodic-observation models.
    #[arg(long, value_name = "FLOAT")]
    pub h: Option<f64>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Grid of sampling periods, inclusive of both ends.
    #[arg(long, value_name = "START:STOP:STEP")]
    pub h_grid: Grid,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "INT")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_name = "FLOAT")]
    pub h: Option<f64>,
    #[arg(long, value_name = "INT", default_value_t = 100)]
    pub paths: usize,
    #[arg(long, value_name = "FLOAT", default_value_t = 10.0)]
    pub horizon: f64,
    #[arg(long, value_name = "FLOAT", default_value_t = 0.01)]
    pub grid_step: f64,
    #[arg(long, value_name = "INT", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Moment table destination.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Also write `t,path_id,norm_m` for every path.
    #[arg(long, value_name = "PATH")]
    pub per_path: Option<PathBuf>,
    /// Also write the switching signal of the first path as `time,mode`.
    #[arg(long, value_name = "PATH")]
    pub switching_out: Option<PathBuf>,
    #[arg(long, value_name = "INT")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    /// Lift every mode of this model.
    #[arg(long, value_name = "PATH", conflicts_with = "matrix", required_unless_present = "matrix")]
    pub model: Option<PathBuf>,
    /// Inline matrix, rows separated by `;` and entries by `,`.
    #[arg(long, value_name = "ROWS", allow_hyphen_values = true)]
    pub matrix: Option<MatrixArg>,
    #[arg(long, value_name = "INT", default_value_t = 2)]
    pub m: usize,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, stop, step] = parts.as_slice() else {
            return Err(format!("expected START:STOP:STEP, got `{s}`"));
        };
        let number = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
        let grid = Grid { start: number(start)?, stop: number(stop)?, step: number(step)? };
        if !(grid.start.is_finite() && grid.stop.is_finite() && grid.step.is_finite()) {
            return Err("grid bounds must be finite".into());
        }
        if grid.start <= 0.0 || grid.step <= 0.0 {
            return Err("grid needs START > 0 and STEP > 0".into());
        }
        if grid.stop < grid.start {
            return Err(format!("grid bounds are reversed ({} > {})", grid.start, grid.stop));
        }
        Ok(grid)
    }
}

impl Grid {
    /// `start + k·step` up to `stop`, rounded to 1e-12 so decimal steps
    /// land on their intended values.
    pub fn points(&self) -> Vec<f64> {
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        (0..=count).map(|k| ((self.start + k as f64 * self.step) * 1e12).round() / 1e12).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixArg(pub Vec<Vec<f64>>);

impl FromStr for MatrixArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rows = s
            .split(';')
            .map(|row| {
                row.split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{}`: {e}", v.trim())))
                    .collect::<Result<Vec<f64>, String>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err("rows have different lengths".into());
        }
        Ok(MatrixArg(rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousandth_grid_has_three_hundred_points() {
        let grid: Grid = "0.001:0.3:0.001".parse().unwrap();
        let points = grid.points();
        assert_eq!(points.len(), 300);
        assert_eq!(points[0], 0.001);
        assert_eq!(points[168], 0.169);
        assert_eq!(points[299], 0.3);
    }

    #[test]
    fn single_point_grid() {
        let grid: Grid = "0.1:0.1:0.01".parse().unwrap();
        assert_eq!(grid.points(), vec![0.1]);
    }

    #[test]
    fn bad_grids() {
        assert!("0.3:0.1:0.01".parse::<Grid>().is_err());
        assert!("0:0.1:0.01".parse::<Grid>().is_err());
        assert!("0.1:0.2:0".parse::<Grid>().is_err());
        assert!("0.1:0.2".parse::<Grid>().is_err());
        assert!("a:0.2:0.1".parse::<Grid>().is_err());
    }

    #[test]
    fn inline_matrix() {
        let m: MatrixArg = "1, 2; -3,4.5".parse().unwrap();
        assert_eq!(m.0, vec![vec![1.0, 2.0], vec![-3.0, 4.5]]);
        assert!("1,2;3".parse::<MatrixArg>().is_err());
        assert!("1,x".parse::<MatrixArg>().is_err());
    }
}
