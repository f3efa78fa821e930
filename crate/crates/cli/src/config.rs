//! Command-line configuration.

use clap::{Args, Parser, Subcommand, ValueEnum};
use ldmc_core::gamma::Candidate;
use ldmc_core::hierarchy::HierarchyOptions;
use ldmc_core::rate::DvOptions;
use ldmc_core::{tolerances, Error, NGrid, Precision, Result};
use std::path::PathBuf;

/// Large-deviations rate functionals and metastable hierarchies of finite
/// Markov chains.
#[derive(Debug, Parser)]
#[command(name = "ldmc", version, about)]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,

    /// Write machine output here instead of stdout.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,

    /// Print JSON on stdout instead of the text summary.
    #[arg(long, global = true)]
    pub json: bool,

    /// Grid of scale parameters `START:END[:BASE]`, i.e. BASE^START..BASE^END.
    #[arg(long, global = true, default_value = "6:16:2")]
    pub n_grid: String,

    /// Working precision of the hierarchy (53 or 106 bits).
    #[arg(long, global = true, default_value_t = 53)]
    pub precision_bits: u32,

    /// Random seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(flatten)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Args)]
pub struct Tolerances {
    /// Newton iteration cap for the DV solvers.
    #[arg(long, global = true, default_value_t = tolerances::MAX_NEWTON_ITERATIONS)]
    pub max_iterations: usize,
    /// Exit gradient of the tilt solver, relative to the current scale.
    #[arg(long, global = true, default_value_t = tolerances::TILT_GRADIENT)]
    pub gradient_tolerance: f64,
    /// Exit KKT residual of the projection solver.
    #[arg(long, global = true, default_value_t = tolerances::PROJECTION_KKT)]
    pub kkt_tolerance: f64,
    /// Largest log-log residual accepted by a time-scale fit.
    #[arg(long, global = true, default_value_t = tolerances::FIT_RESIDUAL)]
    pub fit_residual: f64,
    /// Fitted exponent below minus this marks a vanishing reduced rate.
    #[arg(long, global = true, default_value_t = tolerances::VANISHING_EXPONENT)]
    pub vanishing_exponent: f64,
    /// Required increase of time-scale exponents between levels.
    #[arg(long, global = true, default_value_t = tolerances::EXPONENT_MARGIN)]
    pub exponent_margin: f64,
    /// Consistency tolerance of a recovered chain against its oracle.
    #[arg(long, global = true, default_value_t = 1e-6)]
    pub recovery_tolerance: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the metastable tree of a family.
    Analyze {
        chain: PathBuf,
    },
    /// Evaluate the DV and measure-current functionals.
    Rate {
        chain: PathBuf,
        #[command(flatten)]
        measure: MeasureArg,
        /// Flow file for the measure-current functional.
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Probe the level-p functional along the n-grid.
    Gamma {
        chain: PathBuf,
        /// Level of the tree, 1-based.
        #[arg(long, default_value_t = 1)]
        level: usize,
        /// Weights on the level's wells, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        omega: String,
        #[arg(long, value_enum, default_value_t = CandidateArg::ConditionedMixture)]
        candidate: CandidateArg,
    },
    /// Derivatives of the DV functional and the asymptotic variance.
    Deriv {
        chain: PathBuf,
        #[command(flatten)]
        measure: MeasureArg,
        /// Direction files (signed measures summing to 0); one or two.
        #[arg(long = "direction", num_args = 1)]
        directions: Vec<PathBuf>,
        /// Function file for the asymptotic variance.
        #[arg(long)]
        function: Option<PathBuf>,
    },
    /// Reconstruct a chain from its rate functional.
    Recover {
        #[arg(long, value_enum)]
        mode: RecoverMode,
        /// Hidden chain answering the oracle queries.
        #[arg(long, conflicts_with = "table", required_unless_present = "table")]
        hidden: Option<PathBuf>,
        /// Table of precomputed DV values (products stage only).
        #[arg(long)]
        table: Option<PathBuf>,
        /// Write the oracle table needed by `--table` to this file.
        #[arg(long, requires = "hidden")]
        tabulate: Option<PathBuf>,
        /// Write the recovered chain file here.
        #[arg(long)]
        chain_out: Option<PathBuf>,
    },
    /// Simulate trajectories and report the empirical pair.
    Simulate {
        chain: PathBuf,
        /// Horizon T.
        #[arg(long = "t")]
        horizon: f64,
        #[arg(long, default_value_t = 1)]
        replicas: usize,
        /// Initial state; stationary draws when absent.
        #[arg(long)]
        start: Option<String>,
        /// Per-replica CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct MeasureArg {
    /// Measure as comma-separated weights in state order.
    #[arg(long)]
    pub mu: Option<String>,
    /// Measure file.
    #[arg(long)]
    pub measure: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CandidateArg {
    ConditionedMixture,
    Harmonic,
}

impl From<CandidateArg> for Candidate {
    fn from(c: CandidateArg) -> Self {
        match c {
            CandidateArg::ConditionedMixture => Candidate::ConditionedMixture,
            CandidateArg::Harmonic => Candidate::Harmonic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RecoverMode {
    Dv,
    Bfg,
}

impl RunConfig {
    pub fn grid(&self) -> Result<NGrid> {
        NGrid::parse(&self.n_grid)
    }

    /// Reject non-positive tolerances before any work starts.
    pub fn validate(&self) -> Result<()> {
        let t = &self.tolerances;
        for (name, v) in [
            ("gradient-tolerance", t.gradient_tolerance),
            ("kkt-tolerance", t.kkt_tolerance),
            ("fit-residual", t.fit_residual),
            ("vanishing-exponent", t.vanishing_exponent),
            ("exponent-margin", t.exponent_margin),
            ("recovery-tolerance", t.recovery_tolerance),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("--{name} must be positive, got {v}")));
            }
        }
        if t.max_iterations == 0 {
            return Err(Error::InvalidArgument("--max-iterations must be positive".into()));
        }
        self.grid()?;
        Precision::from_bits(self.precision_bits)?;
        Ok(())
    }

    pub fn dv_options(&self) -> DvOptions {
        DvOptions {
            max_iterations: self.tolerances.max_iterations,
            gradient_tolerance: self.tolerances.gradient_tolerance,
            kkt_tolerance: self.tolerances.kkt_tolerance,
        }
    }

    pub fn hierarchy_options(&self) -> Result<HierarchyOptions> {
        Ok(HierarchyOptions {
            grid: self.grid()?,
            precision: Precision::from_bits(self.precision_bits)?,
            fit_residual: self.tolerances.fit_residual,
            vanishing_exponent: self.tolerances.vanishing_exponent,
            exponent_margin: self.tolerances.exponent_margin,
        })
    }
}
