//! Subcommand implementations. Each returns a [`Report`]; printing and file
//! output are handled by the caller.

use crate::config::{Command, MeasureArg, RecoverMode, RunConfig};
use ldmc_core::calculus::{self, SignedMeasure};
use ldmc_core::gamma::gamma_probe_level_p;
use ldmc_core::hierarchy::build_tree;
use ldmc_core::identify::{
    recover_from_bfg, recover_holding_and_products, recover_reversible, ChainBfgOracle, ChainDvOracle, Recovery,
    TableOracle,
};
use ldmc_core::io::{self, flow_to_json, vector_to_json};
use ldmc_core::rate::{bfg_rate, dv_projection_solve, tilt_solve};
use ldmc_core::sim::{empirical_pair, sample_replicas};
use ldmc_core::{ChainSpec, Error, Flow, ParamChainSpec, ProbabilityVector, Result};
use serde_json::{json, Value};
use std::path::Path;

/// What a subcommand produced.
pub struct Report {
    /// Machine-readable document.
    pub json: Value,
    /// Plot-ready table; when present it is the default machine output.
    pub csv: Option<String>,
    /// Set when the run finished but a result check failed.
    pub failure: Option<Error>,
}

impl Report {
    fn json(json: Value) -> Self {
        Report { json, csv: None, failure: None }
    }
}

pub fn run(config: &RunConfig) -> Result<Report> {
    config.validate()?;
    match &config.command {
        Command::Analyze { chain } => analyze(config, chain),
        Command::Rate { chain, measure, flow } => rate(config, chain, measure, flow.as_deref()),
        Command::Gamma { chain, level, omega, candidate } => gamma(config, chain, *level, omega, (*candidate).into()),
        Command::Deriv { chain, measure, directions, function } => {
            deriv(chain, measure, directions, function.as_deref())
        }
        Command::Recover { mode, hidden, table, tabulate, chain_out } => recover(
            config,
            *mode,
            hidden.as_deref(),
            table.as_deref(),
            tabulate.as_deref(),
            chain_out.as_deref(),
        ),
        Command::Simulate { chain, horizon, replicas, start, csv } => {
            simulate(config, chain, *horizon, *replicas, start.as_deref(), csv.as_deref())
        }
    }
}

fn read_measure(arg: &MeasureArg, states: &[String]) -> Result<ProbabilityVector> {
    match (&arg.mu, &arg.measure) {
        (Some(list), _) => {
            let w = io::parse_list(list)?;
            if w.len() != states.len() {
                return Err(Error::InvalidArgument(format!("--mu has {} entries for {} states", w.len(), states.len())));
            }
            ProbabilityVector::new(w)
        }
        (None, Some(path)) => io::read_measure(path, states),
        (None, None) => Err(Error::InvalidArgument("a measure is required".into())),
    }
}

fn analyze(config: &RunConfig, path: &Path) -> Result<Report> {
    let family = io::read_family(path)?;
    let tree = build_tree(&family, &config.hierarchy_options()?)?;
    Ok(Report::json(tree.to_json()))
}

fn rate(config: &RunConfig, path: &Path, measure: &MeasureArg, flow: Option<&Path>) -> Result<Report> {
    let chain = io::read_chain(path)?;
    let states = chain.states();
    let mu = read_measure(measure, states)?;
    let opts = config.dv_options();
    let projection = dv_projection_solve(&chain, &mu, &opts)?;
    // The tilt exists only for strictly positive measures on irreducible chains.
    let tilt = if mu.first_zero().is_none() && chain.is_irreducible() {
        let sol = tilt_solve(&chain, &mu, &opts)?;
        Some(json!({
            "values": vector_to_json(sol.tilt.values(), states),
            "value": sol.value,
            "iterations": sol.iterations,
            "gradient_norm": sol.gradient_norm,
        }))
    } else {
        None
    };
    let bfg = match flow {
        Some(p) => Some(bfg_rate(&chain, &mu, &io::read_flow(p, &chain)?)?),
        None => None,
    };
    Ok(Report::json(json!({
        "states": states,
        "mu": vector_to_json(mu.weights(), states),
        "dv": projection.value,
        "bfg": bfg,
        "tilt": tilt,
        "optimal_current": flow_to_json(&projection.current, states),
        "kkt_residual": projection.kkt_residual,
    })))
}

fn gamma(
    config: &RunConfig,
    path: &Path,
    level: usize,
    omega: &str,
    candidate: ldmc_core::gamma::Candidate,
) -> Result<Report> {
    let family = io::read_family(path)?;
    let opts = config.hierarchy_options()?;
    let tree = build_tree(&family, &opts)?;
    let omega = ProbabilityVector::new(io::parse_list(omega)?)?;
    let report = gamma_probe_level_p(&family, &tree, level, &omega, &opts.grid, candidate)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::Io(e.to_string());
    csv.write_record(["n", "theta_n", "value", "target"]).map_err(io_err)?;
    for row in &report.rows {
        csv.serialize((row.n, row.theta, row.value, report.target)).map_err(io_err)?;
    }
    let table = String::from_utf8(csv.into_inner().map_err(|e| Error::Io(e.to_string()))?).expect("utf-8 csv");
    let json = serde_json::to_value(&report).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(Report { json, csv: Some(table), failure: None })
}

fn read_direction(path: &Path, states: &[String]) -> Result<SignedMeasure> {
    SignedMeasure::new(io::read_vector(path, states)?)
}

fn deriv(path: &Path, measure: &MeasureArg, directions: &[std::path::PathBuf], function: Option<&Path>) -> Result<Report> {
    let chain = io::read_chain(path)?;
    let states = chain.states();
    let mu = read_measure(measure, states)?;
    if directions.len() > 2 {
        return Err(Error::InvalidArgument("at most two directions".into()));
    }
    let nus: Vec<SignedMeasure> = directions.iter().map(|p| read_direction(p, states)).collect::<Result<_>>()?;
    let mut first = Vec::new();
    for nu in &nus {
        let check = calculus::check_first_derivative(&chain, &mu, nu)?;
        let dh = calculus::tilt_derivative(&chain, &mu, nu)?;
        let dh_gap = calculus::check_tilt_derivative(&chain, &mu, nu)?;
        let legendre = calculus::legendre_check(&chain, nu)?;
        first.push(json!({
            "derivative": check,
            "tilt_derivative": vector_to_json(dh.values(), states),
            "tilt_derivative_fd_distance": dh_gap,
            "legendre": legendre,
        }));
    }
    let second = match nus.as_slice() {
        [a, b] => Some(calculus::check_second_derivative(&chain, &mu, a, b)?),
        [a] => Some(calculus::check_second_derivative(&chain, &mu, a, a)?),
        _ => None,
    };
    let variance = match function {
        Some(p) => Some(calculus::asymptotic_variance(&chain, &io::read_vector(p, states)?)?),
        None => None,
    };
    Ok(Report::json(json!({
        "states": states,
        "mu": vector_to_json(mu.weights(), states),
        "dv": ldmc_core::rate::dv_rate(&chain, &mu)?,
        "directions": first,
        "second_derivative": second,
        "asymptotic_variance": variance,
    })))
}

fn recovery_json(recovery: &Recovery, hidden: &ChainSpec, tol: f64) -> Value {
    let states = recovery.chain.states();
    let names = |c: &Vec<usize>| c.iter().map(|&x| states[x].clone()).collect::<Vec<_>>();
    json!({
        "rates": recovery.chain.edges().iter()
            .map(|e| json!({"from": states[e.from], "to": states[e.to], "rate": e.rate}))
            .collect::<Vec<_>>(),
        "classes": recovery.classes.iter().map(names).collect::<Vec<_>>(),
        "holding_mismatch": recovery.holding_mismatch,
        "oracle_mismatch": recovery.oracle_mismatch,
        "consistent": recovery.consistent(tol),
        "max_relative_error": recovery.max_relative_error(hidden),
        "oracle_calls": recovery.oracle_calls,
        "notes": recovery.notes,
    })
}

fn recover(
    config: &RunConfig,
    mode: RecoverMode,
    hidden: Option<&Path>,
    table: Option<&Path>,
    tabulate: Option<&Path>,
    chain_out: Option<&Path>,
) -> Result<Report> {
    let tol = config.tolerances.recovery_tolerance;
    if let Some(path) = table {
        if mode == RecoverMode::Bfg {
            return Err(Error::InvalidArgument("oracle tables hold DV values; use --mode dv".into()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let oracle: TableOracle = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let hp = recover_holding_and_products(&oracle)?;
        let s = &oracle.states;
        let products: Vec<Value> = hp
            .products
            .iter()
            .map(|(&(x, y), &v)| json!({"from": s[x], "to": s[y], "product": v}))
            .collect();
        return Ok(Report::json(json!({
            "mode": "dv",
            "states": s,
            "holding": vector_to_json(&hp.holding, s),
            "products": products,
            "notes": ["a table answers the holding-rate and product queries only"],
        })));
    }
    let hidden_chain = io::read_chain(hidden.expect("clap requires --hidden or --table"))?;
    let states = hidden_chain.states().to_vec();
    if let Some(out) = tabulate {
        let table = TableOracle::tabulate_products(&ChainDvOracle::new(hidden_chain.clone()), &states)?;
        let text = serde_json::to_string_pretty(&table).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(out, text).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    }
    let recovery = match mode {
        RecoverMode::Dv => recover_reversible(&ChainDvOracle::new(hidden_chain.clone()), &states)?,
        RecoverMode::Bfg => recover_from_bfg(&ChainBfgOracle::new(hidden_chain.clone()), &states)?,
    };
    if let Some(out) = chain_out {
        io::write_family(&ParamChainSpec::constant(&recovery.chain), out)?;
    }
    let mut body = recovery_json(&recovery, &hidden_chain, tol);
    body["mode"] = json!(match mode {
        RecoverMode::Dv => "dv",
        RecoverMode::Bfg => "bfg",
    });
    let failure = (!recovery.consistent(tol))
        .then(|| Error::InconsistentRecovery(recovery.holding_mismatch.max(recovery.oracle_mismatch)));
    Ok(Report { json: body, csv: None, failure })
}

fn simulate(
    config: &RunConfig,
    path: &Path,
    horizon: f64,
    replicas: usize,
    start: Option<&str>,
    csv_path: Option<&Path>,
) -> Result<Report> {
    if replicas == 0 {
        return Err(Error::InvalidArgument("--replicas must be positive".into()));
    }
    let chain = io::read_chain(path)?;
    let states = chain.states();
    let x0 = start.map(|s| chain.state_index(s)).transpose()?;
    let paths = sample_replicas(&chain, x0, horizon, replicas, config.seed)?;
    let pairs: Vec<(ProbabilityVector, Flow)> = paths.iter().map(empirical_pair).collect::<Result<_>>()?;

    let r = replicas as f64;
    let n = chain.n_states();
    let mut mean_l = vec![0.0; n];
    let mut mean_q = vec![0.0; chain.edges().len()];
    for (l, q) in &pairs {
        for (m, w) in mean_l.iter_mut().zip(l.weights()) {
            *m += w / r;
        }
        for (m, e) in mean_q.iter_mut().zip(chain.edges()) {
            *m += q.value(e.from, e.to) / r;
        }
    }
    let spread = |values: &dyn Fn(&(ProbabilityVector, Flow)) -> f64, mean: f64| -> Option<f64> {
        (replicas > 1).then(|| {
            let var = pairs.iter().map(|p| (values(p) - mean).powi(2)).sum::<f64>() / (r - 1.0);
            (var / r).sqrt()
        })
    };
    let l_se: Vec<Option<f64>> = (0..n).map(|x| spread(&|p| p.0.weights()[x], mean_l[x])).collect();
    let q_records: Vec<Value> = chain
        .edges()
        .iter()
        .zip(&mean_q)
        .map(|(e, &v)| {
            json!({
                "from": states[e.from],
                "to": states[e.to],
                "value": v,
                "standard_error": spread(&|p| p.1.value(e.from, e.to), v),
            })
        })
        .collect();

    if let Some(out) = csv_path {
        let mut w = csv::Writer::from_path(out).map_err(|e| Error::Io(e.to_string()))?;
        let io_err = |e: csv::Error| Error::Io(e.to_string());
        let mut header = vec!["replica".to_string(), "initial".into(), "jumps".into()];
        header.extend(states.iter().map(|s| format!("L:{s}")));
        header.extend(chain.edges().iter().map(|e| format!("Q:{}->{}", states[e.from], states[e.to])));
        w.write_record(&header).map_err(io_err)?;
        for (k, (p, (l, q))) in paths.iter().zip(&pairs).enumerate() {
            let mut row = vec![k.to_string(), states[p.initial].clone(), p.jumps.len().to_string()];
            row.extend(l.weights().iter().map(|v| v.to_string()));
            row.extend(chain.edges().iter().map(|e| q.value(e.from, e.to).to_string()));
            w.write_record(&row).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))?;
    }

    Ok(Report::json(json!({
        "states": states,
        "horizon": horizon,
        "replicas": replicas,
        "seed": config.seed,
        "measure": vector_to_json(&mean_l, states),
        "measure_standard_error": if replicas > 1 {
            vector_to_json(&l_se.iter().map(|v| v.unwrap_or(0.0)).collect::<Vec<_>>(), states)
        } else {
            Value::Null
        },
        "current": q_records,
    })))
}

