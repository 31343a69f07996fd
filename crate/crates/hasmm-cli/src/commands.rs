//! Subcommand implementations: file plumbing around the library calls.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Gamma};

use hasmm::eval::{
    ks_statistic, oracle_ctmc, oracle_enumerate, roc_curve, sweep_detections, timeliness_at_tpr,
    ScoredEpisode,
};
use hasmm::filter::{forward_messages, state_posterior, stream_filter};
use hasmm::generate::{generate_dataset, substream_rng, Episode};
use hasmm::io::{
    read_episodes_file, read_scored, write_episodes_file, write_scored, write_snapshots,
    Provenance, SnapshotRecord,
};
use hasmm::learn::{bic_select, canonicalize, ffbs_mcem, tr_sampler, EmIterate, McemConfig};
use hasmm::volterra::{
    auto_grid_with, build_table_with, load_table_for, BuildOptions, TransitionTable,
};
use hasmm::{Error, GammaSojourn, GpHyper, ParameterSet, Result};

use crate::{BuildTableArgs, EvaluateArgs, FilterArgs, GenerateArgs, LearnArgs};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Parameter file wrapper; the provenance key is optional on read so bare
/// `ParameterSet` documents are accepted too.
#[derive(Serialize, Deserialize)]
struct ParamsFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    _provenance: Option<Provenance>,
    params: ParameterSet,
}

fn read_params(path: &Path) -> Result<ParameterSet> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedFile(format!("{}: {e}", path.display())))?;
    let params: ParameterSet = if value.get("params").is_some() {
        serde_json::from_value::<ParamsFile>(value)
            .map_err(|e| Error::MalformedFile(format!("{}: {e}", path.display())))?
            .params
    } else {
        serde_json::from_value(value)
            .map_err(|e| Error::MalformedFile(format!("{}: {e}", path.display())))?
    };
    params.validate()?;
    Ok(params)
}

fn write_params(path: &Path, params: &ParameterSet, provenance: Provenance) -> Result<()> {
    let file = ParamsFile { _provenance: Some(provenance), params: params.clone() };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Short digest of the resolved options; serde_json maps are sorted by key,
/// so the hash is stable across runs.
fn config_hash(subcommand: &str, options: serde_json::Value) -> String {
    let doc = serde_json::json!({ "subcommand": subcommand, "options": options });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads an explicit table (strict), or builds one beside the parameter file
/// and reuses it until the parameters change.
fn resolve_table(
    params: &ParameterSet,
    params_path: &Path,
    explicit: Option<&Path>,
    grid_dt: f64,
) -> Result<TransitionTable> {
    if let Some(path) = explicit {
        return load_table_for(path, params);
    }
    let cache = params_path.with_extension("table.bin");
    if cache.exists() {
        match load_table_for(&cache, params) {
            Ok(table) => return Ok(table),
            Err(Error::FingerprintMismatch { .. }) => {
                log::warn!(
                    "cached table {} does not match the parameters; rebuilding",
                    cache.display()
                );
            }
            Err(err) => return Err(err),
        }
    }
    let opts = BuildOptions::default();
    let grid = auto_grid_with(params, grid_dt, &opts)?;
    let table = build_table_with(params, &grid, &opts)?;
    table.save(&cache)?;
    log::info!("built transition table and cached it at {}", cache.display());
    Ok(table)
}

fn write_trace_csv(
    path: &Path,
    trace: &[EmIterate],
    provenance: &Provenance,
    deterministic: bool,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (key, value) in provenance.comment_pairs() {
        writeln!(w, "# {key}={value}")?;
    }
    writeln!(w, "iter,q_hat,est_loglik,min_ess,wall_time_s")?;
    for row in trace {
        let wall = if deterministic { 0.0 } else { row.wall_time_s };
        writeln!(w, "{},{},{},{},{}", row.iter, row.q_hat, row.est_loglik, row.min_ess, wall)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Threshold sweep
// ---------------------------------------------------------------------------

/// An inclusive, evenly spaced threshold grid.
#[derive(Debug, Clone, Serialize)]
pub struct Sweep {
    lo: f64,
    hi: f64,
    count: usize,
}

impl Sweep {
    fn thresholds(&self) -> Vec<f64> {
        let span = self.hi - self.lo;
        (0..self.count)
            .map(|k| self.lo + span * k as f64 / (self.count - 1) as f64)
            .collect()
    }
}

pub fn parse_sweep(text: &str) -> std::result::Result<Sweep, String> {
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, count] = parts[..] else {
        return Err("expected lo:hi:count".into());
    };
    let lo: f64 = lo.parse().map_err(|_| "lo is not a number".to_string())?;
    let hi: f64 = hi.parse().map_err(|_| "hi is not a number".to_string())?;
    let count: usize = count.parse().map_err(|_| "count is not an integer".to_string())?;
    if !lo.is_finite() || !hi.is_finite() || hi <= lo {
        return Err("need finite lo < hi".into());
    }
    if count < 2 {
        return Err("need at least two thresholds".into());
    }
    Ok(Sweep { lo, hi, count })
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

pub fn generate(args: GenerateArgs, deterministic: bool) -> Result<()> {
    let params = read_params(&args.params)?;
    let episodes = generate_dataset(&params, args.count, args.seed)?;
    let hash = config_hash(
        "generate",
        serde_json::json!({ "params": args.params, "count": args.count, "seed": args.seed }),
    );
    let provenance = Provenance::new(Some(args.seed), hash, deterministic);
    write_episodes_file(&args.out, &episodes, Some(&provenance))?;
    log::info!("wrote {} episodes to {}", episodes.len(), args.out.display());
    Ok(())
}

pub fn build_table(args: BuildTableArgs) -> Result<()> {
    let params = read_params(&args.params)?;
    let opts = BuildOptions { epsilon: args.epsilon, ..BuildOptions::default() };
    let mut grid = auto_grid_with(&params, args.grid_dt, &opts)?;
    if let Some(a) = args.grid_a {
        grid.a_steps = a;
    }
    if let Some(b) = args.grid_b {
        grid.b_steps = b;
    }
    if let Some(c) = args.grid_c {
        grid.c_steps = c;
    }
    let table = build_table_with(&params, &grid, &opts)?;
    table.save(&args.out)?;
    let d = table.diagnostics;
    if !d.plateau_ok {
        log::warn!("horizon may truncate absorption (plateau {:.2e})", d.plateau);
    }
    println!(
        "{}",
        serde_json::json!({
            "grid": {
                "dt": grid.dt, "a_steps": grid.a_steps,
                "b_steps": grid.b_steps, "c_steps": grid.c_steps,
            },
            "iterations": d.iterations,
            "residual": d.residual,
            "plateau": d.plateau,
            "plateau_ok": d.plateau_ok,
        })
    );
    Ok(())
}

pub fn filter(args: FilterArgs, deterministic: bool) -> Result<()> {
    let (params, episodes, table, hash) = filtering_inputs(&args, "filter")?;
    let per_episode: Result<Vec<Vec<SnapshotRecord>>> = episodes
        .par_iter()
        .map(|ep| {
            let snaps = stream_filter(&params, &table, ep)?;
            Ok(snaps
                .into_iter()
                .map(|s| SnapshotRecord {
                    id: ep.id.clone(),
                    t: s.t,
                    posterior: s.posterior,
                    map_state: s.map_state + 1,
                    risk: s.risk,
                })
                .collect())
        })
        .collect();
    let records: Vec<SnapshotRecord> = per_episode?.into_iter().flatten().collect();
    let provenance = Provenance::new(None, hash, deterministic);
    let file = fs::File::create(&args.out)?;
    write_snapshots(BufWriter::new(file), &records, Some(&provenance))?;
    log::info!("wrote {} snapshots to {}", records.len(), args.out.display());
    Ok(())
}

pub fn score(args: FilterArgs, deterministic: bool) -> Result<()> {
    let (params, episodes, table, hash) = filtering_inputs(&args, "score")?;
    let scored: Result<Vec<ScoredEpisode>> = episodes
        .par_iter()
        .map(|ep| {
            let snaps = stream_filter(&params, &table, ep)?;
            Ok(ScoredEpisode {
                id: ep.id.clone(),
                label: ep.label,
                censor_time: ep.censor_time,
                trace: snaps.into_iter().map(|s| (s.t, s.risk)).collect(),
            })
        })
        .collect();
    let scored = scored?;
    let provenance = Provenance::new(None, hash, deterministic);
    let file = fs::File::create(&args.out)?;
    write_scored(BufWriter::new(file), &scored, Some(&provenance))?;
    log::info!("wrote {} risk traces to {}", scored.len(), args.out.display());
    Ok(())
}

fn filtering_inputs(
    args: &FilterArgs,
    subcommand: &str,
) -> Result<(ParameterSet, Vec<Episode>, TransitionTable, String)> {
    let params = read_params(&args.params)?;
    let (episodes, _) = read_episodes_file(&args.episodes)?;
    for ep in &episodes {
        ep.validate(&params)?;
    }
    let table = resolve_table(&params, &args.params, args.table.as_deref(), args.grid_dt)?;
    let hash = config_hash(
        subcommand,
        serde_json::json!({
            "params": args.params,
            "episodes": args.episodes,
            "table": args.table,
            "grid_dt": args.grid_dt,
        }),
    );
    Ok((params, episodes, table, hash))
}

pub fn learn(args: LearnArgs, deterministic: bool) -> Result<()> {
    let (episodes, _) = read_episodes_file(&args.episodes)?;
    let mut config = McemConfig::new(args.n_states.unwrap_or(0), args.seed);
    config.mc_samples = args.mc_samples;
    config.max_iter = args.max_iter;
    config.epsilon = args.epsilon;
    config.grid_dt = args.grid_dt;
    config.ess_refresh = args.ess_refresh;
    if let Some(path) = &args.initial {
        if args.candidates.is_some() {
            log::warn!("--initial is ignored when sweeping --candidates");
        } else {
            config.initial = Some(read_params(path)?);
        }
    }
    let (fitted, trace) = match &args.candidates {
        Some(candidates) => {
            let (fitted, trace, scored) = bic_select(&episodes, candidates, &config)?;
            for c in &scored {
                log::info!(
                    "candidate {} states: est_loglik {:.4}, bic {:.4}",
                    c.n_states,
                    c.est_loglik,
                    c.bic
                );
            }
            (fitted, trace)
        }
        None => ffbs_mcem(&episodes, &config)?,
    };
    let fitted = canonicalize(&fitted)?;

    let hash = config_hash(
        "learn",
        serde_json::json!({
            "episodes": args.episodes,
            "seed": args.seed,
            "n_states": args.n_states,
            "candidates": args.candidates,
            "mc_samples": args.mc_samples,
            "max_iter": args.max_iter,
            "epsilon": args.epsilon,
            "grid_dt": args.grid_dt,
            "ess_refresh": args.ess_refresh,
            "initial": args.initial,
        }),
    );
    let provenance = Provenance::new(Some(args.seed), hash, deterministic);
    write_params(&args.out, &fitted, provenance.clone())?;
    let trace_path =
        args.trace.clone().unwrap_or_else(|| args.out.with_extension("trace.csv"));
    write_trace_csv(&trace_path, &trace, &provenance, deterministic)?;
    log::info!(
        "fitted {} states over {} iterations; wrote {} and {}",
        fitted.n_states,
        trace.len(),
        args.out.display(),
        trace_path.display()
    );
    Ok(())
}

pub fn evaluate(args: EvaluateArgs, deterministic: bool) -> Result<()> {
    let file = fs::File::open(&args.scores)?;
    let (scored, _) = read_scored(BufReader::new(file))?;
    let sweep = sweep_detections(&scored, &args.threshold_sweep.thresholds());
    let curve = roc_curve(&sweep)?;
    let timeliness = timeliness_at_tpr(&sweep, &curve, 0.5);

    let hash = config_hash(
        "evaluate",
        serde_json::json!({ "scores": args.scores, "threshold_sweep": args.threshold_sweep }),
    );
    let provenance = Provenance::new(None, hash, deterministic);
    let curve_path = args.curve.clone().unwrap_or_else(|| args.out.with_extension("curve.csv"));
    let mut w = BufWriter::new(fs::File::create(&curve_path)?);
    for (key, value) in provenance.comment_pairs() {
        writeln!(w, "# {key}={value}")?;
    }
    writeln!(w, "threshold,tpr,ppv")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.tpr, p.ppv)?;
    }
    drop(w);

    let summary = serde_json::json!({
        "_provenance": provenance,
        "auc": curve.auc,
        "timeliness_at_tpr50": timeliness,
    });
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(&args.out, text)?;
    println!("{}", serde_json::json!({ "auc": curve.auc, "timeliness_at_tpr50": timeliness }));
    Ok(())
}

// ---------------------------------------------------------------------------
// Selftest
// ---------------------------------------------------------------------------

/// Runs the built-in oracle cross-checks and reports one line per check.
pub fn selftest() -> Result<()> {
    let checks: [(&str, fn() -> Result<(f64, f64)>); 3] = [
        ("volterra-vs-matrix-exponential", ctmc_check),
        ("filter-vs-enumeration", enumeration_check),
        ("sojourn-sampler-ks", sampler_check),
    ];
    let mut failures = 0;
    for (name, check) in checks {
        let (statistic, bound) = check()?;
        if statistic <= bound {
            println!("ok {name}: {statistic:.5} <= {bound}");
        } else {
            println!("FAIL {name}: {statistic:.5} > {bound}");
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::InvalidInput(format!("selftest failed {failures} of 3 checks")));
    }
    Ok(())
}

fn gp(mean: f64, sigma: f64, length_scale: f64) -> GpHyper {
    GpHyper {
        mean: vec![mean],
        sigma,
        length_scale,
        task_cov: vec![vec![1.0]],
        jitter: None,
    }
}

/// Three states, exponential sojourns, duration-free transitions: the chain
/// is then an ordinary CTMC and the table must match its matrix exponential.
fn ctmc_check() -> Result<(f64, f64)> {
    let params = ParameterSet {
        n_states: 3,
        sojourn: vec![
            GammaSojourn { shape: 1.0, rate: 0.2 },
            GammaSojourn { shape: 1.0, rate: 0.25 },
            GammaSojourn { shape: 1.0, rate: 0.2 },
        ],
        initial: vec![0.0, 1.0, 0.0],
        eta: vec![vec![0.0; 3], vec![0.4, 0.0, -0.4], vec![0.0; 3]],
        beta: vec![vec![0.0; 3]; 3],
        emission: vec![gp(-2.0, 1.0, 1.0), gp(0.0, 1.0, 1.0), gp(2.0, 1.0, 1.0)],
        zeta: 0.5,
    };
    params.validate()?;
    let opts = BuildOptions::default();
    let grid = auto_grid_with(&params, 0.5, &opts)?;
    let table = build_table_with(&params, &grid, &opts)?;
    let taus = [2.0, 10.0, 30.0];
    let oracle = oracle_ctmc(&params, &taus);
    let mut worst: f64 = 0.0;
    for (k, &tau) in taus.iter().enumerate() {
        for j in 0..3 {
            let ours = table.query(1, j, tau, 0.0, 0.0).value;
            worst = worst.max((ours - oracle[k][(1, j)]).abs());
        }
    }
    Ok((worst, 5e-3))
}

/// Four states with slow memoryless sojourns: exhaustive trajectory
/// enumeration is tractable and the filter posterior must agree with it.
fn enumeration_check() -> Result<(f64, f64)> {
    let params = ParameterSet {
        n_states: 4,
        sojourn: vec![
            GammaSojourn { shape: 1.0, rate: 0.2 },
            GammaSojourn { shape: 1.0, rate: 0.08 },
            GammaSojourn { shape: 1.0, rate: 0.12 },
            GammaSojourn { shape: 1.0, rate: 0.3 },
        ],
        initial: vec![0.0, 0.7, 0.3, 0.0],
        eta: vec![
            vec![0.0; 4],
            vec![0.3, 0.0, 0.8, -0.5],
            vec![-0.4, 0.5, 0.0, 0.6],
            vec![0.0; 4],
        ],
        beta: vec![vec![0.0; 4]; 4],
        emission: vec![
            gp(-3.0, 0.5, 0.3),
            gp(0.0, 0.5, 0.3),
            gp(2.5, 0.5, 0.3),
            gp(5.0, 0.5, 0.3),
        ],
        zeta: 1.0,
    };
    params.validate()?;
    let opts = BuildOptions::default();
    let grid = auto_grid_with(&params, 0.5, &opts)?;
    let table = build_table_with(&params, &grid, &opts)?;
    let times = [2.0, 6.0, 11.0];
    let values = [-0.5, 0.6, 2.0];
    let mut worst: f64 = 0.0;
    for m in 1..=times.len() {
        let episode = Episode {
            id: "selftest".into(),
            times: times[..m].to_vec(),
            values: vec![values[..m].iter().map(|&v| Some(v)).collect()],
            censor_time: f64::INFINITY,
            label: 0,
            truth: None,
        };
        let msgs = forward_messages(&params, &table, &episode)?;
        let ours = state_posterior(&msgs, m);
        let exact = oracle_enumerate(&params, &episode, 0.25)?;
        let tv = 0.5
            * ours
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        worst = worst.max(tv);
    }
    Ok((worst, 0.02))
}

/// Truncated sojourn draws against the truncated Gamma CDF.
fn sampler_check() -> Result<(f64, f64)> {
    let params = ParameterSet {
        n_states: 3,
        sojourn: vec![
            GammaSojourn { shape: 1.0, rate: 0.2 },
            GammaSojourn { shape: 2.2, rate: 0.45 },
            GammaSojourn { shape: 1.0, rate: 0.2 },
        ],
        initial: vec![0.0, 1.0, 0.0],
        eta: vec![vec![0.0; 3], vec![0.0, 0.0, 0.0], vec![0.0; 3]],
        beta: vec![vec![0.0; 3]; 3],
        emission: vec![gp(-2.0, 1.0, 1.0), gp(0.0, 1.0, 1.0), gp(2.0, 1.0, 1.0)],
        zeta: 0.5,
    };
    params.validate()?;
    let s_bar = 6.0;
    let mut rng = substream_rng(991, 0);
    let mut draws: Vec<f64> = (0..20_000)
        .map(|_| tr_sampler(&params, 1, s_bar, &mut rng))
        .collect::<Result<_>>()?;
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let gamma = Gamma::new(2.2, 0.45).expect("valid parameters");
    let mass = gamma.cdf(s_bar);
    let ks = ks_statistic(&draws, |x| gamma.cdf(x) / mass);
    Ok((ks, 0.02))
}
