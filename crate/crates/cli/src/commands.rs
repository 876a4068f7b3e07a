use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use cage_core::decode::{self, DecodeOptions, LogitRecord, Selection};
use cage_core::diagnostics::{self, RegretReport, StabilityReport};
use cage_core::game::{GameInstance, PolicySimplex, PreferenceWeights, RewardVector};
use cage_core::jacobi::{self, EquilibriumStatus, StationarityReport};
use cage_core::metrics::{ParetoPoint, ReferencePoint};
use cage_core::potential::{self, ObjectiveMode, SurplusObjective};
use cage_core::principal::{self, ActivePattern};
use cage_core::sweep::{self, PreferenceGrid};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{self, Metadata};

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    tau: f64,
    pi0: Vec<f64>,
    weights: Vec<f64>,
    rewards: Vec<Vec<f64>>,
}

/// Parses an instance file. Syntax problems are parse errors; a valid file
/// describing an invalid game keeps the library's error class, so an empty
/// incentive box reports as infeasible.
pub fn read_instance(path: &Path, tau: Option<f64>) -> Result<GameInstance, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    let f: InstanceFile = serde_json::from_str(&text).map_err(|e| {
        CliError::Parse(format!(
            "{}:{}:{}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    let rewards = f
        .rewards
        .into_iter()
        .map(RewardVector::new)
        .collect::<Result<Vec<_>, _>>()?;
    let g = GameInstance::new(
        PolicySimplex::normalized(f.pi0, 1e-9)?,
        rewards,
        PreferenceWeights::new(f.weights)?,
        tau.unwrap_or(f.tau),
    )?;
    Ok(g)
}

fn inf_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[derive(Debug, Serialize)]
pub struct SolveReport {
    pub status: EquilibriumStatus,
    pub converged: bool,
    pub rounds: usize,
    pub final_step: f64,
    pub final_policy_change: f64,
    pub policy: Vec<f64>,
    pub incentives: Vec<Vec<f64>>,
    pub aggregate: Vec<f64>,
    pub active_patterns: Vec<ActivePattern>,
    pub stationarity: StationarityReport,
    pub min_ir_value: f64,
    pub ir_violations: usize,
    pub unconverged_subproblems: usize,
}

pub fn solve(
    cfg: &RunConfig,
    instance: &Path,
    out: Option<&Path>,
    trace_csv: Option<&Path>,
) -> Result<(), CliError> {
    let g = read_instance(instance, cfg.tau)?;
    let mut opts = cfg.jacobi;
    opts.record_trace = trace_csv.is_some();
    let r = jacobi::solve_from_zero(&g, &opts)?;
    let report = SolveReport {
        status: r.status,
        converged: r.converged,
        rounds: r.rounds,
        final_step: r.final_step,
        final_policy_change: r.final_policy_change,
        policy: r.policy.probs().to_vec(),
        incentives: r.incentives.per_principal().iter().map(|v| v.0.clone()).collect(),
        aggregate: r.incentives.aggregate().to_vec(),
        active_patterns: (0..g.num_principals())
            .map(|j| principal::active_pattern(r.incentives.principal(j), &g, j))
            .collect::<Result<_, _>>()?,
        stationarity: jacobi::check_stationarity(&r, &g, jacobi::STATIONARITY_TOL)?,
        min_ir_value: r.min_ir_value,
        ir_violations: r.ir_violations,
        unconverged_subproblems: r.unconverged_subproblems,
    };
    let meta = Metadata::new("solve", cfg, json!({ "instance": instance }));
    output::emit_json(out, &meta, &report)?;

    if let (Some(path), Some(trace)) = (trace_csv, r.trace.as_ref()) {
        let (n, nj) = (g.num_candidates(), g.num_principals());
        let mut w = output::csv_writer(path, &meta)?;
        let mut header = vec!["round".to_string(), "max_step".into(), "policy_change".into()];
        header.extend((0..n).map(|i| format!("pi_{i}")));
        header.extend((0..nj).flat_map(|j| (0..n).map(move |i| format!("y{j}_{i}"))));
        w.write_record(&header)?;
        for rec in trace {
            let mut row = vec![
                rec.round.to_string(),
                rec.max_step().to_string(),
                rec.policy_change.to_string(),
            ];
            row.extend(rec.policy.iter().map(f64::to_string));
            row.extend(rec.incentives.iter().flatten().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
    }

    if !r.converged {
        return Err(CliError::NoEquilibrium(format!(
            "stopped after {} rounds with step {:.3e}; last iterate written",
            r.rounds, r.final_step
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, clap::Args)]
pub struct StreamArgs {
    /// JSONL logit stream, one record per line.
    #[arg(long, conflicts_with = "synth")]
    pub stream: Option<PathBuf>,
    /// Use a synthetic stream (seeded by --seed) instead of a file.
    #[arg(long)]
    pub synth: bool,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 50)]
    pub candidates: usize,
    #[arg(long, default_value_t = 2)]
    pub objectives: usize,
    /// Latent correlation between objective scores, in [-1, 1].
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub correlation: f64,
}

impl StreamArgs {
    pub fn load(&self, seed: u64) -> Result<(Vec<LogitRecord>, serde_json::Value), CliError> {
        match (&self.stream, self.synth) {
            (Some(p), _) => {
                let f = File::open(p).map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?;
                let recs = decode::read_jsonl(BufReader::new(f))
                    .map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?;
                Ok((recs, json!({ "stream": p })))
            }
            (None, true) => {
                let recs = decode::synth_stream(self.steps, self.candidates, self.objectives, self.correlation, seed)?;
                let inputs = json!({ "synth": {
                    "steps": self.steps,
                    "candidates": self.candidates,
                    "objectives": self.objectives,
                    "correlation": self.correlation,
                    "seed": seed,
                }});
                Ok((recs, inputs))
            }
            (None, false) => Err(CliError::Usage("give --stream FILE or --synth".into())),
        }
    }
}

pub fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("not a number: {t:?} in {s:?}")))
        })
        .collect()
}

pub fn synth(cfg: &RunConfig, args: &StreamArgs, out: Option<&Path>) -> Result<(), CliError> {
    let recs = decode::synth_stream(args.steps, args.candidates, args.objectives, args.correlation, cfg.seed)?;
    match out {
        Some(p) => decode::write_jsonl(std::io::BufWriter::new(File::create(p)?), &recs)?,
        None => decode::write_jsonl(std::io::stdout().lock(), &recs)?,
    }
    Ok(())
}

fn decode_options(cfg: &RunConfig, sample: bool) -> DecodeOptions {
    let mut o = cfg.decode;
    if sample {
        o.selection = Selection::Sample { seed: cfg.seed };
    }
    o
}

pub fn decode_cmd(
    cfg: &RunConfig,
    stream: &StreamArgs,
    weights: &str,
    sample: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (records, mut inputs) = stream.load(cfg.seed)?;
    let w = PreferenceWeights::new(parse_list(weights)?)?;
    let opts = decode_options(cfg, sample);
    let outcome = decode::decode_stream(&records, &w, &opts)?;
    inputs["weights"] = json!(w.values());
    inputs["selection"] = json!(opts.selection);
    let meta = Metadata::new("decode", cfg, inputs);
    output::emit_json(out, &meta, &outcome)
}

pub fn parse_grid(spec: &str) -> Result<PreferenceGrid, CliError> {
    match spec {
        "help2d" => Ok(PreferenceGrid::Help2d),
        "simplex31" => Ok(PreferenceGrid::Simplex31),
        _ => match spec.strip_prefix("file:") {
            Some(p) => {
                let rows = read_numeric_csv(Path::new(p))?;
                if rows.is_empty() {
                    return Err(CliError::Parse(format!("{p}: no grid rows")));
                }
                Ok(PreferenceGrid::Custom(rows))
            }
            None => Err(CliError::Usage(format!(
                "unknown grid {spec:?}; use help2d, simplex31 or file:PATH"
            ))),
        },
    }
}

/// Numeric CSV rows; `#` lines and a leading non-numeric header are skipped.
fn read_numeric_csv(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => {
                let line = rec.position().map_or(0, |p| p.line());
                return Err(CliError::Parse(format!("{}:{line}: {e}", path.display())));
            }
        }
    }
    if let Some(r) = rows.iter().find(|r| r.len() != rows[0].len()) {
        return Err(CliError::Parse(format!(
            "{}: rows of length {} and {}",
            path.display(),
            rows[0].len(),
            r.len()
        )));
    }
    Ok(rows)
}

#[derive(Debug, Clone, clap::Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub stream: StreamArgs,
    /// Score precomputed (preference, reward) rows instead of decoding.
    #[arg(long, conflicts_with_all = ["stream", "synth"])]
    pub points: Option<PathBuf>,
    /// help2d, simplex31 or file:PATH (default by objective count).
    #[arg(long)]
    pub grid: Option<String>,
    /// Hypervolume reference point, e.g. "0,0".
    #[arg(long, allow_hyphen_values = true)]
    pub r#ref: Option<String>,
    /// Report hypervolume (needs --ref).
    #[arg(long)]
    pub hv: bool,
    /// Per-preference CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pareto-front CSV.
    #[arg(long)]
    pub pf_out: Option<PathBuf>,
    /// Summary JSON (stdout otherwise).
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SweepReport<'a> {
    grid: &'a str,
    rows: usize,
    hypervolume: Option<f64>,
    reference: Option<&'a [f64]>,
    mean_inner_product: f64,
    pareto_front: &'a [Vec<f64>],
    /// Rewards are per-objective sums of raw log-ratio rewards of the
    /// chosen tokens, not reward-model scores.
    proxy_rewards: bool,
}

pub fn sweep_cmd(cfg: &RunConfig, a: &SweepArgs) -> Result<(), CliError> {
    let reference = match (&a.r#ref, a.hv) {
        (Some(r), _) => Some(ReferencePoint::new(parse_list(r)?)?),
        (None, true) => return Err(CliError::Usage("--hv needs --ref".into())),
        (None, false) => None,
    };

    let (points, inputs, grid_name, proxy): (Vec<ParetoPoint>, serde_json::Value, String, bool) =
        if let Some(p) = &a.points {
            let rows = read_numeric_csv(p)?;
            let pts = rows
                .iter()
                .map(|r| {
                    if r.len() % 2 != 0 {
                        return Err(CliError::Parse(format!("{}: odd column count", p.display())));
                    }
                    let d = r.len() / 2;
                    Ok(ParetoPoint::new(r[..d].to_vec(), r[d..].to_vec())?)
                })
                .collect::<Result<Vec<_>, _>>()?;
            (pts, json!({ "points": p }), "points".into(), false)
        } else {
            let (records, inputs) = a.stream.load(cfg.seed)?;
            let j = records.first().map_or(a.stream.objectives, LogitRecord::num_objectives);
            let grid = match &a.grid {
                Some(s) => parse_grid(s)?,
                None => match j {
                    2 => PreferenceGrid::Help2d,
                    3 => PreferenceGrid::Simplex31,
                    _ => return Err(CliError::Usage(format!("no built-in grid for {j} objectives; pass --grid"))),
                },
            };
            if grid.dimension() != Some(j) {
                return Err(CliError::Usage(format!(
                    "grid {} has dimension {:?}, stream has {j} objectives",
                    grid.name(),
                    grid.dimension()
                )));
            }
            let rows = grid.rows();
            let opts = cfg.decode;
            let run = || sweep::run_sweep(&records, &rows, &opts, None);
            let summary = match cfg.jobs {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| CliError::Io(e.to_string()))?
                    .install(run)?,
                None => run()?,
            };
            let meta = Metadata::new("sweep", cfg, inputs.clone());
            if let Some(out) = &a.out {
                let mut w = output::csv_writer(out, &meta)?;
                let mut header: Vec<String> = (1..=j).map(|k| format!("w_{k}")).collect();
                header.extend((1..=j).map(|k| format!("proxy_{k}")));
                header.extend(["converged_frac".to_string(), "tokens".into()]);
                w.write_record(&header)?;
                for r in &summary.rows {
                    let mut row: Vec<String> = r.preference.iter().map(f64::to_string).collect();
                    row.extend(r.proxy_totals.iter().map(f64::to_string));
                    row.push(r.converged_fraction.to_string());
                    row.push(r.tokens.to_string());
                    w.write_record(&row)?;
                }
                w.flush()?;
            }
            let pts = summary
                .rows
                .iter()
                .map(|r| ParetoPoint::new(r.preference.clone(), r.proxy_totals.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            (pts, inputs, grid.name().to_string(), true)
        };

    let (front, hv, mip) = sweep::summarize(&points, reference.as_ref())?;
    let meta = Metadata::new("sweep", cfg, inputs);
    if let Some(pf) = &a.pf_out {
        let d = points.first().map_or(0, |p| p.reward.len());
        let mut w = output::csv_writer(pf, &meta)?;
        let prefix = if proxy { "proxy" } else { "r" };
        w.write_record((1..=d).map(|k| format!("{prefix}_{k}")))?;
        for p in &front {
            w.write_record(p.iter().map(f64::to_string))?;
        }
        w.flush()?;
    }
    let report = SweepReport {
        grid: &grid_name,
        rows: points.len(),
        hypervolume: hv,
        reference: reference.as_ref().map(|r| r.z.as_slice()),
        mean_inner_product: mip,
        pareto_front: &front,
        proxy_rewards: proxy,
    };
    output::emit_json(a.summary.as_deref(), &meta, &report)
}

#[derive(Debug, Serialize)]
struct DiagnoseReport {
    converged: bool,
    rounds: usize,
    lipschitz: f64,
    regret: RegretReport,
    /// Absent when the unperturbed game has no equilibrium to probe around.
    stability: Option<StabilityReport>,
}

pub fn diagnose(
    cfg: &RunConfig,
    instance: &Path,
    out: Option<&Path>,
    regret_csv: Option<&Path>,
) -> Result<(), CliError> {
    let g = read_instance(instance, cfg.tau)?;
    let mut opts = cfg.jacobi;
    opts.record_trace = true;
    let r = jacobi::solve_from_zero(&g, &opts)?;
    let regret = diagnostics::regret_trace(&g, &r, &opts.solver)?;
    let stability = if r.converged {
        Some(diagnostics::stability_probe(
            &g,
            cfg.diagnose.delta,
            cfg.diagnose.probes,
            cfg.seed,
            &opts,
        )?)
    } else {
        None
    };
    let meta = Metadata::new("diagnose", cfg, json!({ "instance": instance }));
    if let Some(path) = regret_csv {
        let mut w = output::csv_writer(path, &meta)?;
        w.write_record(["principal", "horizon", "regret", "bound", "a_t"])?;
        for p in &regret.principals {
            for (t, (reg, b)) in p.cumulative.iter().zip(&p.bound).enumerate() {
                w.write_record([
                    p.principal.to_string(),
                    (t + 1).to_string(),
                    reg.to_string(),
                    b.to_string(),
                    regret.deviation_proxies[t + 1].to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    let report = DiagnoseReport {
        converged: r.converged,
        rounds: r.rounds,
        lipschitz: regret.lipschitz,
        regret,
        stability,
    };
    output::emit_json(out, &meta, &report)?;
    if !r.converged {
        return Err(CliError::NoEquilibrium(format!("stopped after {} rounds", r.rounds)));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct OracleEntry {
    method: String,
    policy: Option<Vec<f64>>,
    note: Option<String>,
}

#[derive(Debug, Serialize)]
struct OracleReport {
    entries: Vec<OracleEntry>,
    /// `gaps[a][b]` is the infinity-norm policy gap between entries a and b.
    gaps: Vec<Vec<Option<f64>>>,
}

pub fn oracle(cfg: &RunConfig, instance: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let g = read_instance(instance, cfg.tau)?;
    let r = jacobi::solve_from_zero(&g, &cfg.jacobi)?;
    let mut entries = vec![OracleEntry {
        method: "jacobi".into(),
        policy: Some(r.policy.probs().to_vec()),
        note: (!r.converged).then(|| format!("no equilibrium after {} rounds", r.rounds)),
    }];
    for (name, mode) in [
        ("aggregate_surplus", ObjectiveMode::AggregateSurplus),
        ("user_reg", ObjectiveMode::UserReg),
    ] {
        let m = potential::maximize_policy_objective(&g, &SurplusObjective::new(mode))?;
        entries.push(OracleEntry {
            method: name.into(),
            policy: Some(m.policy.probs().to_vec()),
            note: None,
        });
    }
    let bf = match potential::brute_force_equilibrium(&g, cfg.oracle.grid_step, cfg.oracle.improve_tol) {
        Ok(b) => OracleEntry {
            method: "brute_force".into(),
            policy: Some(b.policy.probs().to_vec()),
            note: (!b.certified).then(|| {
                format!("grid deviation {:.3e} by principal {}", b.worst_deviation, b.worst_principal)
            }),
        },
        Err(e) => OracleEntry { method: "brute_force".into(), policy: None, note: Some(e.to_string()) },
    };
    entries.push(bf);
    let gaps = entries
        .iter()
        .map(|a| {
            entries
                .iter()
                .map(|b| match (&a.policy, &b.policy) {
                    (Some(x), Some(y)) => Some(inf_gap(x, y)),
                    _ => None,
                })
                .collect()
        })
        .collect();
    let report = OracleReport { entries, gaps };
    let meta = Metadata::new("oracle", cfg, json!({ "instance": instance }));
    output::emit_json(out, &meta, &report)?;
    if out.is_some() {
        print!("{:<18}", "");
        for e in &report.entries {
            print!("{:>18}", e.method);
        }
        println!();
        for (e, row) in report.entries.iter().zip(&report.gaps) {
            print!("{:<18}", e.method);
            for v in row {
                match v {
                    Some(x) => print!("{x:>18.3e}"),
                    None => print!("{:>18}", "-"),
                }
            }
            println!();
        }
    }
    if !r.converged {
        return Err(CliError::NoEquilibrium(format!("jacobi stopped after {} rounds", r.rounds)));
    }
    Ok(())
}
