//! Command-line front end: every library operation exposed as a
//! reproducible, config-driven experiment emitting plot-ready CSV files
//! plus a manifest recording the resolved configuration and its hash.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use emascale::core::{HyperParams, Observable, ParamVector, RngStream};
use emascale::experiments::{
    approximation_error, generate_blobs, rho_star_search, toy_distill_train, toy_polyak_train,
    DatasetSpec, DistillProblem, ParabolaProblem,
};
use emascale::optim::NgosSpec;
use emascale::scaling::{
    emit_hparam_table, format_table_value, progressive_schedule, scale, Optimizer, ScalingRequest,
    TablePrecision, Transition,
};
use emascale::sde::{weak_error, SdeCoeffs, SdeFamily, SdeSpec, SdeState, SgdEmaChain};
use emascale::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_INSUFFICIENT: u8 = 4;

#[derive(Parser)]
#[command(name = "emascale", version, about = "Hyperparameter scaling rules and stochastic-optimization experiments")]
struct Cli {
    /// Base RNG seed; identical seeds give byte-identical outputs.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving CSV and manifest outputs.
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// Monte Carlo replicates for stochastic commands.
    #[arg(long, global = true, default_value_t = 1000)]
    replicates: usize,
    /// Worker threads (0 = automatic). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// JSON file with the command's parameters, replacing its flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print hyperparameters rescaled to a new batch size.
    Scale(ScaleArgs),
    /// Emit a table of scaled hyperparameters across batch sizes.
    Table(TableArgs),
    /// Aligned-trajectory error of a scaled run on the noisy parabola.
    Parabola(ParabolaArgs),
    /// Grid search for the empirically optimal EMA momentum.
    RhoSearch(RhoSearchArgs),
    /// Weak-error ladder of the discrete chain against its limiting SDE.
    SdeCheck(SdeCheckArgs),
    /// Train the toy Polyak-Ruppert classifier at a batch scaling.
    TrainToy(TrainToyArgs),
    /// Run the toy self-distillation problem at a batch scaling.
    Distill(DistillArgs),
    /// Resolve a progressive batch-size schedule into per-stage settings.
    Progressive(ProgressiveArgs),
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    match s {
        "sgd" => Ok(Optimizer::Sgd),
        "heavyball" | "heavy-ball" => Ok(Optimizer::HeavyBall),
        "rmsprop" => Ok(Optimizer::RmsProp),
        "adam" => Ok(Optimizer::Adam),
        "adamw" => Ok(Optimizer::AdamW),
        other => Err(format!(
            "unknown optimizer {other:?} (expected sgd, heavyball, rmsprop, adam, adamw)"
        )),
    }
}

fn parse_transition(s: &str) -> Result<Transition, String> {
    match s {
        "step" => Ok(Transition::Step),
        "smooth" => Ok(Transition::SmoothLinear),
        other => Err(format!("unknown transition {other:?} (expected step, smooth)")),
    }
}

fn parse_breakpoint(s: &str) -> Result<(f64, u64), String> {
    let (epoch, batch) = s
        .split_once(':')
        .ok_or_else(|| format!("breakpoint {s:?} must be epoch:batch"))?;
    Ok((
        epoch.parse().map_err(|e| format!("epoch in {s:?}: {e}"))?,
        batch.parse().map_err(|e| format!("batch in {s:?}: {e}"))?,
    ))
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct ScaleArgs {
    #[arg(long, value_parser = parse_optimizer, default_value = "sgd")]
    optimizer: Optimizer,
    #[arg(long, default_value_t = 256)]
    base_batch: u64,
    #[arg(long)]
    target_batch: u64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.99)]
    rho: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct TableArgs {
    #[arg(long, value_parser = parse_optimizer, default_value = "sgd")]
    optimizer: Optimizer,
    #[arg(long, default_value_t = 256)]
    base_batch: u64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9999)]
    rho: f64,
    /// Batch-size column; defaults to 32..65536 in powers of two.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    batch_sizes: Vec<u64>,
    /// Round values to 5 decimal places in single precision, matching the
    /// reference tables, instead of shortest round-trip formatting.
    #[arg(long)]
    #[serde(default)]
    paper_rounding: bool,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct ParabolaArgs {
    #[arg(long, default_value_t = 1.0)]
    curvature: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_mult: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_add: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9999)]
    rho: f64,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 8)]
    kappa: u32,
    #[arg(long, default_value_t = 1.0)]
    theta0: f64,
    /// Apply the EMA momentum rule rho-hat = rho^kappa (default).
    #[arg(long, overrides_with = "no_rule")]
    #[serde(skip, default)]
    use_rule: bool,
    /// Keep the base momentum unchanged in the scaled run.
    #[arg(long)]
    #[serde(default)]
    no_rule: bool,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct RhoSearchArgs {
    #[arg(long, default_value_t = 1.0)]
    curvature: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_mult: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_add: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9999)]
    rho: f64,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 8)]
    kappa: u32,
    #[arg(long, default_value_t = 41)]
    grid_points: usize,
    #[arg(long, default_value_t = 1.0)]
    theta0: f64,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct SdeCheckArgs {
    #[arg(long, default_value_t = 1.0)]
    curvature: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_mult: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_add: f64,
    #[arg(long, default_value_t = 0.01)]
    sigma0: f64,
    #[arg(long, default_value_t = 1.0)]
    beta0: f64,
    /// Decreasing learning-rate ladder.
    #[arg(long, value_delimiter = ',', default_values_t = [4e-4, 2e-4, 1e-4])]
    etas: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    total_time: f64,
    #[arg(long, default_value_t = 1.0)]
    theta0: f64,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 32)]
    batch: u64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9995)]
    rho: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    kappa: u32,
    /// Seed of the fixed synthetic dataset (independent of --seed).
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    #[arg(long, overrides_with = "no_rule")]
    #[serde(skip, default)]
    use_rule: bool,
    #[arg(long)]
    #[serde(default)]
    no_rule: bool,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct DistillArgs {
    #[arg(long, default_value_t = 1.0)]
    target: f64,
    #[arg(long, default_value_t = 1.0)]
    supervised_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    distill_weight: f64,
    #[arg(long, default_value_t = 0.7071067811865476)]
    noise_std: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.999)]
    rho: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 8)]
    kappa: u32,
    #[arg(long, overrides_with = "no_rule")]
    #[serde(skip, default)]
    use_rule: bool,
    #[arg(long)]
    #[serde(default)]
    no_rule: bool,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct ProgressiveArgs {
    #[arg(long, value_parser = parse_optimizer, default_value = "sgd")]
    optimizer: Optimizer,
    #[arg(long, default_value_t = 1024)]
    base_batch: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.999)]
    rho: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Stage breakpoints as epoch:batch, repeatable or comma-separated.
    #[arg(long = "breakpoint", value_parser = parse_breakpoint, value_delimiter = ',', required = true)]
    breakpoints: Vec<(f64, u64)>,
    #[arg(long, value_parser = parse_transition, default_value = "step")]
    transition: Transition,
}

/// The canonical, fully resolved run description: hashing this document
/// yields the config hash used in output file names.
#[derive(Serialize)]
struct HashDoc<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    replicates: usize,
    params: &'a T,
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    artifact_version: &'a str,
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    replicates: usize,
    threads: usize,
    params: &'a T,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<serde_json::Value>,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Diverged { .. } => EXIT_DIVERGED,
            Error::InsufficientSamples(_) => EXIT_INSUFFICIENT,
            _ => EXIT_CONFIG,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

struct Runner {
    seed: u64,
    replicates: usize,
    threads: usize,
    output_dir: PathBuf,
    config: Option<PathBuf>,
}

impl Runner {
    /// Resolve the command parameters: the JSON config file wins over flags.
    fn params<T: Clone + for<'de> Deserialize<'de>>(&self, flags: &T) -> Result<T, CliError> {
        match &self.config {
            None => Ok(flags.clone()),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::config(format!("config {}: {e}", path.display()))
                })
            }
        }
    }

    fn hash<T: Serialize>(&self, command: &str, params: &T) -> Result<String, CliError> {
        let doc = HashDoc {
            command,
            seed: self.seed,
            replicates: self.replicates,
            params,
        };
        let json = serde_json::to_vec(&doc)
            .map_err(|e| CliError::config(format!("cannot serialize config: {e}")))?;
        let digest = Sha256::digest(&json);
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            write!(hex, "{b:02x}").unwrap();
        }
        Ok(hex)
    }

    /// Write the CSV and manifest for one command run.
    fn emit<T: Serialize>(
        &self,
        command: &str,
        params: &T,
        csv: &str,
        result: Option<serde_json::Value>,
    ) -> Result<PathBuf, CliError> {
        let hash = self.hash(command, params)?;
        fs::create_dir_all(&self.output_dir).map_err(|e| {
            CliError::config(format!("cannot create {}: {e}", self.output_dir.display()))
        })?;
        let csv_name = format!("{command}_{hash}.csv");
        let csv_path = self.output_dir.join(&csv_name);
        fs::write(&csv_path, csv)
            .map_err(|e| CliError::config(format!("cannot write {}: {e}", csv_path.display())))?;
        let manifest = Manifest {
            artifact_version: env!("CARGO_PKG_VERSION"),
            command,
            config_hash: &hash,
            seed: self.seed,
            replicates: self.replicates,
            threads: self.threads,
            params,
            outputs: vec![csv_name],
            result,
        };
        let manifest_path = self.output_dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::config(format!("cannot serialize manifest: {e}")))?;
        text.push('\n');
        fs::write(&manifest_path, text).map_err(|e| {
            CliError::config(format!("cannot write {}: {e}", manifest_path.display()))
        })?;
        Ok(csv_path)
    }

    fn stream(&self) -> RngStream {
        RngStream::new(self.seed, 0)
    }
}

fn parabola_problem(curvature: f64, noise_mult: f64, noise_add: f64) -> Result<ParabolaProblem, CliError> {
    Ok(ParabolaProblem::new(curvature, noise_mult, noise_add, 1)?)
}

fn cmd_scale(r: &Runner, flags: &ScaleArgs) -> Result<(), CliError> {
    let p = r.params(flags)?;
    let mut base = HyperParams::new(p.lr, p.rho, p.base_batch)?;
    base.beta1 = p.beta1;
    base.beta2 = p.beta2;
    base.epsilon = p.epsilon;
    base.weight_decay = p.weight_decay;
    let req = ScalingRequest {
        base,
        base_batch: p.base_batch,
        target_batch: p.target_batch,
        optimizer: p.optimizer,
    };
    let kappa = req.kappa()?;
    let scaled = scale(&req)?;
    let sqrt_rule = p.optimizer.uses_sqrt_lr_rule();
    println!("optimizer: {:?}", p.optimizer);
    println!("kappa: {}", format_table_value(kappa));
    println!(
        "lr: {}  [{}]",
        format_table_value(scaled.eta),
        if sqrt_rule {
            "square-root rule: lr * sqrt(kappa)"
        } else {
            "linear rule: lr * kappa"
        }
    );
    println!(
        "rho: {}  [exponential rule: rho^kappa]",
        format_table_value(scaled.rho)
    );
    if sqrt_rule {
        println!(
            "beta1: {}  [moment rule: 1 - kappa*(1 - beta1)]",
            format_table_value(scaled.beta1)
        );
        println!(
            "beta2: {}  [moment rule: 1 - kappa*(1 - beta2)]",
            format_table_value(scaled.beta2)
        );
        println!("epsilon: {:e}  [epsilon / sqrt(kappa)]", scaled.epsilon);
    }
    if p.weight_decay > 0.0 {
        println!(
            "weight_decay: {}  [{}]",
            format_table_value(scaled.weight_decay),
            if p.optimizer.decoupled_weight_decay() {
                "decoupled rule: 1 - (1 - wd)^kappa"
            } else {
                "coupled rule: (lr / lr-hat) * kappa * wd"
            }
        );
    }
    Ok(())
}

fn cmd_table(r: &Runner, flags: &TableArgs) -> Result<(), CliError> {
    let p = r.params(flags)?;
    let base = HyperParams::new(p.lr, p.rho, p.base_batch)?;
    let batches = if p.batch_sizes.is_empty() {
        emascale::scaling::default_batch_sizes()
    } else {
        p.batch_sizes.clone()
    };
    let precision = if p.paper_rounding {
        TablePrecision::Single
    } else {
        TablePrecision::Exact
    };
    let rows = emit_hparam_table(&base, p.optimizer, p.base_batch, &batches, precision)?;
    let fmt = |v: f64| {
        if p.paper_rounding {
            format_table_value(v)
        } else {
            format!("{v}")
        }
    };
    let mut csv = String::from("batch_size,kappa,lr,rho,beta1,beta2,epsilon,weight_decay\n");
    for row in &rows {
        let h = &row.hparams;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.batch_size,
            fmt(row.kappa),
            fmt(h.eta),
            fmt(h.rho),
            fmt(h.beta1),
            fmt(h.beta2),
            fmt(h.epsilon),
            fmt(h.weight_decay)
        )
        .unwrap();
    }
    let path = r.emit("table", &p, &csv, None)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_parabola(r: &Runner, flags: &ParabolaArgs) -> Result<(), CliError> {
    let p = r.params(flags)?;
    let use_rule = !p.no_rule;
    let problem = parabola_problem(p.curvature, p.noise_mult, p.noise_add)?;
    let hp = HyperParams::new(p.lr, p.rho, 1)?;
    let rho_hat = if use_rule {
        p.rho.powi(p.kappa as i32)
    } else {
        p.rho
    };
    let theta0 = ParamVector::filled(1, p.theta0)?;
    let g = Observable::CoordinateSquare(0);
    let res = approximation_error(
        &problem,
        &hp,
        p.iterations,
        rho_hat,
        p.kappa,
        &g,
        r.replicates,
        &theta0,
        r.stream(),
    )?;
    let mut csv = String::from("kappa,rho_hat,use_rule,err,ci_halfwidth,insufficient\n");
    writeln!(
        csv,
        "{},{},{},{},{},{}",
        res.kappa, res.rho_used, use_rule, res.err, res.ci_halfwidth, res.insufficient
    )
    .unwrap();
    let path = r.emit("parabola", &p, &csv, None)?;
    println!(
        "kappa={} rho_hat={} err={} ci={}",
        res.kappa, res.rho_used, res.err, res.ci_halfwidth
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_rho_search(r: &Runner, flags: &RhoSearchArgs) -> Result<(), CliError> {
    let p = r.params(flags)?;
    let problem = parabola_problem(p.curvature, p.noise_mult, p.noise_add)?;
    let hp = HyperParams::new(p.lr, p.rho, 1)?;
    let theta0 = ParamVector::filled(1, p.theta0)?;
    let g = Observable::CoordinateSquare(0);
    let res = rho_star_search(
        &problem,
        &hp,
        p.iterations,
        p.kappa,
        &g,
        p.grid_points,
        r.replicates,
        &theta0,
        r.stream(),
    )?;
    let mut csv = String::from("rho,err\n");
    for (rho, err) in &res.curve {
        writeln!(csv, "{rho},{err}").unwrap();
    }
    let summary = serde_json::json!({
        "rho_star": res.rho_star,
        "predicted_rho": p.rho.powi(p.kappa as i32),
        "holdout_err": res.holdout.err,
        "holdout_ci_halfwidth": res.holdout.ci_halfwidth,
        "inconclusive": res.inconclusive,
        "target_err": res.target_err,
    });
    let path = r.emit("rho_search", &p, &csv, Some(summary))?;
    println!(
        "rho_star={} (predicted {}) holdout_err={}",
        res.rho_star,
        p.rho.powi(p.kappa as i32),
        res.holdout.err
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sde_check(r: &Runner, flags: &SdeCheckArgs) -> Result<(), CliError> {
    let p = r.params(flags)?;
    let (a, b, c) = (p.curvature, p.noise_mult, p.noise_add);
    let problem = NgosSpec {
        dim: 1,
        mean_grad: Box::new(move |th, _, out| out[0] = a * th[0]),
        cov_diag: Box::new(move |th, _, out| {
            let g = a * th[0];
            out[0] = b * g * g + c;
        }),
        noise_scale: 1.0,
    };
    let spec = SdeSpec {
        family: SdeFamily::SgdEma,
        problem: &problem,
        coeffs: SdeCoeffs {
            sigma0: p.sigma0,
            beta0: p.beta0,
            gamma0: 0.0,
            c1: 0.0,
            c2: 0.0,
            epsilon0: 0.0,
        },
    };
    let theta0 = ParamVector::filled(1, p.theta0)?;
    let chain = SgdEmaChain {
        problem: &problem,
        sigma0: p.sigma0,
        beta0: p.beta0,
        theta0: theta0.clone(),
    };
    let x0 = SdeState::init(SdeFamily::SgdEma, &theta0);
    let points = weak_error(
        &spec,
        &chain,
        &Observable::CoordinateSquare(0),
        &p.etas,
        p.total_time,
        r.replicates,
        &x0,
        r.stream(),
    )?;
    let mut csv =
        String::from("eta,max_weak_error,ci_halfwidth,time_at_max,replicates,insufficient\n");
    for pt in &points {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            pt.eta, pt.max_weak_error, pt.ci_halfwidth, pt.time_at_max, pt.replicates,
            pt.insufficient
        )
        .unwrap();
    }
    let path = r.emit("sde_check", &p, &csv, None)?;
    for pt in &points {
        println!(
            "eta={} max_weak_error={} ci={}",
            pt.eta, pt.max_weak_error, pt.ci_halfwidth
        );
    }
    println!("wrote {}", path.display());
    if let Some(pt) = points.iter().find(|pt| pt.insufficient) {
        return Err(CliError {
            code: EXIT_INSUFFICIENT,
            message: format!(
                "eta={}: CI halfwidth {} exceeds 10% of the weak error {}; increase --replicates",
                pt.eta, pt.ci_halfwidth, pt.max_weak_error
            ),
        });
    }
    Ok(())
}

fn cmd_train_toy(r: &Runner, flags: &TrainToyArgs) -> Result<(), CliError> {
    let p = r.params(flags)?;
    let use_rule = !p.no_rule;
    let spec = DatasetSpec {
        seed: p.data_seed,
        ..DatasetSpec::default()
    };
    let data = generate_blobs(&spec)?;
    let hp = HyperParams::new(p.lr, p.rho, p.batch)?;
    let rec = toy_polyak_train(&data, &hp, p.kappa, p.epochs, use_rule, r.stream())?;
    let mut csv = Vec::new();
    rec.write_csv(&mut csv)
        .map_err(|e| CliError::config(format!("cannot format CSV: {e}")))?;
    let csv = String::from_utf8(csv).expect("CSV is ASCII");
    let path = r.emit("train_toy", &p, &csv, None)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_distill(r: &Runner, flags: &DistillArgs) -> Result<(), CliError> {
    let p = r.params(flags)?;
    let use_rule = !p.no_rule;
    let problem = DistillProblem::new(
        ParamVector::filled(1, p.target)?,
        p.supervised_weight,
        p.distill_weight,
        p.noise_std,
    )?;
    let hp = HyperParams::new(p.lr, p.rho, 1)?;
    let rec = toy_distill_train(
        &problem,
        &hp,
        p.iterations,
        p.kappa,
        use_rule,
        None,
        &ParamVector::zeros(1),
        r.stream(),
    )?;
    let mut csv = Vec::new();
    rec.write_csv(&mut csv)
        .map_err(|e| CliError::config(format!("cannot format CSV: {e}")))?;
    let csv = String::from_utf8(csv).expect("CSV is ASCII");
    let path = r.emit("distill", &p, &csv, None)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_progressive(r: &Runner, flags: &ProgressiveArgs) -> Result<(), CliError> {
    let p = r.params(flags)?;
    let mut base = HyperParams::new(p.lr, p.rho, p.base_batch)?;
    base.beta1 = p.beta1;
    base.beta2 = p.beta2;
    base.epsilon = p.epsilon;
    base.weight_decay = p.weight_decay;
    let plan = progressive_schedule(&base, p.optimizer, p.base_batch, &p.breakpoints, p.transition)?;
    let mut csv = String::from(
        "start_epoch,batch_size,kappa,lr,rho,beta1,beta2,epsilon,weight_decay\n",
    );
    for stage in &plan.stages {
        let h = &stage.hparams;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            stage.start_epoch,
            stage.batch_size,
            stage.kappa,
            h.eta,
            h.rho,
            h.beta1,
            h.beta2,
            h.epsilon,
            h.weight_decay
        )
        .unwrap();
    }
    let path = r.emit("progressive", &p, &csv, None)?;
    println!("{} stages, wrote {}", plan.stages.len(), path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot configure thread pool: {e}")))?;
    }
    let runner = Runner {
        seed: cli.seed,
        replicates: cli.replicates,
        threads: cli.threads,
        output_dir: cli.output_dir.clone(),
        config: cli.config.clone(),
    };
    if runner.replicates == 0 {
        return Err(CliError::config("--replicates must be at least 1"));
    }
    match &cli.command {
        Command::Scale(a) => cmd_scale(&runner, a),
        Command::Table(a) => cmd_table(&runner, a),
        Command::Parabola(a) => cmd_parabola(&runner, a),
        Command::RhoSearch(a) => cmd_rho_search(&runner, a),
        Command::SdeCheck(a) => cmd_sde_check(&runner, a),
        Command::TrainToy(a) => cmd_train_toy(&runner, a),
        Command::Distill(a) => cmd_distill(&runner, a),
        Command::Progressive(a) => cmd_progressive(&runner, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
