use clap::{Parser, Subcommand};
use pnc_core::{
    batching_ci, cheap_bootstrap_ci, fit_pnc, ij_ci, init_he, normal_quantile, run_coverage,
    run_mse, solve, t_quantile, ConfidenceInterval, Dataset, Df, Error, ExperimentConfig, Method,
    NetConfig, NtkKernel, RngStream, Shift,
};
use std::path::PathBuf;
use std::process::ExitCode;

/// Uncertainty quantification for over-parameterized regression networks:
/// procedural-noise-correcting prediction and confidence intervals.
#[derive(Parser)]
#[command(name = "pnc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single network on a freshly drawn dataset and write a
    /// checkpoint.
    Train(RunArgs),
    /// Fit the PNC predictor and report its prediction at x0.
    Pnc(RunArgs),
    /// One batching confidence interval at x0.
    CiBatch(RunArgs),
    /// One cheap-bootstrap confidence interval at x0.
    CiBoot(RunArgs),
    /// One infinitesimal-jackknife confidence interval at x0.
    CiIj(RunArgs),
    /// Coverage study: repeated experiments with CR/IW/MP summaries.
    Coverage(RunArgs),
    /// MSE benchmark of single / PNC / ensemble predictors over seeds.
    MseBench(RunArgs),
    /// Run the built-in numerical oracle suites and print pass/fail.
    Selfcheck,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output path for the JSON report (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the summary as a CSV table to this path.
    #[arg(long)]
    table: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 1 for configuration/validation problems, 2 for numerical failures.
fn exit_code_for(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::Diverged { .. }
            | Error::DivergedIn { .. }
            | Error::Factorization(_)
            | Error::NonFinite(_),
        ) => 2,
        _ => 1,
    }
}

fn load_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", args.config.display()))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("bad config {}: {e}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(args: &RunArgs, json: String) -> anyhow::Result<()> {
    match &args.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn draw_training_set(cfg: &ExperimentConfig) -> anyhow::Result<(Dataset, RngStream)> {
    let stream = RngStream::new(cfg.master_seed, 0);
    let data = cfg.draw_dataset(&stream.substream(1))?;
    Ok((data, stream.substream(2)))
}

fn intervals_json(intervals: Vec<ConfidenceInterval>) -> anyhow::Result<String> {
    if intervals.len() == 1 {
        Ok(serde_json::to_string_pretty(&intervals[0])?)
    } else {
        Ok(serde_json::to_string_pretty(&intervals)?)
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let d = cfg.input_dim()?;
            let (data, fit_stream) = draw_training_set(&cfg)?;
            let net_cfg = cfg.net_config(d).resolved_for(data.n());
            let net = init_he(&net_cfg, &fit_stream)?;
            let trained = net.train_gd(&data, &cfg.train)?;
            emit(&args, trained.to_json())
        }
        Command::Pnc(args) => {
            let cfg = load_config(&args)?;
            let d = cfg.input_dim()?;
            let (data, fit_stream) = draw_training_set(&cfg)?;
            let p = fit_pnc(
                &data,
                &cfg.net_config(d),
                &cfg.train,
                &cfg.mean_init,
                &fit_stream,
            )?;
            let json = serde_json::json!({
                "x0": cfg.x0,
                "prediction": p.predict(&cfg.x0)?,
                "n": data.n(),
            });
            emit(&args, serde_json::to_string_pretty(&json)?)
        }
        Command::CiBatch(args) => {
            let cfg = load_config(&args)?;
            let d = cfg.input_dim()?;
            let m_prime = match cfg.method {
                Method::Batching { m_prime } => m_prime,
                _ => 4,
            };
            let (data, ci_stream) = draw_training_set(&cfg)?;
            let pipeline = cfg.pipeline(d);
            let intervals: Result<Vec<_>, _> = cfg
                .levels
                .iter()
                .map(|&l| batching_ci(&data, &cfg.x0, l, m_prime, &pipeline, &ci_stream))
                .collect();
            emit(&args, intervals_json(intervals?)?)
        }
        Command::CiBoot(args) => {
            let cfg = load_config(&args)?;
            let d = cfg.input_dim()?;
            let r = match cfg.method {
                Method::CheapBootstrap { replications } => replications,
                _ => 4,
            };
            let (data, ci_stream) = draw_training_set(&cfg)?;
            let pipeline = cfg.pipeline(d);
            let intervals: Result<Vec<_>, _> = cfg
                .levels
                .iter()
                .map(|&l| cheap_bootstrap_ci(&data, &cfg.x0, l, r, &pipeline, &ci_stream))
                .collect();
            emit(&args, intervals_json(intervals?)?)
        }
        Command::CiIj(args) => {
            let cfg = load_config(&args)?;
            let (data, _) = draw_training_set(&cfg)?;
            let intervals: Result<Vec<_>, _> = cfg
                .levels
                .iter()
                .map(|&l| {
                    ij_ci(
                        &data,
                        &cfg.x0,
                        l,
                        NtkKernel::analytic(cfg.depth),
                        cfg.train.ridge,
                        Shift::Zero,
                    )
                })
                .collect();
            emit(&args, intervals_json(intervals?)?)
        }
        Command::Coverage(args) => {
            let cfg = load_config(&args)?;
            let report = run_coverage(&cfg)?;
            if let Some(path) = &args.table {
                std::fs::write(path, report.to_csv_table())?;
            }
            emit(&args, report.to_json())
        }
        Command::MseBench(args) => {
            let cfg = load_config(&args)?;
            let report = run_mse(&cfg)?;
            if let Some(path) = &args.table {
                std::fs::write(path, report.to_csv_table())?;
            }
            emit(&args, report.to_json())
        }
        Command::Selfcheck => selfcheck(),
    }
}

// ---------------------------------------------------------------------------
// selfcheck
// ---------------------------------------------------------------------------

struct CheckSummary {
    failures: usize,
}

impl CheckSummary {
    fn report(&mut self, name: &str, pass: bool, detail: String) {
        if pass {
            println!("PASS {name}");
        } else {
            println!("FAIL {name}: {detail}");
            self.failures += 1;
        }
    }
}

fn selfcheck() -> anyhow::Result<()> {
    let mut sum = CheckSummary { failures: 0 };

    // quantile inversions
    {
        let q = normal_quantile(0.975)?;
        sum.report(
            "quantile/normal-two-sided",
            (q - 1.959_964).abs() < 1e-4,
            format!("z_0.975 = {q}"),
        );
        let sym = (normal_quantile(0.2)? + normal_quantile(0.8)?).abs();
        sum.report("quantile/normal-symmetry", sym < 1e-10, format!("asym {sym}"));
        let cauchy = t_quantile(Df::Finite(1), 0.975)?;
        let expect = (std::f64::consts::PI * 0.475).tan();
        sum.report(
            "quantile/t-df1-closed-form",
            (cauchy - expect).abs() < 1e-3 * expect,
            format!("{cauchy} vs {expect}"),
        );
        let wide = t_quantile(Df::Finite(500), 0.975)?;
        sum.report(
            "quantile/t-normal-limit",
            (wide - normal_quantile(0.975)?).abs() < 0.01,
            format!("t_500 = {wide}"),
        );
    }

    // NTK: wide empirical kernel against the analytic recursion
    {
        let cfg = NetConfig::new(2, 1, 4096);
        let net = init_he(&cfg, &RngStream::new(31, 0))?;
        let analytic = NtkKernel::analytic(1);
        let empirical = NtkKernel::empirical(std::sync::Arc::new(net));
        let pairs = [
            ([0.10, 0.10], [0.10, 0.10]),
            ([0.05, 0.15], [0.12, 0.02]),
            ([0.20, 0.01], [0.03, 0.18]),
        ];
        let mut worst: f64 = 0.0;
        for (a, b) in pairs {
            let t = analytic.eval(&a, &b)?;
            let e = empirical.eval(&a, &b)?;
            worst = worst.max((e - t).abs() / t.abs().max(1e-12));
        }
        sum.report(
            "ntk/empirical-vs-analytic",
            worst < 0.15,
            format!("worst relative error {worst:.3}"),
        );
    }

    // influence function against dataset-augmentation finite differences:
    // duplicating the training set r times and appending one copy of z
    // realizes the mixture (1-eps) pi_n + eps delta_z with eps = 1/(rn+1).
    {
        let spec = pnc_core::SyntheticSpec::new(pnc_core::Family::SinSum, 2, 0.001);
        let data = pnc_core::generate_synthetic(&spec, 16, &RngStream::new(32, 0))?;
        let lambda = 1e-3;
        let sol = solve(NtkKernel::analytic(1), &data, lambda, Shift::Zero)?;
        let x0 = [0.1, 0.1];
        let (z_x, z_y) = ([0.05, 0.15], 0.3);
        let if_val = pnc_core::inference::ij_influence(&sol, &z_x, z_y, &x0, lambda)?;
        let base = sol.predict(&x0)?;
        let fd_at = |r: usize| -> anyhow::Result<f64> {
            let n = data.n();
            let idx: Vec<usize> = (0..r).flat_map(|_| 0..n).collect();
            let rep = data.select_rows(&idx);
            let mut inputs = rep.inputs().clone().insert_row(r * n, 0.0);
            for (j, v) in z_x.iter().enumerate() {
                inputs[(r * n, j)] = *v;
            }
            let resp = rep.responses().clone().insert_row(r * n, z_y);
            let aug = Dataset::new(inputs, resp)?;
            let eps = 1.0 / (r as f64 * n as f64 + 1.0);
            let pred = solve(NtkKernel::analytic(1), &aug, lambda, Shift::Zero)?.predict(&x0)?;
            Ok((pred - base) / eps)
        };
        let e1 = (fd_at(1)? - if_val).abs();
        let e4 = (fd_at(4)? - if_val).abs();
        sum.report(
            "ij/finite-difference-first-order",
            e4 < e1 * 0.6,
            format!("errors {e1:.3e} -> {e4:.3e} against IF {if_val:.4}"),
        );
    }

    if sum.failures == 0 {
        println!("selfcheck: all checks passed");
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{} selfcheck failure(s)", sum.failures)).into())
    }
}
