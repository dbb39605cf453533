//! The `sample`, `oracle` and `ising` commands.

use std::path::Path;
use std::time::Instant;

use dfkc::ising::{write_samples_csv, AnnealExperiment, AnnealParams, AnnealReport, BoltzmannSpec, IsingModel};
use dfkc::oracle::{integrate_weighted_fke, target_distribution, tv_distance, FkeOptions, FkeReport};
use dfkc::smc::{self, weighted_histogram};
use dfkc::{Denoiser, Error, TabularDenoiser};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::OutputDir;
use crate::{CliError, Overrides};

pub const SCHEMA_VERSION: u32 = 1;

/// Joint spaces up to this size also get the exact target in summary.json.
const EXACT_SUMMARY_LIMIT: usize = 1 << 16;

#[derive(Debug, Serialize)]
pub struct SampleSummary {
    pub schema_version: u32,
    pub target: String,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub k: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub terminal_ess: f64,
    pub resample_events: usize,
    /// SNIS estimate of P(x_k = j), one row per position.
    pub marginals: Vec<Vec<f64>>,
    /// SNIS estimate of the mean token value at each position.
    pub mean_tokens: Vec<f64>,
    pub exact: Option<ExactComparison>,
    pub wall_seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct ExactComparison {
    pub marginals: Vec<Vec<f64>>,
    /// TV between the weighted sample histogram and the exact target.
    pub tv: f64,
}

pub fn cmd_sample(config: &ExperimentConfig, base_dir: &Path, out: &Path) -> Result<(), CliError> {
    let data = config.load_data(base_dir)?;
    let target = config.target_spec(&data)?;
    let schedule = config.masking_schedule()?;
    let smc_config = config.smc_config()?;
    let vocab = data[0].vocab();
    let d = data[0].seq_len();
    let denoisers: Vec<TabularDenoiser> = data.iter().cloned().map(TabularDenoiser::new).collect();
    let refs: Vec<&dyn Denoiser> = denoisers.iter().map(|x| x as &dyn Denoiser).collect();

    let started = Instant::now();
    let run = smc::run(&target, &refs, &schedule, &smc_config).map_err(CliError::runtime)?;
    let wall_seconds = started.elapsed().as_secs_f64();
    let ens = &run.ensemble;
    let weights = ens.normalized_weights().map_err(CliError::runtime)?;

    let v = vocab.size();
    let mut marginals = vec![vec![0.0; v]; d];
    for (w, x) in weights.iter().zip(&ens.particles) {
        for (k, &tok) in x.tokens().iter().enumerate() {
            if (tok as usize) < v {
                marginals[k][tok as usize] += w;
            }
        }
    }
    let mean_tokens = marginals
        .iter()
        .map(|row| row.iter().enumerate().map(|(j, p)| j as f64 * p).sum())
        .collect();
    let exact = exact_comparison(&data, &target, &schedule, ens, vocab)?;

    let summary = SampleSummary {
        schema_version: SCHEMA_VERSION,
        target: target.name().to_string(),
        vocab_size: v,
        seq_len: d,
        k: smc_config.k,
        n_steps: smc_config.n_steps,
        seed: smc_config.seed,
        terminal_ess: ens.ess(),
        resample_events: run.trace.iter().filter(|r| r.resampled).count(),
        marginals,
        mean_tokens,
        exact,
        wall_seconds,
    };

    let dir = OutputDir::create(out)?;
    dir.write_with("samples.csv", |w| {
        let mut line = String::from("particle");
        for k in 0..d {
            line.push_str(&format!(",x{k}"));
        }
        writeln!(w, "{line},log_weight").map_err(CliError::io)?;
        for (i, (x, lw)) in ens.particles.iter().zip(&ens.log_weights).enumerate() {
            let mut line = i.to_string();
            for tok in x.tokens() {
                line.push_str(&format!(",{tok}"));
            }
            writeln!(w, "{line},{lw}").map_err(CliError::io)?;
        }
        Ok(())
    })?;
    dir.write_with("trace.csv", |w| {
        smc::write_trace_csv(&run.trace, w).map_err(CliError::io)
    })?;
    dir.write_json("summary.json", &summary)?;
    println!(
        "sampled {} particles for target {} in {wall_seconds:.2}s, terminal ESS {:.1}; wrote {}",
        smc_config.k,
        summary.target,
        summary.terminal_ess,
        out.display()
    );
    Ok(())
}

fn exact_comparison(
    data: &[dfkc::TabularDataDistribution],
    target: &dfkc::TargetSpec,
    schedule: &dfkc::MaskingSchedule,
    ens: &smc::WeightedEnsemble,
    vocab: dfkc::Vocabulary,
) -> Result<Option<ExactComparison>, CliError> {
    let d = data[0].seq_len();
    let joint_size = (vocab.size() + 1).checked_pow(d as u32);
    if joint_size.is_none_or(|n| n > EXACT_SUMMARY_LIMIT) {
        return Ok(None);
    }
    let refs: Vec<_> = data.iter().collect();
    let exact = match target_distribution(&refs, target, schedule, 0.0) {
        Ok(j) => j.unmasked_part(),
        Err(Error::Capacity { .. }) => return Ok(None),
        Err(e) => return Err(CliError::runtime(e)),
    };
    let hist = weighted_histogram(ens, vocab).map_err(CliError::runtime)?;
    let tv = tv_distance(&hist, &exact).map_err(CliError::runtime)?;
    let v = vocab.size();
    let mut marginals = vec![vec![0.0; v]; d];
    for (index, p) in exact.iter().enumerate() {
        for (k, &tok) in data[0].tokens(index).iter().enumerate() {
            marginals[k][tok as usize] += p;
        }
    }
    Ok(Some(ExactComparison { marginals, tv }))
}

#[derive(Debug, Serialize)]
pub struct OracleOutput {
    pub schema_version: u32,
    pub tolerance: f64,
    pub options: FkeOptions,
    pub pass: bool,
    pub report: FkeReport,
}

pub fn cmd_oracle(
    config: &ExperimentConfig,
    base_dir: &Path,
    out: &Path,
    overrides: &Overrides,
) -> Result<(), CliError> {
    let data = config.load_data(base_dir)?;
    let target = config.target_spec(&data)?;
    let schedule = config.masking_schedule()?;
    let tolerance = overrides.tolerance.or(config.tolerance).unwrap_or(1e-3);
    if !(tolerance >= 0.0 && tolerance.is_finite()) {
        return Err(CliError::Config(format!(
            "tolerance must be a finite non-negative number, got {tolerance}"
        )));
    }
    let mut options = config.oracle;
    if overrides.no_weights {
        options.g_scale = 0.0;
    }
    if options.n_grid < 100 {
        return Err(CliError::Config(format!(
            "oracle.n_grid must be at least 100, got {}",
            options.n_grid
        )));
    }
    let refs: Vec<_> = data.iter().collect();
    let report = integrate_weighted_fke(&refs, &target, &schedule, &options).map_err(|e| match e {
        Error::Capacity { .. } => CliError::Config(e.to_string()),
        other => CliError::runtime(other),
    })?;
    let pass = report.stable() && report.max_tv <= tolerance;
    let dir = OutputDir::create(out)?;
    let summary = format!(
        "oracle {}: max TV {:.3e} over {} steps (tolerance {tolerance:.1e}){}",
        report.target,
        report.max_tv,
        report.grid,
        match report.unstable_at_tau {
            Some(tau) => format!(", integration unstable at tau = {tau:.4}"),
            None => String::new(),
        }
    );
    dir.write_json(
        "oracle_report.json",
        &OracleOutput {
            schema_version: SCHEMA_VERSION,
            tolerance,
            options,
            pass,
            report,
        },
    )?;
    if pass {
        println!("PASS {summary}");
        Ok(())
    } else {
        Err(CliError::Check(format!("FAIL {summary}")))
    }
}

#[derive(Debug, Serialize)]
pub struct IsingMetrics {
    pub schema_version: u32,
    #[serde(flatten)]
    pub report: AnnealReport,
    pub energy_check: EnergyCheck,
}

/// Single-run check of the SNIS mean energy against enumeration, using the
/// self-normalized standard error sqrt(Σ wᵢ²(Eᵢ − Ê)²). That error treats the
/// final particles as independent and so understates the spread when
/// resampling has collapsed the ensemble onto a few ancestors.
#[derive(Debug, Serialize)]
pub struct EnergyCheck {
    pub estimate: f64,
    pub exact: f64,
    pub standard_error: f64,
    pub z: f64,
    pub within_3_sigma: bool,
}

pub fn cmd_ising(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let ising = config
        .ising
        .as_ref()
        .ok_or_else(|| CliError::Config("the ising command needs an \"ising\" section".into()))?;
    if !config.data.is_empty() {
        return Err(CliError::Config(
            "the ising command builds its own data; remove \"data\"".into(),
        ));
    }
    if !(ising.beta_mult > 0.0 && ising.beta_mult.is_finite()) {
        return Err(CliError::Config(format!(
            "beta_mult must be > 0, got {}",
            ising.beta_mult
        )));
    }
    let smc_config = config.smc_config()?;
    let params = AnnealParams {
        k: smc_config.k,
        n_steps: smc_config.n_steps,
        policy: smc_config.policy,
        seed: smc_config.seed,
        schedule: config.masking_schedule()?,
        step_mode: smc_config.step_mode,
        reference_samples: ising.reference_samples,
        reference_burn_in: ising.reference_burn_in,
    };
    let model = IsingModel::new(ising.l, ising.j, ising.h)?;
    let spec = BoltzmannSpec::new(model, ising.beta_data)?;
    let experiment = AnnealExperiment::new(&spec)?;
    let outcome = experiment.run(ising.beta_mult, &params).map_err(CliError::runtime)?;

    let log_weights: Vec<f64> = outcome.samples.iter().map(|s| s.log_weight).collect();
    let weights = smc::normalized_weights(&log_weights).map_err(CliError::runtime)?;
    let estimate = outcome.report.mean_energy;
    let variance: f64 = weights
        .iter()
        .zip(&outcome.samples)
        .map(|(w, s)| w * w * (s.energy - estimate).powi(2))
        .sum();
    let standard_error = variance.sqrt();
    let exact = outcome.report.exact_mean_energy;
    let z = if standard_error > 0.0 {
        (estimate - exact) / standard_error
    } else {
        f64::INFINITY
    };
    let energy_check = EnergyCheck {
        estimate,
        exact,
        standard_error,
        z,
        within_3_sigma: z.abs() <= 3.0,
    };

    let dir = OutputDir::create(out)?;
    dir.write_with("samples.csv", |w| {
        write_samples_csv(&outcome.samples, w).map_err(CliError::io)
    })?;
    let r = &outcome.report;
    println!(
        "ising L={} beta {} x {}: mean energy {:.4} (exact {:.4}, z = {:.2}), |m| {:.4} (exact {:.4}), W2 energy {:.4}, W2 |m| {:.4}, corr-MSE {:.3e}",
        r.lattice,
        r.beta_data,
        r.beta_mult,
        r.mean_energy,
        r.exact_mean_energy,
        energy_check.z,
        r.mean_magnetization,
        r.exact_mean_magnetization,
        r.w2_energy,
        r.w2_magnetization,
        r.correlation_mse
    );
    dir.write_json(
        "metrics.json",
        &IsingMetrics {
            schema_version: SCHEMA_VERSION,
            report: outcome.report,
            energy_check,
        },
    )?;
    Ok(())
}
