use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use mnar_core::data::{impute_region_fixed, load_dataset, save_dataset, PersonRecord};
use mnar_core::diagnostics::{posterior_correlations, rhat_report, summarize_posterior, RhatReport};
use mnar_core::error::{DataError, ModelError};
use mnar_core::estimators::{complete_case_prevalence, mar_multiple_imputation, rmse};
use mnar_core::model::{parameter_names, PriorSpec, N_COEFFICIENTS};
use mnar_core::output::{
    load_fit, sha256_file, write_fit, FitManifest, LoadedFit, RegionImputation, MANIFEST_FILE,
};
use mnar_core::sampler::{run_parallel, Mode, PreparedData, SamplerConfig};
use mnar_core::simulate::{
    load_scenario_file, scenario_from_paper_shape, simulate_dataset, ScenarioConfig,
};
use mnar_core::trend::TrendTable;

use crate::manifest::CommandManifest;
use crate::{
    CliError, CompareArgs, DiagnoseArgs, FitArgs, ModeArg, ReportArgs, SamplerArgs, SensitivityArgs,
    SimulateArgs, WORKERS_ENV,
};

pub const DATASET_FILE: &str = "dataset.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const RHAT_FILE: &str = "rhat.csv";
pub const MNAR_LABEL: &str = "Bayes+MNAR";
pub const MAR_LABEL: &str = "Bayes+MAR";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn workers() -> Result<Option<usize>, CliError> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut config: ScenarioConfig = match &args.scenario {
        Some(path) => ScenarioConfig::from_file(load_scenario_file(path)?, args.scale, args.seed)?,
        None => scenario_from_paper_shape(args.scale, args.seed)?,
    };
    config.mask_early_regions = args.mask_regions;
    let sim = simulate_dataset(&config)?;

    create_dir(&args.out)?;
    let mut manifest = CommandManifest::new("simulate", args);
    if let Some(path) = &args.scenario {
        manifest.input(path)?;
    }
    let data_path = args.out.join(DATASET_FILE);
    save_dataset(&sim.records, &data_path)?;
    let truth_path = args.out.join(TRUTH_FILE);
    sim.truth.write_csv(create_file(&truth_path)?)?;
    manifest.output(&data_path)?;
    manifest.output(&truth_path)?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    // the resolved scenario makes the run reproducible without the bundled file
    mnar_core::output::write_json(&args.out.join("scenario.json"), &config)?;

    let missing = sim.records.iter().filter(|r| !r.participated).count();
    println!(
        "simulated {} persons ({} non-participants) into {}",
        sim.records.len(),
        missing,
        args.out.display()
    );
    Ok(())
}

fn sampler_config(s: &SamplerArgs) -> Result<SamplerConfig, CliError> {
    let config = SamplerConfig {
        n_chains: s.chains,
        burn_in: s.burnin,
        iterations: s.iters,
        thin: s.thin,
        block_sweeps: s.sweeps,
        seed: s.seed,
        mode: match s.mode {
            ModeArg::Mnar => Mode::Mnar,
            ModeArg::Mar => Mode::Mar,
        },
        ..SamplerConfig::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

/// Loads the dataset and applies region imputation when requested.
fn prepare_records(
    data: &Path,
    s: &SamplerArgs,
) -> Result<(Vec<PersonRecord>, Option<RegionImputation>), CliError> {
    let records = load_dataset(data)?;
    if !s.impute_region {
        return Ok((records, None));
    }
    let imputation = RegionImputation {
        p1972: s.region_p1972,
        p1977: s.region_p1977,
        seed: s.region_seed.unwrap_or(s.seed),
    };
    let records = apply_region_imputation(&records, &imputation)?;
    Ok((records, Some(imputation)))
}

fn apply_region_imputation(
    records: &[PersonRecord],
    imp: &RegionImputation,
) -> Result<Vec<PersonRecord>, DataError> {
    impute_region_fixed(records, imp.p1972, imp.p1977, imp.seed)
}

fn run_fit(data: &Path, out: &Path, s: &SamplerArgs, eta_scale: f64) -> Result<FitManifest, CliError> {
    let config = sampler_config(s)?;
    let prior = PriorSpec {
        eta_scale,
        ..PriorSpec::default()
    };
    prior.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let workers = workers()?;
    let (records, region_imputation) = prepare_records(data, s)?;
    let n_records = records.len();
    let prepared = PreparedData::new(records).map_err(|e| match e {
        ModelError::MissingRegion(id) => CliError::Data(format!(
            "record {id} has no region; rerun with --impute-region"
        )),
        other => other.into(),
    })?;

    let outputs = run_parallel(&config, &prepared, &prior, workers)?;
    for o in &outputs {
        println!("chain {}: {:.5} s/iteration", o.chain, o.seconds_per_iteration);
        for w in &o.warnings {
            eprintln!("warning: {w}");
        }
    }
    let base = FitManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config,
        prior,
        data_file: data.display().to_string(),
        data_sha256: sha256_file(data)?,
        n_records,
        n_missing: prepared.n_missing(),
        cell_sizes: prepared.cell_sizes().to_vec(),
        region_imputation,
        chains: Vec::new(),
    };
    Ok(write_fit(out, base, &outputs)?)
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let manifest = run_fit(&args.data, &args.out, &args.sampler, args.eta_scale)?;
    println!(
        "wrote {} chains x {} draws to {}",
        manifest.chains.len(),
        manifest.config.recorded_draws(),
        args.out.display()
    );
    Ok(())
}

fn coefficient_report(fit: &LoadedFit, threshold: f64, coefficients_only: bool) -> Result<RhatReport, CliError> {
    let names = parameter_names();
    let mut report = rhat_report(&fit.draw_slices(), &names, threshold)?;
    if coefficients_only {
        report.names.truncate(N_COEFFICIENTS);
        report.values.truncate(N_COEFFICIENTS);
    }
    Ok(report)
}

fn add_fit_inputs<A: serde::Serialize>(m: &mut CommandManifest<A>, fit: &LoadedFit) -> Result<(), CliError> {
    m.input(&fit.dir.join(MANIFEST_FILE))?;
    for c in &fit.manifest.chains {
        m.input(&fit.dir.join(&c.file))?;
    }
    Ok(())
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    let fit = load_fit(&args.fit)?;
    let report = coefficient_report(&fit, args.threshold, args.coefficients_only)?;
    let out = args.out.clone().unwrap_or_else(|| args.fit.clone());
    create_dir(&out)?;
    let path = out.join(RHAT_FILE);
    report
        .write_csv(create_file(&path)?)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut manifest = CommandManifest::new("diagnose", args);
    add_fit_inputs(&mut manifest, &fit)?;
    manifest.output(&path)?;
    manifest.write(&out.join("diagnose_manifest.json"))?;

    if let Some((name, v)) = report.max_where(|_| true) {
        println!("max R-hat {v:.4} ({name}) over {} parameters", report.names.len());
    }
    let flagged = report.flagged();
    if flagged.is_empty() {
        println!("all parameters below {}", args.threshold);
        return Ok(());
    }
    let shown: Vec<String> = flagged.iter().take(10).map(|(n, r)| format!("{n}={r}")).collect();
    Err(CliError::Convergence(format!(
        "{} parameters at or above R-hat {}: {}{}",
        flagged.len(),
        args.threshold,
        shown.join(", "),
        if flagged.len() > shown.len() { ", ..." } else { "" }
    )))
}

fn method_label(fit: &LoadedFit) -> &'static str {
    match fit.manifest.config.mode {
        Mode::Mnar => MNAR_LABEL,
        Mode::Mar => MAR_LABEL,
    }
}

fn posterior_table(fit: &LoadedFit, method: &str) -> Result<TrendTable, CliError> {
    Ok(summarize_posterior(&fit.smoker_slices(), &fit.cell_sizes(), method)?)
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let fit = load_fit(&args.fit)?;
    let method = args.method.clone().unwrap_or_else(|| method_label(&fit).to_string());
    let table = posterior_table(&fit, &method)?;
    create_dir(&args.out)?;
    let wide = args.out.join("trends_wide.csv");
    TrendTable::write_wide(&[&table], create_file(&wide)?)?;
    let long = args.out.join("trends_long.csv");
    TrendTable::write_long(&[&table], create_file(&long)?)?;

    let corr = posterior_correlations(&fit.draw_slices(), &parameter_names());
    let mut text = String::from("kind,first,second,rho\n");
    for (kind, pairs) in [("strong", &corr.strong), ("highlighted", &corr.highlighted)] {
        for p in pairs {
            let _ = writeln!(text, "{kind},{},{},{}", p.first, p.second, p.rho);
        }
    }
    let corr_path = args.out.join("correlations.csv");
    write_text(&corr_path, &text)?;

    let mut manifest = CommandManifest::new("report", args);
    add_fit_inputs(&mut manifest, &fit)?;
    for p in [&wide, &long, &corr_path] {
        manifest.output(p)?;
    }
    manifest.write(&args.out.join("report_manifest.json"))?;
    println!(
        "{} strongly correlated pairs; tables in {}",
        corr.strong.len(),
        args.out.display()
    );
    Ok(())
}

fn check_same_data(fit: &LoadedFit, data_sha: &str) -> Result<(), CliError> {
    if fit.manifest.data_sha256 != data_sha {
        return Err(DataError::Incompatible {
            path: fit.dir.clone(),
            reason: "fit was run on a different dataset".into(),
        }
        .into());
    }
    Ok(())
}

pub fn compare(args: &CompareArgs) -> Result<(), CliError> {
    let data_sha = sha256_file(&args.data)?;
    let mnar = load_fit(&args.mnar)?;
    check_same_data(&mnar, &data_sha)?;
    let mar = match &args.mar {
        Some(dir) => {
            let fit = load_fit(dir)?;
            check_same_data(&fit, &data_sha)?;
            if fit.manifest.region_imputation != mnar.manifest.region_imputation {
                return Err(DataError::Incompatible {
                    path: dir.clone(),
                    reason: "region imputation differs from the MNAR fit".into(),
                }
                .into());
            }
            Some(fit)
        }
        None => None,
    };
    let mut records = load_dataset(&args.data)?;
    if let Some(imp) = &mnar.manifest.region_imputation {
        records = apply_region_imputation(&records, imp)?;
    }
    let truth_file = mnar_core::simulate::TruthTable::read_csv(
        fs::File::open(&args.truth)
            .map_err(|e| CliError::Data(format!("{}: {e}", args.truth.display())))?,
    )?;
    let truth = TrendTable::from_points("True", &truth_file.prevalence_percent)?;

    let mut tables = Vec::new();
    if let Some(fit) = &mar {
        tables.push(posterior_table(fit, MAR_LABEL)?);
    }
    tables.push(posterior_table(&mnar, MNAR_LABEL)?);
    tables.push(complete_case_prevalence(&records));
    let mi = mar_multiple_imputation(&records, args.mi, args.seed)?;
    for w in &mi.warnings {
        eprintln!("warning: {w}");
    }
    tables.push(mi.table);

    let truth_means = truth.means()?;
    let mut rmse_text = String::from("method,rmse,cells_covering_truth,cells_below_truth\n");
    for t in &tables {
        let value = rmse(t, &truth)?;
        let (mut covered, mut below) = (0, 0);
        for (c, &x) in t.cells.iter().zip(&truth_means) {
            if let Some(c) = c {
                covered += usize::from(c.contains(x));
                below += usize::from(c.mean < x);
            }
        }
        let _ = writeln!(rmse_text, "{},{value},{covered},{below}", t.method);
        println!("{:<14} RMSE {value:.3} pp", t.method);
    }
    tables.push(truth);

    create_dir(&args.out)?;
    let refs: Vec<&TrendTable> = tables.iter().collect();
    let wide = args.out.join("comparison.csv");
    TrendTable::write_wide(&refs, create_file(&wide)?)?;
    let long = args.out.join("comparison_long.csv");
    TrendTable::write_long(&refs, create_file(&long)?)?;
    let rmse_path = args.out.join("rmse.csv");
    write_text(&rmse_path, &rmse_text)?;

    let mut manifest = CommandManifest::new("compare", args);
    manifest.input(&args.data)?;
    manifest.input(&args.truth)?;
    add_fit_inputs(&mut manifest, &mnar)?;
    if let Some(fit) = &mar {
        add_fit_inputs(&mut manifest, fit)?;
    }
    for p in [&wide, &long, &rmse_path] {
        manifest.output(p)?;
    }
    manifest.write(&args.out.join("compare_manifest.json"))?;
    Ok(())
}

pub fn sensitivity(args: &SensitivityArgs) -> Result<(), CliError> {
    if args.eta_scales.is_empty() {
        return Err(CliError::Usage("no eta scales given".into()));
    }
    create_dir(&args.out)?;
    let mut text = String::from(
        "eta_scale,fit_dir,max_eta_rhat,max_eta_parameter,max_coefficient_rhat,eta_above_threshold\n",
    );
    let mut manifest = CommandManifest::new("sensitivity", args);
    manifest.input(&args.data)?;
    for (i, &scale) in args.eta_scales.iter().enumerate() {
        let dir = args.out.join(format!("eta_scale_{i}"));
        println!("eta scale {scale}: fitting into {}", dir.display());
        run_fit(&args.data, &dir, &args.sampler, scale)?;
        let fit = load_fit(&dir)?;
        let report = coefficient_report(&fit, args.threshold, true)?;
        let (eta_name, eta_max) = report
            .max_where(|n| n.starts_with("eta_"))
            .map_or(("none".to_string(), f64::NAN), |(n, v)| (n.to_string(), v));
        let coef_max = report.max_where(|_| true).map_or(f64::NAN, |(_, v)| v);
        let above = report
            .flagged()
            .iter()
            .filter(|(n, _)| n.starts_with("eta_"))
            .count();
        println!("  max eta R-hat {eta_max:.4} ({eta_name}), {above} eta parameters >= {}", args.threshold);
        let _ = writeln!(
            text,
            "{scale},{},{eta_max},{eta_name},{coef_max},{above}",
            dir.display()
        );
        manifest.output(&dir.join(MANIFEST_FILE))?;
    }
    let path = args.out.join("sensitivity.csv");
    write_text(&path, &text)?;
    manifest.output(&path)?;
    manifest.write(&args.out.join("sensitivity_manifest.json"))?;
    Ok(())
}
