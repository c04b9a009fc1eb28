use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{parse_config, ExperimentConfig, FitConfig, SimulateConfig};
use super::manifest::{sha256_hex, FileRecord, RunManifest, Staging, MANIFEST_NAME};
use super::{AtStage, CliError, EvaluateArgs, ExperimentArgs, FitArgs, SimulateArgs, Stage, Switch};
use crate::eval::{
    coverage_report, svg_line_plot, write_tidy_csv, CoverageReport, GlobalEnvelope, PlotSeries, ReplicationCurve,
    DENSE_BIN_OBS,
};
use crate::experiment::{model_columns, run_scenario, simulate_replication};
use crate::frames::CalendarMask;
use crate::likelihood::DailySeries;
use crate::simgen::{exposure_series, Truth};

fn fail(stage: Stage, message: impl Into<String>) -> CliError {
    CliError {
        stage,
        message: message.into(),
    }
}

fn read(path: &Path, stage: Stage) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| fail(stage, format!("cannot read {}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| fail(Stage::Output, format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).at(Stage::Output)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| fail(Stage::Output, format!("cannot create {}: {e}", path.display())))
}

fn rep_name(index: usize) -> String {
    format!("rep_{:04}", index + 1)
}

/// Subdirectories `rep_*` of `root` holding `file`, sorted by name.
fn rep_dirs(root: &Path, file: &str) -> Result<Vec<(String, PathBuf)>, CliError> {
    let entries =
        fs::read_dir(root).map_err(|e| fail(Stage::Input, format!("cannot list {}: {e}", root.display())))?;
    let mut reps = Vec::new();
    for entry in entries {
        let path = entry.at(Stage::Input)?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name.starts_with("rep_") && path.join(file).is_file() {
            reps.push((name, path));
        }
    }
    reps.sort();
    Ok(reps)
}

/// First error in index order, so failures do not depend on scheduling.
fn first_error<T>(results: Vec<Result<T, CliError>>) -> Result<Vec<T>, CliError> {
    results.into_iter().collect()
}

fn add_manifest_input(manifest: &mut RunManifest, dir: &Path) -> Result<(), CliError> {
    let path = dir.join(MANIFEST_NAME);
    if path.is_file() {
        let bytes = read(&path, Stage::Input)?;
        manifest.add_input(path.display().to_string(), &bytes);
    }
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let clock = Instant::now();
    let bytes = read(&a.config, Stage::Config)?;
    let mut cfg: SimulateConfig = parse_config(&bytes).at(Stage::Config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if cfg.replications == 0 {
        return Err(fail(Stage::Config, "field `replications`: must be at least 1"));
    }
    cfg.generator
        .validate()
        .map_err(|e| fail(Stage::Config, format!("field `generator`: {e}")))?;
    let exposure = exposure_series(&cfg.generator).at(Stage::Input)?;
    let staging = Staging::new(&a.out.output, a.out.overwrite).at(Stage::Output)?;
    let root = staging.path().to_path_buf();
    let results = (0..cfg.replications)
        .into_par_iter()
        .map(|i| {
            let (series, truth) = simulate_replication(&cfg.generator, &exposure, cfg.seed, i)
                .map_err(|e| fail(Stage::Config, format!("{}: {e}", rep_name(i))))?;
            let dir = root.join(rep_name(i));
            create_dir(&dir)?;
            let mut csv = Vec::new();
            series.write_csv(&mut csv).at(Stage::Output)?;
            write_bytes(&dir.join("data.csv"), &csv)?;
            write_json(&dir.join("truth.json"), &truth)
        })
        .collect();
    first_error(results)?;
    let settings = serde_json::to_value(&cfg).at(Stage::Output)?;
    let mut manifest = RunManifest::new("simulate", Some(&bytes), Some(cfg.seed), settings);
    manifest.add_input(a.config.display().to_string(), &bytes);
    let out = staging.commit(manifest).at(Stage::Output)?;
    log::info!(
        "simulated {} replications into {} in {:.2}s",
        cfg.replications,
        out.display(),
        clock.elapsed().as_secs_f64()
    );
    Ok(())
}

fn fit_dataset(label: &str, data: &[u8], cfg: &FitConfig, holidays: Option<&str>, out: &Path) -> Result<(), CliError> {
    let clock = Instant::now();
    let prefixed = |stage: Stage, e: &dyn std::fmt::Display| fail(stage, format!("{label}: {e}"));
    let series = DailySeries::read_csv(data).map_err(|e| prefixed(Stage::Input, &e))?;
    let columns = model_columns(&cfg.model);
    for c in &columns {
        if series.covariate(c).is_err() {
            let msg = format!("data has no column {c:?} required by the model");
            return Err(prefixed(Stage::Input, &msg));
        }
    }
    let mask = match holidays {
        Some(text) => CalendarMask::from_json(text, series.n_days(), series.start_date())
            .map_err(|e| prefixed(Stage::Input, &format!("holiday file: {e}")))?,
        None => CalendarMask::new(series.n_days()),
    };
    let frames = cfg
        .frames
        .build(&series, &mask, &columns)
        .map_err(|e| prefixed(Stage::Frames, &e))?;
    log::info!(
        "{label}: {} frames built in {:.3}s",
        frames.n_frames(),
        clock.elapsed().as_secs_f64()
    );
    let result = crate::inference::fit(&series, &frames, &cfg.model, &cfg.options)
        .map_err(|e| prefixed(Stage::Inference, &e))?;
    log::info!("{label}: fitted in {:.2}s", clock.elapsed().as_secs_f64());
    write_json(&out.join("fit.json"), &result)?;
    let mut buf = Vec::new();
    result.write_draws_csv(&mut buf).at(Stage::Output)?;
    write_bytes(&out.join("draws.csv"), &buf)?;
    buf.clear();
    result.write_curves_csv(&mut buf).at(Stage::Output)?;
    write_bytes(&out.join("curves.csv"), &buf)?;
    buf.clear();
    frames.write_csv(&mut buf).at(Stage::Output)?;
    write_bytes(&out.join("frames.csv"), &buf)
}

pub fn fit(a: &FitArgs) -> Result<(), CliError> {
    let bytes = read(&a.config, Stage::Config)?;
    let mut cfg: FitConfig = parse_config(&bytes).at(Stage::Config)?;
    if let Some(seed) = a.seed {
        cfg.options.seed = seed;
    }
    if let Some(d) = a.design {
        cfg.frames.design = d.into();
    }
    if let Some(k) = a.control_days {
        cfg.frames.control_days = k;
    }
    if let Some(s) = a.overdispersion {
        cfg.model.overdispersion = s == Switch::On;
    }
    cfg.model
        .validate()
        .map_err(|e| fail(Stage::Config, format!("field `model`: {e}")))?;
    let holidays = match &a.exclude_holidays {
        Some(p) => {
            let raw = read(p, Stage::Input)?;
            let text = String::from_utf8(raw).map_err(|_| fail(Stage::Input, "holiday file is not UTF-8"))?;
            Some((p.display().to_string(), text))
        }
        None => None,
    };
    let settings = serde_json::to_value(&cfg).at(Stage::Output)?;
    let mut manifest = RunManifest::new("fit", Some(&bytes), Some(cfg.options.seed), settings);
    manifest.add_input(a.config.display().to_string(), &bytes);
    if let Some((label, text)) = &holidays {
        manifest.add_input(label.clone(), text.as_bytes());
    }
    let holiday_text = holidays.as_ref().map(|(_, t)| t.as_str());

    if a.data.is_dir() {
        let reps = rep_dirs(&a.data, "data.csv")?;
        if reps.is_empty() {
            return Err(fail(
                Stage::Input,
                format!("no replications (rep_*/data.csv) found in {}", a.data.display()),
            ));
        }
        add_manifest_input(&mut manifest, &a.data)?;
        let staging = Staging::new(&a.out.output, a.out.overwrite).at(Stage::Output)?;
        let root = staging.path().to_path_buf();
        let results = reps
            .par_iter()
            .enumerate()
            .map(|(i, (name, dir))| {
                let path = dir.join("data.csv");
                let data = read(&path, Stage::Input)?;
                let mut rep_cfg = cfg.clone();
                rep_cfg.options.seed = cfg.options.seed.wrapping_add(i as u64);
                let out = root.join(name);
                create_dir(&out)?;
                fit_dataset(name, &data, &rep_cfg, holiday_text, &out)?;
                Ok(FileRecord {
                    path: path.display().to_string(),
                    sha256: sha256_hex(&data),
                })
            })
            .collect();
        manifest.inputs.extend(first_error(results)?);
        staging.commit(manifest).at(Stage::Output)?;
    } else {
        let data = read(&a.data, Stage::Input)?;
        let staging = Staging::new(&a.out.output, a.out.overwrite).at(Stage::Output)?;
        fit_dataset("data", &data, &cfg, holiday_text, staging.path())?;
        manifest.add_input(a.data.display().to_string(), &data);
        staging.commit(manifest).at(Stage::Output)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CurveRow {
    covariate: String,
    exposure: f64,
    n_obs: usize,
    median: f64,
    lower: f64,
    upper: f64,
    #[serde(default)]
    envelope_lower: Option<f64>,
    #[serde(default)]
    envelope_upper: Option<f64>,
}

fn read_curve(bytes: &[u8], truth: &Truth, covariate: &str, level: f64) -> Result<ReplicationCurve, String> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut rows = Vec::new();
    for row in rdr.deserialize::<CurveRow>() {
        let row = row.map_err(|e| format!("curves.csv: {e}"))?;
        if row.covariate == covariate {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(format!("curves.csv has no curve for {covariate:?}"));
    }
    let grid: Vec<f64> = rows.iter().map(|r| r.exposure).collect();
    let envelope = match rows
        .iter()
        .map(|r| r.envelope_lower.zip(r.envelope_upper))
        .collect::<Option<Vec<_>>>()
    {
        Some(bounds) => Some(GlobalEnvelope {
            level,
            lower: bounds.iter().map(|b| b.0).collect(),
            upper: bounds.iter().map(|b| b.1).collect(),
            ordering: "erl".into(),
        }),
        None => None,
    };
    Ok(ReplicationCurve {
        truth: truth.curve_at(&grid).map_err(|e| e.to_string())?,
        grid,
        n_obs: rows.iter().map(|r| r.n_obs).collect(),
        median: rows.iter().map(|r| r.median).collect(),
        lower: rows.iter().map(|r| r.lower).collect(),
        upper: rows.iter().map(|r| r.upper).collect(),
        envelope,
    })
}

fn fit_level(dir: &Path) -> f64 {
    #[derive(Deserialize)]
    struct Level {
        level: f64,
    }
    fs::read(dir.join("fit.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<Level>(&b).ok())
        .map_or(0.8, |l| l.level)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let fits = rep_dirs(&a.fits, "curves.csv")?;
    if fits.is_empty() {
        return Err(fail(
            Stage::Input,
            format!("no fitted replications (rep_*/curves.csv) found in {}", a.fits.display()),
        ));
    }
    let truths = rep_dirs(&a.truth, "truth.json")?;
    let fit_names: BTreeSet<&str> = fits.iter().map(|(n, _)| n.as_str()).collect();
    let truth_names: BTreeSet<&str> = truths.iter().map(|(n, _)| n.as_str()).collect();
    if fit_names != truth_names {
        return Err(fail(
            Stage::Input,
            format!(
                "{} holds {} replications but {} holds {}; they must match",
                a.fits.display(),
                fit_names.len(),
                a.truth.display(),
                truth_names.len()
            ),
        ));
    }
    let level = fit_level(&fits[0].1);
    let results: Vec<Result<(ReplicationCurve, [FileRecord; 2]), CliError>> = fits
        .par_iter()
        .map(|(name, dir)| {
            let curve_path = dir.join("curves.csv");
            let truth_path = a.truth.join(name).join("truth.json");
            let curve_bytes = read(&curve_path, Stage::Input)?;
            let truth_bytes = read(&truth_path, Stage::Input)?;
            let truth: Truth = serde_json::from_slice(&truth_bytes)
                .map_err(|e| fail(Stage::Input, format!("{}: {e}", truth_path.display())))?;
            let covariate = a.covariate.as_deref().unwrap_or(&truth.exposure_name);
            let curve = read_curve(&curve_bytes, &truth, covariate, level)
                .map_err(|e| fail(Stage::Input, format!("{name}: {e}")))?;
            let records = [
                FileRecord {
                    path: curve_path.display().to_string(),
                    sha256: sha256_hex(&curve_bytes),
                },
                FileRecord {
                    path: truth_path.display().to_string(),
                    sha256: sha256_hex(&truth_bytes),
                },
            ];
            Ok((curve, records))
        })
        .collect();
    let loaded = first_error(results)?;
    let curves: Vec<ReplicationCurve> = loaded.iter().map(|(c, _)| c.clone()).collect();
    let report = coverage_report(&curves).at(Stage::Evaluation)?;

    let settings = serde_json::json!({
        "fits": a.fits.display().to_string(),
        "truth": a.truth.display().to_string(),
        "covariate": a.covariate,
        "scenario": a.scenario,
        "level": level,
    });
    let mut manifest = RunManifest::new("evaluate", None, None, settings);
    add_manifest_input(&mut manifest, &a.fits)?;
    add_manifest_input(&mut manifest, &a.truth)?;
    manifest.inputs.extend(loaded.into_iter().flat_map(|(_, r)| r));

    let staging = Staging::new(&a.out.output, a.out.overwrite).at(Stage::Output)?;
    let reports = [(a.scenario.as_str(), &report)];
    let table = write_report_files(staging.path(), &reports, level)?;
    staging.commit(manifest).at(Stage::Output)?;
    print!("{table}");
    Ok(())
}

pub fn experiment(a: &ExperimentArgs) -> Result<(), CliError> {
    let bytes = read(&a.config, Stage::Config)?;
    let mut cfg: ExperimentConfig = parse_config(&bytes).at(Stage::Config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if cfg.replications == 0 {
        return Err(fail(Stage::Config, "field `replications`: must be at least 1"));
    }
    if cfg.scenarios.is_empty() {
        return Err(fail(Stage::Config, "field `scenarios`: at least one scenario is required"));
    }
    let mut names = BTreeSet::new();
    for (i, s) in cfg.scenarios.iter().enumerate() {
        if !names.insert(s.name.as_str()) {
            return Err(fail(
                Stage::Config,
                format!("field `scenarios[{i}].name`: duplicate name {:?}", s.name),
            ));
        }
    }
    let staging = Staging::new(&a.out.output, a.out.overwrite).at(Stage::Output)?;
    let mut outcomes = Vec::with_capacity(cfg.scenarios.len());
    for scenario in &cfg.scenarios {
        let clock = Instant::now();
        let outcome = run_scenario(scenario, cfg.replications, cfg.seed)
            .map_err(|e| fail(Stage::Inference, format!("scenario {:?}: {e}", scenario.name)))?;
        log::info!(
            "scenario {:?}: {} replications in {:.1}s",
            scenario.name,
            cfg.replications,
            clock.elapsed().as_secs_f64()
        );
        outcomes.push(outcome);
    }
    let level = cfg.scenarios[0].fit.level;
    let reports: Vec<(&str, &CoverageReport)> = outcomes.iter().map(|o| (o.name.as_str(), &o.report)).collect();
    let table = write_report_files(staging.path(), &reports, level)?;
    let settings = serde_json::to_value(&cfg).at(Stage::Output)?;
    let mut manifest = RunManifest::new("experiment", Some(&bytes), Some(cfg.seed), settings);
    manifest.add_input(a.config.display().to_string(), &bytes);
    staging.commit(manifest).at(Stage::Output)?;
    print!("{table}");
    Ok(())
}

/// Writes `coverage.csv`, `summary.json`, `summary.txt` and the SVG panels;
/// returns the summary table.
fn write_report_files(dir: &Path, reports: &[(&str, &CoverageReport)], level: f64) -> Result<String, CliError> {
    let mut buf = Vec::new();
    write_tidy_csv(&mut buf, reports).at(Stage::Output)?;
    write_bytes(&dir.join("coverage.csv"), &buf)?;
    let by_name: std::collections::BTreeMap<&str, &CoverageReport> = reports.iter().copied().collect();
    write_json(&dir.join("summary.json"), &by_name)?;
    let table = summary_table(reports, level);
    write_bytes(&dir.join("summary.txt"), table.as_bytes())?;
    let panels: [(&str, &str, Option<f64>, fn(&CoverageReport) -> &[f64]); 3] = [
        ("coverage", "Pointwise coverage of the credible intervals", Some(level), |r| &r.coverage),
        ("bias", "Bias of the posterior median", Some(0.0), |r| &r.bias),
        ("width", "Mean credible interval width", None, |r| &r.width),
    ];
    for (metric, title, hline, values) in panels {
        let series: Vec<PlotSeries> = reports
            .iter()
            .map(|(name, r)| PlotSeries {
                name: name.to_string(),
                x: r.grid.clone(),
                y: values(r).to_vec(),
                dashed: false,
            })
            .collect();
        let svg = svg_line_plot(title, "exposure", metric, &series, hline);
        write_bytes(&dir.join(format!("{metric}.svg")), svg.as_bytes())?;
    }
    Ok(table)
}

fn summary_table(reports: &[(&str, &CoverageReport)], level: f64) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<20} {:>5} {:>5} {:>6} {:>9} {:>9} {:>7} {:>9} {:>9}",
        "scenario", "reps", "bins", "dense", "coverage", "cov_dense", "joint", "abs_bias", "width"
    );
    for (name, r) in reports {
        let abs_bias: Vec<f64> = r.bias.iter().map(|b| b.abs()).collect();
        let all = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let dense = |v: &[f64]| r.restricted_mean(v, DENSE_BIN_OBS).map_or("-".to_string(), |m| format!("{m:.3}"));
        let _ = writeln!(
            s,
            "{:<20} {:>5} {:>5} {:>6} {:>9.3} {:>9} {:>7} {:>9} {:>9}",
            name,
            r.n_replications,
            r.grid.len(),
            r.dense_bins(DENSE_BIN_OBS).len(),
            all(&r.coverage),
            dense(&r.coverage),
            r.joint_coverage.map_or("-".to_string(), |j| format!("{j:.3}")),
            dense(&abs_bias),
            dense(&r.width),
        );
        for w in &r.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
    }
    let _ = writeln!(
        s,
        "nominal level {level}; dense bins have at least {DENSE_BIN_OBS} observations"
    );
    s
}
