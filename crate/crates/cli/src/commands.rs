use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use regbase::baseline::{apply_traditional, window_table, Strategy};
use regbase::bayes::{sample_posterior, write_density_csv, LinearData, PriorSpec, SamplerOptions};
use regbase::design::{build_design, parse_formula, ModelSpec, RandomSpec};
use regbase::epochs::{load_epochs, reject_artifacts, write_epochs, EpochSet, RoiMap, TimeWindow, TrialTable};
use regbase::inference::{
    baseline_correlation_curve, condition_bands, difference_band, difference_wave, Correction,
};
use regbase::lmm::{fit_model, lrt, wald_from, FittedModel, LmmProblem};
use regbase::ols::{information_criteria, pointwise_fit, regression_adjust, BaselineWeight, FittedGlm};
use regbase::power::{power_fitted, power_synthetic, write_power_csv, AnalysisPlan, SignificanceTest};
use regbase::synth::{generate, SynthConfig};

use crate::args::*;
use crate::svg;
use crate::Failure;

type Res<T> = std::result::Result<T, Failure>;

const RUN_FILE: &str = "run.json";

/// Reproducibility manifest written next to every command's outputs.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    tool: String,
    version: String,
    command: Command,
    resolved: Value,
}

fn config(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("i/o error on {}: {e}", path.display()))
}

fn create(path: &Path) -> Res<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Res<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn run(cmd: Command) -> Res<()> {
    if let Command::Replay(a) = &cmd {
        return replay(a);
    }
    let out = cmd.out_dir().expect("non-replay commands have an output directory").clone();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    info!("{} → {}", cmd.name(), out.display());
    let resolved = match &cmd {
        Command::Simulate(a) => simulate(a)?,
        Command::Fit(a) => fit(a)?,
        Command::Pointwise(a) => pointwise(a)?,
        Command::Bands(a) => bands(a)?,
        Command::Corr(a) => corr(a)?,
        Command::Power(a) => power(a)?,
        Command::Bayes(a) => bayes(a)?,
        Command::Compare(a) => compare(a)?,
        Command::Sweep(a) => sweep(a)?,
        Command::Replay(_) => unreachable!(),
    };
    let manifest = RunManifest {
        tool: env!("CARGO_BIN_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd,
        resolved,
    };
    write_json(&out.join(RUN_FILE), &manifest)
}

fn replay(a: &ReplayArgs) -> Res<()> {
    let text = fs::read_to_string(&a.run).map_err(|e| io_err(&a.run, e))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", a.run.display())))?;
    let mut cmd = manifest.command;
    if matches!(cmd, Command::Replay(_)) {
        return Err(config("a run.json cannot record a replay"));
    }
    if manifest.version != env!("CARGO_PKG_VERSION") {
        warn!("run.json was written by version {}; outputs may differ", manifest.version);
    }
    if let Some(out) = &a.out {
        cmd.set_out_dir(out.clone());
    }
    run(cmd)
}

// ---- shared input handling ----

fn parse_window(s: &str, e: &EpochSet) -> Res<TimeWindow> {
    if let Some((a, b)) = s.split_once(',') {
        let a: f64 = a.trim().parse().map_err(|_| config(format!("bad window start in '{s}'")))?;
        let b: f64 = b.trim().parse().map_err(|_| config(format!("bad window end in '{s}'")))?;
        Ok(TimeWindow::new(a, b)?)
    } else {
        Ok(TimeWindow::preset(s.trim(), e.sampling())?)
    }
}

fn parse_levels(items: &[String]) -> Res<Vec<(String, Vec<String>)>> {
    items
        .iter()
        .map(|s| {
            let (f, l) = s
                .split_once('=')
                .ok_or_else(|| config(format!("--levels expects factor=L1,L2,..., got '{s}'")))?;
            let levels: Vec<String> = l.split(',').map(|x| x.trim().to_string()).collect();
            if levels.len() < 2 || levels.iter().any(String::is_empty) {
                return Err(config(format!("--levels needs at least two non-empty levels in '{s}'")));
            }
            Ok((f.trim().to_string(), levels))
        })
        .collect()
}

fn with_levels(mut spec: ModelSpec, levels: &[(String, Vec<String>)]) -> ModelSpec {
    for (f, l) in levels {
        let l: Vec<&str> = l.iter().map(String::as_str).collect();
        spec = spec.with_levels(f, &l);
    }
    spec
}

fn read_roi_map(path: &Path) -> Res<RoiMap> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))
}

fn csv_list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect()
}

/// Loaded, artifact-screened epochs with resolved windows.
struct Dataset {
    epochs: EpochSet,
    baseline: TimeWindow,
    window: TimeWindow,
    roi_map: Option<RoiMap>,
    levels: Vec<(String, Vec<String>)>,
    resolved: Value,
}

impl Dataset {
    fn load(d: &DataArgs) -> Res<Self> {
        let loaded = load_epochs(&d.epochs)?;
        if !loaded.nan_dropped.is_empty() {
            warn!("dropped {} trials containing NaN samples", loaded.nan_dropped.len());
        }
        let mut epochs = loaded.epochs;
        let mut n_rejected = 0;
        if let Some(th) = d.reject {
            let (kept, report) = reject_artifacts(&epochs, th)?;
            n_rejected = report.rejected.len();
            info!("rejected {n_rejected} trials above {th} µV");
            fs::create_dir_all(&d.out).map_err(|e| io_err(&d.out, e))?;
            report.write_csv(create(&d.out.join("rejected.csv"))?)?;
            epochs = kept;
        }
        let roi_map = match (&d.roi_map, d.roi) {
            (Some(p), _) => Some(read_roi_map(p)?),
            (None, true) => Some(
                loaded
                    .roi_map
                    .ok_or_else(|| config("--roi given but the sidecar has no roi_map; pass --roi-map"))?,
            ),
            (None, false) => None,
        };
        let baseline = parse_window(&d.baseline, &epochs)?;
        let window = parse_window(&d.window, &epochs)?;
        let resolved = json!({
            "baseline_ms": [baseline.start_ms, baseline.end_ms],
            "window_ms": [window.start_ms, window.end_ms],
            "n_trials": epochs.n_trials(),
            "n_nan_dropped": loaded.nan_dropped.len(),
            "n_rejected": n_rejected,
            "roi_map": roi_map,
        });
        Ok(Self {
            epochs,
            baseline,
            window,
            roi_map,
            levels: parse_levels(&d.levels)?,
            resolved,
        })
    }

    fn table_with(&self, baseline: &TimeWindow) -> Res<TrialTable> {
        Ok(window_table(&self.epochs, baseline, &self.window, self.roi_map.as_ref())?)
    }

    fn table(&self) -> Res<TrialTable> {
        self.table_with(&self.baseline)
    }

    fn spec(&self, spec: ModelSpec) -> ModelSpec {
        with_levels(spec, &self.levels)
    }

    fn resolved_with(&self, extra: Value) -> Value {
        let mut v = self.resolved.clone();
        if let (Some(m), Value::Object(e)) = (v.as_object_mut(), extra) {
            m.extend(e);
        }
        v
    }
}

fn parse_strategy(s: &str) -> Res<Strategy> {
    s.parse::<Strategy>().map_err(|e| config(e.to_string()))
}

fn parse_random(s: &str) -> Res<RandomSpec> {
    if s.trim().is_empty() {
        return Ok(RandomSpec::default());
    }
    let (fixed, random) = parse_formula(&format!("uv ~ 1 + {s}"))?;
    if !fixed.terms.is_empty() {
        return Err(config(format!("random part '{s}' contains fixed terms")));
    }
    Ok(random)
}

// ---- simulate ----

fn synth_config(preset: &Option<String>, file: &Option<PathBuf>) -> Res<SynthConfig> {
    match (preset, file) {
        (Some(p), None) => Ok(SynthConfig::preset(p)?),
        (None, Some(f)) => {
            let text = fs::read_to_string(f).map_err(|e| io_err(f, e))?;
            let c: SynthConfig = serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", f.display())))?;
            c.validate()?;
            Ok(c)
        }
        (None, None) => Err(config("one of --preset or --config is required")),
        (Some(_), Some(_)) => Err(config("--preset and --config are mutually exclusive")),
    }
}

fn simulate(a: &SimulateArgs) -> Res<Value> {
    let c = synth_config(&a.preset, &a.config)?;
    let (e, truth) = generate(&c, a.seed)?;
    let roi_map = (a.preset.as_deref() == Some("n400")).then(SynthConfig::n400_roi_map);
    write_epochs(&e, &a.out.join("epochs.csv"), roi_map.as_ref())?;
    write_json(&a.out.join("truth.json"), &truth)?;
    Ok(json!({ "config": c, "n_trials": e.n_trials() }))
}

// ---- fit ----

fn glm_summary(f: &FittedGlm, formula: &str) -> String {
    let ic = information_criteria(f);
    let mut s = String::new();
    let _ = writeln!(s, "Linear model fit by least squares");
    let _ = writeln!(s, "Formula: {formula}");
    let _ = writeln!(s);
    let _ = writeln!(s, "{:>10} {:>10} {:>10} {:>10}", "AIC", "BIC", "logLik", "df.resid");
    let _ = writeln!(
        s,
        "{:>10.0} {:>10.0} {:>10.0} {:>10}",
        ic.aic,
        ic.bic,
        f.log_lik,
        f.n_obs - f.n_coefficients()
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "Residual standard error: {:.5}", f.sigma2.sqrt());
    let _ = writeln!(s, "Number of obs: {}", f.n_obs);
    let _ = writeln!(s);
    let _ = writeln!(s, "Fixed effects:");
    let _ = writeln!(s, " {:<34} {:>10} {:>10} {:>8}", "", "Estimate", "Std. Error", "t value");
    for i in 0..f.names.len() {
        let _ = writeln!(
            s,
            " {:<34} {:>10.4} {:>10.4} {:>8.2}",
            f.names[i], f.coefficients[i], f.std_errors[i], f.t_values[i]
        );
    }
    s
}

/// Fixed/random parts for `strategy`, plus the table the strategy fits.
fn strategy_model(
    ds: &Dataset,
    table: &TrialTable,
    strategy: Strategy,
    formula: Option<&str>,
    factors: &str,
    random: Option<&str>,
) -> Res<(ModelSpec, RandomSpec, TrialTable)> {
    let (fixed, random) = match formula {
        Some(f) => {
            if random.is_some() {
                return Err(config("--random only applies without --formula"));
            }
            parse_formula(f)?
        }
        None => (
            strategy.model_spec("uv", &csv_list(factors), "baseline"),
            parse_random(random.unwrap_or(""))?,
        ),
    };
    let fixed = match strategy.pinned_weight() {
        Some(_) => fixed.without("baseline"),
        None => fixed,
    };
    Ok((ds.spec(fixed), random, strategy.prepare(table, "baseline")?))
}

fn coefficients_csv(m: &FittedModel, path: &Path) -> Res<()> {
    let iv = wald_from(m.names(), m.coefficients(), m.std_errors(), 0.95)?;
    let mut w = csv::Writer::from_writer(create(path)?);
    let wr = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(["term", "estimate", "se", "t", "lo", "hi"]).map_err(wr)?;
    for (i, ci) in iv.iter().enumerate() {
        w.write_record([
            ci.name.clone(),
            ci.estimate.to_string(),
            m.std_errors()[i].to_string(),
            m.t_values()[i].to_string(),
            ci.lower.to_string(),
            ci.upper.to_string(),
        ])
        .map_err(wr)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn fit(a: &FitArgs) -> Res<Value> {
    let ds = Dataset::load(&a.data)?;
    let strategy = parse_strategy(&a.strategy)?;
    let table = ds.table()?;
    let (fixed, random, table) =
        strategy_model(&ds, &table, strategy, a.formula.as_deref(), &a.factors, a.random.as_deref())?;
    let constant_baseline = fixed.mentions("baseline")
        && table
            .numeric("baseline")
            .is_some_and(|b| b.iter().all(|v| (v - b[0]).abs() <= 1e-12 * (1.0 + b[0].abs())));
    let fixed = if constant_baseline {
        warn!("the baseline covariate is constant; baseline terms dropped");
        fixed.without("baseline")
    } else {
        fixed
    };
    let model = fit_model(&table, &fixed, &random)?;
    let formula = if random.is_empty() {
        fixed.formula()
    } else {
        format!("{} + {random}", fixed.formula())
    };
    let mut summary = match &model {
        FittedModel::Glm(g) => glm_summary(g, &formula),
        FittedModel::Lmm(m) => m.summary_table(),
    };
    match strategy.pinned_weight() {
        Some(w) if w != 0.0 => {
            summary.push_str(&format!("\nbaseline weight pinned to {w} (traditional correction); baseline terms dropped\n"))
        }
        Some(_) => summary.push_str("\nno baseline correction; baseline terms dropped\n"),
        None if constant_baseline => summary.push_str("\nbaseline covariate is constant; baseline terms dropped\n"),
        None => {}
    }
    let out = &a.data.out;
    write_json(&out.join("model.json"), &model)?;
    write_text(&out.join("summary.txt"), &summary)?;
    coefficients_csv(&model, &out.join("coefficients.csv"))?;
    print!("{summary}");
    Ok(ds.resolved_with(json!({ "strategy": strategy, "formula": formula })))
}

// ---- pointwise ----

fn pointwise(a: &PointwiseArgs) -> Res<Value> {
    let ds = Dataset::load(&a.data)?;
    let (fixed, random) = parse_formula(&a.formula)?;
    if !random.is_empty() {
        return Err(config("pointwise models have no random effects"));
    }
    let weight = match a.weight.trim() {
        "estimated" => BaselineWeight::Estimated,
        w => BaselineWeight::Pinned(
            w.parse()
                .map_err(|_| config(format!("--weight must be 'estimated' or a number, got '{w}'")))?,
        ),
    };
    let spec = ds.spec(fixed);
    let r = pointwise_fit(&ds.epochs, &spec, &ds.baseline, weight)?;
    let out = &a.data.out;
    r.write_csv(create(&out.join("pointwise.csv"))?)?;
    let path = out.join("waves.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let wr = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(["condition", "channel", "time_ms", "uv"]).map_err(wr)?;
    for (k, cond) in r.conditions.iter().enumerate() {
        for (c, ch) in r.channels.iter().enumerate() {
            for (t, v) in r.times_ms.iter().zip(r.corrected_wave(k, c)) {
                w.write_record([cond.as_str(), ch.as_str(), &t.to_string(), &v.to_string()])
                    .map_err(wr)?;
            }
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(ds.resolved_with(json!({ "formula": spec.formula(), "weight": weight })))
}

// ---- bands ----

fn parse_correction(s: &str, window: TimeWindow) -> Res<Correction> {
    match s {
        "none" => Ok(Correction::None),
        "traditional" => Ok(Correction::Traditional { window }),
        "regression" => Ok(Correction::Regression { window }),
        other => Err(config(format!(
            "--correction must be none, traditional or regression, got '{other}'"
        ))),
    }
}

fn bands(a: &BandsArgs) -> Res<Value> {
    let ds = Dataset::load(&a.data)?;
    let correction = parse_correction(&a.correction, ds.baseline)?;
    let out = &a.data.out;
    match &a.difference {
        Some(pair) => {
            let (ca, cb) = pair
                .split_once(',')
                .ok_or_else(|| config(format!("--difference expects A,B, got '{pair}'")))?;
            let d = difference_wave(&ds.epochs, ca.trim(), cb.trim(), &correction)?;
            let band = difference_band(&d, a.level, a.n_boot, a.seed)?;
            band.write_csv(create(&out.join("difference.csv"))?)?;
            let title = format!("{} − {} ({} correction, {:.0}% band)", ca.trim(), cb.trim(), a.correction, 100.0 * a.level);
            write_text(&out.join("difference.svg"), &svg::difference_plot(&band, &title))?;
        }
        None => {
            let corrected = match correction {
                Correction::None => ds.epochs.clone(),
                Correction::Traditional { window } => apply_traditional(&ds.epochs, &window)?,
                Correction::Regression { window } => {
                    let spec = ModelSpec::new("uv", &["baseline", "condition", "baseline:condition"]);
                    regression_adjust(&ds.epochs, &ds.spec(spec), &window)?
                }
            };
            let band = condition_bands(&corrected, a.level, a.n_boot, a.seed)?;
            band.write_csv(create(&out.join("bands.csv"))?)?;
        }
    }
    Ok(ds.resolved_with(json!({ "correction": correction })))
}

// ---- corr ----

fn corr(a: &CorrArgs) -> Res<Value> {
    let ds = Dataset::load(&a.data)?;
    let c = baseline_correlation_curve(&ds.epochs, &ds.baseline, a.n_boot, a.seed)?;
    c.write_csv(create(&a.data.out.join("corr.csv"))?)?;
    Ok(ds.resolved_with(json!({})))
}

// ---- power ----

fn power(a: &PowerArgs) -> Res<Value> {
    let test: SignificanceTest = a.test.parse().map_err(|e: regbase::Error| config(e.to_string()))?;
    let strategies: Vec<Strategy> = csv_list(&a.strategies)
        .into_iter()
        .map(parse_strategy)
        .collect::<Res<_>>()?;
    if strategies.is_empty() {
        return Err(config("--strategies is empty"));
    }
    let factors = csv_list(&a.factors);
    let random = parse_random(&a.random)?;
    let levels = parse_levels(&a.levels)?;
    let mut results = Vec::new();
    let resolved = if let Some(path) = &a.epochs {
        let data = DataArgs {
            epochs: path.clone(),
            baseline: a.baseline.clone().unwrap_or_else(|| "pre100".into()),
            window: a.window.clone().unwrap_or_else(|| "350,600".into()),
            reject: None,
            roi: a.roi,
            roi_map: a.roi_map.clone(),
            levels: a.levels.clone(),
            out: a.out.clone(),
        };
        let ds = Dataset::load(&data)?;
        let table = ds.table()?;
        for s in &strategies {
            let fixed = ds.spec(s.model_spec("uv", &factors, "baseline"));
            let prob = LmmProblem::new(&s.prepare(&table, "baseline")?, &fixed, &random)?;
            let fit = prob.fit()?;
            let mut r = power_fitted(&prob, &fit, &a.term, test, a.n_sim, a.seed)?;
            r.strategy = s.label().into();
            results.push(r);
        }
        ds.resolved_with(json!({ "source": "fitted" }))
    } else {
        let mut c = synth_config(&a.preset, &a.config)?;
        let sampling = c.sampling;
        let resolve = |s: &str| -> Res<TimeWindow> {
            match s.split_once(',') {
                Some(_) => {
                    let v: Vec<f64> = s
                        .split(',')
                        .map(|x| x.trim().parse().map_err(|_| config(format!("bad window '{s}'"))))
                        .collect::<Res<_>>()?;
                    Ok(TimeWindow::new(v[0], v[1])?)
                }
                None => Ok(TimeWindow::preset(s, &sampling)?),
            }
        };
        if let Some(b) = &a.baseline {
            c.baseline_window = resolve(b)?;
        }
        if let Some(w) = &a.window {
            c.analysis_window = resolve(w)?;
        }
        let roi_map = match (&a.roi_map, a.roi) {
            (Some(p), _) => Some(read_roi_map(p)?),
            (None, true) if a.preset.as_deref() == Some("n400") => Some(SynthConfig::n400_roi_map()),
            (None, true) => return Err(config("--roi on synthetic data needs --roi-map unless --preset n400")),
            (None, false) => None,
        };
        for s in &strategies {
            let mut plan = AnalysisPlan::for_strategy(*s, &factors, random.clone(), roi_map.clone());
            plan.fixed = with_levels(plan.fixed, &levels);
            info!("power: {} ({})", s, plan.fixed.formula());
            results.push(power_synthetic(&c, &plan, &a.term, test, a.n_sim, a.seed)?);
        }
        json!({ "source": "synthetic", "config": c, "roi_map": roi_map })
    };
    for r in &results {
        if r.n_failed > 0 {
            warn!("{}: {} of {} replicates failed to fit", r.strategy, r.n_failed, r.n_sim);
        }
    }
    write_power_csv(&results, create(&a.out.join("power.csv"))?)?;
    write_json(&a.out.join("power.json"), &results)?;
    Ok(resolved)
}

// ---- bayes ----

fn bayes(a: &BayesArgs) -> Res<Value> {
    let ds = Dataset::load(&a.data)?;
    let (fixed, random) = parse_formula(&a.formula)?;
    if !random.is_empty() {
        return Err(config("the Bayesian model has fixed effects only"));
    }
    let fixed = ds.spec(fixed);
    let table = ds.table()?;
    let x = build_design(&table, &fixed)?;
    let data = LinearData::new(&x, &table.values)?;
    let priors = PriorSpec::traditionalist(&x.names, "baseline")?;
    let opts = SamplerOptions {
        n_chains: a.n_chains,
        n_warmup: a.n_warmup,
        n_iter: a.n_iter,
        seed: a.seed,
    };
    let post = sample_posterior(&data, &priors, &opts)?;
    let out = &a.data.out;
    post.write_draws_csv(create(&out.join("draws.csv"))?)?;
    write_density_csv(&post, &priors, create(&out.join("density.csv"))?)?;
    write_json(
        &out.join("posterior.json"),
        &json!({
            "formula": fixed.formula(),
            "priors": priors,
            "summary": post.summary(),
            "acceptance": post.acceptance,
            "converged": post.converged,
            "seed": post.seed,
        }),
    )?;
    if !post.converged {
        let worst = post.rhat.iter().cloned().fold(0.0, f64::max);
        return Err(Failure::Runtime(format!(
            "chains did not converge (max R-hat {worst:.3}); outputs written for inspection"
        )));
    }
    Ok(ds.resolved_with(json!({ "formula": fixed.formula() })))
}

// ---- compare ----

fn compare(a: &CompareArgs) -> Res<Value> {
    let ds = Dataset::load(&a.data)?;
    let table = ds.table()?;
    let fit_one = |f: &str| -> Res<FittedModel> {
        let (fixed, random) = parse_formula(f)?;
        Ok(fit_model(&table, &ds.spec(fixed), &random)?)
    };
    let small = fit_one(&a.nested)?;
    let big = fit_one(&a.full)?;
    let r = lrt(&small, &big)?;
    write_json(
        &a.data.out.join("compare.json"),
        &json!({
            "nested": a.nested,
            "full": a.full,
            "aic_nested": small.aic(),
            "aic_full": big.aic(),
            "delta_aic": r.delta_aic,
            "chi2": r.chi2,
            "df": r.df,
            "p_value": r.p_value,
        }),
    )?;
    println!(
        "ΔAIC (nested − full) = {:.2}; χ²({}) = {:.3}, p = {:.4}",
        r.delta_aic, r.df, r.chi2, r.p_value
    );
    Ok(ds.resolved_with(json!({})))
}

// ---- sweep ----

fn sweep(a: &SweepArgs) -> Res<Value> {
    let ds = Dataset::load(&a.data)?;
    let (fixed, random) = parse_formula(&a.formula)?;
    let fixed = ds.spec(fixed);
    let path = a.data.out.join("sweep.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let wr = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(["baseline", "start_ms", "end_ms", "term", "estimate", "se", "t", "aic"])
        .map_err(wr)?;
    let mut windows = Vec::new();
    for b in a.baselines.split(';').map(str::trim).filter(|b| !b.is_empty()) {
        let bw = parse_window(b, &ds.epochs)?;
        let m = fit_model(&ds.table_with(&bw)?, &fixed, &random)?;
        for i in 0..m.names().len() {
            w.write_record([
                b.to_string(),
                bw.start_ms.to_string(),
                bw.end_ms.to_string(),
                m.names()[i].clone(),
                m.coefficients()[i].to_string(),
                m.std_errors()[i].to_string(),
                m.t_values()[i].to_string(),
                m.aic().to_string(),
            ])
            .map_err(wr)?;
        }
        windows.push(json!({ "name": b, "ms": [bw.start_ms, bw.end_ms] }));
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(ds.resolved_with(json!({ "formula": fixed.formula(), "baselines": windows })))
}
