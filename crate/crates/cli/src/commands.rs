use std::io::Write;
use std::path::Path;

use precise_dmi::baselines::{anisotropic_diffusion, fourier_amplitudes, spectral_fit, IntegrationWindows};
use precise_dmi::finetune::{dataset_prior, finetune_cached, maps_from_cache, FeatureCache, MetaboliteMaps};
use precise_dmi::io::{load_dataset, read_weights, save_dataset, save_weights, write_grid, GridFile};
use precise_dmi::metrics::{
    crlb_comparison, estimate_invivo_errors, image_level_stats, monte_carlo, AmplitudeEstimator,
    CnnEstimator, FitEstimator, FourierEstimator, LevelStats,
};
use precise_dmi::nn::train_sve;
use precise_dmi::signal::{default_priors, load_priors, synth_ideal_fid};
use precise_dmi::synth::{build_phantom, noise_sd_for_snr, phantom_to_dmi, B0Config, B1Config, TumorScenario};
use precise_dmi::{DmiDataset, FidParams, MetabolitePrior, NetworkParams, TrainingSampleSpec};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::output::{error_channels, map_channels, write_maps};
use crate::{output_dir, BaselineMethod, Cli, CliError, Command};

struct Ctx {
    cfg: RunConfig,
    priors: Vec<MetabolitePrior>,
    names: Vec<String>,
    quiet: bool,
}

impl Ctx {
    fn spec(&self) -> TrainingSampleSpec {
        self.cfg
            .training_spec
            .clone()
            .unwrap_or_else(|| TrainingSampleSpec::calibrated(&self.priors, &self.cfg.grid, 4.0, 1.0))
    }

    fn windows(&self) -> IntegrationWindows {
        self.cfg
            .windows
            .clone()
            .unwrap_or_else(|| IntegrationWindows::from_priors(&self.priors, &self.cfg.grid))
    }

    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("--{name} must be positive, got {v}")))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    let seed = cli.global.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    let priors = match &cli.global.priors {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read priors {}: {e}", p.display())))?;
            load_priors(&text)?
        }
        None => default_priors(),
    };
    let names = priors.iter().map(|p| p.name.clone()).collect();

    let name = cli.command.name();
    match &cli.command {
        Command::Train { iterations } => {
            if let Some(n) = *iterations {
                cfg.train.iterations = n;
            }
        }
        Command::Phantom { snr, tumor_size, b0, b1 } => {
            if let Some(s) = *snr {
                cfg.snr = positive("snr", s)?;
            }
            if let Some(t) = *tumor_size {
                cfg.phantom.tumor_size = t;
            }
            if *b0 && cfg.phantom.b0.is_none() {
                cfg.phantom.b0 = Some(B0Config::default());
            }
            if *b1 && cfg.phantom.b1.is_none() {
                cfg.phantom.b1 = Some(B1Config::default());
            }
        }
        Command::Estimate { lambda, .. } | Command::Errormap { lambda, .. } => {
            if let Some(l) = *lambda {
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(CliError::Usage(format!("--lambda must be >= 0, got {l}")));
                }
                cfg.finetune.lambda = l;
            }
        }
        Command::Montecarlo {
            trials,
            lambda,
            precise_realizations,
            ..
        } => {
            if let Some(t) = *trials {
                cfg.montecarlo.mc.trials = t;
            }
            if let Some(l) = *lambda {
                cfg.finetune.lambda = l;
            }
            if let Some(r) = *precise_realizations {
                cfg.montecarlo.precise_realizations = r;
            }
        }
        Command::Baseline { .. } | Command::Crlb => {}
    }
    if let Command::Errormap { trials: Some(t), .. } = &cli.command {
        cfg.errormap.trials = *t;
    }

    let dir = output_dir(&cli.global, name);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut man = Manifest::new(name, &dir, seed, cli.global.deterministic, serde_json::to_value(&cfg)?);
    if let Some(p) = &cli.global.config {
        man.input(p)?;
    }
    if let Some(p) = &cli.global.priors {
        man.input(p)?;
    }
    man.note("priors", &priors);
    let ctx = Ctx {
        cfg,
        priors,
        names,
        quiet: cli.global.quiet,
    };

    match cli.command {
        Command::Train { .. } => train(&ctx, &mut man)?,
        Command::Phantom { .. } => phantom(&ctx, &mut man)?,
        Command::Estimate {
            dataset,
            weights,
            calibrate,
            ..
        } => estimate(&ctx, &mut man, &dataset, &weights, calibrate)?,
        Command::Baseline { dataset, method } => baseline(&ctx, &mut man, &dataset, method)?,
        Command::Montecarlo { weights, .. } => montecarlo(&ctx, &mut man, weights.as_deref())?,
        Command::Crlb => crlb(&ctx, &mut man)?,
        Command::Errormap { dataset, weights, .. } => errormap(&ctx, &mut man, &dataset, &weights)?,
    }
    man.finish()
}

fn train(ctx: &Ctx, man: &mut Manifest) -> Result<(), CliError> {
    let spec = ctx.spec();
    let cfg = &ctx.cfg;
    let total = cfg.train.iterations;
    let mut report = |it: usize, loss: f64| {
        if (it + 1) % 500 == 0 || it + 1 == total {
            ctx.progress(format!("iteration {}/{total} loss {loss:.5}", it + 1));
        }
    };
    let out = train_sve(&spec, &ctx.priors, &cfg.grid, &cfg.architecture, &cfg.train, Some(&mut report))?;
    let meta = json!({
        "train": cfg.train,
        "training_spec": spec,
        "grid": cfg.grid,
        "priors": ctx.priors,
    });
    man.record("weights.pdmiw");
    save_weights(&man.dir().join("weights.pdmiw"), &out.params, meta)?;
    let mut w = csv::Writer::from_writer(man.create("loss.csv")?);
    w.write_record(["iteration", "loss"])?;
    for p in &out.loss_curve {
        w.write_record([p.iteration.to_string(), p.loss.to_string()])?;
    }
    w.flush()?;
    man.note("training_spec", &spec);
    man.note("final_loss", out.loss_curve.last().map(|p| p.loss));
    Ok(())
}

fn phantom(ctx: &Ctx, man: &mut Manifest) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let ph = build_phantom(&cfg.phantom)?;
    let ds = phantom_to_dmi(&ph, &ctx.priors, &cfg.grid, cfg.snr, cfg.seed)?;
    save_dataset(man.dir(), &ds)?;
    for f in ["fids.pdmi", "mask.grid", "mri.grid"] {
        man.record(f);
    }
    let mask = ph.mask();
    let mut channels = vec![(
        "label".to_string(),
        ph.labels.iter().map(|&l| Some(l as f64)).collect::<Vec<_>>(),
    )];
    channels.push((
        "tumor".into(),
        ph.tumors
            .iter()
            .map(|t| t.map(|s| TumorScenario::ALL.iter().position(|&a| a == s).unwrap_or(0) as f64 + 1.0))
            .collect(),
    ));
    for (m, name) in ctx.names.iter().enumerate() {
        channels.push((
            format!("{name}_ratio"),
            (0..ph.dims.len())
                .map(|i| mask[i].then(|| ph.truth[i][m] / ph.truth[i][0]))
                .collect(),
        ));
    }
    if let Some(b0) = &ph.b0_map {
        channels.push(("b0_hz".into(), b0.iter().map(|&v| Some(v)).collect()));
    }
    if let Some(b1) = &ph.b1_map {
        channels.push(("b1".into(), b1.iter().map(|&v| Some(v)).collect()));
    }
    let mut f = man.create("truth.grid")?;
    write_grid(&mut f, &GridFile { dims: ph.dims, channels })?;
    f.flush()?;
    man.note("noise_sd", ds.noise_sd);
    man.note("dims", [ds.dims.nx, ds.dims.ny, ds.dims.nz]);
    man.note("n_points", ds.grid.n_points);
    Ok(())
}

fn load_net(man: &mut Manifest, path: &Path, ctx: &Ctx) -> Result<(NetworkParams<f32>, f64), CliError> {
    man.input(path)?;
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?);
    let (params, header) = read_weights(&mut f)?;
    if params.arch().outputs != ctx.priors.len() {
        return Err(CliError::Data(format!(
            "network has {} outputs, prior file lists {} metabolites",
            params.arch().outputs,
            ctx.priors.len()
        )));
    }
    let a_max = header.metadata["training_spec"]["a_max"]
        .as_f64()
        .unwrap_or_else(|| ctx.spec().a_max);
    Ok((params, a_max))
}

fn load_ds(man: &mut Manifest, path: &Path, ctx: &Ctx) -> Result<DmiDataset, CliError> {
    man.input(path)?;
    let mut ds = load_dataset(path)?;
    if let Some(c) = ctx.cfg.calibration {
        ds.scale(positive("calibration", c)?);
    }
    Ok(ds)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn estimate(ctx: &Ctx, man: &mut Manifest, dataset: &Path, weights: &Path, calibrate: bool) -> Result<(), CliError> {
    let (cnn1, a_max) = load_net(man, weights, ctx)?;
    let mut ds = load_ds(man, dataset, ctx)?;
    let mut cache = FeatureCache::new(&ds, &cnn1)?;
    if calibrate {
        let sve = maps_from_cache(&cache, &cnn1)?;
        let water = median(sve.amplitudes[0].iter().flatten().copied().collect())
            .filter(|w| *w > 0.0)
            .ok_or_else(|| CliError::Data("no positive water estimate to calibrate on".into()))?;
        let factor = a_max / 4.0 / water;
        ctx.progress(format!("calibration factor {factor}"));
        ds.scale(factor);
        cache = FeatureCache::new(&ds, &cnn1)?;
    }
    man.note("calibration", ds.calibration);
    let ft = &ctx.cfg.finetune;
    let maps = if ft.lambda == 0.0 {
        maps_from_cache(&cache, &cnn1)?
    } else {
        let prior = dataset_prior(&ds, ctx.cfg.omega_max)?;
        let tuned = finetune_cached(&cache, &cnn1, &prior, ft)?;
        let mut w = csv::Writer::from_writer(man.create("finetune_loss.csv")?);
        w.write_record(["epoch", "loss"])?;
        for (e, l) in tuned.epoch_loss.iter().enumerate() {
            w.write_record([(e + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;
        man.record("finetuned.pdmiw");
        save_weights(&man.dir().join("finetuned.pdmiw"), &tuned.params, json!({ "finetune": ft }))?;
        maps_from_cache(&cache, &tuned.params)?
    };
    man.note("unreliable_voxels", maps.unreliable.iter().filter(|&&u| u).count());
    write_standard(ctx, man, &maps)
}

fn write_standard(ctx: &Ctx, man: &mut Manifest, maps: &MetaboliteMaps) -> Result<(), CliError> {
    let channels = map_channels(maps, &ctx.names);
    let mut render = vec![format!("{}_amplitude", ctx.names[0])];
    render.extend(ctx.names.iter().skip(1).map(|n| format!("{n}_ratio")));
    let render: Vec<&str> = render.iter().map(|s| s.as_str()).collect();
    write_maps(man, "maps", maps.dims, channels, &render)
}

fn baseline(ctx: &Ctx, man: &mut Manifest, dataset: &Path, method: BaselineMethod) -> Result<(), CliError> {
    let ds = load_ds(man, dataset, ctx)?;
    let voxels = ds.masked();
    let m = ctx.priors.len();
    let mut raw = Vec::with_capacity(voxels.len() * m);
    let mut failed = Vec::new();
    let windows = ctx.windows();
    for (k, &v) in voxels.iter().enumerate() {
        let r = match method {
            BaselineMethod::Fit => spectral_fit(&ds.fids[v], &ctx.priors, &ctx.cfg.fit).map(|r| r.amplitudes),
            _ => fourier_amplitudes(&ds.fids[v], &windows, &ctx.priors),
        };
        match r {
            Ok(a) if a.len() == m && a.iter().all(|x| x.is_finite()) => raw.extend(a),
            _ => {
                failed.push(v);
                raw.extend(std::iter::repeat_n(0.0, m));
            }
        }
        if method == BaselineMethod::Fit && (k + 1) % 100 == 0 {
            ctx.progress(format!("fitted {}/{}", k + 1, voxels.len()));
        }
    }
    let mut maps = MetaboliteMaps::from_raw(ds.dims, &voxels, &raw, m)?;
    if method == BaselineMethod::Aniso {
        let mut amps = Vec::with_capacity(m);
        for a in &maps.amplitudes {
            amps.push(anisotropic_diffusion(a, ds.dims, &ctx.cfg.diffusion)?);
        }
        let raw: Vec<f64> = voxels
            .iter()
            .flat_map(|&v| amps.iter().map(move |a| a[v].unwrap_or(0.0)))
            .collect();
        maps = MetaboliteMaps::from_raw(ds.dims, &voxels, &raw, m)?;
    }
    for &v in &failed {
        for k in 0..m {
            maps.amplitudes[k][v] = None;
            maps.raw[k][v] = None;
            maps.ratios[k][v] = None;
        }
    }
    man.note("method", format!("{method:?}").to_lowercase());
    man.note("failed_voxels", failed.len());
    write_standard(ctx, man, &maps)
}

fn stats_columns(s: &LevelStats) -> [String; 6] {
    [
        s.ratio_mean_pct.to_string(),
        s.ratio_sd_pct.to_string(),
        s.amplitude_mean_pct.to_string(),
        s.amplitude_sd_pct.to_string(),
        s.amplitude_sd.to_string(),
        s.failures.to_string(),
    ]
}

fn montecarlo(ctx: &Ctx, man: &mut Manifest, weights: Option<&Path>) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let sec = &cfg.montecarlo;
    let net = weights.map(|w| load_net(man, w, ctx)).transpose()?;
    let truth = FidParams::ideal(cfg.phantom.compartments[2].amplitudes.clone());

    let mut fourier = FourierEstimator {
        windows: ctx.windows(),
        priors: &ctx.priors,
    };
    let mut fit = FitEstimator {
        priors: &ctx.priors,
        config: cfg.fit.clone(),
    };
    let mut sve = net.as_ref().map(|(p, _)| CnnEstimator {
        label: "sve".into(),
        params: p,
    });
    let mut ests: Vec<&mut dyn AmplitudeEstimator> = vec![&mut fourier];
    if sec.include_fit {
        ests.push(&mut fit);
    }
    if let Some(s) = sve.as_mut() {
        ests.push(s);
    }
    ctx.progress("single-voxel sweep");
    let report = monte_carlo(&truth, &ctx.priors, &cfg.grid, &mut ests, &sec.mc)?;

    let mut precise = Vec::new();
    if let (Some((cnn1, _)), true) = (&net, sec.precise_realizations > 0 && cfg.finetune.lambda > 0.0) {
        let ph = build_phantom(&cfg.phantom)?;
        let clean = ph.clean_fids(&ctx.priors, &cfg.grid)?;
        let mask = ph.mask();
        let prior = precise_dmi::finetune::preprocess_mri(&ph.mri, &mask, ph.dims, cfg.omega_max)?;
        let voxels = ph.interior(3);
        for (li, &snr) in sec.mc.levels.iter().enumerate() {
            ctx.progress(format!("fine-tuned sweep, level {}/{}", li + 1, sec.mc.levels.len()));
            let mut one = image_level_stats(
                "precise",
                &ph,
                &clean,
                cnn1,
                &prior,
                &cfg.finetune,
                &[snr],
                sec.precise_realizations,
                &voxels,
                sec.mc.metabolite,
                cfg.seed ^ ((li as u64) << 48),
            )?;
            precise.push(one.remove(0).1);
        }
    }

    let mut names: Vec<String> = report.levels[0].stats.iter().map(|s| s.estimator.clone()).collect();
    if !precise.is_empty() {
        names.push("precise".into());
    }
    let mut w = csv::Writer::from_writer(man.create("montecarlo.csv")?);
    let mut header = vec!["snr".to_string(), "sigma".into()];
    for n in &names {
        for c in ["ratio_mean_pct", "ratio_sd_pct", "amp_mean_pct", "amp_sd_pct", "amp_sd", "failures"] {
            header.push(format!("{n}_{c}"));
        }
    }
    w.write_record(&header)?;
    for (li, level) in report.levels.iter().enumerate() {
        let mut row = vec![level.snr.to_string(), level.sigma.to_string()];
        for s in &level.stats {
            row.extend(stats_columns(s));
        }
        if let Some(p) = precise.get(li) {
            row.extend(stats_columns(p));
        } else if !precise.is_empty() {
            row.extend(std::iter::repeat_n(String::new(), 6));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    let mut f = man.create("montecarlo.json")?;
    serde_json::to_writer_pretty(&mut f, &json!({ "single_voxel": report, "precise": precise }))?;
    f.flush()?;
    Ok(())
}

fn crlb(ctx: &Ctx, man: &mut Manifest) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    if ctx.priors.len() != 4 {
        return Err(CliError::Data("the closed-form bound needs exactly four metabolites".into()));
    }
    let sets: Vec<[f64; 4]> = match &cfg.crlb.amplitudes {
        Some(a) => a.clone(),
        None => cfg
            .phantom
            .compartments
            .iter()
            .map(|c| {
                let mut a = [0.0; 4];
                for (d, s) in a.iter_mut().zip(&c.amplitudes) {
                    *d = *s;
                }
                a
            })
            .collect(),
    };
    let mut cases = Vec::new();
    let mut snrs = Vec::new();
    for a in &sets {
        let clean = synth_ideal_fid(&FidParams::ideal(a.to_vec()), &ctx.priors, &cfg.grid)?;
        for &snr in &cfg.crlb.snr {
            cases.push((noise_sd_for_snr(&[&clean], positive("snr", snr)?)?, *a));
            snrs.push(snr);
        }
    }
    let rows = crlb_comparison(&ctx.priors, &cfg.grid, &cases)?;
    let mut w = csv::Writer::from_writer(man.create("crlb.csv")?);
    w.write_record([
        "snr", "sigma", "water", "glc", "glx", "lac", "r_factor", "literal", "continuous",
        "numeric_amplitude_only", "numeric_full", "literal_over_numeric", "continuous_over_numeric",
    ])?;
    for (r, snr) in rows.iter().zip(&snrs) {
        let mut rec = vec![snr.to_string(), r.sigma.to_string()];
        rec.extend(r.amplitudes.iter().map(|a| a.to_string()));
        rec.extend(
            [
                r.r_factor,
                r.literal,
                r.continuous,
                r.numeric_amplitude_only,
                r.numeric_full,
                r.literal_ratio(),
                r.continuous_ratio(),
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn errormap(ctx: &Ctx, man: &mut Manifest, dataset: &Path, weights: &Path) -> Result<(), CliError> {
    let (cnn1, _) = load_net(man, weights, ctx)?;
    let ds = load_ds(man, dataset, ctx)?;
    let prior = dataset_prior(&ds, ctx.cfg.omega_max)?;
    ctx.progress(format!("{} noisy copies", ctx.cfg.errormap.trials));
    let maps = estimate_invivo_errors(&ds, &ctx.priors, &cnn1, &prior, &ctx.cfg.finetune, &ctx.cfg.errormap)?;
    let channels = error_channels(&maps, &ctx.names);
    let render: Vec<String> = ctx
        .names
        .iter()
        .skip(1)
        .flat_map(|n| [format!("{n}_bias"), format!("{n}_sd")])
        .collect();
    let render: Vec<&str> = render.iter().map(|s| s.as_str()).collect();
    write_maps(man, "errors", maps.dims, channels, &render)?;
    man.note("trials", maps.trials);
    man.note("quantity", maps.quantity);
    Ok(())
}
