//! `edgepose` argument parsing and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use edgepose_core::dataset::{load_dataset, synth_generate, RandomViewSampler, SynthOptions};
use edgepose_core::detector::OracleNoiseModel;
use edgepose_core::geometry::CameraIntrinsics;
use edgepose_core::metrics::DEFAULT_ADD_THRESHOLD;

use crate::bench::{distance_sweep, run_benchmark, BenchConfig, BenchReport, FrameSource, SweepConfig};
use crate::commands::{
    augment_dataset, calibrate_from_file, evaluate, model_or_default, plan_serve, pnp_from_file,
    read_json, synthesize, to_json, write_output, AugmentSpec, CommandError, Prediction, SynthRequest,
};
use crate::config::Config;
use crate::proxy::ProxySpec;
use crate::report::{emit_report, ReportFormat};
use crate::server::serve;

#[derive(Debug, Parser)]
#[command(name = "edgepose", version, about = "Distributed markerless 6-DoF pose estimation toolkit")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "EDGEPOSE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Listen address for `serve`.
    #[arg(long, global = true)]
    pub bind: Option<String>,
    /// Proxy to host, `name=pipeline` (sspe_style or betapose_style). Repeatable.
    #[arg(long = "proxy", global = true)]
    pub proxies: Vec<ProxySpec>,
    /// Object model JSON; defaults to a 0.3 m cube.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Camera intrinsics JSON.
    #[arg(long, global = true)]
    pub intrinsics: Option<PathBuf>,
    /// Oracle keypoint noise in pixels.
    #[arg(long, global = true)]
    pub noise_sigma: Option<f64>,
    /// Oracle keypoint dropout probability.
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file, or directory for `synth` and `augment`. Stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Benchmark report format: json, csv or md.
    #[arg(long, global = true, default_value = "json")]
    pub format: ReportFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Host pose proxies over HTTP until interrupted.
    Serve {
        /// Dataset preloaded into the oracle annotation store. Repeatable.
        #[arg(long)]
        dataset: Vec<PathBuf>,
        /// Directory served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// JSON pose `T_Robot_Map` used to report `ar_to_map`.
        #[arg(long)]
        robot_map: Option<PathBuf>,
    },
    /// Measure latency and accuracy of a running proxy.
    Bench {
        #[arg(long, default_value = "127.0.0.1:8080")]
        server: String,
        #[arg(long)]
        proxy_name: String,
        /// Dataset to replay; synthetic frames are generated when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Frames synthesized when no dataset is given.
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = BenchConfig::DEFAULT_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        concurrency: usize,
        #[arg(long, default_value_t = DEFAULT_ADD_THRESHOLD)]
        threshold: f64,
        /// Do not attach ground truth as an `X-Oracle` header.
        #[arg(long)]
        no_oracle_hint: bool,
        /// Distances in meters for an accuracy-vs-distance sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        per_distance: usize,
        /// Extra pixels of noise per meter during the sweep.
        #[arg(long, default_value_t = 0.0)]
        distance_gain: f64,
    },
    /// Score predicted poses against a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// JSON array of `{image_id, pose}`.
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ADD_THRESHOLD)]
        threshold: f64,
    },
    /// Write an augmented copy of a dataset.
    Augment {
        #[arg(long)]
        dataset: PathBuf,
        /// rotate:<deg>, scale:<factor>, hflip or contrast:<gamma>. Repeatable.
        #[arg(long = "op", required = true)]
        ops: Vec<AugmentSpec>,
    },
    /// Render a labelled synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        min_distance: f64,
        #[arg(long, default_value_t = 3.0)]
        max_distance: f64,
    },
    /// Solve PnP for a correspondence file.
    Pnp {
        #[arg(long)]
        corrs: PathBuf,
    },
    /// Replay timestamped frame-graph edges and report `T_AR_Map`.
    Calibrate {
        #[arg(long)]
        edges: PathBuf,
    },
}

impl Cli {
    /// Config file plus environment, then flags on top.
    fn resolve_config(&self) -> Result<Config, CommandError> {
        let mut cfg = Config::load(self.config.as_deref(), std::env::vars())?;
        if let Some(b) = &self.bind {
            cfg.bind = b.clone();
        }
        if !self.proxies.is_empty() {
            cfg.proxies = self.proxies.clone();
        }
        if let Some(m) = &self.model {
            cfg.model = Some(m.clone());
        }
        if let Some(p) = &self.intrinsics {
            cfg.intrinsics = Some(read_json(p)?);
        }
        if let Some(s) = self.noise_sigma {
            cfg.noise.sigma_px = s;
        }
        if let Some(d) = self.dropout {
            cfg.noise.dropout_p = d;
        }
        if let Some(s) = self.seed {
            cfg.noise.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &Config) -> Result<PathBuf, CommandError> {
        self.out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .ok_or_else(|| CommandError::Usage("an output directory is required (--out)".into()))
    }
}

pub fn run_from<I, T>(args: I) -> Result<(), CommandError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CommandError::Usage(e.to_string())),
    };
    run(cli)
}

pub fn run(cli: Cli) -> Result<(), CommandError> {
    let cfg = cli.resolve_config()?;
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Serve {
            dataset,
            static_dir,
            robot_map,
        } => {
            let mut cfg = cfg.clone();
            cfg.datasets.extend(dataset.iter().cloned());
            if static_dir.is_some() {
                cfg.static_dir = static_dir.clone();
            }
            if robot_map.is_some() {
                cfg.robot_map_pose = robot_map.clone();
            }
            run_serve(&cfg)
        }
        Command::Bench {
            server,
            proxy_name,
            dataset,
            frames,
            repeats,
            concurrency,
            threshold,
            no_oracle_hint,
            sweep,
            per_distance,
            distance_gain,
        } => {
            let model = model_or_default(cfg.model.as_deref())?;
            let k = cfg.intrinsics_or_default();
            let mut bc = BenchConfig::new(server.clone(), proxy_name.clone());
            bc.repeats = *repeats;
            bc.concurrency = *concurrency;
            bc.threshold_fraction = *threshold;
            bc.send_oracle_hint = !no_oracle_hint;
            if cli.noise_sigma.is_some() || cli.dropout.is_some() || cli.config.is_some() {
                bc.noise = Some(cfg.noise_model());
            }

            let mut report = match dataset {
                Some(path) => {
                    let ds = load_dataset(path)?;
                    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
                    run_benchmark(&bc, &ds, FrameSource::Disk(base), &model)?
                }
                None if *frames > 0 => {
                    let set = synth_generate(
                        &model,
                        &k,
                        &mut RandomViewSampler::new(k, 1.0, 3.0),
                        *frames,
                        &SynthOptions::with_seed(seed),
                    )?;
                    run_benchmark(&bc, &set.dataset, FrameSource::Memory(&set.images), &model)?
                }
                None => BenchReport::empty(proxy_name.clone()),
            };
            if !sweep.is_empty() {
                let noise = OracleNoiseModel {
                    distance_noise_gain: *distance_gain,
                    ..cfg.noise_model()
                };
                let sc = SweepConfig {
                    distances: sweep.clone(),
                    per_distance_n: *per_distance,
                    noise,
                    seed,
                };
                report = report.with_sweep(distance_sweep(&bc, &model, &k, &sc)?);
            }
            write_output(cli.out.as_deref(), emit_report(&report, cli.format).trim_end())
        }
        Command::Eval {
            dataset,
            preds,
            threshold,
        } => {
            let model = model_or_default(cfg.model.as_deref())?;
            let ds = load_dataset(dataset)?;
            let preds: Vec<Prediction> = read_json(preds)?;
            let report = evaluate(&ds, &preds, &model, *threshold)?;
            write_output(cli.out.as_deref(), &to_json(&report))
        }
        Command::Augment { dataset, ops } => {
            let model = model_or_default(cfg.model.as_deref())?;
            let out = cli.out_dir(&cfg)?;
            let ds = load_dataset(dataset)?;
            let base = dataset.parent().unwrap_or(Path::new("."));
            let ops: Vec<_> = ops.iter().map(|s| s.0).collect();
            let summary = augment_dataset(&ds, base, &ops, &model, &out)?;
            write_output(None, &to_json(&summary))
        }
        Command::Synth {
            n,
            min_distance,
            max_distance,
        } => {
            let model = model_or_default(cfg.model.as_deref())?;
            let k = cfg.intrinsics_or_default();
            let out = cli.out_dir(&cfg)?;
            let req = SynthRequest {
                n: *n,
                seed,
                min_distance_m: *min_distance,
                max_distance_m: *max_distance,
            };
            let ds = synthesize(&model, &k, &req, &out)?;
            write_output(
                None,
                &to_json(&serde_json::json!({
                    "records": ds.records.len(),
                    "dataset": out.join("dataset.json"),
                })),
            )
        }
        Command::Pnp { corrs } => {
            let k: Option<CameraIntrinsics> = cfg.intrinsics;
            let result = pnp_from_file(corrs, k)?;
            write_output(cli.out.as_deref(), &to_json(&result))
        }
        Command::Calibrate { edges } => {
            let report = calibrate_from_file(edges)?;
            write_output(cli.out.as_deref(), &to_json(&report))
        }
    }
}

fn run_serve(cfg: &Config) -> Result<(), CommandError> {
    if cfg.proxies.is_empty() {
        eprintln!("edgepose: warning: no proxies configured; every frame request will return 404");
    }
    let plan = plan_serve(cfg)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| CommandError::Io {
            path: PathBuf::from("<runtime>"),
            source,
        })?;
    rt.block_on(async move {
        let names: Vec<String> = plan.proxies.iter().map(|p| p.name.clone()).collect();
        let handle = serve(plan.proxies, plan.bind, plan.options).await?;
        eprintln!(
            "edgepose: serving [{}] on {} ({} annotations loaded)",
            names.join(", "),
            handle.base(),
            plan.store.len()
        );
        wait_for_signal().await;
        eprintln!("edgepose: shutting down");
        handle.shutdown().await.map_err(|source| CommandError::Io {
            path: PathBuf::from("<server>"),
            source,
        })
    })
}

async fn wait_for_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}
