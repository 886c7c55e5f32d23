use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use lumen::codec::ImageTensor;
use lumen::config::Config;
use lumen::datagen::{load_dataset, save_dataset, PairedSample, SampleMeta};
use lumen::instruct::{synthesize_instruction, FacetMask, Instruction};
use lumen::optim::AdamW;
use lumen::pipeline::{
    build_describer, eval_run, iterative_enhance, load_checkpoint, synthetic_splits, train_codec, train_loop,
    EvalOptions, LoopOptions, ModelBundle, TrainData,
};
use lumen::service::Server;
use lumen::{Error, Result};

const CONFIG_HELP: &str = "\
Config files are JSON. Every key is optional and unknown keys are rejected.
Top-level sections: schedule, unet, ipfm, codec, image_encoder_width,
instruct, train, codec_train, sample, data, serve.
Print the full default tree with `lumen config`.";

#[derive(Parser)]
#[command(name = "lumen", version, about = "Instruction-guided low-light enhancement", after_help = CONFIG_HELP)]
struct Cli {
    /// JSON config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed (and the sampling seed for enhance/eval)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic train/ and val/ pair directories
    Datagen,
    /// Fit the codec, then train the diffusion model
    Train {
        /// Dataset directory with low/ high/ [meta/]; synthetic when absent
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint (codec fitting is skipped)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance one image with k passes
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Instruction text; "auto" asks the configured describer
        #[arg(long, default_value = "auto")]
        instruction: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint on paired data
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; the synthetic validation split when absent
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate with seeds 0..N
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Only the first N pairs
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Serve the HTTP API
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bind: Option<String>,
    },
    /// Print the instruction a provider would emit for an image
    Instruct {
        #[arg(long = "in")]
        input: PathBuf,
        /// Scene sidecar JSON; uses the template provider when given
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Comma-separated facets for the template: lighting,shadows,spatial
        #[arg(long)]
        facets: Option<String>,
    },
    /// Print the effective config
    Config,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_facets(s: &str) -> Result<FacetMask> {
    let mut m = FacetMask::EMPTY;
    for f in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
        match f {
            "lighting" => m.lighting = true,
            "shadows" => m.shadows = true,
            "spatial" => m.spatial = true,
            "full" => m = FacetMask::FULL,
            other => return Err(Error::InvalidArgument(format!("unknown facet '{other}'"))),
        }
    }
    Ok(m)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_pairs(data: Option<&Path>, cfg: &Config, val: bool) -> Result<Vec<PairedSample>> {
    match data {
        Some(d) => load_dataset(d, cfg.data.size),
        None => {
            let (train, v) = synthetic_splits(&cfg.data);
            Ok(if val { v } else { train })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Config => println!("{}", cfg.to_json_pretty()),
        Cmd::Datagen => {
            let out = cli.out.clone().unwrap_or_else(|| "data".into());
            let (train, val) = synthetic_splits(&cfg.data);
            save_dataset(&train, &out.join("train"))?;
            save_dataset(&val, &out.join("val"))?;
            println!("wrote {} train and {} val pairs to {}", train.len(), val.len(), out.display());
        }
        Cmd::Train { data, resume } => {
            let out = cli.out.clone().unwrap_or_else(|| "run".into());
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let train = load_pairs(data.as_deref(), &cfg, false)?;
            let val = match data {
                Some(_) => None,
                None => Some(synthetic_splits(&cfg.data).1),
            };
            let (mut bundle, mut opt) = match resume {
                Some(p) => {
                    let ck = load_checkpoint(p)?;
                    let opt = ck.optimizer.unwrap_or_else(|| AdamW::new(ck.bundle.config.train.adamw()));
                    (ck.bundle, opt)
                }
                None => {
                    let mut b = ModelBundle::new(cfg.clone())?;
                    let codec_mse = train_codec(&mut b, &train)?;
                    eprintln!("codec reconstruction mse {codec_mse:.6}");
                    let opt = AdamW::new(b.config.train.adamw());
                    (b, opt)
                }
            };
            let data = TrainData::prepare(&mut bundle, &train)?;
            let val_data = match &val {
                Some(v) => Some(TrainData::prepare(&mut bundle, v)?),
                None => None,
            };
            let log_path = out.join("train_log.jsonl");
            let mut log = BufWriter::new(
                File::options()
                    .create(true)
                    .append(true)
                    .open(&log_path)
                    .map_err(|e| Error::io(&log_path, e))?,
            );
            let summary = train_loop(
                &mut bundle,
                &data,
                &mut opt,
                LoopOptions {
                    checkpoint_dir: Some(out.clone()),
                    log: Some(&mut log),
                    validation: val_data.as_ref(),
                    stop_at: None,
                },
            )?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            write_json(&out.join("summary.json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
        }
        Cmd::Enhance {
            ckpt,
            input,
            instruction,
            k,
            steps,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| ".".into());
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let bundle = load_checkpoint(ckpt)?.bundle;
            let describer = build_describer(&bundle.config.instruct)?;
            let y = ImageTensor::read_png(input)?;
            let initial = if instruction == "auto" {
                describer
                    .describe(&y, &Instruction::manual(""))
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?
            } else {
                Instruction::manual(instruction.clone())
            };
            let job = iterative_enhance(
                &bundle,
                &y,
                &initial,
                k.unwrap_or(bundle.config.sample.k),
                cli.seed.unwrap_or(0),
                steps.unwrap_or(bundle.config.sample.steps),
                describer.as_ref(),
            )?;
            for it in &job.iterations {
                it.image.write_png(out.join(format!("x̂_{}.png", it.iteration)))?;
            }
            write_json(&out.join("job.json"), &job)?;
            for it in &job.iterations {
                println!("pass {}: {}", it.iteration, it.instruction.text);
            }
        }
        Cmd::Eval {
            ckpt,
            data,
            seeds,
            k,
            steps,
            limit,
        } => {
            let bundle = load_checkpoint(ckpt)?.bundle;
            let mut pairs = load_pairs(data.as_deref(), &bundle.config, true)?;
            if let Some(n) = limit {
                pairs.truncate(*n);
            }
            let describer = build_describer(&bundle.config.instruct)?;
            let first = cli.seed.unwrap_or(0);
            let mut opts = EvalOptions::from_config(&bundle, (first..first + seeds).collect());
            opts.k = k.unwrap_or(opts.k);
            opts.steps = steps.unwrap_or(opts.steps);
            let reports = eval_run(&bundle, &pairs, &opts, describer.as_ref())?;
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                for r in &reports {
                    write_json(&dir.join(format!("eval_k{}.json", r.provenance.iterations)), r)?;
                }
            }
            let last = reports.last().expect("k >= 1");
            println!("{}", serde_json::to_string_pretty(last).expect("serializable"));
        }
        Cmd::Serve { ckpt, bind } => {
            let bundle = load_checkpoint(ckpt)?.bundle;
            let mut serve = bundle.config.serve.clone();
            if let Some(b) = bind {
                serve.bind = b.clone();
            }
            let describer: Arc<dyn lumen::instruct::Describer> = Arc::from(build_describer(&bundle.config.instruct)?);
            let server = Server::start(bundle, describer, &serve)?;
            eprintln!("listening on http://{}", server.addr);
            server.wait()?;
        }
        Cmd::Instruct { input, meta, facets } => {
            let mask = match facets {
                Some(f) => parse_facets(f)?,
                None => cfg.instruct.facet_mask,
            };
            let ins = match meta {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    let meta: SampleMeta =
                        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?;
                    synthesize_instruction(&meta.scene, mask)
                }
                None => {
                    let y = ImageTensor::read_png(input)?;
                    build_describer(&cfg.instruct)?
                        .describe(&y, &Instruction::manual(""))
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?
                }
            };
            println!("{}", serde_json::to_string_pretty(&ins).expect("serializable"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            if code == 1 {
                eprintln!("\n{CONFIG_HELP}");
            }
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
