// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vit_lens::engine::{Engine, EngineError};
use vit_lens::report::{CaptureMode, TraceOptions};
use vit_lens::service::{self, ServiceConfig, DEFAULT_CACHE_CAPACITY, MIB};
use vit_lens::weights::{parse_weight_file, bind_weights, ModelConfig, WeightError};

const EXIT_FAILURE: u8 = 1;
const EXIT_WEIGHTS: u8 = 3;
const EXIT_IMAGE: u8 = 4;

#[derive(Parser)]
#[command(name = "vit-lens", version, about = "Instrumented Vision Transformer inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// safetensors weight file using the canonical tensor names
    #[arg(long, env = "VIT_LENS_WEIGHTS")]
    weights: PathBuf,
    /// Head count, if the file has no `num_heads` metadata
    #[arg(long)]
    num_heads: Option<usize>,
    /// Class label file, one label per line
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one image and write the trace JSON
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = CaptureMode::Attention)]
        capture: CaptureMode,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Extra classes whose logit-lens curves to include
        #[arg(long, value_delimiter = ',')]
        track: Vec<usize>,
        /// Output file; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, env = "VIT_LENS_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 8 * MIB)]
        max_upload_bytes: usize,
        #[arg(long, default_value_t = CaptureMode::Attention)]
        capture: CaptureMode,
        /// Allowed CORS origin; repeatable, `*` for any
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_CACHE_CAPACITY)]
        cache_size: usize,
    },
    /// Check a weight file against the canonical layout and print its shapes
    ValidateWeights {
        #[arg(long, env = "VIT_LENS_WEIGHTS")]
        weights: PathBuf,
        #[arg(long)]
        num_heads: Option<usize>,
    },
}

fn exit_code(e: &EngineError) -> u8 {
    match e {
        EngineError::Weights(_) | EngineError::Labels(_) => EXIT_WEIGHTS,
        EngineError::Image(_) => EXIT_IMAGE,
        _ => EXIT_FAILURE,
    }
}

fn infer(
    model: ModelArgs,
    image: PathBuf,
    opts: TraceOptions,
    out: Option<PathBuf>,
) -> Result<(), (u8, String)> {
    let engine = Engine::load(&model.weights, model.labels.as_deref(), model.num_heads)
        .map_err(|e| (exit_code(&e), e.to_string()))?;
    let bytes = std::fs::read(&image).map_err(|e| (EXIT_IMAGE, format!("{}: {e}", image.display())))?;
    let result = engine
        .infer(&bytes, &opts)
        .map_err(|e| (exit_code(&e), e.to_string()))?;
    match out {
        Some(path) => std::fs::write(&path, &result.json)
            .map_err(|e| (EXIT_FAILURE, format!("{}: {e}", path.display())))?,
        None => println!("{}", result.json),
    }
    eprintln!(
        "predicted class {} ({}) p={:.4}",
        result.trace.predicted_class,
        engine.labels.label(result.trace.predicted_class),
        result.trace.probabilities[result.trace.predicted_class]
    );
    Ok(())
}

fn validate(weights: PathBuf, num_heads: Option<usize>) -> Result<(), (u8, String)> {
    let fail = |e: WeightError| (EXIT_WEIGHTS, e.to_string());
    let bytes = std::fs::read(&weights).map_err(|e| fail(e.into()))?;
    let table = parse_weight_file(&bytes).map_err(fail)?;
    println!("{} tensors", table.len());
    for (name, t) in &table.tensors {
        println!("  {name:<32} {:?} {:?}", t.dtype, t.shape);
    }
    let config = ModelConfig::infer(&table, num_heads).map_err(fail)?;
    println!(
        "config: layers={} heads={} hidden={} patch={} image={} grid={} classes={} mlp_ratio={} ln_eps={}",
        config.num_layers,
        config.num_heads,
        config.hidden_dim,
        config.patch_size,
        config.image_side,
        config.grid_side,
        config.num_classes,
        config.mlp_ratio,
        config.ln_eps
    );
    bind_weights(&table, &config).map_err(fail)?;
    println!("ok");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Infer {
            model,
            image,
            capture,
            top_k,
            track,
            out,
        } => infer(
            model,
            image,
            TraceOptions {
                capture,
                top_k,
                tracked_classes: track,
            },
            out,
        ),
        Command::ValidateWeights { weights, num_heads } => validate(weights, num_heads),
        Command::Serve {
            model,
            port,
            max_upload_bytes,
            capture,
            cors_origins,
            cache_size,
        } => {
            let config = ServiceConfig {
                weight_path: model.weights,
                labels_path: model.labels,
                num_heads: model.num_heads,
                listen_port: port,
                max_upload_bytes,
                capture_default: capture,
                cors_allowed_origins: cors_origins,
                cache_capacity: cache_size,
            };
            let runtime = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => return report((EXIT_FAILURE, e.to_string())),
            };
            runtime
                .block_on(service::run(config))
                .map_err(|e| (EXIT_FAILURE, e.to_string()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => report(err),
    }
}

fn report((code, message): (u8, String)) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code)
}
