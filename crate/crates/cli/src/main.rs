use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use confflow::pipeline::{
    self, ablation_table, AblateOptions, PipelineError, RunConfig, SampleOptions, TrainOptions, Variant, DEFAULT_SAMPLE_STEPS,
};

#[derive(Parser, Debug)]
#[command(name = "confflow", version, about = "Camera-controlled video interpolation with confidence-aware flow matching")]
struct Cli {
    /// Seed for scene generation, initialisation, batches and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output location of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite an existing dataset.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic scene dataset.
    GenScenes {
        #[arg(long, default_value_t = 8)]
        num: usize,
        /// Depth noise of the point clouds, in world units.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        num_points: Option<usize>,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 0)]
        save_every: u64,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Generate videos for every scene of a dataset.
    Sample {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_STEPS)]
        steps: usize,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Score generated videos against the dataset.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory with one `<scene>/frames` folder per scene.
        #[arg(long)]
        generated: PathBuf,
    },
    /// Train and evaluate several variants over several seeds.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "full,c,d")]
        variants: Vec<Variant>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_STEPS)]
        sample_steps: usize,
    },
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.scene.seed = s;
        cfg.flow.seed = s;
    }
    let quiet = cli.quiet;
    match cli.command {
        Command::GenScenes { num, sigma, frames, height, width, num_points } => {
            if let Some(v) = sigma {
                cfg.scene.depth_noise_sigma = v;
            }
            if let Some(v) = frames {
                cfg.scene.num_frames = v;
            }
            if let Some(v) = height {
                cfg.scene.height = v;
            }
            if let Some(v) = width {
                cfg.scene.width = v;
            }
            if let Some(v) = num_points {
                cfg.scene.num_points = v;
            }
            if let Some(o) = cli.out {
                cfg.paths.data_dir = o;
            }
            let m = pipeline::gen_scenes(&cfg.paths.data_dir, &cfg.scene, num, cli.force, quiet)?;
            cfg.write_resolved(&cfg.paths.data_dir)?;
            println!("{} scenes in {}", m.scenes.len(), cfg.paths.data_dir.display());
        }
        Command::Train { data, steps, save_every, resume, variant, lr } => {
            if let Some(d) = data {
                cfg.paths.data_dir = d;
            }
            if let Some(o) = cli.out {
                cfg.paths.checkpoint = o.join("checkpoint.safetensors");
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(v) = lr {
                cfg.flow.learning_rate = v;
            }
            let steps = steps.unwrap_or(cfg.flow.train_steps);
            cfg.flow.train_steps = steps;
            let state = pipeline::train(&cfg, &TrainOptions { steps, save_every, resume, quiet })?;
            println!("trained to step {}; checkpoint {}", state.step, cfg.paths.checkpoint.display());
        }
        Command::Sample { data, checkpoint, steps, variant } => {
            if let Some(d) = data {
                cfg.paths.data_dir = d;
            }
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = c;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            cfg.flow.sample_steps = steps;
            let out = cli.out.unwrap_or_else(|| cfg.paths.report_dir.join("samples"));
            let names = pipeline::sample(&cfg, &SampleOptions { steps, seed: cfg.flow.seed, out: out.clone(), quiet })?;
            println!("{} videos in {}", names.len(), out.display());
        }
        Command::Eval { data, generated } => {
            if let Some(d) = data {
                cfg.paths.data_dir = d;
            }
            if let Some(o) = cli.out {
                cfg.paths.report_dir = o;
            }
            let report = pipeline::evaluate(&cfg.paths.data_dir, &generated, &cfg.paths.report_dir)?;
            cfg.write_resolved(&cfg.paths.report_dir)?;
            for f in &report.failures {
                eprintln!("{}: {}", f.scene, f.error);
            }
            println!("{}", serde_json::to_string_pretty(&report.aggregate).expect("aggregate"));
            if report.aggregate.is_none() {
                return Err(PipelineError::Data("no scene could be evaluated".into()));
            }
        }
        Command::Ablate { data, variants, seeds, steps, sample_steps } => {
            if let Some(d) = data {
                cfg.paths.data_dir = d;
            }
            if let Some(o) = cli.out {
                cfg.paths.report_dir = o;
            }
            if seeds == 0 || variants.is_empty() {
                return Err(PipelineError::Usage("need at least one variant and one seed".into()));
            }
            let steps = steps.unwrap_or(cfg.flow.train_steps);
            let rows = pipeline::ablate(&cfg, &AblateOptions { variants, seeds, steps, sample_steps, quiet })?;
            print!("{}", ablation_table(&rows));
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
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
