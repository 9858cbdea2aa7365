use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wwt_core::checkpoint;
use wwt_core::config::{apply_kv, parse_kv, read_text};
use wwt_core::data::{generate, load_dataset, read_ppm, save_dataset, Dataset, GenSpec, Scene};
use wwt_core::error::{Result, WwtError};
use wwt_core::heads::{discover_regions, select_single_object, DiscoveryParams};
use wwt_core::model::{count_flops, WwtParams};
use wwt_core::train::{
    evaluate, export_overlays, finetune, infer, probe_invariance, train, EvalOptions, EvalTask,
    FitOptions, RunConfig, Task,
};

#[derive(Parser)]
#[command(name = "wwt", version, about = "What-where transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic sprite dataset.
    GenData {
        /// Dataset spec file (`key = value`); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain with classification and reconstruction losses.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Saved dataset; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stop after this many epochs, keeping the configured LR schedule.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Continue training a checkpoint on a task loss.
    Finetune {
        /// detect, segment or ocl.
        #[arg(long)]
        task: String,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one task.
    Eval {
        /// classify, discover, segment, weak-segment, detect, explain or ocl.
        #[arg(long)]
        task: String,
        #[arg(long)]
        ckpt: PathBuf,
        /// train or val.
        #[arg(long, default_value = "val")]
        split: String,
        /// Run config; defaults to `config.txt` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for the report and interchange files.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        export_masks: bool,
    },
    /// Region proposals for one PPM image.
    Discover {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Translation probe of tokens versus slots.
    ProbeInvariance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// Sprite side in pixels.
        #[arg(long, default_value_t = 16)]
        sprite: usize,
        /// Also write the plot data here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Multiply-accumulate counts against the ViT reference.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export mask, class-activation, label-map and box overlays.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation images to render.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

/// Explicit config, else `config.txt` beside the checkpoint, else defaults.
fn config_for(ckpt: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::from_file(p);
    }
    let sibling = ckpt.parent().map(|d| d.join("config.txt"));
    match sibling {
        Some(p) if p.exists() => RunConfig::from_file(&p),
        _ => Ok(RunConfig::default()),
    }
}

fn dataset(rc: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => {
            let ds = load_dataset(d)?;
            if ds.spec.image_size != rc.model.image_size
                || ds.spec.num_classes != rc.model.num_classes
            {
                return Err(WwtError::Data(
                    "dataset does not fit the model config".into(),
                ));
            }
            Ok(ds)
        }
        None => generate(&rc.data),
    }
}

fn split<'a>(ds: &'a Dataset, name: &str) -> Result<&'a [Scene]> {
    match name {
        "train" => Ok(&ds.train),
        "val" => Ok(&ds.val),
        _ => Err(WwtError::Config(format!("unknown split '{name}'"))),
    }
}

fn load_params(rc: &RunConfig, ckpt: &Path) -> Result<WwtParams<f32>> {
    let p = checkpoint::load(ckpt)?;
    p.check_against(&rc.model)
        .map_err(|e| WwtError::Checkpoint(format!("checkpoint does not fit the model: {e}")))?;
    Ok(p)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, out } => {
            let mut s = GenSpec::default();
            if let Some(p) = spec {
                apply_kv(&parse_kv(&read_text(&p)?)?, &mut [&mut s])?;
            }
            s.validate()?;
            let ds = generate(&s)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} train and {} val scenes to {}",
                ds.train.len(),
                ds.val.len(),
                out.display()
            );
        }
        Cmd::Train {
            config,
            seed,
            out,
            data,
            stop_after,
        } => {
            let mut rc = run_config(config.as_deref())?;
            if let Some(s) = seed {
                rc.train.seed = s;
            }
            let ds = dataset(&rc, data.as_deref())?;
            let opts = FitOptions {
                out: Some(out.clone()),
                verbose: true,
                epoch_limit: stop_after,
            };
            let res = train(&rc, &ds.train, &ds.val, &opts)?;
            let acc = res
                .log
                .best_accuracy()
                .map_or("n/a".to_string(), |a| format!("{a:.4}"));
            println!(
                "trained {} epochs, best val accuracy {acc}, checkpoint {}",
                res.log.epochs().len(),
                out.join("final.wwt").display()
            );
        }
        Cmd::Finetune {
            task,
            init,
            config,
            out,
            data,
        } => {
            let task: Task = task.parse()?;
            if task == Task::Pretrain {
                return Err(WwtError::Config("use `wwt train` for pretraining".into()));
            }
            let rc = run_config(config.as_deref())?;
            let params = load_params(&rc, &init)?;
            let ds = dataset(&rc, data.as_deref())?;
            let opts = FitOptions {
                out: Some(out.clone()),
                verbose: true,
                ..Default::default()
            };
            let res = finetune(&rc, task, params, &ds.train, &ds.val, &opts)?;
            println!(
                "finetuned {task} for {} epochs, checkpoint {}",
                res.log.epochs().len(),
                out.join("final.wwt").display()
            );
        }
        Cmd::Eval {
            task,
            ckpt,
            split: name,
            config,
            data,
            out,
            export_masks,
        } => {
            let task: EvalTask = task.parse()?;
            let rc = config_for(&ckpt, config.as_deref())?;
            let params = load_params(&rc, &ckpt)?;
            let ds = dataset(&rc, data.as_deref())?;
            let opts = EvalOptions {
                keep: rc.train.ocl_keep,
                export_masks,
                ..Default::default()
            };
            let report = evaluate(
                task,
                &rc.model,
                &params,
                split(&ds, &name)?,
                &opts,
                out.as_deref(),
            )?;
            print!("{}", report.to_text());
        }
        Cmd::Discover {
            ckpt,
            image,
            tau,
            config,
        } => {
            let rc = config_for(&ckpt, config.as_deref())?;
            let params = load_params(&rc, &ckpt)?;
            let img = read_ppm(&image)?;
            let inf = infer(&rc.model, &params, &img)?;
            let dp = DiscoveryParams {
                threshold: tau,
                ..Default::default()
            };
            let props = discover_regions(&inf.masks, rc.model.grid(), &dp)?;
            let p = rc.model.patch_size;
            let id = image
                .file_stem()
                .map_or("image".into(), |s| s.to_string_lossy().to_string());
            for r in &props {
                let b = r.pixel_box(p);
                println!(
                    "{id} {} {} {} {} {} -1 slot={} head={}",
                    b.x0, b.y0, b.x1, b.y1, r.concentration, r.slot, r.head
                );
            }
            if !props.is_empty() {
                let best = select_single_object(&props)?;
                let b = best.pixel_box(p);
                println!(
                    "# selected slot={} head={} box {} {} {} {}",
                    best.slot, best.head, b.x0, b.y0, b.x1, b.y1
                );
            }
        }
        Cmd::ProbeInvariance {
            ckpt,
            config,
            class,
            sprite,
            csv,
        } => {
            let rc = config_for(&ckpt, config.as_deref())?;
            let params = load_params(&rc, &ckpt)?;
            let p = rc.model.patch_size as isize;
            let offsets = [(0, 0), (p, 0), (p, p), (2 * p, p)];
            let origin = (rc.model.patch_size, rc.model.patch_size);
            let report = probe_invariance(&rc.model, &params, class, sprite, origin, &offsets)?;
            print!("{}", report.to_text());
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv())
                    .map_err(|e| WwtError::Io { path, source: e })?;
            }
        }
        Cmd::Flops { config } => {
            let rc = run_config(config.as_deref())?;
            println!("{}", count_flops(&rc.model));
        }
        Cmd::Viz {
            ckpt,
            out,
            config,
            data,
            count,
        } => {
            let rc = config_for(&ckpt, config.as_deref())?;
            let params = load_params(&rc, &ckpt)?;
            let ds = dataset(&rc, data.as_deref())?;
            let images: Vec<(String, _)> = ds
                .val
                .iter()
                .take(count)
                .enumerate()
                .map(|(i, s)| (format!("val{i:04}"), s.image.clone()))
                .collect();
            let files = export_overlays(
                &rc.model,
                &params,
                &images,
                &out,
                &DiscoveryParams::default(),
                0.25,
            )?;
            println!("wrote {} overlays to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error class={} msg={msg:?}", e.class());
            ExitCode::FAILURE
        }
    }
}
