mod config;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use amk_core::ablation::{self, AblationSetup, Adapters};
use amk_core::backend::{self, BackendConfig, BackendRegistry, GatedBackend};
use amk_core::edit;
use amk_core::eval::{self, PixelEmbedder};
use amk_core::pipeline::{MixingConfig, Preset, DEFAULT_GAIN};
use amk_core::prompt::{self, ChatClient, ConditionCatalog, EditRequest, HttpChatClient, RefineMode};
use amk_core::rf::{Conditioning, StepSchedule};
use amk_core::sar::{self, SarSettings};
use amk_core::store;
use amk_core::ExecMode;
use amk_tree::{server, BranchRequest, Overrides, Runtime, Tree, TreeSettings};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::FileConfig;

#[derive(Parser)]
#[command(name = "amk", version, about = "Training-free conditional face aging on a rectified-flow backbone")]
struct Cli {
    /// TOML settings file.
    #[arg(long, global = true, env = "AMK_CONFIG")]
    config: Option<PathBuf>,
    /// Backend selection: "toy" or "external:<name>".
    #[arg(long, global = true, env = "AMK_BACKEND")]
    backend: Option<String>,
    /// Seeds the toy backend and synthetic SAR clusters.
    #[arg(long, global = true, env = "AMK_SEED")]
    seed: Option<u64>,
    /// Where SAR clusters and features are cached.
    #[arg(long, global = true, env = "AMK_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Age one portrait.
    Edit(EditArgs),
    /// Render every preset of the ablation ladder and score them.
    Ablate(AblateArgs),
    /// Manage an aging multiverse tree.
    #[command(subcommand)]
    Tree(TreeCommand),
    /// List the built-in conditions.
    Conditions,
    /// Write a synthetic portrait that the toy backend can edit.
    Portrait {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
}

#[derive(Args)]
struct Generation {
    #[arg(long, env = "AMK_STEPS")]
    steps: Option<usize>,
    /// Key-modulation gain.
    #[arg(long, env = "AMK_G")]
    g: Option<f32>,
    #[arg(long, env = "AMK_SUBJECT")]
    subject: Option<String>,
    /// Age of the person in the input image.
    #[arg(long, env = "AMK_SOURCE_AGE")]
    source_age: Option<f32>,
}

#[derive(Args)]
struct EditArgs {
    image: PathBuf,
    #[arg(long)]
    age: f64,
    #[arg(long, default_value = "")]
    condition: String,
    #[arg(long, env = "AMK_PRESET")]
    preset: Option<String>,
    /// "template" or "llm".
    #[arg(long, env = "AMK_REFINE")]
    refine: Option<String>,
    #[command(flatten)]
    gen: Generation,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    image: PathBuf,
    #[arg(long, default_value_t = 70.0)]
    age: f32,
    #[arg(long, default_value = "")]
    condition: String,
    #[command(flatten)]
    gen: Generation,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TreeCommand {
    /// Start a tree from a portrait.
    Init {
        dir: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Age of the person in the portrait.
        #[arg(long)]
        age: f64,
        #[arg(long, env = "AMK_PRESET")]
        preset: Option<String>,
        #[command(flatten)]
        gen: Generation,
    },
    /// Grow one branch and wait for it.
    Branch {
        dir: PathBuf,
        #[arg(long, default_value = "root")]
        parent: String,
        #[arg(long)]
        age: f64,
        #[arg(long, default_value = "")]
        condition: String,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        g: Option<f32>,
        /// Edit the root image instead of the parent.
        #[arg(long)]
        from_root: bool,
    },
    /// Print the tree.
    Show {
        dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Serve the tree over HTTP until interrupted.
    Serve {
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8787", env = "AMK_ADDR")]
        addr: SocketAddr,
    },
}

/// Settings after defaults, file, environment and flags are merged.
struct Resolved {
    file: FileConfig,
    backend: GatedBackend,
    seed: u64,
    cache_dir: PathBuf,
    exec: ExecMode,
}

impl Resolved {
    fn steps(&self, gen: &Generation) -> usize {
        gen.steps.or(self.file.edit.steps).unwrap_or(16)
    }

    fn g(&self, gen: &Generation) -> f32 {
        gen.g.or(self.file.edit.g).unwrap_or(DEFAULT_GAIN)
    }

    fn subject(&self, gen: &Generation) -> String {
        gen.subject.clone().or_else(|| self.file.edit.subject.clone()).unwrap_or_else(|| "person".into())
    }

    fn source_age(&self, gen: &Generation) -> f32 {
        gen.source_age.or(self.file.edit.source_age).unwrap_or(30.0)
    }

    fn preset(&self, flag: Option<&str>) -> Result<Preset> {
        let name = flag.or(self.file.edit.preset.as_deref()).unwrap_or("full");
        Ok(name.parse()?)
    }

    fn refine(&self, flag: Option<&str>) -> Result<RefineMode> {
        match flag.or(self.file.edit.refine.as_deref()).unwrap_or("template") {
            "template" => Ok(RefineMode::Template),
            "llm" => Ok(RefineMode::Llm),
            other => bail!("unknown refine mode {other:?} (expected template or llm)"),
        }
    }

    fn llm(&self) -> Option<Arc<dyn ChatClient>> {
        let cfg = self.file.llm.clone()?;
        Some(Arc::new(HttpChatClient::from_env(cfg)))
    }

    fn sar(&self) -> SarSettings {
        let d = SarSettings::default();
        SarSettings {
            age_low: self.file.sar.age_low.unwrap_or(d.age_low),
            age_high: self.file.sar.age_high.unwrap_or(d.age_high),
            cluster_size: self.file.sar.cluster_size.unwrap_or(d.cluster_size),
            seed: self.seed,
        }
    }
}

fn resolve(cli: &Cli) -> Result<Resolved> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let mut toy = file.toy.clone().unwrap_or_default();
    toy.seed = seed;
    let cfg = BackendConfig {
        selection: BackendConfig::resolve(file.backend.as_deref(), cli.backend.as_deref())?,
        toy,
        external_path: None,
    };
    let registry = BackendRegistry::new();
    if backend::probe(&cfg, &registry)?.is_none() {
        log::info!("no backbone configured, using the toy backend");
    }
    let backend = backend::load(&cfg, &registry)?;
    let cache_dir = cli.cache_dir.clone().or_else(|| file.cache_dir.clone()).unwrap_or_else(|| PathBuf::from(".amk-cache"));
    let exec = if cli.sequential { ExecMode::Sequential } else { ExecMode::default() };
    Ok(Resolved {
        file,
        backend,
        seed,
        cache_dir,
        exec,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    store::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn cmd_edit(r: &Resolved, a: &EditArgs) -> Result<()> {
    let subject = r.subject(&a.gen);
    let req = EditRequest::new(subject.clone(), a.age, a.condition.clone())?;
    let preset = r.preset(a.preset.as_deref())?;
    let mode = r.refine(a.refine.as_deref())?;
    let steps = r.steps(&a.gen);
    let g = r.g(&a.gen);
    let source_age = r.source_age(&a.gen);

    let llm = if mode == RefineMode::Llm { r.llm() } else { None };
    let refined = prompt::refine_prompt(&req, mode, &ConditionCatalog::builtin(), llm.as_deref())?;
    if let Some(w) = &refined.warning {
        log::warn!("{w}");
    }

    let input_bytes = fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let permit = r.backend.acquire();
    let backbone = permit.backbone();
    let schedule = StepSchedule::uniform(steps)?;
    let latent = backend::encode_path(backbone, &a.image)?;
    let src = edit::source_prompt(&subject, source_age);
    let inversion = edit::invert(backbone, &latent, &schedule, &Conditioning::prompt(&src))?;

    let mut sar_weight = None;
    let shift = if preset.uses_sar() {
        let settings = r.sar();
        let dir = sar::synthetic_direction(&a.image, backbone, &schedule, &settings, &r.cache_dir, r.exec)?;
        let shift = edit::sar_shift(Arc::new(dir.direction), a.age as f32)?;
        sar_weight = Some(shift.weight);
        Some(shift)
    } else {
        None
    };
    let mut cfg: MixingConfig = preset.config(g, shift);
    cfg.exec = r.exec;
    let (png, _) = edit::render(backbone, &inversion, &schedule, &refined.text, &cfg)?;
    write_file(&a.out, &png)?;

    let meta = json!({
        "input": a.image,
        "input_sha256_16": sar::input_hash(&input_bytes),
        "backend": backbone.descriptor().name,
        "seed": r.seed,
        "steps": steps,
        "schedule": schedule.id(),
        "preset": preset,
        "label": preset.label(),
        "g": g,
        "subject": subject,
        "source_age": source_age,
        "target_age": a.age,
        "condition": a.condition,
        "source_prompt": src,
        "prompt": refined,
        "sar_weight": sar_weight,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_file(&sidecar(&a.out), format!("{:#}\n", meta).as_bytes())?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_ablate(r: &Resolved, a: &AblateArgs) -> Result<()> {
    let setup = AblationSetup {
        subject: r.subject(&a.gen),
        source_age: r.source_age(&a.gen),
        target_age: a.age,
        condition: a.condition.clone(),
        g: r.g(&a.gen),
        steps: r.steps(&a.gen),
        sar: r.sar(),
    };
    let adapters = Adapters {
        face: Some(&PixelEmbedder),
        ..Default::default()
    };
    let permit = r.backend.acquire();
    let run = ablation::run_ablation(permit.backbone(), &a.image, &setup, &r.cache_dir, &adapters, r.exec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for row in &run.rows {
        let path = ablation::image_path(&a.out, row.preset);
        write_file(&path, &row.png)?;
        let meta = json!({
            "input": a.image,
            "prompt": run.prompt,
            "seed": r.seed,
            "steps": setup.steps,
            "preset": row.preset,
            "label": row.label,
            "config": row.config,
        });
        write_file(&sidecar(&path), format!("{:#}\n", meta).as_bytes())?;
    }
    let records: Vec<_> = run.rows.iter().map(|r| r.record.clone()).collect();
    write_file(&a.out.join("records.jsonl"), eval::to_jsonl(&records).as_bytes())?;
    write_file(&a.out.join("report.txt"), run.report.to_text().as_bytes())?;
    write_file(&a.out.join("report.csv"), run.report.to_csv().as_bytes())?;
    print!("{}", run.report.to_text());
    Ok(())
}

fn runtime(r: &Resolved) -> Result<Runtime> {
    let mut rt = Runtime::new(r.backend.clone());
    rt.refine = r.refine(None)?;
    rt.llm = if rt.refine == RefineMode::Llm { r.llm() } else { None };
    rt.exec = r.exec;
    Ok(rt)
}

fn cmd_tree(r: &Resolved, t: &TreeCommand) -> Result<()> {
    match t {
        TreeCommand::Init {
            dir,
            image,
            age,
            preset,
            gen,
        } => {
            let sar = r.sar();
            let settings = TreeSettings {
                steps: r.steps(gen),
                seed: r.seed,
                g: r.g(gen),
                preset: r.preset(preset.as_deref())?,
                sar_age_low: sar.age_low,
                sar_age_high: sar.age_high,
                sar_cluster_size: sar.cluster_size,
            };
            let name = r.backend.descriptor().name.clone();
            Tree::create(dir, image, &r.subject(gen), *age, &name, settings)?;
            println!("created tree at {}", dir.display());
        }
        TreeCommand::Branch {
            dir,
            parent,
            age,
            condition,
            preset,
            g,
            from_root,
        } => {
            let (tree, pending) = Tree::open(dir)?;
            if !pending.is_empty() {
                log::warn!("{} pending job(s) left from an earlier run; `amk tree serve` resumes them", pending.len());
            }
            let req = BranchRequest {
                parent_id: parent.clone(),
                condition: condition.clone(),
                age_target: *age,
                overrides: Some(Overrides {
                    preset: preset.as_deref().map(str::parse).transpose()?,
                    g: *g,
                    from_root: from_root.then_some(true),
                }),
            };
            let id = tree.grow_branch(&req, &runtime(r)?)?;
            let m = tree.manifest();
            let node = m.node(&id).ok_or_else(|| anyhow!("node {id} vanished"))?;
            match &node.error {
                Some(e) => bail!("branch {id} failed: {e}"),
                None => println!("{id} {}", dir.join(&node.image_ref).display()),
            }
        }
        TreeCommand::Show { dir, json } => {
            let (tree, _) = Tree::open(dir)?;
            if *json {
                print!("{}", String::from_utf8_lossy(&tree.manifest().to_bytes()));
            } else {
                print!("{}", tree.render_ascii());
            }
        }
        TreeCommand::Serve { dir, addr } => {
            let handle = server::serve(dir, *addr, runtime(r)?)?;
            println!("listening on {}", handle.url());
            handle.wait();
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Conditions = cli.command {
        for key in prompt::condition_catalog() {
            println!("{key}");
        }
        return Ok(());
    }
    let r = resolve(&cli)?;
    match &cli.command {
        Command::Edit(a) => cmd_edit(&r, a),
        Command::Ablate(a) => cmd_ablate(&r, a),
        Command::Tree(t) => cmd_tree(&r, t),
        Command::Portrait { out, index } => {
            let toy = amk_core::toy::ToyBackend::new(r.file.toy.clone().unwrap_or_default());
            write_file(out, &backend::png_bytes(&toy.sample_portrait(*index))?)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Conditions => unreachable!(),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
