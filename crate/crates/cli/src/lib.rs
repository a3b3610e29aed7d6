//! `lcnerf` subcommands. Every artifact is written under `--out`; exit code
//! 0 means success, 1 a runtime failure and 2 a usage or config error.

pub mod evaluate;

use std::fmt;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lcnerf_core::checkpoint::save_checkpoint;
use lcnerf_core::data::region_names;
use lcnerf_core::inversion_editing::{
    all_regions, invert, mask_consistency, read_bank, write_bank, EditOptions, EditSession, InvertOptions, Which,
};
use lcnerf_core::training::{generator_checkpoint, load_generator, train, StepMetrics};
use lcnerf_core::{io, Camera, Error, LatentBank, ParamStore, RadianceField, TrainConfig};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "lcnerf", version, about = "Locally controllable compositional radiance fields for faces")]
pub struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a generator; writes checkpoints, metrics.jsonl and config.toml.
    Train(TrainArgs),
    /// Render sampled faces from several views.
    Generate(GenerateArgs),
    /// Fit latents (then generator weights) to an image and mask.
    Invert(InvertArgs),
    /// Edit geometry latents so the render matches an edited mask.
    Edit(EditArgs),
    /// Copy region latents from a donor bank.
    Transfer(TransferArgs),
    /// Pixel difference and mask consistency over before/after directories.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML config; omitted means built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted `key=value` applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Print a metrics line every this many steps (0 silences).
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
}

#[derive(Args, Debug, Clone)]
pub struct ViewArgs {
    /// Elevation in degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub elevation: f64,
    /// Render side length; defaults to the training resolution.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Azimuths in degrees, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0")]
    pub views: Vec<f64>,
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Class-id mask (indexed or grayscale PNG) of the image.
    #[arg(long)]
    pub mask: PathBuf,
    /// Camera azimuth of the image in degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub azimuth: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub elevation: f64,
    #[arg(long)]
    pub latent_steps: Option<usize>,
    #[arg(long)]
    pub tune_steps: Option<usize>,
    #[arg(long)]
    pub latent_lr: Option<f64>,
    #[arg(long)]
    pub tune_lr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Latent bank to edit; without it the bank is sampled from `--seed`.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Edited class-id mask at the editing view.
    #[arg(long)]
    pub mask: PathBuf,
    /// Region ids or names to edit, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub regions: Vec<String>,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub azimuth: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub elevation: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Receiving bank; without it the bank is sampled from `--seed`.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Donor bank file.
    #[arg(long, conflicts_with = "donor_seed")]
    pub donor: Option<PathBuf>,
    /// Sample the donor bank from this seed instead.
    #[arg(long)]
    pub donor_seed: Option<u64>,
    /// Region ids or names, comma separated, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub regions: Vec<String>,
    #[arg(long, default_value = "both")]
    pub which: Which,
    /// Azimuths in degrees of the result renders.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0")]
    pub views: Vec<f64>,
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum Schema {
    Celeba,
    Toy,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of `{name}_img.png` and `{name}_mask.png` before editing.
    #[arg(long)]
    pub before: PathBuf,
    /// Same layout after editing; may hold `{name}_target.png` edited masks.
    #[arg(long)]
    pub after: PathBuf,
    /// Directory of edited masks `{name}_mask.png`.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Region names used for the table rows.
    #[arg(long, value_enum, default_value = "celeba")]
    pub schema: Schema,
    /// Boundary band in pixels removed around edited regions before measuring.
    #[arg(long, default_value_t = 3)]
    pub dilation: usize,
    /// Writes evaluation.txt and evaluation.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Directory with checkpoint files.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = 256)]
    pub max_size: usize,
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Generate(a) => cmd_generate(a, cli.seed),
        Command::Invert(a) => cmd_invert(a, cli.seed),
        Command::Edit(a) => cmd_edit(a, cli.seed),
        Command::Transfer(a) => cmd_transfer(a, cli.seed),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn mkdir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    Ok(io::write_file(path, text.as_bytes())?)
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> CliResult {
    let text = match &a.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = a.overrides.clone();
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    let config = TrainConfig::from_toml_str(&text, &overrides)?;
    let every = a.log_every;
    let ck = train(&config, &a.out, a.resume.as_deref(), |m: &StepMetrics| {
        if every > 0 && (m.step % every == 0 || m.step == 1) {
            let g = |k: &str| m.get(k).unwrap_or(f64::NAN);
            eprintln!(
                "step {:>6}  d_i {:.4}  d_im {:.4}  g {:.4}  beta {:.4}",
                m.step,
                g("d_i_total"),
                g("d_im_total"),
                g("g_total"),
                g("beta")
            );
        }
    })?;
    println!("trained {} steps; checkpoint in {}", ck.step, a.out.display());
    Ok(())
}

/// A checkpoint file, or `checkpoint.lcnf` inside a training directory.
fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("checkpoint.lcnf")
    } else {
        p.to_path_buf()
    }
}

struct Model {
    config: TrainConfig,
    field: RadianceField,
    params: ParamStore<f32>,
}

fn load_model(p: &Path) -> CliResult<Model> {
    let (config, params) = load_generator(&checkpoint_path(p)).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(Model {
        field: RadianceField::new(&config.model),
        config,
        params,
    })
}

impl Model {
    fn camera(&self, azimuth_deg: f64, elevation_deg: f64, size: Option<usize>) -> CliResult<Camera> {
        let mut c = Camera::from_config(azimuth_deg.to_radians(), elevation_deg.to_radians(), &self.config.render);
        if let Some(s) = size {
            c = c.with_resolution(s);
        }
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }

    fn session(&self, bank: LatentBank<f32>, camera: Camera) -> CliResult<EditSession> {
        Ok(EditSession::new(self.field.clone(), self.params.clone(), bank, camera, self.config.render.clone())?)
    }

    fn sampled(&self, seed: u64, camera: Camera) -> CliResult<EditSession> {
        Ok(EditSession::from_seed(self.field.clone(), self.params.clone(), seed, camera, self.config.render.clone())?)
    }

    fn bank_or_seed(&self, latents: Option<&Path>, seed: Option<u64>, camera: Camera) -> CliResult<EditSession> {
        match latents {
            Some(p) => self.session(read_bank(p)?, camera),
            None => self.sampled(seed.unwrap_or(0), camera),
        }
    }

    /// Region ids from ids, region names or `all`.
    fn regions(&self, specs: &[String]) -> CliResult<Vec<usize>> {
        let k = self.field.regions();
        let names = region_names(&self.config.data, k);
        let mut out = Vec::new();
        for s in specs {
            let s = s.trim();
            if s == "all" {
                out.extend(all_regions(k));
            } else if let Ok(i) = s.parse::<usize>() {
                if i >= k {
                    return Err(CliError::Usage(format!("region id {i} is not below {k}")));
                }
                out.push(i);
            } else if let Some(i) = names.iter().position(|n| n == s) {
                out.push(i);
            } else {
                return Err(CliError::Usage(format!("unknown region `{s}` (known: {})", names.join(", "))));
            }
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

fn write_view(dir: &Path, stem: &str, session: &EditSession, camera: &Camera) -> CliResult {
    let r = session.render_at(camera)?;
    io::write_rgb(&dir.join(format!("{stem}_img.png")), &r.image_on_white())?;
    io::write_mask(&dir.join(format!("{stem}_mask.png")), &r.labels())?;
    Ok(())
}

fn write_views(dir: &Path, session: &EditSession, azimuths: &[f64], view: &ViewArgs, model: &Model) -> CliResult {
    for (i, &az) in azimuths.iter().enumerate() {
        let cam = model.camera(az, view.elevation, view.size)?;
        write_view(dir, &format!("view_{i:02}"), session, &cam)?;
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs, seed: Option<u64>) -> CliResult {
    let model = load_model(&a.checkpoint)?;
    mkdir(&a.out)?;
    let session = model.sampled(seed.unwrap_or(0), model.camera(0.0, a.view.elevation, a.view.size)?)?;
    write_views(&a.out, &session, &a.views, &a.view, &model)?;
    write_bank(&a.out.join("latents.lclw"), &session.bank)?;
    println!("wrote {} views and latents.lclw to {}", a.views.len(), a.out.display());
    Ok(())
}

fn cmd_invert(a: InvertArgs, seed: Option<u64>) -> CliResult {
    let model = load_model(&a.checkpoint)?;
    let image = io::read_rgb(&a.image)?;
    let labels = io::read_mask(&a.mask)?;
    let (h, w, _) = image.dim();
    if labels.dim() != (h, w) {
        return Err(CliError::Runtime(format!("mask is {:?} but image is {h}x{w}", labels.dim())));
    }
    let mut camera = model.camera(a.azimuth, a.elevation, None)?;
    camera.height = h;
    camera.width = w;
    let d = InvertOptions::default();
    let options = InvertOptions {
        latent_steps: a.latent_steps.unwrap_or(d.latent_steps),
        tune_steps: a.tune_steps.unwrap_or(d.tune_steps),
        latent_lr: a.latent_lr.unwrap_or(d.latent_lr),
        tune_lr: a.tune_lr.unwrap_or(d.tune_lr),
        seed: seed.unwrap_or(d.seed),
        ..d
    };
    mkdir(&a.out)?;
    let mut log = String::new();
    let inv = invert(
        model.field.clone(),
        model.params.clone(),
        &image,
        &labels,
        camera.clone(),
        model.config.render.clone(),
        &options,
        |p| {
            log.push_str(&json!({"phase": p.phase, "iteration": p.iteration, "loss": p.loss}).to_string());
            log.push('\n');
        },
    )?;
    write_text(&a.out.join("inversion_log.jsonl"), &log)?;
    write_bank(&a.out.join("latents.lclw"), &inv.session.bank)?;
    save_checkpoint(&generator_checkpoint(&model.config, &inv.session.params), &a.out.join("generator.lcnf"))?;
    write_view(&a.out, "inverted", &inv.session, &camera)?;
    let last = inv.tune_losses.last().or(inv.latent_losses.last()).copied().unwrap_or(f64::NAN);
    println!("inversion loss {last:.5}; wrote latents.lclw and generator.lcnf to {}", a.out.display());
    Ok(())
}

fn cmd_edit(a: EditArgs, seed: Option<u64>) -> CliResult {
    let model = load_model(&a.checkpoint)?;
    let target = io::read_mask(&a.mask)?;
    let (h, w) = target.dim();
    let mut camera = model.camera(a.azimuth, a.elevation, None)?;
    camera.height = h;
    camera.width = w;
    let mut session = model.bank_or_seed(a.latents.as_deref(), seed, camera.clone())?;
    let regions = model.regions(&a.regions)?;
    // before/ and after/ hold one `edit` sample each, the layout `evaluate` reads
    let (before_dir, after_dir) = (a.out.join("before"), a.out.join("after"));
    mkdir(&before_dir)?;
    mkdir(&after_dir)?;
    let before = session.render_current()?;
    io::write_rgb(&before_dir.join("edit_img.png"), &before.image_on_white())?;
    io::write_mask(&before_dir.join("edit_mask.png"), &before.labels())?;
    let mut log = String::new();
    let options = EditOptions {
        iterations: a.iterations,
        lr: a.lr,
    };
    let outcome = session.edit(&target, &regions, &options, |p| {
        log.push_str(&json!({"iteration": p.iteration, "loss": p.loss}).to_string());
        log.push('\n');
    })?;
    write_text(&a.out.join("edit_log.jsonl"), &log)?;
    let after = session.render_current()?;
    io::write_rgb(&after_dir.join("edit_img.png"), &after.image_on_white())?;
    io::write_mask(&after_dir.join("edit_mask.png"), &after.labels())?;
    io::write_mask(&after_dir.join("edit_target.png"), &target)?;
    write_bank(&a.out.join("latents.lclw"), &session.bank)?;
    session.write_history(&a.out)?;
    let k = model.field.regions();
    let mc_before = mask_consistency(&target, &before.labels(), k)?;
    let mc_after = mask_consistency(&target, &after.labels(), k)?;
    let summary = json!({
        "regions": regions,
        "iterations": outcome.losses.len(),
        "best_iteration": outcome.best_iteration,
        "initial_loss": outcome.losses[0],
        "final_loss": outcome.final_loss(),
        "mc_before": mc_before,
        "mc_after": mc_after,
    });
    write_text(&a.out.join("edit_summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    println!(
        "edit loss {:.5} -> {:.5}; mask mismatch {:.4} -> {:.4}",
        outcome.losses[0],
        outcome.final_loss(),
        mc_before,
        mc_after
    );
    Ok(())
}

fn cmd_transfer(a: TransferArgs, seed: Option<u64>) -> CliResult {
    let model = load_model(&a.checkpoint)?;
    let camera = model.camera(0.0, a.view.elevation, a.view.size)?;
    let mut session = model.bank_or_seed(a.latents.as_deref(), seed, camera.clone())?;
    let donor = match (&a.donor, a.donor_seed) {
        (Some(p), _) => read_bank(p)?,
        (None, Some(s)) => model.sampled(s, camera)?.bank,
        (None, None) => return Err(CliError::Usage("give --donor or --donor-seed".into())),
    };
    let regions = model.regions(&a.regions)?;
    session.swap(&regions, &donor, a.which)?;
    mkdir(&a.out)?;
    write_views(&a.out, &session, &a.views, &a.view, &model)?;
    write_bank(&a.out.join("latents.lclw"), &session.bank)?;
    session.write_history(&a.out)?;
    println!("transferred regions {regions:?} ({:?}); wrote {}", a.which, a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let samples = evaluate::load_samples(&a.before, &a.after, a.target.as_deref())?;
    let names: Vec<String> = match a.schema {
        Schema::Celeba => lcnerf_core::data::CELEBA_REGIONS.iter().map(|s| s.to_string()).collect(),
        Schema::Toy => lcnerf_core::data::TOY_REGIONS.iter().map(|s| s.to_string()).collect(),
    };
    let report = evaluate::evaluate(&samples, &names, a.dilation)?;
    let table = evaluate::format_table(&report);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(dir) = &a.out {
        mkdir(dir)?;
        write_text(&dir.join("evaluation.txt"), &table)?;
        write_text(&dir.join("evaluation.json"), &json)?;
    }
    let mut stdout = std::io::stdout().lock();
    let text = if a.json { json + "\n" } else { table };
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_serve(a: ServeArgs) -> CliResult {
    if !a.checkpoints.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", a.checkpoints.display())));
    }
    let mut config = lcnerf_service::ServiceConfig::new(&a.checkpoints);
    config.max_size = a.max_size;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    eprintln!("serving http://{}/api/v1", a.addr);
    rt.block_on(lcnerf_service::serve(config, a.addr))
        .map_err(|e| CliError::Runtime(format!("server: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn errors_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::Invalid("x".into())).exit_code(), 1);
    }

    #[test]
    fn view_lists_accept_negative_degrees() {
        let c = Cli::try_parse_from(["lcnerf", "generate", "--checkpoint", "c", "--views", "-30,0,30", "--out", "o"]).unwrap();
        match c.command {
            Command::Generate(g) => assert_eq!(g.views, vec![-30.0, 0.0, 30.0]),
            _ => unreachable!(),
        }
    }
}
