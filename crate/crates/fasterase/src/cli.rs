//! Command-line surface tying the library into reproducible experiments.
//!
//! Five commands cover the full workflow: `gen-data` writes a synthetic
//! corpus, `train-teacher` and `distill` run the two training phases,
//! `infer` removes objects from held-out scenes (plain or token-cached),
//! and `report` aggregates a run directory's logs into tables and
//! attention-map images.
//!
//! Every training and inference command takes a `--config` file
//! ([`RunConfig`]); relative paths inside it resolve against the config
//! file's directory. Each such command writes the canonical config text to
//! `<out_dir>/config.txt` and appends records to a log in the output
//! directory. Log files are line-delimited and tab-separated, the first
//! field of each line is a record-type tag, and no record carries a
//! timestamp — so a run's logs are a pure function of (config, corpus,
//! seed), which is what makes whole pipelines byte-for-byte reproducible.
//!
//! Exit codes: 0 success, 2 configuration errors (including command-line
//! usage), 3 data errors, 4 numeric failures.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array3;

use crate::config::RunConfig;
use crate::error::{Error, Result, EXIT_CONFIG};
use crate::flops;
use crate::fpac::{run_cached_inference, CacheConfig, InferenceModel, InferenceOutput};
use crate::metrics::{psnr, psnr_mask, summarize, MetricRow};
use crate::model::{site_grid_divisor, UNetConfig, ATTN_SITES, VISUAL_TOKEN};
use crate::rad::{
    init_distill, init_teacher, load_distill, load_teacher, run_distill, save_distill,
    save_teacher, train_teacher,
};
use crate::scheduler::TimestepPlan;
use crate::synthgen::{generate_corpus, read_corpus, write_corpus, CorpusConfig, Scene};

/// Training commands persist a checkpoint after at most this many
/// iterations, so an interrupted run resumes from a recent point.
pub const CHECKPOINT_EVERY: u64 = 50;

/// Upscale factor for rendered attention-map images (nearest neighbor).
const MAP_IMAGE_SCALE: u32 = 8;

#[derive(Parser)]
#[command(
    name = "fasterase",
    version,
    about = "Few-step object removal with attention-guided token caching",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CacheMode {
    On,
    Off,
}

impl CacheMode {
    fn as_str(self) -> &'static str {
        match self {
            CacheMode::On => "on",
            CacheMode::Off => "off",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic scene corpus file.
    GenData {
        /// Root seed; scene i is generated from seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of scenes.
        #[arg(long, default_value_t = 512)]
        count: u32,
        /// Output corpus path.
        #[arg(long)]
        out: PathBuf,
        /// Scene side length in pixels (multiple of 16).
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        /// Disable shadow effects.
        #[arg(long)]
        no_shadow: bool,
        /// Disable reflection effects.
        #[arg(long)]
        no_reflection: bool,
    },
    /// Train the many-step teacher denoiser.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Distill the teacher into a few-step student with an adversarial
    /// critic.
    Distill {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run object removal over the held-out corpus split.
    Infer {
        #[arg(long)]
        config: PathBuf,
        /// Token caching on or off.
        #[arg(long, value_enum)]
        cache: CacheMode,
        /// Sampling plan length; defaults to the role's configured length.
        #[arg(long)]
        steps: Option<usize>,
        /// Which checkpoint to sample from.
        #[arg(long, value_enum, default_value_t = Role::Student)]
        role: Role,
        /// Also record per-step attention maps (first scene) for the
        /// report command to render.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Aggregate a run directory's logs into tables and attention-map
    /// images.
    Report {
        /// Run directory holding `*.log.tsv` files.
        run_dir: PathBuf,
    },
}

/// Parses command-line arguments from the environment, runs the command,
/// and returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one parsed command.
pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { seed, count, out, image_size, no_shadow, no_reflection } => {
            cmd_gen_data(seed, count, &out, image_size, no_shadow, no_reflection)
        }
        Command::TrainTeacher { config } => cmd_train_teacher(&config),
        Command::Distill { config } => cmd_distill(&config),
        Command::Infer { config, cache, steps, role, dump_maps } => {
            cmd_infer(&config, cache, steps, role, dump_maps)
        }
        Command::Report { run_dir } => cmd_report(&run_dir),
    }
}

fn cmd_gen_data(
    seed: u64,
    count: u32,
    out: &Path,
    image_size: usize,
    no_shadow: bool,
    no_reflection: bool,
) -> Result<()> {
    let cfg = CorpusConfig {
        image_size,
        count,
        shadow_enabled: !no_shadow,
        reflection_enabled: !no_reflection,
        ..CorpusConfig::default()
    };
    let scenes = generate_corpus(&cfg, seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_corpus(&scenes, out)?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

/// Loads the run config and prepares its output directory, recording the
/// canonical config text there.
fn load_run(config_path: &Path) -> Result<(RunConfig, crate::config::ResolvedPaths)> {
    let cfg = RunConfig::read(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let paths = cfg.resolve(base);
    fs::create_dir_all(&paths.out_dir)?;
    fs::write(paths.out_dir.join("config.txt"), cfg.to_text())?;
    Ok((cfg, paths))
}

/// Scenes the training phases may see: everything before the held-out
/// tail.
fn train_split<'s>(scenes: &'s [Scene], cfg: &RunConfig) -> Result<&'s [Scene]> {
    if scenes.len() <= cfg.holdout {
        return Err(Error::config(format!(
            "corpus has {} scenes but {} are held out; nothing remains to train on",
            scenes.len(),
            cfg.holdout
        )));
    }
    Ok(&scenes[..scenes.len() - cfg.holdout])
}

/// The held-out tail, truncated to the configured evaluation count.
fn eval_split<'s>(scenes: &'s [Scene], cfg: &RunConfig) -> Result<&'s [Scene]> {
    if cfg.infer_count == 0 {
        return Err(Error::config("infer_count is 0; nothing to evaluate"));
    }
    if scenes.len() < cfg.holdout {
        return Err(Error::data(format!(
            "corpus has {} scenes, fewer than the {} configured as held out",
            scenes.len(),
            cfg.holdout
        )));
    }
    let held = &scenes[scenes.len() - cfg.holdout..];
    Ok(&held[..cfg.infer_count])
}

/// Opens a log for appending; reports whether it was empty (i.e. a header
/// should be written). Headers carry only resume-invariant fields so an
/// interrupted-and-resumed run produces byte-identical logs to an
/// uninterrupted one.
fn open_log_append(path: &Path) -> Result<(BufWriter<fs::File>, bool)> {
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let empty = file.metadata()?.len() == 0;
    Ok((BufWriter::new(file), empty))
}

fn cmd_train_teacher(config_path: &Path) -> Result<()> {
    let (cfg, paths) = load_run(config_path)?;
    let scenes = read_corpus(&paths.corpus)?;
    let train = train_split(&scenes, &cfg)?;
    let sched = cfg.schedule()?;

    let mut state = if paths.teacher_ckpt.exists() {
        let st = load_teacher(&paths.teacher_ckpt)?;
        if st.cfg != cfg.unet()? {
            return Err(Error::config(
                "existing teacher checkpoint was trained under a different model configuration",
            ));
        }
        if st.tc != cfg.teacher_config() {
            return Err(Error::config(
                "existing teacher checkpoint was trained under different hyperparameters",
            ));
        }
        st
    } else {
        init_teacher(&cfg.unet()?, cfg.teacher_config())?
    };

    let (mut log, empty) = open_log_append(&paths.out_dir.join("teacher.log.tsv"))?;
    if empty {
        writeln!(
            log,
            "run\tteacher\tbatch\t{}\tlr\t{:?}\tweight_decay\t{:?}\tlambda_mask\t{:?}\tmask_site\t{}",
            cfg.teacher_batch, cfg.teacher_lr, cfg.teacher_weight_decay, cfg.lambda_mask,
            cfg.mask_site
        )?;
    }
    if let Some(parent) = paths.teacher_ckpt.parent() {
        fs::create_dir_all(parent)?;
    }
    while state.iter < cfg.teacher_iters {
        let chunk = (cfg.teacher_iters - state.iter).min(CHECKPOINT_EVERY);
        train_teacher(&mut state, train, &sched, chunk, Some(&mut log), Some(&paths.out_dir))?;
        log.flush()?;
        save_teacher(&state, &paths.teacher_ckpt)?;
    }
    save_teacher(&state, &paths.teacher_ckpt)?;
    log.flush()?;
    println!(
        "teacher at iteration {} saved to {}",
        state.iter,
        paths.teacher_ckpt.display()
    );
    Ok(())
}

fn cmd_distill(config_path: &Path) -> Result<()> {
    let (cfg, paths) = load_run(config_path)?;
    let scenes = read_corpus(&paths.corpus)?;
    let train = train_split(&scenes, &cfg)?;
    let sched = cfg.schedule()?;

    let mut state = if paths.student_ckpt.exists() {
        let st = load_distill(&paths.student_ckpt)?;
        if st.cfg != cfg.unet()? {
            return Err(Error::config(
                "existing student checkpoint was trained under a different model configuration",
            ));
        }
        if st.dc != cfg.distill_config() {
            return Err(Error::config(
                "existing student checkpoint was trained under different hyperparameters",
            ));
        }
        st
    } else {
        let teacher = load_teacher(&paths.teacher_ckpt)?;
        if teacher.cfg != cfg.unet()? {
            return Err(Error::config(
                "teacher checkpoint was trained under a different model configuration",
            ));
        }
        init_distill(&teacher, cfg.distill_config())?
    };

    let (mut log, empty) = open_log_append(&paths.out_dir.join("distill.log.tsv"))?;
    if empty {
        writeln!(
            log,
            "run\tdistill\tplan_steps\t{}\tbatch\t{}\tlr\t{:?}\tweight_decay\t{:?}\tmask_site\t{}\tperceptual\t{}",
            cfg.student_steps, cfg.distill_batch, cfg.distill_lr, cfg.distill_weight_decay,
            cfg.mask_site, cfg.perceptual
        )?;
        writeln!(
            log,
            "weights\t{:?}\t{:?}\t{:?}\t{:?}",
            cfg.weights.diff, cfg.weights.lpips, cfg.weights.gan, cfg.weights.mask
        )?;
    }
    if let Some(parent) = paths.student_ckpt.parent() {
        fs::create_dir_all(parent)?;
    }
    while state.iter < cfg.distill_iters {
        let chunk = (cfg.distill_iters - state.iter).min(CHECKPOINT_EVERY);
        run_distill(&mut state, train, &sched, chunk, Some(&mut log), Some(&paths.out_dir), None)?;
        log.flush()?;
        save_distill(&state, &paths.student_ckpt)?;
    }
    save_distill(&state, &paths.student_ckpt)?;
    log.flush()?;
    println!(
        "student at iteration {} saved to {}",
        state.iter,
        paths.student_ckpt.display()
    );
    Ok(())
}

fn site_token_count(image_size: usize, site: &str) -> Result<usize> {
    let side = image_size / site_grid_divisor(site)?;
    Ok(side * side)
}

/// Mean in record order; both the infer command and the report command use
/// this, so their aggregates agree bitwise.
fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn cmd_infer(
    config_path: &Path,
    cache: CacheMode,
    steps_flag: Option<usize>,
    role: Role,
    dump_maps: bool,
) -> Result<()> {
    let (cfg, paths) = load_run(config_path)?;
    let ckpt = match role {
        Role::Teacher => &paths.teacher_ckpt,
        Role::Student => &paths.student_ckpt,
    };
    let model = InferenceModel::load(ckpt)?;
    if model.role != role.as_str() {
        return Err(Error::data(format!(
            "checkpoint at {} holds role {:?}, but --role {} was requested",
            ckpt.display(),
            model.role,
            role.as_str()
        )));
    }
    if model.cfg != cfg.unet()? {
        return Err(Error::config(
            "checkpoint model configuration disagrees with the run config",
        ));
    }

    let steps = steps_flag.unwrap_or(match role {
        Role::Teacher => cfg.teacher_steps,
        Role::Student => cfg.student_steps,
    });
    let sched = cfg.schedule()?;
    let plan = TimestepPlan::trailing(sched.len(), steps)?;
    let cache_cfg = match cache {
        CacheMode::On => cfg.cache.clone(),
        CacheMode::Off => CacheConfig::disabled(),
    };
    let consume_step = cache_cfg.validate(&model.cfg, plan.len())?;

    let scenes = read_corpus(&paths.corpus)?;
    let eval = eval_split(&scenes, &cfg)?;

    let ident = format!("{}-{}-{}", role.as_str(), cache.as_str(), steps);
    let log_path = paths.out_dir.join(format!("infer-{ident}.log.tsv"));
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    writeln!(
        log,
        "run\tinfer\trole\t{}\tcache\t{}\tsteps\t{}\tseed\t{}",
        role.as_str(),
        cache.as_str(),
        steps,
        cfg.seed
    )?;

    let image_dir = paths.out_dir.join("images").join(&ident);
    fs::create_dir_all(&image_dir)?;

    let dense_total = flops::count_dense_run(&model.cfg, cfg.image_size, plan.len())?.total;
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut baselines: Vec<f64> = Vec::new();
    let mut flops_sum: u64 = 0;

    for (idx, scene) in eval.iter().enumerate() {
        let out = run_cached_inference(&model, scene, &plan, &cache_cfg, &sched, cfg.seed)?;
        out.verify_cache_exactness()?;

        let row = MetricRow {
            scene: scene.seed,
            psnr: psnr(&out.image, &scene.gt_background)?,
            psnr_mask: psnr_mask(&out.image, &scene.gt_background, &scene.m_obj_eff)?,
            perceptual: None,
        };
        let baseline = psnr_mask(&scene.image, &scene.gt_background, &scene.m_obj_eff)?;
        writeln!(
            log,
            "metric\t{}\t{:?}\t{:?}\tabsent\t{:?}",
            row.scene, row.psnr, row.psnr_mask, baseline
        )?;
        writeln!(log, "flops\t{}\t{}", scene.seed, out.flops.total)?;
        writeln!(log, "savings\t{}\t{}\t{}", scene.seed, dense_total, out.flops.total)?;
        write_fraction_records(&mut log, &cfg, &cache_cfg, consume_step, scene.seed, &out)?;
        if dump_maps && idx == 0 {
            write_map_records(&mut log, &out)?;
        }
        write_scene_strip(
            &image_dir.join(format!("scene-{}.png", scene.seed)),
            &scene.image,
            &out.image,
            &scene.gt_background,
        )?;

        flops_sum += out.flops.total;
        baselines.push(baseline);
        rows.push(row);
    }

    let summary = summarize(&rows)?;
    writeln!(
        log,
        "summary\t{}\t{:?}\t{:?}\tabsent\t{:?}\t{}",
        summary.count,
        summary.mean_psnr,
        summary.mean_psnr_mask,
        mean(&baselines),
        flops_sum
    )?;
    log.flush()?;
    println!(
        "evaluated {} scenes ({} steps, cache {}); mean masked PSNR {:.2} dB; log at {}",
        summary.count,
        steps,
        cache.as_str(),
        summary.mean_psnr_mask,
        log_path.display()
    );
    Ok(())
}

/// One record per (step, attention site): the token count and how many
/// tokens the step computed there. Every record is `n_f = n` except cached
/// sites at the consuming step, whose counts come from the run's own audit.
fn write_fraction_records(
    log: &mut impl Write,
    cfg: &RunConfig,
    cache_cfg: &CacheConfig,
    consume_step: usize,
    scene_seed: u64,
    out: &InferenceOutput,
) -> Result<()> {
    for sf in &out.flops.steps {
        for (site, _) in &sf.foreground {
            let n = site_token_count(cfg.image_size, site)?;
            let n_f = if cache_cfg.enabled()
                && sf.step == consume_step
                && cache_cfg.layers.iter().any(|l| l == site)
            {
                let audit = out
                    .audit
                    .iter()
                    .find(|a| a.site == *site)
                    .ok_or_else(|| Error::data(format!("no cache audit for site {site:?}")))?;
                audit.mask.n_foreground()
            } else {
                n
            };
            writeln!(log, "fraction\t{scene_seed}\t{}\t{site}\t{n_f}\t{n}", sf.step)?;
        }
    }
    Ok(())
}

/// The per-step attention column over the token grid, one record per
/// (step, site), for the report command to render as grayscale images.
fn write_map_records(log: &mut impl Write, out: &InferenceOutput) -> Result<()> {
    for rec in &out.steps {
        for (site, map) in &rec.maps {
            let col = map.column(VISUAL_TOKEN);
            let side = (col.len() as f64).sqrt() as usize;
            if side * side != col.len() {
                return Err(Error::data(format!(
                    "attention map at {site:?} has {} rows, not a square grid",
                    col.len()
                )));
            }
            let values: Vec<String> = col.iter().map(|v| format!("{v:?}")).collect();
            writeln!(log, "map\t{}\t{site}\t{side}\t{}", rec.step, values.join(","))?;
        }
    }
    Ok(())
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Side-by-side strip: input, output, clean background, separated by white
/// columns.
fn write_scene_strip(
    path: &Path,
    input: &Array3<f32>,
    output: &Array3<f32>,
    gt: &Array3<f32>,
) -> Result<()> {
    let (_, h, w) = input.dim();
    let panels = [input, output, gt];
    let total_w = 3 * w + 2;
    let mut img = image::RgbImage::from_pixel(total_w as u32, h as u32, image::Rgb([255; 3]));
    for (p, panel) in panels.iter().enumerate() {
        let x0 = p * (w + 1);
        for r in 0..h {
            for c in 0..w {
                let px = image::Rgb([
                    to_byte(panel[(0, r, c)]),
                    to_byte(panel[(1, r, c)]),
                    to_byte(panel[(2, r, c)]),
                ]);
                img.put_pixel((x0 + c) as u32, r as u32, px);
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::data(format!("cannot write image {}: {e}", path.display())))
}

/// Renders one attention column as an upscaled grayscale image,
/// normalized by its own maximum.
fn write_map_image(path: &Path, side: usize, values: &[f64]) -> Result<()> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let px = side as u32 * MAP_IMAGE_SCALE;
    let mut img = image::GrayImage::new(px, px);
    for y in 0..px {
        for x in 0..px {
            let r = (y / MAP_IMAGE_SCALE) as usize;
            let c = (x / MAP_IMAGE_SCALE) as usize;
            let v = if max > 0.0 { values[r * side + c] / max } else { 0.0 };
            img.put_pixel(x, y, image::Luma([to_byte(v as f32)]));
        }
    }
    img.save(path)
        .map_err(|e| Error::data(format!("cannot write image {}: {e}", path.display())))
}

// ---------------------------------------------------------------------
// report
// ---------------------------------------------------------------------

/// A parsed log: its records, split on tabs.
struct LogRecords {
    records: Vec<Vec<String>>,
}

impl LogRecords {
    fn read(path: &Path) -> Result<LogRecords> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read log {}: {e}", path.display())))?;
        let records = text
            .lines()
            .map(|l| l.split('\t').map(str::to_string).collect())
            .collect();
        Ok(LogRecords { records })
    }

    fn of_type<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a Vec<String>> + 'a {
        self.records.iter().filter(move |r| r.first().map(String::as_str) == Some(tag))
    }
}

fn parse_field<T: std::str::FromStr>(record: &[String], idx: usize, what: &str) -> Result<T> {
    record
        .get(idx)
        .and_then(|s| s.parse::<T>().ok())
        .ok_or_else(|| Error::data(format!("log record field {idx} ({what}) is malformed")))
}

/// Aggregated view of one infer log.
struct InferRun {
    ident: String,
    scenes: usize,
    mean_psnr: f64,
    mean_psnr_mask: f64,
    mean_baseline: f64,
    flops_sum: u64,
    /// `(scene, step, site, n_f, n)` in record order.
    fractions: Vec<(u64, usize, String, u64, u64)>,
    /// `(scene, dense_total, cached_total)` in record order.
    savings: Vec<(u64, u64, u64)>,
    /// `(step, site, side, values)` map dumps, if any.
    maps: Vec<(usize, String, usize, Vec<f64>)>,
}

fn parse_infer_log(log: &LogRecords) -> Result<InferRun> {
    let run = log
        .of_type("run")
        .next()
        .ok_or_else(|| Error::data("infer log is missing its run header"))?;
    if run.len() < 8 || run[1] != "infer" {
        return Err(Error::data("infer log header is malformed"));
    }
    let ident = format!("{}-{}-{}", run[3], run[5], run[7]);

    let mut rows: Vec<MetricRow> = Vec::new();
    let mut baselines: Vec<f64> = Vec::new();
    for m in log.of_type("metric") {
        rows.push(MetricRow {
            scene: parse_field(m, 1, "scene")?,
            psnr: parse_field(m, 2, "psnr")?,
            psnr_mask: parse_field(m, 3, "psnr_mask")?,
            perceptual: match m.get(4).map(String::as_str) {
                Some("absent") => None,
                Some(v) => Some(v.parse::<f64>().map_err(|_| {
                    Error::data(format!("perceptual value {v:?} is malformed"))
                })?),
                None => return Err(Error::data("metric record is missing its perceptual field")),
            },
        });
        baselines.push(parse_field(m, 5, "baseline psnr_mask")?);
    }
    let summary = summarize(&rows)
        .map_err(|_| Error::data("infer log holds no metric records"))?;

    let mut flops_sum = 0u64;
    for f in log.of_type("flops") {
        flops_sum += parse_field::<u64>(f, 2, "flops total")?;
    }

    // The log's own summary must match what its records imply; a mismatch
    // means the log was edited or truncated.
    let s = log
        .of_type("summary")
        .next()
        .ok_or_else(|| Error::data("infer log is missing its summary record"))?;
    let expect = vec![
        "summary".to_string(),
        summary.count.to_string(),
        format!("{:?}", summary.mean_psnr),
        format!("{:?}", summary.mean_psnr_mask),
        "absent".to_string(),
        format!("{:?}", mean(&baselines)),
        flops_sum.to_string(),
    ];
    if *s != expect {
        return Err(Error::data(
            "infer log summary disagrees with its metric records; the log is corrupt",
        ));
    }

    let mut fractions = Vec::new();
    for f in log.of_type("fraction") {
        fractions.push((
            parse_field(f, 1, "scene")?,
            parse_field(f, 2, "step")?,
            f.get(3).cloned().ok_or_else(|| Error::data("fraction record missing site"))?,
            parse_field(f, 4, "n_f")?,
            parse_field(f, 5, "n")?,
        ));
    }
    let mut savings = Vec::new();
    for sv in log.of_type("savings") {
        savings.push((
            parse_field(sv, 1, "scene")?,
            parse_field(sv, 2, "dense total")?,
            parse_field(sv, 3, "cached total")?,
        ));
    }
    let mut maps = Vec::new();
    for m in log.of_type("map") {
        let step: usize = parse_field(m, 1, "step")?;
        let site = m.get(2).cloned().ok_or_else(|| Error::data("map record missing site"))?;
        let side: usize = parse_field(m, 3, "grid side")?;
        let values: Vec<f64> = m
            .get(4)
            .ok_or_else(|| Error::data("map record missing values"))?
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::data(format!("map value {v:?} is malformed")))
            })
            .collect::<Result<_>>()?;
        if values.len() != side * side {
            return Err(Error::data("map record length disagrees with its grid side"));
        }
        maps.push((step, site, side, values));
    }

    Ok(InferRun {
        ident,
        scenes: summary.count,
        mean_psnr: summary.mean_psnr,
        mean_psnr_mask: summary.mean_psnr_mask,
        mean_baseline: mean(&baselines),
        flops_sum,
        fractions,
        savings,
        maps,
    })
}

/// Cost of one dense step's token-proportional attention work, per token,
/// for each enabled site. Exact integers: the token-proportional op class
/// is linear in the token count with no constant part.
fn per_token_units(cfg: &UNetConfig, latent_side: usize) -> Result<Vec<(String, u64)>> {
    let dense = flops::StepTokens::dense(cfg, latent_side)?;
    let entries = flops::count_step(cfg, latent_side, &dense)?;
    let mut units = Vec::new();
    for site in ATTN_SITES {
        if !cfg.attn_sites.iter().any(|s| s == site) {
            continue;
        }
        let layer = format!("{site}.attn");
        let count = entries
            .iter()
            .find(|e| e.layer == layer && e.op_class == "attn_tokens")
            .map(|e| e.count)
            .ok_or_else(|| Error::data(format!("no token-cost entry for site {site:?}")))?;
        let n = site_token_count(latent_side, site)? as u64;
        if count % n != 0 {
            return Err(Error::numeric(format!(
                "token cost at {site:?} is not an exact per-token multiple"
            )));
        }
        units.push((site.to_string(), count / n));
    }
    Ok(units)
}

/// Verifies, per scene, that the cached run's cost equals the dense cost
/// minus exactly (skipped tokens × per-token cost) summed over all
/// fraction records. Returns the total saved cost across scenes.
fn check_savings_identity(run: &InferRun, units: &[(String, u64)]) -> Result<u64> {
    let unit_for = |site: &str| -> Result<u64> {
        units
            .iter()
            .find(|(s, _)| s == site)
            .map(|(_, u)| *u)
            .ok_or_else(|| Error::data(format!("fraction record names unknown site {site:?}")))
    };
    let mut total_saved = 0u64;
    for &(scene, dense, cached) in &run.savings {
        let mut expected_saved = 0u64;
        for (fscene, _, site, n_f, n) in &run.fractions {
            if *fscene != scene {
                continue;
            }
            expected_saved += (n - n_f) * unit_for(site)?;
        }
        if dense - cached != expected_saved {
            return Err(Error::numeric(format!(
                "savings identity violated for scene {scene}: dense {dense} - cached {cached} \
                 = {} but fractions imply {expected_saved}",
                dense - cached
            )));
        }
        total_saved += expected_saved;
    }
    Ok(total_saved)
}

fn cmd_report(run_dir: &Path) -> Result<()> {
    if !run_dir.is_dir() {
        return Err(Error::data(format!("run directory {} does not exist", run_dir.display())));
    }
    let mut log_paths: Vec<PathBuf> = fs::read_dir(run_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".log.tsv")))
        .collect();
    log_paths.sort();
    if log_paths.is_empty() {
        println!("no runs");
        return Ok(());
    }

    let mut table: Vec<String> = Vec::new();
    let mut kv: Vec<String> = Vec::new();
    kv.push(format!("report.version = {}", crate::config::CONFIG_VERSION));
    let mut infer_runs: Vec<InferRun> = Vec::new();

    for path in &log_paths {
        let log = LogRecords::read(path)?;
        let Some(header) = log.of_type("run").next() else {
            return Err(Error::data(format!("log {} has no run header", path.display())));
        };
        match header.get(1).map(String::as_str) {
            Some("teacher") => {
                let rows: Vec<&Vec<String>> = log.of_type("teacher").collect();
                let last = rows
                    .last()
                    .filter(|r| r.len() >= 5)
                    .ok_or_else(|| Error::data("teacher log holds no iteration records"))?;
                table.push(format!(
                    "train\tteacher\titers\t{}\tfinal_total\t{}\tfinal_noise_mse\t{}\tfinal_mask_term\t{}",
                    rows.len(),
                    last[2],
                    last[3],
                    last[4]
                ));
                kv.push(format!("train.teacher.iters = {}", rows.len()));
                kv.push(format!("train.teacher.final_total = {}", last[2]));
            }
            Some("distill") => {
                let weights = log
                    .of_type("weights")
                    .next()
                    .filter(|r| r.len() >= 5)
                    .ok_or_else(|| Error::data("distill log is missing its weights record"))?;
                let rows: Vec<&Vec<String>> = log.of_type("distill").collect();
                let last = rows
                    .last()
                    .filter(|r| r.len() >= 8)
                    .ok_or_else(|| Error::data("distill log holds no iteration records"))?;
                table.push(format!(
                    "train\tdistill\titers\t{}\tw_diff\t{}\tw_lpips\t{}\tw_gan\t{}\tw_mask\t{}\tfinal_gen_total\t{}\tfinal_disc\t{}",
                    rows.len(),
                    weights[1],
                    weights[2],
                    weights[3],
                    weights[4],
                    last[2],
                    last[7]
                ));
                kv.push(format!("train.distill.iters = {}", rows.len()));
                kv.push(format!("train.distill.final_gen_total = {}", last[2]));
            }
            Some("infer") => {
                let run = parse_infer_log(&log)?;
                table.push(format!(
                    "run\t{}\tscenes\t{}\tmean_psnr\t{:?}\tmean_psnr_mask\t{:?}\tperceptual\tabsent\tmean_baseline_psnr_mask\t{:?}\tflops_total\t{}",
                    run.ident,
                    run.scenes,
                    run.mean_psnr,
                    run.mean_psnr_mask,
                    run.mean_baseline,
                    run.flops_sum
                ));
                kv.push(format!("run.{}.scenes = {}", run.ident, run.scenes));
                kv.push(format!("run.{}.mean_psnr = {:?}", run.ident, run.mean_psnr));
                kv.push(format!("run.{}.mean_psnr_mask = {:?}", run.ident, run.mean_psnr_mask));
                kv.push(format!(
                    "run.{}.mean_baseline_psnr_mask = {:?}",
                    run.ident, run.mean_baseline
                ));
                kv.push(format!("run.{}.flops_total = {}", run.ident, run.flops_sum));
                infer_runs.push(run);
            }
            other => {
                return Err(Error::data(format!(
                    "log {} has unrecognized run kind {other:?}",
                    path.display()
                )));
            }
        }
    }

    // Pairwise cost ratios between sampling runs.
    for a in &infer_runs {
        for b in &infer_runs {
            if a.ident == b.ident || b.flops_sum == 0 {
                continue;
            }
            let ratio = a.flops_sum as f64 / b.flops_sum as f64;
            table.push(format!("ratio\t{}\tover\t{}\t{ratio:.2}", a.ident, b.ident));
            kv.push(format!("ratio.{}.over.{} = {ratio:.2}", a.ident, b.ident));
        }
    }

    // Foreground fractions and the savings identity need the run's model
    // configuration to price a token at each site.
    let has_savings = infer_runs.iter().any(|r| !r.savings.is_empty());
    if has_savings {
        let cfg = RunConfig::read(&run_dir.join("config.txt")).map_err(|e| {
            Error::data(format!("cannot price attention tokens without config.txt: {e}"))
        })?;
        let units = per_token_units(&cfg.unet()?, cfg.image_size)?;
        for run in &infer_runs {
            for site in ATTN_SITES {
                // Per scene, the smallest fraction at the site is the
                // consuming step's (earlier steps are all 1).
                let mut per_scene: Vec<f64> = Vec::new();
                let mut current: Option<(u64, f64)> = None;
                for (scene, _, s, n_f, n) in &run.fractions {
                    if s != site {
                        continue;
                    }
                    let frac = *n_f as f64 / *n as f64;
                    match &mut current {
                        Some((cur, min)) if cur == scene => *min = min.min(frac),
                        _ => {
                            if let Some((_, min)) = current.take() {
                                per_scene.push(min);
                            }
                            current = Some((*scene, frac));
                        }
                    }
                }
                if let Some((_, min)) = current.take() {
                    per_scene.push(min);
                }
                if per_scene.is_empty() {
                    continue;
                }
                let m = mean(&per_scene);
                table.push(format!("fraction\t{}\t{site}\t{m:?}", run.ident));
                kv.push(format!("fraction.{}.{site} = {m:?}", run.ident));
            }
            let saved = check_savings_identity(run, &units)?;
            table.push(format!("savings\t{}\tsaved\t{saved}\texact", run.ident));
            kv.push(format!("savings.{} = {saved}", run.ident));
        }
    }

    // Attention-map images, one per recorded (step, site).
    for run in &infer_runs {
        if run.maps.is_empty() {
            continue;
        }
        let dir = run_dir.join("maps").join(&run.ident);
        fs::create_dir_all(&dir)?;
        for (step, site, side, values) in &run.maps {
            write_map_image(&dir.join(format!("step{step}-{site}.png")), *side, values)?;
        }
    }

    let mut text = String::new();
    for row in &table {
        text.push_str(row);
        text.push('\n');
    }
    print!("{text}");
    fs::write(run_dir.join("report.txt"), &text)?;
    let mut kv_text = String::new();
    for line in &kv {
        kv_text.push_str(line);
        kv_text.push('\n');
    }
    fs::write(run_dir.join("report.kv"), kv_text)?;
    Ok(())
}
