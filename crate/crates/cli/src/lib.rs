//! Command-line front end: scene synthesis, feature dumps, training,
//! rendering, evaluation and the gradient suite.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use moments::encoder::Encoder;
use moments::error::{Error, Result};
use moments::gabor::{self, make_kernel};
use moments::gradcheck;
use moments::image::Image;
use moments::metrics::{ImageMetrics, MetricReport};
use moments::model::{Model, ModelConfig};
use moments::renderer::save_raw_image;
use moments::scene::{load_scene, save_scene, synth_scene, Scene, SynthSpec};
use moments::train::{evaluate_views, load_checkpoint, train_loop, write_loss_trace, FreezeFlags, TrainConfig};
use moments::zernike::{moments, ZernikeBasis, ORDER_CAP};

#[derive(Parser, Debug)]
#[command(name = "moments", version, about = "Moment-feature radiance fields at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic sphere scene (scene.json + PNGs).
    Synth(SynthArgs),
    /// Encode an image into a feature volume file.
    Extract(ExtractArgs),
    /// Dump the Gabor filter bank and, optionally, its responses to an image.
    GaborBank(GaborArgs),
    /// Dump the Zernike basis and, optionally, the moments of an image patch.
    Zernike(ZernikeArgs),
    /// Train on a scene; writes a loss trace, a checkpoint and held-out metrics.
    Train(TrainArgs),
    /// Render one view of a scene from a checkpoint.
    Render(RenderArgs),
    /// Score predicted images against ground truth.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    views: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Model size.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Drop the Gabor stage.
    #[arg(long)]
    no_gabor: bool,
    /// Drop the Zernike stack.
    #[arg(long)]
    no_zernike: bool,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        let mut cfg = match self.preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::Full => ModelConfig::default(),
        };
        cfg.encoder.use_gabor = !self.no_gabor;
        cfg.encoder.use_zernike = !self.no_zernike;
        cfg
    }
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Encoder weights; freshly initialized from --seed when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct GaborArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = gabor::DEFAULT_KERNEL_SIZE)]
    size: usize,
    /// Also write the bank's responses to this image.
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ZernikeArgs {
    #[arg(long)]
    out: PathBuf,
    /// Side length of the sampling grid.
    #[arg(long, default_value_t = 33)]
    size: usize,
    /// Also write the moments of the patch of this image centered at --row/--col.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    row: Option<usize>,
    #[arg(long)]
    col: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Rays per iteration.
    #[arg(long, default_value_t = TrainConfig::default().batch_rays)]
    batch: usize,
    /// Views used for supervision and conditioning (default: all not held out).
    #[arg(long, value_delimiter = ',')]
    train_views: Vec<usize>,
    /// Held-out views rendered and scored after training.
    #[arg(long, value_delimiter = ',')]
    eval_views: Vec<usize>,
    /// Output directory (default: ./run).
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Print the loss every this many iterations.
    #[arg(long, default_value_t = 0)]
    log_every: usize,
    #[arg(long)]
    freeze_gabor: bool,
    #[arg(long)]
    freeze_zernike: bool,
    #[arg(long)]
    freeze_trunk: bool,
    #[arg(long)]
    freeze_field: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Camera to render.
    #[arg(long)]
    view: usize,
    /// Conditioning views (default: every other view).
    #[arg(long, value_delimiter = ',')]
    source_views: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the unquantized render as an MIMG file.
    #[arg(long)]
    raw: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted images; pairs up with --gt in order.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    /// Scene label for the report rows.
    #[arg(long, default_value = "scene")]
    scene: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Extract(a) => extract(a),
        Command::GaborBank(a) => gabor_bank(a),
        Command::Zernike(a) => zernike(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec { n_views: a.views, size: a.size, seed: a.seed, ..SynthSpec::default() };
    let (scene, _) = synth_scene(&spec)?;
    save_scene(&scene, &a.out)?;
    println!("wrote {} views to {}", scene.len(), a.out.display());
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let (encoder, store) = match &a.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path, 1e-4)?;
            (Encoder::new(ck.config.encoder)?, ck.params)
        }
        None => {
            let model = Model::new(a.model.config())?;
            let store = model.init_params(a.seed);
            (model.encoder, store)
        }
    };
    let image = Image::load_png(&a.image)?;
    let vol = encoder.encode(&store, &image)?;
    vol.save(&a.out)?;
    println!("{}x{}x{} features -> {}", vol.height, vol.width, vol.dim, a.out.display());
    Ok(())
}

fn gabor_bank(a: GaborArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let mut kernels = Vec::new();
    let mut sidecar = String::from("index,lambda,theta,psi,sigma,gamma,k1,k2,k3,k4,k5,kernel_min,kernel_max");
    let image = a.image.as_deref().map(Image::load_png).transpose()?;
    if image.is_some() {
        sidecar.push_str(",response_min,response_max");
    }
    sidecar.push('\n');
    for (i, (p, s)) in gabor::default_bank().into_iter().enumerate() {
        let k = make_kernel(a.size, p, s)?;
        fs::write(a.out.join(format!("kernel_{i}.csv")), k.to_csv())?;
        let (img, lo, hi) = k.as_image().normalized();
        img.save_png(&a.out.join(format!("kernel_{i}.png")))?;
        sidecar.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{},{},{lo},{hi}",
            p.lambda, p.theta, p.psi, p.sigma, p.gamma, s.k[0], s.k[1], s.k[2], s.k[3], s.k[4]
        ));
        if let Some(img) = &image {
            let resp = gabor::gabor_layer(img, std::slice::from_ref(&k))?;
            let (r, lo, hi) = resp.normalized();
            r.save_png(&a.out.join(format!("response_{i}.png")))?;
            sidecar.push_str(&format!(",{lo},{hi}"));
        }
        sidecar.push('\n');
        kernels.push(k);
    }
    fs::write(a.out.join("bank.csv"), sidecar)?;
    println!("wrote {} filters to {}", kernels.len(), a.out.display());
    Ok(())
}

fn zernike(a: ZernikeArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let basis = ZernikeBasis::new(ORDER_CAP, a.size)?;
    fs::write(a.out.join("basis.csv"), basis.to_csv())?;
    let mut gram = String::new();
    for row in basis.gram() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        gram.push_str(&line.join(","));
        gram.push('\n');
    }
    fs::write(a.out.join("gram.csv"), gram)?;
    if let Some(path) = &a.image {
        let gray = Image::load_png(path)?.channel_sum();
        let n = a.size;
        let (row, col) = (a.row.unwrap_or(gray.height / 2), a.col.unwrap_or(gray.width / 2));
        let mut patch = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let r = (row + i) as isize - (n / 2) as isize;
                let c = (col + j) as isize - (n / 2) as isize;
                patch.push(gray.at(
                    moments::image::reflect(r, gray.height),
                    moments::image::reflect(c, gray.width),
                    0,
                ));
            }
        }
        fs::write(a.out.join("moments.csv"), moments(&patch, &basis)?.to_csv(&basis))?;
    }
    println!("wrote basis ({} planes, grid {n}) to {}", basis.len(), a.out.display(), n = a.size);
    Ok(())
}

fn held_out_split(scene: &Scene, train: &[usize], eval: &[usize]) -> Vec<usize> {
    if train.is_empty() {
        (0..scene.len()).filter(|v| !eval.contains(v)).collect()
    } else {
        train.to_vec()
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let train_views = held_out_split(&scene, &a.train_views, &a.eval_views);
    let train_scene = scene.select(&train_views)?;
    let model = Model::new(a.model.config())?;
    fs::create_dir_all(&a.out)?;
    let checkpoint = a.out.join("model.mfp1");
    let cfg = TrainConfig {
        iterations: a.iters,
        batch_rays: a.batch,
        lr: a.lr,
        seed: a.seed,
        log_every: a.log_every,
        checkpoint: Some(checkpoint.clone()),
        freeze: FreezeFlags {
            gabor: a.freeze_gabor,
            zernike: a.freeze_zernike,
            trunk: a.freeze_trunk,
            field: a.freeze_field,
        },
    };
    let out = train_loop(&model, model.init_params(a.seed), &train_scene, &cfg)?;
    write_loss_trace(&a.out.join("loss.csv"), &out.loss_trace)?;
    println!("trained {} iterations; checkpoint {}", a.iters, checkpoint.display());
    if !a.eval_views.is_empty() {
        let targets = scene.select(&a.eval_views)?;
        let name = scene_label(&a.scene);
        let (report, renders) = evaluate_views(&model, &out.params, &train_scene, &targets, &a.eval_views, &name)?;
        for (img, id) in renders.iter().zip(&a.eval_views) {
            img.save_png(&a.out.join(format!("eval_view{id}.png")))?;
        }
        let csv = report.to_csv();
        fs::write(a.out.join("metrics.csv"), &csv)?;
        print!("{csv}");
    }
    Ok(())
}

fn scene_label(path: &Path) -> String {
    path.file_name().and_then(|n| n.to_str()).unwrap_or("scene").to_string()
}

fn render(a: RenderArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, 1e-4)?;
    let scene = load_scene(&a.scene)?;
    let target = *scene
        .cameras
        .get(a.view)
        .ok_or_else(|| Error::Argument(format!("view {} out of range", a.view)))?;
    let sources = if a.source_views.is_empty() {
        let others: Vec<usize> = (0..scene.len()).filter(|&v| v != a.view).collect();
        if others.is_empty() { vec![a.view] } else { others }
    } else {
        a.source_views.clone()
    };
    let model = Model::new(ck.config)?;
    let mut cache = moments::encoder::FeatureCache::new();
    let img = model.render_view(&ck.params, &scene.select(&sources)?, &target, &mut cache)?;
    img.save_png(&a.out)?;
    if let Some(raw) = &a.raw {
        save_raw_image(&img, raw)?;
    }
    println!("rendered view {} -> {}", a.view, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.pred.len() != a.gt.len() {
        return Err(Error::Argument(format!("{} predictions for {} references", a.pred.len(), a.gt.len())));
    }
    let mut report = MetricReport::default();
    for (i, (p, g)) in a.pred.iter().zip(&a.gt).enumerate() {
        report.push(ImageMetrics::measure(&a.scene, i, &Image::load_png(p)?, &Image::load_png(g)?)?);
    }
    let csv = report.to_csv();
    match &a.out {
        Some(path) => fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = gradcheck::run_suite(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:4} {:<22} max rel err {:.3e} (limit {:.0e}, {} coords)", r.name, r.max_rel_err, r.limit, r.coords);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
