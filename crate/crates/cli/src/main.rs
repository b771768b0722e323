//! `odet` command-line front end.
//!
//! Exit status: 0 on success, 1 when a check fails or a runtime error occurs,
//! 2 on a usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use odet::eval::{evaluate_dataset, ApMetric, EvalConfig};
use odet::gradcheck::{check_module, GradCheckConfig, MODULES};
use odet::layer::Layer;
use odet::pipeline::{
    clip_annotations_to_window, count_params_flops, load_ground_truth_dir, merge_patch_detections,
    parse_detections, parse_dota_annotation, parse_window_index, patch_grid, patch_id, ratio_split,
    serialize_dota_annotation, window_index_to_text, ClipConfig, ModelConfig, PatchSpec,
    WindowIndex,
};
use odet::wavelet::{
    iwt_cascade, wt_cascade, wtconv_param_count, wtconv_receptive_field, Padding, WtConv,
};
use odet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "odet", version, about = "Oriented aerial detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Haar cascade round trip plus the wavelet-conv parameter and receptive-field table.
    DemoWtconv {
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
    },
    /// Central-difference gradient check of one module.
    Gradcheck {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(MODULES))]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Tile every annotation file into overlapping patches.
    Split {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long, default_value_t = 1024)]
        size: usize,
        #[arg(long, default_value_t = 200)]
        overlap: usize,
        #[arg(long, default_value_t = 0.5)]
        keep_frac: f64,
        #[arg(long, default_value_t = 0.7)]
        difficult_below: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-category AP and mAP of a detection file against a ground-truth directory.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value = "voc07", value_parser = ["voc07", "area"])]
        metric: String,
        /// Treat detections as patch-level and merge them through this windows.txt first.
        #[arg(long)]
        windows: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        nms: f64,
    },
    /// Parameter and FLOP table of a model config.
    Count {
        #[arg(long)]
        config: PathBuf,
        /// `N,C,H,W`
        #[arg(long, value_parser = parse_dims)]
        input: [usize; 4],
    },
    /// Seeded 5:2:3 train/val/test manifest.
    UcasSplit {
        #[arg(long)]
        ids: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("invalid dimension '{p}'"))
        })
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected N,C,H,W, got {} values", v.len()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn demo_wtconv(
    levels: usize,
    size: usize,
    seed: u64,
    channels: usize,
    kernel: usize,
) -> Result<bool> {
    if size == 0 || channels == 0 {
        bail!("size and channels must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn([1, channels, size, size], &mut rng);
    let pyramid = wt_cascade(&x, levels, Padding::Reflect)?;
    let err = iwt_cascade(&pyramid)?.max_abs_diff(&x)?;
    let energy = (pyramid.energy() - x.norm_sq()).abs() / x.norm_sq();
    println!("input [1, {channels}, {size}, {size}], {levels} levels");
    println!("round-trip max |IWT(WT(x)) - x| = {err:.3e}");
    // reflect padding duplicates samples, so energy is only preserved on exact dyadic sizes
    let dyadic = levels < usize::BITS as usize && size.is_multiple_of(1 << levels);
    if dyadic {
        println!("relative energy difference      = {energy:.3e}");
    } else {
        println!("relative energy difference      = {energy:.3e} (padded levels, not checked)");
    }
    let layer = WtConv::init(&mut rng, channels, kernel, levels)?;
    let y = layer.forward(&[&x])?;
    println!("wtconv output dims {:?}", y.dims());
    println!();
    println!(
        "{:>6} {:>10} {:>16} {:>22}",
        "levels", "RF", "wtconv params", "dense depthwise RF^2"
    );
    for l in 0..=levels {
        let rf = wtconv_receptive_field(kernel, l);
        println!(
            "{:>6} {:>10} {:>16} {:>22}",
            l,
            rf,
            wtconv_param_count(channels, kernel, l),
            channels * rf * rf
        );
    }
    let ok = err <= 1e-10 && (!dyadic || energy <= 1e-10);
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn gradcheck(module: &str, seed: u64, tol: f64, step: f64) -> Result<bool> {
    let cfg = GradCheckConfig {
        tol,
        step,
        ..Default::default()
    };
    let report = check_module(module, seed, &cfg)?;
    println!("{module} seed {seed}: {report}");
    if let Some(w) = report.worst() {
        println!(
            "worst coordinate: argument {} index {} analytic {:.9e} numeric {:.9e}",
            w.input, w.index, w.analytic, w.numeric
        );
    }
    Ok(report.passed)
}

#[allow(clippy::too_many_arguments)]
fn split(
    annotations: &Path,
    width: usize,
    height: usize,
    size: usize,
    overlap: usize,
    keep_frac: f64,
    difficult_below: f64,
    out: &Path,
) -> Result<()> {
    let spec = PatchSpec::new(size, overlap)?;
    let clip = ClipConfig {
        keep_frac,
        difficult_below,
    };
    let windows = patch_grid(width, height, &spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files: Vec<PathBuf> = fs::read_dir(annotations)
        .with_context(|| format!("listing {}", annotations.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut index = WindowIndex::new();
    let (mut n_patches, mut n_records) = (0, 0);
    for path in &files {
        let image = path
            .file_stem()
            .and_then(|s| s.to_str())
            .context("annotation file name is not UTF-8")?
            .to_string();
        let records = parse_dota_annotation(&read(path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        for w in &windows {
            let clipped = clip_annotations_to_window(&records, w, &clip)?;
            let pid = patch_id(&image, w);
            let recs: Vec<_> = clipped.into_iter().map(|c| c.record).collect();
            n_records += recs.len();
            fs::write(
                out.join(format!("{pid}.txt")),
                serialize_dota_annotation(&recs),
            )?;
            index.insert(pid, (image.clone(), *w));
            n_patches += 1;
        }
    }
    fs::write(out.join("windows.txt"), window_index_to_text(&index))?;
    println!(
        "{} images -> {n_patches} patches ({} per image), {n_records} patch records written to {}",
        files.len(),
        windows.len(),
        out.display()
    );
    Ok(())
}

fn eval(
    dets: &Path,
    gts: &Path,
    iou: f64,
    metric: &str,
    windows: Option<&Path>,
    nms: f64,
) -> Result<()> {
    let cfg = EvalConfig {
        iou_thresh: iou,
        metric: metric.parse::<ApMetric>()?,
    };
    cfg.validate()?;
    let mut detections =
        parse_detections(&read(dets)?).with_context(|| format!("parsing {}", dets.display()))?;
    if let Some(w) = windows {
        let index =
            parse_window_index(&read(w)?).with_context(|| format!("parsing {}", w.display()))?;
        let before = detections.len();
        detections = merge_patch_detections(&detections, &index, nms)?;
        println!("merged {before} patch detections into {}", detections.len());
    }
    let ground_truth =
        load_ground_truth_dir(gts).with_context(|| format!("loading {}", gts.display()))?;
    let result = evaluate_dataset(&detections, &ground_truth, &cfg)?;
    println!("{result}");
    Ok(())
}

fn count(config: &Path, input: [usize; 4]) -> Result<()> {
    let cfg = ModelConfig::parse(&read(config)?)
        .with_context(|| format!("parsing {}", config.display()))?;
    println!("{}", count_params_flops(&cfg, input)?);
    Ok(())
}

fn ucas_split(ids: &Path, seed: u64, out: &Path) -> Result<()> {
    let ids: Vec<String> = read(ids)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    let manifest = ratio_split(&ids, seed)?;
    fs::write(out, manifest.to_text()).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} ids -> train {} / val {} / test {} (seed {seed})",
        ids.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::DemoWtconv {
            levels,
            size,
            seed,
            channels,
            kernel,
        } => demo_wtconv(levels, size, seed, channels, kernel),
        Command::Gradcheck {
            module,
            seed,
            tol,
            step,
        } => gradcheck(&module, seed, tol, step),
        Command::Split {
            annotations,
            width,
            height,
            size,
            overlap,
            keep_frac,
            difficult_below,
            out,
        } => split(
            &annotations,
            width,
            height,
            size,
            overlap,
            keep_frac,
            difficult_below,
            &out,
        )
        .map(|_| true),
        Command::Eval {
            dets,
            gts,
            iou,
            metric,
            windows,
            nms,
        } => eval(&dets, &gts, iou, &metric, windows.as_deref(), nms).map(|_| true),
        Command::Count { config, input } => count(&config, input).map(|_| true),
        Command::UcasSplit { ids, seed, out } => ucas_split(&ids, seed, &out).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
