//! Command-line front end: `irisfcn <command> ...`.
//!
//! Exit codes: 0 success, 1 usage, 2 bad input data, 3 pipeline failure. Errors are printed
//! to stderr as one JSON object.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use irisfcn::accel::{run_network_with, run_quantized_with, Backend, TileConfig};
use irisfcn::config::{load_train_config, PipelineConfig};
use irisfcn::contour::{fit_contours_with, EyeGeometry};
use irisfcn::eval::{eer, match_probe, roc, write_roc_csv, GalleryEntry, MetricReport, ScoreSet};
use irisfcn::fcn::{build_arch, count_flops, ArchSpec, Network};
use irisfcn::formats::{load_ircd, save_fcnq, save_fcnw, save_ircd, write_atomic};
use irisfcn::image::GrayImage;
use irisfcn::pipeline::{encode_with_geometry, identity_of, list_pgm, train_samples, Dataset, Segmenter};
use irisfcn::quant::{calibrate_and_quantize, select_calibration};
use irisfcn::synth::{synth_generate, SyntheticEyeSpec};
use irisfcn::train::{train, TrainConfig};
use irisfcn::Error;

#[derive(Parser)]
#[command(name = "irisfcn", version, about = "FCN iris segmentation and recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ArchArgs {
    /// Retained encoder groups, e.g. 0-1-2-4-2-1-0
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Base channel count
    #[arg(long, default_value_t = 16)]
    n: usize,
}

impl ArchArgs {
    fn spec(&self) -> irisfcn::Result<ArchSpec> {
        ArchSpec::parse(self.scale, self.n, &self.arch)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on a dataset directory (images/ and masks/)
    Train {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long)]
        data: PathBuf,
        /// Training config (TOML); defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image with float or quantized weights
    Segment {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize float weights to 8-bit dynamic fixed point
    Quantize {
        #[arg(long)]
        weights: PathBuf,
        /// Calibration images: a directory of PGMs or a dataset root
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit pupil and limbic circles to a mask
    Fit {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Normalize and encode an eye into an iris code
    Encode {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Match a probe code against every code in a gallery directory
    Match {
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segmentation metrics (--pred/--gt) or ROC and EER from scores (--scores)
    Eval {
        #[arg(long, requires = "gt", conflicts_with = "scores")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, requires = "scores")]
        roc: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOPs per inference
    Flops {
        #[command(flatten)]
        arch: ArchArgs,
        /// Original image size, WIDTHxHEIGHT
        #[arg(long)]
        dims: String,
    },
    /// Run a network on the accelerator model and report its schedule
    Accel {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// ref or accel
        #[arg(long, default_value = "accel")]
        backend: String,
        /// Also write the mask
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic eye dataset
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn pipeline_config(path: &Option<PathBuf>) -> irisfcn::Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> irisfcn::Result<()> {
    write_atomic(path, text.as_bytes())
}

fn parse_dims(s: &str) -> irisfcn::Result<(usize, usize)> {
    let bad = || Error::Validation(format!("dims '{s}' must look like 320x240"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

/// PGMs from `dir/images` when present, otherwise from `dir` itself.
fn image_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("images");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn run(cmd: Command) -> irisfcn::Result<()> {
    match cmd {
        Command::Train {
            arch,
            data,
            config,
            out,
        } => {
            let cfg = match &config {
                Some(p) => load_train_config(p)?,
                None => TrainConfig::default(),
            };
            let mut net: Network<f32> = build_arch(&arch.spec()?)?;
            net.init_he(cfg.seed);
            let pairs = Dataset::open(&data)?.load_pairs()?;
            let samples = train_samples(&net, &pairs)?;
            let report = train(&mut net, &samples, &cfg)?;
            save_fcnw(&net, &out)?;
            println!(
                "{}",
                json!({
                    "images": samples.len(),
                    "alpha": report.alpha,
                    "epochs": report.epoch_losses.len(),
                    "final_loss": report.epoch_losses.last(),
                })
            );
        }
        Command::Segment { weights, input, out } => {
            let seg = Segmenter::load(&weights)?;
            let mask = seg.segment(&GrayImage::load(&input)?)?;
            GrayImage::from_mask(&mask).save(&out)?;
        }
        Command::Quantize {
            weights,
            calib,
            out,
            config,
        } => {
            let cfg = pipeline_config(&config)?;
            let net = match Segmenter::load(&weights)? {
                Segmenter::Float(n) => n,
                Segmenter::Quantized(_) => {
                    return Err(Error::Validation("weights are already quantized".into()))
                }
            };
            let files = list_pgm(&image_dir(&calib))?;
            if files.is_empty() {
                return Err(Error::Validation(format!("{}: no calibration images", calib.display())));
            }
            let pick = select_calibration(files.len(), cfg.quant.calibration_size, cfg.quant.calibration_seed);
            let images = pick
                .iter()
                .map(|&i| Ok(GrayImage::load(&files[i].1)?.to_tensor::<f32>()))
                .collect::<irisfcn::Result<Vec<_>>>()?;
            let q = calibrate_and_quantize(&net, &images)?;
            save_fcnq(&q, &out)?;
            println!("{}", json!({ "calibration_images": images.len() }));
        }
        Command::Fit { mask, out, config } => {
            let cfg = pipeline_config(&config)?;
            let g = fit_contours_with(&GrayImage::load(&mask)?.to_mask(), &cfg.contour)?;
            write_text(&out, &g.to_json())?;
        }
        Command::Encode {
            image,
            mask,
            geometry,
            out,
            config,
        } => {
            let cfg = pipeline_config(&config)?;
            let img = GrayImage::load(&image)?;
            let m = GrayImage::load(&mask)?.to_mask();
            let g = EyeGeometry::from_json(&fs::read_to_string(&geometry)?)?;
            save_ircd(&encode_with_geometry(&img, &m, &g, &cfg.gabor)?, &out)?;
        }
        Command::Match { probe, gallery, out } => {
            let entry = |p: &Path| -> irisfcn::Result<GalleryEntry> {
                let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                Ok(GalleryEntry {
                    identity: identity_of(&id).to_string(),
                    code: load_ircd(p)?,
                    id,
                })
            };
            let probe = entry(&probe)?;
            let mut files = Vec::new();
            for e in fs::read_dir(&gallery)? {
                let p = e?.path();
                if p.extension().is_some_and(|x| x == "ircd") {
                    files.push(p);
                }
            }
            files.sort();
            let entries = files.iter().map(|p| entry(p)).collect::<irisfcn::Result<Vec<_>>>()?;
            let set = match_probe(&probe, &entries)?;
            let mut buf = Vec::new();
            set.write_csv(&mut buf)?;
            write_atomic(&out, &buf)?;
            let best = set.pairs.iter().min_by(|a, b| a.hd.total_cmp(&b.hd));
            println!(
                "{}",
                json!({
                    "compared": set.pairs.len(),
                    "incomparable": set.incomparable,
                    "best": best.map(|b| json!({ "id": b.gallery_id, "hd": b.hd, "rotation": b.rotation })),
                })
            );
        }
        Command::Eval {
            pred,
            gt,
            scores,
            roc: roc_out,
            out,
        } => match (pred, gt, scores) {
            (Some(pred), Some(gt), None) => {
                let mut pairs = Vec::new();
                for (name, p) in list_pgm(&image_dir(&pred))? {
                    let g = gt.join(format!("{name}.pgm"));
                    let g = if g.is_file() { g } else { gt.join("masks").join(format!("{name}.pgm")) };
                    if !g.is_file() {
                        return Err(Error::Validation(format!("{name}: no ground-truth mask")));
                    }
                    pairs.push((name, GrayImage::load(&p)?.to_mask(), GrayImage::load(&g)?.to_mask()));
                }
                let report = MetricReport::from_pairs(pairs.iter().map(|(n, p, g)| (n.clone(), p, g)))?;
                let text = report.to_json();
                match out {
                    Some(o) => write_text(&o, &text)?,
                    None => println!("{text}"),
                }
            }
            (None, None, Some(scores)) => {
                let set = ScoreSet::read_csv(fs::File::open(&scores)?)?;
                let (g, i) = (set.genuine(), set.impostor());
                let e = eer(&g, &i)?;
                if let Some(r) = roc_out {
                    let mut buf = Vec::new();
                    write_roc_csv(&roc(&g, &i)?, &mut buf)?;
                    write_atomic(&r, &buf)?;
                }
                let summary = json!({ "eer": e, "genuine": g.len(), "impostor": i.len() });
                match out {
                    Some(o) => write_text(&o, &serde_json::to_string_pretty(&summary).expect("json"))?,
                    None => println!("{summary}"),
                }
            }
            _ => {
                return Err(Error::Validation(
                    "eval needs either --pred and --gt, or --scores".into(),
                ))
            }
        },
        Command::Flops { arch, dims } => {
            let (w, h) = parse_dims(&dims)?;
            println!("{}", count_flops(&arch.spec()?, h, w)?);
        }
        Command::Accel {
            weights,
            input,
            report,
            backend,
            out,
        } => {
            let backend: Backend = backend.parse()?;
            let img = GrayImage::load(&input)?;
            let cfg = TileConfig::default();
            let (mask, rep) = match Segmenter::load(&weights)? {
                Segmenter::Float(n) => run_network_with(&n, &img.to_tensor::<f32>(), &cfg, backend)?,
                Segmenter::Quantized(q) => run_quantized_with(&q, &img.to_tensor::<f32>(), &cfg, backend)?,
            };
            write_text(&report, &rep.to_json())?;
            if let Some(o) = out {
                GrayImage::from_mask(&mask).save(&o)?;
            }
            println!(
                "{}",
                json!({
                    "tiles": rep.total.tiles,
                    "cycles": rep.total.cycles,
                    "saturations": rep.total.saturations,
                })
            );
        }
        Command::Synth { spec, out } => {
            let s = match &spec {
                Some(p) => SyntheticEyeSpec::load(p)?,
                None => SyntheticEyeSpec::default(),
            };
            let names = synth_generate(&s, &out)?;
            println!("{}", json!({ "images": names.len() }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim() }));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(if e.is_pipeline_failure() { 3 } else { 2 })
        }
    }
}
