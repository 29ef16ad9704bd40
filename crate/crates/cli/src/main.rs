//! `palmreg` command-line front end.
//!
//! Exit codes: 0 success, 2 input error (bad arguments, unreadable or
//! malformed files), 3 pipeline failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use palmreg_core::cnn::CnnModel;
use palmreg_core::config::Config;
use palmreg_core::geometry::{angle_diff_2pi, RigidPose};
use palmreg_core::ght::{ReferenceField, RegistrationClass};
use palmreg_core::image::GrayImage;
use palmreg_core::orientation::OrientationField;
use palmreg_core::pipeline::{bench, enroll, reference_from_images, register_image};
use palmreg_core::synth::{self, Perturbation, SynthSpec};
use palmreg_core::template::{identify, match_templates, Gallery, PalmTemplate, EXTENSION};

#[derive(Parser)]
#[command(name = "palmreg", version, about = "Palmprint registration and minutia matching")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `-s ght.bin_px=8`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic palm with known pose and minutiae.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth file (`key: value` lines).
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 2048)]
        size: usize,
        #[arg(long, default_value_t = 600)]
        minutiae: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        theta: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        dx: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        dy: f64,
        /// Render a right hand.
        #[arg(long)]
        mirrored: bool,
        /// Additive noise in dB SNR; noiseless when absent.
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Second impression of an image: rigid motion, elastic jitter, noise.
    Perturb {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        theta: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        dx: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        dy: f64,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Average exemplar orientation fields into a reference (OFLD).
    BuildReference {
        #[arg(long)]
        out: PathBuf,
        /// Exemplar images; falls back to `reference.exemplars` from the config.
        images: Vec<PathBuf>,
        /// Use this many synthetic canonical exemplars instead.
        #[arg(long, conflicts_with = "images")]
        synthetic: Option<u64>,
        /// Image size for `--synthetic`.
        #[arg(long, default_value_t = 2048)]
        size: usize,
    },
    /// Print `theta_deg dx dy q1 q2 hand class` for an image.
    Register {
        image: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        cnn_weights: Option<PathBuf>,
    },
    /// Enroll an image into a template file.
    Extract {
        image: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cnn_weights: Option<PathBuf>,
        /// Dump enhanced, skeleton and mask images here as PGM.
        #[arg(long)]
        debug_dir: Option<PathBuf>,
    },
    /// Score two templates.
    Match { a: PathBuf, b: PathBuf },
    /// Rank a gallery directory against a probe template.
    Identify {
        probe: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// Print only the best `top` entries.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Match every probe against every gallery template and report timing.
    Bench {
        #[arg(long)]
        gallery: PathBuf,
        /// Probe directory; the gallery itself when absent.
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Quick end-to-end check on small synthetic palms.
    Selftest,
    /// Print the effective configuration.
    Config,
}

/// Error tagged with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn input(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn pipeline_failure(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, err: err.into() }
}

type Result<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p).with_context(|| format!("config {}", p.display())).map_err(input)?,
        None => Config::default(),
    };
    cfg.apply_overrides(overrides).map_err(input)?;
    cfg.validate().map_err(input)?;
    Ok(cfg)
}

fn read_image(path: &Path) -> Result<GrayImage> {
    GrayImage::read_pgm(path).with_context(|| format!("image {}", path.display())).map_err(input)
}

fn read_reference(path: &Path) -> Result<ReferenceField> {
    let field = OrientationField::read_ofld(path).with_context(|| format!("reference {}", path.display())).map_err(input)?;
    ReferenceField::new(field).with_context(|| format!("reference {}", path.display())).map_err(input)
}

fn read_cnn(path: Option<&Path>) -> Result<Option<CnnModel>> {
    path.map(|p| CnnModel::load(p).with_context(|| format!("CNN weights {}", p.display())).map_err(input))
        .transpose()
}

fn read_template(path: &Path) -> Result<PalmTemplate> {
    PalmTemplate::load(path).map_err(input)
}

fn read_gallery(dir: &Path) -> Result<Gallery> {
    let g = Gallery::load_dir(dir).map_err(input)?;
    if g.is_empty() {
        return Err(input(anyhow!("gallery {} has no .{EXTENSION} files", dir.display())));
    }
    Ok(g)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Synth {
            seed,
            out,
            truth,
            size,
            minutiae,
            theta,
            dx,
            dy,
            mirrored,
            snr,
        } => {
            if size < 64 {
                return Err(input(anyhow!("--size must be at least 64")));
            }
            let spec = SynthSpec {
                seed,
                size,
                n_minutiae: minutiae,
                pose: RigidPose::from_degrees(theta, dx, dy),
                mirrored,
                noise_snr_db: snr,
                ..Default::default()
            };
            let palm = synth::generate(&spec);
            palm.image.write_pgm(&out).with_context(|| format!("writing {}", out.display())).map_err(input)?;
            if let Some(t) = truth {
                fs::write(&t, synth::truth_text(&spec, &palm)).with_context(|| format!("writing {}", t.display())).map_err(input)?;
            }
        }
        Command::Perturb {
            input: src,
            out,
            seed,
            theta,
            dx,
            dy,
            jitter,
            snr,
        } => {
            let img = read_image(&src)?;
            let p = Perturbation {
                pose: RigidPose::from_degrees(theta, dx, dy),
                jitter_px: jitter,
                noise_snr_db: snr,
                seed,
            };
            synth::perturb(&img, &p).write_pgm(&out).with_context(|| format!("writing {}", out.display())).map_err(input)?;
        }
        Command::BuildReference { out, images, synthetic, size } => {
            let exemplars: Vec<GrayImage> = match synthetic {
                Some(n) => (0..n)
                    .map(|i| {
                        synth::generate(&SynthSpec {
                            seed: 90_000 + i,
                            size,
                            ..Default::default()
                        })
                        .image
                    })
                    .collect(),
                None => {
                    let paths = if images.is_empty() { cfg.reference.exemplars.clone() } else { images };
                    if paths.is_empty() {
                        return Err(input(anyhow!("no exemplar images given")));
                    }
                    paths.iter().map(|p| read_image(p)).collect::<Result<_>>()?
                }
            };
            if exemplars.is_empty() {
                return Err(input(anyhow!("no exemplar images given")));
            }
            let (w, h) = (exemplars[0].width(), exemplars[0].height());
            if exemplars.iter().any(|e| (e.width(), e.height()) != (w, h)) {
                return Err(input(anyhow!("exemplar images differ in size")));
            }
            let reference = reference_from_images(&exemplars, &cfg).map_err(pipeline_failure)?;
            reference.field().write_ofld(&out).with_context(|| format!("writing {}", out.display())).map_err(input)?;
        }
        Command::Register { image, reference, cnn_weights } => {
            let img = read_image(&image)?;
            let reference = read_reference(&reference)?;
            let cnn = read_cnn(cnn_weights.as_deref())?;
            let reg = register_image(&img, &reference, cnn.as_ref(), &cfg).map_err(pipeline_failure)?;
            let p = reg.transform.pose;
            println!(
                "{:.3} {:.3} {:.3} {:.4} {:.4} {} {}",
                p.theta_degrees(),
                p.dx,
                p.dy,
                reg.q1(),
                reg.q2(),
                reg.hand.as_str(),
                reg.reg_class.as_str()
            );
        }
        Command::Extract {
            image,
            reference,
            out,
            cnn_weights,
            debug_dir,
        } => {
            let img = read_image(&image)?;
            let reference = read_reference(&reference)?;
            let cnn = read_cnn(cnn_weights.as_deref())?;
            let e = enroll(&img, &reference, cnn.as_ref(), &cfg).map_err(pipeline_failure)?;
            e.template.save(&out).with_context(|| format!("writing {}", out.display())).map_err(input)?;
            if let Some(dir) = debug_dir {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).map_err(input)?;
                if let Some(x) = &e.extraction {
                    let dumps = [
                        ("enhanced.pgm", x.enhanced.to_gray()),
                        ("skeleton.pgm", x.skeleton.0.to_image()),
                        ("mask.pgm", x.mask.to_image()),
                    ];
                    for (name, img) in dumps {
                        let path = dir.join(name);
                        img.write_pgm(&path).with_context(|| format!("writing {}", path.display())).map_err(input)?;
                    }
                }
            }
            eprintln!(
                "{} minutiae, {} {}",
                e.template.len(),
                e.template.hand.as_str(),
                e.template.reg_class.as_str()
            );
        }
        Command::Match { a, b } => {
            let (a, b) = (read_template(&a)?, read_template(&b)?);
            println!("{:.6}", match_templates(&a, &b, &cfg.gates, &cfg.global));
        }
        Command::Identify { probe, gallery, top } => {
            let probe = read_template(&probe)?;
            let gallery = read_gallery(&gallery)?;
            let id = identify(&probe, &gallery, &cfg.gates, &cfg.global).map_err(input)?;
            for (name, score) in id.ranked.iter().take(top.unwrap_or(usize::MAX)) {
                println!("{name} {score:.6}");
            }
        }
        Command::Bench { gallery, probes, workers } => {
            let g: Vec<PalmTemplate> = read_gallery(&gallery)?.iter().map(|(_, t)| t.clone()).collect();
            let p: Vec<PalmTemplate> = match probes {
                Some(dir) => read_gallery(&dir)?.iter().map(|(_, t)| t.clone()).collect(),
                None => g.clone(),
            };
            println!("{}", bench(&g, &p, &cfg, workers));
        }
        Command::Selftest => selftest(&cfg)?,
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(())
}

/// Registration and matching on 1024 px synthetic palms.
fn selftest(cfg: &Config) -> Result<()> {
    let start = Instant::now();
    let palm = |seed: u64, pose: RigidPose| {
        synth::generate(&SynthSpec {
            seed,
            size: 1024,
            n_minutiae: 250,
            pose,
            noise_snr_db: Some(15.0),
            ..Default::default()
        })
        .image
    };
    let exemplars: Vec<GrayImage> = (0..8).map(|i| palm(90_000 + i, RigidPose::IDENTITY)).collect();
    let reference = reference_from_images(&exemplars, cfg).map_err(pipeline_failure)?;

    let mut ok = true;
    let mut report = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };

    let pose = RigidPose::from_degrees(105.0, 60.0, -40.0);
    let a = palm(1, pose);
    let reg = register_image(&a, &reference, None, cfg).map_err(pipeline_failure)?;
    let (want, got) = (pose.inverse(), reg.transform.pose);
    let dth = angle_diff_2pi(got.theta, want.theta).to_degrees().abs();
    let dd = (got.dx - want.dx).hypot(got.dy - want.dy);
    report(
        "registration",
        reg.reg_class == RegistrationClass::Registered && dth <= 3.0 && dd <= 16.0,
        format!("{} error {dth:.2} deg {dd:.1} px", reg.reg_class.as_str()),
    );

    let second = synth::perturb(
        &a,
        &Perturbation {
            pose: RigidPose::from_degrees(10.0, 25.0, -15.0),
            jitter_px: 3.0,
            noise_snr_db: Some(15.0),
            seed: 2,
        },
    );
    let other = palm(3, RigidPose::from_degrees(200.0, -50.0, 30.0));
    let enroll_one = |img: &GrayImage| enroll(img, &reference, None, cfg).map(|e| e.template).map_err(pipeline_failure);
    let (ta, tb, tc) = (enroll_one(&a)?, enroll_one(&second)?, enroll_one(&other)?);
    let genuine = match_templates(&ta, &tb, &cfg.gates, &cfg.global);
    let impostor = match_templates(&ta, &tc, &cfg.gates, &cfg.global).max(match_templates(&tb, &tc, &cfg.gates, &cfg.global));
    report("matching", genuine > impostor, format!("genuine {genuine:.4} impostor {impostor:.4}"));

    let bytes = ta.serialize().map_err(pipeline_failure)?;
    let back = PalmTemplate::deserialize(&bytes).map_err(pipeline_failure)?;
    report(
        "template",
        bytes.len() == 14 + 45 * ta.len() && back.len() == ta.len(),
        format!("{} minutiae in {} bytes", ta.len(), bytes.len()),
    );
    println!("selftest finished in {:.1} s", start.elapsed().as_secs_f64());
    if ok {
        Ok(())
    } else {
        Err(pipeline_failure(anyhow!("selftest failed")))
    }
}
