//! End-to-end enrollment (coarse rotation, Hough refinement, extraction,
//! descriptors) and the matching benchmark.
//!
//! Registration works on the orientation field only; the image is never
//! resampled. Minutiae are extracted in input coordinates and then mapped
//! into the reference frame through the recovered transform.

use std::f64::consts::PI;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::cnn::{extract_mask, fallback_coarse_rotation, infer, CnnModel, CoarseDecision};
use crate::config::Config;
use crate::extraction::{extract, Extraction, Minutia};
use crate::geometry::{mirror_direction, mirror_x, Point, RigidPose};
use crate::ght::{build_reference, register, GhtError, Hand, ReferenceField, RegistrationClass, RegistrationResult};
use crate::global::match_features;
use crate::image::GrayImage;
use crate::orientation::{estimate_orientation_field, rotate_field, OrientationError, OrientationField, BLOCK};
use crate::template::PalmTemplate;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("orientation stage: {0}")]
    Orientation(#[from] OrientationError),
    #[error("reference stage: {0}")]
    Reference(#[from] GhtError),
}

/// Input-to-reference mapping: optional mirror about the vertical center
/// line, then a rigid pose about the field center. Right hands are
/// mirrored, so a Right template's pose applies to the flipped image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTransform {
    pub mirror: bool,
    pub pose: RigidPose,
    pub width: f64,
    pub center: Point,
}

impl FrameTransform {
    pub fn identity(field: &OrientationField) -> Self {
        Self {
            mirror: false,
            pose: RigidPose::IDENTITY,
            width: field.width_px() as f64,
            center: field.center(),
        }
    }

    pub fn apply_point(&self, p: Point) -> Point {
        let p = if self.mirror { mirror_x(p, self.width) } else { p };
        self.pose.apply(p, self.center)
    }

    pub fn apply(&self, m: &Minutia) -> Minutia {
        let q = self.apply_point(m.pos());
        let theta = if self.mirror { mirror_direction(m.theta) } else { m.theta };
        Minutia::new(q.x, q.y, self.pose.apply_direction(theta), m.kind)
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub coarse: CoarseDecision,
    /// Hough refinement outcome; absent when the coarse stage rejected.
    pub refine: Option<RegistrationResult>,
    pub hand: Hand,
    pub reg_class: RegistrationClass,
    pub transform: FrameTransform,
    pub field: Option<OrientationField>,
}

impl Registration {
    pub fn q1(&self) -> f64 {
        self.refine.map_or(0.0, |r| r.q1)
    }

    pub fn q2(&self) -> f64 {
        self.refine.map_or(0.0, |r| r.q2)
    }

    fn rejected(coarse: CoarseDecision, field: Option<OrientationField>, width: f64, center: Point) -> Self {
        Self {
            coarse,
            refine: None,
            hand: Hand::Unknown,
            reg_class: RegistrationClass::Unregistered,
            transform: FrameTransform {
                mirror: false,
                pose: RigidPose::IDENTITY,
                width,
                center,
            },
            field,
        }
    }
}

/// Coarse rotation followed by Hough refinement. Images are padded to the
/// block size first.
pub fn register_image(img: &GrayImage, reference: &ReferenceField, cnn: Option<&CnnModel>, cfg: &Config) -> Result<Registration, PipelineError> {
    let img = img.pad_to_multiple(BLOCK, 0);
    let width = img.width() as f64;
    let center = Point::new(width / 2.0, img.height() as f64 / 2.0);
    let no_decision = CoarseDecision {
        accepted: false,
        class: 0,
        m_s: 0.0,
        mirrored: false,
    };
    let mask = cnn.map(|m| extract_mask(m, &img));
    let field = match estimate_orientation_field(&img, mask.as_ref(), &cfg.orientation) {
        Ok(f) => f,
        Err(OrientationError::AllBackground) => return Ok(Registration::rejected(no_decision, None, width, center)),
        Err(e) => return Err(e.into()),
    };
    let coarse = match cnn {
        Some(model) => {
            let scores = infer(model, &img);
            CoarseDecision {
                accepted: scores.m_s > cfg.coarse.min_confidence,
                class: scores.argmax_class,
                m_s: scores.m_s,
                mirrored: false,
            }
        }
        None => fallback_coarse_rotation(&field, reference, &cfg.ght, cfg.coarse.fallback_vote_stride),
    };
    if !coarse.accepted {
        return Ok(Registration::rejected(coarse, Some(field), width, center));
    }
    // a mirrored coarse class means flip(f) rotated by -angle matched, and
    // flip(rotate(f, +angle)) is that field
    let alpha = coarse.class as f64 * PI / 12.0;
    let s = if coarse.mirrored { alpha } else { -alpha };
    let refine = register(&rotate_field(&field, s), reference, &cfg.ght);
    let transform = match refine.reg_class {
        RegistrationClass::Registered => FrameTransform {
            mirror: refine.mirrored,
            pose: RigidPose::rotation(if refine.mirrored { -s } else { s }).then(&refine.pose),
            width,
            center,
        },
        // the refined pose is unreliable; keep the coarse rotation only
        _ => FrameTransform {
            mirror: coarse.mirrored,
            pose: RigidPose::rotation(-alpha),
            width,
            center,
        },
    };
    Ok(Registration {
        coarse,
        refine: Some(refine),
        hand: refine.hand,
        reg_class: refine.reg_class,
        transform,
        field: Some(field),
    })
}

#[derive(Debug, Clone)]
pub struct Enrollment {
    pub template: PalmTemplate,
    pub registration: Registration,
    pub extraction: Option<Extraction>,
}

/// Full enrollment: registration, extraction, mapping into the reference
/// frame and descriptor construction. Minutiae landing outside the
/// storable coordinate range are dropped.
pub fn enroll(img: &GrayImage, reference: &ReferenceField, cnn: Option<&CnnModel>, cfg: &Config) -> Result<Enrollment, PipelineError> {
    let registration = register_image(img, reference, cnn, cfg)?;
    Ok(enroll_registered(img, registration, cfg))
}

/// Enrollment after `register_image` has already run on `img`.
pub fn enroll_registered(img: &GrayImage, registration: Registration, cfg: &Config) -> Enrollment {
    let padded = img.pad_to_multiple(BLOCK, 0);
    let extraction = registration.field.as_ref().map(|f| extract(&padded, f, &cfg.extraction));
    let minutiae: Vec<Minutia> = extraction
        .iter()
        .flat_map(|e| e.minutiae.iter())
        .map(|m| registration.transform.apply(m))
        .filter(|m| {
            let ok = |v: f64| (0.0..=u16::MAX as f64).contains(&v.round());
            ok(m.x) && ok(m.y)
        })
        .collect();
    let template = PalmTemplate::from_minutiae(registration.hand, registration.reg_class, registration.transform.pose, &minutiae, &cfg.mcc);
    Enrollment {
        template,
        registration,
        extraction,
    }
}

pub fn pipeline(img: &GrayImage, reference: &ReferenceField, cnn: Option<&CnnModel>, cfg: &Config) -> Result<PalmTemplate, PipelineError> {
    enroll(img, reference, cnn, cfg).map(|e| e.template)
}

/// Reference from pre-aligned exemplar images (identity poses).
pub fn reference_from_images(images: &[GrayImage], cfg: &Config) -> Result<ReferenceField, PipelineError> {
    let fields = images
        .iter()
        .map(|img| estimate_orientation_field(&img.pad_to_multiple(BLOCK, 0), None, &cfg.orientation))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(build_reference(&fields, &[], cfg.reference.min_quality)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub matches: usize,
    pub workers: usize,
    pub total_secs: f64,
    pub mean_latency_ms: f64,
    pub matches_per_sec: f64,
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "matches: {}", self.matches)?;
        writeln!(f, "workers: {}", self.workers)?;
        writeln!(f, "mean_latency_ms: {:.3}", self.mean_latency_ms)?;
        writeln!(f, "matches_per_sec: {:.1}", self.matches_per_sec)?;
        write!(
            f,
            "comparison_ratio: mean {:.4} min {:.4} max {:.4}",
            self.ratio_mean, self.ratio_min, self.ratio_max
        )
    }
}

/// Matches every probe against every gallery template on `workers`
/// threads (all available when `None`).
pub fn bench(gallery: &[PalmTemplate], probes: &[PalmTemplate], cfg: &Config, workers: Option<usize>) -> BenchReport {
    let pairs: Vec<(&PalmTemplate, &PalmTemplate)> = probes.iter().flat_map(|p| gallery.iter().map(move |g| (p, g))).collect();
    let run = || {
        let start = Instant::now();
        let samples: Vec<(f64, f64)> = pairs
            .par_iter()
            .map(|(a, b)| {
                let t = Instant::now();
                let g = cfg.gates.for_pair(a.reg_class, b.reg_class);
                let ratio = match match_features(a.view(), b.view(), &g, &cfg.global) {
                    Ok(r) => r.comparison_ratio,
                    Err(_) => 0.0,
                };
                (t.elapsed().as_secs_f64(), ratio)
            })
            .collect();
        (start.elapsed().as_secs_f64(), samples)
    };
    let (pool_size, (total, samples)) = match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().expect("thread pool");
            (n.max(1), pool.install(run))
        }
        None => (rayon::current_num_threads(), run()),
    };
    let n = samples.len();
    if n == 0 {
        return BenchReport {
            matches: 0,
            workers: pool_size,
            total_secs: total,
            mean_latency_ms: 0.0,
            matches_per_sec: 0.0,
            ratio_mean: 0.0,
            ratio_min: 0.0,
            ratio_max: 0.0,
        };
    }
    let latency: f64 = samples.iter().map(|s| s.0).sum::<f64>() / n as f64;
    let ratios = samples.iter().map(|s| s.1);
    BenchReport {
        matches: n,
        workers: pool_size,
        total_secs: total,
        mean_latency_ms: latency * 1e3,
        matches_per_sec: n as f64 / total.max(1e-12),
        ratio_mean: ratios.clone().sum::<f64>() / n as f64,
        ratio_min: ratios.clone().fold(f64::INFINITY, f64::min),
        ratio_max: ratios.fold(f64::NEG_INFINITY, f64::max),
    }
}
