use std::sync::OnceLock;

use palmreg_core::config::Config;
use palmreg_core::geometry::{angle_diff_2pi, RigidPose};
use palmreg_core::ght::{Hand, ReferenceField, RegistrationClass};
use palmreg_core::global::GlobalParams;
use palmreg_core::mcc::GateTable;
use palmreg_core::pipeline::{enroll, pipeline, reference_from_images, register_image};
use palmreg_core::synth::{self, noise_image, Perturbation, SynthSpec};
use palmreg_core::template::{identify, Gallery, PalmTemplate};

const SIZE: usize = 1024;

fn palm(seed: u64, pose: RigidPose, mirrored: bool) -> SynthSpec {
    SynthSpec {
        seed,
        size: SIZE,
        n_minutiae: 250,
        pose,
        mirrored,
        noise_snr_db: Some(15.0),
        ..Default::default()
    }
}

fn reference() -> &'static ReferenceField {
    static REF: OnceLock<ReferenceField> = OnceLock::new();
    REF.get_or_init(|| {
        let images: Vec<_> = (0..8)
            .map(|i| synth::generate(&palm(50_000 + i, RigidPose::IDENTITY, false)).image)
            .collect();
        reference_from_images(&images, &Config::default()).unwrap()
    })
}

#[test]
fn posed_palm_is_registered() {
    let cfg = Config::default();
    let pose = RigidPose::from_degrees(105.0, 120.0, -80.0);
    let img = synth::generate(&palm(3, pose, false)).image;
    let reg = register_image(&img, reference(), None, &cfg).unwrap();
    assert_eq!(reg.reg_class, RegistrationClass::Registered);
    assert_eq!(reg.hand, Hand::Left);
    let want = pose.inverse();
    let got = reg.transform.pose;
    assert!(angle_diff_2pi(got.theta, want.theta).to_degrees().abs() <= 3.0, "{got:?} vs {want:?}");
    assert!((got.dx - want.dx).hypot(got.dy - want.dy) <= 16.0, "{got:?} vs {want:?}");
}

#[test]
fn noise_is_unregistered() {
    let cfg = Config::default();
    let t = pipeline(&noise_image(SIZE, SIZE, 4), reference(), None, &cfg).unwrap();
    assert_ne!(t.reg_class, RegistrationClass::Registered);
    assert_eq!(t.hand, Hand::Unknown);
}

#[test]
fn blank_image_yields_an_empty_unregistered_template() {
    let cfg = Config::default();
    let blank = palmreg_core::image::GrayImage::new(SIZE, SIZE);
    let t = pipeline(&blank, reference(), None, &cfg).unwrap();
    assert_eq!(t.reg_class, RegistrationClass::Unregistered);
    assert!(t.is_empty());
}

#[test]
fn mirrored_palm_is_a_right_hand() {
    let cfg = Config::default();
    let img = synth::generate(&palm(5, RigidPose::from_degrees(30.0, 40.0, 0.0), true)).image;
    let reg = register_image(&img, reference(), None, &cfg).unwrap();
    assert_eq!(reg.reg_class, RegistrationClass::Registered);
    assert_eq!(reg.hand, Hand::Right);
    assert!(reg.transform.mirror);
}

#[test]
fn enrollment_is_deterministic() {
    let cfg = Config::default();
    let img = synth::generate(&palm(6, RigidPose::from_degrees(60.0, -30.0, 20.0), false)).image;
    let a = pipeline(&img, reference(), None, &cfg).unwrap().serialize().unwrap();
    let b = pipeline(&img, reference(), None, &cfg).unwrap().serialize().unwrap();
    assert_eq!(a, b);
    assert_eq!((a.len() - 14) % 45, 0);
}

#[test]
fn template_round_trip_preserves_the_match_score() {
    let cfg = Config::default();
    let img = synth::generate(&palm(7, RigidPose::IDENTITY, false)).image;
    let t = enroll(&img, reference(), None, &cfg).unwrap().template;
    assert!(t.len() > 50);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.tpl");
    t.save(&path).unwrap();
    let back = PalmTemplate::load(&path).unwrap();
    let g = cfg.gates.for_pair(t.reg_class, back.reg_class);
    let s = palmreg_core::global::match_features(t.view(), back.view(), &g, &cfg.global).unwrap();
    assert!(s.score > 0.9, "self score {}", s.score);
}

#[test]
fn identification_ranks_the_genuine_palm_first() {
    let cfg = Config::default();
    let dir = tempfile::tempdir().unwrap();
    let mut gallery = Gallery::new();
    let mut first = None;
    for seed in 20..24 {
        let img = synth::generate(&palm(seed, RigidPose::from_degrees(15.0 * seed as f64, 0.0, 0.0), false)).image;
        if first.is_none() {
            first = Some(img.clone());
        }
        let t = pipeline(&img, reference(), None, &cfg).unwrap();
        gallery.enroll(dir.path(), &format!("palm{seed}"), t).unwrap();
    }
    let probe_img = synth::perturb(
        &first.unwrap(),
        &Perturbation {
            pose: RigidPose::from_degrees(12.0, 30.0, -25.0),
            jitter_px: 3.0,
            noise_snr_db: Some(15.0),
            seed: 9,
        },
    );
    let probe = pipeline(&probe_img, reference(), None, &cfg).unwrap();
    let reloaded = Gallery::load_dir(dir.path()).unwrap();
    assert_eq!(reloaded.len(), 4);
    let id = identify(&probe, &reloaded, &GateTable::default(), &GlobalParams::default()).unwrap();
    assert_eq!(id.ranked[0].0, "palm20");
    assert!(id.ranked[0].1 > 2.0 * id.ranked[1].1, "{:?}", id.ranked);
}
