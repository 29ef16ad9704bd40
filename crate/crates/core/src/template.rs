//! Palm template file format and a directory-backed gallery for 1:N
//! identification.
//!
//! Layout, little-endian:
//!
//! ```text
//! 0   "PTPL"
//! 4   version u8
//! 5   hand (bits 0-1) | reg_class (bits 2-3)
//! 6   pose theta, i16 centidegrees
//! 8   pose dx, i16 px
//! 10  pose dy, i16 px
//! 12  minutia count u16
//! 14  per minutia: x u16, y u16, theta u8 (256 steps over 2π), 40 descriptor bytes
//! ```

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::extraction::{Minutia, MinutiaKind};
use crate::geometry::{angle_diff_2pi, RigidPose};
use crate::ght::{Hand, RegistrationClass};
use crate::global::{match_features, GlobalParams};
use crate::mcc::{build_descriptors, FeatureView, GateTable, MccDescriptor, MccParams, DESCRIPTOR_BYTES};

pub const MAGIC: &[u8; 4] = b"PTPL";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 14;
pub const MINUTIA_BYTES: usize = 5 + DESCRIPTOR_BYTES;
pub const EXTENSION: &str = "tpl";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template format error: {0}")]
    Format(String),
    #[error("template truncated: expected {expected} bytes, got {got}")]
    TruncatedFile { expected: usize, got: usize },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("duplicate gallery id {0}")]
    DuplicateId(String),
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TemplateError + '_ {
    move |source| TemplateError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Minutia rounded to storage precision.
pub fn quantize_minutia(m: &Minutia) -> Minutia {
    Minutia::new(m.x.round(), m.y.round(), dequantize_angle(quantize_angle(m.theta)), m.kind)
}

pub fn quantize_angle(theta: f64) -> u8 {
    ((theta.rem_euclid(TAU) / TAU * 256.0).round() as i64).rem_euclid(256) as u8
}

pub fn dequantize_angle(q: u8) -> f64 {
    q as f64 * TAU / 256.0
}

/// Pose rounded to storage precision (centidegrees, whole pixels).
pub fn quantize_pose(p: &RigidPose) -> RigidPose {
    let cdeg = (angle_diff_2pi(p.theta, 0.0).to_degrees() * 100.0).round();
    RigidPose::from_degrees(cdeg / 100.0, p.dx.round(), p.dy.round())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PalmTemplate {
    pub hand: Hand,
    pub reg_class: RegistrationClass,
    pub pose: RigidPose,
    pub minutiae: Vec<Minutia>,
    pub descriptors: Vec<MccDescriptor>,
}

impl PalmTemplate {
    /// Quantizes the minutiae first so descriptors agree with what a
    /// reader of the file would rebuild.
    pub fn from_minutiae(hand: Hand, reg_class: RegistrationClass, pose: RigidPose, minutiae: &[Minutia], mcc: &MccParams) -> Self {
        let minutiae: Vec<Minutia> = minutiae.iter().map(quantize_minutia).collect();
        let descriptors = build_descriptors(&minutiae, mcc);
        Self {
            hand,
            reg_class,
            pose: quantize_pose(&pose),
            minutiae,
            descriptors,
        }
    }

    pub fn len(&self) -> usize {
        self.minutiae.len()
    }

    pub fn is_empty(&self) -> bool {
        self.minutiae.is_empty()
    }

    pub fn view(&self) -> FeatureView<'_> {
        FeatureView {
            minutiae: &self.minutiae,
            descriptors: &self.descriptors,
        }
    }

    pub fn serialized_len(n: usize) -> usize {
        HEADER_BYTES + MINUTIA_BYTES * n
    }

    pub fn serialize(&self) -> Result<Vec<u8>, TemplateError> {
        if self.minutiae.len() != self.descriptors.len() {
            return Err(TemplateError::Format(format!(
                "{} minutiae but {} descriptors",
                self.minutiae.len(),
                self.descriptors.len()
            )));
        }
        let n = u16::try_from(self.minutiae.len()).map_err(|_| TemplateError::Format(format!("{} minutiae exceed 65535", self.minutiae.len())))?;
        let mut out = Vec::with_capacity(Self::serialized_len(n as usize));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(hand_code(self.hand) | class_code(self.reg_class) << 2);
        let cdeg = (angle_diff_2pi(self.pose.theta, 0.0).to_degrees() * 100.0).round();
        out.extend_from_slice(&to_i16(cdeg, "pose theta")?.to_le_bytes());
        out.extend_from_slice(&to_i16(self.pose.dx.round(), "pose dx")?.to_le_bytes());
        out.extend_from_slice(&to_i16(self.pose.dy.round(), "pose dy")?.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        for (m, d) in self.minutiae.iter().zip(&self.descriptors) {
            out.extend_from_slice(&to_u16(m.x, "x")?.to_le_bytes());
            out.extend_from_slice(&to_u16(m.y, "y")?.to_le_bytes());
            out.push(quantize_angle(m.theta));
            out.extend_from_slice(&d.to_bytes());
        }
        Ok(out)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, TemplateError> {
        Self::deserialize_with(bytes, MccParams::default().min_bits)
    }

    /// Minutia kinds are not stored and come back as `Unknown`.
    pub fn deserialize_with(bytes: &[u8], min_bits: u32) -> Result<Self, TemplateError> {
        if bytes.len() < HEADER_BYTES {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(TemplateError::Format("bad magic".into()));
            }
            return Err(TemplateError::TruncatedFile {
                expected: HEADER_BYTES,
                got: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(TemplateError::Format("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(TemplateError::Format(format!("unsupported version {}", bytes[4])));
        }
        let flags = bytes[5];
        if flags >> 4 != 0 {
            return Err(TemplateError::Format(format!("reserved flag bits set: {flags:#04x}")));
        }
        let hand = decode_hand(flags & 3)?;
        let reg_class = decode_class(flags >> 2 & 3)?;
        let i16_at = |o: usize| i16::from_le_bytes([bytes[o], bytes[o + 1]]) as f64;
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let pose = RigidPose::from_degrees(i16_at(6) / 100.0, i16_at(8), i16_at(10));
        let n = u16_at(12) as usize;
        let expected = Self::serialized_len(n);
        if bytes.len() < expected {
            return Err(TemplateError::TruncatedFile { expected, got: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(TemplateError::Format(format!("{} trailing bytes", bytes.len() - expected)));
        }
        let mut minutiae = Vec::with_capacity(n);
        let mut descriptors = Vec::with_capacity(n);
        for rec in bytes[HEADER_BYTES..].chunks_exact(MINUTIA_BYTES) {
            let x = u16::from_le_bytes([rec[0], rec[1]]) as f64;
            let y = u16::from_le_bytes([rec[2], rec[3]]) as f64;
            minutiae.push(Minutia::new(x, y, dequantize_angle(rec[4]), MinutiaKind::Unknown));
            let d: &[u8; DESCRIPTOR_BYTES] = rec[5..].try_into().expect("chunk size");
            descriptors.push(MccDescriptor::from_bytes(d, min_bits));
        }
        Ok(Self {
            hand,
            reg_class,
            pose,
            minutiae,
            descriptors,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        Self::deserialize(&fs::read(path).map_err(io_err(path))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TemplateError> {
        let path = path.as_ref();
        fs::write(path, self.serialize()?).map_err(io_err(path))
    }
}

fn to_i16(v: f64, what: &str) -> Result<i16, TemplateError> {
    if v.is_finite() && v >= i16::MIN as f64 && v <= i16::MAX as f64 {
        Ok(v as i16)
    } else {
        Err(TemplateError::Format(format!("{what} {v} out of i16 range")))
    }
}

fn to_u16(v: f64, what: &str) -> Result<u16, TemplateError> {
    let r = v.round();
    if r.is_finite() && (0.0..=u16::MAX as f64).contains(&r) {
        Ok(r as u16)
    } else {
        Err(TemplateError::Format(format!("minutia {what} {v} out of u16 range")))
    }
}

fn hand_code(h: Hand) -> u8 {
    match h {
        Hand::Left => 0,
        Hand::Right => 1,
        Hand::Unknown => 2,
    }
}

fn decode_hand(c: u8) -> Result<Hand, TemplateError> {
    match c {
        0 => Ok(Hand::Left),
        1 => Ok(Hand::Right),
        2 => Ok(Hand::Unknown),
        _ => Err(TemplateError::Format(format!("bad hand code {c}"))),
    }
}

fn class_code(c: RegistrationClass) -> u8 {
    match c {
        RegistrationClass::Registered => 0,
        RegistrationClass::CoarseOnly => 1,
        RegistrationClass::Unregistered => 2,
    }
}

fn decode_class(c: u8) -> Result<RegistrationClass, TemplateError> {
    match c {
        0 => Ok(RegistrationClass::Registered),
        1 => Ok(RegistrationClass::CoarseOnly),
        2 => Ok(RegistrationClass::Unregistered),
        _ => Err(TemplateError::Format(format!("bad registration class code {c}"))),
    }
}

/// Templates keyed by id. Left and Right templates form separate
/// partitions; Unknown-hand templates are searched by every probe since
/// their hand was never decided.
#[derive(Debug, Clone, Default)]
pub struct Gallery {
    entries: BTreeMap<String, PalmTemplate>,
}

impl Gallery {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, t: PalmTemplate) -> Result<(), TemplateError> {
        let id = id.into();
        if self.entries.contains_key(&id) {
            return Err(TemplateError::DuplicateId(id));
        }
        self.entries.insert(id, t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PalmTemplate> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PalmTemplate)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn partition(&self, hand: Hand) -> impl Iterator<Item = (&str, &PalmTemplate)> {
        self.iter().filter(move |(_, t)| t.hand == hand)
    }

    /// Entries a probe of the given hand is compared against.
    pub fn candidates(&self, probe: Hand) -> Vec<(&str, &PalmTemplate)> {
        self.iter()
            .filter(|(_, t)| probe == Hand::Unknown || t.hand == probe || t.hand == Hand::Unknown)
            .collect()
    }

    /// Loads every `*.tpl` file in `dir`; the id is the file stem.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let mut paths = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_file() && path.extension().is_some_and(|e| e == EXTENSION) {
                paths.push(path);
            }
        }
        paths.sort();
        let mut g = Gallery::new();
        for path in paths {
            let id = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| TemplateError::Format(format!("bad file name {}", path.display())))?;
            let t = PalmTemplate::load(&path)?;
            g.insert(id.to_string(), t)?;
        }
        Ok(g)
    }

    /// Writes `t` as `dir/id.tpl` and adds it.
    pub fn enroll(&mut self, dir: impl AsRef<Path>, id: &str, t: PalmTemplate) -> Result<(), TemplateError> {
        if self.entries.contains_key(id) {
            return Err(TemplateError::DuplicateId(id.to_string()));
        }
        t.save(dir.as_ref().join(format!("{id}.{EXTENSION}")))?;
        self.insert(id, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    /// Descending score, ties by id.
    pub ranked: Vec<(String, f64)>,
    pub matches: usize,
}

/// Gates follow the looser of the two templates' classes. Templates too
/// small to normalize score zero.
pub fn match_templates(a: &PalmTemplate, b: &PalmTemplate, gates: &GateTable, p: &GlobalParams) -> f64 {
    let g = gates.for_pair(a.reg_class, b.reg_class);
    match_features(a.view(), b.view(), &g, p).map(|r| r.score).unwrap_or(0.0)
}

/// 1:N search of `probe` over the partition its hand selects.
pub fn identify(probe: &PalmTemplate, g: &Gallery, gates: &GateTable, p: &GlobalParams) -> Result<Identification, TemplateError> {
    if g.is_empty() {
        return Err(TemplateError::EmptyGallery);
    }
    let cands = g.candidates(probe.hand);
    let mut ranked: Vec<(String, f64)> = cands.par_iter().map(|(id, t)| (id.to_string(), match_templates(probe, t, gates, p))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Identification {
        matches: cands.len(),
        ranked,
    })
}
