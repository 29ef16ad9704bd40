//! Plain `key = value` configuration with dotted keys. Every tunable
//! number of the pipeline has a key; angles are given in degrees.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::extraction::ExtractionParams;
use crate::ght::GhtParams;
use crate::global::GlobalParams;
use crate::mcc::{GateTable, MccParams};
use crate::orientation::OrientationParams;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseParams {
    /// CNN acceptance threshold on the smoothed maximum score.
    pub min_confidence: f64,
    /// Vote stride of the classifier-free fallback.
    pub fallback_vote_stride: usize,
}

impl Default for CoarseParams {
    fn default() -> Self {
        Self {
            min_confidence: crate::cnn::MIN_CONFIDENCE,
            fallback_vote_stride: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceParams {
    /// Minimum averaged coherence for a reference block to be foreground.
    pub min_quality: f64,
    /// Pre-aligned exemplar images used by `build-reference`.
    pub exemplars: Vec<PathBuf>,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        Self {
            min_quality: 0.3,
            exemplars: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub orientation: OrientationParams,
    pub coarse: CoarseParams,
    pub ght: GhtParams,
    pub extraction: ExtractionParams,
    pub mcc: MccParams,
    pub gates: GateTable,
    pub global: GlobalParams,
    pub reference: ReferenceParams,
}

trait Codec {
    type Field;
    fn decode(s: &str) -> Option<Self::Field>;
    fn encode(v: &Self::Field) -> String;
}

struct Real;
struct Deg;
struct Count;
struct Bits;
struct Paths;

impl Codec for Real {
    type Field = f64;
    fn decode(s: &str) -> Option<f64> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn encode(v: &f64) -> String {
        v.to_string()
    }
}

impl Codec for Deg {
    type Field = f64;
    fn decode(s: &str) -> Option<f64> {
        Real::decode(s).map(f64::to_radians)
    }
    fn encode(v: &f64) -> String {
        // round away the radian round trip
        let d = v.to_degrees();
        let r = (d * 1e9).round() / 1e9;
        r.to_string()
    }
}

impl Codec for Count {
    type Field = usize;
    fn decode(s: &str) -> Option<usize> {
        s.parse().ok()
    }
    fn encode(v: &usize) -> String {
        v.to_string()
    }
}

impl Codec for Bits {
    type Field = u32;
    fn decode(s: &str) -> Option<u32> {
        s.parse().ok()
    }
    fn encode(v: &u32) -> String {
        v.to_string()
    }
}

impl Codec for Paths {
    type Field = Vec<PathBuf>;
    fn decode(s: &str) -> Option<Vec<PathBuf>> {
        Some(s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect())
    }
    fn encode(v: &Vec<PathBuf>) -> String {
        v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
    }
}

macro_rules! keys {
    ($($key:literal => [$($path:tt)+] : $codec:ident),* $(,)?) => {
        impl Config {
            /// Every accepted key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key {
                    $($key => {
                        self.$($path)+ = <$codec as Codec>::decode(value).ok_or_else(|| ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                        })?;
                    })*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(<$codec as Codec>::encode(&self.$($path)+)),)*
                    _ => None,
                }
            }
        }
    };
}

keys! {
    "orientation.energy_threshold" => [orientation.energy_threshold]: Real,
    "orientation.min_coherence" => [orientation.min_coherence]: Real,
    "orientation.mask_fraction" => [orientation.mask_fraction]: Real,
    "coarse.min_confidence" => [coarse.min_confidence]: Real,
    "coarse.fallback_vote_stride" => [coarse.fallback_vote_stride]: Count,
    "ght.max_rotation_deg" => [ght.max_rotation_deg]: Real,
    "ght.rotation_step_deg" => [ght.rotation_step_deg]: Real,
    "ght.max_displacement" => [ght.max_displacement]: Real,
    "ght.bin_px" => [ght.bin_px]: Real,
    "ght.angle_tolerance_deg" => [ght.angle_tolerance_deg]: Real,
    "ght.min_q1" => [ght.min_q1]: Real,
    "ght.min_q2" => [ght.min_q2]: Real,
    "ght.vote_stride" => [ght.vote_stride]: Count,
    "extraction.min_period" => [extraction.min_period]: Real,
    "extraction.max_period" => [extraction.max_period]: Real,
    "extraction.fallback_period" => [extraction.fallback_period]: Real,
    "extraction.gabor_sigma" => [extraction.gabor_sigma]: Real,
    "extraction.gabor_size" => [extraction.gabor_size]: Count,
    "extraction.trace_len" => [extraction.trace_len]: Count,
    "extraction.border_px" => [extraction.border_px]: Count,
    "extraction.spur_len" => [extraction.spur_len]: Count,
    "extraction.opposing_dist" => [extraction.opposing_dist]: Real,
    "extraction.bif_ending_dist" => [extraction.bif_ending_dist]: Real,
    "mcc.n_s" => [mcc.n_s]: Count,
    "mcc.n_d" => [mcc.n_d]: Count,
    "mcc.radius" => [mcc.radius]: Real,
    "mcc.sigma_s" => [mcc.sigma_s]: Real,
    "mcc.sigma_d" => [mcc.sigma_d]: Real,
    "mcc.psi_threshold" => [mcc.psi_threshold]: Real,
    "mcc.min_bits" => [mcc.min_bits]: Bits,
    "gates.registered.t_x" => [gates.registered.t_x]: Real,
    "gates.registered.t_y" => [gates.registered.t_y]: Real,
    "gates.registered.t_rot_deg" => [gates.registered.t_rot]: Deg,
    "gates.coarse_only.t_x" => [gates.coarse_only.t_x]: Real,
    "gates.coarse_only.t_y" => [gates.coarse_only.t_y]: Real,
    "gates.coarse_only.t_rot_deg" => [gates.coarse_only.t_rot]: Deg,
    "gates.unregistered.t_x" => [gates.unregistered.t_x]: Real,
    "gates.unregistered.t_y" => [gates.unregistered.t_y]: Real,
    "gates.unregistered.t_rot_deg" => [gates.unregistered.t_rot]: Deg,
    "global.n_r_max" => [global.n_r_max]: Count,
    "global.w_r" => [global.w_r]: Real,
    "global.n_rel" => [global.n_rel]: Count,
    "global.n_p" => [global.n_p]: Count,
    "global.mu_1" => [global.mu_rho[0]]: Real,
    "global.mu_2_deg" => [global.mu_rho[1]]: Deg,
    "global.mu_3_deg" => [global.mu_rho[2]]: Deg,
    "global.tau_1" => [global.tau_rho[0]]: Real,
    "global.tau_2" => [global.tau_rho[1]]: Real,
    "global.tau_3" => [global.tau_rho[2]]: Real,
    "reference.min_quality" => [reference.min_quality]: Real,
    "reference.exemplars" => [reference.exemplars]: Paths,
}

impl Config {
    /// Applies `key = value` lines on top of the current values. `#`
    /// starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            self.set(key, value)?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Config::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Relative exemplar paths are resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            for p in &mut c.reference.exemplars {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(c)
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadValue {
                key: o.to_string(),
                value: String::new(),
            })?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    /// All keys with their current values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.ght.vote_stride == 0 || self.coarse.fallback_vote_stride == 0 {
            return fail("vote strides must be at least 1");
        }
        if !(self.ght.rotation_step_deg > 0.0) || !(self.ght.bin_px > 0.0) {
            return fail("ght step and bin size must be positive");
        }
        if self.extraction.gabor_size.is_multiple_of(2) {
            return fail("extraction.gabor_size must be odd");
        }
        if !(self.extraction.min_period > 0.0 && self.extraction.min_period <= self.extraction.max_period) {
            return fail("extraction periods must satisfy 0 < min <= max");
        }
        if self.mcc.n_s == 0 || self.mcc.n_d == 0 || self.mcc.n_s * self.mcc.n_s * self.mcc.n_d != crate::mcc::DESCRIPTOR_BITS {
            return fail("mcc.n_s^2 * mcc.n_d must equal the 320-bit descriptor length");
        }
        if !(0.0..=1.0).contains(&self.global.w_r) {
            return fail("global.w_r must lie in [0, 1]");
        }
        if self.global.n_r_max == 0 || self.global.n_p == 0 {
            return fail("global.n_r_max and global.n_p must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = Config::default();
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.get("gates.registered.t_rot_deg").unwrap(), "20");
        assert_eq!(c.get("global.mu_2_deg").unwrap(), "30");
    }

    #[test]
    fn parses_and_overrides() {
        let c = Config::parse(
            "# comment\n\nght.min_q2 = 0.6   # trailing\nglobal.n_p=40\ngates.registered.t_rot_deg = 10\nreference.exemplars = a.pgm, b.pgm\n",
        )
        .unwrap();
        assert_eq!(c.ght.min_q2, 0.6);
        assert_eq!(c.global.n_p, 40);
        assert!((c.gates.registered.t_rot - 10f64.to_radians()).abs() < 1e-15);
        assert_eq!(c.reference.exemplars, vec![PathBuf::from("a.pgm"), PathBuf::from("b.pgm")]);
        let mut c = c;
        c.apply_overrides(&["global.n_p = 12"]).unwrap();
        assert_eq!(c.global.n_p, 12);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(Config::parse("nope = 1"), Err(ConfigError::UnknownKey("nope".into())));
        assert_eq!(Config::parse("ght.min_q2"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(Config::parse("ght.vote_stride = -1"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(Config::parse("ght.vote_stride = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::parse("mcc.radius = nan"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(Config::parse("mcc.n_d = 4"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn every_key_is_gettable() {
        let c = Config::default();
        for k in Config::KEYS {
            let v = c.get(k).unwrap();
            let mut d = Config::default();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }
}
