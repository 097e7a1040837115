//! TOML run configuration. Unknown keys anywhere are errors.
//!
//! ```toml
//! [spacetime]
//! kind = "rw"            # minkowski | de_sitter | anti_de_sitter | rw
//! d = 3
//! fiber = "flat"         # flat | sphere | hyperbolic (rw only)
//! warp = "t^0.5"         # t^A | e^t | e^t^B | cosh | 1 | table:PATH (rw only)
//! sigma = 1.0
//!
//! [numerics]             # all optional
//! ds = 1e-3
//! s_max = 50.0
//! record_every = 100
//! reorth_cadence = 100
//! temporal = "rapidity"  # or "euler"
//! scheme = "lifted"      # or "direct"; default picks per fiber
//! t0 = 1.0
//! tdot0 = 2.0
//!
//! [ensemble]
//! paths = 200
//! seed = 1
//!
//! [outputs]
//! directory = "out"
//! formats = ["json", "csv", "plotdata"]
//! emit_paths = false
//!
//! [checks]
//! registry = ["pseudo-norm"]      # replaces the regime's default list
//! threshold_file = "thresholds.toml"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boundary_stats::{known_checks, Thresholds};
use crate::error::{Error, Result};
use crate::rw_sim::RwConfig;
use crate::spacetime::{Fiber, SpaceTimeKind, SpaceTimeSpec, WarpFunction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpacetimeSection {
    pub kind: SpaceTimeKind,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fiber: Option<Fiber>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warp: Option<String>,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub paths: usize,
    pub seed: u64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { paths: 1, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    /// `summary.json`
    Json,
    /// `summary.csv`
    Csv,
    /// `plot/trace.csv`, `plot/slope.csv`, `plot/histogram.csv`
    Plotdata,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
    /// one JSONL file per path under `paths/`
    pub emit_paths: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("out"),
            formats: vec![OutputFormat::Json, OutputFormat::Csv],
            emit_paths: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registry: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub spacetime: SpacetimeSection,
    #[serde(default)]
    pub numerics: RwConfig,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub checks: ChecksSection,
}

impl SimConfig {
    pub fn new(spacetime: SpacetimeSection) -> Self {
        SimConfig {
            spacetime,
            numerics: RwConfig::default(),
            ensemble: EnsembleSection::default(),
            outputs: OutputSection::default(),
            checks: ChecksSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    /// SHA-256 of the canonical serialisation, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Model space-time described by the `[spacetime]` table.
    pub fn spec(&self) -> Result<SpaceTimeSpec> {
        let st = &self.spacetime;
        let only_rw = |what: &str| Err(Error::InvalidConfig(format!("`{what}` is only meaningful for kind = \"rw\"")));
        let spec = match st.kind {
            SpaceTimeKind::Rw => {
                let warp: WarpFunction = st
                    .warp
                    .as_deref()
                    .ok_or_else(|| Error::InvalidConfig("kind = \"rw\" needs a warp".into()))?
                    .parse()
                    .map_err(|e: Error| match e {
                        Error::Io(m) => Error::InvalidConfig(format!("warp table: {m}")),
                        other => other,
                    })?;
                SpaceTimeSpec::rw(st.fiber.unwrap_or(Fiber::Flat), warp, st.d, st.sigma)
            }
            _ if st.fiber.is_some() => return only_rw("fiber"),
            _ if st.warp.is_some() => return only_rw("warp"),
            SpaceTimeKind::Minkowski => SpaceTimeSpec::minkowski(st.d, st.sigma),
            SpaceTimeKind::DeSitter => SpaceTimeSpec::de_sitter(st.d, st.sigma),
            SpaceTimeKind::AntiDeSitter => SpaceTimeSpec::anti_de_sitter(st.d, st.sigma),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn thresholds(&self) -> Result<Thresholds> {
        match &self.checks.threshold_file {
            Some(p) => Thresholds::load(p).map_err(|e| match e {
                Error::Io(m) => Error::InvalidConfig(format!("threshold file {}: {m}", p.display())),
                other => other,
            }),
            None => Ok(Thresholds::defaults()),
        }
    }

    /// Every check that can be made before running anything.
    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        self.numerics.validate()?;
        if self.ensemble.paths == 0 {
            return Err(Error::InvalidConfig("ensemble.paths must be >= 1".into()));
        }
        if self.numerics.reorth_cadence == 0 {
            return Err(Error::InvalidConfig("reorth_cadence must be >= 1".into()));
        }
        if let Some(list) = &self.checks.registry {
            let known = known_checks();
            if let Some(bad) = list.iter().find(|n| !known.contains(&n.as_str())) {
                return Err(Error::InvalidConfig(format!("unknown check `{bad}`")));
            }
        }
        self.thresholds()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FULL: &str = r#"
[spacetime]
kind = "rw"
d = 3
fiber = "sphere"
warp = "t^0.5"
sigma = 1.0

[numerics]
ds = 1e-3
s_max = 40.0
record_every = 50
scheme = "lifted"

[ensemble]
paths = 200
seed = 7

[outputs]
directory = "runs/sphere"
formats = ["json", "plotdata"]
emit_paths = true

[checks]
registry = ["bhat-converges", "reconstruction"]
"#;

    #[test]
    fn parses_the_documented_layout() {
        let c = SimConfig::from_toml_str(FULL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.ensemble.paths, 200);
        assert_eq!(c.numerics.record_every, 50);
        assert_eq!(c.numerics.t0, 1.0);
        assert_eq!(c.spec().unwrap().fiber, Fiber::Sphere);
        assert_eq!(c.outputs.formats, vec![OutputFormat::Json, OutputFormat::Plotdata]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for (from, to) in [("seed = 7", "sed = 7"), ("d = 3", "d = 3\ndimension = 3"), ("emit_paths", "emit_path")] {
            let text = FULL.replace(from, to);
            assert!(matches!(SimConfig::from_toml_str(&text), Err(Error::InvalidConfig(_))), "{to}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let cases = [
            ("ds = 1e-3", "ds = 0.0"),
            ("ds = 1e-3", "ds = -1e-3"),
            ("s_max = 40.0", "s_max = 0.005"),
            ("paths = 200", "paths = 0"),
            ("sigma = 1.0", "sigma = 0.0"),
            ("warp = \"t^0.5\"", "warp = \"t^x\""),
            ("\"reconstruction\"", "\"no-such-check\""),
            ("kind = \"rw\"", "kind = \"de_sitter\""),
        ];
        for (from, to) in cases {
            let c = SimConfig::from_toml_str(&FULL.replace(from, to)).unwrap();
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))), "{to}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = SimConfig::from_toml_str(FULL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.ensemble.seed += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    proptest! {
        #[test]
        fn round_trips_losslessly(
            ds in 1e-6f64..1e-1,
            s_mul in 10.0f64..1e4,
            sigma in 1e-3f64..10.0,
            expo in 0.01f64..3.0,
            paths in 1usize..10_000,
            seed in any::<u64>(),
            every in 1usize..1000,
        ) {
            let mut c = SimConfig::new(SpacetimeSection {
                kind: SpaceTimeKind::Rw,
                d: 3,
                fiber: Some(Fiber::Hyperbolic),
                warp: Some(format!("t^{expo}")),
                sigma,
            });
            c.numerics.ds = ds;
            c.numerics.s_max = ds * s_mul;
            c.numerics.record_every = every;
            c.ensemble = EnsembleSection { paths, seed };
            c.checks.registry = Some(vec!["pseudo-norm".into()]);
            let back = SimConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.spec().unwrap().warp, WarpFunction::Power(expo));
        }
    }
}
