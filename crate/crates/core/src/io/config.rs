//! Flat `key = value` configuration with dotted section prefixes.
//!
//! ```text
//! # registration run
//! fine_dims = 48 48 24
//! lambda = 0.1
//! net.hidden_width = 32
//! optimizer.lr = 1e-3      # every stage
//! fine.max_iters = 800     # one stage
//! ```
//!
//! Stage keys (`coarse.*`, `distill.*`, `fine.*`) override `optimizer.*`
//! regardless of their order in the file. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{BumpDeformSpec, PhantomSpec};
use crate::registration::{OptimConfig, RegistrationConfig};

struct Entries {
    map: BTreeMap<String, String>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", lineno + 1),
                detail: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config {
                    key: format!("line {}", lineno + 1),
                    detail: "empty key".into(),
                });
            }
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config {
                    key,
                    detail: "given more than once".into(),
                });
            }
        }
        Ok(Self { map })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| Error::Config {
                key: key.to_string(),
                detail: format!("cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn take_list<T: FromStr, const N: usize>(&mut self, key: &str) -> Result<Option<[T; N]>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.map.remove(key) else {
            return Ok(None);
        };
        let parts: Vec<&str> = v.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if parts.len() != N {
            return Err(Error::Config {
                key: key.to_string(),
                detail: format!("expected {N} values, got `{v}`"),
            });
        }
        let mut out = Vec::with_capacity(N);
        for p in parts {
            out.push(p.parse::<T>().map_err(|e| Error::Config {
                key: key.to_string(),
                detail: format!("cannot parse `{p}`: {e}"),
            })?);
        }
        Ok(out.try_into().ok())
    }

    fn finish(self) -> Result<()> {
        match self.map.into_keys().next() {
            None => Ok(()),
            Some(key) => Err(Error::Config {
                key,
                detail: "unknown key".into(),
            }),
        }
    }
}

fn apply_optim(e: &mut Entries, prefix: &str, cfg: &mut OptimConfig) -> Result<()> {
    let lr_key = format!("{prefix}.lr");
    let long_key = format!("{prefix}.learning_rate");
    if let Some(v) = e.take(&lr_key)? {
        cfg.learning_rate = v;
    }
    if let Some(v) = e.take(&long_key)? {
        cfg.learning_rate = v;
    }
    macro_rules! field {
        ($name:ident) => {
            if let Some(v) = e.take(&format!("{prefix}.{}", stringify!($name)))? {
                cfg.$name = v;
            }
        };
    }
    field!(beta1);
    field!(beta2);
    field!(epsilon);
    field!(max_iters);
    field!(plateau_tol);
    field!(plateau_window);
    Ok(())
}

pub fn parse_config(text: &str) -> Result<RegistrationConfig> {
    let mut e = Entries::parse(text)?;
    let mut cfg = RegistrationConfig::default();
    if let Some(v) = e.take_list("coarse_dims")? {
        cfg.coarse_dims = v;
    }
    if let Some(v) = e.take_list("fine_dims")? {
        cfg.fine_dims = v;
    }
    if let Some(v) = e.take("n_steps")? {
        cfg.n_steps = v;
    }
    if let Some(v) = e.take("metric")? {
        cfg.metric = v;
    }
    if let Some(v) = e.take("lambda")? {
        cfg.lambda = v;
    }
    if let Some(v) = e.take("gamma")? {
        cfg.gamma = v;
    }
    if let Some(v) = e.take("seed")? {
        cfg.seed = v;
    }
    if let Some(v) = e.take("net.hidden_width")? {
        cfg.net.hidden_width = v;
    }
    if let Some(v) = e.take("net.activation")? {
        cfg.net.activation = v;
    }
    if let Some(v) = e.take("net.sine_frequency")? {
        cfg.net.sine_frequency = v;
    }
    for stage in [&mut cfg.coarse_optim, &mut cfg.distill_optim, &mut cfg.fine_optim] {
        let mut shared = Entries {
            map: e
                .map
                .iter()
                .filter(|(k, _)| k.starts_with("optimizer."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        };
        apply_optim(&mut shared, "optimizer", stage)?;
        shared.finish()?;
    }
    e.map.retain(|k, _| !k.starts_with("optimizer."));
    apply_optim(&mut e, "coarse", &mut cfg.coarse_optim)?;
    apply_optim(&mut e, "distill", &mut cfg.distill_optim)?;
    apply_optim(&mut e, "fine", &mut cfg.fine_optim)?;
    e.finish()?;
    cfg.validate().map_err(|err| Error::Config {
        key: "(config)".into(),
        detail: err.to_string(),
    })?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RegistrationConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Phantom and deformation for `synth`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SynthSpec {
    pub phantom: PhantomSpec,
    pub bump: BumpDeformSpec,
}

/// Keys: `phantom.dims`, `phantom.n_blobs`, `phantom.intensity_range`,
/// `phantom.seed`, `bump.center`, `bump.amplitude_voxels`,
/// `bump.direction`, `bump.sigma`.
pub fn parse_synth_spec(text: &str) -> Result<SynthSpec> {
    let mut e = Entries::parse(text)?;
    let mut s = SynthSpec::default();
    if let Some(v) = e.take_list("phantom.dims")? {
        s.phantom.dims = v;
    }
    if let Some(v) = e.take("phantom.n_blobs")? {
        s.phantom.n_blobs = v;
    }
    if let Some([lo, hi]) = e.take_list("phantom.intensity_range")? {
        s.phantom.intensity_range = (lo, hi);
    }
    if let Some(v) = e.take("phantom.seed")? {
        s.phantom.seed = v;
    }
    if let Some(v) = e.take_list("bump.center")? {
        s.bump.center = v;
    }
    if let Some(v) = e.take("bump.amplitude_voxels")? {
        s.bump.amplitude_voxels = v;
    }
    if let Some(v) = e.take_list("bump.direction")? {
        s.bump.direction = v;
    }
    if let Some(v) = e.take("bump.sigma")? {
        s.bump.sigma = v;
    }
    e.finish()?;
    s.phantom.validate().map_err(|err| Error::Config {
        key: "phantom".into(),
        detail: err.to_string(),
    })?;
    s.bump.validate().map_err(|err| Error::Config {
        key: "bump".into(),
        detail: err.to_string(),
    })?;
    Ok(s)
}

pub fn load_synth_spec(path: impl AsRef<Path>) -> Result<SynthSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_synth_spec(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;
    use crate::objective::SimMetric;

    #[test]
    fn empty_is_default() {
        assert_eq!(parse_config("").unwrap(), RegistrationConfig::default());
        assert_eq!(parse_config("# nothing\n\n").unwrap(), RegistrationConfig::default());
    }

    #[test]
    fn values_and_sections() {
        let cfg = parse_config(
            "fine_dims = 48 48 24\n\
             coarse_dims = 12, 12, 6\n\
             fine.lr = 5e-4   # fine only\n\
             optimizer.lr = 1e-3\n\
             optimizer.max_iters = 7\n\
             metric = mse\n\
             net.activation = tanh\n\
             net.hidden_width = 16\n\
             lambda = 0.25\n\
             seed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.fine_dims, [48, 48, 24]);
        assert_eq!(cfg.coarse_dims, [12, 12, 6]);
        assert_eq!(cfg.coarse_optim.learning_rate, 1e-3);
        assert_eq!(cfg.distill_optim.learning_rate, 1e-3);
        assert_eq!(cfg.fine_optim.learning_rate, 5e-4);
        assert_eq!(cfg.fine_optim.max_iters, 7);
        assert_eq!(cfg.metric, SimMetric::Mse);
        assert_eq!(cfg.net.activation, Activation::Tanh);
        assert_eq!(cfg.net.hidden_width, 16);
        assert_eq!(cfg.lambda, 0.25);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn errors_name_the_key() {
        let err = parse_config("optimizer.lr = fast").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "optimizer.lr"), "{err}");
        let err = parse_config("optimiser.lr = 0.1").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "optimiser.lr"), "{err}");
        let err = parse_config("fine_dims = 4 4").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "fine_dims"));
        let err = parse_config("lambda = 1\nlambda = 2").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "lambda"));
        assert!(parse_config("just words").is_err());
        assert!(parse_config("n_steps = 0").is_err());
    }

    #[test]
    fn synth_spec() {
        assert_eq!(parse_synth_spec("").unwrap(), SynthSpec::default());
        let s = parse_synth_spec(
            "phantom.dims = 20 20 16\nphantom.n_blobs = 2\nphantom.intensity_range = 0 2\n\
             bump.center = 0.1 0 -0.2\nbump.amplitude_voxels = 2\nbump.direction = 0 1 0\nbump.sigma = 0.3",
        )
        .unwrap();
        assert_eq!(s.phantom.dims, [20, 20, 16]);
        assert_eq!(s.phantom.intensity_range, (0.0, 2.0));
        assert_eq!(s.bump.direction, [0.0, 1.0, 0.0]);
        assert!(parse_synth_spec("bump.direction = 1 1 0").is_err());
        assert!(parse_synth_spec("phantom.colour = red").is_err());
    }
}
