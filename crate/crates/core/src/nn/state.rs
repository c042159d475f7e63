use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "0")]
    L0,
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "head")]
    Head,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L0, Level::L1, Level::Head];

    pub(crate) fn tag(self) -> u8 {
        match self {
            Level::L0 => 0,
            Level::L1 => 1,
            Level::Head => 2,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.tag() == t)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::L0 => "0",
            Level::L1 => "1",
            Level::Head => "head",
        })
    }
}

impl FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "0" => Ok(Level::L0),
            "1" => Ok(Level::L1),
            "head" => Ok(Level::Head),
            other => Err(Error::Contract(format!("unknown level `{other}` (expected 0, 1 or head)"))),
        }
    }
}

/// One convolution, optionally followed by group norm, ReLU and dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub level: Level,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub normalized: bool,
}

impl LayerSpec {
    fn nc(name: impl Into<String>, level: Level, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            level,
            cin,
            cout,
            kernel: 3,
            normalized: true,
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let mut v = vec![
            (format!("{}.w", self.name), vec![self.cout, self.cin, k, k, k]),
            (format!("{}.b", self.name), vec![self.cout]),
        ];
        if self.normalized {
            v.push((format!("{}.gn.gamma", self.name), vec![self.cout]));
            v.push((format!("{}.gn.beta", self.name), vec![self.cout]));
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Layer list in forward order.
///
/// Level 0 (at input / entry_pool): `l0.entry`, `l0.enc.{i}`, then after a
/// stride-d pool and nearest upsampling `l0.dec`, added to the entry features.
/// Level 1 (at full size): `l1.entry`; its pooled output plus the level-0
/// decoder output is pooled by d into `l1.mid.{i}`; `l1.dec.0` and `l1.dec.1`
/// undo the two poolings with additive skips; `head` is the 1x1x1 classifier.
pub fn layer_specs(cfg: &NetworkConfig) -> Vec<LayerSpec> {
    let (e, b0, b1) = (cfg.level0_entry_filters, cfg.level0_block_filters, cfg.level1_block_filters);
    let mut v = vec![LayerSpec::nc("l0.entry", Level::L0, 1, e)];
    for i in 0..cfg.blocks_per_stage {
        v.push(LayerSpec::nc(format!("l0.enc.{i}"), Level::L0, if i == 0 { e } else { b0 }, b0));
    }
    v.push(LayerSpec::nc("l0.dec", Level::L0, b0, e));
    v.push(LayerSpec::nc("l1.entry", Level::L1, 1, e));
    for i in 0..cfg.blocks_per_stage {
        v.push(LayerSpec::nc(format!("l1.mid.{i}"), Level::L1, if i == 0 { e } else { b1 }, b1));
    }
    v.push(LayerSpec::nc("l1.dec.0", Level::L1, b1, e));
    v.push(LayerSpec::nc("l1.dec.1", Level::L1, e, e));
    v.push(LayerSpec {
        name: "head".into(),
        level: Level::Head,
        cin: e,
        cout: cfg.num_classes,
        kernel: 1,
        normalized: false,
    });
    v
}

/// Trainable parameter count of a configuration, by closed form over the layer list.
pub fn param_count(cfg: &NetworkConfig) -> usize {
    layer_specs(cfg).iter().map(LayerSpec::param_count).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub level: Level,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub config: NetworkConfig,
    pub params: BTreeMap<String, Param>,
    pub frozen: BTreeSet<Level>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// He-normal weights (std = sqrt(2 / fan_in)), zero bias, unit GN scale, zero GN shift.
fn init_param(name: &str, shape: &[usize], seed: u64) -> Vec<f32> {
    let n: usize = shape.iter().product();
    if name.ends_with(".w") {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
        (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
    } else if name.ends_with(".gn.gamma") {
        vec![1.0; n]
    } else {
        vec![0.0; n]
    }
}

impl NetworkState {
    pub fn build(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for spec in layer_specs(&config) {
            for (name, shape) in spec.param_shapes() {
                let data = init_param(&name, &shape, config.init_seed);
                params.insert(name, Param { level: spec.level, shape, data });
            }
        }
        Ok(Self {
            config,
            params,
            frozen: BTreeSet::new(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn level_param_count(&self, level: Level) -> usize {
        self.params.values().filter(|p| p.level == level).map(|p| p.data.len()).sum()
    }

    pub fn set_frozen(&mut self, levels: impl IntoIterator<Item = Level>) {
        self.frozen = levels.into_iter().collect();
    }

    /// Parses level IDs such as `["0", "head"]`.
    pub fn set_frozen_by_name<S: AsRef<str>>(&mut self, levels: &[S]) -> Result<()> {
        let parsed = levels.iter().map(|s| s.as_ref().parse()).collect::<Result<Vec<Level>>>()?;
        self.set_frozen(parsed);
        Ok(())
    }

    pub fn is_frozen(&self, level: Level) -> bool {
        self.frozen.contains(&level)
    }

    /// Replaces the classifier with a freshly initialized `new_num_classes` head.
    pub fn swap_head(&mut self, new_num_classes: usize, seed: u64) -> Result<()> {
        if new_num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {new_num_classes}")));
        }
        self.config.num_classes = new_num_classes;
        self.reinit_levels(&[Level::Head], seed);
        Ok(())
    }

    /// Re-draws every parameter of the given levels from the initializer.
    pub fn reinit_levels(&mut self, levels: &[Level], seed: u64) {
        self.params.retain(|_, p| !levels.contains(&p.level));
        for spec in layer_specs(&self.config).into_iter().filter(|s| levels.contains(&s.level)) {
            for (name, shape) in spec.param_shapes() {
                let data = init_param(&name, &shape, seed);
                self.params.insert(name, Param { level: spec.level, shape, data });
            }
        }
    }

    pub fn get(&self, name: &str) -> &[f32] {
        &self.params[name].data
    }

    /// Checks that the parameter set matches the layer list of `config`.
    pub(crate) fn check_consistent(&self) -> Result<()> {
        let mut expected = 0;
        for spec in layer_specs(&self.config) {
            for (name, shape) in spec.param_shapes() {
                expected += 1;
                match self.params.get(&name) {
                    Some(p) if p.shape == shape && p.level == spec.level && p.data.len() == shape.iter().product::<usize>() => {}
                    Some(_) => return Err(Error::Format(format!("parameter `{name}` has the wrong shape or level"))),
                    None => return Err(Error::Format(format!("parameter `{name}` is missing"))),
                }
            }
        }
        if expected != self.params.len() {
            return Err(Error::Format("unexpected extra parameters".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_contract() {
        assert!(NetworkState::build(NetworkConfig::desk(64, 7)).is_ok());
        assert!(matches!(NetworkState::build(NetworkConfig::desk(63, 7)), Err(Error::Config(_))));
    }

    #[test]
    fn count_matches_built_state_and_head_delta() {
        let s7 = NetworkState::build(NetworkConfig::desk(16, 7)).unwrap();
        let s4 = NetworkState::build(NetworkConfig::desk(16, 4)).unwrap();
        assert_eq!(s7.param_count(), param_count(&s7.config));
        // head: (32 * 1^3 + 1) weights+bias per class
        let e = s7.config.level0_entry_filters;
        assert_eq!(s7.param_count() - s4.param_count(), 3 * (e + 1));
        assert_eq!(s7.level_param_count(Level::L0), s4.level_param_count(Level::L0));
        assert_eq!(s7.level_param_count(Level::L1), s4.level_param_count(Level::L1));
    }

    #[test]
    fn default_count_is_stable() {
        // Closed form: see README for the per-layer breakdown.
        assert_eq!(param_count(&NetworkConfig::default()), 915_975);
    }

    #[test]
    fn swap_head_preserves_body() {
        let mut s = NetworkState::build(NetworkConfig::desk(16, 7)).unwrap();
        let before = s.clone();
        s.swap_head(4, 99).unwrap();
        assert_eq!(s.params["head.w"].shape, vec![4, 32, 1, 1, 1]);
        for (k, p) in &before.params {
            if p.level != Level::Head {
                assert_eq!(&s.params[k], p);
            }
        }
        let mut same = before.clone();
        same.swap_head(7, 1234).unwrap();
        assert_ne!(same.params["head.w"], before.params["head.w"]);
        assert!(s.swap_head(1, 0).is_err());
    }

    #[test]
    fn unknown_level_is_contract_error() {
        let mut s = NetworkState::build(NetworkConfig::desk(16, 4)).unwrap();
        assert!(matches!(s.set_frozen_by_name(&["0", "2"]), Err(Error::Contract(_))));
        s.set_frozen_by_name(&["0", "head"]).unwrap();
        assert!(s.is_frozen(Level::L0) && s.is_frozen(Level::Head) && !s.is_frozen(Level::L1));
    }
}
