//! Synthetic data generators and the JSON experiment configuration.
//!
//! Every generator draws two-dimensional "content" features that determine
//! the class and two-dimensional "background" features. In the trainer's
//! distribution the background encodes the class too, more cleanly than the
//! content does; in the hard distribution it encodes the next class instead,
//! so a model that leans on the background fails there.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    corrupt_features, load_dataset, permute_labels, strip_labels, Dataset, Format, Sample, SampleId, SeededRng,
};
use crate::error::{Error, Result};
use crate::model::{Mixing, TrainConfig};
use crate::protocol::{
    construct_dhard, AugmentConfig, DataOwner, ExtractorSpec, HardConfig, HardSplit, Mode, ModelTrainer, MtSpec,
    SelectionParams, Strategy,
};

pub const DIM: usize = 4;

/// Shape of the class-conditional distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftParams {
    pub classes: usize,
    pub content_sep: f64,
    pub content_noise: f64,
    pub background_sep: f64,
    pub background_noise: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            classes: 2,
            content_sep: 1.0,
            content_noise: 0.7,
            background_sep: 2.0,
            background_noise: 0.5,
        }
    }
}

impl ShiftParams {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("generator needs at least two classes".into()));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ![
            self.content_sep,
            self.content_noise,
            self.background_sep,
            self.background_noise,
        ]
        .into_iter()
        .all(ok)
        {
            return Err(Error::Config("generator scales must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn direction(&self, c: usize) -> (f64, f64) {
        let a = 2.0 * PI * c as f64 / self.classes as f64;
        (a.cos(), a.sin())
    }

    /// One feature vector of class `y`, from the hard distribution if `hard`.
    pub fn draw(&self, y: usize, hard: bool, rng: &mut impl Rng) -> Vec<f64> {
        let nc = Normal::new(0.0, self.content_noise).expect("finite scale");
        let nb = Normal::new(0.0, self.background_noise).expect("finite scale");
        let (cx, cy) = self.direction(y);
        let bg_class = if hard { (y + 1) % self.classes } else { y };
        let (bx, by) = self.direction(bg_class);
        vec![
            self.content_sep * cx + nc.sample(rng),
            self.content_sep * cy + nc.sample(rng),
            self.background_sep * bx + nb.sample(rng),
            self.background_sep * by + nb.sample(rng),
        ]
    }

    /// `n` samples with uniform labels; the first `n_hard` (after shuffling
    /// positions) come from the hard distribution. Returns the dataset and
    /// the ids of hard-distribution samples.
    pub fn sample(&self, name: &str, n: usize, n_hard: usize, rng: SeededRng) -> Result<(Dataset, Vec<SampleId>)> {
        let mut r = rng.rng();
        let hard_at = rand::seq::index::sample(&mut r, n, n_hard.min(n));
        let mut is_hard = vec![false; n];
        hard_at.iter().for_each(|i| is_hard[i] = true);
        let samples: Vec<Sample> = (0..n)
            .map(|i| {
                let y = r.random_range(0..self.classes);
                Sample::new(i, self.draw(y, is_hard[i], &mut r), Some(y))
            })
            .collect();
        let planted = (0..n).filter(|&i| is_hard[i]).collect();
        let classes: Vec<usize> = (0..self.classes).collect();
        Ok((Dataset::with_classes(name, DIM, samples, &classes)?, planted))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    /// Fraction of validation samples drawn from the hard distribution.
    pub val_hard_fraction: f64,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 200,
            val: 200,
            val_hard_fraction: 0.3,
            test: 400,
        }
    }
}

/// A data owner's pool: `size` samples of which `hard_fraction` come from the
/// hard distribution, optionally with every sample's features corrupted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub name: String,
    pub size: usize,
    pub hard_fraction: f64,
    #[serde(default)]
    pub noise: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(default)]
    pub shape: ShiftParams,
    #[serde(default)]
    pub sizes: SplitSizes,
    pub pools: Vec<PoolSpec>,
}

impl GeneratorSpec {
    /// Binary spurious-correlation scenario with one owner pool, 30% of it
    /// from the hard distribution.
    pub fn spurious() -> Self {
        Self {
            shape: ShiftParams::default(),
            sizes: SplitSizes::default(),
            pools: vec![PoolSpec {
                name: "pool".into(),
                size: 400,
                hard_fraction: 0.3,
                noise: None,
            }],
        }
    }

    /// Three-class scenario whose owner pool plants 10% hard-distribution samples.
    pub fn mixture() -> Self {
        Self {
            shape: ShiftParams {
                classes: 3,
                ..ShiftParams::default()
            },
            sizes: SplitSizes::default(),
            pools: vec![PoolSpec {
                name: "pool".into(),
                size: 400,
                hard_fraction: 0.1,
                noise: None,
            }],
        }
    }

    /// Five owners of decreasing utility: clean, noisy, broad superset,
    /// small subset and irrelevant. The trainer's own set is smaller so a
    /// budget of a few dozen samples moves its model.
    pub fn graded() -> Self {
        let pool = |name: &str, size: usize, hard_fraction: f64, noise: Option<f64>| PoolSpec {
            name: name.into(),
            size,
            hard_fraction,
            noise,
        };
        Self {
            shape: ShiftParams {
                classes: 3,
                ..ShiftParams::default()
            },
            sizes: SplitSizes {
                train: 100,
                ..SplitSizes::default()
            },
            pools: vec![
                pool("do-1", 400, 1.0, None),
                pool("do-2", 400, 1.0, Some(1.0)),
                pool("do-3", 400, 0.1, None),
                pool("do-4", 24, 1.0 / 3.0, None),
                pool("do-5", 400, 0.0, None),
            ],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "spurious" => Ok(Self::spurious()),
            "mixture" => Ok(Self::mixture()),
            "graded" => Ok(Self::graded()),
            other => Err(Error::Config(format!("unknown generator `{other}`"))),
        }
    }

    pub fn generate(&self, rng: SeededRng) -> Result<Generated> {
        self.shape.validate()?;
        let s = &self.sizes;
        if !(0.0..=1.0).contains(&s.val_hard_fraction) {
            return Err(Error::Config("val_hard_fraction outside [0, 1]".into()));
        }
        let mut parts = BTreeMap::new();
        let mut planted = BTreeMap::new();
        let (train, _) = self.shape.sample("train", s.train, 0, rng.fork_str("train"))?;
        let n_val_hard = crate::data::fraction_count(s.val_hard_fraction, s.val);
        let (val, _) = self.shape.sample("val", s.val, n_val_hard, rng.fork_str("val"))?;
        let (test, _) = self.shape.sample("test", s.test, s.test, rng.fork_str("test"))?;
        parts.insert("train".to_string(), train);
        parts.insert("val".to_string(), val);
        parts.insert("test".to_string(), test);
        for p in &self.pools {
            if matches!(p.name.as_str(), "train" | "val" | "test") || parts.contains_key(&p.name) {
                return Err(Error::Config(format!("duplicate part name `{}`", p.name)));
            }
            if !(0.0..=1.0).contains(&p.hard_fraction) {
                return Err(Error::Config(format!("hard_fraction of `{}` outside [0, 1]", p.name)));
            }
            let n_hard = crate::data::fraction_count(p.hard_fraction, p.size);
            let stream = rng.fork_str("pool").fork_str(&p.name);
            let (mut d, ids) = self.shape.sample(&p.name, p.size, n_hard, stream)?;
            if let Some(mag) = p.noise {
                d = corrupt_features(&d, 1.0, mag, stream.fork_str("noise"))?;
            }
            planted.insert(p.name.clone(), ids);
            parts.insert(p.name.clone(), d);
        }
        Ok(Generated { parts, planted })
    }
}

/// Generated datasets by part name, with the hard-distribution ids of each pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub parts: BTreeMap<String, Dataset>,
    pub planted: BTreeMap<String, Vec<SampleId>>,
}

impl Generated {
    pub fn part(&self, name: &str) -> Result<&Dataset> {
        self.parts
            .get(name)
            .ok_or_else(|| Error::Config(format!("generator has no part `{name}`")))
    }

    /// Writes each part as `<name>.csv` under `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, d) in &self.parts {
            let path = dir.join(format!("{name}.csv"));
            d.write_csv(&path)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Where a dataset comes from: a file, or a part of the configured generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Generated {
        generated: String,
    },
    File {
        path: PathBuf,
        #[serde(default)]
        format: Option<Format>,
    },
}

/// Owner-side transforms applied before selection, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Transform {
    CorruptFeatures { fraction: f64, magnitude: f64 },
    PermuteLabels { fraction: f64 },
    StripLabels,
}

impl Transform {
    pub fn apply(&self, d: &Dataset, rng: SeededRng) -> Result<Dataset> {
        match *self {
            Transform::CorruptFeatures { fraction, magnitude } => corrupt_features(d, fraction, magnitude, rng),
            Transform::PermuteLabels { fraction } => permute_labels(d, fraction, rng),
            Transform::StripLabels => Ok(strip_labels(d)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtConfig {
    pub train: Source,
    pub val: Source,
    #[serde(default)]
    pub test: Option<Source>,
    pub model: MtSpec,
    #[serde(default)]
    pub hard: HardConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoConfig {
    pub name: String,
    pub data: Source,
    pub strategy: Strategy,
    /// Proxy training schedule; required by gradient strategies.
    #[serde(default)]
    pub proxy: Option<TrainConfig>,
    #[serde(default)]
    pub extractor: ExtractorSpec,
    #[serde(default)]
    pub params: SelectionParams,
    #[serde(default)]
    pub transforms: Vec<Transform>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    pub mt: MtConfig,
    pub dos: Vec<DoConfig>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mode: Mode,
    pub finetune: TrainConfig,
    #[serde(default)]
    pub mixing: Mixing,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    /// Parses a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ScenarioConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |s: &mut Source| {
            if let Source::File { path, .. } = s {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut cfg.mt.train);
        fix(&mut cfg.mt.val);
        if let Some(t) = cfg.mt.test.as_mut() {
            fix(t);
        }
        cfg.dos.iter_mut().for_each(|d| fix(&mut d.data));
        if let Some(dir) = cfg.output_dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() {
            return Err(Error::Config("`budgets` must list at least one budget".into()));
        }
        if self.budgets.contains(&0) {
            return Err(Error::Config("`budgets` entries must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if self.dos.is_empty() {
            return Err(Error::Config("`dos` must list at least one data owner".into()));
        }
        let mut names: Vec<&str> = self.dos.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("data owner names must be unique".into()));
        }
        for d in &self.dos {
            if d.strategy.needs_gradients() && d.proxy.is_none() {
                return Err(Error::Config(format!(
                    "data owner `{}` uses {} but has no `proxy`",
                    d.name, d.strategy
                )));
            }
        }
        self.finetune.validate()?;
        Ok(())
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            mode: self.mode,
            finetune: self.finetune.clone(),
            mixing: self.mixing,
        }
    }
}

/// A training schedule whose seed also depends on the run seed.
fn reseed(cfg: &TrainConfig, run: SeededRng, role: &str) -> TrainConfig {
    TrainConfig {
        seed: run.fork_str(role).fork(cfg.seed.seed).fork(cfg.seed.stream),
        ..cfg.clone()
    }
}

/// Everything instantiated for one seed of a scenario.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub mt: ModelTrainer,
    pub hard: HardSplit,
    pub owners: Vec<DataOwner>,
    pub generated: Option<Generated>,
}

impl Instance {
    pub fn owner(&self, name: &str) -> Result<&DataOwner> {
        self.owners
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::Config(format!("no data owner `{name}`")))
    }
}

fn resolve(source: &Source, generated: Option<&Generated>) -> Result<Dataset> {
    match source {
        Source::File { path, format } => {
            let fmt = format.unwrap_or_else(|| Format::from_path(path));
            load_dataset(path, fmt)
        }
        Source::Generated { generated: part } => generated
            .ok_or_else(|| Error::Config(format!("`{part}` refers to a generator but none is configured")))?
            .part(part)
            .cloned(),
    }
}

/// Generates or loads the data for `seed`, trains the trainer's model,
/// builds the hard split and prepares each owner (transforms, proxy).
pub fn instantiate(cfg: &ScenarioConfig, seed: u64) -> Result<Instance> {
    let run = SeededRng::new(seed);
    let generated = cfg
        .generator
        .as_ref()
        .map(|g| g.generate(run.fork_str("generate")))
        .transpose()?;
    let gen = generated.as_ref();
    let spec = match &cfg.mt.model {
        MtSpec::Linear { train } => MtSpec::Linear {
            train: reseed(train, run, "mt"),
        },
        tree => tree.clone(),
    };
    let test = cfg.mt.test.as_ref().map(|s| resolve(s, gen)).transpose()?;
    let mt = ModelTrainer::fit(resolve(&cfg.mt.train, gen)?, resolve(&cfg.mt.val, gen)?, test, spec)?;
    let hard = construct_dhard(&mt, &cfg.mt.hard, run.fork_str("hard"))?;
    let owners = cfg
        .dos
        .iter()
        .map(|d| {
            let stream = run.fork_str("do").fork_str(&d.name);
            let mut data = resolve(&d.data, gen)?.renamed(d.name.clone());
            for (i, t) in d.transforms.iter().enumerate() {
                data = t.apply(&data, stream.fork_str("transform").fork(i as u64))?;
            }
            let mut owner = DataOwner::new(d.name.clone(), data, d.strategy, stream);
            owner.extractor = d.extractor.clone();
            owner.params = d.params.clone();
            if let Some(p) = &d.proxy {
                if owner.data.is_labeled() {
                    owner = owner.train_proxy(&reseed(p, run, &format!("proxy/{}", d.name)))?;
                }
            }
            Ok(owner)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Instance {
        seed,
        mt,
        hard,
        owners,
        generated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::evaluate;

    #[test]
    fn generator_is_deterministic() {
        let g = GeneratorSpec::spurious();
        assert_eq!(
            g.generate(SeededRng::new(3)).unwrap(),
            g.generate(SeededRng::new(3)).unwrap()
        );
        assert_ne!(
            g.generate(SeededRng::new(3)).unwrap(),
            g.generate(SeededRng::new(4)).unwrap()
        );
    }

    #[test]
    fn generator_part_sizes_and_planted_counts() {
        let out = GeneratorSpec::mixture().generate(SeededRng::new(1)).unwrap();
        assert_eq!(out.part("pool").unwrap().len(), 400);
        assert_eq!(out.planted["pool"].len(), 40);
        assert_eq!(out.part("train").unwrap().classes(), &[0, 1, 2]);
        let graded = GeneratorSpec::graded().generate(SeededRng::new(1)).unwrap();
        assert_eq!(graded.part("do-4").unwrap().len(), 24);
        assert_eq!(graded.planted["do-4"].len(), 8);
        assert!(graded.planted["do-5"].is_empty());
    }

    #[test]
    fn hard_distribution_flips_background() {
        let shape = ShiftParams {
            content_noise: 0.0,
            background_noise: 0.0,
            ..ShiftParams::default()
        };
        let mut r = SeededRng::new(0).rng();
        assert_eq!(shape.draw(0, false, &mut r), vec![1.0, 0.0, 2.0, 0.0]);
        let hard = shape.draw(0, true, &mut r);
        assert_eq!(hard[..2], [1.0, 0.0]);
        assert!((hard[2] + 2.0).abs() < 1e-12 && hard[3].abs() < 1e-9);
    }

    #[test]
    fn source_parses_both_shapes() {
        let g: Source = serde_json::from_str(r#"{"generated": "pool"}"#).unwrap();
        assert_eq!(
            g,
            Source::Generated {
                generated: "pool".into()
            }
        );
        let f: Source = serde_json::from_str(r#"{"path": "a.csv"}"#).unwrap();
        assert_eq!(
            f,
            Source::File {
                path: "a.csv".into(),
                format: None
            }
        );
    }

    #[test]
    fn spurious_trap_fires() {
        let out = GeneratorSpec::spurious().generate(SeededRng::new(7)).unwrap();
        let cfg = TrainConfig::new(300, 0.5, 1e-3, 7);
        let m = crate::model::train_proxy(out.part("train").unwrap(), &cfg)
            .unwrap()
            .pop()
            .unwrap();
        assert!(evaluate(&m, out.part("train").unwrap()).unwrap().accuracy > 0.9);
        assert!(evaluate(&m, out.part("test").unwrap()).unwrap().accuracy <= 0.5);
    }
}
