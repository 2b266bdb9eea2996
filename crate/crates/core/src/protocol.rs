//! The data-sharing protocol: the model trainer builds and shares its hard
//! set, each data owner selects a budgeted subset, and the trainer augments,
//! evaluates and ranks the owners.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Budget, Dataset, SampleId, SeededRng};
use crate::error::{Error, Result};
use crate::featsim::{
    binning_distance, compute_distances, extract_binning_features, extract_features, pseudo_label, retrieve_topk,
    BinningParams, DistanceMatrix, FeatureExtractor, Metric,
};
use crate::gradmatch::{omp_select, GradientSet, OmpConfig, SelectionResult};
use crate::model::{
    evaluate, finetune_mixed, mean_gradient, retrain_mixed, train_proxy, train_tree, Classifier, EvalMetrics, Mixing,
    ProxyModel, TrainConfig, TreeModel,
};
use crate::report::kendall_tau;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FuncFeat,
    GradMatch,
    FeatSim,
    Binning,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FuncFeat => "funcfeat",
            Strategy::GradMatch => "gradmatch",
            Strategy::FeatSim => "featsim",
            Strategy::Binning => "binning",
        }
    }

    pub fn needs_gradients(self) -> bool {
        matches!(self, Strategy::FuncFeat | Strategy::GradMatch)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const RANDOM: &str = "random";
pub const FULL_INFORMATION: &str = "full-information";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Finetune,
    Retrain,
}

/// How the trainer's model is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MtSpec {
    Linear { train: TrainConfig },
    Tree { max_depth: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MtModel {
    Linear(ProxyModel),
    Tree(TreeModel),
}

impl Classifier for MtModel {
    fn classes(&self) -> &[usize] {
        match self {
            MtModel::Linear(m) => m.classes(),
            MtModel::Tree(m) => m.classes(),
        }
    }

    fn predict(&self, x: &[f64]) -> usize {
        match self {
            MtModel::Linear(m) => m.predict(x),
            MtModel::Tree(m) => m.predict(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelTrainer {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
    pub spec: MtSpec,
    pub model: MtModel,
}

impl ModelTrainer {
    /// Trains the trainer's model on `train`.
    pub fn fit(train: Dataset, val: Dataset, test: Option<Dataset>, spec: MtSpec) -> Result<Self> {
        for d in std::iter::once(&val).chain(test.as_ref()) {
            if d.dim() != train.dim() {
                return Err(Error::SchemaMismatch(format!(
                    "`{}` has {} features, training set has {}",
                    d.name(),
                    d.dim(),
                    train.dim()
                )));
            }
            d.require_labeled()?;
        }
        let model = fit_model(&spec, &train)?;
        Ok(Self {
            train,
            val,
            test,
            spec,
            model,
        })
    }
}

fn fit_model(spec: &MtSpec, train: &Dataset) -> Result<MtModel> {
    Ok(match spec {
        MtSpec::Linear { train: cfg } => {
            MtModel::Linear(train_proxy(train, cfg)?.pop().expect("at least one checkpoint"))
        }
        MtSpec::Tree { max_depth } => MtModel::Tree(train_tree(train, *max_depth)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardConfig {
    pub share_fraction: f64,
    pub min_split: usize,
}

impl Default for HardConfig {
    fn default() -> Self {
        Self {
            share_fraction: 0.5,
            min_split: 10,
        }
    }
}

/// The hard set as shared with data owners and as kept for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct HardSplit {
    pub share: Dataset,
    pub holdout: Dataset,
    /// False when the hard set was too small to split and is used for both.
    pub split: bool,
}

/// Misclassified validation samples, split into a shared part and a held-out
/// part when there are at least `min_split` of them.
pub fn construct_dhard(mt: &ModelTrainer, cfg: &HardConfig, rng: SeededRng) -> Result<HardSplit> {
    if !(cfg.share_fraction > 0.0 && cfg.share_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "share fraction {} outside (0, 1]",
            cfg.share_fraction
        )));
    }
    mt.val.require_labeled()?;
    let hard = mt
        .val
        .filter("hard", |s| s.label != Some(mt.model.predict(&s.features)));
    if hard.is_empty() {
        return Err(Error::NoHardSamples);
    }
    log::debug!("hard set: {} of {} validation samples", hard.len(), mt.val.len());
    if hard.len() < cfg.min_split {
        return Ok(HardSplit {
            share: hard.clone().renamed("hard-share"),
            holdout: hard.renamed("hard-holdout"),
            split: false,
        });
    }
    let n_share = ((cfg.share_fraction * hard.len() as f64) - 1e-9).ceil() as usize;
    let mut picked = index::sample(&mut rng.rng(), hard.len(), n_share).into_vec();
    picked.sort_unstable();
    let mut in_share = vec![false; hard.len()];
    picked.iter().for_each(|&i| in_share[i] = true);
    let ids = hard.ids();
    let share_ids: Vec<SampleId> = picked.iter().map(|&i| ids[i]).collect();
    let hold_ids: Vec<SampleId> = (0..hard.len()).filter(|&i| !in_share[i]).map(|i| ids[i]).collect();
    Ok(HardSplit {
        share: hard.subset("hard-share", &share_ids)?,
        holdout: hard.subset("hard-holdout", &hold_ids)?,
        split: true,
    })
}

/// Representation a data owner uses for feature distances.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExtractorSpec {
    #[default]
    Identity,
    /// Standardized with statistics of the owner's own data.
    Standardize,
    Projection {
        matrix: Vec<Vec<f64>>,
    },
}

impl ExtractorSpec {
    pub fn resolve(&self, own: &Dataset) -> Result<FeatureExtractor> {
        match self {
            ExtractorSpec::Identity => Ok(FeatureExtractor::identity(own.dim())),
            ExtractorSpec::Standardize => FeatureExtractor::fit_standardize(own),
            ExtractorSpec::Projection { matrix } => Ok(FeatureExtractor::LinearProjection { matrix: matrix.clone() }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub binning: BinningParams,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            lambda1: OmpConfig::DEFAULT_LAMBDA1,
            lambda2: OmpConfig::DEFAULT_LAMBDA2,
            epsilon: OmpConfig::DEFAULT_EPSILON,
            binning: BinningParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataOwner {
    pub name: String,
    pub data: Dataset,
    pub strategy: Strategy,
    pub proxy: Option<ProxyModel>,
    pub extractor: ExtractorSpec,
    pub params: SelectionParams,
    pub seed: SeededRng,
}

impl DataOwner {
    pub fn new(name: impl Into<String>, data: Dataset, strategy: Strategy, seed: SeededRng) -> Self {
        Self {
            name: name.into(),
            data,
            strategy,
            proxy: None,
            extractor: ExtractorSpec::default(),
            params: SelectionParams::default(),
            seed,
        }
    }

    /// Trains a proxy on the owner's own data and keeps the earliest
    /// requested checkpoint (the last epoch if none is requested).
    pub fn train_proxy(mut self, cfg: &TrainConfig) -> Result<Self> {
        let models = train_proxy(&self.data, cfg)?;
        self.proxy = models.into_iter().next();
        Ok(self)
    }
}

/// A data owner's selection together with the solver diagnostics, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub useful: Dataset,
    pub omp: Option<SelectionResult>,
}

fn distances(owner: &DataOwner, share: &Dataset) -> Result<DistanceMatrix> {
    let x = owner.extractor.resolve(&owner.data)?;
    compute_distances(
        &extract_features(&x, share)?,
        &extract_features(&x, &owner.data)?,
        Metric::L2,
    )
}

/// DataSelect: the owner's budgeted subset for the shared hard set. Unlabeled
/// selections come back pseudo-labeled from the nearest hard sample.
pub fn data_select(owner: &DataOwner, share: &Dataset, k: Budget) -> Result<Selection> {
    k.check_pool(owner.data.len())?;
    if share.is_empty() {
        return Err(Error::NoHardSamples);
    }
    if share.dim() != owner.data.dim() {
        return Err(Error::SchemaMismatch(format!(
            "hard set has {} features, `{}` has {}",
            share.dim(),
            owner.name,
            owner.data.dim()
        )));
    }
    let name = format!("{}-useful", owner.name);
    let (ids, psi, omp) = match owner.strategy {
        Strategy::FuncFeat | Strategy::GradMatch => {
            let unavailable =
                |why: &str| Error::StrategyUnavailable(format!("{} for `{}`: {why}", owner.strategy, owner.name));
            let proxy = owner.proxy.as_ref().ok_or_else(|| unavailable("no proxy model"))?;
            if !owner.data.is_labeled() {
                return Err(unavailable("data is unlabeled"));
            }
            share.require_labeled()?;
            let known = share.filter("hard-known", |s| {
                s.label.is_some_and(|y| proxy.class_index(y).is_some())
            });
            if known.is_empty() {
                return Err(unavailable("no hard sample in the proxy's label space"));
            }
            let g = GradientSet::from_model(proxy, &owner.data)?;
            let target = mean_gradient(proxy, &known)?;
            let mut cfg = OmpConfig::new(k).with_lambdas(owner.params.lambda1, 0.0);
            cfg.epsilon = owner.params.epsilon;
            let psi = if owner.strategy == Strategy::FuncFeat {
                cfg.lambda2 = owner.params.lambda2;
                Some(distances(owner, share)?)
            } else {
                None
            };
            let r = omp_select(&g, &target, psi.as_ref(), &cfg)?;
            (r.selected.clone(), psi, Some(r))
        }
        Strategy::FeatSim => {
            let psi = distances(owner, share)?;
            (retrieve_topk(&psi, k)?, Some(psi), None)
        }
        Strategy::Binning => {
            let (own_c, hard_c, _) = extract_binning_features(
                share,
                &owner.data,
                &owner.params.binning,
                owner.seed.fork_str("binning"),
            )?;
            let psi = binning_distance(&own_c, &hard_c)?;
            (retrieve_topk(&psi, k)?, Some(psi), None)
        }
    };
    let mut useful = owner.data.subset(name, &ids)?;
    if !useful.is_labeled() {
        let psi = match psi {
            Some(p) => p,
            None => distances(owner, share)?,
        };
        useful = pseudo_label(&useful, share, &psi)?;
    }
    Ok(Selection { useful, omp })
}

/// Random-sampling baseline: uniform over the owner's samples whose label is
/// one of `hard_classes`, topped up uniformly from the rest when short.
pub fn random_select(data: &Dataset, hard_classes: &[usize], k: Budget, rng: SeededRng) -> Result<Dataset> {
    k.check_pool(data.len())?;
    let k = k.get();
    let in_class = |y: Option<usize>| y.is_some_and(|y| hard_classes.contains(&y));
    let inside: Vec<SampleId> = data.iter().filter(|s| in_class(s.label)).map(|s| s.id).collect();
    let outside: Vec<SampleId> = data.iter().filter(|s| !in_class(s.label)).map(|s| s.id).collect();
    let mut r = rng.rng();
    let mut ids: Vec<SampleId> = index::sample(&mut r, inside.len(), k.min(inside.len()))
        .into_iter()
        .map(|i| inside[i])
        .collect();
    let rest = k - ids.len();
    ids.extend(
        index::sample(&mut r, outside.len(), rest)
            .into_iter()
            .map(|i| outside[i]),
    );
    data.subset(format!("{}-random", data.name()), &ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    #[serde(default)]
    pub mode: Mode,
    /// Descent schedule for fine-tuning a linear trainer model.
    pub finetune: TrainConfig,
    #[serde(default)]
    pub mixing: Mixing,
}

/// Metrics on the hard holdout and, when the trainer has one, the test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub holdout: EvalMetrics,
    pub test: Option<EvalMetrics>,
}

impl EvalSet {
    /// The test set when present, else the hard holdout.
    pub fn primary(&self) -> &EvalMetrics {
        self.test.as_ref().unwrap_or(&self.holdout)
    }
}

pub fn eval_set<C: Classifier + ?Sized>(m: &C, mt: &ModelTrainer, hard: &HardSplit) -> Result<EvalSet> {
    Ok(EvalSet {
        holdout: evaluate(m, &hard.holdout)?,
        test: mt.test.as_ref().map(|t| evaluate(m, t)).transpose()?,
    })
}

/// The trainer's model after adding `useful` to its training data.
pub fn augment(mt: &ModelTrainer, useful: &Dataset, cfg: &AugmentConfig) -> Result<MtModel> {
    if useful.is_empty() {
        return Ok(mt.model.clone());
    }
    if useful.dim() != mt.train.dim() {
        return Err(Error::SchemaMismatch(format!(
            "shared data has {} features, trainer expects {}",
            useful.dim(),
            mt.train.dim()
        )));
    }
    if !useful.is_labeled() {
        return Err(Error::SchemaMismatch("shared data must be labeled".into()));
    }
    Ok(match (&mt.spec, &mt.model) {
        (MtSpec::Linear { train }, MtModel::Linear(m)) => MtModel::Linear(match cfg.mode {
            Mode::Finetune => {
                if let Some(c) = useful
                    .present_classes()
                    .into_iter()
                    .find(|&c| m.class_index(c).is_none())
                {
                    return Err(Error::SchemaMismatch(format!(
                        "class {c} is unknown to the trainer's model"
                    )));
                }
                finetune_mixed(m, &mt.train, useful, cfg.mixing, &cfg.finetune)?
            }
            Mode::Retrain => retrain_mixed(&mt.train, useful, cfg.mixing, train)?,
        }),
        // trees are always refit on the pooled union
        (MtSpec::Tree { max_depth }, _) => MtModel::Tree(train_tree(
            &Dataset::concat("augmented", &[&mt.train, useful])?,
            *max_depth,
        )?),
        (MtSpec::Linear { .. }, MtModel::Tree(_)) => {
            return Err(Error::SchemaMismatch("trainer spec and model disagree".into()))
        }
    })
}

/// Before/after metrics for one augmentation.
pub fn augment_and_eval(
    mt: &ModelTrainer,
    hard: &HardSplit,
    useful: &Dataset,
    cfg: &AugmentConfig,
) -> Result<(EvalSet, EvalSet)> {
    let before = eval_set(&mt.model, mt, hard)?;
    let after = if useful.is_empty() {
        before.clone()
    } else {
        eval_set(&augment(mt, useful, cfg)?, mt, hard)?
    };
    Ok((before, after))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    #[serde(rename = "do")]
    pub do_name: String,
    pub strategy: String,
    pub budget: usize,
    pub seed: u64,
    pub selected: Vec<SampleId>,
    pub before: EvalSet,
    pub after: EvalSet,
    pub residual_norm: Option<f64>,
    pub objective: Option<f64>,
}

/// Shared state for all rounds against one trained trainer and hard split.
pub struct Protocol<'a> {
    pub mt: &'a ModelTrainer,
    pub hard: &'a HardSplit,
    pub augment: &'a AugmentConfig,
    pub seed: u64,
    before: EvalSet,
}

impl<'a> Protocol<'a> {
    pub fn new(mt: &'a ModelTrainer, hard: &'a HardSplit, augment: &'a AugmentConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            before: eval_set(&mt.model, mt, hard)?,
            mt,
            hard,
            augment,
            seed,
        })
    }

    pub fn before(&self) -> &EvalSet {
        &self.before
    }

    fn report(
        &self,
        owner: &str,
        strategy: &str,
        k: Budget,
        useful: &Dataset,
        omp: Option<&SelectionResult>,
    ) -> Result<RoundReport> {
        let after = if useful.is_empty() {
            self.before.clone()
        } else {
            eval_set(&augment(self.mt, useful, self.augment)?, self.mt, self.hard)?
        };
        Ok(RoundReport {
            do_name: owner.to_string(),
            strategy: strategy.to_string(),
            budget: k.get(),
            seed: self.seed,
            selected: useful.ids(),
            before: self.before.clone(),
            after,
            residual_norm: omp.map(|r| r.residual_norm),
            objective: omp.map(|r| r.objective),
        })
    }

    /// The owner's DataSelect under budget `k`, then augmentation.
    pub fn mycroft_round(&self, owner: &DataOwner, k: Budget) -> Result<RoundReport> {
        let sel = data_select(owner, &self.hard.share, k)?;
        log::debug!(
            "{}: {} selected {} samples at k={}",
            owner.name,
            owner.strategy,
            sel.useful.len(),
            k.get()
        );
        self.report(&owner.name, owner.strategy.as_str(), k, &sel.useful, sel.omp.as_ref())
    }

    /// Random-sampling baseline; `draw` picks an independent stream.
    pub fn random_round(&self, owner: &DataOwner, k: Budget, draw: u64) -> Result<RoundReport> {
        let rng = SeededRng::new(self.seed)
            .fork_str("random")
            .fork_str(&owner.name)
            .fork(k.get() as u64)
            .fork(draw);
        let useful = random_select(&owner.data, &self.hard.share.present_classes(), k, rng)?;
        self.report(&owner.name, RANDOM, k, &useful, None)
    }

    /// The owner's whole dataset; the budget only labels the report.
    pub fn full_information_round(&self, owner: &DataOwner, k: Budget) -> Result<RoundReport> {
        if !owner.data.is_labeled() {
            return Err(Error::StrategyUnavailable(format!(
                "{FULL_INFORMATION} for `{}`: data is unlabeled",
                owner.name
            )));
        }
        self.report(&owner.name, FULL_INFORMATION, k, &owner.data, None)
    }
}

/// One row of a ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoScores {
    #[serde(rename = "do")]
    pub do_name: String,
    pub mycroft: RoundReport,
    pub random: RoundReport,
    pub full_information: RoundReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub ordering: Vec<String>,
    pub useful_count: usize,
    pub kendall_tau: f64,
    pub random_ordering: Vec<String>,
    pub random_useful_count: usize,
    pub random_kendall_tau: f64,
    pub full_information_ordering: Vec<String>,
    pub full_information_useful_count: usize,
    pub scores: Vec<DoScores>,
}

/// Post-augmentation F1 at or above which a data owner counts as useful.
pub const USEFUL_F1: f64 = 0.5;

/// Names by descending primary after-accuracy, ties by name.
pub fn order_by_after_accuracy<'r>(reports: impl IntoIterator<Item = &'r RoundReport>) -> Vec<String> {
    let mut scored: Vec<(&str, f64)> = reports
        .into_iter()
        .map(|r| (r.do_name.as_str(), r.after.primary().accuracy))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    scored.into_iter().map(|(n, _)| n.to_string()).collect()
}

fn useful_count<'r>(reports: impl IntoIterator<Item = &'r RoundReport>) -> usize {
    reports
        .into_iter()
        .filter(|r| r.after.primary().f1 >= USEFUL_F1)
        .count()
}

/// Runs every owner's round plus both baselines and ranks the owners.
pub fn rank_dos(proto: &Protocol<'_>, owners: &[DataOwner], k: Budget) -> Result<RankingReport> {
    if owners.len() < 2 {
        return Err(Error::InvalidArgument("ranking needs at least two data owners".into()));
    }
    let mut names: Vec<&str> = owners.iter().map(|o| o.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("data owner names must be unique".into()));
    }
    let scores = owners
        .par_iter()
        .map(|o| {
            Ok(DoScores {
                do_name: o.name.clone(),
                mycroft: proto.mycroft_round(o, k)?,
                random: proto.random_round(o, k, 0)?,
                full_information: proto.full_information_round(o, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ordering = order_by_after_accuracy(scores.iter().map(|s| &s.mycroft));
    let random_ordering = order_by_after_accuracy(scores.iter().map(|s| &s.random));
    let full = order_by_after_accuracy(scores.iter().map(|s| &s.full_information));
    Ok(RankingReport {
        kendall_tau: kendall_tau(&ordering, &full)?,
        random_kendall_tau: kendall_tau(&random_ordering, &full)?,
        useful_count: useful_count(scores.iter().map(|s| &s.mycroft)),
        random_useful_count: useful_count(scores.iter().map(|s| &s.random)),
        full_information_useful_count: useful_count(scores.iter().map(|s| &s.full_information)),
        ordering,
        random_ordering,
        full_information_ordering: full,
        scores,
    })
}

/// Mycroft, random and full-information rounds for each budget, in budget order.
pub fn run_budget_sweep(proto: &Protocol<'_>, owner: &DataOwner, budgets: &[usize]) -> Result<Vec<RoundReport>> {
    if budgets.is_empty() {
        return Err(Error::InvalidArgument("no budgets given".into()));
    }
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("budgets must be strictly ascending".into()));
    }
    let budgets = budgets.iter().map(|&k| Budget::new(k)).collect::<Result<Vec<_>>>()?;
    for k in &budgets {
        k.check_pool(owner.data.len())?;
    }
    let full = proto.full_information_round(owner, budgets[0])?;
    let cells = budgets
        .par_iter()
        .map(|&k| {
            Ok(vec![
                proto.mycroft_round(owner, k)?,
                proto.random_round(owner, k, 0)?,
                RoundReport {
                    budget: k.get(),
                    ..full.clone()
                },
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cells.into_iter().flatten().collect())
}
