//! Random small instances checked against exhaustive search.

use std::path::PathBuf;

use clap::Args;
use mycroft_core::data::{Budget, SeededRng};
use mycroft_core::featsim::{DistanceMatrix, Metric};
use mycroft_core::gradmatch::{binomial, check_guarantee, GradientSet, GuaranteeCheck, OmpConfig, BRUTE_FORCE_LIMIT};
use mycroft_core::report::write_json;
use mycroft_core::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Args)]
pub struct OracleArgs {
    /// Optional JSON with the fields below; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_n: Option<usize>,
    #[arg(long)]
    max_k: Option<usize>,
    #[arg(long)]
    max_p: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Unit-norm rows, k = 1 and a target copied from one row.
    #[arg(long)]
    planted: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub max_n: usize,
    pub max_k: usize,
    pub max_p: usize,
    pub instances: usize,
    pub seed: u64,
    pub planted: bool,
    /// (lambda1, lambda2) pairs used in turn.
    pub lambdas: Vec<(f64, f64)>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_n: 10,
            max_k: 3,
            max_p: 8,
            instances: 50,
            seed: 0,
            planted: false,
            lambdas: vec![(0.5, 0.0), (0.5, 0.5)],
        }
    }
}

#[derive(Serialize)]
struct InstanceResult {
    n: usize,
    p: usize,
    k: usize,
    lambda1: f64,
    lambda2: f64,
    #[serde(flatten)]
    check: GuaranteeCheck,
}

#[derive(Serialize)]
struct OracleReport {
    total: usize,
    satisfied: usize,
    pass_rate: f64,
    max_margin: f64,
    instances: Vec<InstanceResult>,
}

fn instance(cfg: &OracleConfig, idx: usize) -> Result<InstanceResult> {
    let mut rng = SeededRng::new(cfg.seed).fork_str("oracle").fork(idx as u64).rng();
    let n = rng.random_range(2..=cfg.max_n);
    let p = rng.random_range(1..=cfg.max_p);
    let (lambda1, mut lambda2) = cfg.lambdas[idx % cfg.lambdas.len()];
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let (k, target) = if cfg.planted {
        // unit rows make the planted row the unique best single atom
        for r in &mut rows {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= norm);
        }
        lambda2 = 0.0;
        (1, rows[rng.random_range(0..n)].clone())
    } else {
        let k = rng.random_range(1..=cfg.max_k.min(n - 1));
        (k, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
    };
    let psi = (lambda2 > 0.0).then(|| {
        let h = rng.random_range(1..=4);
        DistanceMatrix {
            entries: (0..h)
                .map(|_| (0..n).map(|_| rng.random_range(0.0..2.0)).collect())
                .collect(),
            row_ids: (0..h).collect(),
            col_ids: (0..n).collect(),
            metric: Metric::L2,
        }
    });
    let g = GradientSet::new((0..n).collect(), rows)?;
    let omp = OmpConfig::new(Budget::new(k)?).with_lambdas(lambda1, lambda2);
    Ok(InstanceResult {
        n,
        p,
        k,
        lambda1,
        lambda2,
        check: check_guarantee(&g, &target, psi.as_ref(), &omp)?,
    })
}

pub fn cmd_oracle(a: OracleArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::MissingFile(path.clone()));
            }
            serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => OracleConfig::default(),
    };
    cfg.max_n = a.max_n.unwrap_or(cfg.max_n);
    cfg.max_k = a.max_k.unwrap_or(cfg.max_k);
    cfg.max_p = a.max_p.unwrap_or(cfg.max_p);
    cfg.instances = a.instances.unwrap_or(cfg.instances);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.planted |= a.planted;
    if cfg.max_n < 2 || cfg.max_k == 0 || cfg.max_p == 0 || cfg.lambdas.is_empty() {
        return Err(Error::Config(
            "oracle needs max_n >= 2, max_k >= 1, max_p >= 1 and at least one lambda pair".into(),
        ));
    }
    let supports = binomial(cfg.max_n, cfg.max_k.min(cfg.max_n - 1));
    if supports > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge(supports));
    }
    let instances = (0..cfg.instances)
        .into_par_iter()
        .map(|i| instance(&cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let satisfied = instances.iter().filter(|r| r.check.satisfied).count();
    let report = OracleReport {
        total: instances.len(),
        satisfied,
        pass_rate: if instances.is_empty() {
            1.0
        } else {
            satisfied as f64 / instances.len() as f64
        },
        max_margin: instances.iter().map(|r| r.check.margin).fold(0.0, f64::max),
        instances,
    };
    std::fs::create_dir_all(&a.out)?;
    write_json(&report, &a.out.join("oracle.json"))?;
    log::info!("{}/{} instances satisfy the guarantee", report.satisfied, report.total);
    Ok(())
}
