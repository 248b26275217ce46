//! Perturbed-scenario sampling and dataset generation: per-OD-pair demand
//! scaling, per-link capacity scaling, connectivity-checked link removals,
//! and deterministic k-fold splits.

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{od_to_triples, DatasetRecord};
use crate::net::{check_od_connectivity, OdMatrix, RoadNetwork, VehicleClass};
use crate::solver::{relative_gap, solve, Objective, SolveConfig, SolveError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no connected removal found after {attempts} attempts; last failing od pairs: {failing:?}")]
    RetriesExhausted { attempts: usize, failing: Vec<(usize, usize)> },
    #[error("k-fold split needs n >= k, got n={n}, k={k}")]
    BadFold { n: usize, k: usize },
}

/// Sampling distribution for one scenario family.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    /// Uniform range for per-OD-pair, per-class demand factors.
    pub demand_scale: (f64, f64),
    /// Uniform range for per-link capacity factors.
    pub capacity_scale: (f64, f64),
    /// Inclusive range for the number of removed links.
    pub removal_range: (usize, usize),
    /// Candidate links for removal; None selects `default_removable`.
    pub removable: Option<Vec<usize>>,
    pub objective: Objective,
    pub master_seed: u64,
    /// Redraw budget when a removal disconnects some OD pair.
    pub max_retries: usize,
    /// Solver settings used when labeling records.
    pub threshold: f64,
    pub max_iterations: usize,
}

impl ScenarioConfig {
    fn with_removals(master_seed: u64, removal_range: (usize, usize)) -> Self {
        Self {
            demand_scale: (0.5, 1.5),
            capacity_scale: (0.8, 1.0),
            removal_range,
            removable: None,
            objective: Objective::Ue,
            master_seed,
            max_retries: 200,
            threshold: 1e-5,
            max_iterations: 50_000,
        }
    }

    /// Demand/capacity perturbations only, topology untouched.
    pub fn base(master_seed: u64) -> Self {
        Self::with_removals(master_seed, (0, 0))
    }

    /// In-distribution topology perturbations: one to three removals.
    pub fn indist(master_seed: u64) -> Self {
        Self::with_removals(master_seed, (1, 3))
    }

    /// Out-of-distribution training side: one or two removals.
    pub fn ood_train(master_seed: u64) -> Self {
        Self::with_removals(master_seed, (1, 2))
    }

    /// Out-of-distribution test side: exactly three removals.
    pub fn ood_test(master_seed: u64) -> Self {
        Self::with_removals(master_seed, (3, 3))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let ok_range = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi;
        if !ok_range(self.demand_scale.0, self.demand_scale.1) {
            return Err(ScenarioError::InvalidConfig(format!(
                "demand scale range {:?} not well-ordered and positive",
                self.demand_scale
            )));
        }
        if !ok_range(self.capacity_scale.0, self.capacity_scale.1) {
            return Err(ScenarioError::InvalidConfig(format!(
                "capacity scale range {:?} not well-ordered and positive",
                self.capacity_scale
            )));
        }
        if self.removal_range.0 > self.removal_range.1 {
            return Err(ScenarioError::InvalidConfig(format!(
                "removal range {:?} not well-ordered",
                self.removal_range
            )));
        }
        Ok(())
    }
}

/// Counter-based seed mix (splitmix64 finalizer) so each record owns an
/// independent, reproducible stream.
pub fn derived_seed(master_seed: u64, index: u64) -> u64 {
    let mut z = master_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Links whose removal cannot leave an endpoint without incident links in
/// the relevant direction: the tail keeps another outgoing link and the
/// head another incoming one.
pub fn default_removable(net: &RoadNetwork) -> Vec<usize> {
    let n = net.num_nodes();
    let mut out_deg = vec![0usize; n];
    let mut in_deg = vec![0usize; n];
    for l in &net.links {
        out_deg[l.tail] += 1;
        in_deg[l.head] += 1;
    }
    net.links
        .iter()
        .enumerate()
        .filter(|(_, l)| out_deg[l.tail] >= 2 && in_deg[l.head] >= 2)
        .map(|(i, _)| i)
        .collect()
}

/// An unsolved perturbed instance. `net` has capacity factors applied and
/// removed links dropped; `od` holds scaled per-class demand.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub index: usize,
    pub seed: u64,
    pub net: RoadNetwork,
    pub od: OdMatrix,
    pub removed_links: Vec<usize>,
    pub capacity_factors: Vec<f64>,
    pub demand_factor_mean: Vec<f64>,
}

pub fn sample_scenario(
    base: &RoadNetwork,
    od: &OdMatrix,
    classes: &[VehicleClass],
    cfg: &ScenarioConfig,
    index: usize,
) -> Result<Scenario, ScenarioError> {
    cfg.validate()?;
    let seed = derived_seed(cfg.master_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut scaled_od = OdMatrix::new(od.num_classes());
    let mut factor_mean = Vec::with_capacity(od.num_classes());
    for (c, class) in od.demands.iter().enumerate() {
        let mut sum = 0.0;
        for (&(r, s), &d) in class {
            let f = rng.gen_range(cfg.demand_scale.0..=cfg.demand_scale.1);
            sum += f;
            scaled_od.set(c, r, s, d * f);
        }
        factor_mean.push(if class.is_empty() { 1.0 } else { sum / class.len() as f64 });
    }

    let capacity_factors: Vec<f64> = (0..base.num_links())
        .map(|_| rng.gen_range(cfg.capacity_scale.0..=cfg.capacity_scale.1))
        .collect();
    let mut scaled_net = base.clone();
    for (l, f) in scaled_net.links.iter_mut().zip(&capacity_factors) {
        l.capacity *= f;
    }

    let owned_removable;
    let removable: &[usize] = match &cfg.removable {
        Some(r) => r,
        None => {
            owned_removable = default_removable(base);
            &owned_removable
        }
    };

    let mut last_failing = Vec::new();
    for _attempt in 0..cfg.max_retries.max(1) {
        let count = rng.gen_range(cfg.removal_range.0..=cfg.removal_range.1).min(removable.len());
        let mut removed: Vec<usize> = index_sample(&mut rng, removable.len(), count)
            .iter()
            .map(|i| removable[i])
            .collect();
        removed.sort_unstable();

        let net = scaled_net.without_links(&removed);
        // removal shifts link indices, so class masks must be remapped;
        // currently masks cover all links and survive removal unchanged
        let mut failing = Vec::new();
        for (c, class) in classes.iter().enumerate() {
            failing.extend(check_od_connectivity(&net, class, &scaled_od.demands[c]));
        }
        if failing.is_empty() {
            return Ok(Scenario {
                index,
                seed,
                net,
                od: scaled_od,
                removed_links: removed,
                capacity_factors,
                demand_factor_mean: factor_mean,
            });
        }
        failing.sort_unstable();
        failing.dedup();
        last_failing = failing;
    }
    Err(ScenarioError::RetriesExhausted { attempts: cfg.max_retries.max(1), failing: last_failing })
}

/// Labels one scenario by solving it to the configured threshold.
pub fn solve_scenario(
    scenario: &Scenario,
    classes: &[VehicleClass],
    cfg: &ScenarioConfig,
) -> Result<DatasetRecord, SolveError> {
    let solve_cfg = SolveConfig {
        objective: cfg.objective,
        threshold: cfg.threshold,
        max_iterations: cfg.max_iterations,
        ..SolveConfig::default()
    };
    let report = solve(&scenario.net, classes, &scenario.od, &solve_cfg)?;
    let gap = relative_gap(&scenario.net, classes, &report.flows, &scenario.od);
    Ok(DatasetRecord {
        index: scenario.index,
        seed: scenario.seed,
        objective: cfg.objective,
        removed_links: scenario.removed_links.clone(),
        capacity_factors: scenario.capacity_factors.clone(),
        demand_factor_mean: scenario.demand_factor_mean.clone(),
        demand: od_to_triples(&scenario.od),
        flows: report.flows.flows.clone(),
        ratios: report.flows.ratios(&scenario.net, classes),
        iterations: report.iterations,
        relative_gap: gap,
    })
}

/// Samples and solves `n` scenarios. Solve failures are skipped with a log
/// line rather than emitted with wrong labels.
pub fn generate_dataset(
    base: &RoadNetwork,
    od: &OdMatrix,
    classes: &[VehicleClass],
    cfg: &ScenarioConfig,
    n: usize,
) -> Result<Vec<DatasetRecord>, ScenarioError> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(n);
    for index in 0..n {
        let scenario = sample_scenario(base, od, classes, cfg, index)?;
        match solve_scenario(&scenario, classes, cfg) {
            Ok(rec) => records.push(rec),
            Err(e) => eprintln!("scenario {index} (seed {}) skipped: {e}", scenario.seed),
        }
    }
    Ok(records)
}

/// Deterministic shuffle of 0..n into k folds with sizes differing by <= 1.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, ScenarioError> {
    if k < 2 || n < k {
        return Err(ScenarioError::BadFold { n, k });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates via rand's shuffle
    use rand::seq::SliceRandom;
    indices.shuffle(&mut rng);
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (i, idx) in indices.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// First `round(n * train_share)` shuffled indices as train, rest as test.
pub fn train_test_split(n: usize, train_share: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    indices.shuffle(&mut rng);
    let cut = ((n as f64) * train_share).round() as usize;
    let test = indices.split_off(cut.min(n));
    (indices, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::conservation_residual;
    use crate::net::tests::line_network;
    use crate::solver::tests::two_route_instance;

    fn toy() -> (RoadNetwork, Vec<VehicleClass>, OdMatrix) {
        let net = line_network();
        let classes = vec![VehicleClass::new("car", 1.0)];
        let mut od = OdMatrix::new(1);
        od.set(0, 0, 2, 100.0);
        (net, classes, od)
    }

    #[test]
    fn zero_removals_keep_topology() {
        let (net, classes, od) = toy();
        let cfg = ScenarioConfig::base(7);
        let s = sample_scenario(&net, &od, &classes, &cfg, 0).unwrap();
        assert_eq!(s.net.num_links(), net.num_links());
        assert!(s.removed_links.is_empty());
    }

    #[test]
    fn demand_scaling_is_multiplicative() {
        let (net, classes, od) = toy();
        let mut cfg = ScenarioConfig::base(7);
        cfg.demand_scale = (0.5, 0.5 + 1e-12);
        let s = sample_scenario(&net, &od, &classes, &cfg, 0).unwrap();
        assert!((s.od.demand(0, 0, 2) - 50.0).abs() < 1e-6);
    }

    #[test]
    fn demand_factors_match_uniform_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn derived_seeds_distinct_and_stable() {
        let a = derived_seed(42, 0);
        let b = derived_seed(42, 1);
        let c = derived_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derived_seed(42, 0));
    }

    #[test]
    fn sampling_is_deterministic_and_order_free() {
        let (net, classes, od) = two_route_instance();
        let cfg = ScenarioConfig::base(99);
        let s5a = sample_scenario(&net, &od, &classes, &cfg, 5).unwrap();
        // sampling record 5 does not depend on whether 0..4 were sampled
        for i in 0..5 {
            let _ = sample_scenario(&net, &od, &classes, &cfg, i).unwrap();
        }
        let s5b = sample_scenario(&net, &od, &classes, &cfg, 5).unwrap();
        assert_eq!(s5a.capacity_factors, s5b.capacity_factors);
        assert_eq!(s5a.od, s5b.od);
        assert_eq!(s5a.removed_links, s5b.removed_links);
    }

    #[test]
    fn removals_stay_connected() {
        let (net, classes, od) = two_route_instance();
        let mut cfg = ScenarioConfig::indist(3);
        cfg.removal_range = (1, 1);
        for i in 0..20 {
            let s = sample_scenario(&net, &od, &classes, &cfg, i).unwrap();
            assert_eq!(s.net.num_links(), net.num_links() - 1);
            for (c, class) in classes.iter().enumerate() {
                assert!(check_od_connectivity(&s.net, class, &s.od.demands[c]).is_empty());
            }
        }
    }

    #[test]
    fn impossible_removals_report_failing_pairs() {
        let (net, classes, od) = toy();
        let mut cfg = ScenarioConfig::indist(3);
        // every link on the line is a bridge: force removals anyway
        cfg.removable = Some(vec![0, 1]);
        cfg.removal_range = (1, 1);
        cfg.max_retries = 5;
        let err = sample_scenario(&net, &od, &classes, &cfg, 0).unwrap_err();
        match err {
            ScenarioError::RetriesExhausted { failing, .. } => assert_eq!(failing, vec![(0, 2)]),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn default_removable_excludes_isolating_links() {
        let (net, _, _) = toy();
        // line 0->1->2: removing either link strands a node
        assert!(default_removable(&net).is_empty());

        let (net2, _, _) = two_route_instance();
        // the direct link 0->2 is removable (0 keeps an outgoing, 2 keeps an incoming)
        let removable = default_removable(&net2);
        assert!(!removable.is_empty());
        for &i in &removable {
            let reduced = net2.without_links(&[i]);
            let mut od = OdMatrix::new(1);
            od.set(0, 0, 2, 1.0);
            let class = VehicleClass::new("car", 1.0);
            assert!(check_od_connectivity(&reduced, &class, &od.demands[0]).is_empty());
        }
    }

    #[test]
    fn generated_records_are_reproducible_and_conservative() {
        let (net, classes, od) = two_route_instance();
        let mut cfg = ScenarioConfig::base(123);
        cfg.threshold = 1e-7;
        let a = generate_dataset(&net, &od, &classes, &cfg, 3).unwrap();
        let b = generate_dataset(&net, &od, &classes, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for rec in &a {
            let scen_net = rec.scenario_network(&net);
            let scen_od = rec.od_matrix();
            let flows = crate::net::ClassFlows { flows: rec.flows.clone() };
            for c in 0..classes.len() {
                let res = conservation_residual(&scen_net, &flows, &scen_od, c);
                let bound = 1e-6 * scen_od.class_total(c);
                for r in res {
                    assert!(r.abs() <= bound, "residual {r} exceeds {bound}");
                }
            }
        }
    }

    #[test]
    fn capacity_spread_has_minimum_variation() {
        let (net, classes, od) = toy();
        let cfg = ScenarioConfig::base(5);
        let mut caps = Vec::new();
        for i in 0..200 {
            let s = sample_scenario(&net, &od, &classes, &cfg, i).unwrap();
            caps.extend(s.net.links.iter().map(|l| l.capacity));
        }
        let n = caps.len() as f64;
        let mean = caps.iter().sum::<f64>() / n;
        let var = caps.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
        let cov = var.sqrt() / mean;
        assert!(cov >= 0.05, "coefficient of variation {cov}");
    }

    #[test]
    fn kfold_partitions_evenly_and_deterministically() {
        let folds = kfold_split(10, 5, 1).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.len(), 2);
        }
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(folds, kfold_split(10, 5, 1).unwrap());

        let folds = kfold_split(11, 3, 2).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

        assert!(kfold_split(4, 5, 0).is_err());
    }

    #[test]
    fn train_test_split_covers_everything() {
        let (train, test) = train_test_split(100, 0.8, 9);
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
