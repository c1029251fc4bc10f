//! Anchoring-strength tuning: k-fold grid search with an optional
//! unimodal early exit, plus the untuned preset.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strength used when no tuning data exists.
pub const PRESET_OMEGA: f64 = 1.25;

pub fn preset_strength() -> f64 {
    PRESET_OMEGA
}

/// 1.00, 1.05, ..., 2.00.
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| (100 + 5 * i) as f64 / 100.0).collect()
}

/// Best strengths reported for real code models, per benchmark. Shipped for
/// documentation; the toy model is not expected to reproduce them.
pub const REPORTED_OPTIMA: &[(&str, [f64; 4])] = &[
    ("CodeGen-Mono (350M)", [1.20, 1.20, 1.35, 1.35]),
    ("DeepSeek-Coder (1.3B)", [1.05, 1.05, 1.20, 1.20]),
    ("DeepSeek-Coder (6.7B)", [1.28, 1.28, 1.25, 1.25]),
    ("CodeLlama (7B)", [1.60, 1.60, 1.20, 1.20]),
    ("DeepSeek-Coder (33B)", [1.35, 1.35, 1.30, 1.30]),
];

/// Column order of [`REPORTED_OPTIMA`].
pub const REPORTED_BENCHMARKS: [&str; 4] = ["HumanEval", "HumanEval+", "MBPP", "MBPP+"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSpec {
    /// Strictly ascending; must contain 1.0.
    pub grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    /// Stop ascending the grid after two consecutive strict decreases.
    pub early_exit: bool,
    /// Tune on the other folds and hold out one, instead of tuning on one
    /// fold and holding out the rest.
    pub tune_on_majority: bool,
}

impl Default for TuneSpec {
    fn default() -> Self {
        TuneSpec {
            grid: default_grid(),
            folds: 5,
            seed: 0,
            early_exit: true,
            tune_on_majority: false,
        }
    }
}

impl TuneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::arg("empty grid"));
        }
        if self.grid.iter().any(|w| !w.is_finite()) {
            return Err(Error::arg("grid values must be finite"));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("grid must be strictly ascending"));
        }
        if !self.grid.contains(&1.0) {
            return Err(Error::arg("grid must contain 1.0"));
        }
        if self.folds < 2 {
            return Err(Error::arg("at least 2 folds are needed"));
        }
        Ok(())
    }
}

/// Shuffle `ids` with `seed` and deal them round-robin into `folds` parts.
pub fn kfold_split<T: Clone>(ids: &[T], folds: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if folds == 0 || folds > ids.len() {
        return Err(Error::arg(format!(
            "cannot split {} ids into {folds} folds",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::with_capacity(ids.len() / folds + 1); folds];
    for (i, idx) in order.into_iter().enumerate() {
        out[i % folds].push(ids[idx].clone());
    }
    Ok(out)
}

/// Does `(omega, score)` beat the current best? Higher score wins; ties go
/// to the strength closest to 1.0, then to the smaller one.
fn better(omega: f64, score: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((b_omega, b_score)) => {
            if score != b_score {
                return score > b_score;
            }
            let (d, bd) = ((omega - 1.0).abs(), (b_omega - 1.0).abs());
            d < bd || (d == bd && omega < b_omega)
        }
    }
}

/// Outcome of scanning one grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBest {
    pub omega: f64,
    pub score: f64,
    /// Grid points actually evaluated.
    pub evaluated: usize,
}

/// Scan `grid` in ascending order, keeping the best strength.
pub fn search_grid<F>(grid: &[f64], early_exit: bool, mut score: F) -> Result<GridBest>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut best: Option<(f64, f64)> = None;
    let mut prev: Option<f64> = None;
    let mut decreases = 0;
    let mut evaluated = 0;
    for &omega in grid {
        let s = score(omega)?;
        evaluated += 1;
        if better(omega, s, best) {
            best = Some((omega, s));
        }
        decreases = match prev {
            Some(p) if s < p => decreases + 1,
            _ => 0,
        };
        prev = Some(s);
        if early_exit && decreases >= 2 {
            break;
        }
    }
    let (omega, score) = best.ok_or_else(|| Error::arg("empty grid"))?;
    Ok(GridBest {
        omega,
        score,
        evaluated,
    })
}

/// Pass@1 of anchored decoding at a given strength over a set of tasks.
pub trait Evaluator {
    fn pass_at_1(&self, omega: f64, task_ids: &[String]) -> Result<f64>;
}

impl<F> Evaluator for F
where
    F: Fn(f64, &[String]) -> Result<f64>,
{
    fn pass_at_1(&self, omega: f64, task_ids: &[String]) -> Result<f64> {
        self(omega, task_ids)
    }
}

/// Synthetic unimodal evaluator: a tent peaking at `peak`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tent {
    pub peak: f64,
    pub height: f64,
    pub slope: f64,
}

impl Tent {
    pub fn at(&self, omega: f64) -> f64 {
        self.height - self.slope * (omega - self.peak).abs()
    }
}

impl Evaluator for Tent {
    fn pass_at_1(&self, omega: f64, _task_ids: &[String]) -> Result<f64> {
        Ok(self.at(omega))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_omega: f64,
    pub holdout_pass1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub folds: Vec<FoldResult>,
    pub recommended: f64,
    /// Population variance of the per-fold best strengths.
    pub variance: f64,
    pub grid: Vec<f64>,
    pub seed: u64,
}

impl TuneReport {
    pub fn mean_best_omega(&self) -> f64 {
        self.folds.iter().map(|f| f.best_omega).sum::<f64>() / self.folds.len() as f64
    }
}

/// Mean and population variance.
pub fn mean_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Grid member nearest to `target`; ties prefer the one closest to 1.0,
/// then the smaller.
fn nearest_on_grid(grid: &[f64], target: f64) -> f64 {
    let mut best = grid[0];
    for &w in &grid[1..] {
        let (d, bd) = ((w - target).abs(), (best - target).abs());
        if d < bd || (d == bd && better(w, 0.0, Some((best, 0.0)))) {
            best = w;
        }
    }
    best
}

/// K-fold tuning. For each fold, the best strength is chosen on the tuning
/// split and evaluated on the held-out split. The recommendation is the
/// grid member nearest the mean of the per-fold optima.
pub fn grid_search<E: Evaluator + ?Sized>(
    evaluator: &E,
    task_ids: &[String],
    spec: &TuneSpec,
) -> Result<TuneReport> {
    spec.validate()?;
    let folds = kfold_split(task_ids, spec.folds, spec.seed)?;
    let mut results = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let rest: Vec<String> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        let (tune, holdout) = if spec.tune_on_majority {
            (&rest, fold)
        } else {
            (fold, &rest)
        };
        let best = search_grid(&spec.grid, spec.early_exit, |w| evaluator.pass_at_1(w, tune))?;
        results.push(FoldResult {
            fold: i,
            best_omega: best.omega,
            holdout_pass1: evaluator.pass_at_1(best.omega, holdout)?,
        });
    }
    let bests: Vec<f64> = results.iter().map(|r| r.best_omega).collect();
    let (mean, variance) = mean_variance(&bests);
    Ok(TuneReport {
        folds: results,
        recommended: nearest_on_grid(&spec.grid, mean),
        variance,
        grid: spec.grid.clone(),
        seed: spec.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn default_grid_shape() {
        let g = default_grid();
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[5], 1.25);
        assert_eq!(g[20], 2.0);
        assert_eq!(preset_strength(), 1.25);
    }

    #[test]
    fn reported_optima_average() {
        let all: Vec<f64> = REPORTED_OPTIMA.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((mean - 1.28).abs() < 0.005, "{mean}");
    }

    #[test]
    fn kfold_even_split() {
        let f = kfold_split(&ids(10), 5, 3).unwrap();
        assert!(f.iter().all(|x| x.len() == 2));
        assert_eq!(f, kfold_split(&ids(10), 5, 3).unwrap());
        assert!(kfold_split(&ids(3), 4, 0).is_err());
    }

    #[test]
    fn constant_evaluator_recommends_one() {
        let report = grid_search(&|_: f64, _: &[String]| Ok(0.5), &ids(10), &TuneSpec::default()).unwrap();
        assert_eq!(report.recommended, 1.0);
        assert_eq!(report.variance, 0.0);
    }

    #[test]
    fn tent_peak_found_with_and_without_early_exit() {
        let tent = Tent { peak: 1.25, height: 0.6, slope: 0.3 };
        for early_exit in [false, true] {
            let spec = TuneSpec { early_exit, ..TuneSpec::default() };
            let report = grid_search(&tent, &ids(10), &spec).unwrap();
            assert_eq!(report.recommended, 1.25);
        }
        let early = search_grid(&default_grid(), true, |w| Ok(tent.at(w))).unwrap();
        assert!(early.evaluated < 21);
    }

    #[test]
    fn tie_prefers_closest_to_one_then_smaller() {
        let grid = [0.9, 1.0, 1.1];
        let flat = search_grid(&grid, false, |_| Ok(1.0)).unwrap();
        assert_eq!(flat.omega, 1.0);
        let sym = search_grid(&grid, false, |w| Ok(if w == 1.0 { 0.0 } else { 1.0 })).unwrap();
        assert_eq!(sym.omega, 0.9);
    }

    #[test]
    fn spec_validation() {
        let mut s = TuneSpec { grid: vec![], ..TuneSpec::default() };
        assert!(s.validate().is_err());
        s.grid = vec![1.0, 1.0];
        assert!(s.validate().is_err());
        s.grid = vec![1.1, 1.2];
        assert!(s.validate().is_err());
        s.grid = vec![0.9, 1.0];
        s.folds = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn report_json_schema() {
        let report = grid_search(&Tent { peak: 1.5, height: 1.0, slope: 1.0 }, &ids(6), &TuneSpec { folds: 2, ..TuneSpec::default() }).unwrap();
        let v = serde_json::to_value(&report).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["folds", "grid", "recommended", "seed", "variance"]);
        let fold_keys: Vec<_> = v["folds"][0].as_object().unwrap().keys().cloned().collect();
        assert_eq!(fold_keys, ["best_omega", "fold", "holdout_pass1"]);
    }
}
