//! Server-side aggregation rules and the Weiszfeld geometric median.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{squared_distance, ParamVector};

/// Which rule the server applies to the round's uploads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregationConfig {
    Fedavg,
    /// `f` tolerated Byzantine clients, `k` updates averaged.
    Multikrum { f: usize, k: usize },
    /// `beta` values dropped at each end of every coordinate.
    Trimmedmean { beta: usize },
}

impl AggregationConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationConfig::Fedavg => "fedavg",
            AggregationConfig::Multikrum { .. } => "multikrum",
            AggregationConfig::Trimmedmean { .. } => "trimmedmean",
        }
    }

    /// Checks the rule's constraints for `n` uploads.
    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            AggregationConfig::Fedavg => Ok(()),
            AggregationConfig::Multikrum { f, k } => {
                if n < f + 3 {
                    return Err(Error::config(format!(
                        "multikrum needs N - f - 2 >= 1, got N = {n}, f = {f}"
                    )));
                }
                if k == 0 || k > n {
                    return Err(Error::config(format!("multikrum needs 1 <= k <= N, got k = {k}, N = {n}")));
                }
                Ok(())
            }
            AggregationConfig::Trimmedmean { beta } => {
                if 2 * beta >= n {
                    return Err(Error::config(format!(
                        "trimmed mean needs 2 * beta < N, got beta = {beta}, N = {n}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Result of one aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub model: ParamVector,
    /// Indices chosen by Multi-Krum, ascending.
    pub selected: Option<Vec<usize>>,
}

pub fn aggregate(cfg: &AggregationConfig, updates: &[ParamVector]) -> Result<Aggregate> {
    if updates.is_empty() {
        return Err(Error::usage("no updates to aggregate"));
    }
    cfg.validate(updates.len())?;
    match *cfg {
        AggregationConfig::Fedavg => Ok(Aggregate {
            model: fedavg(updates)?,
            selected: None,
        }),
        AggregationConfig::Multikrum { f, k } => {
            let (model, selected) = multikrum(updates, f, k)?;
            Ok(Aggregate {
                model,
                selected: Some(selected),
            })
        }
        AggregationConfig::Trimmedmean { beta } => Ok(Aggregate {
            model: trimmed_mean(updates, beta)?,
            selected: None,
        }),
    }
}

pub fn fedavg(updates: &[ParamVector]) -> Result<ParamVector> {
    ParamVector::mean(updates)
}

fn check_shapes(updates: &[ParamVector]) -> Result<()> {
    let first = &updates[0];
    if updates.iter().all(|u| u.same_shape(first)) {
        Ok(())
    } else {
        Err(Error::Shape("updates have different layer tables".into()))
    }
}

/// Symmetric matrix of squared L2 distances, row-major `n x n`.
pub fn pairwise_squared_distances(updates: &[ParamVector]) -> Vec<f64> {
    let n = updates.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(updates[i].values(), updates[j].values());
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    dist
}

/// Multi-Krum score of each update: the sum of squared distances to its
/// `N - f - 2` nearest other updates. The chosen neighbours are summed in
/// ascending index order.
pub fn multikrum_scores(updates: &[ParamVector], f: usize) -> Result<Vec<f64>> {
    let n = updates.len();
    if n < f + 3 {
        return Err(Error::config(format!(
            "multikrum needs N - f - 2 >= 1, got N = {n}, f = {f}"
        )));
    }
    check_shapes(updates)?;
    let closest = n - f - 2;
    let dist = pairwise_squared_distances(updates);
    Ok((0..n)
        .map(|i| {
            let row = &dist[i * n..(i + 1) * n];
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let mut nearest = others[..closest].to_vec();
            nearest.sort_unstable();
            nearest.iter().map(|&j| row[j]).sum()
        })
        .collect())
}

/// Averages the `k` lowest-scoring updates (ties to the lower index).
/// Returns the aggregate and the selected indices in ascending order.
pub fn multikrum(updates: &[ParamVector], f: usize, k: usize) -> Result<(ParamVector, Vec<usize>)> {
    AggregationConfig::Multikrum { f, k }.validate(updates.len())?;
    let scores = multikrum_scores(updates, f)?;
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    let chosen: Vec<&ParamVector> = selected.iter().map(|&i| &updates[i]).collect();
    Ok((ParamVector::mean_of(&chosen)?, selected))
}

/// Coordinate-wise trimmed mean: sort each coordinate, drop `beta` values
/// at each end, average the rest in sorted order.
pub fn trimmed_mean(updates: &[ParamVector], beta: usize) -> Result<ParamVector> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::usage("no updates to aggregate"));
    }
    AggregationConfig::Trimmedmean { beta }.validate(n)?;
    check_shapes(updates)?;
    let kept = (n - 2 * beta) as f64;
    let mut column = vec![0.0; n];
    let values = (0..updates[0].dim())
        .map(|j| {
            for (c, u) in column.iter_mut().zip(updates) {
                *c = u.values()[j];
            }
            column.sort_by(f64::total_cmp);
            column[beta..n - beta].iter().sum::<f64>() / kept
        })
        .collect();
    updates[0].with_values(values)
}

/// Default Weiszfeld tolerance.
pub const GEOMEDIAN_TOL: f64 = 1e-7;
/// Default Weiszfeld iteration cap.
pub const GEOMEDIAN_MAX_ITER: usize = 100;
const WEISZFELD_FLOOR: f64 = 1e-12;

/// Sum of Euclidean distances from `x` to every point.
pub fn geometric_objective(x: &[f64], points: &[ParamVector]) -> f64 {
    points.iter().map(|p| squared_distance(x, p.values()).sqrt()).sum()
}

/// Weiszfeld iteration from the coordinate mean. Stops when successive
/// iterates move less than `tol` or after `max_iter` steps. If an input
/// point has a lower objective than the final iterate, that point is
/// returned instead.
pub fn geometric_median(points: &[ParamVector], tol: f64, max_iter: usize) -> Result<ParamVector> {
    let mut current = ParamVector::mean(points)?.into_values();
    let d = current.len();
    let mut next = vec![0.0; d];
    for _ in 0..max_iter {
        next.fill(0.0);
        let mut weight_sum = 0.0;
        for p in points {
            let dist = squared_distance(&current, p.values()).sqrt();
            let w = 1.0 / dist.max(WEISZFELD_FLOOR);
            weight_sum += w;
            for (n, v) in next.iter_mut().zip(p.values()) {
                *n += w * v;
            }
        }
        for n in next.iter_mut() {
            *n /= weight_sum;
        }
        let step = squared_distance(&current, &next).sqrt();
        std::mem::swap(&mut current, &mut next);
        if step < tol {
            break;
        }
    }
    let mut best_obj = geometric_objective(&current, points);
    let mut best = current;
    for p in points {
        let obj = geometric_objective(p.values(), points);
        if obj < best_obj {
            best_obj = obj;
            best = p.values().to_vec();
        }
    }
    points[0].with_values(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[&[f64]]) -> Vec<ParamVector> {
        v.iter().map(|x| ParamVector::from_flat(x.to_vec()).unwrap()).collect()
    }

    #[test]
    fn multikrum_scores_on_line() {
        let u = pts(&[&[0.0], &[1.0], &[2.0], &[10.0]]);
        assert_eq!(multikrum_scores(&u, 1).unwrap(), vec![1.0, 1.0, 1.0, 64.0]);
        let (agg, sel) = multikrum(&u, 1, 2).unwrap();
        assert_eq!(sel, vec![0, 1]);
        assert_eq!(agg.values(), &[0.5]);
    }

    #[test]
    fn identical_updates_score_zero() {
        let row: &[f64] = &[1.0, 2.0];
        let u = pts(&[row; 5]);
        assert!(multikrum_scores(&u, 1).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn multikrum_selecting_all_is_fedavg() {
        let u = pts(&[&[0.5, 1.0], &[2.0, -1.0], &[3.0, 0.25], &[-4.0, 8.0]]);
        let (agg, sel) = multikrum(&u, 1, 4).unwrap();
        assert_eq!(sel, vec![0, 1, 2, 3]);
        assert_eq!(agg, fedavg(&u).unwrap());
    }

    #[test]
    fn config_errors() {
        let u = pts(&[&[0.0], &[1.0], &[2.0]]);
        assert!(matches!(multikrum_scores(&u, 1), Err(Error::Config(_))));
        assert!(matches!(multikrum(&u, 0, 4), Err(Error::Config(_))));
        assert!(matches!(trimmed_mean(&u, 2), Err(Error::Config(_))));
        assert!(matches!(fedavg(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn trimmed_mean_examples() {
        let u = pts(&[&[1.0], &[2.0], &[3.0], &[4.0], &[100.0]]);
        assert_eq!(trimmed_mean(&u, 1).unwrap().values(), &[3.0]);
        let v = pts(&[&[1.0, 4.0], &[2.0, 8.0], &[6.0, 0.0]]);
        assert_eq!(trimmed_mean(&v, 0).unwrap(), fedavg(&v).unwrap());
    }

    #[test]
    fn geometric_median_examples() {
        let line = pts(&[&[0.0], &[0.0], &[10.0]]);
        let m = geometric_median(&line, GEOMEDIAN_TOL, GEOMEDIAN_MAX_ITER).unwrap();
        assert!(m.values()[0].abs() <= GEOMEDIAN_TOL);

        let cross = pts(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        let m = geometric_median(&cross, GEOMEDIAN_TOL, GEOMEDIAN_MAX_ITER).unwrap();
        assert!(m.l2_norm() < 1e-6);
    }

    #[test]
    fn aggregate_dispatch() {
        let u = pts(&[&[0.0], &[1.0], &[2.0], &[10.0]]);
        let a = aggregate(&AggregationConfig::Multikrum { f: 1, k: 2 }, &u).unwrap();
        assert_eq!(a.selected, Some(vec![0, 1]));
        let a = aggregate(&AggregationConfig::Fedavg, &u).unwrap();
        assert_eq!(a.model.values(), &[3.25]);
        assert!(a.selected.is_none());
        assert!(aggregate(&AggregationConfig::Trimmedmean { beta: 2 }, &u).is_err());
    }
}
