//! Treatment and censoring propensity models and cumulative
//! inverse-probability weights.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{DesignMatrix, FeatureSpec, Panel, Trajectory};
use crate::regress::logistic::{fit_logistic, LogisticModel};
use crate::sem_sim::{consistent_through, RegimeSpec};

/// Source of per-step probabilities for weight construction.
pub trait PropensitySource: Sync {
    /// `P(T_m = 1 | history)`; `treatments` holds `T_0..T_{m-1}`.
    fn treatment_prob(&self, traj: &Trajectory, m: usize, treatments: &[bool]) -> Result<f64>;
    /// `P(C_{m+1} = 0 | history)`; `treatments` holds `T_0..=T_m`.
    fn retention_prob(&self, traj: &Trajectory, m: usize, treatments: &[bool]) -> Result<f64>;
}

/// Truncation bounds for per-step probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbBounds {
    pub lo: f64,
    pub hi: f64,
}

impl ProbBounds {
    pub const NONE: ProbBounds = ProbBounds { lo: 0.0, hi: 1.0 };

    pub fn apply(&self, p: f64) -> f64 {
        truncate_probability(p, self.lo, self.hi)
    }
}

impl Default for ProbBounds {
    fn default() -> Self {
        ProbBounds { lo: 0.1, hi: 0.9 }
    }
}

pub fn truncate_probability(p: f64, lo: f64, hi: f64) -> f64 {
    p.max(lo).min(hi)
}

/// Which subjects the propensity models are fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitPopulation {
    /// Every subject uncensored at the step.
    AllUncensored,
    /// Uncensored subjects whose earlier treatments follow the regime.
    RegimeFollowers(RegimeSpec),
}

/// Feature schedule of the treatment model at `m`: history through `L_m, Y_m`.
pub fn treatment_features(m: usize) -> FeatureSpec {
    FeatureSpec {
        time: m,
        include_current_l: true,
        include_current_y: true,
    }
}

/// Feature schedule of the censoring model at `m`: history through `T_m, L_{m+1}`.
pub fn censoring_features(m: usize) -> FeatureSpec {
    FeatureSpec::canonical(m + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensitySet {
    pub population: FitPopulation,
    /// `P(T_m = 1 | ...)` for `m = 0..=K`.
    pub treatment: Vec<LogisticModel>,
    /// `P(C_{m+1} = 1 | ...)` for `m = 0..=K`.
    pub censoring: Vec<LogisticModel>,
    pub treatment_fit_sizes: Vec<usize>,
    pub censoring_fit_sizes: Vec<usize>,
}

impl PropensitySet {
    pub fn separated_steps(&self) -> Vec<usize> {
        (0..self.treatment.len())
            .filter(|&m| self.treatment[m].separated || self.censoring[m].separated)
            .collect()
    }
}

fn row_prob(
    model: &LogisticModel,
    spec: &FeatureSpec,
    traj: &Trajectory,
    treatments: &[bool],
) -> Result<f64> {
    let mut row = Vec::with_capacity(spec.width());
    spec.fill_row(traj, treatments, &mut row)?;
    let x = DMatrix::from_row_slice(1, row.len(), &row);
    Ok(model.predict_proba(&x, None)?[0])
}

impl PropensitySource for PropensitySet {
    fn treatment_prob(&self, traj: &Trajectory, m: usize, treatments: &[bool]) -> Result<f64> {
        let model = self
            .treatment
            .get(m)
            .ok_or_else(|| Error::State(format!("no treatment model for m={m}")))?;
        row_prob(model, &treatment_features(m), traj, treatments)
    }

    fn retention_prob(&self, traj: &Trajectory, m: usize, treatments: &[bool]) -> Result<f64> {
        let model = self
            .censoring
            .get(m)
            .ok_or_else(|| Error::State(format!("no censoring model for m={m}")))?;
        Ok(1.0 - row_prob(model, &censoring_features(m), traj, treatments)?)
    }
}

/// Fits `2(K + 1)` logistic models for `m = 0..=horizon` on the chosen population.
///
/// Treatment at `m` is fitted on subjects with `C_m = 0`; censoring at `m`
/// (the event `C_{m+1} = 1`) on the same subjects. In follower mode the
/// treatment model also requires `T_0..T_{m-1}` to follow the regime and the
/// censoring model requires `T_0..T_m` to follow it.
pub fn fit_propensities(
    panel: &Panel,
    population: FitPopulation,
    horizon: usize,
) -> Result<PropensitySet> {
    if panel.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot fit propensities on an empty panel".into(),
        ));
    }
    if horizon > panel.horizon() {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} exceeds the panel horizon {}",
            panel.horizon()
        )));
    }
    let k_max = horizon;
    let trajs = panel.trajectories();
    let mut out = PropensitySet {
        population,
        treatment: Vec::with_capacity(k_max + 1),
        censoring: Vec::with_capacity(k_max + 1),
        treatment_fit_sizes: Vec::with_capacity(k_max + 1),
        censoring_fit_sizes: Vec::with_capacity(k_max + 1),
    };
    for m in 0..=k_max {
        let at_risk = panel.at_risk(m);
        let (t_rows, c_rows): (Vec<usize>, Vec<usize>) = match population {
            FitPopulation::AllUncensored => (at_risk.clone(), at_risk),
            FitPopulation::RegimeFollowers(regime) => {
                let t_rows = at_risk
                    .iter()
                    .copied()
                    .filter(|&i| m == 0 || consistent_through(&trajs[i], regime, m - 1))
                    .collect();
                let c_rows = at_risk
                    .iter()
                    .copied()
                    .filter(|&i| consistent_through(&trajs[i], regime, m))
                    .collect();
                (t_rows, c_rows)
            }
        };
        for (rows, what) in [(&t_rows, "treatment"), (&c_rows, "censoring")] {
            if rows.is_empty() {
                return Err(Error::DegenerateStratum {
                    step: m,
                    msg: format!("no subjects to fit the {what} model"),
                });
            }
        }

        let tx = DesignMatrix::build(panel, &t_rows, &treatment_features(m), |t| t.treatments(m))?;
        let ty: Vec<f64> = t_rows
            .iter()
            .map(|&i| trajs[i].t(m).map(|t| f64::from(u8::from(t))))
            .collect::<Result<_>>()?;
        let tmodel = fit_logistic(&tx.x, &ty, None, None, true).map_err(|e| e.at_step(m))?;

        let cx = DesignMatrix::build(panel, &c_rows, &censoring_features(m), |t| {
            t.treatments(m + 1)
        })?;
        let cy: Vec<f64> = c_rows
            .iter()
            .map(|&i| f64::from(u8::from(!trajs[i].uncensored_at(m + 1))))
            .collect();
        let cmodel = fit_logistic(&cx.x, &cy, None, None, true).map_err(|e| e.at_step(m))?;

        out.treatment.push(tmodel);
        out.censoring.push(cmodel);
        out.treatment_fit_sizes.push(t_rows.len());
        out.censoring_fit_sizes.push(c_rows.len());
    }
    Ok(out)
}

/// One subject at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub subject: usize,
    pub id: u64,
    pub m: usize,
    /// Cumulative inverse probability of the observed treatments through `m`.
    pub w_treat: f64,
    /// As `w_treat` with the regime's decision in place of `T_m`.
    pub w_treat_md: f64,
    /// Cumulative inverse retention probability through `C_{m+1}`.
    pub w_cens: f64,
    pub w_cens_md: f64,
    pub w: f64,
    pub w_md: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub horizon: usize,
    /// Rows grouped by `m`, subjects in panel order within each `m`.
    pub rows: Vec<WeightRow>,
    /// Per-step probabilities that the bounds changed.
    pub truncation_hits: usize,
    pub probabilities_evaluated: usize,
}

impl WeightTable {
    pub fn at_step(&self, m: usize) -> impl Iterator<Item = &WeightRow> {
        self.rows.iter().filter(move |r| r.m == m)
    }

    /// `W_m` and `W_m^md` at step `m`, each normalized over the rows present
    /// (the subjects uncensored at `m`).
    pub fn normalized_at(&self, m: usize) -> Result<Vec<(usize, f64, f64)>> {
        let rows: Vec<&WeightRow> = self.at_step(m).collect();
        let w = normalize_weights(&rows.iter().map(|r| r.w).collect::<Vec<_>>())?;
        let wmd = normalize_weights(&rows.iter().map(|r| r.w_md).collect::<Vec<_>>())?;
        Ok(rows
            .iter()
            .zip(w)
            .zip(wmd)
            .map(|((r, a), b)| (r.subject, a, b))
            .collect())
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "m", "W", "Wmd"])?;
        for r in &self.rows {
            w.write_record([
                r.id.to_string(),
                r.m.to_string(),
                format!("{}", r.w),
                format!("{}", r.w_md),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_csv_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

pub fn normalize_weights(w: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidParameter(format!("weights sum to {total}")));
    }
    Ok(w.iter().map(|v| v / total).collect())
}

struct Counter<'a> {
    bounds: ProbBounds,
    hits: &'a mut usize,
    evaluated: &'a mut usize,
}

impl Counter<'_> {
    fn bound(&mut self, p: f64) -> f64 {
        let q = self.bounds.apply(p);
        *self.evaluated += 1;
        if q != p {
            *self.hits += 1;
        }
        q
    }
}

fn arm(p_treated: f64, treated: bool) -> f64 {
    if treated {
        p_treated
    } else {
        1.0 - p_treated
    }
}

/// Observed-arm weights `W_m` and modified weights `W_m^md` for every
/// subject and every `m <= horizon` at which it is uncensored. The regime's
/// decision at `m` sees `L_m` and the observed `T_{m-1}`.
pub fn cumulative_weights(
    panel: &Panel,
    props: &dyn PropensitySource,
    regime: RegimeSpec,
    bounds: ProbBounds,
    horizon: usize,
) -> Result<WeightTable> {
    if horizon > panel.horizon() {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} exceeds the panel horizon {}",
            panel.horizon()
        )));
    }
    let k_max = horizon;
    let per_subject: Vec<(Vec<WeightRow>, usize, usize)> = panel
        .trajectories()
        .par_iter()
        .enumerate()
        .map(|(s, traj)| subject_weights(s, traj, props, regime, bounds, k_max))
        .collect::<Result<_>>()?;
    let hits = per_subject.iter().map(|p| p.1).sum();
    let evaluated = per_subject.iter().map(|p| p.2).sum();
    let mut rows = Vec::new();
    for m in 0..=k_max {
        rows.extend(per_subject.iter().filter_map(|p| p.0.get(m)).copied());
    }
    Ok(WeightTable {
        horizon: k_max,
        rows,
        truncation_hits: hits,
        probabilities_evaluated: evaluated,
    })
}

fn subject_weights(
    s: usize,
    traj: &Trajectory,
    props: &dyn PropensitySource,
    regime: RegimeSpec,
    bounds: ProbBounds,
    k_max: usize,
) -> Result<(Vec<WeightRow>, usize, usize)> {
    let mut hits = 0;
    let mut evaluated = 0;
    let mut c = Counter {
        bounds,
        hits: &mut hits,
        evaluated: &mut evaluated,
    };
    let mut rows = Vec::new();
    let mut cum_t = 1.0;
    let mut cum_c = 1.0;
    let mut history: Vec<bool> = Vec::with_capacity(k_max + 1);
    for m in 0..=k_max {
        if !traj.uncensored_at(m) {
            break;
        }
        let observed = traj.t(m)?;
        let prev = history.last().copied().unwrap_or(false);
        let decided = regime.decide(traj.l(m)?, prev);

        let p1 = props.treatment_prob(traj, m, &history)?;
        let p_obs = c.bound(arm(p1, observed));
        let p_md = c.bound(arm(p1, decided));

        history.push(observed);
        let r_obs = c.bound(props.retention_prob(traj, m, &history)?);
        let r_md = if decided == observed {
            r_obs
        } else {
            history[m] = decided;
            let r = c.bound(props.retention_prob(traj, m, &history)?);
            history[m] = observed;
            r
        };

        let w_treat = cum_t / p_obs;
        let w_treat_md = cum_t / p_md;
        let w_cens = cum_c / r_obs;
        let w_cens_md = cum_c / r_md;
        rows.push(WeightRow {
            subject: s,
            id: traj.id,
            m,
            w_treat,
            w_treat_md,
            w_cens,
            w_cens_md,
            w: w_treat * w_cens,
            w_md: w_treat_md * w_cens_md,
        });
        cum_t = w_treat;
        cum_c = w_cens;
    }
    Ok((rows, hits, evaluated))
}

/// `g_k`: product over `m <= k` of the bounded probabilities of following the
/// regime at `m` and staying uncensored at `m + 1`, along the regime's own
/// treatment history. Requires the subject to be uncensored at `k`.
pub fn regime_probability(
    traj: &Trajectory,
    props: &dyn PropensitySource,
    regime: RegimeSpec,
    k: usize,
    bounds: ProbBounds,
) -> Result<f64> {
    let d = regime.plugged(traj, k + 1)?;
    let mut g = 1.0;
    for m in 0..=k {
        let p = props.treatment_prob(traj, m, &d[..m])?;
        g *= bounds.apply(arm(p, d[m]));
        g *= bounds.apply(props.retention_prob(traj, m, &d[..=m])?);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Observation;

    struct Constant(f64, f64);

    impl PropensitySource for Constant {
        fn treatment_prob(&self, _: &Trajectory, _: usize, _: &[bool]) -> Result<f64> {
            Ok(self.0)
        }
        fn retention_prob(&self, _: &Trajectory, _: usize, _: &[bool]) -> Result<f64> {
            Ok(self.1)
        }
    }

    fn subject(id: u64, t: [bool; 2]) -> Trajectory {
        let rec = |t| Observation {
            l: Some([500.0, 0.2, -1.0]),
            censored: false,
            y: Some(0.0),
            t,
        };
        Trajectory {
            id,
            v: [1.0, 0.0, 2.0],
            records: vec![rec(Some(t[0])), rec(Some(t[1])), rec(None)],
        }
    }

    #[test]
    fn truncation_examples() {
        assert_eq!(truncate_probability(0.05, 0.1, 0.9), 0.1);
        assert_eq!(truncate_probability(0.5, 0.1, 0.9), 0.5);
        assert_eq!(truncate_probability(0.97, 0.1, 0.9), 0.9);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_weights(&[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(normalize_weights(&[7.3]).unwrap(), vec![1.0]);
        assert!(normalize_weights(&[0.0, 0.0]).is_err());
        let u = normalize_weights(&vec![3.0; 37]).unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 37.0).abs() < 1e-15));
    }

    #[test]
    fn half_probabilities_give_sixteen_at_m1() {
        let panel = Panel::new(1, vec![subject(0, [true, true])]).unwrap();
        let t = cumulative_weights(
            &panel,
            &Constant(0.5, 0.5),
            RegimeSpec::AlwaysTreat,
            ProbBounds::default(),
            1,
        )
        .unwrap();
        let r = t.at_step(1).next().unwrap();
        assert_eq!(r.w, 16.0);
    }

    #[test]
    fn single_step_weight() {
        let panel = Panel::new(1, vec![subject(0, [true, true])]).unwrap();
        let t = cumulative_weights(
            &panel,
            &Constant(0.8, 0.9),
            RegimeSpec::AlwaysTreat,
            ProbBounds::NONE,
            1,
        )
        .unwrap();
        let r = t.at_step(0).next().unwrap();
        assert_eq!(r.w, (1.0 / 0.8) * (1.0 / 0.9));
    }

    #[test]
    fn modified_weight_equals_observed_when_regime_agrees() {
        let panel =
            Panel::new(1, vec![subject(0, [true, true]), subject(1, [false, true])]).unwrap();
        let t = cumulative_weights(
            &panel,
            &Constant(0.7, 0.85),
            RegimeSpec::AlwaysTreat,
            ProbBounds::default(),
            1,
        )
        .unwrap();
        for r in &t.rows {
            let agrees = panel.trajectories()[r.subject].t(r.m).unwrap();
            assert_eq!(r.w == r.w_md, agrees);
        }
    }
}
