//! Estimators of the counterfactual mean `E[Y_{K+1}]` under a treatment
//! regime with censoring prevented: IPTW, a pooled MSM, sequential
//! g-computation, LTMLE and the two-step (TS) estimator.
//!
//! Sequential g-computation, LTMLE and TS share one backward recursion over
//! `m = K..0`, implemented by [`iterated_expectation`].

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dkl::{fit_dkl, DklConfig};
use crate::error::{Error, Result};
use crate::panel::{DesignMatrix, FeatureSpec, Panel, Trajectory};
use crate::regress::logistic::{expit, fit_logistic, logit};
use crate::regress::{fit_mlp, fit_wls, select_learner, Learner, LearnerSet, MlpConfig, Regressor};
use crate::sem_sim::{follows_regime, RegimeSpec, TruncationTable};
use crate::seeds;
use crate::weights::{
    cumulative_weights, fit_propensities, normalize_weights, regime_probability, FitPopulation, PropensitySource,
    ProbBounds, WeightTable,
};

const SELECTION_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Iptw,
    Msm,
    SeqG,
    Ltmle,
    Ts,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Iptw, Method::Msm, Method::SeqG, Method::Ltmle, Method::Ts];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Iptw => "iptw",
            Method::Msm => "msm",
            Method::SeqG => "seq_g",
            Method::Ltmle => "ltmle",
            Method::Ts => "ts",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.trim().to_ascii_lowercase().as_str() {
            "iptw" => Ok(Method::Iptw),
            "msm" => Ok(Method::Msm),
            "seq_g" | "seq-g" | "seqg" => Ok(Method::SeqG),
            "ltmle" => Ok(Method::Ltmle),
            "ts" => Ok(Method::Ts),
            other => Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }

    pub fn needs_learner(&self) -> bool {
        matches!(self, Method::SeqG | Method::Ltmle | Method::Ts)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Outcome regression used inside the backward recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutcomeLearner {
    /// Cross-validated choice from a nested candidate set.
    Set(LearnerSet),
    Nn(MlpConfig),
    Dkl(DklConfig),
}

impl OutcomeLearner {
    pub fn label(&self) -> &'static str {
        match self {
            OutcomeLearner::Set(s) => s.name(),
            OutcomeLearner::Nn(_) => "nn",
            OutcomeLearner::Dkl(_) => "dkl",
        }
    }

    /// `L1`, `L2`, `L3`, `nn` or `dkl`, with default network settings.
    pub fn parse(s: &str) -> Result<OutcomeLearner> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nn" => Ok(OutcomeLearner::Nn(MlpConfig::two_step_network())),
            "dkl" => Ok(OutcomeLearner::Dkl(DklConfig::default())),
            other => LearnerSet::parse(other).map(OutcomeLearner::Set),
        }
    }
}

impl fmt::Display for OutcomeLearner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Learner for OutcomeLearner {
    fn name(&self) -> String {
        self.label().to_string()
    }

    fn fit(&self, x: &DMatrix<f64>, y: &[f64], seed: u64) -> Result<Box<dyn Regressor>> {
        Ok(match self {
            OutcomeLearner::Set(set) => select_learner(*set, x, y, SELECTION_FOLDS, seed)?,
            OutcomeLearner::Nn(cfg) => Box::new(fit_mlp(x, y, cfg, seed)?),
            OutcomeLearner::Dkl(cfg) => Box::new(fit_dkl(x, y, cfg, seed)?),
        })
    }

    fn fit_weighted(&self, x: &DMatrix<f64>, y: &[f64], weights: &[f64], seed: u64) -> Result<Box<dyn Regressor>> {
        let _ = seed;
        match self {
            OutcomeLearner::Set(LearnerSet::L1) => Ok(Box::new(fit_wls(x, y, weights)?)),
            other => Err(Error::InvalidParameter(format!(
                "learner {other} does not accept loss weights"
            ))),
        }
    }
}

/// Treatment history placed in prediction rows at step `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlugIn {
    /// `d_0..d_m`, each decision seeing the regime's own previous decision.
    FullRegime,
    /// Observed `T_0..T_{m-1}` and `d_m` decided on the observed history.
    CurrentOnly,
}

/// How the TS weights enter the outcome regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightUse {
    /// One extra input column: `W_m` when fitting, `W_m^md` when predicting.
    Covariate,
    /// `W_m` as per-row loss weights.
    LossWeight,
}

/// Affine map of the outcome onto `[0, 1]`, clamped to `[margin, 1 - margin]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScale {
    pub lo: f64,
    pub hi: f64,
    pub margin: f64,
}

impl Default for OutcomeScale {
    /// The support of the simulated outcome.
    fn default() -> Self {
        let (lo, hi) = TruncationTable::default().y.support();
        OutcomeScale { lo, hi, margin: 0.0005 }
    }
}

impl OutcomeScale {
    pub fn clamp(&self, q: f64) -> f64 {
        q.max(self.margin).min(1.0 - self.margin)
    }

    pub fn to_unit(&self, y: f64) -> f64 {
        self.clamp((y - self.lo) / (self.hi - self.lo))
    }

    pub fn from_unit(&self, q: f64) -> f64 {
        self.lo + q * (self.hi - self.lo)
    }
}

/// Which subjects the LTMLE update moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    /// Only subjects with a nonzero clever covariate (uncensored followers).
    Followers,
    /// Every subject uncensored at `m`, each shifted by `eps / g_m` along
    /// its own regime history.
    AllAtRisk,
}

/// LTMLE targeting step settings.
#[derive(Clone, Copy)]
pub struct Fluctuation<'a> {
    pub props: &'a dyn PropensitySource,
    pub bounds: ProbBounds,
    pub scope: UpdateScope,
    /// Skip every update as if the fitted coefficient were zero.
    pub force_zero: bool,
}

#[derive(Clone, Copy)]
pub struct IceOptions<'a> {
    pub regime: RegimeSpec,
    pub horizon: usize,
    pub plug_in: PlugIn,
    pub scale: Option<OutcomeScale>,
    pub weights: Option<(&'a WeightTable, WeightUse)>,
    pub fluctuation: Option<Fluctuation<'a>>,
    /// Integrate each `L_{m+1}` under `T_m = d_m`: fits for `m < K` keep
    /// only rows whose `T_{m+1}` matches the regime, and a final regression
    /// on the baseline covariates among `T_0 = d_0` replaces the plain mean.
    /// Off gives the unstratified recursion, which integrates `L_{m+1}`
    /// over the observed treatment.
    pub stratify: bool,
    pub seed: u64,
}

impl IceOptions<'_> {
    pub fn new(regime: RegimeSpec, horizon: usize, seed: u64) -> IceOptions<'static> {
        IceOptions {
            regime,
            horizon,
            plug_in: PlugIn::FullRegime,
            scale: None,
            weights: None,
            fluctuation: None,
            stratify: true,
            seed,
        }
    }
}

/// Summary of one step's predictive variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    pub m: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Outcome-regression fitting rows per `m`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fit_sizes: Vec<usize>,
    /// Prediction rows per `m`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predict_sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub treatment_fit_sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub censoring_fit_sizes: Vec<usize>,
    /// Regime followers used at each `m` (fluctuation rows, or the final set).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub followers: Vec<usize>,
    pub truncation_hits: usize,
    pub probabilities_evaluated: usize,
    /// Steps whose propensity fits hit quasi-separation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub separated_steps: Vec<usize>,
    /// Fitted fluctuation coefficient per `m`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epsilon: Vec<f64>,
    /// Steps whose fluctuation fit was degenerate and skipped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_fluctuations: Vec<usize>,
    /// Rows of the baseline regression of the stratified recursion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_fit_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_epsilon: Option<f64>,
    /// MSM intercept and slope.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msm_coefficients: Option<[f64; 2]>,
    /// Result on the unit scale, when the outcome was rescaled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaled_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictive_variance: Vec<VarianceSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub method: Method,
    pub learner: Option<String>,
    pub regime: RegimeSpec,
    #[serde(rename = "K")]
    pub horizon: usize,
    pub value: f64,
    pub truth: Option<f64>,
    pub abs_error: Option<f64>,
    pub diagnostics: Diagnostics,
}

impl Estimate {
    pub fn with_truth(mut self, truth: f64) -> Estimate {
        self.truth = Some(truth);
        self.abs_error = Some((self.value - truth).abs());
        self
    }

    fn new(method: Method, learner: Option<String>, regime: RegimeSpec, horizon: usize, value: f64) -> Result<Estimate> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("{method} estimate is {value}")));
        }
        Ok(Estimate {
            method,
            learner,
            regime,
            horizon,
            value,
            truth: None,
            abs_error: None,
            diagnostics: Diagnostics::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: Method,
    pub learner: Option<OutcomeLearner>,
    pub regime: RegimeSpec,
    pub horizon: usize,
    pub truncation: ProbBounds,
    pub outcome_scale: OutcomeScale,
    pub seed: u64,
    /// Self-normalized IPTW; `false` gives the Horvitz-Thompson form.
    pub hajek: bool,
    pub weight_use: WeightUse,
    /// Overrides the method's default plug-in.
    pub plug_in: Option<PlugIn>,
    pub force_zero_fluctuation: bool,
    pub update_scope: UpdateScope,
    pub stratify: bool,
}

impl EstimatorConfig {
    pub fn new(
        method: Method,
        learner: Option<OutcomeLearner>,
        regime: RegimeSpec,
        horizon: usize,
        seed: u64,
    ) -> EstimatorConfig {
        EstimatorConfig {
            method,
            learner,
            regime,
            horizon,
            truncation: ProbBounds::default(),
            outcome_scale: OutcomeScale::default(),
            seed,
            hajek: true,
            weight_use: WeightUse::Covariate,
            plug_in: None,
            force_zero_fluctuation: false,
            update_scope: UpdateScope::Followers,
            stratify: true,
        }
    }

    pub fn validate(&self, panel: &Panel) -> Result<()> {
        if self.horizon > panel.horizon() {
            return Err(Error::InvalidParameter(format!(
                "K = {} exceeds the panel horizon {}",
                self.horizon,
                panel.horizon()
            )));
        }
        if self.method.needs_learner() && self.learner.is_none() {
            return Err(Error::InvalidParameter(format!("{} needs an outcome learner", self.method)));
        }
        let b = self.truncation;
        if !(0.0..=1.0).contains(&b.lo) || !(0.0..=1.0).contains(&b.hi) || b.lo > b.hi {
            return Err(Error::InvalidParameter(format!("bad truncation bounds [{}, {}]", b.lo, b.hi)));
        }
        let s = self.outcome_scale;
        if !(s.hi > s.lo) || !(0.0..0.5).contains(&s.margin) {
            return Err(Error::InvalidParameter("bad outcome scale".into()));
        }
        if panel.is_empty() {
            return Err(Error::InvalidParameter("empty panel".into()));
        }
        Ok(())
    }

    fn learner(&self) -> Result<&OutcomeLearner> {
        self.learner
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("{} needs an outcome learner", self.method)))
    }

    fn learner_label(&self) -> Option<String> {
        if self.method.needs_learner() {
            self.learner.as_ref().map(|l| l.label().to_string())
        } else {
            None
        }
    }
}

/// Runs the configured estimator.
pub fn estimate(panel: &Panel, cfg: &EstimatorConfig) -> Result<Estimate> {
    match cfg.method {
        Method::Iptw => estimate_iptw(panel, cfg),
        Method::Msm => estimate_msm(panel, cfg),
        Method::SeqG => estimate_seq_g(panel, cfg),
        Method::Ltmle => estimate_ltmle(panel, cfg),
        Method::Ts => estimate_ts(panel, cfg),
    }
}

/// Result of the backward recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct IceResult {
    /// On the original outcome scale.
    pub value: f64,
    pub diagnostics: Diagnostics,
}

/// Backward recursion `Q_{K+1} = Y_{K+1}`; for `m = K..0` regress `Q_{m+1}`
/// on the history through `L_{m+1}` among subjects uncensored at `m + 1`,
/// then predict at the plugged-in treatments for subjects uncensored at `m`.
/// Returns the mean of `Q_0`.
pub fn iterated_expectation(panel: &Panel, learner: &dyn Learner, opts: &IceOptions) -> Result<IceResult> {
    let k_max = opts.horizon;
    if k_max > panel.horizon() {
        return Err(Error::InvalidParameter(format!(
            "K = {k_max} exceeds the panel horizon {}",
            panel.horizon()
        )));
    }
    let trajs = panel.trajectories();
    let regime = opts.regime;
    let mut diag = Diagnostics {
        fit_sizes: vec![0; k_max + 1],
        predict_sizes: vec![0; k_max + 1],
        ..Diagnostics::default()
    };
    if opts.fluctuation.is_some() {
        diag.followers = vec![0; k_max + 1];
        diag.epsilon = vec![0.0; k_max + 1];
    }

    let mut q = vec![f64::NAN; trajs.len()];
    for i in panel.at_risk(k_max + 1) {
        let y = trajs[i].y(k_max + 1)?;
        q[i] = opts.scale.map_or(y, |s| s.to_unit(y));
    }

    for m in (0..=k_max).rev() {
        let mut fit_rows = panel.at_risk(m + 1);
        if opts.stratify && m < k_max {
            fit_rows.retain(|&i| current_follower(&trajs[i], regime, m + 1));
        }
        let pred_rows = panel.at_risk(m);
        if fit_rows.is_empty() {
            return Err(Error::DegenerateStratum {
                step: m,
                msg: format!("no subjects uncensored at time {} with T matching {regime}", m + 1),
            });
        }
        let spec = FeatureSpec::canonical(m + 1);
        let mut fx = DesignMatrix::build(panel, &fit_rows, &spec, |t| t.treatments(m + 1))?;
        let mut px = DesignMatrix::build(panel, &pred_rows, &spec, |t| match opts.plug_in {
            PlugIn::FullRegime => regime.plugged(t, m + 1),
            PlugIn::CurrentOnly => regime.current_only(t, m),
        })?;
        let y: Vec<f64> = fit_rows.iter().map(|&i| q[i]).collect();
        let seed = seeds::derive(opts.seed, m as u64);

        let model = match opts.weights {
            None => learner.fit(&fx.x, &y, seed),
            Some((table, use_as)) => {
                let mut w = vec![f64::NAN; trajs.len()];
                let mut wmd = vec![f64::NAN; trajs.len()];
                for (s, a, b) in table.normalized_at(m)? {
                    w[s] = a;
                    wmd[s] = b;
                }
                let fit_w: Vec<f64> = fit_rows.iter().map(|&i| w[i]).collect();
                let pred_w: Vec<f64> = pred_rows.iter().map(|&i| wmd[i]).collect();
                if fit_w.iter().chain(&pred_w).any(|v| v.is_nan()) {
                    return Err(Error::DataIntegrity(format!("weight table lacks rows at m={m}")));
                }
                match use_as {
                    WeightUse::Covariate => {
                        fx = fx.with_column("W", &fit_w)?;
                        px = px.with_column("W", &pred_w)?;
                        learner.fit(&fx.x, &y, seed)
                    }
                    WeightUse::LossWeight => learner.fit_weighted(&fx.x, &y, &fit_w, seed),
                }
            }
        }
        .map_err(|e| e.at_step(m))?;

        let (mean, var) = model.predict_with_variance(&px.x).map_err(|e| e.at_step(m))?;
        let mut pred: Vec<f64> = mean.iter().copied().collect();
        if let Some(s) = opts.scale {
            pred.iter_mut().for_each(|p| *p = s.clamp(*p));
        }
        if let Some(v) = var {
            let values: Vec<f64> = v.iter().copied().collect();
            let n = values.len().max(1) as f64;
            diag.predictive_variance.push(VarianceSummary {
                m,
                mean: values.iter().sum::<f64>() / n,
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                values,
            });
        }

        if let Some(fl) = opts.fluctuation {
            let followers: Vec<usize> = (0..pred_rows.len())
                .filter(|&r| follows_regime(&trajs[pred_rows[r]], regime, m))
                .collect();
            let (eps, n_followers, skipped) = fluctuate(&pred_rows, &mut pred, &q, &followers, m, &fl, |r| {
                regime_probability(&trajs[pred_rows[r]], fl.props, regime, m, fl.bounds)
            })
            .map_err(|e| e.at_step(m))?;
            diag.followers[m] = n_followers;
            diag.epsilon[m] = eps;
            if skipped {
                log::warn!("degenerate fluctuation at m={m}; update skipped");
                diag.skipped_fluctuations.push(m);
            }
        }

        diag.fit_sizes[m] = fit_rows.len();
        diag.predict_sizes[m] = pred_rows.len();
        for (&i, p) in pred_rows.iter().zip(&pred) {
            q[i] = *p;
        }
    }

    diag.predictive_variance.reverse();
    let start = panel.at_risk(0);
    if start.is_empty() {
        return Err(Error::DegenerateStratum {
            step: 0,
            msg: "no subjects at baseline".into(),
        });
    }
    if opts.stratify {
        baseline_step(panel, learner, opts, &start, &mut q, &mut diag)?;
    }
    let unit = start.iter().map(|&i| q[i]).sum::<f64>() / start.len() as f64;
    let value = match opts.scale {
        Some(s) => {
            diag.scaled_value = Some(unit);
            s.from_unit(unit)
        }
        None => unit,
    };
    Ok(IceResult { value, diagnostics: diag })
}

/// Whether `T_k` equals the regime's decision given `L_k` and the observed
/// `T_{k-1}`.
fn current_follower(traj: &Trajectory, regime: RegimeSpec, k: usize) -> bool {
    let prev = k > 0 && traj.records[k - 1].t == Some(true);
    match (traj.records[k].l, traj.records[k].t) {
        (Some(l), Some(t)) => t == regime.decide(l, prev),
        _ => false,
    }
}

/// Regresses the step-0 values on the baseline covariates among subjects
/// with `T_0 = d_0` and predicts for everyone at baseline, so that `L_1` is
/// integrated under the regime's first decision.
fn baseline_step(
    panel: &Panel,
    learner: &dyn Learner,
    opts: &IceOptions,
    start: &[usize],
    q: &mut [f64],
    diag: &mut Diagnostics,
) -> Result<()> {
    let trajs = panel.trajectories();
    let regime = opts.regime;
    let fit_rows: Vec<usize> = start
        .iter()
        .copied()
        .filter(|&i| current_follower(&trajs[i], regime, 0))
        .collect();
    if fit_rows.is_empty() {
        return Err(Error::DegenerateStratum {
            step: 0,
            msg: format!("no baseline subjects with T_0 matching {regime}"),
        });
    }
    let spec = FeatureSpec {
        time: 0,
        include_current_l: true,
        include_current_y: false,
    };
    let fx = DesignMatrix::build(panel, &fit_rows, &spec, |_| Ok(Vec::new()))?;
    let px = DesignMatrix::build(panel, start, &spec, |_| Ok(Vec::new()))?;
    let y: Vec<f64> = fit_rows.iter().map(|&i| q[i]).collect();
    let model = learner
        .fit(&fx.x, &y, seeds::derive_label(opts.seed, "baseline"))
        .map_err(|e| e.at_step(0))?;
    let mut pred: Vec<f64> = model.predict(&px.x).map_err(|e| e.at_step(0))?.iter().copied().collect();
    if let Some(s) = opts.scale {
        pred.iter_mut().for_each(|p| *p = s.clamp(*p));
    }
    if let Some(fl) = opts.fluctuation {
        let followers: Vec<usize> = (0..start.len())
            .filter(|&r| current_follower(&trajs[start[r]], regime, 0))
            .collect();
        let (eps, _, skipped) = fluctuate(start, &mut pred, q, &followers, 0, &fl, |r| {
            let traj = &trajs[start[r]];
            let p = fl.props.treatment_prob(traj, 0, &[])?;
            let d0 = regime.decide(traj.l(0)?, false);
            Ok(fl.bounds.apply(if d0 { p } else { 1.0 - p }))
        })?;
        diag.baseline_epsilon = Some(eps);
        if skipped {
            log::warn!("degenerate baseline fluctuation; update skipped");
        }
    }
    diag.baseline_fit_size = Some(fit_rows.len());
    for (&i, p) in start.iter().zip(&pred) {
        q[i] = *p;
    }
    Ok(())
}

/// One targeting update over `followers` (positions in `pred_rows`) with
/// clever covariate `1 / g(position)`. Returns the coefficient, the
/// follower count and whether the update was skipped as degenerate.
fn fluctuate<G>(
    pred_rows: &[usize],
    pred: &mut [f64],
    q_next: &[f64],
    followers: &[usize],
    m: usize,
    fl: &Fluctuation,
    g: G,
) -> Result<(f64, usize, bool)>
where
    G: Fn(usize) -> Result<f64>,
{
    if followers.is_empty() {
        return Err(Error::Estimation {
            step: m,
            msg: "no subjects follow the regime and stay uncensored".into(),
        });
    }
    if fl.force_zero {
        return Ok((0.0, followers.len(), false));
    }
    let mut gbar = vec![f64::INFINITY; pred_rows.len()];
    let moved: Vec<usize> = match fl.scope {
        UpdateScope::Followers => followers.to_vec(),
        UpdateScope::AllAtRisk => (0..pred_rows.len()).collect(),
    };
    for &r in &moved {
        gbar[r] = g(r)?;
    }
    let h = DMatrix::from_iterator(followers.len(), 1, followers.iter().map(|&r| 1.0 / gbar[r]));
    let y: Vec<f64> = followers.iter().map(|&r| q_next[pred_rows[r]]).collect();
    let offset: Vec<f64> = followers.iter().map(|&r| logit(pred[r])).collect();
    let eps = match fit_logistic(&h, &y, None, Some(&offset), false) {
        Ok(fit) if fit.dropped.is_empty() && fit.coefficients[0].is_finite() => fit.coefficients[0],
        _ => return Ok((0.0, followers.len(), true)),
    };
    if eps != 0.0 {
        for &r in &moved {
            pred[r] = expit(logit(pred[r]) + eps / gbar[r]);
        }
    }
    Ok((eps, followers.len(), false))
}

/// Sequential g-computation with the configured learner.
pub fn estimate_seq_g(panel: &Panel, cfg: &EstimatorConfig) -> Result<Estimate> {
    cfg.validate(panel)?;
    let opts = IceOptions {
        plug_in: cfg.plug_in.unwrap_or(PlugIn::FullRegime),
        stratify: cfg.stratify,
        ..IceOptions::new(cfg.regime, cfg.horizon, cfg.seed)
    };
    let r = iterated_expectation(panel, cfg.learner()?, &opts)?;
    let mut est = Estimate::new(Method::SeqG, cfg.learner_label(), cfg.regime, cfg.horizon, r.value)?;
    est.diagnostics = r.diagnostics;
    Ok(est)
}

/// LTMLE: the outcome is mapped to `[0, 1]`, each step's regression is
/// targeted by a no-intercept logistic fluctuation along `1 / g_m`, and the
/// final mean is mapped back.
pub fn estimate_ltmle(panel: &Panel, cfg: &EstimatorConfig) -> Result<Estimate> {
    cfg.validate(panel)?;
    let props = fit_propensities(panel, FitPopulation::RegimeFollowers(cfg.regime), cfg.horizon)?;
    let opts = IceOptions {
        plug_in: cfg.plug_in.unwrap_or(PlugIn::FullRegime),
        scale: Some(cfg.outcome_scale),
        fluctuation: Some(Fluctuation {
            props: &props,
            bounds: cfg.truncation,
            scope: cfg.update_scope,
            force_zero: cfg.force_zero_fluctuation,
        }),
        stratify: cfg.stratify,
        ..IceOptions::new(cfg.regime, cfg.horizon, cfg.seed)
    };
    let r = iterated_expectation(panel, cfg.learner()?, &opts)?;
    let mut est = Estimate::new(Method::Ltmle, cfg.learner_label(), cfg.regime, cfg.horizon, r.value)?;
    est.diagnostics = Diagnostics {
        treatment_fit_sizes: props.treatment_fit_sizes.clone(),
        censoring_fit_sizes: props.censoring_fit_sizes.clone(),
        separated_steps: props.separated_steps(),
        ..r.diagnostics
    };
    Ok(est)
}

/// Two-step estimator: propensities fitted on every uncensored subject,
/// cumulative weights as an extra regression input, observed earlier
/// treatments with the regime's current decision plugged in.
pub fn estimate_ts(panel: &Panel, cfg: &EstimatorConfig) -> Result<Estimate> {
    cfg.validate(panel)?;
    let props = fit_propensities(panel, FitPopulation::AllUncensored, cfg.horizon)?;
    let table = cumulative_weights(panel, &props, cfg.regime, cfg.truncation, cfg.horizon)?;
    let opts = IceOptions {
        plug_in: cfg.plug_in.unwrap_or(PlugIn::CurrentOnly),
        weights: Some((&table, cfg.weight_use)),
        stratify: cfg.stratify,
        ..IceOptions::new(cfg.regime, cfg.horizon, cfg.seed)
    };
    let r = iterated_expectation(panel, cfg.learner()?, &opts)?;
    let mut est = Estimate::new(Method::Ts, cfg.learner_label(), cfg.regime, cfg.horizon, r.value)?;
    est.diagnostics = Diagnostics {
        treatment_fit_sizes: props.treatment_fit_sizes.clone(),
        censoring_fit_sizes: props.censoring_fit_sizes.clone(),
        separated_steps: props.separated_steps(),
        truncation_hits: table.truncation_hits,
        probabilities_evaluated: table.probabilities_evaluated,
        ..r.diagnostics
    };
    Ok(est)
}

/// Inverse-probability-weighted mean of `Y_{K+1}` among subjects who follow
/// the regime through `K` and stay uncensored, with `1 / g_K` weights built
/// from `props`. `hajek` divides by the weight sum instead of `n`.
pub fn iptw_with(
    panel: &Panel,
    props: &dyn PropensitySource,
    regime: RegimeSpec,
    horizon: usize,
    bounds: ProbBounds,
    hajek: bool,
) -> Result<(f64, usize)> {
    let trajs = panel.trajectories();
    let followers: Vec<usize> = (0..trajs.len())
        .filter(|&i| follows_regime(&trajs[i], regime, horizon))
        .collect();
    if followers.is_empty() {
        return Err(Error::Estimation {
            step: horizon,
            msg: format!("no subject follows {regime} through K = {horizon}"),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in &followers {
        let w = 1.0 / regime_probability(&trajs[i], props, regime, horizon, bounds)?;
        num += w * trajs[i].y(horizon + 1)?;
        den += w;
    }
    let value = if hajek { num / den } else { num / trajs.len() as f64 };
    Ok((value, followers.len()))
}

pub fn estimate_iptw(panel: &Panel, cfg: &EstimatorConfig) -> Result<Estimate> {
    cfg.validate(panel)?;
    let props = fit_propensities(panel, FitPopulation::RegimeFollowers(cfg.regime), cfg.horizon)?;
    let (value, n_followers) = iptw_with(panel, &props, cfg.regime, cfg.horizon, cfg.truncation, cfg.hajek)?;
    let mut est = Estimate::new(Method::Iptw, None, cfg.regime, cfg.horizon, value)?;
    est.diagnostics = Diagnostics {
        treatment_fit_sizes: props.treatment_fit_sizes.clone(),
        censoring_fit_sizes: props.censoring_fit_sizes.clone(),
        separated_steps: props.separated_steps(),
        followers: vec![n_followers],
        ..Diagnostics::default()
    };
    Ok(est)
}

/// One regime's contribution to the pooled MSM fit.
#[derive(Debug, Clone, PartialEq)]
pub struct MsmArm {
    pub regime: RegimeSpec,
    pub cumulative: Vec<f64>,
    pub outcome: Vec<f64>,
    /// Normalized within the arm.
    pub weights: Vec<f64>,
}

impl MsmArm {
    /// Weighted mean cumulative treatment among the arm's followers.
    pub fn mean_cumulative(&self) -> f64 {
        self.cumulative.iter().zip(&self.weights).map(|(c, w)| c * w).sum()
    }
}

/// Followers of `regime` through `K` with normalized `1 / g_K` weights.
pub fn msm_arm(
    panel: &Panel,
    props: &dyn PropensitySource,
    regime: RegimeSpec,
    horizon: usize,
    bounds: ProbBounds,
) -> Result<MsmArm> {
    let trajs = panel.trajectories();
    let mut arm = MsmArm {
        regime,
        cumulative: Vec::new(),
        outcome: Vec::new(),
        weights: Vec::new(),
    };
    let mut raw = Vec::new();
    for t in trajs.iter().filter(|t| follows_regime(t, regime, horizon)) {
        arm.cumulative.push(t.cumulative_treatment(horizon)? as f64);
        arm.outcome.push(t.y(horizon + 1)?);
        raw.push(1.0 / regime_probability(t, props, regime, horizon, bounds)?);
    }
    if raw.is_empty() {
        return Err(Error::Estimation {
            step: horizon,
            msg: format!("no subject follows {regime} through K = {horizon}"),
        });
    }
    arm.weights = normalize_weights(&raw)?;
    Ok(arm)
}

/// Weighted fit of `Y = theta_0 + theta_1 cum` on the pooled arms.
pub fn fit_msm(arms: &[MsmArm]) -> Result<[f64; 2]> {
    let cum: Vec<f64> = arms.iter().flat_map(|a| a.cumulative.iter().copied()).collect();
    let y: Vec<f64> = arms.iter().flat_map(|a| a.outcome.iter().copied()).collect();
    let w: Vec<f64> = arms.iter().flat_map(|a| a.weights.iter().copied()).collect();
    let x = DMatrix::from_column_slice(cum.len(), 1, &cum);
    let fit = fit_wls(&x, &y, &w)?;
    if !fit.dropped.is_empty() {
        return Err(Error::RankDeficient(
            "cumulative treatment is constant among the pooled followers".into(),
        ));
    }
    Ok([fit.intercept, fit.coefficients[0]])
}

/// Pools the follower sets of `regimes`, fits the MSM once, and evaluates it
/// at each regime's cumulative treatment: `K + 1` or `0` for static regimes,
/// the weighted follower mean for dynamic ones.
pub fn msm_estimates(panel: &Panel, regimes: &[RegimeSpec], cfg: &EstimatorConfig) -> Result<Vec<Estimate>> {
    cfg.validate(panel)?;
    let mut arms = Vec::with_capacity(regimes.len());
    let mut sizes = Vec::with_capacity(regimes.len());
    for &r in regimes {
        let props = fit_propensities(panel, FitPopulation::RegimeFollowers(r), cfg.horizon)?;
        arms.push(msm_arm(panel, &props, r, cfg.horizon, cfg.truncation)?);
        sizes.push(props);
    }
    let theta = fit_msm(&arms)?;
    arms.iter()
        .zip(&sizes)
        .map(|(arm, props)| {
            let cum = match arm.regime {
                RegimeSpec::AlwaysTreat => (cfg.horizon + 1) as f64,
                RegimeSpec::NeverTreat => 0.0,
                _ => arm.mean_cumulative(),
            };
            let mut est = Estimate::new(Method::Msm, None, arm.regime, cfg.horizon, theta[0] + theta[1] * cum)?;
            est.diagnostics = Diagnostics {
                treatment_fit_sizes: props.treatment_fit_sizes.clone(),
                censoring_fit_sizes: props.censoring_fit_sizes.clone(),
                separated_steps: props.separated_steps(),
                followers: vec![arm.outcome.len()],
                msm_coefficients: Some(theta),
                ..Diagnostics::default()
            };
            Ok(est)
        })
        .collect()
}

/// The MSM estimate for `cfg.regime`, fitted on all four regimes' followers.
pub fn estimate_msm(panel: &Panel, cfg: &EstimatorConfig) -> Result<Estimate> {
    msm_estimates(panel, &RegimeSpec::ALL, cfg)?
        .into_iter()
        .find(|e| e.regime == cfg.regime)
        .ok_or_else(|| Error::State(format!("MSM produced no estimate for {}", cfg.regime)))
}
