//! Feed-forward surrogate predicting monthly yield from (GHI, T_amb, k_t).
//!
//! tanh hidden layers with a linear output, min-max normalization of inputs
//! and target to [-1, 1], trained full-batch by Levenberg–Marquardt with
//! MacKay evidence updates of the weight-decay (α) and noise (β)
//! hyperparameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::climate::SiteClimate;
use crate::rng::seeded_rng;

pub const N_INPUTS: usize = 3;
/// Default topology, input first.
pub const LAYER_SIZES: [usize; 4] = [N_INPUTS, 10, 10, 1];
/// Minimum rows accepted for training (one site-year).
pub const MIN_ROWS: usize = 12;
/// Re-initializations attempted after a non-finite objective.
pub const INIT_ATTEMPTS: u64 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training needs at least {MIN_ROWS} rows, got {0}")]
    TooFewRows(usize),
    #[error("objective became non-finite")]
    NonFiniteObjective,
    #[error("invalid training row {index}: {reason}")]
    InvalidRow { index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Field,
    Fused,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Synthetic => "synthetic",
            Provenance::Field => "field",
            Provenance::Fused => "fused",
        }
    }
}

/// One (site, month) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub site_id: String,
    pub lat: f64,
    pub lon: f64,
    pub month: u8,
    pub ghi: f64,
    pub tamb: f64,
    pub kt: f64,
    /// Monthly yield, kWh·m⁻²·month⁻¹.
    pub target: f64,
    pub provenance: Provenance,
}

impl TrainingRow {
    pub fn inputs(&self) -> [f64; N_INPUTS] {
        [self.ghi, self.tamb, self.kt]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub rows: Vec<TrainingRow>,
}

impl TrainingSet {
    pub fn new(rows: Vec<TrainingRow>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct site ids in first-seen order.
    pub fn site_ids(&self) -> Vec<&str> {
        let mut seen = std::collections::BTreeSet::new();
        self.rows.iter().map(|r| r.site_id.as_str()).filter(|id| seen.insert(*id)).collect()
    }

    fn samples(&self) -> Result<Vec<([f64; N_INPUTS], f64)>, TrainError> {
        self.rows
            .iter()
            .enumerate()
            .map(|(index, r)| {
                let x = r.inputs();
                if x.iter().any(|v| !v.is_finite()) || !r.target.is_finite() {
                    return Err(TrainError::InvalidRow { index, reason: "non-finite value".into() });
                }
                if r.target < 0.0 {
                    return Err(TrainError::InvalidRow { index, reason: format!("negative target {}", r.target) });
                }
                Ok((x, r.target))
            })
            .collect()
    }
}

/// Per-variable min-max bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Bounds {
    /// Bounds of the columns of `values`; a zero-width column is widened
    /// symmetrically so that min < max always holds.
    pub fn from_columns(values: &[Vec<f64>]) -> Self {
        let dims = values.first().map_or(0, Vec::len);
        let mut min = vec![f64::INFINITY; dims];
        let mut max = vec![f64::NEG_INFINITY; dims];
        for row in values {
            for d in 0..dims {
                min[d] = min[d].min(row[d]);
                max[d] = max[d].max(row[d]);
            }
        }
        for d in 0..dims {
            if min[d] >= max[d] {
                let pad = 0.5 * min[d].abs().max(1.0);
                min[d] -= pad;
                max[d] += pad;
            }
        }
        Self { min, max }
    }

    pub fn normalize(&self, d: usize, v: f64) -> f64 {
        2.0 * (v - self.min[d]) / (self.max[d] - self.min[d]) - 1.0
    }

    pub fn denormalize(&self, d: usize, v: f64) -> f64 {
        self.min[d] + (v + 1.0) / 2.0 * (self.max[d] - self.min[d])
    }

    pub fn contains(&self, d: usize, v: f64) -> bool {
        v >= self.min[d] && v <= self.max[d]
    }
}

/// Output of a single forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub value: f64,
    /// Some input lay outside the training bounds.
    pub extrapolated: bool,
}

/// Monthly predictions for one site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonthlyPrediction {
    pub monthly: [f64; 12],
    pub extrapolated: bool,
    /// Some raw prediction was negative and was clipped to 0.
    pub clipped: bool,
}

impl MonthlyPrediction {
    pub fn annual(&self) -> f64 {
        self.monthly.iter().sum()
    }
}

/// Parameter vector of a dense network, laid out layer by layer as the
/// row-major weight matrix (outputs × inputs) followed by the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layer_sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl Network {
    pub fn param_count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(layer_sizes: &[usize]) -> Self {
        Self { layer_sizes: layer_sizes.to_vec(), params: vec![0.0; Self::param_count(layer_sizes)] }
    }

    /// Weights uniform in [-0.5, 0.5] drawn from `seed`.
    pub fn random(layer_sizes: &[usize], seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let params = (0..Self::param_count(layer_sizes)).map(|_| rng.random_range(-0.5..=0.5)).collect();
        Self { layer_sizes: layer_sizes.to_vec(), params }
    }

    /// Offsets of each layer's weight block in `params`.
    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layer_sizes.len() - 1);
        let mut at = 0;
        for w in self.layer_sizes.windows(2) {
            out.push(at);
            at += w[0] * w[1] + w[1];
        }
        out
    }

    /// Activations of every layer; the last holds the linear output.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let offsets = self.offsets();
        let n_layers = self.layer_sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        for (l, &off) in offsets.iter().enumerate() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let prev = &acts[l];
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let next: Vec<f64> = (0..n_out)
                .map(|j| {
                    let z = b[j] + w[j * n_in..(j + 1) * n_in].iter().zip(prev).map(|(a, c)| a * c).sum::<f64>();
                    if l + 1 < n_layers {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(next);
        }
        acts
    }

    /// Network output on normalized input.
    pub fn output(&self, x: &[f64]) -> f64 {
        self.activations(x).last().expect("non-empty network")[0]
    }

    /// Output and its gradient with respect to every parameter.
    pub fn output_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let acts = self.activations(x);
        let offsets = self.offsets();
        let n_layers = self.layer_sizes.len() - 1;
        let mut delta = vec![1.0];
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for j in 0..n_out {
                for i in 0..n_in {
                    grad[off + j * n_in + i] = delta[j] * prev[i];
                }
                grad[off + n_in * n_out + j] = delta[j];
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                delta = (0..n_in)
                    .map(|i| {
                        let s: f64 = (0..n_out).map(|j| delta[j] * w[j * n_in + i]).sum();
                        s * (1.0 - prev[i] * prev[i])
                    })
                    .collect();
            }
        }
        acts[n_layers][0]
    }

    /// Residuals `output − target` and their Jacobian (rows × params).
    pub fn residuals_and_jacobian(&self, xs: &[Vec<f64>], targets: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.params.len();
        let mut jac = DMatrix::zeros(xs.len(), p);
        let mut res = DVector::zeros(xs.len());
        let mut g = vec![0.0; p];
        for (n, (x, t)) in xs.iter().zip(targets).enumerate() {
            res[n] = self.output_and_gradient(x, &mut g) - t;
            for (k, v) in g.iter().enumerate() {
                jac[(n, k)] = *v;
            }
        }
        (res, jac)
    }

    pub fn residuals(&self, xs: &[Vec<f64>], targets: &[f64]) -> DVector<f64> {
        DVector::from_iterator(xs.len(), xs.iter().zip(targets).map(|(x, t)| self.output(x) - t))
    }
}

/// Trained surrogate with its normalization and regularization state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub layer_sizes: Vec<usize>,
    /// Row-major (outputs × inputs) weight matrix per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input_bounds: Bounds,
    pub output_bounds: Bounds,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_eff: f64,
    pub seed: u64,
    pub epochs_run: usize,
    pub final_objective: f64,
}

impl SurrogateModel {
    pub fn from_network(net: &Network, input_bounds: Bounds, output_bounds: Bounds) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut at = 0;
        for w in net.layer_sizes.windows(2) {
            weights.push(net.params[at..at + w[0] * w[1]].to_vec());
            at += w[0] * w[1];
            biases.push(net.params[at..at + w[1]].to_vec());
            at += w[1];
        }
        Self {
            layer_sizes: net.layer_sizes.clone(),
            weights,
            biases,
            input_bounds,
            output_bounds,
            alpha: 0.0,
            beta: 0.0,
            gamma_eff: 0.0,
            seed: 0,
            epochs_run: 0,
            final_objective: 0.0,
        }
    }

    pub fn network(&self) -> Network {
        let params = self.weights.iter().zip(&self.biases).flat_map(|(w, b)| w.iter().chain(b)).copied().collect();
        Network { layer_sizes: self.layer_sizes.clone(), params }
    }

    pub fn param_count(&self) -> usize {
        Network::param_count(&self.layer_sizes)
    }

    fn normalized_input(&self, x: &[f64; N_INPUTS]) -> Vec<f64> {
        (0..N_INPUTS).map(|d| self.input_bounds.normalize(d, x[d])).collect()
    }

    pub fn forward(&self, x: &[f64; N_INPUTS]) -> Prediction {
        self.forward_with(&self.network(), x)
    }

    fn forward_with(&self, net: &Network, x: &[f64; N_INPUTS]) -> Prediction {
        let out = net.output(&self.normalized_input(x));
        Prediction {
            value: self.output_bounds.denormalize(0, out),
            extrapolated: (0..N_INPUTS).any(|d| !self.input_bounds.contains(d, x[d])),
        }
    }

    /// Forward pass per calendar month, clipping negative values at 0.
    pub fn predict_monthly(&self, site: &SiteClimate) -> MonthlyPrediction {
        let net = self.network();
        let mut out = MonthlyPrediction { monthly: [0.0; 12], extrapolated: false, clipped: false };
        for (slot, rec) in out.monthly.iter_mut().zip(site.months()) {
            let p = self.forward_with(&net, &[rec.ghi, rec.tamb, rec.kt]);
            out.extrapolated |= p.extrapolated;
            if p.value < 0.0 {
                out.clipped = true;
            }
            *slot = p.value.max(0.0);
        }
        out
    }

    pub fn predict_annual(&self, site: &SiteClimate) -> f64 {
        self.predict_monthly(site).annual()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("surrogate model serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub mu_init: f64,
    pub mu_increase: f64,
    pub mu_decrease: f64,
    pub mu_max: f64,
    pub grad_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 1000,
            mu_init: 0.005,
            mu_increase: 10.0,
            mu_decrease: 0.1,
            mu_max: 1e10,
            grad_tolerance: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Gradient,
    MaxMu,
    MaxEpochs,
}

/// One accepted Levenberg–Marquardt step. Both objective values use the
/// hyperparameters in force during the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub objective_before: f64,
    pub objective_after: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_eff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub reinitializations: u64,
    /// Training-set RMSE in target units.
    pub rmse: f64,
    pub r2: f64,
}

struct Problem {
    xs: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

fn half_sq(v: impl IntoIterator<Item = f64>) -> f64 {
    0.5 * v.into_iter().map(|x| x * x).sum::<f64>()
}

/// Trains a surrogate with the default topology.
pub fn train(data: &TrainingSet, seed: u64, cfg: &TrainConfig) -> Result<(SurrogateModel, TrainReport), TrainError> {
    train_with_layers(data, &LAYER_SIZES, seed, cfg)
}

/// Trains a surrogate with an arbitrary topology (`layer_sizes[0]` must be 3
/// and the last entry 1).
pub fn train_with_layers(
    data: &TrainingSet,
    layer_sizes: &[usize],
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(SurrogateModel, TrainReport), TrainError> {
    assert!(layer_sizes.len() >= 2 && layer_sizes[0] == N_INPUTS && layer_sizes[layer_sizes.len() - 1] == 1);
    if data.len() < MIN_ROWS {
        return Err(TrainError::TooFewRows(data.len()));
    }
    let mut samples = data.samples()?;
    // Row order must not influence the floating-point summation order.
    samples.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .fold(std::cmp::Ordering::Equal, |o, (x, y)| o.then(x.total_cmp(y)))
            .then(a.1.total_cmp(&b.1))
    });
    let input_bounds = Bounds::from_columns(&samples.iter().map(|s| s.0.to_vec()).collect::<Vec<_>>());
    let output_bounds = Bounds::from_columns(&samples.iter().map(|s| vec![s.1]).collect::<Vec<_>>());
    let problem = Problem {
        xs: samples.iter().map(|(x, _)| (0..N_INPUTS).map(|d| input_bounds.normalize(d, x[d])).collect()).collect(),
        targets: samples.iter().map(|s| output_bounds.normalize(0, s.1)).collect(),
    };

    let mut attempt = 0;
    let (net, reg, mut report) = loop {
        let init = Network::random(layer_sizes, seed + attempt);
        match levenberg_marquardt(init, &problem, cfg) {
            Ok(done) => break done,
            Err(TrainError::NonFiniteObjective) if attempt + 1 < INIT_ATTEMPTS => attempt += 1,
            Err(e) => return Err(e),
        }
    };
    report.reinitializations = attempt;

    let mut model = SurrogateModel::from_network(&net, input_bounds, output_bounds);
    model.alpha = reg.alpha;
    model.beta = reg.beta;
    model.gamma_eff = reg.gamma;
    model.seed = seed;
    model.epochs_run = report.epochs.len();
    model.final_objective = reg.objective;

    let preds: Vec<f64> = samples.iter().map(|(x, _)| model.forward_with(&net, x).value).collect();
    let refs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let (rmse, r2) = fit_stats(&preds, &refs);
    report.rmse = rmse;
    report.r2 = r2;
    Ok((model, report))
}

fn fit_stats(pred: &[f64], refs: &[f64]) -> (f64, f64) {
    let n = refs.len() as f64;
    let mean = refs.iter().sum::<f64>() / n;
    let ss_res: f64 = pred.iter().zip(refs).map(|(p, r)| (p - r).powi(2)).sum();
    let ss_tot: f64 = refs.iter().map(|r| (r - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    ((ss_res / n).sqrt(), r2)
}

struct RegState {
    alpha: f64,
    beta: f64,
    gamma: f64,
    objective: f64,
}

/// Floor on the data term when updating β, so a perfect fit cannot send β
/// to infinity.
const DATA_TERM_FLOOR: f64 = 1e-12;

fn levenberg_marquardt(
    mut net: Network,
    prob: &Problem,
    cfg: &TrainConfig,
) -> Result<(Network, RegState, TrainReport), TrainError> {
    let p = net.params.len();
    let n = prob.targets.len() as f64;
    let mut alpha = 0.01;
    let mut beta = 1.0;
    let mut gamma = p as f64;
    let mut mu = cfg.mu_init;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    let objective = |e_d: f64, e_w: f64, alpha: f64, beta: f64| beta * e_d + alpha * e_w;

    let (mut res, mut jac) = net.residuals_and_jacobian(&prob.xs, &prob.targets);
    let mut e_d = half_sq(res.iter().copied());
    let mut e_w = half_sq(net.params.iter().copied());
    if !objective(e_d, e_w, alpha, beta).is_finite() {
        return Err(TrainError::NonFiniteObjective);
    }

    for _ in 0..cfg.max_epochs {
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&res);
        let w = DVector::from_column_slice(&net.params);
        let grad_full = &jtr * beta + &w * alpha;
        if jtr.amax() < cfg.grad_tolerance || grad_full.amax() < cfg.grad_tolerance {
            stop_reason = StopReason::Gradient;
            break;
        }
        let f_before = objective(e_d, e_w, alpha, beta);

        let mut accepted = None;
        while mu <= cfg.mu_max {
            let mut lhs = &jtj * beta;
            for k in 0..p {
                lhs[(k, k)] += alpha + mu;
            }
            let step = lhs.cholesky().map(|c| c.solve(&grad_full));
            if let Some(step) = step {
                let trial = Network {
                    layer_sizes: net.layer_sizes.clone(),
                    params: net.params.iter().zip(step.iter()).map(|(w, s)| w - s).collect(),
                };
                let r = trial.residuals(&prob.xs, &prob.targets);
                let (td, tw) = (half_sq(r.iter().copied()), half_sq(trial.params.iter().copied()));
                let f_after = objective(td, tw, alpha, beta);
                if !f_after.is_finite() {
                    return Err(TrainError::NonFiniteObjective);
                }
                if f_after < f_before {
                    accepted = Some((trial, f_after));
                    break;
                }
            }
            mu *= cfg.mu_increase;
        }
        let Some((trial, f_after)) = accepted else {
            stop_reason = StopReason::MaxMu;
            break;
        };
        epochs.push(EpochRecord {
            objective_before: f_before,
            objective_after: f_after,
            mu,
            alpha,
            beta,
            gamma_eff: gamma,
        });
        mu *= cfg.mu_decrease;
        net = trial;

        // Evidence update with the Gauss–Newton Hessian of the accepted point's
        // neighbourhood.
        let mut h = &jtj * beta;
        for k in 0..p {
            h[(k, k)] += alpha;
        }
        if let Some(chol) = h.cholesky() {
            let trace = chol.inverse().trace();
            gamma = (p as f64 - alpha * trace).clamp(0.0, p as f64);
        }
        (res, jac) = net.residuals_and_jacobian(&prob.xs, &prob.targets);
        e_d = half_sq(res.iter().copied());
        e_w = half_sq(net.params.iter().copied());
        if e_w > 0.0 {
            alpha = gamma / (2.0 * e_w);
        }
        beta = (n - gamma).max(1.0) / (2.0 * e_d.max(DATA_TERM_FLOOR));
        if !objective(e_d, e_w, alpha, beta).is_finite() {
            return Err(TrainError::NonFiniteObjective);
        }
    }

    let reg = RegState { alpha, beta, gamma, objective: objective(e_d, e_w, alpha, beta) };
    let report = TrainReport { epochs, stop_reason, reinitializations: 0, rmse: 0.0, r2: 0.0 };
    Ok((net, reg, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::climate::{ClimateRecord, SiteClimate};

    fn row(i: usize, x: [f64; 3], y: f64) -> TrainingRow {
        TrainingRow {
            site_id: format!("s{}", i / 12),
            lat: 0.0,
            lon: 0.0,
            month: (i % 12) as u8 + 1,
            ghi: x[0],
            tamb: x[1],
            kt: x[2],
            target: y,
            provenance: Provenance::Synthetic,
        }
    }

    fn smooth_set(n: usize, scale: f64) -> TrainingSet {
        let mut rng = seeded_rng(99);
        let rows = (0..n)
            .map(|i| {
                let x = [rng.random_range(1.0..8.0), rng.random_range(-10.0..30.0), rng.random_range(0.3..0.75)];
                let y = scale * (30.0 * x[0] * (1.0 - 0.004 * (x[1] - 25.0)) + 40.0 * x[2]);
                row(i, x, y)
            })
            .collect();
        TrainingSet::new(rows)
    }

    #[test]
    fn default_topology_has_161_parameters() {
        assert_eq!(Network::param_count(&LAYER_SIZES), 161);
    }

    #[test]
    fn zero_network_returns_output_midpoint() {
        let net = Network::zeros(&LAYER_SIZES);
        let ib = Bounds { min: vec![0.0, -20.0, 0.0], max: vec![8.0, 40.0, 1.0] };
        let ob = Bounds { min: vec![10.0], max: vec![30.0] };
        let model = SurrogateModel::from_network(&net, ib.clone(), ob);
        assert_eq!(model.forward(&[3.0, 10.0, 0.5]).value, 20.0);
        assert_eq!(ib.normalize(0, 0.0), -1.0);
        assert_eq!(ib.normalize(1, -20.0), -1.0);
        assert_eq!(ib.normalize(2, 0.0), -1.0);
        assert_eq!(ib.normalize(2, 1.0), 1.0);
    }

    #[test]
    fn small_kt_perturbation_is_smooth() {
        let net = Network::random(&LAYER_SIZES, 3);
        let ib = Bounds { min: vec![0.0, -20.0, 0.0], max: vec![8.0, 40.0, 1.0] };
        let ob = Bounds { min: vec![0.0], max: vec![200.0] };
        let model = SurrogateModel::from_network(&net, ib, ob);
        let a = model.forward(&[4.0, 12.0, 0.5]).value;
        let b = model.forward(&[4.0, 12.0, 0.5 + 1e-9]).value;
        assert!((a - b).abs() < 1e-6 * a.abs() + 1e-9);
    }

    #[test]
    fn extrapolation_is_flagged() {
        let model = SurrogateModel::from_network(
            &Network::random(&LAYER_SIZES, 1),
            Bounds { min: vec![0.0, 0.0, 0.0], max: vec![1.0, 1.0, 1.0] },
            Bounds { min: vec![0.0], max: vec![1.0] },
        );
        assert!(!model.forward(&[0.5, 0.5, 0.5]).extrapolated);
        let p = model.forward(&[0.5, 1.5, 0.5]);
        assert!(p.extrapolated && p.value.is_finite());
    }

    #[test]
    fn degenerate_bounds_are_widened() {
        let b = Bounds::from_columns(&[vec![5.0], vec![5.0]]);
        assert!(b.min[0] < 5.0 && b.max[0] > 5.0);
        assert_eq!(b.normalize(0, 5.0), 0.0);
    }

    fn fd_jacobian(net: &Network, xs: &[Vec<f64>], ts: &[f64]) -> DMatrix<f64> {
        let h = 1e-5;
        let mut out = DMatrix::zeros(xs.len(), net.params.len());
        for k in 0..net.params.len() {
            let mut plus = net.clone();
            plus.params[k] += h;
            let mut minus = net.clone();
            minus.params[k] -= h;
            let d = (plus.residuals(xs, ts) - minus.residuals(xs, ts)) / (2.0 * h);
            out.set_column(k, &d);
        }
        out
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = seeded_rng(2024);
        for trial in 0..10u64 {
            let net = Network::random(&LAYER_SIZES, 100 + trial);
            let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let ts: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, jac) = net.residuals_and_jacobian(&xs, &ts);
            let fd = fd_jacobian(&net, &xs, &ts);
            let worst = jac
                .iter()
                .zip(fd.iter())
                .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-3))
                .fold(0.0, f64::max);
            assert!(worst < 1e-6, "trial {trial}: {worst}");
        }
    }

    #[test]
    fn data_gradient_vanishes_at_zero_residual_and_doubles_with_duplicates() {
        let net = Network::random(&LAYER_SIZES, 5);
        let xs: Vec<Vec<f64>> = vec![vec![0.1, -0.3, 0.7], vec![-0.5, 0.2, 0.0]];
        let exact: Vec<f64> = xs.iter().map(|x| net.output(x)).collect();
        let (res, jac) = net.residuals_and_jacobian(&xs, &exact);
        assert!(jac.tr_mul(&res).amax() == 0.0);

        let ts = vec![0.3, -0.2];
        let (r1, j1) = net.residuals_and_jacobian(&xs, &ts);
        let xs2: Vec<Vec<f64>> = xs.iter().chain(&xs).cloned().collect();
        let ts2: Vec<f64> = ts.iter().chain(&ts).copied().collect();
        let (r2, j2) = net.residuals_and_jacobian(&xs2, &ts2);
        let g1 = j1.tr_mul(&r1);
        let g2 = j2.tr_mul(&r2);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn training_fits_and_is_monotone() {
        let data = smooth_set(60, 1.0);
        let (model, report) = train(&data, 11, &TrainConfig::default()).unwrap();
        assert!(report.r2 > 0.999, "r2 {}", report.r2);
        assert!(!report.epochs.is_empty());
        for e in &report.epochs {
            assert!(e.objective_after <= e.objective_before);
            assert!((0.0..=161.0).contains(&e.gamma_eff));
        }
        assert!((0.0..=161.0).contains(&model.gamma_eff));
        assert_eq!(model.epochs_run, report.epochs.len());
    }

    #[test]
    fn training_is_deterministic_and_order_free() {
        let data = smooth_set(48, 1.0);
        let cfg = TrainConfig { max_epochs: 200, ..TrainConfig::default() };
        let (a, _) = train(&data, 4, &cfg).unwrap();
        let (b, _) = train(&data, 4, &cfg).unwrap();
        assert_eq!(a, b);
        let mut shuffled = data.clone();
        shuffled.rows.reverse();
        shuffled.rows.swap(3, 17);
        let (c, _) = train(&shuffled, 4, &cfg).unwrap();
        assert_eq!(a.weights, c.weights);
    }

    #[test]
    fn target_scale_is_absorbed_by_normalization() {
        let cfg = TrainConfig { max_epochs: 300, ..TrainConfig::default() };
        let (a, _) = train(&smooth_set(48, 1.0), 8, &cfg).unwrap();
        let (b, _) = train(&smooth_set(48, 10.0), 8, &cfg).unwrap();
        for x in [[2.0, 0.0, 0.4], [6.0, 20.0, 0.7], [4.5, 10.0, 0.55]] {
            let pa = a.forward(&x).value;
            let pb = b.forward(&x).value;
            assert!((pb - 10.0 * pa).abs() <= 1e-6 * pb.abs(), "{pa} {pb}");
        }
    }

    #[test]
    fn too_few_rows_and_invalid_rows() {
        let data = smooth_set(11, 1.0);
        assert_eq!(train(&data, 1, &TrainConfig::default()).unwrap_err(), TrainError::TooFewRows(11));
        let mut data = smooth_set(12, 1.0);
        data.rows[4].target = -1.0;
        assert!(matches!(train(&data, 1, &TrainConfig::default()), Err(TrainError::InvalidRow { index: 4, .. })));
    }

    #[test]
    fn json_round_trip_preserves_predictions() {
        let (model, _) =
            train(&smooth_set(36, 1.0), 2, &TrainConfig { max_epochs: 50, ..TrainConfig::default() }).unwrap();
        let back = SurrogateModel::from_json(&model.to_json()).unwrap();
        for x in [[2.0, 0.0, 0.4], [7.9, 29.0, 0.74]] {
            assert!((model.forward(&x).value - back.forward(&x).value).abs() <= 1e-12);
        }
        let v: serde_json::Value = serde_json::from_str(&model.to_json()).unwrap();
        for key in [
            "layer_sizes",
            "weights",
            "biases",
            "input_bounds",
            "output_bounds",
            "alpha",
            "beta",
            "gamma_eff",
            "seed",
            "epochs_run",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    fn flat_site(ghi: f64, tamb: f64, kt: f64) -> SiteClimate {
        let recs = (1..=12).map(|m| ClimateRecord { lat: 0.0, lon: 0.0, month: m, ghi, tamb, kt }).collect();
        SiteClimate::new(0.0, 0.0, recs).unwrap()
    }

    #[test]
    fn monthly_predictions_are_pointwise() {
        let (model, _) =
            train(&smooth_set(36, 1.0), 2, &TrainConfig { max_epochs: 50, ..TrainConfig::default() }).unwrap();
        let p = model.predict_monthly(&flat_site(5.0, 15.0, 0.55));
        assert!(p.monthly.iter().all(|&v| v == p.monthly[0]));
        assert_eq!(model.predict_annual(&flat_site(5.0, 15.0, 0.55)), p.monthly.iter().sum::<f64>());

        let base: Vec<(f64, f64, f64)> =
            (0..12).map(|i| (2.0 + 0.4 * i as f64, 25.0 - 2.0 * i as f64, 0.35 + 0.03 * i as f64)).collect();
        let site_of = |order: &[usize]| {
            let recs = order
                .iter()
                .enumerate()
                .map(|(m, &i)| ClimateRecord {
                    lat: 0.0,
                    lon: 0.0,
                    month: m as u8 + 1,
                    ghi: base[i].0,
                    tamb: base[i].1,
                    kt: base[i].2,
                })
                .collect();
            SiteClimate::new(0.0, 0.0, recs).unwrap()
        };
        let ident: Vec<usize> = (0..12).collect();
        let perm = [3, 7, 0, 11, 5, 1, 9, 2, 10, 4, 8, 6];
        let a = model.predict_monthly(&site_of(&ident));
        let b = model.predict_monthly(&site_of(&perm));
        for (m, &i) in perm.iter().enumerate() {
            assert_eq!(b.monthly[m], a.monthly[i]);
        }
        assert!((a.annual() - b.annual()).abs() < 1e-9);
    }

    #[test]
    fn negative_outputs_are_clipped_with_flag() {
        let mut net = Network::zeros(&LAYER_SIZES);
        let last = net.params.len() - 1;
        net.params[last] = -1.0;
        let model = SurrogateModel::from_network(
            &net,
            Bounds { min: vec![0.0, -30.0, 0.0], max: vec![10.0, 40.0, 1.0] },
            Bounds { min: vec![-5.0], max: vec![100.0] },
        );
        let p = model.predict_monthly(&flat_site(5.0, 15.0, 0.55));
        assert!(p.clipped);
        assert_eq!(p.monthly, [0.0; 12]);
    }
}
