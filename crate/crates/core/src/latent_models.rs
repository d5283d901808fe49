//! Analytic ground-truth Gaussian latent transition models.
//!
//! Every family is a conditional Gaussian `z^t ~ N(mu(lags, a), diag(var))`
//! with closed-form mean and variance. Cross-derivatives of the log-density
//! are obtained by central finite differences of the analytic gradient, and
//! the sufficient-influence / sufficient-variability conditions are verified
//! numerically as rank tests on stacked probes.

use ndarray::{Array1, Array2, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::graph_algebra::{count_ones, BinaryGraph};
use crate::linalg;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("family {0:?} needs {1} lagged latent vector(s), got {2}")]
    MissingLag(Family, usize, usize),
    #[error("operation requires a continuous-action family, got {0:?}")]
    ContinuousActionRequired(Family),
    #[error("operation requires a discrete-action family, got {0:?}")]
    DiscreteActionRequired(Family),
    #[error("exponential-family check with k = 1 requires a homoscedastic family, got {0:?}")]
    Heteroscedastic(Family),
    #[error("action outside the admissible set: {0}")]
    InvalidAction(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Graph(#[from] crate::graph_algebra::GraphError),
}

/// The ground-truth transition families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    ActionDiag,
    ActionNonDiag,
    ActionNonDiagLinear,
    ActionNonDiagHetero,
    TimeDiag,
    TimeNonDiag,
    TimeNonDiagLinear,
    TimeNonDiagHetero,
    ActionBlockDiag,
    ActionBlockNonDiag,
    TimeBlockDiag,
    TimeBlockNonDiag,
    RandomGraphAction,
    RandomGraphTime,
    /// Mean/variance-shift interventions with targets given by `G^a`
    /// (single-target when `G^a = I`).
    SingleTargetInterv,
    /// Interventions that suppress targeted components of a linear drift.
    MultiTargetIntervTime,
    /// Two-lag model `z^{t-1} + W(z^{t-2}) z^{t-1}` with polynomial `W`.
    NonMarkovW,
    /// Markovian polynomial drift on a lower-triangular graph.
    MarkovPoly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionKind {
    None,
    Continuous,
    Discrete,
}

impl Family {
    pub fn action_kind(self) -> ActionKind {
        use Family::*;
        match self {
            ActionDiag | ActionNonDiag | ActionNonDiagLinear | ActionNonDiagHetero
            | ActionBlockDiag | ActionBlockNonDiag | RandomGraphAction => ActionKind::Continuous,
            SingleTargetInterv | MultiTargetIntervTime => ActionKind::Discrete,
            TimeDiag | TimeNonDiag | TimeNonDiagLinear | TimeNonDiagHetero | TimeBlockDiag
            | TimeBlockNonDiag | RandomGraphTime | NonMarkovW | MarkovPoly => ActionKind::None,
        }
    }

    /// Number of lagged latent vectors the mean function reads.
    pub fn lags_required(self) -> usize {
        use Family::*;
        match self {
            ActionDiag | ActionNonDiag | ActionNonDiagLinear | ActionNonDiagHetero
            | ActionBlockDiag | ActionBlockNonDiag | RandomGraphAction | SingleTargetInterv => 0,
            NonMarkovW => 2,
            _ => 1,
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        use Family::*;
        match name {
            "ActionDiag" => Some(ActionDiag),
            "ActionNonDiag" => Some(ActionNonDiag),
            "ActionNonDiagLinear" | "ActionNonDiagNoSuffInf" => Some(ActionNonDiagLinear),
            "ActionNonDiagHetero" => Some(ActionNonDiagHetero),
            "TimeDiag" => Some(TimeDiag),
            "TimeNonDiag" => Some(TimeNonDiag),
            "TimeNonDiagLinear" | "TimeNonDiagNoSuffInf" => Some(TimeNonDiagLinear),
            "TimeNonDiagHetero" => Some(TimeNonDiagHetero),
            "ActionBlockDiag" => Some(ActionBlockDiag),
            "ActionBlockNonDiag" => Some(ActionBlockNonDiag),
            "TimeBlockDiag" => Some(TimeBlockDiag),
            "TimeBlockNonDiag" => Some(TimeBlockNonDiag),
            "RandomGraphAction" => Some(RandomGraphAction),
            "RandomGraphTime" => Some(RandomGraphTime),
            "SingleTargetInterv" => Some(SingleTargetInterv),
            "MultiTargetIntervTime" => Some(MultiTargetIntervTime),
            "NonMarkovW" => Some(NonMarkovW),
            "MarkovPoly" => Some(MarkovPoly),
            _ => None,
        }
    }
}

/// A fully parameterized ground-truth transition model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub family: Family,
    pub graph: BinaryGraph,
    /// `sigma_z^2` for homoscedastic families; the observational variance for
    /// intervention families.
    pub base_variance: f64,
    /// Dense weight matrix of the linear families and the drift of
    /// `MultiTargetIntervTime` (already masked by the graph).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<Array2<f64>>,
    /// Intervention mean shifts (`SingleTargetInterv`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift_mean: Option<Array1<f64>>,
    /// Intervention variance shifts (`SingleTargetInterv`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift_var: Option<Array1<f64>>,
}

// Frequency/phase pattern of the sine/cosine rows, 0-indexed row r:
// frequency (r + 3) / pi, phase r.
fn freq(r: usize) -> f64 {
    (r as f64 + 3.0) / PI
}

fn phase(r: usize) -> f64 {
    r as f64
}

fn sin_row(g: &Array2<u8>, r: usize, x: &ArrayView1<f64>) -> f64 {
    let (f, p) = (freq(r), phase(r));
    (0..g.ncols())
        .filter(|&c| g[[r, c]] == 1)
        .map(|c| (f * x[c] + p).sin())
        .sum()
}

fn cos_row(g: &Array2<u8>, r: usize, x: &ArrayView1<f64>) -> f64 {
    let (f, p) = (freq(r), phase(r));
    (0..g.ncols())
        .filter(|&c| g[[r, c]] == 1)
        .map(|c| (f * x[c] + p).cos())
        .sum()
}

// --- Standard graph shapes -------------------------------------------------

/// Identity graph.
pub fn diag_graph(d: usize) -> Array2<u8> {
    Array2::from_shape_fn((d, d), |(i, j)| u8::from(i == j))
}

/// Circulant double diagonal: self edge, edge from the previous column, and a
/// corner edge closing the cycle.
pub fn double_diagonal(d: usize) -> Array2<u8> {
    let mut g = Array2::zeros((d, d));
    for i in 0..d {
        g[[i, i]] = 1;
        g[[i, (i + d - 1) % d]] = 1;
    }
    g
}

/// Full lower-triangular graph including the diagonal.
pub fn lower_triangular(d: usize) -> Array2<u8> {
    Array2::from_shape_fn((d, d), |(i, j)| u8::from(j <= i))
}

/// Action block graph: consecutive pairs of latents share one action column.
pub fn block_action(d_z: usize, non_diag: bool) -> Result<Array2<u8>, LatentError> {
    if !d_z.is_multiple_of(2) || d_z < 4 {
        return Err(LatentError::InvalidSpec(
            "block action graphs need even d_z >= 4".into(),
        ));
    }
    let d_a = d_z / 2;
    let mut g = Array2::zeros((d_z, d_a));
    for l in 0..d_a {
        g[[2 * l, l]] = 1;
        g[[2 * l + 1, l]] = 1;
    }
    if non_diag {
        g[[d_z - 2, 0]] = 1;
        g[[d_z - 1, 0]] = 1;
    }
    Ok(g)
}

/// Time block graph: 2x2 all-ones blocks on the diagonal; the non-diagonal
/// variant couples the first and last blocks (and a middle block into the
/// last one when distinct).
pub fn block_time(d_z: usize, non_diag: bool) -> Result<Array2<u8>, LatentError> {
    if !d_z.is_multiple_of(2) || d_z < 4 {
        return Err(LatentError::InvalidSpec(
            "block time graphs need even d_z >= 4".into(),
        ));
    }
    let blocks = d_z / 2;
    let mut g = Array2::zeros((d_z, d_z));
    let fill = |bi: usize, bj: usize, g: &mut Array2<u8>| {
        for i in 0..2 {
            for j in 0..2 {
                g[[2 * bi + i, 2 * bj + j]] = 1;
            }
        }
    };
    for b in 0..blocks {
        fill(b, b, &mut g);
    }
    if non_diag {
        fill(0, blocks - 1, &mut g);
        fill(blocks - 1, 0, &mut g);
        let mid = (blocks - 1) / 2;
        if mid != 0 && mid != blocks - 1 {
            fill(blocks - 1, mid, &mut g);
        }
    }
    Ok(g)
}

/// Bernoulli(p) edges; `force_diag` pins self-loops on.
pub fn random_graph(rows: usize, cols: usize, p: f64, force_diag: bool, seed: u64) -> Array2<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Array2::from_shape_fn((rows, cols), |_| u8::from(rng.gen_bool(p)));
    if force_diag {
        for i in 0..rows.min(cols) {
            g[[i, i]] = 1;
        }
    }
    g
}

fn masked_random_weight(mask: &Array2<u8>, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn(mask.dim(), |(i, j)| {
        let v: f64 = rng.sample(StandardNormal);
        if mask[[i, j]] == 1 {
            v
        } else {
            0.0
        }
    })
}

impl TransitionSpec {
    pub const DEFAULT_VARIANCE: f64 = 1e-4;

    pub fn d_z(&self) -> usize {
        self.graph.d_z()
    }

    pub fn d_a(&self) -> usize {
        self.graph.d_a()
    }

    /// True when the conditional variance does not depend on the
    /// conditioning variables (`k = 1` exponential-family representation).
    pub fn homoscedastic(&self) -> bool {
        match self.family {
            Family::ActionNonDiagHetero | Family::TimeNonDiagHetero => false,
            Family::SingleTargetInterv => self
                .shift_var
                .as_ref()
                .is_none_or(|d| d.iter().all(|&v| v == 0.0)),
            _ => true,
        }
    }

    /// Dimension of the sufficient statistic per coordinate.
    pub fn k(&self) -> usize {
        if self.homoscedastic() {
            1
        } else {
            2
        }
    }

    // --- constructors -------------------------------------------------

    pub fn action_diag(d_z: usize) -> Self {
        Self {
            family: Family::ActionDiag,
            graph: BinaryGraph::action_only(diag_graph(d_z)).unwrap(),
            base_variance: Self::DEFAULT_VARIANCE,
            weight: None,
            shift_mean: None,
            shift_var: None,
        }
    }

    pub fn action_non_diag(d_z: usize) -> Self {
        Self {
            family: Family::ActionNonDiag,
            graph: BinaryGraph::action_only(double_diagonal(d_z)).unwrap(),
            base_variance: Self::DEFAULT_VARIANCE,
            weight: None,
            shift_mean: None,
            shift_var: None,
        }
    }

    pub fn action_non_diag_linear(d_z: usize, seed: u64) -> Self {
        let ga = double_diagonal(d_z);
        let weight = masked_random_weight(&ga, seed);
        Self {
            family: Family::ActionNonDiagLinear,
            graph: BinaryGraph::action_only(ga).unwrap(),
            base_variance: Self::DEFAULT_VARIANCE,
            weight: Some(weight),
            shift_mean: None,
            shift_var: None,
        }
    }

    /// Linear action family on an explicit graph and weight matrix; the
    /// weight is masked by the graph.
    pub fn linear_action_with_weight(
        ga: Array2<u8>,
        weight: Array2<f64>,
    ) -> Result<Self, LatentError> {
        if weight.dim() != ga.dim() {
            return Err(LatentError::Shape("weight must match ga".into()));
        }
        let mut w = weight;
        for ((i, j), v) in w.indexed_iter_mut() {
            if ga[[i, j]] == 0 {
                *v = 0.0;
            }
        }
        Ok(Self {
            family: Family::ActionNonDiagLinear,
            graph: BinaryGraph::action_only(ga)?,
            base_variance: Self::DEFAULT_VARIANCE,
            weight: Some(w),
            shift_mean: None,
            shift_var: None,
        })
    }

    pub fn action_non_diag_hetero(d_z: usize) -> Self {
        Self {
            family: Family::ActionNonDiagHetero,
            ..Self::action_non_diag(d_z)
        }
    }

    pub fn time_diag(d_z: usize) -> Self {
        Self {
            family: Family::TimeDiag,
            graph: BinaryGraph::time_only(diag_graph(d_z)).unwrap(),
            base_variance: Self::DEFAULT_VARIANCE,
            weight: None,
            shift_mean: None,
            shift_var: None,
        }
    }

    pub fn time_non_diag(d_z: usize) -> Self {
        Self {
            family: Family::TimeNonDiag,
            graph: BinaryGraph::time_only(lower_triangular(d_z)).unwrap(),
            base_variance: Self::DEFAULT_VARIANCE,
            weight: None,
            shift_mean: None,
            shift_var: None,
        }
    }

    pub fn time_non_diag_linear(d_z: usize, seed: u64) -> Self {
        let gz = lower_triangular(d_z);
        let weight = masked_random_weight(&gz, seed);
        Self {
            family: Family::TimeNonDiagLinear,
            graph: BinaryGraph::time_only(gz).unwrap(),
            base_variance: Self::DEFAULT_VARIANCE,
            weight: Some(weight),
            shift_mean: None,
            shift_var: None,
        }
    }

    pub fn time_non_diag_hetero(d_z: usize) -> Self {
        Self {
            family: Family::TimeNonDiagHetero,
            ..Self::time_non_diag(d_z)
        }
    }

    pub fn action_block(d_z: usize, non_diag: bool) -> Result<Self, LatentError> {
        Ok(Self {
            family: if non_diag {
                Family::ActionBlockNonDiag
            } else {
                Family::ActionBlockDiag
            },
            graph: BinaryGraph::action_only(block_action(d_z, non_diag)?).unwrap(),
            base_variance: Self::DEFAULT_VARIANCE,
            weight: None,
            shift_mean: None,
            shift_var: None,
        })
    }

    pub fn time_block(d_z: usize, non_diag: bool) -> Result<Self, LatentError> {
        Ok(Self {
            family: if non_diag {
                Family::TimeBlockNonDiag
            } else {
                Family::TimeBlockDiag
            },
            graph: BinaryGraph::time_only(block_time(d_z, non_diag)?).unwrap(),
            base_variance: Self::DEFAULT_VARIANCE,
            weight: None,
            shift_mean: None,
            shift_var: None,
        })
    }

    pub fn random_graph_action(d_z: usize, d_a: usize, p: f64, seed: u64) -> Self {
        Self {
            family: Family::RandomGraphAction,
            graph: BinaryGraph::action_only(random_graph(d_z, d_a, p, false, seed)).unwrap(),
            base_variance: Self::DEFAULT_VARIANCE,
            weight: None,
            shift_mean: None,
            shift_var: None,
        }
    }

    pub fn random_graph_time(d_z: usize, p: f64, seed: u64) -> Self {
        Self {
            family: Family::RandomGraphTime,
            graph: BinaryGraph::time_only(random_graph(d_z, d_z, p, true, seed)).unwrap(),
            base_variance: Self::DEFAULT_VARIANCE,
            weight: None,
            shift_mean: None,
            shift_var: None,
        }
    }

    /// Mean/variance-shift interventions. `mu` and `delta` are per-coordinate
    /// shifts applied to the targets of the active intervention; the
    /// observational distribution is `N(0, I)`.
    pub fn single_target_interv(
        ga: Array2<u8>,
        mu: Array1<f64>,
        delta: Array1<f64>,
    ) -> Result<Self, LatentError> {
        let d_z = ga.nrows();
        if mu.len() != d_z || delta.len() != d_z {
            return Err(LatentError::Shape("mu/delta must have length d_z".into()));
        }
        if delta.iter().any(|&d| 1.0 + d <= 0.0) {
            return Err(LatentError::InvalidSpec(
                "1 + delta_i must stay positive".into(),
            ));
        }
        Ok(Self {
            family: Family::SingleTargetInterv,
            graph: BinaryGraph::action_only(ga)?,
            base_variance: 1.0,
            weight: None,
            shift_mean: Some(mu),
            shift_var: Some(delta),
        })
    }

    /// Interventions that suppress targeted components of the drift
    /// `g(z) = W z`; `W` is sampled on the support of `gz` and resampled
    /// until invertible.
    pub fn multi_target_interv_time(
        gz: Array2<u8>,
        ga: Array2<u8>,
        seed: u64,
    ) -> Result<Self, LatentError> {
        let d_z = gz.nrows();
        if (0..d_z).any(|i| gz[[i, i]] != 1) {
            return Err(LatentError::InvalidSpec(
                "MultiTargetIntervTime requires self-loops in gz".into(),
            ));
        }
        let mut weight = None;
        for attempt in 0..100u64 {
            let w = masked_random_weight(&gz, seed.wrapping_add(attempt));
            let scale = w.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
            if linalg::determinant(&w.view()).abs() > 1e-6 * scale.powi(d_z as i32) {
                weight = Some(w);
                break;
            }
        }
        let weight = weight.ok_or_else(|| {
            LatentError::InvalidSpec("could not sample an invertible masked drift".into())
        })?;
        Ok(Self {
            family: Family::MultiTargetIntervTime,
            graph: BinaryGraph::new(gz, ga)?,
            base_variance: Self::DEFAULT_VARIANCE,
            weight: Some(weight),
            shift_mean: None,
            shift_var: None,
        })
    }

    /// Two-lag drift `z^{t-1} + W(z^{t-2}) z^{t-1}` with
    /// `W(z)[i, j] = z_i^{i - j + 1}` on the (lower-triangular) support.
    pub fn non_markov_w(gz: Array2<u8>) -> Result<Self, LatentError> {
        validate_lower_triangular_with_diag(&gz)?;
        Ok(Self {
            family: Family::NonMarkovW,
            graph: BinaryGraph::time_only(gz)?,
            base_variance: Self::DEFAULT_VARIANCE,
            weight: None,
            shift_mean: None,
            shift_var: None,
        })
    }

    /// Markovian polynomial drift with terms `z_j^{i-j+2} / (i-j+2)` per edge.
    pub fn markov_poly(d_z: usize) -> Self {
        Self {
            family: Family::MarkovPoly,
            graph: BinaryGraph::time_only(lower_triangular(d_z)).unwrap(),
            base_variance: Self::DEFAULT_VARIANCE,
            weight: None,
            shift_mean: None,
            shift_var: None,
        }
    }

    pub fn with_base_variance(mut self, v: f64) -> Self {
        assert!(v > 0.0);
        self.base_variance = v;
        self
    }

    /// Builds a spec from a family name and dimensions, with the default
    /// parameterization of each family. `edge_prob` feeds the random-graph
    /// families, `param_seed` the sampled weights.
    pub fn from_family(
        family: Family,
        d_z: usize,
        d_a: usize,
        edge_prob: f64,
        param_seed: u64,
    ) -> Result<Self, LatentError> {
        use Family::*;
        let want_da = |expected: usize| -> Result<(), LatentError> {
            if d_a != expected {
                Err(LatentError::InvalidSpec(format!(
                    "family {family:?} with d_z = {d_z} requires d_a = {expected}, got {d_a}"
                )))
            } else {
                Ok(())
            }
        };
        match family {
            ActionDiag => {
                want_da(d_z)?;
                Ok(Self::action_diag(d_z))
            }
            ActionNonDiag => {
                want_da(d_z)?;
                Ok(Self::action_non_diag(d_z))
            }
            ActionNonDiagLinear => {
                want_da(d_z)?;
                Ok(Self::action_non_diag_linear(d_z, param_seed))
            }
            ActionNonDiagHetero => {
                want_da(d_z)?;
                Ok(Self::action_non_diag_hetero(d_z))
            }
            TimeDiag => {
                want_da(0)?;
                Ok(Self::time_diag(d_z))
            }
            TimeNonDiag => {
                want_da(0)?;
                Ok(Self::time_non_diag(d_z))
            }
            TimeNonDiagLinear => {
                want_da(0)?;
                Ok(Self::time_non_diag_linear(d_z, param_seed))
            }
            TimeNonDiagHetero => {
                want_da(0)?;
                Ok(Self::time_non_diag_hetero(d_z))
            }
            ActionBlockDiag => {
                want_da(d_z / 2)?;
                Self::action_block(d_z, false)
            }
            ActionBlockNonDiag => {
                want_da(d_z / 2)?;
                Self::action_block(d_z, true)
            }
            TimeBlockDiag => {
                want_da(0)?;
                Self::time_block(d_z, false)
            }
            TimeBlockNonDiag => {
                want_da(0)?;
                Self::time_block(d_z, true)
            }
            RandomGraphAction => Ok(Self::random_graph_action(d_z, d_a, edge_prob, param_seed)),
            RandomGraphTime => {
                want_da(0)?;
                Ok(Self::random_graph_time(d_z, edge_prob, param_seed))
            }
            SingleTargetInterv => {
                want_da(d_z)?;
                // Unit mean shifts, unchanged variances.
                Self::single_target_interv(diag_graph(d_z), Array1::ones(d_z), Array1::zeros(d_z))
            }
            MultiTargetIntervTime => {
                want_da(d_z)?;
                Self::multi_target_interv_time(
                    lower_triangular(d_z),
                    double_diagonal(d_z),
                    param_seed,
                )
            }
            NonMarkovW => {
                want_da(0)?;
                Self::non_markov_w(lower_triangular(d_z))
            }
            MarkovPoly => {
                want_da(0)?;
                Ok(Self::markov_poly(d_z))
            }
        }
    }

    // --- evaluation -----------------------------------------------------

    fn check_inputs(
        &self,
        lags: &[ArrayView1<f64>],
        a: &ArrayView1<f64>,
    ) -> Result<(), LatentError> {
        let need = self.family.lags_required();
        if lags.len() < need {
            return Err(LatentError::MissingLag(self.family, need, lags.len()));
        }
        for lag in lags.iter().take(need.max(usize::from(!lags.is_empty()))) {
            if lag.len() != self.d_z() {
                return Err(LatentError::Shape(format!(
                    "lag has length {}, expected {}",
                    lag.len(),
                    self.d_z()
                )));
            }
        }
        if a.len() != self.d_a() {
            return Err(LatentError::Shape(format!(
                "action has length {}, expected {}",
                a.len(),
                self.d_a()
            )));
        }
        Ok(())
    }

    /// Conditional mean of `z^t`.
    pub fn mean(
        &self,
        lags: &[ArrayView1<f64>],
        a: &ArrayView1<f64>,
    ) -> Result<Array1<f64>, LatentError> {
        self.check_inputs(lags, a)?;
        let d_z = self.d_z();
        use Family::*;
        let mu = match self.family {
            ActionDiag => Array1::from_shape_fn(d_z, |i| a[i].sin()),
            ActionNonDiag | ActionNonDiagHetero | ActionBlockDiag | ActionBlockNonDiag
            | RandomGraphAction => Array1::from_shape_fn(d_z, |i| sin_row(&self.graph.ga, i, a)),
            ActionNonDiagLinear => {
                let w = self
                    .weight
                    .as_ref()
                    .expect("linear family carries a weight");
                w.dot(a)
            }
            TimeDiag => {
                let z = &lags[0];
                Array1::from_shape_fn(d_z, |i| z[i] + 0.5 * z[i].sin())
            }
            TimeNonDiag | TimeNonDiagHetero | TimeBlockDiag | TimeBlockNonDiag
            | RandomGraphTime => {
                let z = &lags[0];
                Array1::from_shape_fn(d_z, |i| z[i] + 0.5 * sin_row(&self.graph.gz, i, z))
            }
            TimeNonDiagLinear => {
                let z = &lags[0];
                let w = self
                    .weight
                    .as_ref()
                    .expect("linear family carries a weight");
                z.to_owned() + w.dot(z).mapv(|v| 0.5 * v)
            }
            SingleTargetInterv => {
                let mu = self.shift_mean.as_ref().expect("intervention mean shifts");
                let target = self.target_indicator(a)?;
                Array1::from_shape_fn(d_z, |i| mu[i] * target[i])
            }
            MultiTargetIntervTime => {
                let z = &lags[0];
                let w = self.weight.as_ref().expect("drift weight");
                let target = self.target_indicator(a)?;
                let drift = w.dot(z);
                Array1::from_shape_fn(d_z, |i| z[i] + (1.0 - target[i]) * drift[i])
            }
            NonMarkovW => {
                let (z1, z2) = (&lags[0], &lags[1]);
                let mut mu = z1.to_owned();
                for i in 0..d_z {
                    for j in 0..=i {
                        if self.graph.gz[[i, j]] == 1 {
                            mu[i] += z2[i].powi((i - j + 1) as i32) * z1[j];
                        }
                    }
                }
                mu
            }
            MarkovPoly => {
                let z = &lags[0];
                let mut mu = z.to_owned();
                for i in 0..d_z {
                    for j in 0..=i {
                        if self.graph.gz[[i, j]] == 1 && i != j {
                            let e = (i - j + 2) as i32;
                            mu[i] += z[j].powi(e) / f64::from(e);
                        } else if self.graph.gz[[i, j]] == 1 {
                            mu[i] += z[j].powi(2) / 2.0;
                        }
                    }
                }
                mu
            }
        };
        Ok(mu)
    }

    /// `G^a a` as a dense indicator of intervened coordinates.
    fn target_indicator(&self, a: &ArrayView1<f64>) -> Result<Array1<f64>, LatentError> {
        let ga = &self.graph.ga;
        let mut t = Array1::zeros(self.d_z());
        for i in 0..self.d_z() {
            for l in 0..self.d_a() {
                t[i] += f64::from(ga[[i, l]]) * a[l];
            }
        }
        Ok(t)
    }

    /// Conditional per-coordinate variance of `z^t`.
    pub fn variance(
        &self,
        lags: &[ArrayView1<f64>],
        a: &ArrayView1<f64>,
    ) -> Result<Array1<f64>, LatentError> {
        self.check_inputs(lags, a)?;
        let d_z = self.d_z();
        use Family::*;
        let var = match self.family {
            ActionNonDiagHetero => {
                let scale = 1.0 / (10.0 * self.d_a() as f64);
                Array1::from_shape_fn(d_z, |i| scale * cos_row(&self.graph.ga, i, a).exp())
            }
            TimeNonDiagHetero => {
                let z = &lags[0];
                let scale = 1.0 / (10.0 * d_z as f64);
                Array1::from_shape_fn(d_z, |i| scale * cos_row(&self.graph.gz, i, z).exp())
            }
            SingleTargetInterv => {
                let delta = self
                    .shift_var
                    .as_ref()
                    .expect("intervention variance shifts");
                let target = self.target_indicator(a)?;
                let var = Array1::from_shape_fn(d_z, |i| self.base_variance + delta[i] * target[i]);
                if var.iter().any(|&v| v <= 0.0) {
                    return Err(LatentError::InvalidAction(
                        "variance shift makes a coordinate non-positive".into(),
                    ));
                }
                var
            }
            _ => Array1::from_elem(d_z, self.base_variance),
        };
        Ok(var)
    }

    /// Log of the conditional Gaussian density at `z`.
    pub fn log_density(
        &self,
        z: &ArrayView1<f64>,
        lags: &[ArrayView1<f64>],
        a: &ArrayView1<f64>,
    ) -> Result<f64, LatentError> {
        let mu = self.mean(lags, a)?;
        let var = self.variance(lags, a)?;
        if z.len() != mu.len() {
            return Err(LatentError::Shape("z has wrong length".into()));
        }
        let mut q = 0.0;
        for i in 0..z.len() {
            q += -0.5 * (2.0 * PI * var[i]).ln() - (z[i] - mu[i]).powi(2) / (2.0 * var[i]);
        }
        Ok(q)
    }

    /// Gradient of the log-density w.r.t. `z`: `-(z - mu) / var`.
    pub fn log_density_grad_z(
        &self,
        z: &ArrayView1<f64>,
        lags: &[ArrayView1<f64>],
        a: &ArrayView1<f64>,
    ) -> Result<Array1<f64>, LatentError> {
        let mu = self.mean(lags, a)?;
        let var = self.variance(lags, a)?;
        if z.len() != mu.len() {
            return Err(LatentError::Shape("z has wrong length".into()));
        }
        Ok(Array1::from_shape_fn(z.len(), |i| -(z[i] - mu[i]) / var[i]))
    }

    /// Cross-derivative matrix d^2 log p / (dz da), by central differences of
    /// the analytic gradient in `a`. Support is contained in `G^a`.
    pub fn hessian_z_a(
        &self,
        z: &ArrayView1<f64>,
        lags: &[ArrayView1<f64>],
        a: &ArrayView1<f64>,
        step: f64,
    ) -> Result<Array2<f64>, LatentError> {
        if self.family.action_kind() != ActionKind::Continuous {
            return Err(LatentError::ContinuousActionRequired(self.family));
        }
        let (d_z, d_a) = (self.d_z(), self.d_a());
        let mut h = Array2::zeros((d_z, d_a));
        let mut a_pert = a.to_owned();
        for l in 0..d_a {
            a_pert[l] = a[l] + step;
            let plus = self.log_density_grad_z(z, lags, &a_pert.view())?;
            a_pert[l] = a[l] - step;
            let minus = self.log_density_grad_z(z, lags, &a_pert.view())?;
            a_pert[l] = a[l];
            for i in 0..d_z {
                h[[i, l]] = (plus[i] - minus[i]) / (2.0 * step);
            }
        }
        Ok(h)
    }

    /// Cross-derivative matrix d^2 log p / (dz dz^{t-tau}), by central
    /// differences of the analytic gradient in lag `tau` (1-based). Support
    /// is contained in `G^z`.
    pub fn hessian_z_zprev(
        &self,
        z: &ArrayView1<f64>,
        lags: &[ArrayView1<f64>],
        a: &ArrayView1<f64>,
        tau: usize,
        step: f64,
    ) -> Result<Array2<f64>, LatentError> {
        let need = self.family.lags_required();
        if tau == 0 || tau > need {
            return Err(LatentError::MissingLag(self.family, tau, need));
        }
        let d_z = self.d_z();
        let mut h = Array2::zeros((d_z, d_z));
        let mut lag_owned: Vec<Array1<f64>> = lags.iter().map(|l| l.to_owned()).collect();
        let base = lag_owned[tau - 1].clone();
        for j in 0..d_z {
            lag_owned[tau - 1][j] = base[j] + step;
            let views: Vec<ArrayView1<f64>> = lag_owned.iter().map(|l| l.view()).collect();
            let plus = self.log_density_grad_z(z, &views, a)?;
            lag_owned[tau - 1][j] = base[j] - step;
            let views: Vec<ArrayView1<f64>> = lag_owned.iter().map(|l| l.view()).collect();
            let minus = self.log_density_grad_z(z, &views, a)?;
            lag_owned[tau - 1][j] = base[j];
            for i in 0..d_z {
                h[[i, j]] = (plus[i] - minus[i]) / (2.0 * step);
            }
        }
        Ok(h)
    }

    /// Partial difference of the gradient between actions `a + eps e_l` and
    /// `a`. Only defined for discrete-action families; both actions must be
    /// admissible (at most one active intervention, positive variances).
    pub fn partial_difference_grad(
        &self,
        z: &ArrayView1<f64>,
        lags: &[ArrayView1<f64>],
        a_base: &ArrayView1<f64>,
        l: usize,
        eps: f64,
    ) -> Result<Array1<f64>, LatentError> {
        if self.family.action_kind() != ActionKind::Discrete {
            return Err(LatentError::DiscreteActionRequired(self.family));
        }
        let mut shifted = a_base.to_owned();
        shifted[l] += eps;
        for a in [a_base.view(), shifted.view()] {
            if a.iter().filter(|&&v| v != 0.0).count() > 1 {
                return Err(LatentError::InvalidAction(
                    "at most one intervention may be active".into(),
                ));
            }
        }
        let at_shifted = self.log_density_grad_z(z, lags, &shifted.view())?;
        let at_base = self.log_density_grad_z(z, lags, a_base)?;
        Ok(at_shifted - at_base)
    }

    /// Natural-parameter vector of the exponential-family representation:
    /// `mu / sigma` per coordinate when `k = 1`, `(mu/var, -1/(2 var))`
    /// interleaved per coordinate when `k = 2`.
    pub fn natural_params(
        &self,
        lags: &[ArrayView1<f64>],
        a: &ArrayView1<f64>,
    ) -> Result<Array1<f64>, LatentError> {
        let mu = self.mean(lags, a)?;
        let var = self.variance(lags, a)?;
        let d_z = self.d_z();
        if self.k() == 1 {
            let sigma = self.base_variance.sqrt();
            Ok(mu.mapv(|m| m / sigma))
        } else {
            let mut lam = Array1::zeros(2 * d_z);
            for i in 0..d_z {
                lam[2 * i] = mu[i] / var[i];
                lam[2 * i + 1] = -1.0 / (2.0 * var[i]);
            }
            Ok(lam)
        }
    }
}

/// Draws `z^t ~ N(mean(lags, a), diag(variance(lags, a)))`.
pub fn sample_transition(
    spec: &TransitionSpec,
    lags: &[ArrayView1<f64>],
    a: &ArrayView1<f64>,
    rng: &mut impl Rng,
) -> Result<Array1<f64>, LatentError> {
    let mu = spec.mean(lags, a)?;
    let var = spec.variance(lags, a)?;
    Ok(Array1::from_shape_fn(mu.len(), |i| {
        mu[i] + var[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
    }))
}

fn validate_lower_triangular_with_diag(gz: &Array2<u8>) -> Result<(), LatentError> {
    let d = gz.nrows();
    for i in 0..d {
        if gz[[i, i]] != 1 {
            return Err(LatentError::InvalidSpec("graph needs self-loops".into()));
        }
        for j in i + 1..d {
            if gz[[i, j]] != 0 {
                return Err(LatentError::InvalidSpec(
                    "graph must be lower-triangular".into(),
                ));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Influence / variability checks
// ---------------------------------------------------------------------------

pub const DEFAULT_FD_STEP: f64 = 1e-4;
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

/// Rank evidence for one unit (an action column, or the whole `G^z` span).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnitRank {
    pub unit: String,
    pub required: usize,
    pub achieved: usize,
    /// Relative singular value at the required rank position
    /// (`sv[required-1] / sv[0]`); 1.0 when nothing is required.
    pub margin: f64,
    pub singular_values: Vec<f64>,
    pub pass: bool,
}

/// Outcome of a sufficient-influence or sufficient-variability check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub target: String,
    pub pass: bool,
    pub tol: f64,
    pub n_probe: usize,
    pub seed: u64,
    pub units: Vec<UnitRank>,
}

fn unit_from_rows(unit: String, rows: Array2<f64>, required: usize, tol: f64) -> UnitRank {
    if required == 0 {
        return UnitRank {
            unit,
            required: 0,
            achieved: 0,
            margin: 1.0,
            singular_values: vec![],
            pass: true,
        };
    }
    let (achieved, sv) = linalg::rank_with_tol(&rows.view(), tol);
    let smax = sv.first().copied().unwrap_or(0.0);
    let margin = if smax > 0.0 && required <= sv.len() {
        sv[required - 1] / smax
    } else {
        0.0
    };
    UnitRank {
        unit,
        required,
        achieved,
        margin,
        singular_values: sv,
        pass: achieved >= required,
    }
}

fn report(
    target: &str,
    units: Vec<UnitRank>,
    tol: f64,
    n_probe: usize,
    seed: u64,
) -> InfluenceReport {
    InfluenceReport {
        target: target.into(),
        pass: units.iter().all(|u| u.pass),
        tol,
        n_probe,
        seed,
        units,
    }
}

fn gauss_vec(d: usize, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.sample(StandardNormal))
}

fn uniform_action(d: usize, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.gen_range(-2.0..2.0))
}

/// One-hot intervention index set `{0, e_1, ..., e_{d_a}}`.
pub fn one_hot_action_set(d_a: usize) -> Vec<Array1<f64>> {
    let mut set = vec![Array1::zeros(d_a)];
    for l in 0..d_a {
        let mut a = Array1::zeros(d_a);
        a[l] = 1.0;
        set.push(a);
    }
    set
}

fn probe_lags(spec: &TransitionSpec, rng: &mut impl Rng) -> Vec<Array1<f64>> {
    (0..spec.family.lags_required())
        .map(|_| gauss_vec(spec.d_z(), rng))
        .collect()
}

fn views<'a>(lags: &'a [Array1<f64>]) -> Vec<ArrayView1<'a, f64>> {
    lags.iter().map(|l| l.view()).collect()
}

/// Sufficient influence of a continuous action: for each action column, the
/// probed Hessian columns restricted to the column's children must span the
/// full child space.
pub fn check_influence_a_cont(
    spec: &TransitionSpec,
    n_probe: usize,
    tol: f64,
    seed: u64,
) -> Result<InfluenceReport, LatentError> {
    if spec.family.action_kind() != ActionKind::Continuous {
        return Err(LatentError::ContinuousActionRequired(spec.family));
    }
    let mut z_rng = ChaCha8Rng::seed_from_u64(seed);
    let z = gauss_vec(spec.d_z(), &mut z_rng);
    let mut units = Vec::new();
    for l in 0..spec.d_a() {
        let children = spec.graph.children_a(l);
        let required = children.len();
        let n = if n_probe == 0 {
            4 * required.max(1)
        } else {
            n_probe
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(l as u64 + 1);
        let mut rows = Array2::zeros((n, required.max(1)));
        for r in 0..n {
            let lags = probe_lags(spec, &mut rng);
            let a = uniform_action(spec.d_a(), &mut rng);
            let h = spec.hessian_z_a(&z.view(), &views(&lags), &a.view(), DEFAULT_FD_STEP)?;
            for (c, &i) in children.iter().enumerate() {
                rows[[r, c]] = h[[i, l]];
            }
        }
        units.push(unit_from_rows(format!("a[{l}]"), rows, required, tol));
    }
    Ok(report(
        "sufficient influence of a (continuous)",
        units,
        tol,
        n_probe,
        seed,
    ))
}

/// Sufficient influence of a discrete action: partial-difference vectors per
/// action column must span the column's child space.
pub fn check_influence_a_disc(
    spec: &TransitionSpec,
    action_set: &[Array1<f64>],
    n_probe: usize,
    tol: f64,
    seed: u64,
) -> Result<InfluenceReport, LatentError> {
    if spec.family.action_kind() != ActionKind::Discrete {
        return Err(LatentError::DiscreteActionRequired(spec.family));
    }
    let mut z_rng = ChaCha8Rng::seed_from_u64(seed);
    let z = gauss_vec(spec.d_z(), &mut z_rng);
    let zero = Array1::zeros(spec.d_a());
    let mut units = Vec::new();
    for l in 0..spec.d_a() {
        let children = spec.graph.children_a(l);
        let required = children.len();
        // Admissible one-hot shifts on column l found in the action set.
        let eps_values: Vec<f64> = action_set
            .iter()
            .filter(|a| a[l] != 0.0 && a.iter().enumerate().all(|(k, &v)| k == l || v == 0.0))
            .map(|a| a[l])
            .collect();
        let n = if n_probe == 0 {
            4 * required.max(1)
        } else {
            n_probe
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(l as u64 + 1);
        let mut rows = Array2::zeros((n, required.max(1)));
        if !eps_values.is_empty() {
            for r in 0..n {
                let lags = probe_lags(spec, &mut rng);
                let eps = eps_values[r % eps_values.len()];
                let delta =
                    spec.partial_difference_grad(&z.view(), &views(&lags), &zero.view(), l, eps)?;
                for (c, &i) in children.iter().enumerate() {
                    rows[[r, c]] = delta[i];
                }
            }
        }
        units.push(unit_from_rows(format!("a[{l}]"), rows, required, tol));
    }
    Ok(report(
        "sufficient influence of a (discrete)",
        units,
        tol,
        n_probe,
        seed,
    ))
}

/// Nonparametric sufficient influence of `z`: Hessians w.r.t. the first lag,
/// with the lag pinned to the evaluation point, must span the full edge
/// space of `G^z`. Markovian no-action families necessarily fail beyond one
/// edge because every probe then sees the same Hessian.
pub fn check_influence_z(
    spec: &TransitionSpec,
    n_probe: usize,
    tol: f64,
    seed: u64,
) -> Result<InfluenceReport, LatentError> {
    if spec.family.lags_required() == 0 {
        return Err(LatentError::MissingLag(spec.family, 1, 0));
    }
    let support: Vec<(usize, usize)> = support_entries(&spec.graph.gz);
    let required = support.len();
    let n = if n_probe == 0 {
        4 * required.max(1)
    } else {
        n_probe
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = gauss_vec(spec.d_z(), &mut rng);
    let action_set = one_hot_action_set(spec.d_a());
    let mut rows = Array2::zeros((n, required.max(1)));
    for r in 0..n {
        let mut lags = probe_lags(spec, &mut rng);
        lags[0] = z.clone(); // constraint: conditioning lag equals the point
        let a = if spec.d_a() > 0 {
            action_set[rng.gen_range(0..action_set.len())].clone()
        } else {
            Array1::zeros(0)
        };
        let h = spec.hessian_z_zprev(&z.view(), &views(&lags), &a.view(), 1, DEFAULT_FD_STEP)?;
        for (c, &(i, j)) in support.iter().enumerate() {
            rows[[r, c]] = h[[i, j]];
        }
    }
    let units = vec![unit_from_rows("G^z span".into(), rows, required, tol)];
    Ok(report(
        "sufficient influence of z (nonparametric)",
        units,
        tol,
        n_probe,
        seed,
    ))
}

/// Exponential-family (`k = 1`) sufficient influence of `z`: Jacobians of the
/// mean w.r.t. the first lag at freely varying conditioning points must span
/// the edge space of `G^z`.
pub fn check_influence_z_expfam(
    spec: &TransitionSpec,
    n_probe: usize,
    tol: f64,
    seed: u64,
) -> Result<InfluenceReport, LatentError> {
    if spec.k() != 1 {
        return Err(LatentError::Heteroscedastic(spec.family));
    }
    if spec.family.lags_required() == 0 {
        return Err(LatentError::MissingLag(spec.family, 1, 0));
    }
    let support = support_entries(&spec.graph.gz);
    let required = support.len();
    let n = if n_probe == 0 {
        4 * required.max(1)
    } else {
        n_probe
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let action_set = one_hot_action_set(spec.d_a());
    let mut rows = Array2::zeros((n, required.max(1)));
    for r in 0..n {
        let lags = probe_lags(spec, &mut rng);
        let a = if spec.d_a() > 0 {
            action_set[rng.gen_range(0..action_set.len())].clone()
        } else {
            Array1::zeros(0)
        };
        let jac = mean_jacobian_lag1(spec, &lags, &a)?;
        for (c, &(i, j)) in support.iter().enumerate() {
            rows[[r, c]] = jac[[i, j]];
        }
    }
    let units = vec![unit_from_rows("G^z span".into(), rows, required, tol)];
    Ok(report(
        "sufficient influence of z (exponential family, k=1)",
        units,
        tol,
        n_probe,
        seed,
    ))
}

fn support_entries(g: &Array2<u8>) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(count_ones(&g.view()));
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            if g[[i, j]] == 1 {
                v.push((i, j));
            }
        }
    }
    v
}

fn mean_jacobian_lag1(
    spec: &TransitionSpec,
    lags: &[Array1<f64>],
    a: &Array1<f64>,
) -> Result<Array2<f64>, LatentError> {
    let d_z = spec.d_z();
    let mut jac = Array2::zeros((d_z, d_z));
    let mut lag_owned = lags.to_vec();
    let base = lag_owned[0].clone();
    for j in 0..d_z {
        lag_owned[0][j] = base[j] + DEFAULT_FD_STEP;
        let plus = spec.mean(&views(&lag_owned), &a.view())?;
        lag_owned[0][j] = base[j] - DEFAULT_FD_STEP;
        let minus = spec.mean(&views(&lag_owned), &a.view())?;
        lag_owned[0][j] = base[j];
        for i in 0..d_z {
            jac[[i, j]] = (plus[i] - minus[i]) / (2.0 * DEFAULT_FD_STEP);
        }
    }
    Ok(jac)
}

/// Probe points for the sufficient-variability check: conditioning lags and
/// an action per point.
pub type VariabilityProbe = (Vec<Array1<f64>>, Array1<f64>);

/// Default probe set: the full one-hot action set for discrete families (with
/// fresh lags per point), otherwise random conditioning draws.
pub fn default_variability_probes(
    spec: &TransitionSpec,
    n: usize,
    seed: u64,
) -> Vec<VariabilityProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.family.action_kind() {
        ActionKind::Discrete => one_hot_action_set(spec.d_a())
            .into_iter()
            .map(|a| (probe_lags(spec, &mut rng), a))
            .collect(),
        ActionKind::Continuous => (0..n)
            .map(|_| {
                (
                    probe_lags(spec, &mut rng),
                    uniform_action(spec.d_a(), &mut rng),
                )
            })
            .collect(),
        ActionKind::None => (0..n)
            .map(|_| (probe_lags(spec, &mut rng), Array1::zeros(0)))
            .collect(),
    }
}

/// Sufficient variability: differences of natural parameters against the
/// first probe point must span the full `k * d_z` space.
pub fn check_sufficient_variability(
    spec: &TransitionSpec,
    probe_points: &[VariabilityProbe],
    tol: f64,
) -> Result<InfluenceReport, LatentError> {
    let required = spec.k() * spec.d_z();
    let units = if probe_points.len() < 2 {
        vec![unit_from_rows(
            "lambda span".into(),
            Array2::zeros((1, required)),
            required,
            tol,
        )]
    } else {
        let (lags0, a0) = &probe_points[0];
        let lam0 = spec.natural_params(&views(lags0), &a0.view())?;
        let n = probe_points.len() - 1;
        let mut rows = Array2::zeros((n, required));
        for (r, (lags, a)) in probe_points.iter().skip(1).enumerate() {
            let lam = spec.natural_params(&views(lags), &a.view())?;
            for c in 0..required {
                rows[[r, c]] = lam[c] - lam0[c];
            }
        }
        vec![unit_from_rows("lambda span".into(), rows, required, tol)]
    };
    Ok(report(
        "sufficient variability",
        units,
        tol,
        probe_points.len(),
        0,
    ))
}
