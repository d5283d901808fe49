//! Disentanglement evaluation: MCC, R, R_con, SHD and UDR.
//!
//! All scores operate on paired ground-truth and learned codes, standardized
//! per coordinate, in f64. Regressions are in-sample least squares with a
//! small ridge fallback on rank-deficient designs, which keeps the ordering
//! `MCC <= R_con <= R` exact up to solver noise.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_algebra::{entanglement_mask, BinaryGraph, ConsistencyMode, GraphError};
use crate::linalg;

pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("column {0} of {1} has zero variance")]
    ZeroVariance(usize, &'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("UDR needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("no admissible runs after the edge-count filter")]
    NoAdmissibleRuns,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Full evaluation summary for one learned model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mcc: f64,
    pub r: f64,
    pub r_con: f64,
    pub shd: f64,
    /// Matching from ground-truth coordinate `i` to learned coordinate
    /// `p_hat[i]`.
    pub p_hat: Vec<usize>,
    /// Standardized regression coefficients of the full `R` regression.
    pub l_hat: Vec<Vec<f64>>,
    pub mode: ConsistencyMode,
    /// Learned-graph snapshot used for SHD.
    pub graph: BinaryGraph,
}

fn standardize(data: &ArrayView2<f64>, name: &'static str) -> Result<Array2<f64>, MetricError> {
    let (n, d) = data.dim();
    if n < 2 {
        return Err(MetricError::TooFewSamples(n));
    }
    let mut out = Array2::zeros((n, d));
    for j in 0..d {
        let col = data.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        // Constant columns may carry summation round-off; test relative to
        // the column magnitude.
        if var <= 1e-24 * (1.0 + mean * mean) {
            return Err(MetricError::ZeroVariance(j, name));
        }
        let std = var.sqrt();
        for i in 0..n {
            out[[i, j]] = (data[[i, j]] - mean) / std;
        }
    }
    Ok(out)
}

fn correlation_matrix(z: &Array2<f64>, z_hat: &Array2<f64>) -> Array2<f64> {
    // Inputs standardized: K = Z^T Zhat / n.
    let n = z.nrows() as f64;
    z.t().dot(z_hat).mapv(|v| v / n)
}

/// Pearson correlation matrix `K` with `K[i, j] = corr(z_i, z_hat_j)`.
pub fn pearson_correlations(
    z: &ArrayView2<f64>,
    z_hat: &ArrayView2<f64>,
) -> Result<Array2<f64>, MetricError> {
    if z.dim() != z_hat.dim() {
        return Err(MetricError::Shape(format!(
            "z is {:?} but z_hat is {:?}",
            z.dim(),
            z_hat.dim()
        )));
    }
    let zs = standardize(z, "z")?;
    let hs = standardize(z_hat, "z_hat")?;
    Ok(correlation_matrix(&zs, &hs))
}

/// Maximum-weight assignment by the Hungarian algorithm
/// (shortest-augmenting-path formulation, O(n^3), deterministic).
pub fn max_weight_assignment(weights: &ArrayView2<f64>) -> Vec<usize> {
    let n = weights.nrows();
    assert_eq!(n, weights.ncols(), "assignment needs a square matrix");
    // Minimize cost = -weight.
    let cost = |i: usize, j: usize| -weights[[i, j]];
    // Potentials and matching, 1-indexed internally.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1]; // matched[j] = row assigned to column j
    for i in 1..=n {
        let mut links = vec![0usize; n + 1];
        let mut mins = vec![f64::INFINITY; n + 1];
        let mut visited = vec![false; n + 1];
        let mut j_cur = 0usize;
        matched[0] = i;
        loop {
            visited[j_cur] = true;
            let i_cur = matched[j_cur];
            let mut delta = f64::INFINITY;
            let mut j_next = 0usize;
            for j in 1..=n {
                if !visited[j] {
                    let reduced = cost(i_cur - 1, j - 1) - u[i_cur] - v[j];
                    if reduced < mins[j] {
                        mins[j] = reduced;
                        links[j] = j_cur;
                    }
                    if mins[j] < delta {
                        delta = mins[j];
                        j_next = j;
                    }
                }
            }
            for j in 0..=n {
                if visited[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    mins[j] -= delta;
                }
            }
            j_cur = j_next;
            if matched[j_cur] == 0 {
                break;
            }
        }
        // Augment along the alternating path.
        while j_cur != 0 {
            let j_prev = links[j_cur];
            matched[j_cur] = matched[j_prev];
            j_cur = j_prev;
        }
    }
    let mut sigma = vec![0usize; n];
    for j in 1..=n {
        if matched[j] != 0 {
            sigma[matched[j] - 1] = j - 1;
        }
    }
    sigma
}

/// Mean correlation coefficient: the assignment maximizing the sum of
/// absolute Pearson correlations, averaged. Returns the score and the
/// matching `p_hat` (ground-truth index to learned index).
pub fn mcc(z: &ArrayView2<f64>, z_hat: &ArrayView2<f64>) -> Result<(f64, Vec<usize>), MetricError> {
    if z.dim() != z_hat.dim() {
        return Err(MetricError::Shape(format!(
            "z is {:?} but z_hat is {:?}",
            z.dim(),
            z_hat.dim()
        )));
    }
    let zs = standardize(z, "z")?;
    let hs = standardize(z_hat, "z_hat")?;
    let k = correlation_matrix(&zs, &hs);
    let abs_k = k.mapv(f64::abs);
    let sigma = max_weight_assignment(&abs_k.view());
    let d = zs.ncols();
    let score = (0..d).map(|i| abs_k[[i, sigma[i]]]).sum::<f64>() / d as f64;
    Ok((score, sigma))
}

fn regress_one(
    features: &Array2<f64>,
    feature_cols: &[usize],
    target: &ndarray::ArrayView1<f64>,
) -> (f64, Array1<f64>) {
    let n = features.nrows();
    let p = feature_cols.len();
    if p == 0 {
        // Constant (zero) predictor on standardized data.
        return (0.0, Array1::zeros(0));
    }
    let mut gram = Array2::zeros((p, p));
    let mut rhs = Array1::zeros(p);
    for (a, &ca) in feature_cols.iter().enumerate() {
        for (b, &cb) in feature_cols.iter().enumerate() {
            gram[[a, b]] = features.column(ca).dot(&features.column(cb)) / n as f64;
        }
        rhs[a] = features.column(ca).dot(target) / n as f64;
    }
    let coef = linalg::solve_normal_equations(&gram, &rhs, RIDGE);
    // Prediction and its Pearson correlation with the target.
    let mut pred = Array1::zeros(n);
    for (a, &ca) in feature_cols.iter().enumerate() {
        pred.scaled_add(coef[a], &features.column(ca));
    }
    let pm = pred.sum() / n as f64;
    let tv = target.dot(target) / n as f64; // standardized target: 1
    let pv = pred.iter().map(|v| (v - pm).powi(2)).sum::<f64>() / n as f64;
    if pv <= 0.0 || tv <= 0.0 {
        return (0.0, coef);
    }
    let cov = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - pm) * t)
        .sum::<f64>()
        / n as f64;
    ((cov / (pv * tv).sqrt()).clamp(-1.0, 1.0), coef)
}

/// Coefficient of multiple correlation: per-coordinate least squares of the
/// ground truth on all learned coordinates, mean Pearson correlation between
/// prediction and truth. Also returns the standardized coefficient matrix.
pub fn r_score(
    z: &ArrayView2<f64>,
    z_hat: &ArrayView2<f64>,
) -> Result<(f64, Array2<f64>), MetricError> {
    if z.dim() != z_hat.dim() {
        return Err(MetricError::Shape(format!(
            "z is {:?} but z_hat is {:?}",
            z.dim(),
            z_hat.dim()
        )));
    }
    let (n, d) = z.dim();
    if n <= d {
        return Err(MetricError::TooFewSamples(n));
    }
    let zs = standardize(z, "z")?;
    let hs = standardize(z_hat, "z_hat")?;
    let all: Vec<usize> = (0..d).collect();
    let mut l_hat = Array2::zeros((d, d));
    let mut total = 0.0;
    for i in 0..d {
        let (score, coef) = regress_one(&hs, &all, &zs.column(i));
        total += score;
        for j in 0..d {
            l_hat[[i, j]] = coef[j];
        }
    }
    Ok((total / d as f64, l_hat))
}

/// Per-coordinate detail of the consistency-restricted regression.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RconDetail {
    pub coordinate: usize,
    pub allowed_features: Vec<usize>,
    pub score: f64,
}

/// Consistency-restricted multiple correlation: permute the learned codes by
/// the MCC matching, then predict each ground-truth factor only from the
/// coordinates allowed by the entanglement mask of the graph.
pub fn r_con(
    z: &ArrayView2<f64>,
    z_hat: &ArrayView2<f64>,
    graph: &BinaryGraph,
    mode: ConsistencyMode,
) -> Result<(f64, Vec<RconDetail>, Vec<usize>), MetricError> {
    let (_, sigma) = mcc(z, z_hat)?;
    let (n, d) = z.dim();
    let zs = standardize(z, "z")?;
    let hs = standardize(z_hat, "z_hat")?;
    // Permute learned coordinates: column i of the permuted codes is learned
    // coordinate sigma(i).
    let mut hp = Array2::zeros((n, d));
    for (i, &s) in sigma.iter().enumerate() {
        hp.column_mut(i).assign(&hs.column(s));
    }
    let mask = entanglement_mask(graph, mode)?.mask;
    let mut details = Vec::with_capacity(d);
    let mut total = 0.0;
    for i in 0..d {
        let allowed: Vec<usize> = (0..d).filter(|&j| mask[[i, j]] == 1).collect();
        let (score, _) = regress_one(&hp, &allowed, &zs.column(i));
        total += score;
        details.push(RconDetail {
            coordinate: i,
            allowed_features: allowed,
            score,
        });
    }
    Ok((total / d as f64, details, sigma))
}

/// Normalized structural Hamming distance between the ground-truth graph and
/// the learned graph permuted by `p_hat`:
/// `(||G^a - P^T Ghat^a||_0 + ||G^z - P^T Ghat^z P||_0) / (d_a d_z + d_z^2)`.
pub fn shd(g: &BinaryGraph, g_hat: &BinaryGraph, p_hat: &[usize]) -> Result<f64, MetricError> {
    let d_z = g.d_z();
    let d_a = g.d_a();
    if g_hat.d_z() != d_z || g_hat.d_a() != d_a {
        return Err(MetricError::Shape("graph dimensions differ".into()));
    }
    if p_hat.len() != d_z {
        return Err(MetricError::Shape(
            "permutation length differs from d_z".into(),
        ));
    }
    let mut mismatches = 0usize;
    for i in 0..d_z {
        for l in 0..d_a {
            // (P^T Ghat^a)[i, l] = Ghat^a[sigma(i), l]
            if g.ga[[i, l]] != g_hat.ga[[p_hat[i], l]] {
                mismatches += 1;
            }
        }
        for j in 0..d_z {
            // (P^T Ghat^z P)[i, j] = Ghat^z[sigma(i), sigma(j)]
            if g.gz[[i, j]] != g_hat.gz[[p_hat[i], p_hat[j]]] {
                mismatches += 1;
            }
        }
    }
    Ok(mismatches as f64 / (d_a * d_z + d_z * d_z) as f64)
}

/// UDR outcome: the median pairwise MCC among admissible runs and the
/// admissibility flag per run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UdrResult {
    pub score: f64,
    pub admissible: Vec<bool>,
}

/// Unsupervised disentanglement ranking: median pairwise MCC among runs whose
/// learned graphs keep at least `min_edges` edges.
pub fn udr(
    code_sets: &[Array2<f64>],
    edge_counts: &[usize],
    min_edges: usize,
) -> Result<UdrResult, MetricError> {
    if code_sets.len() < 2 {
        return Err(MetricError::TooFewRuns(code_sets.len()));
    }
    if code_sets.len() != edge_counts.len() {
        return Err(MetricError::Shape("one edge count per run required".into()));
    }
    let admissible: Vec<bool> = edge_counts.iter().map(|&e| e >= min_edges).collect();
    let kept: Vec<usize> = (0..code_sets.len()).filter(|&i| admissible[i]).collect();
    if kept.len() < 2 {
        return Err(MetricError::NoAdmissibleRuns);
    }
    let mut pairwise = Vec::new();
    for (a, &i) in kept.iter().enumerate() {
        for &j in kept.iter().skip(a + 1) {
            let (score, _) = mcc(&code_sets[i].view(), &code_sets[j].view())?;
            pairwise.push(score);
        }
    }
    pairwise.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = pairwise.len();
    let score = if m % 2 == 1 {
        pairwise[m / 2]
    } else {
        0.5 * (pairwise[m / 2 - 1] + pairwise[m / 2])
    };
    Ok(UdrResult { score, admissible })
}

/// Assembles the full report for one model against ground truth.
pub fn evaluate(
    z: &ArrayView2<f64>,
    z_hat: &ArrayView2<f64>,
    truth: &BinaryGraph,
    learned: &BinaryGraph,
    mode: ConsistencyMode,
) -> Result<EvalReport, MetricError> {
    let (mcc_score, _) = mcc(z, z_hat)?;
    let (r, l_hat) = r_score(z, z_hat)?;
    let (rc, _, p_hat) = r_con(z, z_hat, truth, mode)?;
    let shd_score = shd(truth, learned, &p_hat)?;
    Ok(EvalReport {
        mcc: mcc_score,
        r,
        r_con: rc,
        shd: shd_score,
        p_hat,
        l_hat: l_hat.rows().into_iter().map(|r| r.to_vec()).collect(),
        mode,
        graph: learned.clone(),
    })
}

/// `|L_hat P_hat|` normalized by the largest absolute coefficient, the matrix
/// dumped for visual inspection.
pub fn normalized_coefficient_matrix(l_hat: &Array2<f64>, p_hat: &[usize]) -> Array2<f64> {
    let d = l_hat.nrows();
    let mut lp = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            // (L P)[i, j] = sum_k L[i, k] P[k, j] with P[sigma(j), j] = 1.
            lp[[i, j]] = l_hat[[i, p_hat[j]]].abs();
        }
    }
    let max = l_hat.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if max > 0.0 {
        lp.mapv_inplace(|v| v / max);
    }
    lp
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_codes(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    fn exhaustive_assignment(weights: &Array2<f64>) -> f64 {
        let d = weights.nrows();
        let mut best = f64::NEG_INFINITY;
        let mut idx: Vec<usize> = (0..d).collect();
        permute(&mut idx, 0, &mut |perm| {
            let s: f64 = (0..d).map(|i| weights[[i, perm[i]]]).sum();
            if s > best {
                best = s;
            }
        });
        best
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn mcc_identity_and_flipped_reversal() {
        let z = random_codes(500, 4, 1);
        let (score, sigma) = mcc(&z.view(), &z.view()).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
        assert_eq!(sigma, vec![0, 1, 2, 3]);

        // Negated and reversed columns still give a perfect MCC.
        let mut rev = Array2::zeros(z.dim());
        for j in 0..4 {
            for i in 0..500 {
                rev[[i, 3 - j]] = -z[[i, j]];
            }
        }
        let (score, sigma) = mcc(&z.view(), &rev.view()).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
        assert_eq!(sigma, vec![3, 2, 1, 0]);
    }

    #[test]
    fn mcc_zero_variance_column_is_rejected() {
        let z = random_codes(100, 2, 3);
        let mut bad = z.clone();
        bad.column_mut(1).fill(0.7);
        assert!(matches!(
            mcc(&z.view(), &bad.view()),
            Err(MetricError::ZeroVariance(1, "z_hat"))
        ));
    }

    #[test]
    fn assignment_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in 2..=6 {
            for _ in 0..20 {
                let w = Array2::from_shape_fn((d, d), |_| rng.gen_range(0.0..1.0));
                let sigma = max_weight_assignment(&w.view());
                let got: f64 = (0..d).map(|i| w[[i, sigma[i]]]).sum();
                let best = exhaustive_assignment(&w);
                assert!((got - best).abs() < 1e-9, "d={d}: {got} vs {best}");
            }
        }
    }

    #[test]
    fn mcc_matches_exhaustive_permutation_oracle() {
        let z = random_codes(400, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mix = Array2::from_shape_fn((4, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let z_hat = z.dot(&mix);
        let (score, _) = mcc(&z.view(), &z_hat.view()).unwrap();

        let zs = standardize(&z.view(), "z").unwrap();
        let hs = standardize(&z_hat.view(), "z_hat").unwrap();
        let k = correlation_matrix(&zs, &hs).mapv(f64::abs);
        let best = exhaustive_assignment(&k) / 4.0;
        assert!((score - best).abs() < 1e-12);
    }

    #[test]
    fn r_score_perfect_and_linear_mix() {
        let z = random_codes(1000, 3, 7);
        let (r, l_hat) = r_score(&z.view(), &z.view()).unwrap();
        assert!((r - 1.0).abs() < 1e-9);
        for i in 0..3 {
            for j in 0..3 {
                let expect = f64::from(u8::from(i == j));
                assert!((l_hat[[i, j]] - expect).abs() < 1e-9);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mix = Array2::from_shape_fn((3, 3), |_| rng.sample::<f64, _>(StandardNormal))
            + Array2::<f64>::eye(3) * 2.0;
        let z_hat = z.dot(&mix);
        let (r, _) = r_score(&z.view(), &z_hat.view()).unwrap();
        assert!(
            (r - 1.0).abs() < 1e-9,
            "invertible mixing keeps R = 1, got {r}"
        );
    }

    #[test]
    fn r_score_with_noise_matches_analytic_correlation() {
        let n = 100_000;
        let z = random_codes(n, 2, 11);
        let noise = random_codes(n, 2, 12);
        let z_hat = &z + &noise;
        let (r, _) = r_score(&z.view(), &z_hat.view()).unwrap();
        let expect = 1.0 / 2.0f64.sqrt();
        assert!((r - expect).abs() < 0.02, "r {r} vs {expect}");
    }

    #[test]
    fn r_con_limits() {
        let z = random_codes(800, 3, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mix = Array2::from_shape_fn((3, 3), |_| rng.sample::<f64, _>(StandardNormal))
            + Array2::<f64>::eye(3) * 1.5;
        let z_hat = z.dot(&mix);

        // Full mask: equals R.
        let full = BinaryGraph::action_only(Array2::from_elem((3, 1), 1u8)).unwrap();
        let (rc, details, _) = r_con(&z.view(), &z_hat.view(), &full, ConsistencyMode::A).unwrap();
        let (r, _) = r_score(&z.view(), &z_hat.view()).unwrap();
        assert!((rc - r).abs() < 1e-9);
        assert_eq!(details[0].allowed_features, vec![0, 1, 2]);

        // Identity mask: equals MCC with the matching fixed.
        let eye =
            BinaryGraph::action_only(Array2::from_shape_fn((3, 3), |(i, j)| u8::from(i == j)))
                .unwrap();
        let (rc, _, sigma) = r_con(&z.view(), &z_hat.view(), &eye, ConsistencyMode::A).unwrap();
        let zs = standardize(&z.view(), "z").unwrap();
        let hs = standardize(&z_hat.view(), "z_hat").unwrap();
        let k = correlation_matrix(&zs, &hs);
        let expect: f64 = (0..3).map(|i| k[[i, sigma[i]]].abs()).sum::<f64>() / 3.0;
        assert!((rc - expect).abs() < 1e-9);
    }

    #[test]
    fn score_ordering_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..100 {
            let d = rng.gen_range(2..6);
            let n = 300;
            let z = random_codes(n, d, 100 + trial);
            let mix = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal))
                + Array2::<f64>::eye(d) * 0.5;
            let noise = random_codes(n, d, 200 + trial).mapv(|v| 0.3 * v);
            let z_hat = z.dot(&mix) + &noise;
            let gz = Array2::from_shape_fn((d, d), |_| u8::from(rng.gen_bool(0.4)));
            let ga =
                Array2::from_shape_fn((d, rng.gen_range(1..3)), |_| u8::from(rng.gen_bool(0.5)));
            let graph = BinaryGraph::new(gz, ga).unwrap();
            let mode =
                [ConsistencyMode::A, ConsistencyMode::Z, ConsistencyMode::AZ][trial as usize % 3];
            let (m, _) = mcc(&z.view(), &z_hat.view()).unwrap();
            let (r, _) = r_score(&z.view(), &z_hat.view()).unwrap();
            let (rc, _, _) = r_con(&z.view(), &z_hat.view(), &graph, mode).unwrap();
            assert!(m >= 0.0 && r <= 1.0 + 1e-9);
            assert!(m <= rc + 1e-6, "trial {trial}: MCC {m} > R_con {rc}");
            assert!(rc <= r + 1e-6, "trial {trial}: R_con {rc} > R {r}");
        }
    }

    #[test]
    fn mcc_is_permutation_equivariant() {
        let z = random_codes(600, 4, 61);
        let mix = {
            let mut rng = ChaCha8Rng::seed_from_u64(62);
            Array2::from_shape_fn((4, 4), |_| rng.sample::<f64, _>(StandardNormal))
                + Array2::<f64>::eye(4)
        };
        let z_hat = z.dot(&mix);
        let (score, sigma) = mcc(&z.view(), &z_hat.view()).unwrap();
        // Permute the learned columns: column j of the permuted codes is
        // learned column pi[j].
        let pi = [2usize, 0, 3, 1];
        let mut permuted = Array2::zeros(z_hat.dim());
        for (j, &pj) in pi.iter().enumerate() {
            permuted.column_mut(j).assign(&z_hat.column(pj));
        }
        let (score_p, sigma_p) = mcc(&z.view(), &permuted.view()).unwrap();
        assert!((score - score_p).abs() < 1e-12);
        // The matching composes with the inverse of the applied permutation.
        for i in 0..4 {
            assert_eq!(pi[sigma_p[i]], sigma[i]);
        }
    }

    #[test]
    fn scores_are_scale_invariant() {
        let z = random_codes(500, 3, 31);
        let z_hat = random_codes(500, 3, 32) + &z;
        let graph = BinaryGraph::action_only(Array2::from_shape_fn((3, 3), |(i, j)| {
            u8::from(i == j || j == 0)
        }))
        .unwrap();
        let mut scaled = z_hat.clone();
        for j in 0..3 {
            let s = [2.5, -0.3, 10.0][j];
            let o = [1.0, -2.0, 0.5][j];
            for i in 0..500 {
                scaled[[i, j]] = s * z_hat[[i, j]] + o;
            }
        }
        let (m1, s1) = mcc(&z.view(), &z_hat.view()).unwrap();
        let (m2, s2) = mcc(&z.view(), &scaled.view()).unwrap();
        assert!((m1 - m2).abs() < 1e-9);
        assert_eq!(s1, s2);
        let (r1, _) = r_score(&z.view(), &z_hat.view()).unwrap();
        let (r2, _) = r_score(&z.view(), &scaled.view()).unwrap();
        assert!((r1 - r2).abs() < 1e-9);
        let (c1, _, _) = r_con(&z.view(), &z_hat.view(), &graph, ConsistencyMode::A).unwrap();
        let (c2, _, _) = r_con(&z.view(), &scaled.view(), &graph, ConsistencyMode::A).unwrap();
        assert!((c1 - c2).abs() < 1e-9);
    }

    #[test]
    fn shd_formula_cases() {
        let g = BinaryGraph::new(
            Array2::from_shape_fn((3, 3), |(i, j)| u8::from(j <= i)),
            array![[1u8], [0], [1]],
        )
        .unwrap();
        let id = vec![0, 1, 2];
        assert_eq!(shd(&g, &g, &id).unwrap(), 0.0);

        // Complement disagrees everywhere.
        let comp = BinaryGraph::new(g.gz.mapv(|v| 1 - v), g.ga.mapv(|v| 1 - v)).unwrap();
        assert_eq!(shd(&g, &comp, &id).unwrap(), 1.0);

        // Single flipped edge out of d_z^2 + d_z d_a = 12.
        let mut one = g.clone();
        one.gz[[0, 1]] = 1;
        assert!((shd(&g, &one, &id).unwrap() - 1.0 / 12.0).abs() < 1e-12);

        // Permutation-aware comparison: a row swap of Ghat is undone by p_hat.
        let mut swapped_gz = g.gz.clone();
        let (r0, r1) = (g.gz.row(0).to_owned(), g.gz.row(1).to_owned());
        swapped_gz.row_mut(0).assign(&r1);
        swapped_gz.row_mut(1).assign(&r0);
        // Swap columns too for the z part and rows for the a part.
        let mut swapped = BinaryGraph::new(swapped_gz, g.ga.clone()).unwrap();
        let (c0, c1) = (
            swapped.gz.column(0).to_owned(),
            swapped.gz.column(1).to_owned(),
        );
        swapped.gz.column_mut(0).assign(&c1);
        swapped.gz.column_mut(1).assign(&c0);
        let (a0, a1) = (swapped.ga.row(0).to_owned(), swapped.ga.row(1).to_owned());
        swapped.ga.row_mut(0).assign(&a1);
        swapped.ga.row_mut(1).assign(&a0);
        let p = vec![1, 0, 2];
        assert_eq!(shd(&g, &swapped, &p).unwrap(), 0.0);
    }

    #[test]
    fn udr_cases() {
        let z = random_codes(2000, 4, 41);
        // Identical codes across seeds give a perfect score.
        let res = udr(&[z.clone(), z.clone(), z.clone()], &[5, 5, 5], 4).unwrap();
        assert!((res.score - 1.0).abs() < 1e-9);
        assert_eq!(res.admissible, vec![true, true, true]);

        // Independent random codes stay low.
        let a = random_codes(10_000, 5, 42);
        let b = random_codes(10_000, 5, 43);
        let res = udr(&[a, b], &[10, 10], 5).unwrap();
        assert!(res.score < 0.35, "null UDR {}", res.score);

        // Exclusion honors min_edges exactly.
        let res = udr(&[z.clone(), z.clone(), z.clone()], &[3, 5, 5], 4).unwrap();
        assert_eq!(res.admissible, vec![false, true, true]);
        assert!(matches!(
            udr(&[z.clone(), z.clone()], &[3, 3], 4),
            Err(MetricError::NoAdmissibleRuns)
        ));
        assert!(matches!(
            udr(std::slice::from_ref(&z), &[5], 4),
            Err(MetricError::TooFewRuns(1))
        ));
    }

    #[test]
    fn evaluate_on_ground_truth_codes() {
        let z = random_codes(500, 3, 51);
        let graph =
            BinaryGraph::action_only(Array2::from_shape_fn((3, 3), |(i, j)| u8::from(i == j)))
                .unwrap();
        let rep = evaluate(&z.view(), &z.view(), &graph, &graph, ConsistencyMode::A).unwrap();
        assert!((rep.mcc - 1.0).abs() < 1e-9);
        assert!((rep.r - 1.0).abs() < 1e-9);
        assert!((rep.r_con - 1.0).abs() < 1e-9);
        assert_eq!(rep.shd, 0.0);
        assert_eq!(rep.p_hat, vec![0, 1, 2]);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("r_con"));
    }
}
