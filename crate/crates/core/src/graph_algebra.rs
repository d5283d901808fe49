//! Binary-graph algebra: maximal preserving masks, entanglement masks, the
//! per-node graphical criterion and permutation extraction.
//!
//! All combinatorics run on exact 0/1 patterns. Real matrices are thresholded
//! only in [`is_preserving`], with a caller-supplied tolerance.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("entanglement mask in A mode requires d_a >= 1")]
    NoActions,
    #[error("matrix is numerically singular (sigma_min/sigma_max = {0:.3e})")]
    Singular(f64),
    #[error("permutation enumeration capped at m <= 10, got {0}")]
    TooLarge(usize),
    #[error("matrix entries must be 0 or 1")]
    NotBinary,
    #[error("csv parse error: {0}")]
    Csv(String),
}

/// Adjacency matrices of the latent graphical model: `gz` relates previous
/// latents to current ones (entry `(i, j) = 1` iff `z_j^{t-1} -> z_i^t`),
/// `ga` relates previous auxiliary variables to current latents.
///
/// `d_a` may be zero (time-only models) and `gz` may be all-zero
/// (action-only models).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryGraph {
    pub gz: Array2<u8>,
    pub ga: Array2<u8>,
}

impl BinaryGraph {
    pub fn new(gz: Array2<u8>, ga: Array2<u8>) -> Result<Self, GraphError> {
        let d_z = gz.nrows();
        if gz.ncols() != d_z {
            return Err(GraphError::DimensionMismatch(format!(
                "gz must be square, got {}x{}",
                gz.nrows(),
                gz.ncols()
            )));
        }
        if ga.nrows() != d_z {
            return Err(GraphError::DimensionMismatch(format!(
                "ga has {} rows but gz is {}x{}",
                ga.nrows(),
                d_z,
                d_z
            )));
        }
        if gz.iter().chain(ga.iter()).any(|&v| v > 1) {
            return Err(GraphError::NotBinary);
        }
        Ok(Self { gz, ga })
    }

    /// Time-only graph (`d_a = 0`).
    pub fn time_only(gz: Array2<u8>) -> Result<Self, GraphError> {
        let d_z = gz.nrows();
        Self::new(gz, Array2::zeros((d_z, 0)))
    }

    /// Action-only graph (`gz` all-zero).
    pub fn action_only(ga: Array2<u8>) -> Result<Self, GraphError> {
        let d_z = ga.nrows();
        Self::new(Array2::zeros((d_z, d_z)), ga)
    }

    pub fn d_z(&self) -> usize {
        self.gz.nrows()
    }

    pub fn d_a(&self) -> usize {
        self.ga.ncols()
    }

    /// Total edge count `||G^z||_0 + ||G^a||_0`.
    pub fn n_edges(&self) -> usize {
        count_ones(&self.gz.view()) + count_ones(&self.ga.view())
    }

    /// Parents of `z_i` in `gz`: `{j : gz[i, j] = 1}`.
    pub fn parents_z(&self, i: usize) -> Vec<usize> {
        (0..self.d_z()).filter(|&j| self.gz[[i, j]] == 1).collect()
    }

    /// Children of `z_i` in `gz`: `{j : gz[j, i] = 1}`.
    pub fn children_z(&self, i: usize) -> Vec<usize> {
        (0..self.d_z()).filter(|&j| self.gz[[j, i]] == 1).collect()
    }

    /// Parents of `z_i` in `ga`: `{l : ga[i, l] = 1}`.
    pub fn parents_a(&self, i: usize) -> Vec<usize> {
        (0..self.d_a()).filter(|&l| self.ga[[i, l]] == 1).collect()
    }

    /// Children of `a_l` in `ga`: `{i : ga[i, l] = 1}`.
    pub fn children_a(&self, l: usize) -> Vec<usize> {
        (0..self.d_z()).filter(|&i| self.ga[[i, l]] == 1).collect()
    }
}

pub fn count_ones(g: &ArrayView2<u8>) -> usize {
    g.iter().filter(|&&v| v == 1).count()
}

/// Which preservation constraints the mask encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsistencyMode {
    /// `G^a`-preserving only.
    A,
    /// `G^z`- and `(G^z)^T`-preserving.
    Z,
    /// All three constraints.
    AZ,
}

/// Predicted entanglement structure: `mask[i, j] = 1` iff coordinate `j` of
/// the learned representation may load on ground-truth factor `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntanglementMask {
    pub mask: Array2<u8>,
    pub mode: ConsistencyMode,
}

fn row_bits(g: &ArrayView2<u8>) -> Vec<u128> {
    assert!(g.ncols() <= 128, "bitset rows support up to 128 columns");
    (0..g.nrows())
        .map(|i| {
            let mut bits = 0u128;
            for j in 0..g.ncols() {
                if g[[i, j]] == 1 {
                    bits |= 1 << j;
                }
            }
            bits
        })
        .collect()
}

/// Maximal dependency mask a `g`-preserving function may have:
/// `mask[i, j] = 1` iff row `i` of `g` is contained in row `j` as an index
/// set. The diagonal is always all ones.
pub fn maximal_preserving_mask(g: &ArrayView2<u8>) -> Array2<u8> {
    let m = g.nrows();
    let mut mask = Array2::zeros((m, m));
    if g.ncols() <= 128 {
        let rows = row_bits(g);
        for i in 0..m {
            for j in 0..m {
                if rows[i] & !rows[j] == 0 {
                    mask[[i, j]] = 1;
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..m {
                let contained = (0..g.ncols()).all(|k| g[[i, k]] == 0 || g[[j, k]] == 1);
                if contained {
                    mask[[i, j]] = 1;
                }
            }
        }
    }
    mask
}

fn and_masks(a: &Array2<u8>, b: &Array2<u8>) -> Array2<u8> {
    let mut out = a.clone();
    out.zip_mut_with(b, |x, &y| *x &= y);
    out
}

/// Entanglement mask implied by the consistency mode: the element-wise AND of
/// the applicable maximal preserving masks. In `AZ` mode with `d_a = 0` the
/// action constraint is vacuous, so the result equals the `Z`-mode mask.
pub fn entanglement_mask(
    graph: &BinaryGraph,
    mode: ConsistencyMode,
) -> Result<EntanglementMask, GraphError> {
    let mask = match mode {
        ConsistencyMode::A => {
            if graph.d_a() == 0 {
                return Err(GraphError::NoActions);
            }
            maximal_preserving_mask(&graph.ga.view())
        }
        ConsistencyMode::Z => {
            let fwd = maximal_preserving_mask(&graph.gz.view());
            let bwd = maximal_preserving_mask(&graph.gz.t());
            and_masks(&fwd, &bwd)
        }
        ConsistencyMode::AZ => {
            let fwd = maximal_preserving_mask(&graph.gz.view());
            let bwd = maximal_preserving_mask(&graph.gz.t());
            let mut mask = and_masks(&fwd, &bwd);
            if graph.d_a() > 0 {
                mask = and_masks(&mask, &maximal_preserving_mask(&graph.ga.view()));
            }
            mask
        }
    };
    Ok(EntanglementMask { mask, mode })
}

/// True iff `|c[i, j]| <= tol` on every entry forbidden by
/// `maximal_preserving_mask(g)`.
pub fn is_preserving(
    c: &ArrayView2<f64>,
    g: &ArrayView2<u8>,
    tol: f64,
) -> Result<bool, GraphError> {
    let m = g.nrows();
    if c.nrows() != m || c.ncols() != m {
        return Err(GraphError::DimensionMismatch(format!(
            "c is {}x{} but g has {} rows",
            c.nrows(),
            c.ncols(),
            m
        )));
    }
    let mask = maximal_preserving_mask(g);
    for i in 0..m {
        for j in 0..m {
            if mask[[i, j]] == 0 && c[[i, j]].abs() > tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Per-node verdict of the graphical criterion. `witnesses[i]` is the full
/// intersection set for node `i`; the criterion holds at `i` iff it equals
/// `{i}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriterionReport {
    pub holds: bool,
    pub witnesses: Vec<Vec<usize>>,
}

/// Graphical criterion for complete disentanglement: for every node `i`, the
/// intersection of the parent sets of its `gz`-children, the child sets of
/// its `gz`-parents and the child sets of its `ga`-parents must be exactly
/// `{i}`. Intersections over empty index families are the full node set.
pub fn check_graphical_criterion(graph: &BinaryGraph) -> CriterionReport {
    let d_z = graph.d_z();
    assert!(d_z <= 128, "criterion check supports up to 128 latents");
    let full: u128 = if d_z == 128 { !0 } else { (1u128 << d_z) - 1 };

    // Bitset views of parents/children.
    let pa_z: Vec<u128> = row_bits(&graph.gz.view());
    let ch_z: Vec<u128> = {
        let t = graph.gz.t().to_owned();
        row_bits(&t.view())
    };
    let ch_a: Vec<u128> = (0..graph.d_a())
        .map(|l| {
            let mut bits = 0u128;
            for i in 0..d_z {
                if graph.ga[[i, l]] == 1 {
                    bits |= 1 << i;
                }
            }
            bits
        })
        .collect();

    let mut holds = true;
    let mut witnesses = Vec::with_capacity(d_z);
    for i in 0..d_z {
        let mut acc = full;
        for j in 0..d_z {
            if ch_z[i] >> j & 1 == 1 {
                acc &= pa_z[j];
            }
            if pa_z[i] >> j & 1 == 1 {
                acc &= ch_z[j];
            }
        }
        for (l, bits) in ch_a.iter().enumerate() {
            if graph.ga[[i, l]] == 1 {
                acc &= bits;
            }
        }
        let set: Vec<usize> = (0..d_z).filter(|&k| acc >> k & 1 == 1).collect();
        if set != [i] {
            holds = false;
        }
        witnesses.push(set);
    }
    CriterionReport { holds, witnesses }
}

/// Sufficient condition for the graphical criterion: every node has a
/// self-loop and no two distinct nodes form a 2-cycle.
pub fn two_cycle_sufficient(gz: &ArrayView2<u8>) -> bool {
    let m = gz.nrows();
    assert_eq!(m, gz.ncols(), "gz must be square");
    for i in 0..m {
        if gz[[i, i]] != 1 {
            return false;
        }
        for j in 0..i {
            if gz[[i, j]] == 1 && gz[[j, i]] == 1 {
                return false;
            }
        }
    }
    true
}

/// Extracts a permutation `sigma` with `l[i, sigma(i)] != 0` for all `i` from
/// an invertible matrix, by bipartite matching on the nonzero pattern. Such a
/// permutation always exists for a truly invertible matrix, since some term
/// of the determinant expansion is nonzero.
pub fn contained_permutation(l: &ArrayView2<f64>) -> Result<Vec<usize>, GraphError> {
    let m = l.nrows();
    if l.ncols() != m {
        return Err(GraphError::DimensionMismatch(format!(
            "expected square matrix, got {}x{}",
            m,
            l.ncols()
        )));
    }
    let sv = linalg::singular_values(l);
    let (smax, smin) = (sv[0], sv[m - 1]);
    if smax == 0.0 || smin <= 1e-9 * smax || smin.is_nan() {
        return Err(GraphError::Singular(if smax > 0.0 {
            smin / smax
        } else {
            0.0
        }));
    }
    let scale = l.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let eps = 1e-12 * scale;
    let adj: Vec<Vec<usize>> = (0..m)
        .map(|i| (0..m).filter(|&j| l[[i, j]].abs() > eps).collect())
        .collect();
    bipartite_match(&adj, m).ok_or(GraphError::Singular(smin / smax))
}

fn bipartite_match(adj: &[Vec<usize>], m: usize) -> Option<Vec<usize>> {
    // owner[j] = row currently matched to column j
    let mut owner = vec![usize::MAX; m];
    fn augment(i: usize, adj: &[Vec<usize>], owner: &mut [usize], seen: &mut [bool]) -> bool {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                if owner[j] == usize::MAX || augment(owner[j], adj, owner, seen) {
                    owner[j] = i;
                    return true;
                }
            }
        }
        false
    }
    for i in 0..m {
        let mut seen = vec![false; m];
        if !augment(i, adj, &mut owner, &mut seen) {
            return None;
        }
    }
    let mut sigma = vec![0; m];
    for j in 0..m {
        sigma[owner[j]] = j;
    }
    Some(sigma)
}

/// Enumerates every permutation `sigma` admitted by a binary mask, i.e. with
/// `mask[i, sigma(i)] = 1` for all `i`. Factorial enumeration, capped at
/// `m <= 10`.
pub fn mask_permutations(mask: &ArrayView2<u8>) -> Result<Vec<Vec<usize>>, GraphError> {
    let m = mask.nrows();
    if m > 10 {
        return Err(GraphError::TooLarge(m));
    }
    let mut out = Vec::new();
    let mut sigma = vec![0usize; m];
    let mut used = vec![false; m];
    fn rec(
        i: usize,
        m: usize,
        mask: &ArrayView2<u8>,
        sigma: &mut [usize],
        used: &mut [bool],
        out: &mut Vec<Vec<usize>>,
    ) {
        if i == m {
            out.push(sigma.to_vec());
            return;
        }
        for j in 0..m {
            if !used[j] && mask[[i, j]] == 1 {
                used[j] = true;
                sigma[i] = j;
                rec(i + 1, m, mask, sigma, used, out);
                used[j] = false;
            }
        }
    }
    rec(0, m, mask, &mut sigma, &mut used, &mut out);
    Ok(out)
}

/// Permutation matrices `P` with `P^T` contained in
/// `maximal_preserving_mask(g)`; exactly the symmetries a `g`-preserving map
/// may apply. Factorial enumeration, capped at `m <= 10`.
pub fn preserving_permutations(g: &ArrayView2<u8>) -> Result<Vec<Vec<usize>>, GraphError> {
    let mask = maximal_preserving_mask(g);
    mask_permutations(&mask.view())
}

/// Dense permutation matrix with `P e_i = e_{sigma(i)}`, so `(P^T x)_i =
/// x_{sigma(i)}`.
pub fn permutation_matrix(sigma: &[usize]) -> Array2<f64> {
    let m = sigma.len();
    let mut p = Array2::zeros((m, m));
    for (i, &s) in sigma.iter().enumerate() {
        p[[s, i]] = 1.0;
    }
    p
}

// ---------------------------------------------------------------------------
// CSV serialization: one row of comma-separated 0/1 per line.
// ---------------------------------------------------------------------------

pub fn matrix_to_csv(g: &ArrayView2<u8>) -> String {
    let mut s = String::new();
    for i in 0..g.nrows() {
        let row: Vec<String> = (0..g.ncols()).map(|j| g[[i, j]].to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<Array2<u8>, GraphError> {
    let rows: Vec<Vec<u8>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split(',')
                .map(|tok| match tok.trim() {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(GraphError::Csv(format!("bad entry {other:?}"))),
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(GraphError::Csv("ragged rows".into()));
    }
    let flat: Vec<u8> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n_rows, n_cols), flat).map_err(|e| GraphError::Csv(e.to_string()))
}
