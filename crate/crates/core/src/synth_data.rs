//! Ground-truth decoder construction and observation dataset sampling.
//!
//! Arrays are computed in f64 and stored as little-endian f32; a dataset
//! directory holds `meta.json` plus raw `z.f32`/`x.f32`/`a.f32` blobs in
//! row-major `[n][t][dim]` order, with the graphs additionally dumped as CSV.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::graph_algebra::matrix_to_csv;
use crate::latent_models::{
    one_hot_action_set, sample_transition, ActionKind, LatentError, TransitionSpec,
};
use crate::linalg;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("d_z must not exceed d_x (got {0} > {1})")]
    LatentWiderThanObservation(usize, usize),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("file {0} holds {1} floats, expected {2}")]
    ShapeMismatch(String, usize, usize),
    #[error("meta is inconsistent: {0}")]
    BadMeta(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Rescale factor applied to every orthogonalized weight matrix:
/// `sqrt(2 / (1 + slope^2)) * sqrt(2 / (d_in + d_out))`.
pub fn weight_rescale(d_in: usize, d_out: usize, slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt() * (2.0 / (d_in + d_out) as f64).sqrt()
}

/// A random MLP decoder with Leaky-ReLU hidden activations whose weight
/// matrices are orthogonalized and rescaled at construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderSpec {
    /// Layer widths `[d_z, hidden..., d_x]`.
    pub widths: Vec<usize>,
    /// Per-layer weights, shape `out x in`.
    pub weights: Vec<Array2<f64>>,
    pub negative_slope: f64,
    pub seed: u64,
}

/// Builds the decoder: Gaussian-initialized weights, per-layer QR
/// orthogonalization (orthonormal columns when `out >= in`, orthonormal rows
/// otherwise), rescaled by [`weight_rescale`] interpreted as the per-entry
/// standard deviation of the matching Gaussian layer. The orthogonal matrix
/// is therefore multiplied by `rescale * sqrt(max(d_in, d_out))`, which gives
/// it the same operator magnitude as the Gaussian layer; a bare `rescale`
/// would shrink each layer's gain to ~0.3 and bury the signal under the
/// observation noise.
pub fn build_decoder(
    d_z: usize,
    d_x: usize,
    hidden: &[usize],
    seed: u64,
) -> Result<DecoderSpec, DataError> {
    if d_z > d_x {
        return Err(DataError::LatentWiderThanObservation(d_z, d_x));
    }
    let slope = 0.2;
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(d_z);
    widths.extend_from_slice(hidden);
    widths.push(d_x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(widths.len() - 1);
    for pair in widths.windows(2) {
        let (d_in, d_out) = (pair[0], pair[1]);
        let raw = Array2::from_shape_fn((d_out, d_in), |_| rng.sample::<f64, _>(StandardNormal));
        let ortho = orthogonalize(&raw);
        let scale = layer_scale(d_in, d_out, slope);
        weights.push(ortho.mapv(|v| v * scale));
    }
    Ok(DecoderSpec {
        widths,
        weights,
        negative_slope: slope,
        seed,
    })
}

/// Column (or row) norm applied to the orthogonalized weights.
pub fn layer_scale(d_in: usize, d_out: usize, slope: f64) -> f64 {
    weight_rescale(d_in, d_out, slope) * (d_in.max(d_out) as f64).sqrt()
}

fn orthogonalize(w: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = w.dim();
    if rows >= cols {
        let na = linalg::to_na(&w.view());
        let qr = na.qr();
        let q = qr.q();
        linalg::from_na(&q)
    } else {
        // Wide matrix: orthonormal rows via QR of the transpose.
        let t = w.t().to_owned();
        let na = linalg::to_na(&t.view());
        let q = na.qr().q();
        linalg::from_na(&q.transpose())
    }
}

impl DecoderSpec {
    pub fn d_z(&self) -> usize {
        self.widths[0]
    }

    pub fn d_x(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn forward(&self, z: &ArrayView1<f64>) -> Array1<f64> {
        let mut h = z.to_owned();
        let last = self.weights.len() - 1;
        for (l, w) in self.weights.iter().enumerate() {
            h = w.dot(&h);
            if l < last {
                h.mapv_inplace(|v| if v >= 0.0 { v } else { self.negative_slope * v });
            }
        }
        h
    }

    /// Jacobian through the Leaky-ReLU pieces (exact away from the kinks).
    pub fn jacobian(&self, z: &ArrayView1<f64>) -> Array2<f64> {
        let mut h = z.to_owned();
        let mut jac = Array2::eye(self.d_z());
        let last = self.weights.len() - 1;
        for (l, w) in self.weights.iter().enumerate() {
            jac = w.dot(&jac);
            h = w.dot(&h);
            if l < last {
                for (i, v) in h.iter().enumerate() {
                    if *v < 0.0 {
                        let mut row = jac.row_mut(i);
                        row.mapv_inplace(|x| x * self.negative_slope);
                    }
                }
                h.mapv_inplace(|v| if v >= 0.0 { v } else { self.negative_slope * v });
            }
        }
        jac
    }

    /// Smallest singular value of the Jacobian at `z`; the injectivity proxy.
    pub fn min_jacobian_singular_value(&self, z: &ArrayView1<f64>) -> f64 {
        let jac = self.jacobian(z);
        let sv = linalg::singular_values(&jac.view());
        *sv.last().unwrap()
    }
}

/// Generation metadata; everything needed to regenerate or validate arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: TransitionSpec,
    pub decoder_seed: u64,
    pub decoder_hidden: Vec<usize>,
    pub obs_sigma: f64,
    pub d_z: usize,
    pub d_a: usize,
    pub d_x: usize,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
}

/// Sequences of observations, actions and ground-truth latents.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Array3<f32>,
    pub a: Array3<f32>,
    pub z: Array3<f32>,
    pub meta: DatasetMeta,
}

/// Samples a dataset: latents from the transition model with standard-normal
/// initial latents for time families, actions uniform on `[-2, 2]^{d_a}`
/// (uniform over the one-hot set for intervention families), observations
/// `x = f(z) + obs_sigma * noise`. Sequence `n` draws from RNG stream `n`, so
/// the output does not depend on evaluation order.
pub fn sample_dataset(
    spec: &TransitionSpec,
    decoder: &DecoderSpec,
    n: usize,
    t: usize,
    obs_sigma: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    let (d_z, d_a, d_x) = (spec.d_z(), spec.d_a(), decoder.d_x());
    if decoder.d_z() != d_z {
        return Err(DataError::BadMeta(format!(
            "decoder expects d_z = {}, spec has {}",
            decoder.d_z(),
            d_z
        )));
    }
    let n_lags = spec.family.lags_required();
    let discrete_actions = matches!(spec.family.action_kind(), ActionKind::Discrete);
    let action_set = one_hot_action_set(d_a);

    let mut x = Array3::zeros((n, t, d_x));
    let mut a = Array3::zeros((n, t, d_a));
    let mut z = Array3::zeros((n, t, d_z));

    for seq in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(seq as u64);
        let mut hist: Vec<Array1<f64>> = Vec::with_capacity(t);
        for step in 0..t {
            let act: Array1<f64> = if d_a == 0 {
                Array1::zeros(0)
            } else if discrete_actions {
                action_set[rng.gen_range(0..action_set.len())].clone()
            } else {
                Array1::from_shape_fn(d_a, |_| rng.gen_range(-2.0..2.0))
            };
            let zt: Array1<f64> = if step < n_lags {
                // Initial latents of time families are standard normal.
                Array1::from_shape_fn(d_z, |_| rng.sample::<f64, _>(StandardNormal))
            } else {
                let lags: Vec<ArrayView1<f64>> =
                    (1..=n_lags).map(|back| hist[step - back].view()).collect();
                sample_transition(spec, &lags, &act.view(), &mut rng)?
            };
            // Round to the stored precision before decoding so that the
            // saved arrays satisfy x = f(z) + noise exactly.
            let zt = zt.mapv(|v| v as f32 as f64);
            let obs = decoder.forward(&zt.view());
            for k in 0..d_x {
                let noise: f64 = rng.sample(StandardNormal);
                x[[seq, step, k]] = (obs[k] + obs_sigma * noise) as f32;
            }
            for k in 0..d_a {
                a[[seq, step, k]] = act[k] as f32;
            }
            for k in 0..d_z {
                z[[seq, step, k]] = zt[k] as f32;
            }
            hist.push(zt);
        }
    }

    Ok(Dataset {
        x,
        a,
        z,
        meta: DatasetMeta {
            spec: spec.clone(),
            decoder_seed: decoder.seed,
            decoder_hidden: decoder.widths[1..decoder.widths.len() - 1].to_vec(),
            obs_sigma,
            d_z,
            d_a,
            d_x,
            n,
            t,
            seed,
        },
    })
}

fn write_f32(path: &Path, data: &[f32]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() != expected * 4 {
        return Err(DataError::ShapeMismatch(
            path.display().to_string(),
            bytes.len() / 4,
            expected,
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = serde_json::to_string_pretty(&ds.meta)?;
    let mut f = fs::File::create(dir.join("meta.json")).map_err(io_err(dir))?;
    f.write_all(meta.as_bytes()).map_err(io_err(dir))?;
    write_f32(&dir.join("z.f32"), ds.z.as_slice().unwrap())?;
    write_f32(&dir.join("x.f32"), ds.x.as_slice().unwrap())?;
    write_f32(&dir.join("a.f32"), ds.a.as_slice().unwrap())?;
    fs::write(
        dir.join("gz.csv"),
        matrix_to_csv(&ds.meta.spec.graph.gz.view()),
    )
    .map_err(io_err(dir))?;
    if ds.meta.d_a > 0 {
        fs::write(
            dir.join("ga.csv"),
            matrix_to_csv(&ds.meta.spec.graph.ga.view()),
        )
        .map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    if meta.spec.d_z() != meta.d_z || meta.spec.d_a() != meta.d_a {
        return Err(DataError::BadMeta(format!(
            "spec graph is {}x{} latents/actions but meta says {}x{}",
            meta.spec.d_z(),
            meta.spec.d_a(),
            meta.d_z,
            meta.d_a
        )));
    }
    let (n, t) = (meta.n, meta.t);
    let z = read_f32(&dir.join("z.f32"), n * t * meta.d_z)?;
    let x = read_f32(&dir.join("x.f32"), n * t * meta.d_x)?;
    let a = read_f32(&dir.join("a.f32"), n * t * meta.d_a)?;
    let to3 = |v: Vec<f32>, d: usize, name: &str| {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DataError::BadMeta(format!(
                "{name} holds non-finite entries"
            )));
        }
        Array3::from_shape_vec((n, t, d), v)
            .map_err(|_| DataError::BadMeta(format!("{name} shape mismatch")))
    };
    Ok(Dataset {
        z: to3(z, meta.d_z, "z")?,
        x: to3(x, meta.d_x, "x")?,
        a: to3(a, meta.d_a, "a")?,
        meta,
    })
}

/// Rebuilds the decoder recorded in a dataset's metadata.
pub fn decoder_from_meta(meta: &DatasetMeta) -> Result<DecoderSpec, DataError> {
    build_decoder(meta.d_z, meta.d_x, &meta.decoder_hidden, meta.decoder_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_models::TransitionSpec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rescale_factor_matches_hand_value() {
        // d_in = d_out = 20: sqrt(2/1.04) * sqrt(2/40) = 0.31008...
        assert_abs_diff_eq!(weight_rescale(20, 20, 0.2), 0.310087, epsilon = 1e-6);
    }

    #[test]
    fn degenerate_one_by_one_decoder() {
        let dec = build_decoder(1, 1, &[], 3).unwrap();
        let w = &dec.weights[0];
        assert_eq!(w.dim(), (1, 1));
        // Single orthonormal column is +-1, rescaled.
        assert_abs_diff_eq!(w[[0, 0]].abs(), layer_scale(1, 1, 0.2), epsilon = 1e-12);
    }

    #[test]
    fn decoder_columns_are_orthogonal_with_equal_norms() {
        let dec = build_decoder(5, 10, &[20, 20, 20], 7).unwrap();
        for (w, pair) in dec.weights.iter().zip(dec.widths.windows(2)) {
            let (d_in, d_out) = (pair[0], pair[1]);
            let scale = layer_scale(d_in, d_out, 0.2);
            let gram = if d_out >= d_in {
                w.t().dot(w)
            } else {
                w.dot(&w.t())
            };
            for i in 0..gram.nrows() {
                for j in 0..gram.ncols() {
                    let expect = if i == j { scale * scale } else { 0.0 };
                    assert_abs_diff_eq!(gram[[i, j]], expect, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn decoder_jacobian_is_full_rank() {
        let dec = build_decoder(5, 10, &[20, 20, 20], 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let z = Array1::from_shape_fn(5, |_| rng.sample::<f64, _>(StandardNormal));
            let smin = dec.min_jacobian_singular_value(&z.view());
            assert!(smin > 1e-6, "min singular value {smin}");
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let dec = build_decoder(3, 6, &[8, 8], 2).unwrap();
        let z = Array1::from_vec(vec![0.3, -0.7, 1.1]);
        let jac = dec.jacobian(&z.view());
        let h = 1e-6;
        for j in 0..3 {
            let mut zp = z.clone();
            zp[j] += h;
            let fp = dec.forward(&zp.view());
            zp[j] -= 2.0 * h;
            let fm = dec.forward(&zp.view());
            for i in 0..6 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((fd - jac[[i, j]]).abs() < 1e-6, "({i},{j})");
            }
        }
    }

    #[test]
    fn rejects_latent_wider_than_observation() {
        assert!(build_decoder(4, 3, &[8], 0).is_err());
    }

    #[test]
    fn zero_noise_reproduces_decoder_output() {
        let spec = TransitionSpec::action_diag(3);
        let dec = build_decoder(3, 6, &[8], 1).unwrap();
        let ds = sample_dataset(&spec, &dec, 10, 1, 0.0, 42).unwrap();
        for n in 0..10 {
            let z = Array1::from_shape_fn(3, |k| f64::from(ds.z[[n, 0, k]]));
            let fx = dec.forward(&z.view());
            for k in 0..6 {
                // f32 storage of the exact decoder output.
                assert_eq!(ds.x[[n, 0, k]], fx[k] as f32);
            }
        }
    }

    #[test]
    fn determinism_and_round_trip() {
        let spec = TransitionSpec::time_diag(3);
        let dec = build_decoder(3, 5, &[8], 9).unwrap();
        let d1 = sample_dataset(&spec, &dec, 20, 2, 0.01, 7).unwrap();
        let d2 = sample_dataset(&spec, &dec, 20, 2, 0.01, 7).unwrap();
        assert_eq!(d1.x, d2.x);
        assert_eq!(d1.z, d2.z);

        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d1, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.x, d1.x);
        assert_eq!(loaded.a, d1.a);
        assert_eq!(loaded.z, d1.z);
        assert_eq!(loaded.meta.n, 20);

        // Truncated blob is rejected.
        let x_path = dir.path().join("x.f32");
        let bytes = fs::read(&x_path).unwrap();
        fs::write(&x_path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::ShapeMismatch(..))
        ));
        fs::write(&x_path, &bytes).unwrap();

        // Inconsistent meta dims are rejected.
        let meta_path = dir.path().join("meta.json");
        let text = fs::read_to_string(&meta_path).unwrap();
        let mut meta: DatasetMeta = serde_json::from_str(&text).unwrap();
        meta.d_z = 4;
        fs::write(&meta_path, serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn meta_round_trip_preserves_family_parameters() {
        // A spec carrying a sampled weight matrix must survive the JSON trip.
        let spec = TransitionSpec::multi_target_interv_time(
            crate::latent_models::lower_triangular(3),
            ndarray::array![[1u8, 1, 0], [1, 0, 1], [0, 1, 1]],
            9,
        )
        .unwrap();
        let dec = build_decoder(3, 5, &[8], 4).unwrap();
        let ds = sample_dataset(&spec, &dec, 5, 2, 0.01, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.meta.spec, spec);
    }

    #[test]
    fn action_marginals_match_uniform_law() {
        let spec = TransitionSpec::action_diag(2);
        let dec = build_decoder(2, 4, &[8], 3).unwrap();
        let ds = sample_dataset(&spec, &dec, 100_000, 1, 0.01, 11).unwrap();
        let vals: Vec<f64> = ds.a.iter().map(|&v| f64::from(v)).collect();
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        let expect = 2.0 / 3.0f64.sqrt();
        assert!(
            (std - expect).abs() / expect < 0.02,
            "std {std} vs {expect}"
        );
    }

    #[test]
    fn observation_noise_scale_is_respected() {
        let spec = TransitionSpec::action_diag(2);
        let dec = build_decoder(2, 4, &[8], 3).unwrap();
        let ds = sample_dataset(&spec, &dec, 100_000, 1, 0.01, 13).unwrap();
        let mut sq = 0.0;
        let mut count = 0usize;
        for n in 0..ds.meta.n {
            let z = Array1::from_shape_fn(2, |k| f64::from(ds.z[[n, 0, k]]));
            let fx = dec.forward(&z.view());
            for k in 0..4 {
                sq += (f64::from(ds.x[[n, 0, k]]) - fx[k]).powi(2);
                count += 1;
            }
        }
        let std = (sq / count as f64).sqrt();
        assert!((std - 0.01).abs() / 0.01 < 0.1, "noise std {std}");
    }
}
