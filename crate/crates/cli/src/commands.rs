//! Command implementations; every command is a pure function of its inputs
//! on disk, flags and seed.

use mechsparse::graph_algebra::{
    check_graphical_criterion, entanglement_mask, matrix_to_csv, two_cycle_sufficient,
    ConsistencyMode,
};
use mechsparse::latent_models::{
    check_influence_a_cont, check_influence_a_disc, check_influence_z, check_influence_z_expfam,
    check_sufficient_variability, default_variability_probes, one_hot_action_set, ActionKind,
    Family, TransitionSpec,
};
use mechsparse::metrics;
use mechsparse::sparse_vae::{self, load_checkpoint, save_checkpoint, GraphSide, TrainConfig};
use mechsparse::synth_data::{build_decoder, load_dataset, sample_dataset, save_dataset, Dataset};
use ndarray::Array2;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub enum CliError {
    /// Bad flags, missing or malformed artifacts.
    Usage(String),
    /// Training aborted on a non-finite loss.
    Numeric(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Numeric(_) => ExitCode::from(3),
        }
    }
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

type CmdResult = Result<ExitCode, CliError>;

#[allow(clippy::too_many_arguments)]
pub fn generate(
    family: &str,
    d_z: usize,
    d_a: Option<usize>,
    d_x: usize,
    n: usize,
    t: Option<usize>,
    seed: u64,
    obs_sigma: f64,
    edge_prob: f64,
    param_seed: u64,
    hidden: &[usize],
    out: &Path,
) -> CmdResult {
    let family =
        Family::from_name(family).ok_or_else(|| usage(format!("unknown family {family:?}")))?;
    let d_a = d_a.unwrap_or(match family.action_kind() {
        ActionKind::None => 0,
        _ => match family {
            Family::ActionBlockDiag | Family::ActionBlockNonDiag => d_z / 2,
            _ => d_z,
        },
    });
    let spec =
        TransitionSpec::from_family(family, d_z, d_a, edge_prob, param_seed).map_err(usage)?;
    let t = t.unwrap_or(match family.lags_required() {
        0 => 1,
        lags => lags + 1,
    });
    if t < family.lags_required() + 1 && family.lags_required() > 0 {
        return Err(usage(format!(
            "family {family:?} needs t >= {}",
            family.lags_required() + 1
        )));
    }
    let decoder = build_decoder(d_z, d_x, hidden, seed ^ 0x5eed).map_err(usage)?;
    let ds = sample_dataset(&spec, &decoder, n, t, obs_sigma, seed).map_err(usage)?;
    save_dataset(&ds, out).map_err(usage)?;

    println!("wrote dataset to {}", out.display());
    println!("G^z =\n{}", matrix_to_csv(&spec.graph.gz.view()));
    if spec.d_a() > 0 {
        println!("G^a =\n{}", matrix_to_csv(&spec.graph.ga.view()));
    }
    let crit = check_graphical_criterion(&spec.graph);
    println!(
        "graphical criterion: {}",
        if crit.holds { "holds" } else { "violated" }
    );
    match quick_influence(&spec) {
        Some((name, pass)) => println!("{name}: {}", if pass { "pass" } else { "FAIL" }),
        None => println!("no default influence check for this family"),
    }
    Ok(ExitCode::SUCCESS)
}

/// The family's natural influence check, for the generation summary.
fn quick_influence(spec: &TransitionSpec) -> Option<(&'static str, bool)> {
    match spec.family.action_kind() {
        ActionKind::Continuous => check_influence_a_cont(spec, 0, 1e-6, 0)
            .ok()
            .map(|r| ("sufficient influence of a (continuous)", r.pass)),
        ActionKind::Discrete => {
            let set = one_hot_action_set(spec.d_a());
            check_influence_a_disc(spec, &set, 0, 1e-6, 0)
                .ok()
                .map(|r| ("sufficient influence of a (discrete)", r.pass))
        }
        ActionKind::None => {
            if spec.k() == 1 {
                check_influence_z_expfam(spec, 0, 1e-6, 0)
                    .ok()
                    .map(|r| ("sufficient influence of z (exponential family)", r.pass))
            } else {
                check_influence_z(spec, 0, 1e-6, 0)
                    .ok()
                    .map(|r| ("sufficient influence of z (nonparametric)", r.pass))
            }
        }
    }
}

pub fn analyze_graph(dataset: &Path) -> CmdResult {
    let ds = load_dataset(dataset).map_err(usage)?;
    let graph = &ds.meta.spec.graph;
    if graph.n_edges() == 0 {
        println!("warning: the graph has no edges; nothing constrains the representation");
    }
    let crit = check_graphical_criterion(graph);
    println!(
        "graphical criterion: {}",
        if crit.holds {
            "holds (complete disentanglement expected)"
        } else {
            "violated"
        }
    );
    for (i, witness) in crit.witnesses.iter().enumerate() {
        println!("  node {i}: intersection {witness:?}");
    }
    if graph.d_a() == 0 {
        println!(
            "two-cycle sufficient condition: {}",
            two_cycle_sufficient(&graph.gz.view())
        );
    }
    let mode = if graph.d_a() == 0 {
        ConsistencyMode::Z
    } else if graph.gz.iter().all(|&v| v == 0) {
        ConsistencyMode::A
    } else {
        ConsistencyMode::AZ
    };
    let em = entanglement_mask(graph, mode).map_err(usage)?;
    println!(
        "entanglement mask ({mode:?} mode):\n{}",
        matrix_to_csv(&em.mask.view())
    );
    match preserving_permutations_of_mask(&em.mask) {
        Ok(perms) => {
            println!(
                "symmetry permutations admitted by the mask: {}",
                perms.len()
            );
            for p in perms.iter().take(10) {
                println!("  {p:?}");
            }
            if perms.len() > 10 {
                println!("  ...");
            }
        }
        Err(e) => println!("symmetry enumeration skipped: {e}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn preserving_permutations_of_mask(
    mask: &Array2<u8>,
) -> Result<Vec<Vec<usize>>, mechsparse::graph_algebra::GraphError> {
    // The mask already encodes every preservation constraint, so admitted
    // permutations are exactly those under the mask pattern.
    mechsparse::graph_algebra::mask_permutations(&mask.view())
}

pub fn check_influence(
    dataset: &Path,
    assumption: &str,
    n_probe: usize,
    tol: f64,
    seed: u64,
    out: Option<&Path>,
) -> CmdResult {
    let ds = load_dataset(dataset).map_err(usage)?;
    let spec = &ds.meta.spec;
    let report = match assumption {
        "a-cont" => check_influence_a_cont(spec, n_probe, tol, seed).map_err(usage)?,
        "a-disc" => {
            let set = one_hot_action_set(spec.d_a());
            check_influence_a_disc(spec, &set, n_probe, tol, seed).map_err(usage)?
        }
        "z" => check_influence_z(spec, n_probe, tol, seed).map_err(usage)?,
        "z-expfam" => check_influence_z_expfam(spec, n_probe, tol, seed).map_err(usage)?,
        "variability" => {
            let n = if n_probe == 0 {
                4 * spec.k() * spec.d_z()
            } else {
                n_probe
            };
            let probes = default_variability_probes(spec, n, seed);
            check_sufficient_variability(spec, &probes, tol).map_err(usage)?
        }
        other => {
            return Err(usage(format!(
                "unknown assumption {other:?}; expected a-cont, a-disc, z, z-expfam or variability"
            )))
        }
    };
    let json = serde_json::to_string_pretty(&report).map_err(usage)?;
    println!("{json}");
    if let Some(path) = out {
        fs::write(path, &json).map_err(usage)?;
    }
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub struct TrainOverrides {
    pub beta: Option<f64>,
    pub iters: Option<usize>,
    pub seed: Option<u64>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub lr_dual: Option<f64>,
    pub frozen: bool,
    pub side: Option<String>,
    pub config: Option<PathBuf>,
}

pub fn train(dataset: &Path, ov: TrainOverrides, out: &Path) -> CmdResult {
    let ds = load_dataset(dataset).map_err(usage)?;
    let mut cfg = match &ov.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(usage)?;
            serde_json::from_str::<TrainConfig>(&text).map_err(usage)?
        }
        None => TrainConfig::desk(0.0, 30_000, 0),
    };
    // Flags win over the config file.
    if let Some(beta) = ov.beta {
        cfg.beta = beta;
    } else if ov.config.is_none() {
        return Err(usage("either --beta or --config is required"));
    }
    if let Some(iters) = ov.iters {
        cfg.iters = iters;
        cfg.schedule_len = iters / 2;
    }
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(batch) = ov.batch {
        cfg.batch = batch;
    }
    if let Some(lr) = ov.lr {
        cfg.lr_primal = lr;
    }
    if let Some(lr) = ov.lr_dual {
        cfg.lr_dual = lr;
    }
    if ov.frozen {
        cfg.frozen_graph = true;
    }
    if let Some(side) = &ov.side {
        cfg.side = Some(match side.as_str() {
            "a" => GraphSide::Action,
            "z" => GraphSide::Time,
            other => return Err(usage(format!("unknown side {other:?}; expected a or z"))),
        });
    }
    let outcome = sparse_vae::train(&ds, &cfg).map_err(|e| match e {
        sparse_vae::TrainError::NonFinite { iter, .. } => CliError::Numeric(format!(
            "training aborted: non-finite loss at iteration {iter}"
        )),
        other => usage(other),
    })?;
    save_checkpoint(&outcome.model, &cfg, out).map_err(usage)?;
    fs::write(out.join("log.csv"), outcome.log.to_csv()).map_err(usage)?;
    let last = outcome.log.rows.last().unwrap();
    println!(
        "trained {} iterations: elbo {:.3}, expected edges {:.2}, alpha {:.4}",
        cfg.iters, last.elbo, last.l1_edges, last.alpha
    );
    println!("checkpoint written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

/// Flattens the first `max_n` sequences of a ground-truth latent array.
pub fn flatten_latents(ds: &Dataset, max_n: usize) -> Array2<f64> {
    let (n, t, d) = ds.z.dim();
    let n = n.min(max_n);
    let mut out = Array2::zeros((n * t, d));
    for i in 0..n {
        for s in 0..t {
            for k in 0..d {
                out[[i * t + s, k]] = f64::from(ds.z[[i, s, k]]);
            }
        }
    }
    out
}

fn parse_mode(mode: &str) -> Result<ConsistencyMode, CliError> {
    match mode {
        "a" => Ok(ConsistencyMode::A),
        "z" => Ok(ConsistencyMode::Z),
        "az" => Ok(ConsistencyMode::AZ),
        other => Err(usage(format!(
            "unknown mode {other:?}; expected a, z or az"
        ))),
    }
}

pub fn evaluate(
    checkpoint: &Path,
    dataset: &Path,
    mode: &str,
    eval_n: usize,
    out: Option<&Path>,
    dump: Option<&Path>,
    append_csv: Option<&Path>,
) -> CmdResult {
    let mode = parse_mode(mode)?;
    let ds = load_dataset(dataset).map_err(usage)?;
    let (model, cfg) = load_checkpoint(checkpoint).map_err(usage)?;
    let n = eval_n.min(ds.meta.n);
    let z_true = flatten_latents(&ds, n);
    let x_eval = ds.x.slice(ndarray::s![0..n, .., ..]).to_owned();
    let codes = model.encode(&x_eval);
    let learned = model.extract_graph(0.5);
    let report = metrics::evaluate(
        &z_true.view(),
        &codes.view(),
        &ds.meta.spec.graph,
        &learned,
        mode,
    )
    .map_err(usage)?;
    let json = serde_json::to_string_pretty(&report).map_err(usage)?;
    println!(
        "MCC {:.4}  R_con {:.4}  R {:.4}  SHD {:.4}",
        report.mcc, report.r_con, report.r, report.shd
    );
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.join("eval.json"));
    fs::write(&out_path, &json).map_err(usage)?;

    if let Some(dir) = dump {
        fs::create_dir_all(dir).map_err(usage)?;
        let k = metrics::pearson_correlations(&z_true.view(), &codes.view()).map_err(usage)?;
        dump_matrices(dir, &ds, &report, &k).map_err(usage)?;
    }
    if let Some(csv) = append_csv {
        let mut line = String::new();
        if !csv.exists() {
            line.push_str("beta,seed,mcc,r_con,r,shd\n");
        }
        line.push_str(&format!(
            "{},{},{},{},{},{}\n",
            cfg.beta, cfg.seed, report.mcc, report.r_con, report.r, report.shd
        ));
        let existing = fs::read_to_string(csv).unwrap_or_default();
        fs::write(csv, existing + &line).map_err(usage)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn dump_matrices(
    dir: &Path,
    ds: &Dataset,
    report: &metrics::EvalReport,
    k: &Array2<f64>,
) -> std::io::Result<()> {
    let d = report.p_hat.len();
    let l_hat = Array2::from_shape_fn((d, d), |(i, j)| report.l_hat[i][j]);
    let lp = metrics::normalized_coefficient_matrix(&l_hat, &report.p_hat);
    let to_csv = |m: &Array2<f64>| {
        let mut s = String::new();
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols())
                .map(|j| format!("{:.6}", m[[i, j]]))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    };
    fs::write(dir.join("k.csv"), to_csv(k))?;
    fs::write(dir.join("lhat_phat.csv"), to_csv(&lp))?;
    // Learned graph permuted into ground-truth order.
    let g = &report.graph;
    let sigma = &report.p_hat;
    let gz_perm = Array2::from_shape_fn((d, d), |(i, j)| g.gz[[sigma[i], sigma[j]]]);
    fs::write(dir.join("gz_perm.csv"), matrix_to_csv(&gz_perm.view()))?;
    if g.d_a() > 0 {
        let ga_perm = Array2::from_shape_fn((d, g.d_a()), |(i, l)| g.ga[[sigma[i], l]]);
        fs::write(dir.join("ga_perm.csv"), matrix_to_csv(&ga_perm.view()))?;
    }
    fs::write(
        dir.join("gz_true.csv"),
        matrix_to_csv(&ds.meta.spec.graph.gz.view()),
    )?;
    if ds.meta.d_a > 0 {
        fs::write(
            dir.join("ga_true.csv"),
            matrix_to_csv(&ds.meta.spec.graph.ga.view()),
        )?;
    }
    Ok(())
}

pub fn udr(
    dataset: &Path,
    runs: &[PathBuf],
    min_edges: Option<usize>,
    eval_n: usize,
    out: Option<&Path>,
) -> CmdResult {
    if runs.len() < 2 {
        return Err(usage(">= 2 runs required for UDR"));
    }
    let ds = load_dataset(dataset).map_err(usage)?;
    let min_edges = min_edges.unwrap_or(ds.meta.d_z);
    let n = eval_n.min(ds.meta.n);
    let x_eval = ds.x.slice(ndarray::s![0..n, .., ..]).to_owned();

    // Group runs by beta.
    struct Run {
        beta: f64,
        codes: Array2<f64>,
        edges: usize,
        shd: Option<f64>,
    }
    let z_true = flatten_latents(&ds, n);
    let mut loaded = Vec::new();
    for dir in runs {
        let (model, cfg) = load_checkpoint(dir).map_err(usage)?;
        let codes = model.encode(&x_eval);
        let learned = model.extract_graph(0.5);
        let edges = learned.n_edges();
        let shd = metrics::r_con(
            &z_true.view(),
            &codes.view(),
            &ds.meta.spec.graph,
            ConsistencyMode::A,
        )
        .ok()
        .and_then(|(_, _, p_hat)| metrics::shd(&ds.meta.spec.graph, &learned, &p_hat).ok());
        loaded.push(Run {
            beta: cfg.beta,
            codes,
            edges,
            shd,
        });
    }
    let mut betas: Vec<f64> = loaded.iter().map(|r| r.beta).collect();
    betas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    betas.dedup();

    let mut table = Vec::new();
    for &beta in &betas {
        let group: Vec<&Run> = loaded.iter().filter(|r| r.beta == beta).collect();
        let codes: Vec<Array2<f64>> = group.iter().map(|r| r.codes.clone()).collect();
        let edges: Vec<usize> = group.iter().map(|r| r.edges).collect();
        let score = metrics::udr(&codes, &edges, min_edges).ok();
        let median_shd = {
            let mut v: Vec<f64> = group.iter().filter_map(|r| r.shd).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.get(v.len() / 2).copied()
        };
        table.push((beta, group.len(), score, median_shd));
    }
    let selected = table
        .iter()
        .filter_map(|(beta, _, score, _)| score.as_ref().map(|s| (*beta, s.score)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(beta, _)| beta);

    let mut csv = String::from("beta,runs,udr,median_shd,selected\n");
    println!("beta    runs  UDR      median SHD  selected");
    for (beta, n_runs, score, median_shd) in &table {
        let star = Some(*beta) == selected;
        let udr_text = score
            .as_ref()
            .map(|s| format!("{:.4}", s.score))
            .unwrap_or_else(|| "excluded".into());
        let shd_text = median_shd
            .map(|s| format!("{s:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{beta:<7} {n_runs:<5} {udr_text:<8} {shd_text:<11} {}",
            if star { "*" } else { "" }
        );
        csv.push_str(&format!(
            "{beta},{n_runs},{udr_text},{shd_text},{}\n",
            if star { "*" } else { "" }
        ));
    }
    if let Some(path) = out {
        fs::write(path, csv).map_err(usage)?;
    }
    if selected.is_none() {
        return Err(usage("no admissible runs after the edge filter"));
    }
    Ok(ExitCode::SUCCESS)
}
