//! Latent-trajectory PCA export and routing statistics.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::numerics::{Result, TensorError};
use crate::recursion::RecursionTrace;

pub const TRAJECTORY_SCHEMA: &str = "#schema=trajectories/v1";
pub const ROUTING_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("bad trajectory file: {0}")]
    Format(String),
}

/// Principal axes of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit rows of length `D`, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fits on `n` row vectors of length `d` (row-major). The covariance is
    /// normalized by `n`. Each component's first nonzero entry is positive.
    pub fn fit(vectors: &[f64], n: usize, d: usize, k: usize) -> Result<Pca> {
        if vectors.len() != n * d {
            return Err(TensorError::invalid("pca", format!("{} values for {n}x{d}", vectors.len())));
        }
        if k == 0 || k > n.min(d) {
            return Err(TensorError::invalid("pca", format!("k={k} must be in 1..={}", n.min(d))));
        }
        let mut mean = vec![0.0; d];
        for row in vectors.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
        }
        let centered = DMatrix::from_fn(n, d, |i, j| vectors[i * d + j] - mean[j]);
        let cov = (centered.transpose() * &centered) / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Vec::with_capacity(k);
        let mut eigenvalues = Vec::with_capacity(k);
        for &idx in &order[..k] {
            let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            if v.iter().find(|x| x.abs() > 1e-12).is_some_and(|&x| x < 0.0) {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            eigenvalues.push(eig.eigenvalues[idx]);
        }
        Ok(Pca { mean, components, eigenvalues })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.iter().zip(v).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum()).collect()
    }

    pub fn project_all(&self, vectors: &[f64]) -> Vec<f64> {
        vectors.chunks(self.dim()).flat_map(|v| self.project(v)).collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &a) in self.components.iter().zip(coords) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += a * v);
        }
        out
    }
}

/// Fits a `k`-component PCA and projects the same vectors (`[n, k]` row-major).
pub fn pca_fit_project(vectors: &[f64], n: usize, d: usize, k: usize) -> Result<(Pca, Vec<f64>)> {
    let pca = Pca::fit(vectors, n, d, k)?;
    let proj = pca.project_all(vectors);
    Ok((pca, proj))
}

/// One token's 2D PCA coordinates at one diffusion step and latent step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub image_id: usize,
    pub diffusion_t: usize,
    pub latent_step: usize,
    pub token_id: usize,
    pub pc1: f64,
    pub pc2: f64,
}

/// Projects every token snapshot onto a 2-component basis fit per image over
/// all of that image's snapshots (every trace and latent step).
pub fn trajectory_records(traces: &[RecursionTrace]) -> Result<Vec<TrajectoryRecord>> {
    let Some(first) = traces.first() else {
        return Err(TensorError::invalid("trajectories", "no traces"));
    };
    let (batch, n, d) = (first.batch, first.tokens_per_image, first.dim);
    if traces.iter().any(|t| t.batch != batch || t.tokens_per_image != n || t.dim != d) {
        return Err(TensorError::invalid("trajectories", "traces disagree on batch or token layout"));
    }
    if traces.iter().any(|t| t.steps.is_empty()) {
        return Err(TensorError::invalid("trajectories", "trace without latent steps"));
    }
    let mut out = Vec::new();
    for image in 0..batch {
        let mut vectors = Vec::new();
        for tr in traces {
            for st in &tr.steps {
                vectors.extend_from_slice(&st.tokens[image * n * d..(image + 1) * n * d]);
            }
        }
        let rows = vectors.len() / d;
        let pca = Pca::fit(&vectors, rows, d, 2.min(d).min(rows))?;
        for tr in traces {
            let t = tr.diffusion_t.get(image).copied().unwrap_or(0);
            for st in &tr.steps {
                for tok in 0..n {
                    let off = (image * n + tok) * d;
                    let pc = pca.project(&st.tokens[off..off + d]);
                    out.push(TrajectoryRecord {
                        image_id: image,
                        diffusion_t: t,
                        latent_step: st.step,
                        token_id: tok,
                        pc1: pc[0],
                        pc2: pc.get(1).copied().unwrap_or(0.0),
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn write_trajectories<W: Write>(
    records: &[TrajectoryRecord],
    mut out: W,
) -> std::result::Result<(), AnalysisError> {
    writeln!(out, "{TRAJECTORY_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories<R: Read>(input: R) -> std::result::Result<Vec<TrajectoryRecord>, AnalysisError> {
    let mut text = String::new();
    let mut input = input;
    input.read_to_string(&mut text)?;
    let body = text
        .strip_prefix(TRAJECTORY_SCHEMA)
        .and_then(|s| s.strip_prefix('\n'))
        .ok_or_else(|| AnalysisError::Format(format!("missing {TRAJECTORY_SCHEMA} header")))?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Writes the trajectory CSV for `traces` to `path`.
pub fn export_trajectories(
    traces: &[RecursionTrace],
    path: &std::path::Path,
) -> std::result::Result<usize, AnalysisError> {
    let records = trajectory_records(traces)?;
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trajectories(&records, file)?;
    Ok(records.len())
}

/// Selection counts for one (diffusion-step bucket, latent step) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub bucket: usize,
    /// Inclusive diffusion-step range covered by the bucket.
    pub t_min: usize,
    pub t_max: usize,
    pub latent_step: usize,
    pub counts: Vec<usize>,
    pub frequencies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub schema_version: u32,
    /// Gate restricted to the current vision tokens.
    pub ablation: bool,
    pub experts: usize,
    pub buckets: usize,
    pub diffusion_steps: usize,
    pub entries: Vec<RoutingStats>,
}

/// Aggregates selections into `buckets` equal ranges of `1..=diffusion_steps`
/// per latent step. Traces without diffusion steps fall into bucket 0.
pub fn routing_stats(traces: &[RecursionTrace], buckets: usize, diffusion_steps: usize) -> Result<RoutingReport> {
    let Some(first) = traces.first() else {
        return Err(TensorError::invalid("routing_stats", "no traces"));
    };
    if buckets == 0 || diffusion_steps == 0 {
        return Err(TensorError::invalid("routing_stats", "buckets and diffusion_steps must be positive"));
    }
    let m = first.experts;
    let max_steps = traces.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    let mut counts = vec![vec![vec![0usize; m]; max_steps]; buckets];
    for tr in traces {
        if tr.experts != m {
            return Err(TensorError::invalid("routing_stats", "traces disagree on the number of experts"));
        }
        let n = tr.tokens_per_image;
        for st in &tr.steps {
            for (row, &e) in st.selected.iter().enumerate() {
                let t = tr.diffusion_t.get(row / n.max(1)).copied().unwrap_or(0);
                let b = if t == 0 { 0 } else { ((t - 1) * buckets / diffusion_steps).min(buckets - 1) };
                counts[b][st.step - 1][e] += 1;
            }
        }
    }
    let mut entries = Vec::new();
    for (b, per_step) in counts.into_iter().enumerate() {
        for (s, c) in per_step.into_iter().enumerate() {
            let total: usize = c.iter().sum();
            if total == 0 {
                continue;
            }
            entries.push(RoutingStats {
                bucket: b,
                t_min: b * diffusion_steps / buckets + 1,
                t_max: (b + 1) * diffusion_steps / buckets,
                latent_step: s + 1,
                frequencies: c.iter().map(|&k| k as f64 / total as f64).collect(),
                counts: c,
            });
        }
    }
    Ok(RoutingReport {
        schema_version: ROUTING_SCHEMA_VERSION,
        ablation: traces.iter().any(|t| t.ablation),
        experts: m,
        buckets,
        diffusion_steps,
        entries,
    })
}

pub fn export_routing_stats(
    traces: &[RecursionTrace],
    buckets: usize,
    diffusion_steps: usize,
    path: &std::path::Path,
) -> std::result::Result<RoutingReport, AnalysisError> {
    let report = routing_stats(traces, buckets, diffusion_steps)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(report)
}
