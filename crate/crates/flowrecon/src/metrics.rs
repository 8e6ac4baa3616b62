//! Sample-quality metrics and posterior statistics.
//!
//! Precision/recall/density/coverage on k-nearest-neighbor manifolds,
//! pixel-wise posterior statistics (mean / std / absolute error), k-means
//! mode clustering, and replicate variance studies for the sampling schemes.
//! Distances are Euclidean on raw flattened coordinates.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sampling::{self, PssGrouping, Scheme};

/// Posterior samples plus optional image shape and log-densities.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub samples: Array2<f64>,
    pub image_shape: Option<(usize, usize)>,
    pub log_densities: Option<Vec<f64>>,
}

impl PosteriorSamples {
    pub fn new(samples: Array2<f64>) -> Self {
        PosteriorSamples { samples, image_shape: None, log_densities: None }
    }

    pub fn n(&self) -> usize {
        self.samples.nrows()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }
}

/// Precision / recall / density / coverage report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrdcReport {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub k: usize,
}

fn pairwise_distances(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, n) = (a.nrows(), b.nrows());
    let d = a.ncols();
    let mut out = Array2::zeros((m, n));
    let a_flat: Vec<f64> = a.iter().cloned().collect();
    let b_flat: Vec<f64> = b.iter().cloned().collect();
    out.as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            let ar = &a_flat[i * d..(i + 1) * d];
            for (j, o) in row.iter_mut().enumerate() {
                let br = &b_flat[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for (x, y) in ar.iter().zip(br) {
                    let diff = x - y;
                    acc += diff * diff;
                }
                *o = acc.sqrt();
            }
        });
    out
}

/// Distance to the k-th nearest *other* row within one point set.
fn knn_radii(points: &Array2<f64>, k: usize) -> Vec<f64> {
    let dist = pairwise_distances(points, points);
    let n = points.nrows();
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> =
                (0..n).filter(|&j| j != i).map(|j| dist[[i, j]]).collect();
            row.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite distance"));
            row[k - 1]
        })
        .collect()
}

/// k-nearest-neighbor manifold metrics between a real and a generated set.
///
/// With `r_i` the k-NN radius of real point `i` and `f_j` of fake point `j`:
/// precision is the fraction of fakes inside some real ball, recall the
/// fraction of reals inside some fake ball, density the ball-membership count
/// normalized by `k * n_fake`, and coverage the fraction of real balls that
/// contain at least one fake.
pub fn prdc(real: &Array2<f64>, fake: &Array2<f64>, k: usize) -> Result<PrdcReport> {
    if real.ncols() != fake.ncols() {
        return Err(Error::dimension(format!(
            "real width {} vs fake width {}",
            real.ncols(),
            fake.ncols()
        )));
    }
    if k == 0 || k >= real.nrows() || k >= fake.nrows() {
        return Err(Error::config(format!(
            "prdc needs 1 <= k < sample counts (k={k}, m={}, n={})",
            real.nrows(),
            fake.nrows()
        )));
    }
    let r = knn_radii(real, k);
    let f = knn_radii(fake, k);
    let dist = pairwise_distances(real, fake);
    let (m, n) = dist.dim();

    let mut fake_in_some_real = vec![false; n];
    let mut real_in_some_fake = vec![false; m];
    let mut covered = vec![false; m];
    let mut membership: usize = 0;
    for i in 0..m {
        for j in 0..n {
            let d = dist[[i, j]];
            if d <= r[i] {
                fake_in_some_real[j] = true;
                covered[i] = true;
                membership += 1;
            }
            if d <= f[j] {
                real_in_some_fake[i] = true;
            }
        }
    }
    Ok(PrdcReport {
        precision: fake_in_some_real.iter().filter(|&&b| b).count() as f64 / n as f64,
        recall: real_in_some_fake.iter().filter(|&&b| b).count() as f64 / m as f64,
        density: membership as f64 / (k * n) as f64,
        coverage: covered.iter().filter(|&&b| b).count() as f64 / m as f64,
        k,
    })
}

/// Pixel-wise posterior statistics.
#[derive(Debug, Clone)]
pub struct StatsReport {
    pub mean_image: Array2<f64>,
    pub std_image: Array2<f64>,
    pub abs_error_image: Option<Array2<f64>>,
    pub mean_of_std: f64,
    pub mean_abs_error: Option<f64>,
}

/// Mean, population standard deviation, and (given ground truth) absolute
/// error of the posterior mean, all pixel-wise. Samples are rows; the image
/// shape defaults to `1 x d`.
pub fn posterior_stats(ps: &PosteriorSamples, ground_truth: Option<&Array2<f64>>) -> Result<StatsReport> {
    let n = ps.n();
    let d = ps.dim();
    let shape = ps.image_shape.unwrap_or((1, d));
    if shape.0 * shape.1 != d {
        return Err(Error::dimension(format!(
            "image shape {:?} does not cover dimension {d}",
            shape
        )));
    }
    if let Some(gt) = ground_truth {
        if gt.dim() != shape {
            return Err(Error::dimension(format!(
                "ground truth shape {:?} vs image shape {:?}",
                gt.dim(),
                shape
            )));
        }
    }
    let mut mean = vec![0.0; d];
    for row in ps.samples.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for row in ps.samples.rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let diff = v - m;
            *s += diff * diff;
        }
    }
    for s in &mut var {
        *s = (*s / n as f64).sqrt();
    }
    let mean_image = Array2::from_shape_vec(shape, mean).expect("shape");
    let std_image = Array2::from_shape_vec(shape, var).expect("shape");
    let mean_of_std = std_image.iter().sum::<f64>() / d as f64;
    let (abs_error_image, mean_abs_error) = match ground_truth {
        Some(gt) => {
            let err = (&mean_image - gt).mapv(f64::abs);
            let mae = err.iter().sum::<f64>() / d as f64;
            (Some(err), Some(mae))
        }
        None => (None, None),
    };
    Ok(StatsReport { mean_image, std_image, abs_error_image, mean_of_std, mean_abs_error })
}

/// Peak signal-to-noise ratio in dB.
pub fn psnr(reference: &Array2<f64>, reconstruction: &Array2<f64>, peak: f64) -> Result<f64> {
    if reference.dim() != reconstruction.dim() {
        return Err(Error::dimension(format!(
            "psnr shapes {:?} vs {:?}",
            reference.dim(),
            reconstruction.dim()
        )));
    }
    let mse = reference
        .iter()
        .zip(reconstruction.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Result of [`mode_cluster`].
#[derive(Debug, Clone)]
pub struct ModeClustering {
    pub labels: Vec<usize>,
    pub per_mode: Vec<StatsReport>,
    /// Within-cluster sum of squares at convergence.
    pub wcss: f64,
}

fn kmeans_once(
    samples: &Array2<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iters: usize,
) -> (Vec<usize>, f64) {
    let n = samples.nrows();
    let d = samples.ncols();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < k {
        let c = rng.random_range(0..n);
        if !chosen.contains(&c) {
            chosen.push(c);
            centers.push(samples.row(c).to_vec());
        }
    }
    let mut labels = vec![0usize; n];
    let mut wcss = f64::INFINITY;
    for _ in 0..max_iters {
        let mut new_wcss = 0.0;
        for i in 0..n {
            let row = samples.row(i);
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d2: f64 = row.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.1 {
                    best = (c, d2);
                }
            }
            labels[i] = best.0;
            new_wcss += best.1;
        }
        // Objective never increases across Lloyd iterations.
        debug_assert!(new_wcss <= wcss + 1e-9);
        let converged = (wcss - new_wcss).abs() < 1e-12;
        wcss = new_wcss;
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; d]; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(samples.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (ctr, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *ctr = s / counts[c] as f64;
                }
            }
        }
        if converged {
            break;
        }
    }
    (labels, wcss)
}

/// k-means mode clustering with restarts. Clusters are ordered by ascending
/// mean absolute error when ground truth is available, by descending size
/// otherwise; labels are renumbered accordingly.
pub fn mode_cluster(
    ps: &PosteriorSamples,
    k_modes: usize,
    seed: u64,
    ground_truth: Option<&Array2<f64>>,
) -> Result<ModeClustering> {
    let n = ps.n();
    if k_modes == 0 || n < k_modes {
        return Err(Error::config(format!("need 1 <= k_modes <= n (k={k_modes}, n={n})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..10 {
        let (labels, wcss) = kmeans_once(&ps.samples, k_modes, &mut rng, 100);
        if best.as_ref().map_or(true, |(_, b)| wcss < *b) {
            best = Some((labels, wcss));
        }
    }
    let (labels, wcss) = best.unwrap();

    // Per-cluster stats, then reorder.
    let mut cluster_stats: Vec<(usize, StatsReport, usize)> = Vec::new();
    for c in 0..k_modes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let mut sub = Array2::zeros((members.len(), ps.dim()));
        for (r, &i) in members.iter().enumerate() {
            sub.row_mut(r).assign(&ps.samples.row(i));
        }
        let sub_ps = PosteriorSamples {
            samples: sub,
            image_shape: ps.image_shape,
            log_densities: None,
        };
        let stats = posterior_stats(&sub_ps, ground_truth)?;
        cluster_stats.push((c, stats, members.len()));
    }
    match ground_truth {
        Some(_) => cluster_stats.sort_by(|a, b| {
            a.1.mean_abs_error
                .unwrap()
                .partial_cmp(&b.1.mean_abs_error.unwrap())
                .expect("finite errors")
        }),
        None => cluster_stats.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0))),
    }
    let mut relabel = vec![usize::MAX; k_modes];
    for (new_idx, (old, _, _)) in cluster_stats.iter().enumerate() {
        relabel[*old] = new_idx;
    }
    let labels: Vec<usize> = labels.iter().map(|&c| relabel[c]).collect();
    let per_mode: Vec<StatsReport> = cluster_stats.into_iter().map(|(_, s, _)| s).collect();
    Ok(ModeClustering { labels, per_mode, wcss })
}

/// Test functions for the variance study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestFunction {
    /// `g(u) = sum_i u_i`: pure additive main effects.
    Additive,
    /// `g(u) = prod_i sin(2 pi u_i)`: pure interaction.
    ProductSines,
    Constant,
}

impl TestFunction {
    pub fn parse(s: &str) -> Result<TestFunction> {
        match s.to_ascii_lowercase().as_str() {
            "additive" => Ok(TestFunction::Additive),
            "product-sines" | "product_sines" | "sines" => Ok(TestFunction::ProductSines),
            "constant" => Ok(TestFunction::Constant),
            other => Err(Error::config(format!("unknown test function '{other}'"))),
        }
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        match self {
            TestFunction::Additive => u.iter().sum(),
            TestFunction::ProductSines => {
                u.iter().map(|&x| (2.0 * std::f64::consts::PI * x).sin()).product()
            }
            TestFunction::Constant => 1.0,
        }
    }
}

/// Replicate variance of the design mean of `g` for one scheme.
#[derive(Debug, Clone)]
pub struct VarianceStudyRow {
    pub scheme: Scheme,
    pub variance: f64,
    pub ratio_vs_srs: f64,
}

/// Runs `replicates` designs per scheme and reports the variance of the
/// design mean of `g`, plus its ratio against simple random sampling.
pub fn mc_variance_study(
    schemes: &[Scheme],
    g: TestFunction,
    n: usize,
    d: usize,
    replicates: usize,
    seed: u64,
    grouping: Option<&PssGrouping>,
) -> Result<Vec<VarianceStudyRow>> {
    if replicates < 30 {
        return Err(Error::config(format!("variance study needs >= 30 replicates, got {replicates}")));
    }
    let mean_for = |scheme: Scheme, rep: u64| -> Result<f64> {
        let design = sampling::design(scheme, n, d, seed.wrapping_add(rep), grouping, 10)?;
        let mut acc = 0.0;
        for row in design.points.rows() {
            acc += g.eval(row.as_slice().expect("contiguous"));
        }
        Ok(acc / n as f64)
    };
    let variance_of = |scheme: Scheme| -> Result<f64> {
        let means: Result<Vec<f64>> = (0..replicates).map(|r| mean_for(scheme, r as u64)).collect();
        let means = means?;
        let m = means.iter().sum::<f64>() / means.len() as f64;
        Ok(means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / means.len() as f64)
    };
    let srs_var = variance_of(Scheme::Srs)?;
    schemes
        .iter()
        .map(|&scheme| {
            let v = variance_of(scheme)?;
            let ratio = if srs_var > 0.0 { v / srs_var } else { if v > 0.0 { f64::INFINITY } else { 0.0 } };
            Ok(VarianceStudyRow { scheme, variance: v, ratio_vs_srs: ratio })
        })
        .collect()
}

/// Literal O(m n d) PRDC used as the oracle for the optimized path.
pub fn prdc_reference(real: &Array2<f64>, fake: &Array2<f64>, k: usize) -> Result<PrdcReport> {
    if k == 0 || k >= real.nrows() || k >= fake.nrows() {
        return Err(Error::config("prdc_reference needs 1 <= k < sample counts"));
    }
    let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let radius = |pts: &Array2<f64>, i: usize| -> f64 {
        let mut ds: Vec<f64> = (0..pts.nrows())
            .filter(|&j| j != i)
            .map(|j| dist(pts.row(i), pts.row(j)))
            .collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ds[k - 1]
    };
    let m = real.nrows();
    let n = fake.nrows();
    let r: Vec<f64> = (0..m).map(|i| radius(real, i)).collect();
    let f: Vec<f64> = (0..n).map(|j| radius(fake, j)).collect();

    let mut precision = 0;
    let mut density = 0usize;
    for j in 0..n {
        let mut inside = false;
        for i in 0..m {
            if dist(real.row(i), fake.row(j)) <= r[i] {
                inside = true;
                density += 1;
            }
        }
        if inside {
            precision += 1;
        }
    }
    let mut recall = 0;
    let mut coverage = 0;
    for i in 0..m {
        if (0..n).any(|j| dist(real.row(i), fake.row(j)) <= f[j]) {
            recall += 1;
        }
        if (0..n).any(|j| dist(real.row(i), fake.row(j)) <= r[i]) {
            coverage += 1;
        }
    }
    Ok(PrdcReport {
        precision: precision as f64 / n as f64,
        recall: recall as f64 / m as f64,
        density: density as f64 / (k * n) as f64,
        coverage: coverage as f64 / m as f64,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_rows(rows: &[&[f64]]) -> Array2<f64> {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().cloned()).collect();
        Array2::from_shape_vec((rows.len(), d), flat).unwrap()
    }

    #[test]
    fn identical_sets_give_perfect_scores() {
        let pts = from_rows(&[&[0.0, 0.0], &[1.0, 0.5], &[2.0, -0.5], &[3.0, 0.2]]);
        let rep = prdc(&pts, &pts, 1).unwrap();
        assert_eq!(rep.precision, 1.0);
        assert_eq!(rep.recall, 1.0);
        assert_eq!(rep.coverage, 1.0);
    }

    #[test]
    fn line_example_matches_hand_computation() {
        let real = from_rows(&[&[0.0], &[1.0], &[2.0]]);
        let fake = from_rows(&[&[0.1], &[1.9]]);
        let rep = prdc(&real, &fake, 1).unwrap();
        assert_eq!(rep.precision, 1.0);
        assert_eq!(rep.recall, 1.0);
        assert_eq!(rep.density, 2.0);
        assert_eq!(rep.coverage, 1.0);
    }

    #[test]
    fn disjoint_supports_give_zero_scores() {
        let real = from_rows(&[&[0.0, 0.0], &[0.1, 0.0], &[0.0, 0.1]]);
        let fake = from_rows(&[&[100.0, 0.0], &[100.1, 0.0], &[100.0, 0.1]]);
        let rep = prdc(&real, &fake, 1).unwrap();
        assert_eq!(rep.precision, 0.0);
        assert_eq!(rep.recall, 0.0);
        assert_eq!(rep.density, 0.0);
        assert_eq!(rep.coverage, 0.0);
    }

    #[test]
    fn swapping_real_and_fake_swaps_precision_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((20, 3), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((25, 3), |_| rng.random::<f64>() * 1.2 - 0.1);
        let ab = prdc(&a, &b, 3).unwrap();
        let ba = prdc(&b, &a, 3).unwrap();
        assert_eq!(ab.precision, ba.recall);
        assert_eq!(ab.recall, ba.precision);
    }

    #[test]
    fn optimized_matches_reference_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for case in 0..40 {
            let m = rng.random_range(6..50);
            let n = rng.random_range(6..50);
            let d = rng.random_range(1..6);
            let k = rng.random_range(1..5.min(m.min(n)));
            let real = Array2::from_shape_fn((m, d), |_| rng.random::<f64>());
            let fake = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
            let fast = prdc(&real, &fake, k).unwrap();
            let slow = prdc_reference(&real, &fake, k).unwrap();
            assert_eq!(fast, slow, "case {case}");
        }
    }

    #[test]
    fn k_too_large_is_config_error() {
        let pts = from_rows(&[&[0.0], &[1.0]]);
        assert!(prdc(&pts, &pts, 2).is_err());
    }

    #[test]
    fn posterior_stats_population_convention() {
        let samples = from_rows(&[&[0.0, 5.0], &[2.0, 5.0]]);
        let ps = PosteriorSamples::new(samples);
        let stats = posterior_stats(&ps, None).unwrap();
        assert_eq!(stats.mean_image[[0, 0]], 1.0);
        assert_eq!(stats.std_image[[0, 0]], 1.0);
        assert_eq!(stats.std_image[[0, 1]], 0.0);
    }

    #[test]
    fn posterior_stats_zero_error_when_truth_equals_mean() {
        let samples = from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut ps = PosteriorSamples::new(samples);
        ps.image_shape = Some((1, 2));
        let truth = from_rows(&[&[2.0, 3.0]]);
        let stats = posterior_stats(&ps, Some(&truth)).unwrap();
        assert_eq!(stats.mean_abs_error, Some(0.0));
    }

    #[test]
    fn posterior_stats_second_moment_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = Array2::from_shape_fn((200, 5), |_| rng.random::<f64>() * 3.0 - 1.0);
        let ps = PosteriorSamples::new(samples.clone());
        let stats = posterior_stats(&ps, None).unwrap();
        for j in 0..5 {
            let mean_sq: f64 =
                samples.column(j).iter().map(|v| v * v).sum::<f64>() / 200.0;
            let lhs = stats.std_image[[0, j]].powi(2) + stats.mean_image[[0, j]].powi(2);
            assert!((lhs - mean_sq).abs() < 1e-10);
        }
    }

    #[test]
    fn mode_cluster_separates_two_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rows = Vec::new();
        for _ in 0..60 {
            rows.push(vec![-5.0 + 0.1 * rng.random::<f64>(), 0.1 * rng.random::<f64>()]);
        }
        for _ in 0..40 {
            rows.push(vec![5.0 + 0.1 * rng.random::<f64>(), 0.1 * rng.random::<f64>()]);
        }
        let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
        let ps = PosteriorSamples::new(Array2::from_shape_vec((100, 2), flat).unwrap());
        let clustering = mode_cluster(&ps, 2, 1, None).unwrap();
        // Without truth, ordering is by size: cluster 0 is the bigger one.
        for i in 0..60 {
            assert_eq!(clustering.labels[i], 0, "sample {i}");
        }
        for i in 60..100 {
            assert_eq!(clustering.labels[i], 1, "sample {i}");
        }
        assert_eq!(clustering.per_mode.len(), 2);
    }

    #[test]
    fn mode_cluster_single_mode_equals_posterior_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = Array2::from_shape_fn((50, 3), |_| rng.random::<f64>());
        let ps = PosteriorSamples::new(samples);
        let clustering = mode_cluster(&ps, 1, 0, None).unwrap();
        let stats = posterior_stats(&ps, None).unwrap();
        assert_eq!(clustering.labels, vec![0; 50]);
        assert_eq!(clustering.per_mode[0].mean_image, stats.mean_image);
    }

    #[test]
    fn mode_cluster_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = Array2::from_shape_fn((40, 2), |_| rng.random::<f64>());
        let ps = PosteriorSamples::new(samples);
        let a = mode_cluster(&ps, 2, 5, None).unwrap();
        let b = mode_cluster(&ps, 2, 5, None).unwrap();
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn variance_study_additive_lhs_beats_srs() {
        let rows = mc_variance_study(
            &[Scheme::Lhs],
            TestFunction::Additive,
            64,
            2,
            500,
            42,
            None,
        )
        .unwrap();
        assert!(rows[0].ratio_vs_srs < 0.2, "ratio {}", rows[0].ratio_vs_srs);
    }

    #[test]
    fn variance_study_constant_function_is_zero_variance() {
        let rows = mc_variance_study(
            &[Scheme::Srs, Scheme::Lhs, Scheme::Sobol],
            TestFunction::Constant,
            16,
            2,
            50,
            1,
            None,
        )
        .unwrap();
        for row in rows {
            assert_eq!(row.variance, 0.0);
        }
    }

    #[test]
    fn variance_study_interaction_pss_beats_srs() {
        let grouping = PssGrouping::new(vec![vec![0, 1]]).unwrap();
        let rows = mc_variance_study(
            &[Scheme::Pss],
            TestFunction::ProductSines,
            16,
            2,
            500,
            7,
            Some(&grouping),
        )
        .unwrap();
        assert!(rows[0].ratio_vs_srs < 1.0, "ratio {}", rows[0].ratio_vs_srs);
    }

    #[test]
    fn variance_study_requires_enough_replicates() {
        assert!(mc_variance_study(&[Scheme::Srs], TestFunction::Additive, 8, 2, 10, 0, None).is_err());
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = Array2::from_elem((4, 4), 0.5);
        let v = psnr(&img, &img.clone(), 1.0).unwrap();
        assert!(v.is_infinite());
        let mut other = img.clone();
        other[[0, 0]] = 0.6;
        assert!(psnr(&img, &other, 1.0).unwrap() > 20.0);
    }
}
