//! Latent designs on the unit hypercube and their Gaussian images.
//!
//! Implements simple random sampling, Latin hypercube sampling (plain and
//! maximin-selected), partially stratified sampling, Latinized partially
//! stratified sampling, and the Sobol sequence, plus the inverse standard
//! normal CDF that maps a design to latent-space points.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sampling scheme identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Srs,
    Lhs,
    MaximinLhs,
    Pss,
    Lpss,
    Sobol,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Scheme> {
        match s.to_ascii_lowercase().as_str() {
            "srs" => Ok(Scheme::Srs),
            "lhs" => Ok(Scheme::Lhs),
            "maximin-lhs" | "maximin_lhs" | "maximinlhs" => Ok(Scheme::MaximinLhs),
            "pss" => Ok(Scheme::Pss),
            "lpss" => Ok(Scheme::Lpss),
            "sobol" => Ok(Scheme::Sobol),
            other => Err(Error::config(format!("unknown sampling scheme '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Srs => "srs",
            Scheme::Lhs => "lhs",
            Scheme::MaximinLhs => "maximin-lhs",
            Scheme::Pss => "pss",
            Scheme::Lpss => "lpss",
            Scheme::Sobol => "sobol",
        }
    }
}

/// `n x d` points in the unit hypercube.
#[derive(Debug, Clone)]
pub struct UnitDesign {
    pub points: Array2<f64>,
    pub scheme: Scheme,
    pub seed: u64,
}

impl UnitDesign {
    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// Gaussian image of a [`UnitDesign`] under the inverse standard normal CDF.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub points: Array2<f64>,
    pub scheme: Scheme,
    pub seed: u64,
}

impl LatentBatch {
    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// Partition of the dimensions `{0..d}` into disjoint groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PssGrouping {
    groups: Vec<Vec<usize>>,
    dim: usize,
}

impl PssGrouping {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let dim: usize = groups.iter().map(Vec::len).sum();
        let mut seen = vec![false; dim];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::config("pss grouping contains an empty group"));
            }
            for &j in g {
                if j >= dim || seen[j] {
                    return Err(Error::config(format!(
                        "pss grouping must partition 0..{dim} exactly once (offending index {j})"
                    )));
                }
                seen[j] = true;
            }
        }
        Ok(PssGrouping { groups, dim })
    }

    /// Consecutive pairs `{0,1},{2,3},...`, with a trailing singleton for odd `d`.
    pub fn consecutive_pairs(d: usize) -> Self {
        let mut groups = Vec::new();
        let mut j = 0;
        while j + 1 < d {
            groups.push(vec![j, j + 1]);
            j += 2;
        }
        if j < d {
            groups.push(vec![j]);
        }
        PssGrouping { groups, dim: d }
    }

    pub fn singletons(d: usize) -> Self {
        PssGrouping { groups: (0..d).map(|j| vec![j]).collect(), dim: d }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn check_nd(n: usize, d: usize) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(Error::config(format!("design needs n >= 1 and d >= 1, got n={n}, d={d}")));
    }
    Ok(())
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Simple random sampling: i.i.d. uniforms in `[0,1)`.
pub fn srs(n: usize, d: usize, seed: u64) -> Result<UnitDesign> {
    check_nd(n, d)?;
    let mut rng = rng_for(seed);
    let points = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
    Ok(UnitDesign { points, scheme: Scheme::Srs, seed })
}

/// Latin hypercube sampling: one point per stratum `[k/n, (k+1)/n)` in every
/// column, uniform within the stratum, independent column permutations.
pub fn lhs(n: usize, d: usize, seed: u64) -> Result<UnitDesign> {
    check_nd(n, d)?;
    let mut rng = rng_for(seed);
    let mut points = Array2::zeros((n, d));
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..d {
        strata.shuffle(&mut rng);
        for i in 0..n {
            let u: f64 = rng.random();
            points[[i, j]] = (strata[i] as f64 + u) / n as f64;
        }
    }
    Ok(UnitDesign { points, scheme: Scheme::Lhs, seed })
}

/// Smallest pairwise Euclidean distance between rows.
pub fn min_pairwise_distance(points: &Array2<f64>) -> f64 {
    let n = points.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for k in i + 1..n {
            let mut d2 = 0.0;
            for j in 0..points.ncols() {
                let diff = points[[i, j]] - points[[k, j]];
                d2 += diff * diff;
            }
            best = best.min(d2.sqrt());
        }
    }
    best
}

/// Best-of-pool maximin LHS: generates `n_candidates` designs (candidate `i`
/// seeded with `seed + i`) and keeps the one with the largest minimum pairwise
/// distance; ties go to the lowest candidate index.
pub fn maximin_lhs(n: usize, d: usize, seed: u64, n_candidates: usize) -> Result<UnitDesign> {
    if n_candidates == 0 {
        return Err(Error::config("maximin_lhs needs n_candidates >= 1"));
    }
    let mut best: Option<(f64, UnitDesign)> = None;
    for c in 0..n_candidates {
        let cand = lhs(n, d, seed.wrapping_add(c as u64))?;
        let score = min_pairwise_distance(&cand.points);
        let better = match &best {
            None => true,
            Some((s, _)) => score > *s,
        };
        if better {
            best = Some((score, cand));
        }
    }
    let (_, mut design) = best.unwrap();
    design.scheme = Scheme::MaximinLhs;
    design.seed = seed;
    Ok(design)
}

/// Integer `m` with `m^g == n`, if one exists.
fn stratification_base(n: usize, g: usize) -> Option<usize> {
    let m = (n as f64).powf(1.0 / g as f64).round() as usize;
    for cand in m.saturating_sub(1)..=m + 1 {
        if cand >= 1 && cand.pow(g as u32) == n {
            return Some(cand);
        }
    }
    None
}

/// Cell digit (base `m`, one digit per group dimension) of every row, for one
/// group: row `i` occupies cell `cells[i]`, returned as digit vectors.
fn pss_cells(n: usize, g: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|cell| {
            let mut digits = vec![0usize; g];
            let mut c = cell;
            for d in digits.iter_mut() {
                *d = c % m;
                c /= m;
            }
            digits
        })
        .collect()
}

/// Partially stratified sampling: within each group of size `g`, the points
/// form a full `m x ... x m` grid stratification (`n = m^g`), uniform within
/// each cell; groups are mutually independent.
pub fn pss(n: usize, grouping: &PssGrouping, seed: u64) -> Result<UnitDesign> {
    check_nd(n, grouping.dim())?;
    let mut rng = rng_for(seed);
    let mut points = Array2::zeros((n, grouping.dim()));
    for group in grouping.groups() {
        let g = group.len();
        let m = stratification_base(n, g).ok_or_else(|| {
            Error::config(format!("n={n} is not a perfect {g}-th power required by a group of size {g}"))
        })?;
        let cells = pss_cells(n, g, m, &mut rng);
        for (i, digits) in cells.iter().enumerate() {
            for (jj, &col) in group.iter().enumerate() {
                let u: f64 = rng.random();
                points[[i, col]] = (digits[jj] as f64 + u) / m as f64;
            }
        }
    }
    Ok(UnitDesign { points, scheme: Scheme::Pss, seed })
}

fn lpss_once(n: usize, grouping: &PssGrouping, seed: u64) -> Result<Array2<f64>> {
    let mut rng = rng_for(seed);
    let mut points = Array2::zeros((n, grouping.dim()));
    for group in grouping.groups() {
        let g = group.len();
        let m = stratification_base(n, g).ok_or_else(|| {
            Error::config(format!("n={n} is not a perfect {g}-th power required by a group of size {g}"))
        })?;
        let per_stratum = n / m;
        let cells = pss_cells(n, g, m, &mut rng);
        for (jj, &col) in group.iter().enumerate() {
            // Latinize the column: rows sharing a coarse stratum get distinct
            // fine sub-strata, which preserves their group-cell membership.
            let mut fine: Vec<Vec<usize>> = (0..m)
                .map(|_| {
                    let mut f: Vec<usize> = (0..per_stratum).collect();
                    f.shuffle(&mut rng);
                    f
                })
                .collect();
            for (i, digits) in cells.iter().enumerate() {
                let coarse = digits[jj];
                let f = fine[coarse].pop().expect("one fine stratum per row");
                let u: f64 = rng.random();
                points[[i, col]] = (coarse * per_stratum + f) as f64 / n as f64 + u / n as f64;
            }
        }
    }
    Ok(points)
}

/// Latinized partially stratified sampling: satisfies the PSS group-cell
/// stratification and LHS marginals simultaneously. With `maximin`, the best
/// of `n_candidates` pairings under the maximin criterion is kept.
pub fn lpss(
    n: usize,
    grouping: &PssGrouping,
    seed: u64,
    maximin: bool,
    n_candidates: usize,
) -> Result<UnitDesign> {
    check_nd(n, grouping.dim())?;
    let candidates = if maximin { n_candidates.max(1) } else { 1 };
    let mut best: Option<(f64, Array2<f64>)> = None;
    for c in 0..candidates {
        let pts = lpss_once(n, grouping, seed.wrapping_add(c as u64))?;
        let score = min_pairwise_distance(&pts);
        let better = match &best {
            None => true,
            Some((s, _)) => score > *s,
        };
        if better {
            best = Some((score, pts));
        }
    }
    Ok(UnitDesign { points: best.unwrap().1, scheme: Scheme::Lpss, seed })
}

/// Joe-Kuo primitive polynomials and initial direction numbers, dimension 2
/// onward (dimension 1 is the van der Corput sequence). Polynomials use the
/// full binary encoding, e.g. 13 = x^3 + x^2 + 1.
const SOBOL_POLY: [u32; 20] = [
    3, 7, 11, 13, 19, 25, 37, 41, 47, 55, 59, 61, 67, 91, 97, 103, 109, 115, 131, 137,
];
const SOBOL_M_INIT: [&[u32]; 20] = [
    &[1],
    &[1, 3],
    &[1, 3, 1],
    &[1, 1, 1],
    &[1, 1, 3, 3],
    &[1, 3, 5, 13],
    &[1, 1, 5, 5, 17],
    &[1, 1, 5, 5, 5],
    &[1, 1, 7, 11, 19],
    &[1, 1, 5, 1, 1],
    &[1, 1, 1, 3, 11],
    &[1, 3, 5, 5, 31],
    &[1, 3, 3, 9, 7, 49],
    &[1, 1, 1, 15, 21, 21],
    &[1, 3, 1, 13, 27, 49],
    &[1, 1, 1, 15, 7, 5],
    &[1, 3, 1, 15, 13, 25],
    &[1, 1, 5, 5, 19, 61],
    &[1, 3, 7, 11, 23, 15, 103],
    &[1, 3, 7, 13, 13, 15, 69],
];

/// Largest dimension the embedded direction-number table supports.
pub const SOBOL_MAX_DIM: usize = SOBOL_M_INIT.len() + 1;

const SOBOL_BITS: usize = 32;

fn sobol_directions(dim_index: usize) -> [u32; SOBOL_BITS] {
    let mut m = [1u32; SOBOL_BITS];
    if dim_index > 0 {
        let poly = SOBOL_POLY[dim_index - 1];
        let init = SOBOL_M_INIT[dim_index - 1];
        let s = (32 - poly.leading_zeros() - 1) as usize;
        m[..init.len()].copy_from_slice(init);
        for k in s..SOBOL_BITS {
            // m_k = 2 a_1 m_{k-1} ^ ... ^ 2^{s-1} a_{s-1} m_{k-s+1} ^ 2^s m_{k-s} ^ m_{k-s}
            let mut mk = m[k - s] ^ (m[k - s] << s);
            for j in 1..s {
                let a_j = (poly >> (s - j)) & 1;
                if a_j == 1 {
                    mk ^= m[k - j] << j;
                }
            }
            m[k] = mk;
        }
    }
    let mut v = [0u32; SOBOL_BITS];
    for k in 0..SOBOL_BITS {
        v[k] = m[k] << (31 - k);
    }
    v
}

/// First `n` points of the unscrambled Sobol sequence in Gray-code order.
/// The first point is the origin.
pub fn sobol(n: usize, d: usize) -> Result<UnitDesign> {
    check_nd(n, d)?;
    if d > SOBOL_MAX_DIM {
        return Err(Error::config(format!(
            "sobol supports up to {SOBOL_MAX_DIM} dimensions, got {d}"
        )));
    }
    let dirs: Vec<[u32; SOBOL_BITS]> = (0..d).map(sobol_directions).collect();
    let mut points = Array2::zeros((n, d));
    let mut state = vec![0u32; d];
    let scale = 1.0 / (1u64 << 32) as f64;
    for i in 0..n {
        if i > 0 {
            let bit = (i as u32).trailing_zeros() as usize;
            for (x, v) in state.iter_mut().zip(&dirs) {
                *x ^= v[bit];
            }
        }
        for j in 0..d {
            points[[i, j]] = state[j] as f64 * scale;
        }
    }
    Ok(UnitDesign { points, scheme: Scheme::Sobol, seed: 0 })
}

/// Builds a design with the given scheme; `grouping` is only consulted for the
/// PSS family, `n_candidates` only for the maximin variants.
///
/// When no grouping is given, the PSS family defaults to consecutive pairs if
/// `n` is a perfect square and to singletons (plain Latin marginals)
/// otherwise, since pair groups need `n = m^2`.
pub fn design(
    scheme: Scheme,
    n: usize,
    d: usize,
    seed: u64,
    grouping: Option<&PssGrouping>,
    n_candidates: usize,
) -> Result<UnitDesign> {
    let default_grouping;
    let grouping = match grouping {
        Some(g) => g,
        None => {
            default_grouping = if stratification_base(n, 2).is_some() {
                PssGrouping::consecutive_pairs(d)
            } else {
                PssGrouping::singletons(d)
            };
            &default_grouping
        }
    };
    match scheme {
        Scheme::Srs => srs(n, d, seed),
        Scheme::Lhs => lhs(n, d, seed),
        Scheme::MaximinLhs => maximin_lhs(n, d, seed, n_candidates),
        Scheme::Pss => pss(n, grouping, seed),
        Scheme::Lpss => lpss(n, grouping, seed, false, 1),
        Scheme::Sobol => sobol(n, d),
    }
}

const UNIFORM_CLAMP: f64 = 1e-12;

/// Inverse standard normal CDF (Wichura's AS241, double precision).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * horner(r, &PPND_A) / horner(r, &PPND_B);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        horner(r, &PPND_C) / horner(r, &PPND_D)
    } else {
        let r = r - 5.0;
        horner(r, &PPND_E) / horner(r, &PPND_F)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn horner(r: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * r + c)
}

const PPND_A: [f64; 8] = [
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
const PPND_B: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
const PPND_C: [f64; 8] = [
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
const PPND_D: [f64; 8] = [
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
const PPND_E: [f64; 8] = [
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const PPND_F: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];

/// Maps a design to latent space through the inverse standard normal CDF,
/// clamping uniforms away from 0 and 1 by 1e-12 first.
pub fn to_gaussian(design: &UnitDesign) -> LatentBatch {
    let points = design
        .points
        .mapv(|u| inverse_normal_cdf(u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)));
    LatentBatch { points, scheme: design.scheme, seed: design.seed }
}
