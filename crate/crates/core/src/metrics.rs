//! Evaluation metrics on motions and groups.
//!
//! Feature extractors are hand-written substitutes for learned ones, so
//! Frechet values are only comparable between runs of this crate.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{GroupSample, MotionSequence, Vec3};

/// Tunable metric parameters; every report echoes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Beat-alignment kernel width in frames.
    pub mmc_sigma: f64,
    /// Collision radius in metres.
    pub tif_radius: f64,
    /// Cross-correlation lag window as a fraction of the sequence length.
    pub gmc_lag_fraction: f64,
    /// Diagonal regulariser added to both covariances.
    pub frechet_eps: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            mmc_sigma: 3.0,
            tif_radius: 0.4,
            gmc_lag_fraction: 0.25,
            frechet_eps: 1e-6,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mmc_sigma > 0.0
            && self.tif_radius > 0.0
            && (0.0..=1.0).contains(&self.gmc_lag_fraction)
            && self.frechet_eps >= 0.0
            && [self.mmc_sigma, self.tif_radius, self.frechet_eps].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad metric parameters {self:?}")))
        }
    }
}

/// COM acceleration, in units per frame squared, treated as zero by [`pfc`].
pub const PFC_STILL: f64 = 1e-12;

fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

fn need_pair(group: &GroupSample, what: &str) -> Result<()> {
    if group.dancer_count() < 2 {
        return Err(Error::Invalid(format!("{what} needs at least 2 dancers, got {}", group.dancer_count())));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Per-joint mean kinetic energy `(1/T) sum_t |v_j(t)|^2 / 2`, unit mass,
/// world-frame velocities in units per frame.
pub fn kinetic_features(m: &MotionSequence) -> Result<Vec<f64>> {
    let v = m.global_velocities()?;
    let t = v.len() as f64;
    let mut out = vec![0.0; m.joints()];
    for frame in &v {
        for (o, u) in out.iter_mut().zip(frame) {
            *o += 0.5 * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
        }
    }
    out.iter_mut().for_each(|o| *o /= t);
    Ok(out)
}

/// Mean Euclidean distance over unordered pairs of feature vectors.
pub fn gen_div_features(features: &[Vec<f64>]) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::Invalid(format!("diversity needs at least 2 motions, got {}", features.len())));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let dists: Vec<f64> = pairs(features.len())
        .map(|(i, j)| features[i].iter().zip(&features[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    Ok(mean(&dists))
}

pub fn gen_div(motions: &[MotionSequence]) -> Result<f64> {
    let f = motions.iter().map(kinetic_features).collect::<Result<Vec<_>>>()?;
    gen_div_features(&f)
}

/// Frames where the mean joint speed has a local minimum (strictly below
/// the previous frame, not above the next); the two end frames never count.
pub fn kinematic_beats(m: &MotionSequence) -> Result<Vec<usize>> {
    let s = m.mean_joint_speed()?;
    Ok((1..s.len().saturating_sub(1)).filter(|&t| s[t] < s[t - 1] && s[t] <= s[t + 1]).collect())
}

/// Beat alignment given explicit kinematic beats. With no kinematic beats
/// every music beat scores 0.
pub fn mmc_from_beats(kinematic: &[usize], music: &[usize], sigma: f64) -> Result<f64> {
    if music.is_empty() {
        return Err(Error::Invalid("beat alignment needs at least one music beat".into()));
    }
    if kinematic.is_empty() {
        return Ok(0.0);
    }
    let score: f64 = music
        .iter()
        .map(|&b| {
            let d = kinematic.iter().map(|&k| (b as f64 - k as f64).abs()).fold(f64::INFINITY, f64::min);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(score / music.len() as f64)
}

pub fn mmc(m: &MotionSequence, beats: &[usize], sigma: f64) -> Result<f64> {
    if beats.is_empty() {
        return Err(Error::Invalid("beat alignment needs at least one music beat".into()));
    }
    mmc_from_beats(&kinematic_beats(m)?, beats, sigma)
}

/// Foot-contact score; `z` is up, so the horizontal plane is `x, y`.
///
/// COM is the unweighted joint mean, its acceleration the second central
/// difference on interior frames; foot speeds come from the same frames.
/// Horizontal acceleration below [`PFC_STILL`] everywhere (rounding noise
/// of a uniform glide) gives 0.
pub fn pfc(m: &MotionSequence, feet: (usize, usize)) -> Result<f64> {
    let t = m.frames();
    if t < 3 {
        return Err(Error::Invalid(format!("foot contact needs at least 3 frames, got {t}")));
    }
    if feet.0 >= m.joints() || feet.1 >= m.joints() {
        return Err(Error::Invalid(format!("foot joints {feet:?} out of range for {} joints", m.joints())));
    }
    let pos = m.global_positions();
    let vel = m.global_velocities()?;
    let com: Vec<Vec3> = pos
        .iter()
        .map(|f| {
            let n = f.len() as f64;
            let s = f.iter().fold([0.0; 3], |a, p| [a[0] + p[0], a[1] + p[1], a[2] + p[2]]);
            [s[0] / n, s[1] / n, s[2] / n]
        })
        .collect();
    let mut scores = Vec::with_capacity(t - 2);
    let mut max_acc: f64 = 0.0;
    for f in 1..t - 1 {
        let ax = com[f + 1][0] - 2.0 * com[f][0] + com[f - 1][0];
        let ay = com[f + 1][1] - 2.0 * com[f][1] + com[f - 1][1];
        let acc = (ax * ax + ay * ay).sqrt();
        max_acc = max_acc.max(acc);
        scores.push(acc * norm(vel[f][feet.0]) * norm(vel[f][feet.1]));
    }
    if max_acc <= PFC_STILL {
        return Ok(0.0);
    }
    Ok(mean(&scores) / max_acc)
}

/// Pearson correlation of `x` with `y` circularly shifted by `lag`
/// (`y[t - lag]` paired with `x[t]`); 0 if either signal is constant.
fn circular_correlation(x: &[f64], y: &[f64], lag: isize) -> f64 {
    let n = x.len();
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for t in 0..n {
        let dx = x[t] - mx;
        let dy = y[((t as isize - lag).rem_euclid(n as isize)) as usize] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // constant signals (up to rounding) carry no correlation
    let floor = 1e-24 * n as f64;
    if sxx <= floor || syy <= floor {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Best circular correlation over lags `-max_lag..=max_lag`, floored at 0.
pub fn max_lag_correlation(x: &[f64], y: &[f64], max_lag: usize) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!("signals of length {} and {}", x.len(), y.len())));
    }
    let l = max_lag as isize;
    Ok((-l..=l).map(|k| circular_correlation(x, y, k)).fold(0.0, f64::max).min(1.0))
}

/// Group motion correlation in `[0, 100]`.
pub fn gmc(group: &GroupSample, lag_fraction: f64) -> Result<f64> {
    need_pair(group, "group correlation")?;
    let signals = group.dancers.iter().map(|d| d.mean_joint_speed()).collect::<Result<Vec<_>>>()?;
    let lag = (group.frames() as f64 * lag_fraction).floor() as usize;
    let scores = pairs(signals.len())
        .map(|(i, j)| max_lag_correlation(&signals[i], &signals[j], lag))
        .collect::<Result<Vec<_>>>()?;
    Ok(100.0 * mean(&scores))
}

/// Fraction of (frame, dancer pair) events with root distance below `radius`.
pub fn tif(group: &GroupSample, radius: f64) -> Result<f64> {
    need_pair(group, "trajectory intersection")?;
    if !(radius > 0.0) {
        return Err(Error::Invalid(format!("collision radius must be positive, got {radius}")));
    }
    let roots: Vec<Vec<Vec3>> = group.dancers.iter().map(|d| d.root_trajectory()).collect();
    let mut hits = 0usize;
    let mut events = 0usize;
    for t in 0..group.frames() {
        for (i, j) in pairs(roots.len()) {
            events += 1;
            if dist(roots[i][t], roots[j][t]) < radius {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / events as f64)
}

/// Group descriptor: mean and spread over pairs of the time-averaged root
/// distance, mean and spread over pairs of the zero-lag speed correlation,
/// then the kinetic features averaged over dancers.
pub fn group_features(group: &GroupSample) -> Result<Vec<f64>> {
    need_pair(group, "group features")?;
    let roots: Vec<Vec<Vec3>> = group.dancers.iter().map(|d| d.root_trajectory()).collect();
    let speeds = group.dancers.iter().map(|d| d.mean_joint_speed()).collect::<Result<Vec<_>>>()?;
    let t = group.frames();
    let mut distances = Vec::new();
    let mut correlations = Vec::new();
    for (i, j) in pairs(group.dancer_count()) {
        distances.push((0..t).map(|f| dist(roots[i][f], roots[j][f])).sum::<f64>() / t as f64);
        correlations.push(circular_correlation(&speeds[i], &speeds[j], 0));
    }
    let kinetic = group.dancers.iter().map(kinetic_features).collect::<Result<Vec<_>>>()?;
    let joints = kinetic[0].len();
    let mut out = vec![mean(&distances), std_dev(&distances), mean(&correlations), std_dev(&correlations)];
    out.extend((0..joints).map(|j| kinetic.iter().map(|k| k[j]).sum::<f64>() / kinetic.len() as f64));
    Ok(out)
}

/// Mean and (population) covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::Invalid("cannot fit a Gaussian to zero samples".into()));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let mut mu = DVector::zeros(d);
        for f in features {
            mu += DVector::from_column_slice(f);
        }
        mu /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for f in features {
            let c = DVector::from_column_slice(f) - &mu;
            cov += &c * c.transpose();
        }
        cov /= n as f64;
        Ok(GaussianFit { mean: mu, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let root = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2))` after adding `eps I` to
/// both covariances. The trace of the product root is taken as
/// `tr((Sa^(1/2) Sb Sa^(1/2))^(1/2))`, which is symmetric and has the same
/// eigenvalues.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit, eps: f64) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.nrows() != a.dim() || b.cov.nrows() != b.dim() {
        return Err(Error::Shape(format!("Gaussian fits of dimension {} and {}", a.dim(), b.dim())));
    }
    let d = a.dim();
    let reg = DMatrix::<f64>::identity(d, d) * eps;
    let sa = &a.cov + &reg;
    let sb = &b.cov + &reg;
    let ra = psd_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let value = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * tr_root;
    Ok(value.max(0.0))
}

/// Metric keys present in every report.
pub const METRIC_KEYS: [&str; 7] = ["fid_k", "gmr", "gen_div", "mmc", "pfc", "gmc", "tif"];

/// One metric outcome: a value, or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<Result<f64>> for MetricEntry {
    fn from(r: Result<f64>) -> Self {
        match r {
            Ok(v) => MetricEntry { value: Some(v), error: None },
            Err(e) => MetricEntry { value: None, error: Some(e.to_string()) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: MetricConfig,
    pub generated_groups: usize,
    pub reference_groups: usize,
    pub metrics: BTreeMap<String, MetricEntry>,
}

fn mean_over<T>(items: &[T], f: impl Fn(&T) -> Result<f64>) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Invalid("no samples".into()));
    }
    let v = items.iter().map(f).collect::<Result<Vec<_>>>()?;
    Ok(mean(&v))
}

/// Every metric on `generated`, with `reference` supplying the Frechet
/// targets. A metric that cannot be computed is recorded with its error.
pub fn evaluate(
    generated: &[GroupSample],
    reference: &[GroupSample],
    feet: (usize, usize),
    config: &MetricConfig,
) -> Result<MetricReport> {
    config.validate()?;
    let dancers: Vec<&MotionSequence> = generated.iter().flat_map(|g| &g.dancers).collect();
    let kinetic_fit = |groups: &[GroupSample]| -> Result<GaussianFit> {
        let f = groups.iter().flat_map(|g| &g.dancers).map(kinetic_features).collect::<Result<Vec<_>>>()?;
        GaussianFit::fit(&f)
    };
    let group_fit = |groups: &[GroupSample]| -> Result<GaussianFit> {
        let f = groups.iter().map(group_features).collect::<Result<Vec<_>>>()?;
        GaussianFit::fit(&f)
    };
    let mut metrics = BTreeMap::new();
    let mut put = |k: &str, r: Result<f64>| {
        metrics.insert(k.to_string(), MetricEntry::from(r));
    };
    put("fid_k", kinetic_fit(generated).and_then(|g| frechet_distance(&g, &kinetic_fit(reference)?, config.frechet_eps)));
    put("gmr", group_fit(generated).and_then(|g| frechet_distance(&g, &group_fit(reference)?, config.frechet_eps)));
    put(
        "gen_div",
        dancers.iter().map(|d| kinetic_features(d)).collect::<Result<Vec<_>>>().and_then(|f| gen_div_features(&f)),
    );
    put(
        "mmc",
        mean_over(generated, |g| mean_over(&g.dancers, |d| mmc(d, g.conditioning.beats(), config.mmc_sigma))),
    );
    put("pfc", mean_over(&dancers, |d| pfc(d, feet)));
    put("gmc", mean_over(generated, |g| gmc(g, config.gmc_lag_fraction)));
    put("tif", mean_over(generated, |g| tif(g, config.tif_radius)));
    Ok(MetricReport {
        config: config.clone(),
        generated_groups: generated.len(),
        reference_groups: reference.len(),
        metrics,
    })
}
