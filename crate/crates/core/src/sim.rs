//! Synthetic identity world.
//!
//! A world holds N unit-norm prototype vectors (the hidden identities) and a
//! set of camera transforms (well-conditioned affine maps with per-camera
//! noise scales). An observation of identity `i` through camera `c` is the
//! transformed prototype plus Gaussian noise, so same-identity observations
//! cluster and cross-camera matching is nontrivial but learnable. Frame pairs
//! with a controllable fraction of shared identities are sampled by the
//! replacement protocol: a portion of the first set's identities is kept and
//! the rest are swapped for identities disjoint from the first set.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{matmul, Matrix};

/// Highest cosine allowed between two prototypes at generation.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.8;
/// Total rejection-sampling attempts before world generation gives up.
pub const MAX_GENERATION_ATTEMPTS: usize = 10_000;
/// Highest condition number accepted for a camera transform.
pub const MAX_CAMERA_CONDITION: f64 = 10.0;
/// Upper bound (radians) on each in-plane rotation angle of a camera.
/// Calibrated so that a randomly initialized affine embedder matches across
/// cameras at chance while a trained one can still align the views.
pub const CAMERA_MAX_ROTATION: f64 = 0.9;
/// Per-component scale of the camera bias draw. Biases push each view's
/// observations toward a camera-specific direction, which drowns raw
/// cross-camera affinity for untrained embedders; a trained embedder can
/// null the (low-dimensional) bias gap.
pub const CAMERA_BIAS_SCALE: f64 = 1.0;
/// Drawn symmetry values are truncated into this closed range (open interval
/// (0,1) up to the resolution the protocol cares about).
pub const TAU_DRAW_MIN: f64 = 1e-3;
pub const TAU_DRAW_MAX: f64 = 0.999;

/// An affine view: `x -> transform * x + bias`, plus a per-camera multiplier
/// on the world's intra noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    transform: Matrix,
    bias: Vec<f64>,
    noise_scale: f64,
}

impl Camera {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.transform.rows();
        let mut out = self.bias.clone();
        for i in 0..d {
            for (j, &x) in v.iter().enumerate() {
                out[i] += self.transform.get(i, j) * x;
            }
        }
        out
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }
}

/// The hidden ground truth of an experiment: prototypes, cameras, noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityWorld {
    n_identities: usize,
    d_obs: usize,
    /// D_obs x N, columns are unit prototypes.
    prototypes: Matrix,
    cameras: Vec<Camera>,
    intra_noise: f64,
    seed: u64,
}

impl IdentityWorld {
    pub fn n_identities(&self) -> usize {
        self.n_identities
    }

    pub fn d_obs(&self) -> usize {
        self.d_obs
    }

    pub fn n_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn intra_noise(&self) -> f64 {
        self.intra_noise
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prototype(&self, identity: usize) -> Vec<f64> {
        self.prototypes.column(identity)
    }

    pub fn camera(&self, index: usize) -> &Camera {
        &self.cameras[index]
    }

    /// Largest pairwise cosine among prototypes (generation keeps this at or
    /// below [`MAX_PROTOTYPE_COSINE`]).
    pub fn max_pairwise_cosine(&self) -> f64 {
        let n = self.n_identities;
        let mut best = f64::NEG_INFINITY;
        for a in 0..n {
            for b in (a + 1)..n {
                let cos: f64 = (0..self.d_obs)
                    .map(|r| self.prototypes.get(r, a) * self.prototypes.get(r, b))
                    .sum();
                best = best.max(cos);
            }
        }
        best
    }

    /// Writes a versioned JSON snapshot; floating-point values round-trip
    /// exactly (shortest-representation encoding).
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let snap = WorldSnapshot { format_version: SNAPSHOT_VERSION, world: self.clone() };
        let text = serde_json::to_string_pretty(&snap)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let snap: WorldSnapshot = serde_json::from_str(&text)?;
        if snap.format_version != SNAPSHOT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "world snapshot version {} (supported: {SNAPSHOT_VERSION})",
                snap.format_version
            )));
        }
        Ok(snap.world)
    }
}

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WorldSnapshot {
    format_version: u32,
    world: IdentityWorld,
}

/// One detected element: the observed feature vector plus its hidden labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub observation: Vec<f64>,
    pub identity: usize,
    pub camera: usize,
    pub frame: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Intra,
    Inter,
}

/// Two instance sets to be associated, with their measured symmetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePair {
    pub set1: Vec<Instance>,
    pub set2: Vec<Instance>,
    pub kind: PairKind,
    pub tau: f64,
}

/// Mean symmetry levels for the two pair kinds; draws come from a normal with
/// this fixed variance, truncated into (0,1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetrySchedule {
    pub tau_alpha_mean: f64,
    pub tau_beta_mean: f64,
    pub variance: f64,
}

impl SymmetrySchedule {
    pub fn new(tau_alpha_mean: f64, tau_beta_mean: f64) -> Result<Self> {
        for (name, v) in [("tau_alpha_mean", tau_alpha_mean), ("tau_beta_mean", tau_beta_mean)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidParam(format!("{name} must be in (0,1], got {v}")));
            }
        }
        Ok(Self { tau_alpha_mean, tau_beta_mean, variance: 0.01 })
    }

    pub fn draw_alpha<R: Rng>(&self, rng: &mut R) -> f64 {
        draw_truncated(self.tau_alpha_mean, self.variance, rng)
    }

    pub fn draw_beta<R: Rng>(&self, rng: &mut R) -> f64 {
        draw_truncated(self.tau_beta_mean, self.variance, rng)
    }
}

fn draw_truncated<R: Rng>(mean: f64, variance: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (mean + variance.sqrt() * z).clamp(TAU_DRAW_MIN, TAU_DRAW_MAX)
}

/// An RNG stream derived from a master seed; streams with distinct indices
/// are statistically independent, so parallel samplers can each own one and
/// results stay independent of scheduling.
pub fn derive_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Generates a world by rejection sampling: prototypes are redrawn until all
/// pairwise cosines stay at or below [`MAX_PROTOTYPE_COSINE`], cameras until
/// well-conditioned. Deterministic for a fixed seed.
pub fn make_world(
    n: usize,
    d_obs: usize,
    n_cameras: usize,
    sigma_intra: f64,
    seed: u64,
) -> Result<IdentityWorld> {
    if n < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 identities, got {n}")));
    }
    if d_obs < 2 {
        return Err(Error::InvalidParam(format!("need observation dim >= 2, got {d_obs}")));
    }
    if n_cameras < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 cameras, got {n_cameras}")));
    }
    if !(sigma_intra >= 0.0 && sigma_intra.is_finite()) {
        return Err(Error::InvalidParam(format!("sigma_intra must be >= 0, got {sigma_intra}")));
    }

    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0usize;

    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(n);
    while protos.len() < n {
        attempts += 1;
        if attempts > MAX_GENERATION_ATTEMPTS {
            return Err(Error::Infeasible {
                what: format!("{n} prototypes with pairwise cosine <= {MAX_PROTOTYPE_COSINE} in {d_obs} dims"),
                attempts,
            });
        }
        let cand = random_unit(d_obs, &mut rng);
        let ok = protos
            .iter()
            .all(|p| p.iter().zip(&cand).map(|(a, b)| a * b).sum::<f64>() <= MAX_PROTOTYPE_COSINE);
        if ok {
            protos.push(cand);
        }
    }
    let prototypes = Matrix::from_fn(d_obs, n, |i, j| protos[j][i]);

    let mut cameras = Vec::with_capacity(n_cameras);
    while cameras.len() < n_cameras {
        attempts += 1;
        if attempts > MAX_GENERATION_ATTEMPTS {
            return Err(Error::Infeasible {
                what: format!("camera transform with condition <= {MAX_CAMERA_CONDITION}"),
                attempts,
            });
        }
        if let Some(cam) = try_camera(d_obs, &mut rng) {
            cameras.push(cam);
        }
    }

    Ok(IdentityWorld { n_identities: n, d_obs, prototypes, cameras, intra_noise: sigma_intra, seed })
}

fn random_unit<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// A camera is a rotation of bounded angle composed with per-axis scaling
/// in [0.7, 1.3] plus a bias. The rotation is a product of Givens rotations
/// in disjoint random planes with angles up to [`CAMERA_MAX_ROTATION`]:
/// large enough that an untrained embedder matches across cameras at chance
/// and warm-up-only training degrades clearly, small enough that the
/// alignment stays representable by a single affine layer. Condition is
/// verified independently with a power-iteration estimate.
fn try_camera<R: Rng>(d: usize, rng: &mut R) -> Option<Camera> {
    let mut rot = Matrix::identity(d);
    let mut axes: Vec<usize> = (0..d).collect();
    axes.shuffle(rng);
    for plane in axes.chunks_exact(2) {
        let (a, b) = (plane[0], plane[1]);
        let theta = CAMERA_MAX_ROTATION * rng.gen_range(0.5..1.0);
        let (sin, cos) = theta.sin_cos();
        for c in 0..d {
            let va = rot.get(a, c);
            let vb = rot.get(b, c);
            rot.set(a, c, cos * va - sin * vb);
            rot.set(b, c, sin * va + cos * vb);
        }
    }
    let scales: Vec<f64> = (0..d).map(|_| rng.gen_range(0.7..1.3)).collect();
    let transform = Matrix::from_fn(d, d, |i, j| rot.get(i, j) * scales[j]);
    let bias: Vec<f64> = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            CAMERA_BIAS_SCALE * z
        })
        .collect();
    let noise_scale = rng.gen_range(0.8..1.2);
    if condition_estimate(&transform) > MAX_CAMERA_CONDITION {
        return None;
    }
    Some(Camera { transform, bias, noise_scale })
}

/// Condition number estimate via power iteration on A^T A: the dominant
/// eigenvalue gives sigma_max^2, and iterating on (c I - A^T A) exposes
/// sigma_min^2 without a matrix inverse.
fn condition_estimate(a: &Matrix) -> f64 {
    let d = a.cols();
    let ata = matmul(&a.transpose(), a).expect("square");
    let lambda_max = dominant_eigenvalue(&ata);
    let c = lambda_max + 1.0;
    let shifted = Matrix::from_fn(d, d, |i, j| {
        let base = if i == j { c } else { 0.0 };
        base - ata.get(i, j)
    });
    let lambda_min = c - dominant_eigenvalue(&shifted);
    if lambda_min <= 0.0 {
        return f64::INFINITY;
    }
    (lambda_max / lambda_min).sqrt()
}

fn dominant_eigenvalue(m: &Matrix) -> f64 {
    let d = m.rows();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    // convergence is (lambda2/lambda1)^2k; the shifted matrix in
    // condition_estimate can have a narrow gap, so iterate generously
    for _ in 0..3000 {
        let mut next = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                next[i] += m.get(i, j) * v[j];
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in &mut next {
            *x /= norm;
        }
        lambda = norm;
        v = next;
    }
    lambda
}

/// One noisy view of an identity through a camera.
pub fn observe<R: Rng>(
    world: &IdentityWorld,
    identity: usize,
    camera: usize,
    rng: &mut R,
) -> Result<Instance> {
    observe_at(world, identity, camera, 0, 1.0, rng)
}

fn observe_at<R: Rng>(
    world: &IdentityWorld,
    identity: usize,
    camera: usize,
    frame: usize,
    noise_mult: f64,
    rng: &mut R,
) -> Result<Instance> {
    if identity >= world.n_identities {
        return Err(Error::InvalidParam(format!(
            "identity {identity} out of range (N = {})",
            world.n_identities
        )));
    }
    if camera >= world.cameras.len() {
        return Err(Error::InvalidParam(format!(
            "camera {camera} out of range ({} cameras)",
            world.cameras.len()
        )));
    }
    let cam = &world.cameras[camera];
    let mut obs = cam.apply(&world.prototype(identity));
    let sigma = world.intra_noise * cam.noise_scale * noise_mult;
    for x in &mut obs {
        let z: f64 = StandardNormal.sample(rng);
        *x += sigma * z;
    }
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation".into()));
    }
    Ok(Instance { observation: obs, identity, camera, frame })
}

/// Same-camera pair separated by `frame_gap` frames. Set 2 keeps
/// `round_ties_even(tau_alpha * K)` of set 1's identities and replaces the
/// rest with identities disjoint from set 1; its order is shuffled so the
/// correct association is never the identity mapping by construction. The
/// gap has no temporal dynamics behind it — it scales set 2's noise linearly.
pub fn intra_sample<R: Rng>(
    world: &IdentityWorld,
    k: usize,
    tau_alpha: f64,
    frame_gap: usize,
    rng: &mut R,
) -> Result<FramePair> {
    if !(tau_alpha > 0.0 && tau_alpha <= 1.0) {
        return Err(Error::InvalidParam(format!("tau_alpha must be in (0,1], got {tau_alpha}")));
    }
    if frame_gap == 0 {
        return Err(Error::InvalidParam("frame_gap must be >= 1".into()));
    }
    let camera = rng.gen_range(0..world.cameras.len());
    sample_pair(world, k, tau_alpha, camera, camera, frame_gap, rng)
}

/// Same-timestamp pair seen through two distinct cameras; shared-identity
/// fraction governed by `tau_beta` exactly as in [`intra_sample`].
pub fn inter_sample<R: Rng>(
    world: &IdentityWorld,
    k: usize,
    tau_beta: f64,
    rng: &mut R,
) -> Result<FramePair> {
    if !(0.0..=1.0).contains(&tau_beta) {
        return Err(Error::InvalidParam(format!("tau_beta must be in [0,1], got {tau_beta}")));
    }
    let cam1 = rng.gen_range(0..world.cameras.len());
    let mut cam2 = rng.gen_range(0..world.cameras.len() - 1);
    if cam2 >= cam1 {
        cam2 += 1;
    }
    sample_pair(world, k, tau_beta, cam1, cam2, 0, rng)
}

fn sample_pair<R: Rng>(
    world: &IdentityWorld,
    k: usize,
    tau: f64,
    cam1: usize,
    cam2: usize,
    frame_gap: usize,
    rng: &mut R,
) -> Result<FramePair> {
    if k == 0 {
        return Err(Error::EmptySet);
    }
    if k > world.n_identities {
        return Err(Error::InvalidParam(format!(
            "K = {k} exceeds identity count {}",
            world.n_identities
        )));
    }

    let ids1 = sample_distinct(world.n_identities, k, rng);
    let shared_count = (tau * k as f64).round_ties_even() as usize;

    let mut kept = ids1.clone();
    kept.shuffle(rng);
    kept.truncate(shared_count);

    let need = k - shared_count;
    let in_set1: BTreeSet<usize> = ids1.iter().copied().collect();
    let mut pool: Vec<usize> = (0..world.n_identities).filter(|i| !in_set1.contains(i)).collect();
    if pool.len() < need {
        return Err(Error::InvalidParam(format!(
            "need {need} replacement identities disjoint from set 1, only {} available",
            pool.len()
        )));
    }
    pool.shuffle(rng);
    let mut ids2 = kept;
    ids2.extend(pool.into_iter().take(need));
    ids2.shuffle(rng);

    let set1: Vec<Instance> = ids1
        .iter()
        .map(|&id| observe_at(world, id, cam1, 0, 1.0, rng))
        .collect::<Result<_>>()?;
    let set2: Vec<Instance> = ids2
        .iter()
        .map(|&id| observe_at(world, id, cam2, frame_gap, frame_gap.max(1) as f64, rng))
        .collect::<Result<_>>()?;

    let tau_measured = measure_symmetry(&set1, &set2)?;
    let kind = if cam1 == cam2 { PairKind::Intra } else { PairKind::Inter };
    Ok(FramePair { set1, set2, kind, tau: tau_measured })
}

/// K distinct values from 0..n, uniformly, via partial Fisher-Yates.
fn sample_distinct<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        all.swap(i, j);
    }
    all.truncate(k);
    all
}

/// Symmetry of a pair: distinct shared identities over max set size.
pub fn measure_symmetry(set1: &[Instance], set2: &[Instance]) -> Result<f64> {
    if set1.is_empty() || set2.is_empty() {
        return Err(Error::EmptySet);
    }
    let ids1: BTreeSet<usize> = set1.iter().map(|i| i.identity).collect();
    let ids2: BTreeSet<usize> = set2.iter().map(|i| i.identity).collect();
    let shared = ids1.intersection(&ids2).count();
    Ok(shared as f64 / set1.len().max(set2.len()) as f64)
}

/// Stacks a set's observations as columns of a D_obs x K matrix.
pub fn observation_matrix(set: &[Instance]) -> Result<Matrix> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let d = set[0].observation.len();
    if set.iter().any(|inst| inst.observation.len() != d) {
        return Err(Error::Shape("instances with mixed observation dims".into()));
    }
    Ok(Matrix::from_fn(d, set.len(), |i, j| set[j].observation[i]))
}

/// Hidden labels of a set, in column order.
pub fn identities(set: &[Instance]) -> Vec<usize> {
    set.iter().map(|i| i.identity).collect()
}
