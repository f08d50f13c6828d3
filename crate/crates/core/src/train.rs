//! Learnable embedder and the two-stage schedule.
//!
//! The embedder is one or two affine layers (tanh between when two) followed
//! by column normalization, so its outputs plug directly into the association
//! pipeline. Training runs a warm-up stage on same-camera pairs only, then a
//! mixed stage where every batch splits evenly between same-camera and
//! cross-camera pairs with 1:1 loss weighting. Batch streams can be
//! materialized up front so controlled comparisons see byte-identical data.
//!
//! The optimizer, learning rate, and stage-2 batch composition are this
//! crate's defaults (adam at 1e-2, even split): they are not dictated by the
//! objective and are configurable.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

use crate::assoc::{self, AffinityMatrix, EmbeddingMatrix, LossConfig};
use crate::error::{Error, Result};
use crate::matrix::{l2_normalize_backward, l2_normalize_columns, matmul, Matrix};
use crate::sim::{
    derive_rng, inter_sample, intra_sample, observation_matrix, FramePair, IdentityWorld,
    Instance, PairKind, SymmetrySchedule,
};

/// RNG stream index for model initialization.
pub const MODEL_STREAM: u64 = 0;
/// RNG stream index for batch sampling.
pub const DATA_STREAM: u64 = 1;
/// The mixed stage anneals the learning rate linearly down to this fraction
/// of the configured rate; the warm-up stage runs at the full rate.
pub const STAGE2_FINAL_LR_FRACTION: f64 = 0.1;
/// Fraction of each mixed-stage batch drawn as cross-camera pairs; the rest
/// are same-camera pairs so instance discrimination keeps being reinforced.
pub const STAGE2_INTER_FRACTION: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Affine {
    /// out x in
    w: Matrix,
    b: Vec<f64>,
}

impl Affine {
    fn apply(&self, z: &Matrix) -> Matrix {
        let out = self.w.rows();
        let mut y = matmul(&self.w, z).expect("affine shapes");
        for i in 0..out {
            for j in 0..y.cols() {
                y.set(i, j, y.get(i, j) + self.b[i]);
            }
        }
        y
    }
}

/// Embedding function: affine layer(s) + column normalization, mapping
/// observation columns to unit-norm embedding columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedEmbedder {
    layers: Vec<Affine>,
}

/// Intermediate values retained by [`LearnedEmbedder::embed_raw`] for the
/// parameter backward pass.
#[derive(Clone, Debug)]
pub struct EmbedTape {
    layer_inputs: Vec<Matrix>,
    activations: Vec<Matrix>,
    pre_norm: Matrix,
}

/// Per-layer parameter gradients, in layer order.
#[derive(Clone, Debug)]
pub struct EmbedderGrad {
    d_w: Vec<Matrix>,
    d_b: Vec<Vec<f64>>,
}

impl EmbedderGrad {
    /// Flattened in the same order as [`LearnedEmbedder::params_flat`].
    pub fn into_flat(self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.d_w.into_iter().zip(self.d_b) {
            out.extend_from_slice(w.data());
            out.extend(b);
        }
        out
    }
}

impl LearnedEmbedder {
    /// Single affine layer with Gaussian init scaled by 1/sqrt(d_in).
    pub fn linear<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { layers: vec![random_affine(d_in, d_out, rng)?] })
    }

    /// Two affine layers with tanh between.
    pub fn two_layer<R: Rng>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            layers: vec![random_affine(d_in, hidden, rng)?, random_affine(hidden, d_out, rng)?],
        })
    }

    /// Square single layer initialized to the identity map.
    pub fn identity_init(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParam("embedder dims must be positive".into()));
        }
        Ok(Self { layers: vec![Affine { w: Matrix::identity(d), b: vec![0.0; d] }] })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("at least one layer").w.rows()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.rows() * l.w.cols() + l.b.len()).sum()
    }

    /// All parameters, layer by layer: weights row-major, then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.rows() * l.w.cols();
            let nb = l.b.len();
            l.w.data_mut().copy_from_slice(&params[at..at + nw]);
            at += nw;
            l.b.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Embeds observation columns; returns the normalized output and the tape.
    pub fn embed_raw(&self, x: &Matrix) -> Result<(Matrix, EmbedTape)> {
        if x.rows() != self.d_in() {
            return Err(Error::Shape(format!(
                "embedder input dim {} but observations have dim {}",
                self.d_in(),
                x.rows()
            )));
        }
        let n_layers = self.layers.len();
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut activations = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut z = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(z.clone());
            let y = layer.apply(&z);
            if li + 1 < n_layers {
                z = Matrix::from_fn(y.rows(), y.cols(), |i, j| y.get(i, j).tanh());
                activations.push(z.clone());
            } else {
                z = y;
            }
        }
        let out = l2_normalize_columns(&z)?;
        Ok((out, EmbedTape { layer_inputs, activations, pre_norm: z }))
    }

    /// Embeds a set of instances as a typed unit-column matrix.
    pub fn embed(&self, instances: &[Instance]) -> Result<EmbeddingMatrix> {
        let x = observation_matrix(instances)?;
        let (out, _) = self.embed_raw(&x)?;
        EmbeddingMatrix::new(out)
    }

    /// Gradient of the recorded forward pass with respect to all parameters,
    /// given the upstream gradient at the normalized output.
    pub fn embed_backward(&self, tape: &EmbedTape, g_out: &Matrix) -> Result<EmbedderGrad> {
        let n_layers = self.layers.len();
        let mut d_w = vec![Matrix::zeros(1, 1); n_layers];
        let mut d_b = vec![Vec::new(); n_layers];

        let mut g = l2_normalize_backward(&tape.pre_norm, g_out)?;
        for li in (0..n_layers).rev() {
            let input = &tape.layer_inputs[li];
            d_w[li] = matmul(&g, &input.transpose())?;
            d_b[li] = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
            if li > 0 {
                let g_in = matmul(&self.layers[li].w.transpose(), &g)?;
                let a = &tape.activations[li - 1];
                g = Matrix::from_fn(g_in.rows(), g_in.cols(), |i, j| {
                    g_in.get(i, j) * (1.0 - a.get(i, j) * a.get(i, j))
                });
            }
        }
        Ok(EmbedderGrad { d_w, d_b })
    }

    /// Writes a versioned JSON checkpoint; parameters round-trip bit-exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let snap = Checkpoint { format_version: CHECKPOINT_VERSION, model: self.clone() };
        std::fs::write(path, serde_json::to_string_pretty(&snap)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let snap: Checkpoint = serde_json::from_str(&text)?;
        if snap.format_version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint version {} (supported: {CHECKPOINT_VERSION})",
                snap.format_version
            )));
        }
        Ok(snap.model)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: LearnedEmbedder,
}

fn random_affine<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Result<Affine> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::InvalidParam("embedder dims must be positive".into()));
    }
    let scale = 1.0 / (d_in as f64).sqrt();
    let w = Matrix::from_fn(d_out, d_in, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    });
    Ok(Affine { w, b: vec![0.0; d_out] })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over the flattened parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParam(format!("learning rate must be > 0, got {lr}")));
        }
        Ok(Self { kind, lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 })
    }

    /// Adjusts the step size without resetting accumulated moments.
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update in place. Sgd: `p -= lr * g`. Adam: bias-corrected moment
    /// estimates (beta1=0.9, beta2=0.999, eps=1e-8).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len(), "parameter/gradient length mismatch");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                    self.t = 0;
                }
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
    }
}

/// Everything a training run needs besides the world and the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pairs_per_batch: usize,
    pub instances_per_frame: usize,
    pub frame_gap: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    pub schedule: SymmetrySchedule,
    /// Ablation switch: stage-2 batches drop their same-camera half.
    pub inter_only_stage2: bool,
    /// Output dimension of the embedder built by [`build_model`].
    pub embed_dim: usize,
    /// When set, [`build_model`] builds the two-layer variant.
    pub hidden_dim: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_batch == 0 {
            return Err(Error::InvalidParam("pairs_per_batch must be >= 1".into()));
        }
        if self.instances_per_frame == 0 {
            return Err(Error::InvalidParam("instances_per_frame must be >= 1".into()));
        }
        if self.frame_gap == 0 {
            return Err(Error::InvalidParam("frame_gap must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == Some(0) {
            return Err(Error::InvalidParam("embedder dims must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pairs_per_batch: 16,
            instances_per_frame: 12,
            frame_gap: 1,
            stage1_iters: 300,
            stage2_iters: 1200,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            loss: LossConfig::default(),
            schedule: SymmetrySchedule::new(0.9, 0.6).expect("valid default schedule"),
            inter_only_stage2: false,
            embed_dim: 16,
            hidden_dim: None,
            seed: 0,
        }
    }
}

/// Fresh embedder for this world and config, initialized from the seed's
/// model stream so runs with the same seed start from identical parameters.
pub fn build_model(world: &IdentityWorld, cfg: &TrainConfig, seed: u64) -> Result<LearnedEmbedder> {
    let mut rng = derive_rng(seed, MODEL_STREAM);
    match cfg.hidden_dim {
        Some(h) => LearnedEmbedder::two_layer(world.d_obs(), h, cfg.embed_dim, &mut rng),
        None => LearnedEmbedder::linear(world.d_obs(), cfg.embed_dim, &mut rng),
    }
}

/// One logged iteration. `seconds` is wall time and is intentionally absent
/// from the CSV encoding, which must be byte-identical across identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub stage: u8,
    pub loss_intra: Option<f64>,
    pub loss_inter: Option<f64>,
    pub hard_cc_rate: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// Deterministic CSV: shortest round-trip float formatting, empty cell
    /// for a loss that the stage does not produce. Wall time is excluded so
    /// identical seeds give byte-identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,stage,loss_intra,loss_inter,hard_cc_rate\n");
        for r in &self.records {
            let li = r.loss_intra.map(|v| v.to_string()).unwrap_or_default();
            let le = r.loss_inter.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration, r.stage, li, le, r.hard_cc_rate
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum()
    }

    pub fn final_losses(&self) -> (Option<f64>, Option<f64>) {
        self.records.last().map(|r| (r.loss_intra, r.loss_inter)).unwrap_or((None, None))
    }
}

/// Losses and diagnostics of a single step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub loss_intra: Option<f64>,
    pub loss_inter: Option<f64>,
    pub hard_cc_rate: f64,
}

/// One optimizer step on a batch of pairs: per-pair forward/backward, means
/// over each pair kind combined at 1:1 weight, gradients accumulated in batch
/// order (deterministic), one parameter update.
pub fn train_step(
    model: &mut LearnedEmbedder,
    optimizer: &mut Optimizer,
    batch: &[FramePair],
    loss_cfg: &LossConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::EmptySet);
    }
    let n_intra = batch.iter().filter(|p| p.kind == PairKind::Intra).count();
    let n_inter = batch.len() - n_intra;

    let mut grad_accum = vec![0.0; model.n_params()];
    let mut loss_intra = 0.0;
    let mut loss_inter = 0.0;
    let mut cc_sum = 0.0;

    for pair in batch {
        let x1_obs = observation_matrix(&pair.set1)?;
        let x2_obs = observation_matrix(&pair.set2)?;
        let (x1, tape1) = model.embed_raw(&x1_obs)?;
        let (x2, tape2) = model.embed_raw(&x2_obs)?;

        let pass = assoc::forward_raw(&x1, &x2, loss_cfg)?;
        let weight = match pair.kind {
            PairKind::Intra => {
                loss_intra += pass.loss();
                1.0 / n_intra as f64
            }
            PairKind::Inter => {
                loss_inter += pass.loss();
                1.0 / n_inter as f64
            }
        };
        cc_sum += assoc::hard_cycle_consistency(&AffinityMatrix::new(pass.affinity().clone())?);

        let g = assoc::backward(&pass);
        let g1 = model.embed_backward(&tape1, &g.d_x1)?.into_flat();
        let g2 = model.embed_backward(&tape2, &g.d_x2)?.into_flat();
        for i in 0..grad_accum.len() {
            grad_accum[i] += weight * (g1[i] + g2[i]);
        }
    }

    let loss_intra = (n_intra > 0).then(|| loss_intra / n_intra as f64);
    let loss_inter = (n_inter > 0).then(|| loss_inter / n_inter as f64);
    let loss = loss_intra.unwrap_or(0.0) + loss_inter.unwrap_or(0.0);
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }

    let mut params = model.params_flat();
    optimizer.step(&mut params, &grad_accum);
    model.set_params_flat(&params)?;

    Ok(StepStats { loss, loss_intra, loss_inter, hard_cc_rate: cc_sum / batch.len() as f64 })
}

/// A materialized batch with its stage tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedBatch {
    pub stage: u8,
    pub pairs: Vec<FramePair>,
}

/// Materializes the full two-stage batch stream up front, driven entirely by
/// `cfg.seed`. Controlled comparisons train different models on one plan so
/// their data is byte-identical. Per batch, one tau is drawn per pair kind.
pub fn plan_batches(world: &IdentityWorld, cfg: &TrainConfig) -> Result<Vec<PlannedBatch>> {
    cfg.validate()?;
    let mut rng = derive_rng(cfg.seed, DATA_STREAM);
    let k = cfg.instances_per_frame;
    let mut plan = Vec::with_capacity(cfg.stage1_iters + cfg.stage2_iters);

    for _ in 0..cfg.stage1_iters {
        let tau_a = cfg.schedule.draw_alpha(&mut rng);
        let pairs = (0..cfg.pairs_per_batch)
            .map(|_| intra_sample(world, k, tau_a, cfg.frame_gap, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        plan.push(PlannedBatch { stage: 1, pairs });
    }

    for _ in 0..cfg.stage2_iters {
        let n_inter = if cfg.inter_only_stage2 {
            cfg.pairs_per_batch
        } else {
            ((cfg.pairs_per_batch as f64 * STAGE2_INTER_FRACTION).round() as usize)
                .clamp(1, cfg.pairs_per_batch.saturating_sub(1).max(1))
        };
        let n_intra = cfg.pairs_per_batch - n_inter;
        let mut pairs = Vec::with_capacity(cfg.pairs_per_batch);
        if n_intra > 0 {
            let tau_a = cfg.schedule.draw_alpha(&mut rng);
            for _ in 0..n_intra {
                pairs.push(intra_sample(world, k, tau_a, cfg.frame_gap, &mut rng)?);
            }
        }
        if n_inter > 0 {
            let tau_b = cfg.schedule.draw_beta(&mut rng);
            for _ in 0..n_inter {
                pairs.push(inter_sample(world, k, tau_b, &mut rng)?);
            }
        }
        plan.push(PlannedBatch { stage: 2, pairs });
    }
    Ok(plan)
}

/// Runs the optimizer over a materialized plan; a non-finite loss aborts with
/// the iteration that produced it.
pub fn train_on_plan(
    model: &mut LearnedEmbedder,
    cfg: &TrainConfig,
    plan: &[PlannedBatch],
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut log = TrainLog::default();
    let n_stage2 = plan.iter().filter(|b| b.stage == 2).count();
    let mut stage2_seen = 0usize;
    for (iteration, batch) in plan.iter().enumerate() {
        if batch.stage == 2 {
            // Anneal the mixed stage linearly down to a tenth of the base
            // rate so the final iterations settle instead of oscillating.
            let progress = stage2_seen as f64 / (n_stage2.max(2) - 1) as f64;
            optimizer.set_lr(cfg.learning_rate * (1.0 - (1.0 - STAGE2_FINAL_LR_FRACTION) * progress));
            stage2_seen += 1;
        }
        let t0 = Instant::now();
        let stats = train_step(model, &mut optimizer, &batch.pairs, &cfg.loss).map_err(|e| {
            match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { iteration },
                other => other,
            }
        })?;
        log.records.push(TrainRecord {
            iteration,
            stage: batch.stage,
            loss_intra: stats.loss_intra,
            loss_inter: stats.loss_inter,
            hard_cc_rate: stats.hard_cc_rate,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// Warm-up on same-camera pairs, then mixed batches; returns the full log.
pub fn train_two_stage(
    world: &IdentityWorld,
    model: &mut LearnedEmbedder,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let plan = plan_batches(world, cfg)?;
    train_on_plan(model, cfg, &plan)
}
