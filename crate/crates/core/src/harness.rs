//! Training loops, evaluation protocol, checkpointing, and the experiment
//! drivers (ε-amplitude sweep, discriminator ablation). Everything here is
//! deterministic given (seed, config, dataset): per-epoch randomness comes
//! from counter-based streams, so a checkpoint only needs the seed and the
//! epoch index to resume bit-exactly.

use crate::dataio::{batch_tensor, content_id, Dataset, DatasetSplits, Image};
use crate::error::{Error, Result};
use crate::metrics::{l1_distance, psnr, ssim, EvalRecord, EvalReport, ASR_THRESHOLD};
use crate::nn::BufferSet;
use crate::objectives::{
    adv_loss_discriminator, adv_loss_generator, breakdown, rec_loss, swap_loss, total_loss,
    LossWeights,
};
use crate::protector::{budget_band, FcatMode, ProtectorModel, DEFAULT_WIDTH};
use crate::rng;
use crate::scalar::Scalar;
use crate::surrogate::SwapModel;
use crate::tensor::{Adam, AdamState, Mode, ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const KIND_PROTECTOR: &str = "protector-train";
const KIND_SURROGATE: &str = "surrogate";

/// Default amplitude grid for [`sweep_epsilon`].
pub const EPSILON_GRID: [f64; 6] = [0.01, 0.02, 0.03, 0.04, 0.05, 0.06];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weights: LossWeights,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weights: LossWeights::default(),
            epsilon: 0.05,
            epochs: 30,
            batch: 8,
            seed: 0,
            discriminator: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::invalid(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        for (name, v) in [
            ("lambda_rec", self.weights.lambda_rec),
            ("lambda_adv", self.weights.lambda_adv),
            ("lambda_swap", self.weights.lambda_swap),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} {v} must be finite and non-negative")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Per-epoch means of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec: f64,
    pub adv: f64,
    pub swap: f64,
    pub total: f64,
}

/// Everything training mutates, bundled so it can be checkpointed and
/// resumed mid-run.
pub struct TrainState<S: Scalar> {
    pub model: ProtectorModel<S>,
    pub opt: Adam<S>,
    pub disc_opt: Adam<S>,
    pub cfg: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
}

pub fn init_train_state<S: Scalar>(cfg: &TrainConfig) -> Result<TrainState<S>> {
    cfg.validate()?;
    Ok(TrainState {
        model: ProtectorModel::new(DEFAULT_WIDTH, cfg.epsilon, cfg.seed)?,
        opt: Adam::new(cfg.lr),
        disc_opt: Adam::new(cfg.lr),
        cfg: cfg.clone(),
        epoch: 0,
    })
}

/// Advance `state` to `cfg.epochs`, returning one log row per epoch run.
/// The surrogate is used read-only (eval mode, gradients discarded); its
/// parameter values are identical before and after.
pub fn run_training<S: Scalar>(
    state: &mut TrainState<S>,
    surrogate: &SwapModel<S>,
    data: &Dataset,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train the protector on no data"));
    }
    let mut log = Vec::new();
    for epoch in state.epoch..state.cfg.epochs {
        log.push(run_epoch(state, surrogate, data, epoch)?);
        state.epoch = epoch + 1;
    }
    Ok(log)
}

/// Fresh end-to-end training run.
pub fn train_protector<S: Scalar>(
    cfg: &TrainConfig,
    surrogate: &SwapModel<S>,
    data: &Dataset,
) -> Result<(ProtectorModel<S>, Vec<EpochLog>)> {
    let mut state = init_train_state::<S>(cfg)?;
    let log = run_training(&mut state, surrogate, data)?;
    Ok((state.model, log))
}

fn run_epoch<S: Scalar>(
    state: &mut TrainState<S>,
    surrogate: &SwapModel<S>,
    data: &Dataset,
    epoch: usize,
) -> Result<EpochLog> {
    let cfg = &state.cfg;
    let n = data.len();
    // targets are visited in a shuffled order; each draws an independent source
    let order = rng::permutation(&mut rng::stream(cfg.seed, "protect-order", epoch as u64), n);
    let partner = rng::permutation(&mut rng::stream(cfg.seed, "protect-pairs", epoch as u64), n);
    let mut sums = [0.0f64; 4];
    let mut batches = 0usize;
    for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
        let tgt: Vec<&Image> = chunk.iter().map(|&i| &data.items[i].0).collect();
        let src: Vec<&Image> = chunk.iter().map(|&i| &data.items[partner[i]].0).collect();
        let x_t = batch_tensor::<S>(&tgt)?;
        let x_s = batch_tensor::<S>(&src)?;

        let x_p = state.model.protect(&x_t, Mode::Train)?;
        // swap target output is a constant reference; recomputed per batch
        let y = surrogate.swap(&x_s, &x_t, Mode::Eval)?.detach();
        let y_p = surrogate.swap(&x_s, &x_p, Mode::Eval)?;

        let rec = rec_loss(&x_p, &x_t)?;
        let adv = if cfg.discriminator {
            adv_loss_generator(&state.model.discriminate(&x_p, Mode::Train)?)
        } else {
            Tensor::scalar(S::zero())
        };
        let swap = swap_loss(&y_p, &y)?;
        let total = total_loss(&rec, &adv, &swap, &cfg.weights)?;
        let bd = breakdown(&rec, &adv, &swap, &total)?;
        if ![bd.rec, bd.adv, bd.swap, bd.total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: bi,
                rec: bd.rec,
                adv: bd.adv,
                swap: bd.swap,
                total: bd.total,
            });
        }
        total.backward()?;
        state.opt.step(&state.model.params)?;
        state.model.params.zero_grad();
        // the frozen surrogate collects spillover gradients on the shared
        // graph; discard them so nothing accumulates across steps
        surrogate.params.zero_grad();

        if cfg.discriminator {
            let p_real = state.model.discriminate(&x_t, Mode::Train)?;
            let p_fake = state.model.discriminate(&x_p.detach(), Mode::Train)?;
            let d_loss = adv_loss_discriminator(&p_real, &p_fake);
            let dv = d_loss.item()?.to_f64x();
            if !dv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    rec: bd.rec,
                    adv: dv,
                    swap: bd.swap,
                    total: bd.total,
                });
            }
            d_loss.backward()?;
            state.disc_opt.step(&state.model.disc_params)?;
            state.model.disc_params.zero_grad();
        }

        sums[0] += bd.rec;
        sums[1] += bd.adv;
        sums[2] += bd.swap;
        sums[3] += bd.total;
        batches += 1;
    }
    let k = batches as f64;
    Ok(EpochLog {
        epoch,
        rec: sums[0] / k,
        adv: sums[1] / k,
        swap: sums[2] / k,
        total: sums[3] / k,
    })
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

fn to_unit_f64<S: Scalar>(t: &Tensor<S>) -> Vec<f64> {
    t.with_data(|d| d.iter().map(|v| (v.to_f64x() + 1.0) / 2.0).collect())
}

fn to_signed_f64<S: Scalar>(t: &Tensor<S>) -> Vec<f64> {
    t.with_data(|d| d.iter().map(|v| v.to_f64x()).collect())
}

/// Re-assert the budget independently of the clamp inside `protect`.
fn audit_budget<S: Scalar>(x_t: &Tensor<S>, x_p: &Tensor<S>, epsilon: f64) -> Result<()> {
    let (a, b) = (x_t.to_vec(), x_p.to_vec());
    for (i, (t, p)) in a.iter().zip(b.iter()).enumerate() {
        let dev = (p.to_f64x() - t.to_f64x()).abs() / 2.0;
        if dev > epsilon {
            return Err(Error::invalid(format!(
                "budget audit failed at element {i}: deviation {dev} > epsilon {epsilon}"
            )));
        }
        if p.to_f64x().abs() > 1.0 {
            return Err(Error::invalid(format!(
                "budget audit failed at element {i}: value {} outside [-1, 1]",
                p.to_f64x()
            )));
        }
    }
    Ok(())
}

fn eval_record<S: Scalar>(
    index: usize,
    x_t: &Tensor<S>,
    x_p: &Tensor<S>,
    y: &Tensor<S>,
    y_p: &Tensor<S>,
) -> Result<EvalRecord> {
    let (_, c, h, w) = x_t.dims4("evaluate")?;
    let a = to_unit_f64(x_t);
    let b = to_unit_f64(x_p);
    let l1 = l1_distance(&to_signed_f64(y_p), &to_signed_f64(y))?;
    Ok(EvalRecord {
        index,
        psnr: psnr(&a, &b)?,
        ssim: ssim(&a, &b, c, h, w)?,
        l1_dist: l1,
        success: l1 > ASR_THRESHOLD,
    })
}

/// Per-pair metrics over a test split: visual quality of the protected
/// target (PSNR/SSIM), swap-output distortion (L1), and the success flag.
/// Pairs each target with its successor as the swap source. The budget is
/// re-asserted on every protected image.
pub fn evaluate<S: Scalar>(
    model: &ProtectorModel<S>,
    surrogate: &SwapModel<S>,
    test: &Dataset,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("evaluate needs a non-empty test split"));
    }
    let n = test.len();
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let x_t = test.items[i].0.to_tensor::<S>();
        let x_s = test.items[(i + 1) % n].0.to_tensor::<S>();
        let x_p = model.protect(&x_t, Mode::Eval)?;
        audit_budget(&x_t, &x_p, model.epsilon())?;
        let y = surrogate.swap(&x_s, &x_t, Mode::Eval)?;
        let y_p = surrogate.swap(&x_s, &x_p, Mode::Eval)?;
        records.push(eval_record(i, &x_t, &x_p, &y, &y_p)?);
    }
    Ok(EvalReport {
        records,
        epsilon: model.epsilon(),
        threshold: ASR_THRESHOLD,
        seeds: Vec::new(),
        model_checksum: protector_checksum(model),
        dataset_id: content_id(test),
    })
}

/// Baseline for comparison: replace the learned perturbation with uniform
/// noise of the same amplitude, projected through the identical budget
/// clamp. Everything else matches [`evaluate`].
pub fn random_baseline<S: Scalar>(
    surrogate: &SwapModel<S>,
    test: &Dataset,
    epsilon: f64,
    seed: u64,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("baseline needs a non-empty test split"));
    }
    if !(epsilon >= 0.0 && epsilon <= 1.0) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let (band, limit) = budget_band::<S>(epsilon);
    let n = test.len();
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let x_t = test.items[i].0.to_tensor::<S>();
        let x_s = test.items[(i + 1) % n].0.to_tensor::<S>();
        let noise = Tensor::<S>::uniform(
            x_t.shape(),
            -limit,
            limit,
            &mut rng::stream(seed, "noise-baseline", i as u64),
        );
        let x_p = x_t.add(&noise)?.budget_project(&x_t, band, limit)?;
        audit_budget(&x_t, &x_p, epsilon)?;
        let y = surrogate.swap(&x_s, &x_t, Mode::Eval)?;
        let y_p = surrogate.swap(&x_s, &x_p, Mode::Eval)?;
        records.push(eval_record(i, &x_t, &x_p, &y, &y_p)?);
    }
    Ok(EvalReport {
        records,
        epsilon,
        threshold: ASR_THRESHOLD,
        seeds: vec![seed],
        model_checksum: format!("uniform-noise-{seed}"),
        dataset_id: content_id(test),
    })
}

// ---------------------------------------------------------------------------
// experiment drivers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub asr: f64,
}

/// Retrain from scratch at every amplitude in `grid` (for every seed) and
/// evaluate on the test split; rows are seed-averaged per amplitude.
pub fn sweep_epsilon<S: Scalar>(
    base: &TrainConfig,
    grid: &[f64],
    seeds: &[u64],
    surrogate: &SwapModel<S>,
    splits: &DatasetSplits,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep needs a non-empty grid and seed list"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &epsilon in grid {
        let mut acc = [0.0f64; 3];
        for &seed in seeds {
            let cfg = TrainConfig { epsilon, seed, ..base.clone() };
            let (model, _) = train_protector::<S>(&cfg, surrogate, &splits.train)?;
            let report = evaluate(&model, surrogate, &splits.test)?;
            acc[0] += report.mean_psnr();
            acc[1] += report.mean_ssim();
            acc[2] += report.asr();
        }
        let k = seeds.len() as f64;
        rows.push(SweepRow {
            epsilon,
            psnr: acc[0] / k,
            ssim: acc[1] / k,
            asr: acc[2] / k,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub discriminator: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub asr: f64,
}

/// Twin runs from the same seed with the discriminator on and off.
pub fn ablate_discriminator<S: Scalar>(
    cfg: &TrainConfig,
    surrogate: &SwapModel<S>,
    splits: &DatasetSplits,
) -> Result<[AblationRow; 2]> {
    let run = |discriminator: bool| -> Result<AblationRow> {
        let cfg = TrainConfig { discriminator, ..cfg.clone() };
        let (model, _) = train_protector::<S>(&cfg, surrogate, &splits.train)?;
        let report = evaluate(&model, surrogate, &splits.test)?;
        Ok(AblationRow {
            discriminator,
            psnr: report.mean_psnr(),
            ssim: report.mean_ssim(),
            asr: report.asr(),
        })
    };
    Ok([run(true)?, run(false)?])
}

// ---------------------------------------------------------------------------
// checksums
// ---------------------------------------------------------------------------

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn buffer_bytes<S: Scalar>(buffers: &BufferSet<S>) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, mean, var) in buffers.snapshot() {
        for v in mean.iter().chain(var.iter()) {
            v.write_le(&mut out);
        }
    }
    out
}

/// Hex digest over every protector parameter and running statistic.
pub fn protector_checksum<S: Scalar>(model: &ProtectorModel<S>) -> String {
    let mut bytes = model.params.value_bytes();
    bytes.extend(model.disc_params.value_bytes());
    bytes.extend(buffer_bytes(&model.buffers));
    bytes.extend(buffer_bytes(&model.disc_buffers));
    sha256_hex(&bytes)
}

/// Hex digest over every surrogate parameter and running statistic; used to
/// audit that protector training leaves the frozen model untouched.
pub fn surrogate_checksum<S: Scalar>(model: &SwapModel<S>) -> String {
    let mut bytes = model.params.value_bytes();
    bytes.extend(buffer_bytes(&model.buffers));
    sha256_hex(&bytes)
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    channels: usize,
}

/// JSON header of a checkpoint file. The RNG state needed for bit-exact
/// resumption is (config.seed, epoch): all per-epoch randomness is drawn
/// from counter-based streams keyed by those two values.
#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    dtype: String,
    epoch: usize,
    seed: u64,
    width: usize,
    fcat: String,
    config: Option<TrainConfig>,
    params: Vec<TensorEntry>,
    disc_params: Vec<TensorEntry>,
    buffers: Vec<BufferEntry>,
    disc_buffers: Vec<BufferEntry>,
    opt_t: u64,
    disc_opt_t: u64,
}

fn tensor_entries<S: Scalar>(params: &ParamSet<S>) -> Vec<TensorEntry> {
    params
        .iter()
        .map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
        .collect()
}

fn buffer_entries<S: Scalar>(buffers: &BufferSet<S>) -> Vec<BufferEntry> {
    buffers
        .iter()
        .map(|(name, stats)| BufferEntry { name: name.to_string(), channels: stats.channels() })
        .collect()
}

fn push_values<S: Scalar>(out: &mut Vec<u8>, values: &[S]) {
    for v in values {
        v.write_le(out);
    }
}

/// Moments are lazily allocated on the first step; store zeros of the right
/// shape when none exist yet so the payload layout never varies.
fn normalize_adam<S: Scalar>(state: &mut AdamState<S>, params: &ParamSet<S>) {
    if state.m.is_empty() {
        state.m = params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect();
        state.v = state.m.clone();
    }
}

fn push_adam<S: Scalar>(out: &mut Vec<u8>, state: &AdamState<S>) {
    for m in &state.m {
        push_values(out, m);
    }
    for v in &state.v {
        push_values(out, v);
    }
}

fn fcat_name(mode: FcatMode) -> &'static str {
    match mode {
        FcatMode::PerturbedLow => "perturbed-low",
        FcatMode::RawLow => "raw-low",
    }
}

fn fcat_from_name(name: &str) -> Result<FcatMode> {
    match name {
        "perturbed-low" => Ok(FcatMode::PerturbedLow),
        "raw-low" => Ok(FcatMode::RawLow),
        other => Err(Error::CheckpointFormat(format!("unknown band layout '{other}'"))),
    }
}

fn assemble_checkpoint(manifest: &Manifest, payload: &[u8]) -> Result<Vec<u8>> {
    let manifest_json = serde_json::to_vec(manifest)?;
    let mut bytes = Vec::with_capacity(4 + 8 + manifest_json.len() + payload.len() + 32);
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    bytes.extend_from_slice(payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    Ok(bytes)
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("checkpoint path {} has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!("{file_name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize the full training state (model, both optimizers, config,
/// progress) with a trailing content checksum.
pub fn save_checkpoint<S: Scalar>(state: &TrainState<S>, path: &Path) -> Result<()> {
    let mut opt_state = state.opt.state();
    normalize_adam(&mut opt_state, &state.model.params);
    let mut disc_opt_state = state.disc_opt.state();
    normalize_adam(&mut disc_opt_state, &state.model.disc_params);
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        kind: KIND_PROTECTOR.to_string(),
        dtype: S::DTYPE.to_string(),
        epoch: state.epoch,
        seed: state.cfg.seed,
        width: state.model.width(),
        fcat: fcat_name(state.model.fcat).to_string(),
        config: Some(state.cfg.clone()),
        params: tensor_entries(&state.model.params),
        disc_params: tensor_entries(&state.model.disc_params),
        buffers: buffer_entries(&state.model.buffers),
        disc_buffers: buffer_entries(&state.model.disc_buffers),
        opt_t: opt_state.t,
        disc_opt_t: disc_opt_state.t,
    };
    let mut payload = Vec::new();
    payload.extend(state.model.params.value_bytes());
    payload.extend(state.model.disc_params.value_bytes());
    payload.extend(buffer_bytes(&state.model.buffers));
    payload.extend(buffer_bytes(&state.model.disc_buffers));
    push_adam(&mut payload, &opt_state);
    push_adam(&mut payload, &disc_opt_state);
    write_atomically(path, &assemble_checkpoint(&manifest, &payload)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointFormat(format!(
                "payload truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len()
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn values<S: Scalar>(&mut self, count: usize) -> Result<Vec<S>> {
        let raw = self.take(count * S::BYTES)?;
        Ok(raw.chunks_exact(S::BYTES).map(S::read_le).collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Split a checkpoint file into (manifest, payload), verifying magic and
/// checksum. The checksum covers everything before it.
fn open_checkpoint(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 4 + 8 + 32 {
        return Err(Error::CheckpointFormat("file too short".into()));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    let computed = Sha256::digest(body);
    if computed.as_slice() != stored {
        return Err(Error::ChecksumMismatch {
            stored: stored.iter().map(|b| format!("{b:02x}")).collect(),
            computed: computed.iter().map(|b| format!("{b:02x}")).collect(),
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if 12 + manifest_len > body.len() {
        return Err(Error::CheckpointFormat("manifest length overruns file".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&body[12..12 + manifest_len])?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok((manifest, &body[12 + manifest_len..]))
}

fn check_kind_dtype<S: Scalar>(manifest: &Manifest, kind: &str) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::CheckpointKind {
            found: manifest.kind.clone(),
            expected: kind.to_string(),
        });
    }
    if manifest.dtype != S::DTYPE {
        return Err(Error::CheckpointDtype {
            found: manifest.dtype.clone(),
            expected: S::DTYPE.to_string(),
        });
    }
    Ok(())
}

fn restore_params<S: Scalar>(
    reader: &mut Reader<'_>,
    entries: &[TensorEntry],
    params: &ParamSet<S>,
) -> Result<()> {
    if entries.len() != params.len() {
        return Err(Error::CheckpointFormat(format!(
            "checkpoint stores {} parameters, model has {}",
            entries.len(),
            params.len()
        )));
    }
    for entry in entries {
        let t = params.get(&entry.name).ok_or_else(|| {
            Error::CheckpointFormat(format!("unknown parameter '{}'", entry.name))
        })?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::CheckpointFormat(format!(
                "parameter '{}' has shape {:?} in the checkpoint, {:?} in the model",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let numel = entry.shape.iter().product();
        t.set_data(reader.values(numel)?)?;
    }
    Ok(())
}

fn restore_buffers<S: Scalar>(
    reader: &mut Reader<'_>,
    entries: &[BufferEntry],
    buffers: &BufferSet<S>,
) -> Result<()> {
    if entries.len() != buffers.len() {
        return Err(Error::CheckpointFormat(format!(
            "checkpoint stores {} buffers, model has {}",
            entries.len(),
            buffers.len()
        )));
    }
    for entry in entries {
        let mean = reader.values::<S>(entry.channels)?;
        let var = reader.values::<S>(entry.channels)?;
        buffers.restore(&entry.name, &mean, &var).map_err(|_| {
            Error::CheckpointFormat(format!("buffer '{}' does not fit the model", entry.name))
        })?;
    }
    Ok(())
}

fn restore_adam<S: Scalar>(
    reader: &mut Reader<'_>,
    t: u64,
    opt: &mut Adam<S>,
    params: &ParamSet<S>,
) -> Result<()> {
    let mut m = Vec::with_capacity(params.len());
    for (_, p) in params.iter() {
        m.push(reader.values::<S>(p.numel())?);
    }
    let mut v = Vec::with_capacity(params.len());
    for (_, p) in params.iter() {
        v.push(reader.values::<S>(p.numel())?);
    }
    opt.load_state(AdamState { t, m, v }, params)
}

/// Inverse of [`save_checkpoint`]: verify, rebuild the model skeleton from
/// the stored config, and overwrite every tensor and buffer.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<TrainState<S>> {
    let bytes = fs::read(path)?;
    let (manifest, payload) = open_checkpoint(&bytes)?;
    check_kind_dtype::<S>(&manifest, KIND_PROTECTOR)?;
    let cfg = manifest
        .config
        .clone()
        .ok_or_else(|| Error::CheckpointFormat("training checkpoint lacks a config".into()))?;
    cfg.validate()?;
    let mut model = ProtectorModel::<S>::new(manifest.width, cfg.epsilon, cfg.seed)?;
    model.fcat = fcat_from_name(&manifest.fcat)?;
    let mut reader = Reader { buf: payload, pos: 0 };
    restore_params(&mut reader, &manifest.params, &model.params)?;
    restore_params(&mut reader, &manifest.disc_params, &model.disc_params)?;
    restore_buffers(&mut reader, &manifest.buffers, &model.buffers)?;
    restore_buffers(&mut reader, &manifest.disc_buffers, &model.disc_buffers)?;
    let mut opt = Adam::new(cfg.lr);
    restore_adam(&mut reader, manifest.opt_t, &mut opt, &model.params)?;
    let mut disc_opt = Adam::new(cfg.lr);
    restore_adam(&mut reader, manifest.disc_opt_t, &mut disc_opt, &model.disc_params)?;
    if !reader.done() {
        return Err(Error::CheckpointFormat("trailing bytes after payload".into()));
    }
    Ok(TrainState {
        model,
        opt,
        disc_opt,
        cfg,
        epoch: manifest.epoch,
    })
}

/// Persist a trained surrogate (parameters and running statistics only).
pub fn save_surrogate<S: Scalar>(model: &SwapModel<S>, seed: u64, path: &Path) -> Result<()> {
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        kind: KIND_SURROGATE.to_string(),
        dtype: S::DTYPE.to_string(),
        epoch: 0,
        seed,
        width: 0,
        fcat: String::new(),
        config: None,
        params: tensor_entries(&model.params),
        disc_params: Vec::new(),
        buffers: buffer_entries(&model.buffers),
        disc_buffers: Vec::new(),
        opt_t: 0,
        disc_opt_t: 0,
    };
    let mut payload = Vec::new();
    payload.extend(model.params.value_bytes());
    payload.extend(buffer_bytes(&model.buffers));
    write_atomically(path, &assemble_checkpoint(&manifest, &payload)?)
}

pub fn load_surrogate<S: Scalar>(path: &Path) -> Result<SwapModel<S>> {
    let bytes = fs::read(path)?;
    let (manifest, payload) = open_checkpoint(&bytes)?;
    check_kind_dtype::<S>(&manifest, KIND_SURROGATE)?;
    let model = SwapModel::<S>::new(manifest.seed)?;
    let mut reader = Reader { buf: payload, pos: 0 };
    restore_params(&mut reader, &manifest.params, &model.params)?;
    restore_buffers(&mut reader, &manifest.buffers, &model.buffers)?;
    if !reader.done() {
        return Err(Error::CheckpointFormat("trailing bytes after payload".into()));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// CSV round trips
// ---------------------------------------------------------------------------

fn parse_field<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Report(format!("cannot parse {what} from '{field}'")))
}

fn split_line<'a>(line: &'a str, fields: usize, header: &str) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != fields {
        return Err(Error::Report(format!(
            "expected {fields} fields per row ({header}), got {} in '{line}'",
            parts.len()
        )));
    }
    Ok(parts)
}

fn check_header(text: &str, expected: &str) -> Result<Vec<String>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == expected => Ok(lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.to_string())
            .collect()),
        Some(h) => Err(Error::Report(format!("expected header '{expected}', got '{h}'"))),
        None => Err(Error::Report("empty document".into())),
    }
}

pub const TRAIN_LOG_HEADER: &str = "epoch,l_rec,l_adv,l_swap,l_total";
pub const EVAL_HEADER: &str = "index,psnr,ssim,l1_dist,success";
pub const SWEEP_HEADER: &str = "epsilon,psnr,ssim,asr";
pub const ABLATION_HEADER: &str = "discriminator,psnr,ssim,asr";

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{TRAIN_LOG_HEADER}\n");
    for e in log {
        out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.rec, e.adv, e.swap, e.total));
    }
    out
}

pub fn parse_train_log_csv(text: &str) -> Result<Vec<EpochLog>> {
    check_header(text, TRAIN_LOG_HEADER)?
        .iter()
        .map(|line| {
            let f = split_line(line, 5, TRAIN_LOG_HEADER)?;
            Ok(EpochLog {
                epoch: parse_field(f[0], "epoch")?,
                rec: parse_field(f[1], "l_rec")?,
                adv: parse_field(f[2], "l_adv")?,
                swap: parse_field(f[3], "l_swap")?,
                total: parse_field(f[4], "l_total")?,
            })
        })
        .collect()
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.index, r.psnr, r.ssim, r.l1_dist, r.success
        ));
    }
    out
}

pub fn parse_eval_csv(text: &str) -> Result<Vec<EvalRecord>> {
    check_header(text, EVAL_HEADER)?
        .iter()
        .map(|line| {
            let f = split_line(line, 5, EVAL_HEADER)?;
            Ok(EvalRecord {
                index: parse_field(f[0], "index")?,
                psnr: parse_field(f[1], "psnr")?,
                ssim: parse_field(f[2], "ssim")?,
                l1_dist: parse_field(f[3], "l1_dist")?,
                success: parse_field(f[4], "success")?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epsilon, r.psnr, r.ssim, r.asr));
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    check_header(text, SWEEP_HEADER)?
        .iter()
        .map(|line| {
            let f = split_line(line, 4, SWEEP_HEADER)?;
            Ok(SweepRow {
                epsilon: parse_field(f[0], "epsilon")?,
                psnr: parse_field(f[1], "psnr")?,
                ssim: parse_field(f[2], "ssim")?,
                asr: parse_field(f[3], "asr")?,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.discriminator, r.psnr, r.ssim, r.asr));
    }
    out
}

pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    check_header(text, ABLATION_HEADER)?
        .iter()
        .map(|line| {
            let f = split_line(line, 4, ABLATION_HEADER)?;
            Ok(AblationRow {
                discriminator: parse_field(f[0], "discriminator")?,
                psnr: parse_field(f[1], "psnr")?,
                ssim: parse_field(f[2], "ssim")?,
                asr: parse_field(f[3], "asr")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::make_dataset;
    use crate::metrics::asr;
    use crate::surrogate::train_surrogate;
    use std::sync::OnceLock;
    use tempfile::tempdir;

    type S = f32;

    fn tiny_splits() -> &'static DatasetSplits {
        static DATA: OnceLock<DatasetSplits> = OnceLock::new();
        DATA.get_or_init(|| make_dataset(50, 32, 71).unwrap())
    }

    fn untrained_surrogate() -> &'static SwapModel<S> {
        static MODEL: OnceLock<SwapModel<S>> = OnceLock::new();
        MODEL.get_or_init(|| SwapModel::new(5).unwrap())
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: 8,
            seed: 11,
            lr: 2e-4,
            ..TrainConfig::default()
        }
    }

    /// Trained pair shared by the tests that need real attack dynamics.
    fn trained_fixture() -> &'static (SwapModel<S>, ProtectorModel<S>, Vec<EpochLog>) {
        static FIX: OnceLock<(SwapModel<S>, ProtectorModel<S>, Vec<EpochLog>)> = OnceLock::new();
        FIX.get_or_init(|| {
            let splits = tiny_splits();
            let (surrogate, _) = train_surrogate::<S>(&splits.train, 30, 5).unwrap();
            let cfg = quick_cfg(8);
            let (model, log) = train_protector::<S>(&cfg, &surrogate, &splits.train).unwrap();
            (surrogate, model, log)
        })
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.epsilon, 0.05);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.batch, 8);
        assert!(cfg.discriminator);
        assert_eq!(cfg.weights.lambda_rec, 5.0);
        assert_eq!(cfg.weights.lambda_adv, 0.05);
        assert_eq!(cfg.weights.lambda_swap, 1.0);
        assert!(cfg.validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { epsilon: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn smoke_two_epochs_finite() {
        let splits = tiny_splits();
        let cfg = quick_cfg(2);
        let (_, log) = train_protector::<S>(&cfg, untrained_surrogate(), &splits.train).unwrap();
        assert_eq!(log.len(), 2);
        for e in &log {
            assert!(e.rec.is_finite() && e.adv.is_finite() && e.swap.is_finite() && e.total.is_finite());
        }
    }

    #[test]
    fn swap_loss_drops_over_training() {
        let (_, _, log) = trained_fixture();
        let first = log.first().unwrap().swap;
        let last = log.last().unwrap().swap;
        assert!(last < first, "swap loss {first} -> {last} did not drop");
    }

    #[test]
    fn training_is_deterministic() {
        let splits = tiny_splits();
        let cfg = quick_cfg(2);
        let (a, log_a) = train_protector::<S>(&cfg, untrained_surrogate(), &splits.train).unwrap();
        let (b, log_b) = train_protector::<S>(&cfg, untrained_surrogate(), &splits.train).unwrap();
        assert_eq!(protector_checksum(&a), protector_checksum(&b));
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn surrogate_frozen_through_training() {
        let splits = tiny_splits();
        let surrogate = untrained_surrogate();
        let before = surrogate_checksum(surrogate);
        let cfg = quick_cfg(1);
        train_protector::<S>(&cfg, surrogate, &splits.train).unwrap();
        assert_eq!(before, surrogate_checksum(surrogate));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let splits = tiny_splits();
        let surrogate = untrained_surrogate();
        let dir = tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");

        let cfg5 = TrainConfig { epochs: 5, batch: 4, seed: 3, ..TrainConfig::default() };
        let (full, full_log) = train_protector::<S>(&cfg5, surrogate, &splits.val).unwrap();

        let cfg3 = TrainConfig { epochs: 3, ..cfg5.clone() };
        let mut state = init_train_state::<S>(&cfg3).unwrap();
        let mut log = run_training(&mut state, surrogate, &splits.val).unwrap();
        save_checkpoint(&state, &path).unwrap();

        let mut resumed = load_checkpoint::<S>(&path).unwrap();
        assert_eq!(resumed.epoch, 3);
        resumed.cfg.epochs = 5;
        log.extend(run_training(&mut resumed, surrogate, &splits.val).unwrap());

        assert_eq!(protector_checksum(&full), protector_checksum(&resumed.model));
        assert_eq!(full_log, log);
    }

    #[test]
    fn checkpoint_bytes_are_stable_and_checked() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let state = init_train_state::<S>(&quick_cfg(1)).unwrap();
        save_checkpoint(&state, &a).unwrap();
        let loaded = load_checkpoint::<S>(&a).unwrap();
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        // flip one payload byte → checksum failure, nothing constructed
        let mut bytes = fs::read(&a).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&b, &bytes).unwrap();
        match load_checkpoint::<S>(&b) {
            Err(Error::ChecksumMismatch { .. }) => {}
            Err(e) => panic!("expected checksum mismatch, got {e:?}"),
            Ok(_) => panic!("corrupted checkpoint loaded"),
        }
    }

    #[test]
    fn checkpoint_rejects_wrong_scalar_and_kind() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let state = init_train_state::<S>(&quick_cfg(1)).unwrap();
        save_checkpoint(&state, &path).unwrap();
        match load_checkpoint::<f64>(&path) {
            Err(Error::CheckpointDtype { .. }) => {}
            Err(e) => panic!("expected dtype error, got {e:?}"),
            Ok(_) => panic!("f64 loader accepted an f32 checkpoint"),
        }
        match load_surrogate::<S>(&path) {
            Err(Error::CheckpointKind { .. }) => {}
            Err(e) => panic!("expected kind error, got {e:?}"),
            Ok(_) => panic!("surrogate loader accepted a training checkpoint"),
        }
    }

    #[test]
    fn surrogate_checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let model = untrained_surrogate();
        save_surrogate(model, 5, &path).unwrap();
        let loaded = load_surrogate::<S>(&path).unwrap();
        assert_eq!(surrogate_checksum(model), surrogate_checksum(&loaded));
    }

    #[test]
    fn evaluate_zero_perturbation_control() {
        let splits = tiny_splits();
        let mut state = init_train_state::<S>(&quick_cfg(1)).unwrap();
        state.model.disable_perturbation();
        state.model.set_epsilon(0.0).unwrap();
        let report = evaluate(&state.model, untrained_surrogate(), &splits.test).unwrap();
        for r in &report.records {
            assert_eq!(r.l1_dist, 0.0);
            assert!(!r.success);
            assert_eq!(r.psnr, 100.0);
            assert_eq!(r.ssim, 1.0);
        }
        assert_eq!(report.asr(), 0.0);
    }

    #[test]
    fn evaluate_report_is_self_consistent() {
        let (surrogate, model, _) = trained_fixture();
        let report = evaluate(model, surrogate, &tiny_splits().test).unwrap();
        let n = report.records.len() as f64;
        let mean_l1: f64 = report.records.iter().map(|r| r.l1_dist).sum::<f64>() / n;
        assert_eq!(report.mean_l1(), mean_l1);
        let dists: Vec<f64> = report.records.iter().map(|r| r.l1_dist).collect();
        assert_eq!(report.asr(), asr(&dists, report.threshold).unwrap());
        assert_eq!(report.dataset_id, content_id(&tiny_splits().test));
        assert!(!report.model_checksum.is_empty());
    }

    #[test]
    fn trained_protector_beats_random_noise() {
        let (surrogate, model, _) = trained_fixture();
        let test = &tiny_splits().test;
        let trained = evaluate(model, surrogate, test).unwrap();
        let noise = random_baseline(surrogate, test, model.epsilon(), 17).unwrap();
        assert!(
            trained.mean_l1() > noise.mean_l1(),
            "trained {} vs noise {}",
            trained.mean_l1(),
            noise.mean_l1()
        );
    }

    #[test]
    fn evaluate_rejects_empty_split() {
        let empty = Dataset { name: "empty".into(), resolution: 32, items: Vec::new() };
        let state = init_train_state::<S>(&quick_cfg(1)).unwrap();
        assert!(evaluate(&state.model, untrained_surrogate(), &empty).is_err());
    }

    #[test]
    fn ablation_without_discriminator_is_reproducible() {
        let splits = tiny_splits();
        let cfg = TrainConfig { discriminator: false, epochs: 1, batch: 8, seed: 23, ..TrainConfig::default() };
        let (a, log_a) = train_protector::<S>(&cfg, untrained_surrogate(), &splits.val).unwrap();
        let (b, log_b) = train_protector::<S>(&cfg, untrained_surrogate(), &splits.val).unwrap();
        assert_eq!(protector_checksum(&a), protector_checksum(&b));
        assert_eq!(log_a, log_b);
        // the adversarial term is logged as zero when the discriminator is off
        assert!(log_a.iter().all(|e| e.adv == 0.0));
    }

    #[test]
    fn csv_round_trips_exactly() {
        let log = vec![
            EpochLog { epoch: 0, rec: 0.5, adv: -0.125, swap: -0.03125, total: 2.40625 },
            EpochLog { epoch: 1, rec: 0.1234567890123, adv: 0.0, swap: -1e-12, total: f64::MIN_POSITIVE },
        ];
        let text = train_log_csv(&log);
        assert_eq!(parse_train_log_csv(&text).unwrap(), log);
        assert_eq!(train_log_csv(&parse_train_log_csv(&text).unwrap()), text);

        let rows = vec![
            SweepRow { epsilon: 0.01, psnr: 42.123456, ssim: 0.9987654321, asr: 0.0 },
            SweepRow { epsilon: 0.05, psnr: 33.3, ssim: 0.91, asr: 0.6666666666666666 },
        ];
        let text = sweep_csv(&rows);
        assert_eq!(parse_sweep_csv(&text).unwrap(), rows);

        let ab = [
            AblationRow { discriminator: true, psnr: 35.0, ssim: 0.95, asr: 0.7 },
            AblationRow { discriminator: false, psnr: 33.0, ssim: 0.9, asr: 0.75 },
        ];
        let text = ablation_csv(&ab);
        assert_eq!(parse_ablation_csv(&text).unwrap(), ab.to_vec());

        assert!(parse_sweep_csv("wrong,header\n1,2").is_err());
        assert!(parse_sweep_csv("epsilon,psnr,ssim,asr\n1,2,3").is_err());
        assert!(parse_sweep_csv("epsilon,psnr,ssim,asr\n1,2,3,x").is_err());
    }

    #[test]
    fn eval_csv_round_trip() {
        let (surrogate, model, _) = trained_fixture();
        let report = evaluate(model, surrogate, &tiny_splits().test).unwrap();
        let text = eval_csv(&report);
        let parsed = parse_eval_csv(&text).unwrap();
        assert_eq!(parsed, report.records);
    }
}
