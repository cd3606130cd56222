//! Training loop shared by all four architectures.
//!
//! Each step draws a batch with replacement from a per-step random stream,
//! decides the ATM mask (all ones for the baselines and during warmup),
//! computes the objective and gradients, folds the batch into the importance
//! tracker, projects the decoder gradient, applies Adam and renormalizes the
//! decoder. Every random draw is keyed by `(seed, step)`, so a run is a pure
//! function of its configuration and data and can be resumed exactly.

use std::fmt;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atm::{self, ImportanceTracker, MaskSchedule, Phase, StepMask};
use crate::error::{Error, Result};
use crate::optim::{lr_at, project_decoder_grads, renormalize_decoder, AdamState};
use crate::rng::{domain, stream};
use crate::sae::{self, file as params_file, ActivationKind, SaeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Atm,
    Vanilla,
    Topk,
    Jumprelu,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Atm, Arch::Vanilla, Arch::Topk, Arch::Jumprelu];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Atm => "atm",
            Arch::Vanilla => "vanilla",
            Arch::Topk => "topk",
            Arch::Jumprelu => "jumprelu",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture and width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n: usize,
    pub topk_k: usize,
    pub jumprelu_bandwidth: f64,
    pub jumprelu_init_theta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Atm,
            n: 256,
            topk_k: 8,
            jumprelu_bandwidth: 0.001,
            jumprelu_init_theta: 0.001,
        }
    }
}

/// Optimizer and objective settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub lambda_sparse: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            lr_warmup_steps: 1000,
            total_steps: 5000,
            batch_size: 256,
            lambda_sparse: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Everything the trainer needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub d: usize,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub mask: MaskSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let o = &self.optim;
        if self.d < 1 {
            return Err(Error::config("d", "must be at least 1"));
        }
        if m.n <= self.d {
            return Err(Error::config(
                "n",
                format!("latent size {} must exceed input size {}", m.n, self.d),
            ));
        }
        if o.total_steps <= o.lr_warmup_steps {
            return Err(Error::config(
                "total_steps",
                format!("must exceed lr_warmup_steps ({})", o.lr_warmup_steps),
            ));
        }
        if o.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if !(o.lambda_sparse >= 0.0 && o.lambda_sparse.is_finite()) {
            return Err(Error::config("lambda_sparse", "must be >= 0"));
        }
        self.activation_kind().validate(m.n)?;
        if m.arch == Arch::Atm {
            self.mask.validate(m.n)?;
        }
        AdamState::<f32>::new(&[], o.adam_beta1, o.adam_beta2, o.adam_eps)?;
        Ok(())
    }

    pub fn activation_kind(&self) -> ActivationKind<f32> {
        match self.model.arch {
            Arch::Atm | Arch::Vanilla => ActivationKind::Relu,
            Arch::Topk => ActivationKind::TopK { k: self.model.topk_k },
            Arch::Jumprelu => ActivationKind::JumpRelu {
                theta: Array1::from_elem(self.model.n, self.model.jumprelu_init_theta as f32),
                bandwidth: self.model.jumprelu_bandwidth as f32,
            },
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub phase: Phase,
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_l1: f64,
    pub theta: f64,
    pub masked_fraction: f64,
    pub lr: f64,
    /// Largest per-sample count of nonzero masked features in the batch.
    /// Kept in memory only; not part of the CSV.
    pub max_l0: usize,
    /// Decoder column-norm deviation after the update. In memory only.
    pub decoder_norm_error: f64,
}

pub const LOG_HEADER: &str = "step,phase,loss_total,loss_recon,loss_l1,theta,masked_fraction,lr";

pub fn write_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.phase, r.loss_total, r.loss_recon, r.loss_l1, r.theta, r.masked_fraction, r.lr
        ));
    }
    out
}

pub fn parse_log_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format(0, "training log header mismatch"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::format(i as u64 + 1, format!("malformed log line {}: {line}", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push(LogRow {
            step: f[0].parse().map_err(|_| bad())?,
            phase: f[1].parse().map_err(|_| bad())?,
            loss_total: num(f[2])?,
            loss_recon: num(f[3])?,
            loss_l1: num(f[4])?,
            theta: num(f[5])?,
            masked_fraction: num(f[6])?,
            lr: num(f[7])?,
            max_l0: 0,
            decoder_norm_error: 0.0,
        });
    }
    Ok(rows)
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    pub params: SaeParams<f32>,
    pub kind: ActivationKind<f32>,
    pub tracker: Option<ImportanceTracker>,
    pub adam: AdamState<f32>,
    pub log: Vec<LogRow>,
}

impl RunArtifacts {
    /// Inference mask: ATM keeps features whose drop probability is below
    /// 1/2; the baselines keep everything.
    pub fn eval_mask(&self) -> Array1<f32> {
        match (&self.tracker, self.config.model.arch) {
            (Some(tracker), Arch::Atm) => atm::eval_mask(tracker, &self.config.mask)
                .into_iter()
                .map(|k| if k { 1.0 } else { 0.0 })
                .collect(),
            _ => Array1::ones(self.params.n()),
        }
    }
}

/// Stateful trainer; [`train`] runs it to completion.
pub struct Trainer {
    config: TrainConfig,
    data: Array2<f32>,
    params: SaeParams<f32>,
    kind: ActivationKind<f32>,
    tracker: Option<ImportanceTracker>,
    adam: AdamState<f32>,
    log: Vec<LogRow>,
    step: u64,
}

fn tensor_shapes(params: &SaeParams<f32>, kind: &ActivationKind<f32>) -> Vec<Vec<usize>> {
    let mut shapes = vec![
        params.w_enc.shape().to_vec(),
        params.b_enc.shape().to_vec(),
        params.w_dec.shape().to_vec(),
        params.b_dec.shape().to_vec(),
    ];
    if let ActivationKind::JumpRelu { theta, .. } = kind {
        shapes.push(theta.shape().to_vec());
    }
    shapes
}

impl Trainer {
    pub fn new(config: TrainConfig, data: ArrayView2<f64>) -> Result<Self> {
        config.validate()?;
        let data = Self::prepare_data(&config, data)?;
        let params = sae::init_params::<f32>(config.d, config.model.n, config.seed)?;
        let kind = config.activation_kind();
        let tracker = match config.model.arch {
            Arch::Atm => Some(ImportanceTracker::new(config.model.n, config.mask.beta)?),
            _ => None,
        };
        let o = &config.optim;
        let adam = AdamState::new(&tensor_shapes(&params, &kind), o.adam_beta1, o.adam_beta2, o.adam_eps)?;
        Ok(Self {
            config,
            data,
            params,
            kind,
            tracker,
            adam,
            log: Vec::new(),
            step: 0,
        })
    }

    /// Continues a run from saved state.
    pub fn resume(checkpoint: RunArtifacts, data: ArrayView2<f64>) -> Result<Self> {
        checkpoint.config.validate()?;
        let data = Self::prepare_data(&checkpoint.config, data)?;
        let step = checkpoint.log.len() as u64;
        if checkpoint.adam.t != step {
            return Err(Error::Training(format!(
                "checkpoint inconsistent: {} log rows but optimizer at step {}",
                step, checkpoint.adam.t
            )));
        }
        Ok(Self {
            config: checkpoint.config,
            data,
            params: checkpoint.params,
            kind: checkpoint.kind,
            tracker: checkpoint.tracker,
            adam: checkpoint.adam,
            log: checkpoint.log,
            step,
        })
    }

    fn prepare_data(config: &TrainConfig, data: ArrayView2<f64>) -> Result<Array2<f32>> {
        if data.ncols() != config.d {
            return Err(Error::Shape(format!(
                "dataset has dim {}, config expects d = {}",
                data.ncols(),
                config.d
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::Shape("dataset is empty".into()));
        }
        Ok(data.mapv(|v| v as f32))
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.optim.total_steps
    }

    pub fn params(&self) -> &SaeParams<f32> {
        &self.params
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    fn batch(&self) -> Array2<f32> {
        let mut rng = stream(self.config.seed, domain::BATCH, self.step);
        let count = self.data.nrows();
        let idx: Vec<usize> = (0..self.config.optim.batch_size)
            .map(|_| rng.random_range(0..count))
            .collect();
        self.data.select(Axis(0), &idx)
    }

    fn plan_mask(&self) -> StepMask {
        match &self.tracker {
            Some(tracker) => {
                let mut rng = stream(self.config.seed, domain::MASK, self.step);
                atm::plan_step(tracker, &self.config.mask, self.step, &mut rng)
            }
            None => StepMask {
                phase: Phase::Normal,
                theta: 0.0,
                mask: vec![true; self.config.model.n],
            },
        }
    }

    /// Runs one step. On error nothing is modified, so the trainer still
    /// holds the last good state.
    pub fn step(&mut self) -> Result<&LogRow> {
        let step = self.step;
        let fail = |what: &str| Error::NonFinite {
            step,
            what: what.to_string(),
        };
        let x = self.batch();
        let plan = self.plan_mask();
        let mask: Array1<f32> = plan.mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();

        let lg = sae::loss_and_grads(
            &self.params,
            x.view(),
            &self.kind,
            mask.view(),
            self.config.optim.lambda_sparse,
        )
        .map_err(|e| match e {
            Error::Numeric { tensor } => fail(&format!("gradient `{tensor}`")),
            other => other,
        })?;
        if !(lg.loss_total.is_finite() && lg.loss_recon.is_finite() && lg.loss_l1.is_finite()) {
            return Err(fail("loss"));
        }

        let tracker = match &self.tracker {
            Some(t) => {
                let mut t = t.clone();
                t.update(lg.trace.features.view(), lg.trace.recon_grad_features.view())
                    .map_err(|_| fail("tracker input"))?;
                Some(t)
            }
            None => None,
        };

        let mut grads = lg.grads;
        project_decoder_grads(&self.params, &mut grads.w_dec).map_err(|_| fail("decoder column"))?;

        let lr = lr_at(step, self.config.optim.lr, self.config.optim.lr_warmup_steps);
        let mut params = self.params.clone();
        let mut kind = self.kind.clone();
        let mut adam = self.adam.clone();
        {
            let mut views = vec![
                params.w_enc.view_mut().into_dyn(),
                params.b_enc.view_mut().into_dyn(),
                params.w_dec.view_mut().into_dyn(),
                params.b_dec.view_mut().into_dyn(),
            ];
            let mut gviews = vec![
                grads.w_enc.view().into_dyn(),
                grads.b_enc.view().into_dyn(),
                grads.w_dec.view().into_dyn(),
                grads.b_dec.view().into_dyn(),
            ];
            if let (ActivationKind::JumpRelu { theta, .. }, Some(g)) = (&mut kind, &grads.theta) {
                views.push(theta.view_mut().into_dyn());
                gviews.push(g.view().into_dyn());
            }
            adam.step(views, gviews, lr).map_err(|e| match e {
                Error::Numeric { tensor } => fail(&tensor),
                other => other,
            })?;
        }
        renormalize_decoder(&mut params).map_err(|_| fail("decoder column"))?;
        if let ActivationKind::JumpRelu { theta, .. } = &mut kind {
            theta.mapv_inplace(|t| t.max(0.0));
        }
        if params.w_enc.iter().chain(params.b_enc.iter()).any(|v| !v.is_finite()) {
            return Err(fail("encoder parameters"));
        }

        let max_l0 = lg
            .trace
            .masked_features
            .axis_iter(Axis(0))
            .map(|row| row.iter().filter(|&&v| v > 0.0).count())
            .max()
            .unwrap_or(0);
        let row = LogRow {
            step,
            phase: plan.phase,
            loss_total: lg.loss_total,
            loss_recon: lg.loss_recon,
            loss_l1: lg.loss_l1,
            theta: plan.theta,
            masked_fraction: plan.masked_fraction(),
            lr,
            max_l0,
            decoder_norm_error: params.decoder_norm_error(),
        };

        self.params = params;
        self.kind = kind;
        self.adam = adam;
        self.tracker = tracker;
        self.log.push(row);
        self.step += 1;
        Ok(self.log.last().unwrap())
    }

    /// Snapshot of the current state.
    pub fn snapshot(&self) -> RunArtifacts {
        RunArtifacts {
            config: self.config.clone(),
            params: self.params.clone(),
            kind: self.kind.clone(),
            tracker: self.tracker.clone(),
            adam: self.adam.clone(),
            log: self.log.clone(),
        }
    }

    pub fn into_artifacts(self) -> RunArtifacts {
        RunArtifacts {
            config: self.config,
            params: self.params,
            kind: self.kind,
            tracker: self.tracker,
            adam: self.adam,
            log: self.log,
        }
    }
}

/// Trains to `total_steps`.
pub fn train(config: &TrainConfig, data: ArrayView2<f64>) -> Result<RunArtifacts> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    Ok(trainer.into_artifacts())
}

pub mod checkpoint {
    //! Run directory layout:
    //!
    //! - `params.atmp`: parameters (see [`crate::sae::file`])
    //! - `adam.bin`: optimizer state, magic `"ATMA"`
    //! - `tracker.bin`: importance tracker, magic `"ATMT"` (ATM runs only)
    //! - `train_config.json`: the trainer configuration
    //! - `train_log.csv`: one row per completed step
    //!
    //! Binary files are little-endian with a `u32` version after the magic.
    //! `adam.bin`: `u64` t, `f64` beta1, beta2, eps, `u32` tensor count,
    //! then per tensor `u32` rank, `u64` dims, and `f32` m then v values.
    //! `tracker.bin`: `u32` n, `f64` beta, `u64` step, then `f32` arrays
    //! `mag_ema`, `recon_ema`, `freq_ema`.

    use super::*;

    pub const PARAMS_FILE: &str = "params.atmp";
    pub const ADAM_FILE: &str = "adam.bin";
    pub const TRACKER_FILE: &str = "tracker.bin";
    pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
    pub const LOG_FILE: &str = "train_log.csv";

    const VERSION: u32 = 1;

    pub fn encode_adam(adam: &AdamState<f32>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"ATMA");
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u64::<LittleEndian>(adam.t).unwrap();
        for v in [adam.beta1, adam.beta2, adam.eps] {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        out.write_u32::<LittleEndian>(adam.m.len() as u32).unwrap();
        for (m, v) in adam.m.iter().zip(&adam.v) {
            out.write_u32::<LittleEndian>(m.ndim() as u32).unwrap();
            for &dim in m.shape() {
                out.write_u64::<LittleEndian>(dim as u64).unwrap();
            }
            for x in m.iter().chain(v.iter()) {
                out.write_f32::<LittleEndian>(*x).unwrap();
            }
        }
        out
    }

    fn truncated(cur: &Cursor<&[u8]>) -> Error {
        Error::format(cur.position(), "unexpected end of file")
    }

    fn header(cur: &mut Cursor<&[u8]>, magic: &[u8; 4]) -> Result<()> {
        let mut got = [0u8; 4];
        cur.read_exact(&mut got).map_err(|_| truncated(cur))?;
        if &got != magic {
            return Err(Error::format(0, format!("bad magic {got:?}")));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| truncated(cur))?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn f32s(cur: &mut Cursor<&[u8]>, count: usize) -> Result<Vec<f32>> {
        let left = cur.get_ref().len() as u64 - cur.position();
        if left < 4 * count as u64 {
            return Err(Error::format(
                cur.get_ref().len() as u64,
                format!("expected {} more bytes, found {left}", 4 * count),
            ));
        }
        let mut v = vec![0f32; count];
        cur.read_f32_into::<LittleEndian>(&mut v).map_err(|_| truncated(cur))?;
        Ok(v)
    }

    fn finish(cur: &Cursor<&[u8]>) -> Result<()> {
        if cur.position() != cur.get_ref().len() as u64 {
            return Err(Error::format(cur.position(), "trailing bytes"));
        }
        Ok(())
    }

    pub fn decode_adam(bytes: &[u8]) -> Result<AdamState<f32>> {
        let mut cur = Cursor::new(bytes);
        header(&mut cur, b"ATMA")?;
        let t = cur.read_u64::<LittleEndian>().map_err(|_| truncated(&cur))?;
        let mut hyper = [0f64; 3];
        for h in &mut hyper {
            *h = cur.read_f64::<LittleEndian>().map_err(|_| truncated(&cur))?;
        }
        let count = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))? as usize;
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let rank = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.read_u64::<LittleEndian>().map_err(|_| truncated(&cur))? as usize);
            }
            let len: usize = shape.iter().product();
            for dst in [&mut m, &mut v] {
                let at = cur.position();
                let vals = f32s(&mut cur, len)?;
                let arr = ArrayD::from_shape_vec(IxDyn(&shape), vals).map_err(|e| Error::format(at, e.to_string()))?;
                dst.push(arr);
            }
        }
        finish(&cur)?;
        Ok(AdamState {
            m,
            v,
            t,
            beta1: hyper[0],
            beta2: hyper[1],
            eps: hyper[2],
        })
    }

    pub fn encode_tracker(t: &ImportanceTracker) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"ATMT");
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(t.n() as u32).unwrap();
        out.write_f64::<LittleEndian>(t.beta).unwrap();
        out.write_u64::<LittleEndian>(t.step).unwrap();
        for x in t.mag_ema.iter().chain(t.recon_ema.iter()).chain(t.freq_ema.iter()) {
            out.write_f32::<LittleEndian>(*x).unwrap();
        }
        out
    }

    pub fn decode_tracker(bytes: &[u8]) -> Result<ImportanceTracker> {
        let mut cur = Cursor::new(bytes);
        header(&mut cur, b"ATMT")?;
        let n = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))? as usize;
        let beta = cur.read_f64::<LittleEndian>().map_err(|_| truncated(&cur))?;
        let step = cur.read_u64::<LittleEndian>().map_err(|_| truncated(&cur))?;
        let mag_ema = Array1::from(f32s(&mut cur, n)?);
        let recon_ema = Array1::from(f32s(&mut cur, n)?);
        let freq_ema = Array1::from(f32s(&mut cur, n)?);
        finish(&cur)?;
        Ok(ImportanceTracker {
            mag_ema,
            recon_ema,
            freq_ema,
            beta,
            step,
        })
    }

    fn write(path: &Path, bytes: &[u8]) -> Result<()> {
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    fn read(path: &Path) -> Result<Vec<u8>> {
        fs::read(path).map_err(|e| Error::io(path, e))
    }

    pub fn save(run: &RunArtifacts, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(PARAMS_FILE), &params_file::encode(&run.params, &run.kind))?;
        write(&dir.join(ADAM_FILE), &encode_adam(&run.adam))?;
        let tracker_path = dir.join(TRACKER_FILE);
        match &run.tracker {
            Some(t) => write(&tracker_path, &encode_tracker(t))?,
            None => {
                if tracker_path.exists() {
                    fs::remove_file(&tracker_path).map_err(|e| Error::io(&tracker_path, e))?;
                }
            }
        }
        let cfg = serde_json::to_string_pretty(&run.config).map_err(|e| Error::Training(e.to_string()))?;
        write(&dir.join(TRAIN_CONFIG_FILE), (cfg + "\n").as_bytes())?;
        write(&dir.join(LOG_FILE), write_log_csv(&run.log).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<RunArtifacts> {
        let cfg_path = dir.join(TRAIN_CONFIG_FILE);
        let cfg_text = String::from_utf8(read(&cfg_path)?)
            .map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "config is not UTF-8"))?;
        let config: TrainConfig =
            serde_json::from_str(&cfg_text).map_err(|e| Error::format(0, format!("{}: {e}", cfg_path.display())))?;
        let (params, kind) = params_file::decode(&read(&dir.join(PARAMS_FILE))?)?;
        let adam = decode_adam(&read(&dir.join(ADAM_FILE))?)?;
        let tracker = match config.model.arch {
            Arch::Atm => Some(decode_tracker(&read(&dir.join(TRACKER_FILE))?)?),
            _ => None,
        };
        let log_text = String::from_utf8(read(&dir.join(LOG_FILE))?)
            .map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "log is not UTF-8"))?;
        let log = parse_log_csv(&log_text)?;
        if params.d() != config.d || params.n() != config.model.n {
            return Err(Error::Shape(format!(
                "parameter file is {}x{}, config says d={} n={}",
                params.d(),
                params.n(),
                config.d,
                config.model.n
            )));
        }
        Ok(RunArtifacts {
            config,
            params,
            kind,
            tracker,
            adam,
            log,
        })
    }
}
