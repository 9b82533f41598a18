//! AdamW training loop and batch encoding.
//!
//! Each step forwards both views through their head(s), evaluates the
//! objective, backpropagates the per-view logit gradients and takes one
//! AdamW step. Only HashCoder parameters are trained; the gradient w.r.t.
//! the input embeddings is discarded. The loop is single-threaded and fully
//! determined by the seeds, config and inputs.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, shape_err, validation_err, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::hashcoder::{Encoder, Gradients, HashCoderModel, HeadId, Mode, ParamId, LARGE_WIDTH, SMALL_WIDTH};
use crate::numkit::{DenseMatrix, Rng};
use crate::objective::{crovca_loss, DiversityConfig, DEFAULT_LAMBDA};
use crate::pairing::{epoch_batches, PairSource, PairingConfig};
use crate::retrieval::PackedCodeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Small,
    Large,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Variant::Small),
            "large" => Ok(Variant::Large),
            other => Err(config_err!("unknown variant {other:?} (expected small or large)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub variant: Variant,
    pub code_bits: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub rate_scale_d: Option<usize>,
    pub pool_both_views: bool,
    pub allow_zero_lambda: bool,
}

impl TrainConfig {
    /// Small-dataset protocol: 2 hidden layers, lr 1e-3, weight decay 1e-2.
    pub fn small(code_bits: usize) -> Self {
        Self {
            epochs: 5,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 1e-2,
            lambda: DEFAULT_LAMBDA,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            variant: Variant::Small,
            code_bits,
            hidden_layers: 2,
            hidden_width: SMALL_WIDTH,
            rate_scale_d: None,
            pool_both_views: true,
            allow_zero_lambda: false,
        }
    }

    /// Large-dataset protocol: 3 hidden layers, lr 1e-4, weight decay 1e-4.
    pub fn large(code_bits: usize) -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            variant: Variant::Large,
            hidden_layers: 3,
            hidden_width: LARGE_WIDTH,
            ..Self::small(code_bits)
        }
    }

    pub fn for_variant(variant: Variant, code_bits: usize) -> Self {
        match variant {
            Variant::Small => Self::small(code_bits),
            Variant::Large => Self::large(code_bits),
        }
    }

    pub fn diversity(&self) -> DiversityConfig {
        DiversityConfig {
            lambda: self.lambda,
            rate_scale_d: self.rate_scale_d,
            pool_both_views: self.pool_both_views,
            allow_zero_lambda: self.allow_zero_lambda,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err!("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch size must be at least 2"));
        }
        if self.code_bits == 0 {
            return Err(config_err!("code length must be at least 1 bit"));
        }
        if !(2..=3).contains(&self.hidden_layers) {
            return Err(config_err!("hidden layers must be 2 or 3"));
        }
        if self.hidden_width == 0 {
            return Err(config_err!("hidden width must be positive"));
        }
        self.adamw().validate()?;
        self.diversity().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("weight decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(config_err!("adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn for_model(model: &HashCoderModel) -> Self {
        let sizes: Vec<usize> = model
            .layers()
            .iter()
            .flat_map(|l| {
                [
                    l.linear.weight.as_slice().len(),
                    l.linear.bias.len(),
                    l.norm.gamma.len(),
                    l.norm.beta.len(),
                ]
            })
            .collect();
        Self {
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update of a single tensor at (already incremented) step `t`.
/// Decay is applied to the pre-step weights, separately from the adaptive
/// step.
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    t: u64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        first[i] = cfg.beta1 * first[i] + (1.0 - cfg.beta1) * g;
        second[i] = cfg.beta2 * second[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = first[i] / bc1;
        let v_hat = second[i] / bc2;
        let w = params[i];
        let decayed = if decay { w - cfg.lr * cfg.weight_decay * w } else { w };
        params[i] = decayed - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// AdamW over every parameter of `model`. Linear weights are decayed;
/// biases and BatchNorm scale/shift are not. Rejects non-finite gradients
/// before touching any parameter.
pub fn adamw_step(
    model: &mut HashCoderModel,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<()> {
    let grad_slices = grads.param_slices();
    if grad_slices.len() != state.first.len() {
        return Err(shape_err!("gradients do not match the optimizer state"));
    }
    for (id, g) in &grad_slices {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalDomain(format!("non-finite gradient in {id}[{i}]")));
        }
    }
    state.step += 1;
    let t = state.step;
    for (k, ((id, params), (gid, g))) in model.param_slices_mut().into_iter().zip(grad_slices).enumerate() {
        if id != gid || params.len() != g.len() {
            return Err(shape_err!("gradient layout mismatch at {id}"));
        }
        adamw_update(
            params,
            g,
            &mut state.first[k],
            &mut state.second[k],
            t,
            cfg,
            ParamId::decays(&id),
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub align: f64,
    pub div: f64,
    pub total: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} align={} div={} total={}",
            self.epoch, self.step, self.align, self.div, self.total
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub align: f64,
    pub div: f64,
    pub total: f64,
    /// Fraction of view-1 train-mode codes with each bit set.
    pub bit_balance: Vec<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (lo, hi) = self
            .bit_balance
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(r), hi.max(r))
            });
        write!(
            f,
            "epoch={} steps={} mean_align={} mean_div={} mean_total={} bit_balance_min={lo:.4} bit_balance_max={hi:.4}",
            self.epoch, self.steps, self.align, self.div, self.total
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub lambda: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut steps = self.steps.iter().peekable();
        for e in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch == e.epoch) {
                out.push_str(&format!("step {s}\n"));
            }
            out.push_str(&format!("summary {e}\n"));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub log: TrainLog,
}

/// Trains with no per-step callback.
pub fn train(source: &PairSource<'_>, pairing: &PairingConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(source, pairing, cfg, |_| {})
}

/// Trains and reports every step to `on_step` as it completes.
pub fn train_with(
    source: &PairSource<'_>,
    pairing: &PairingConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut pairing = pairing.clone();
    pairing.batch_size = cfg.batch_size;
    source.validate(&pairing)?;
    if source.rows() == 0 {
        return Err(validation_err!("empty training set"));
    }
    let diversity = cfg.diversity();
    let adamw = cfg.adamw();
    let (d1, d2) = source.dims();
    let mut init_rng = Rng::stream(cfg.seed, 0);
    let mut data_rng = Rng::stream(pairing.seed, 1);
    let first = HashCoderModel::init(d1, cfg.code_bits, cfg.hidden_layers, cfg.hidden_width, &mut init_rng)?;
    let mut heads = vec![first];
    if source.is_dual() {
        heads.push(HashCoderModel::init(
            d2,
            cfg.code_bits,
            cfg.hidden_layers,
            cfg.hidden_width,
            &mut init_rng,
        )?);
    }
    let mut states: Vec<OptimizerState> = heads.iter().map(OptimizerState::for_model).collect();
    let mut log = TrainLog {
        lambda: cfg.lambda,
        ..Default::default()
    };
    let mut global_step = 0;
    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(source.rows(), cfg.batch_size, &mut data_rng);
        if batches.is_empty() {
            return Err(validation_err!("no batch of at least 2 rows could be formed"));
        }
        let mut sums = (0.0, 0.0, 0.0);
        let mut ones = vec![0usize; cfg.code_bits];
        let mut seen = 0usize;
        for indices in &batches {
            let batch = source.batch(indices, &pairing, heads.len() == 2, &mut data_rng)?;
            let (z1, c1) = heads[0].forward_train(&batch.view1)?;
            let head2 = if heads.len() == 2 { 1 } else { 0 };
            let (z2, c2) = heads[head2].forward_train(&batch.view2)?;
            let loss = crovca_loss(&z1, &z2, &diversity)?;
            let g1 = heads[0].backward(&c1, &loss.grad_z1)?;
            let g2 = heads[head2].backward(&c2, &loss.grad_z2)?;
            if head2 == 0 {
                let mut g = g1;
                g.accumulate(&g2)?;
                adamw_step(&mut heads[0], &g, &mut states[0], &adamw)?;
            } else {
                adamw_step(&mut heads[0], &g1, &mut states[0], &adamw)?;
                adamw_step(&mut heads[1], &g2, &mut states[1], &adamw)?;
            }
            for (h, head) in heads.iter().enumerate() {
                if !head.params_finite() {
                    return Err(Error::NumericalDomain(format!(
                        "head {} has non-finite parameters after step {global_step}",
                        h + 1
                    )));
                }
            }
            for r in 0..z1.rows() {
                for (j, c) in ones.iter_mut().enumerate() {
                    if z1.get(r, j) >= 0.0 {
                        *c += 1;
                    }
                }
            }
            seen += z1.rows();
            let record = StepRecord {
                epoch,
                step: global_step,
                align: loss.align,
                div: loss.div,
                total: loss.total,
            };
            on_step(&record);
            log.steps.push(record);
            sums.0 += loss.align;
            sums.1 += loss.div;
            sums.2 += loss.total;
            global_step += 1;
        }
        let n = batches.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            steps: batches.len(),
            align: sums.0 / n,
            div: sums.1 / n,
            total: sums.2 / n,
            bit_balance: ones.iter().map(|&c| c as f64 / seen as f64).collect(),
        });
    }
    let mut encoder = match heads.len() {
        1 => Encoder::Single(heads.pop().unwrap()),
        _ => {
            let second = heads.pop().unwrap();
            let first = heads.pop().unwrap();
            Encoder::dual(first, second)?
        }
    };
    encoder.set_mode(Mode::Eval);
    Ok(TrainOutcome { encoder, log })
}

/// Default rows per eval-mode chunk when encoding.
pub const ENCODE_CHUNK: usize = 1024;

/// Eval-mode logits for every row, computed in independent chunks.
pub fn eval_logits(model: &HashCoderModel, x: &DenseMatrix, chunk_rows: usize, exec: Execution) -> Result<DenseMatrix> {
    if model.mode() != Mode::Eval {
        return Err(Error::State("encoding needs an eval-mode model".into()));
    }
    if x.cols() != model.input_dim() {
        return Err(shape_err!(
            "model expects {}-dimensional input, got {}",
            model.input_dim(),
            x.cols()
        ));
    }
    let chunk = chunk_rows.max(1);
    let starts: Vec<usize> = (0..x.rows()).step_by(chunk).collect();
    let parts = map_indexed(starts.len(), exec, |c| {
        let lo = starts[c];
        let hi = (lo + chunk).min(x.rows());
        let idx: Vec<usize> = (lo..hi).collect();
        model.forward_eval(&x.select_rows(&idx))
    });
    let mut data = Vec::with_capacity(x.rows() * model.code_bits());
    for p in parts {
        data.extend_from_slice(p?.as_slice());
    }
    DenseMatrix::from_vec(x.rows(), model.code_bits(), data)
}

/// Binary codes (and optionally the logits) of every row of `x`.
pub fn encode(
    model: &HashCoderModel,
    x: &DenseMatrix,
    emit_logits: bool,
    chunk_rows: usize,
    exec: Execution,
) -> Result<PackedCodeSet> {
    let z = eval_logits(model, x, chunk_rows, exec)?;
    PackedCodeSet::from_logits(&z, emit_logits)
}

/// [`encode`] through one head of an encoder.
pub fn encode_with(
    encoder: &Encoder,
    head: HeadId,
    x: &DenseMatrix,
    emit_logits: bool,
    exec: Execution,
) -> Result<PackedCodeSet> {
    encode(encoder.head(head)?, x, emit_logits, ENCODE_CHUNK, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairing::PairingMode;

    #[test]
    fn adamw_first_step_by_hand() {
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut w = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut w, &[0.1], &mut m, &mut v, 1, &cfg, true);
        let expect = 1.0 - 1e-3 * (0.1 / (0.01f64.sqrt() + 1e-8)) - 1e-5;
        assert!((w[0] - expect).abs() < 1e-15);
        assert!((w[0] - 0.998990).abs() < 1e-6);

        let cfg0 = AdamWConfig {
            weight_decay: 0.0,
            ..cfg
        };
        let mut w = [0.7];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut w, &[0.0], &mut m, &mut v, 1, &cfg0, true);
        assert_eq!(w[0], 0.7);
    }

    #[test]
    fn bias_and_norm_params_are_not_decayed() {
        let mut rng = Rng::new(0);
        let mut model = HashCoderModel::init(3, 2, 2, 4, &mut rng).unwrap();
        let before = model.clone();
        let x = DenseMatrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let (_, cache) = model.forward_train(&x).unwrap();
        let zero = model.backward(&cache, &DenseMatrix::zeros(4, 2)).unwrap();
        let mut state = OptimizerState::for_model(&model);
        let cfg = TrainConfig::small(2).adamw();
        adamw_step(&mut model, &zero, &mut state, &cfg).unwrap();
        for (a, b) in model.layers().iter().zip(before.layers()) {
            assert_eq!(a.norm.gamma, b.norm.gamma);
            assert_eq!(a.linear.bias, b.linear.bias);
            for (wa, wb) in a.linear.weight.as_slice().iter().zip(b.linear.weight.as_slice()) {
                assert!((wa - wb * (1.0 - 1e-5)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut rng = Rng::new(0);
        let mut model = HashCoderModel::init(3, 2, 2, 4, &mut rng).unwrap();
        let x = DenseMatrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let (_, cache) = model.forward_train(&x).unwrap();
        let mut g = model.backward(&cache, &DenseMatrix::zeros(4, 2)).unwrap();
        g.layers[1].bias[2] = f64::NAN;
        let mut state = OptimizerState::for_model(&model);
        let err = adamw_step(&mut model, &g, &mut state, &TrainConfig::small(2).adamw()).unwrap_err();
        assert!(err.to_string().contains("layers.1.linear.bias[2]"), "{err}");
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn config_guards() {
        let mut c = TrainConfig::small(16);
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::small(16);
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::small(16);
        c.lambda = 0.0;
        assert!(c.validate().is_err());
        c.allow_zero_lambda = true;
        assert!(c.validate().is_ok());
        let l = TrainConfig::large(16);
        assert_eq!((l.lr, l.weight_decay, l.hidden_layers), (1e-4, 1e-4, 3));
    }

    fn blobs(rows: usize, dim: usize, seed: u64) -> DenseMatrix {
        let mut rng = Rng::new(seed);
        let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..dim).map(|_| 3.0 * rng.normal()).collect()).collect();
        let mut data = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            for j in 0..dim {
                data.push(centers[r % 4][j] + rng.normal());
            }
        }
        DenseMatrix::from_vec(rows, dim, data).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            hidden_width: 32,
            ..TrainConfig::small(8)
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_decompose() {
        let x = blobs(100, 10, 1);
        let source = PairSource::Augmented { embeddings: &x };
        let pairing = PairingConfig::augmentation_for(&x);
        let cfg = tiny_config();
        let a = train(&source, &pairing, &cfg).unwrap();
        let b = train(&source, &pairing, &cfg).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.steps.len(), 2 * 4);
        for s in &a.log.steps {
            assert!((s.total - (s.align + cfg.lambda * s.div)).abs() <= 1e-12);
        }
        assert!(a.encoder.first().mode() == Mode::Eval);
        assert!(a.log.to_text().lines().count() >= 10);
    }

    #[test]
    fn dual_stream_training_builds_two_heads() {
        let a = blobs(64, 10, 1);
        let b = blobs(64, 6, 1);
        let source = PairSource::DualStream { first: &a, second: &b };
        let pairing = PairingConfig::new(PairingMode::DualStream);
        let out = train(&source, &pairing, &tiny_config()).unwrap();
        assert!(out.encoder.is_dual());
        assert_eq!(out.encoder.head(HeadId::Second).unwrap().input_dim(), 6);
        let codes = encode_with(&out.encoder, HeadId::Second, &b, false, Execution::Sequential).unwrap();
        assert_eq!(codes.rows(), 64);
    }

    #[test]
    fn supervised_training_runs() {
        let x = blobs(80, 10, 2);
        let labels: Vec<u32> = (0..80).map(|r| (r % 4) as u32).collect();
        let labels = crate::evalkit::LabelSet::single(4, &labels).unwrap();
        let source = PairSource::ClassMean {
            embeddings: &x,
            labels: &labels,
        };
        let pairing = PairingConfig::new(PairingMode::ClassBatchMean);
        let out = train(&source, &pairing, &tiny_config()).unwrap();
        assert_eq!(out.log.epochs.len(), 2);
    }

    #[test]
    fn encode_is_chunk_independent() {
        let x = blobs(50, 10, 3);
        let source = PairSource::Augmented { embeddings: &x };
        let out = train(&source, &PairingConfig::augmentation_for(&x), &tiny_config()).unwrap();
        let model = out.encoder.first();
        let base = encode(model, &x, true, 50, Execution::Sequential).unwrap();
        for chunk in [1, 3, 17] {
            assert_eq!(encode(model, &x, true, chunk, Execution::Parallel).unwrap(), base);
        }
        let mut train_mode = model.clone();
        train_mode.set_mode(Mode::Train);
        assert!(matches!(
            encode(&train_mode, &x, false, 8, Execution::Sequential),
            Err(Error::State(_))
        ));
    }
}
