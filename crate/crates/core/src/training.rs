//! Encoder pretraining and frozen-encoder decoder training.
//!
//! Within a batch every item builds its own graph and runs in parallel; the
//! per-item gradients are then summed in item order, so results do not
//! depend on the thread count.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data_io::write_atomic;
use crate::diffusion::{gaussian_points, q_sample, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::geometry::{add, apply_mask, knn_group, segment, sub, MaskSpec, PatchSet, Point, PointCloud};
use crate::graph::{Graph, Var};
use crate::model::{anchor, prediction_order, Decoder, Encoder, LatentSet, ModelConfig, VisibleEncoder};
use crate::optim::{adam_step, AdamConfig, AdamState, Bound, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossSetting {
    /// Visible ground truth plus predicted masked patches against the full cloud.
    #[default]
    EntireObject,
    /// Predicted masked patches against the ground-truth masked patches.
    MaskedOnly,
}

impl std::str::FromStr for LossSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "entire" | "entire_object" => Ok(Self::EntireObject),
            "b" | "masked" | "masked_only" => Ok(Self::MaskedOnly),
            other => invalid(format!("unknown loss setting '{other}' (use a or b)")),
        }
    }
}

impl LossSetting {
    pub fn name(self) -> &'static str {
        match self {
            Self::EntireObject => "a",
            Self::MaskedOnly => "b",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss_setting: LossSetting,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Draw a new mask for every item every epoch; when off, each item keeps
    /// the mask drawn in the first epoch.
    pub fresh_masks: bool,
}

impl TrainConfig {
    pub fn encoder_default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            loss_setting: LossSetting::EntireObject,
            seed: 0,
            log_every: 10,
            checkpoint_every: 100,
            fresh_masks: true,
        }
    }

    pub fn decoder_default() -> Self {
        Self {
            epochs: 300,
            lr: 5e-4,
            ..Self::encoder_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return invalid("epochs, batch_size, log_every and checkpoint_every must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value '{v}' for '{key}'")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "loss_setting" => self.loss_setting = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "fresh_masks" => self.fresh_masks = num(key, value)?,
            other => return invalid(format!("unknown train key '{other}'")),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "loss_setting = {}", self.loss_setting.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "fresh_masks = {}", self.fresh_masks);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Mean step loss over the window ending at `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epoch_losses: Vec<f64>,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// CSV with header `step,epoch,loss`, losses in full-precision scientific notation.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{:.17e}", r.step, r.epoch, r.loss);
        }
        s
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.loss_csv().as_bytes())
    }
}

/// Called at every checkpoint with the current parameters.
pub type CheckpointHook<'a, S> = &'a mut dyn FnMut(&ParamStore<S>, &CheckpointRecord) -> Result<()>;

fn points_tensor<S: Real>(pts: &[Point]) -> Result<Tensor<S>> {
    Tensor::new(vec![pts.len(), 3], pts.iter().flat_map(|p| p.map(S::of)).collect())
}

fn check_dataset(data: &[PointCloud], cfg: &ModelConfig) -> Result<()> {
    if data.is_empty() {
        return invalid("training set is empty");
    }
    let unit = cfg.num_groups * cfg.group_size;
    for (i, c) in data.iter().enumerate() {
        if c.len() % unit != 0 {
            return invalid(format!(
                "cloud {i} has {} points, not a multiple of G·group_size = {unit}",
                c.len()
            ));
        }
    }
    Ok(())
}

/// Generic minibatch loop shared by both phases.
///
/// `draw` runs sequentially and produces each item's random inputs;
/// `item_loss` builds the loss graph for one item.
fn run_training<S, D, F, G>(
    params: &mut ParamStore<S>,
    n_items: usize,
    tc: &TrainConfig,
    mut draw: D,
    item_loss: F,
    mut hook: Option<CheckpointHook<'_, S>>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport>
where
    S: Real,
    D: FnMut(usize, usize, &mut ChaCha8Rng) -> Result<G>,
    G: Send + Sync,
    F: Fn(&Graph<S>, &Bound, &ParamStore<S>, usize, &G) -> Result<Var> + Sync,
{
    tc.validate()?;
    let adam = AdamConfig::with_lr(tc.lr);
    let mut state = AdamState::new(params);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut window = (0.0, 0usize);
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        order.shuffle(rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let draws: Vec<(usize, G)> = batch
                .iter()
                .map(|&i| Ok((i, draw(epoch, i, rng)?)))
                .collect::<Result<_>>()?;
            let frozen = &*params;
            let results: Vec<(f64, Vec<Tensor<S>>)> = draws
                .par_iter()
                .map(|(i, d)| {
                    let g = Graph::new();
                    let bound = frozen.bind(&g, true);
                    let loss = item_loss(&g, &bound, frozen, *i, d)?;
                    let value = g.value(loss).item().f64();
                    let grads = g.backward(loss)?;
                    Ok((value, frozen.collect_grads(&bound, &grads)))
                })
                .collect::<Result<_>>()?;
            let inv = S::of(1.0 / results.len() as f64);
            let mut total: Vec<Tensor<S>> = results[0].1.iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut loss = 0.0;
            for (l, grads) in &results {
                loss += l;
                for (acc, gr) in total.iter_mut().zip(grads) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(gr.data()) {
                        *a += v;
                    }
                }
            }
            for t in &mut total {
                for v in t.data_mut() {
                    *v = *v * inv;
                }
            }
            let loss = loss / results.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            adam_step(params, &total, &mut state, &adam)?;
            step += 1;
            report.steps.push(StepRecord { step, epoch, loss });
            epoch_sum += loss;
            batches += 1;
            window.0 += loss;
            window.1 += 1;
            if step % tc.checkpoint_every == 0 {
                let rec = CheckpointRecord {
                    step,
                    epoch,
                    mean_loss: window.0 / window.1 as f64,
                };
                window = (0.0, 0);
                report.checkpoints.push(rec);
                if let Some(h) = hook.as_mut() {
                    h(params, &rec)?;
                }
            }
        }
        report.epoch_losses.push(epoch_sum / batches as f64);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Encoder pretraining

/// Visible-reconstruction loss: the pretraining head's predictions, placed at
/// their centers, against the ground-truth visible points.
pub fn encoder_loss<S: Real>(enc: &Encoder<S>, g: &Graph<S>, p: &Bound, ps: &PatchSet, mask: &MaskSpec) -> Result<Var> {
    let vis = mask.visible_indices();
    let patches: Vec<Vec<Point>> = vis.iter().map(|&i| ps.patches[i].clone()).collect();
    let centers: Vec<Point> = vis.iter().map(|&i| ps.centers[i]).collect();
    let latent = enc.encode_graph(g, p, &patches, &centers)?;
    let pred = enc.head_graph(g, p, latent)?;
    let gs = enc.cfg.group_size;
    let pred = g.reshape(pred, &[vis.len() * gs, 3])?;
    let anchors: Vec<Point> = centers.iter().flat_map(|c| std::iter::repeat_n(*c, gs)).collect();
    let abs = g.add(pred, g.constant(points_tensor(&anchors)?))?;
    let gt: Vec<Point> = vis
        .iter()
        .flat_map(|&i| ps.patches[i].iter().map(move |q| add(q, &ps.centers[i])))
        .collect();
    g.chamfer(abs, g.constant(points_tensor(&gt)?))
}

pub fn pretrain_encoder<S: Real>(data: &[PointCloud], cfg: &ModelConfig, tc: &TrainConfig) -> Result<(Encoder<S>, TrainReport)> {
    pretrain_encoder_with(data, cfg, tc, None)
}

pub fn pretrain_encoder_with<S: Real>(
    data: &[PointCloud],
    cfg: &ModelConfig,
    tc: &TrainConfig,
    hook: Option<CheckpointHook<'_, S>>,
) -> Result<(Encoder<S>, TrainReport)> {
    cfg.validate()?;
    check_dataset(data, cfg)?;
    let patchsets: Vec<PatchSet> = data
        .par_iter()
        .map(|c| segment(c, cfg.num_groups, cfg.group_size))
        .collect::<Result<_>>()?;
    let mut enc = Encoder::<S>::new(cfg, tc.seed)?;
    let mut rng = train_rng(tc.seed);
    let mut fixed: Vec<Option<MaskSpec>> = vec![None; data.len()];
    let shell = enc.clone();
    let report = run_training(
        &mut enc.params,
        data.len(),
        tc,
        |_, i, rng| {
            if let (false, Some(m)) = (tc.fresh_masks, &fixed[i]) {
                return Ok(m.clone());
            }
            let m = apply_mask(&patchsets[i].centers, cfg.mask_ratio, cfg.mask_strategy, rng.random())?;
            fixed[i] = Some(m.clone());
            Ok(m)
        },
        |g, p, _, i, mask| encoder_loss(&shell, g, p, &patchsets[i], mask),
        hook,
        &mut rng,
    )?;
    Ok((enc, report))
}

fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

// ---------------------------------------------------------------------------
// Decoder training

/// Ground truth for one training cloud.
#[derive(Debug, Clone)]
pub struct DecoderItem {
    pub patchset: PatchSet,
    /// Absolute target patches at `points_per_prediction` density, one per center.
    pub targets: Vec<Vec<Point>>,
}

impl DecoderItem {
    pub fn new(cloud: &PointCloud, cfg: &ModelConfig) -> Result<Self> {
        let patchset = segment(cloud, cfg.num_groups, cfg.group_size)?;
        let targets = if cfg.upsample_factor == 1 {
            patchset
                .patches
                .iter()
                .zip(&patchset.centers)
                .map(|(p, c)| p.iter().map(|q| add(q, c)).collect())
                .collect()
        } else {
            let groups = knn_group(cloud, &patchset.centers, cfg.points_per_prediction())?;
            groups
                .iter()
                .map(|idx| idx.iter().map(|&j| cloud.points()[j]).collect())
                .collect()
        };
        Ok(Self { patchset, targets })
    }

    /// Clean decoder input `x_0` in prediction order, relative to each anchor.
    pub fn x0(&self, cfg: &ModelConfig, mask: &MaskSpec) -> Vec<Point> {
        prediction_order(cfg, mask)
            .into_iter()
            .flat_map(|i| {
                let a = anchor(cfg, mask, &self.patchset.centers, i);
                self.targets[i].iter().map(move |q| sub(q, &a))
            })
            .collect()
    }
}

/// Random inputs for one decoder training item.
#[derive(Debug, Clone)]
pub struct DecoderDraw {
    pub mask: MaskSpec,
    pub t: usize,
    pub eps: Vec<Point>,
}

pub fn draw_decoder_inputs(cfg: &ModelConfig, centers: &[Point], rng: &mut ChaCha8Rng) -> Result<DecoderDraw> {
    let mask = apply_mask(centers, cfg.mask_ratio, cfg.mask_strategy, rng.random())?;
    let t = rng.random_range(0..cfg.timesteps);
    let n = cfg.predicted_patches(&mask) * cfg.points_per_prediction();
    let eps = gaussian_points(n, rng);
    Ok(DecoderDraw { mask, t, eps })
}

/// Frozen-encoder latent for the visible patches of `item` under `mask`.
pub fn latent_for<S: Real>(enc: &Encoder<S>, item: &DecoderItem, mask: &MaskSpec) -> Result<LatentSet> {
    let vis: Vec<Vec<Point>> = mask.visible_indices().iter().map(|&i| item.patchset.patches[i].clone()).collect();
    enc.encode_patches(&vis, &item.patchset.centers, mask)
}

/// Diffusion training loss for one item given its latent and random draw.
pub fn decoder_loss<S: Real>(
    dec: &Decoder<S>,
    g: &Graph<S>,
    p: &Bound,
    item: &DecoderItem,
    latent: &LatentSet,
    draw: &DecoderDraw,
    schedule: &NoiseSchedule,
    setting: LossSetting,
) -> Result<Var> {
    let cfg = &dec.cfg;
    let mask = &draw.mask;
    let order = prediction_order(cfg, mask);
    let per = cfg.points_per_prediction();
    let x_t = q_sample(&item.x0(cfg, mask), draw.t, &draw.eps, schedule)?;
    let lat = g.constant(Tensor::from_f64(&[latent.num_tokens(), latent.width], &latent.tokens)?);
    let x = g.constant(Tensor::new(
        vec![order.len(), 3 * per],
        x_t.iter().flat_map(|q| q.map(S::of)).collect(),
    )?);
    let out = dec.decode_graph(g, p, lat, x, draw.t, &item.patchset.centers, mask)?;
    let out = g.reshape(out, &[order.len() * per, 3])?;
    let anchors: Vec<Point> = order
        .iter()
        .flat_map(|&i| std::iter::repeat_n(anchor(cfg, mask, &item.patchset.centers, i), per))
        .collect();
    let abs = g.add(out, g.constant(points_tensor(&anchors)?))?;
    let gather = |subset: &[usize]| -> Vec<Point> { subset.iter().flat_map(|&i| item.targets[i].iter().copied()).collect() };
    let masked = mask.masked_indices();
    let (pred, target) = match setting {
        LossSetting::EntireObject => {
            let pred = if cfg.predict_visible {
                abs
            } else {
                let vis = g.constant(points_tensor(&gather(&mask.visible_indices()))?);
                g.concat(&[vis, abs], 0)?
            };
            let all: Vec<usize> = (0..mask.num_groups()).collect();
            (pred, gather(&all))
        }
        LossSetting::MaskedOnly => {
            let pred = if cfg.predict_visible {
                g.slice(abs, 0, mask.num_visible() * per, masked.len() * per)?
            } else {
                abs
            };
            (pred, gather(&masked))
        }
    };
    g.chamfer(pred, g.constant(points_tensor(&target)?))
}

fn check_compatible(enc: &ModelConfig, dec: &ModelConfig) -> Result<()> {
    let pairs = [
        ("latent_width", enc.latent_width, dec.latent_width),
        ("num_groups", enc.num_groups, dec.num_groups),
        ("group_size", enc.group_size, dec.group_size),
    ];
    for (name, a, b) in pairs {
        if a != b {
            return invalid(format!("encoder {name} = {a} but decoder {name} = {b}"));
        }
    }
    if enc.use_position_embedding != dec.use_position_embedding {
        return invalid("encoder and decoder disagree on use_position_embedding");
    }
    Ok(())
}

pub fn train_decoder<S: Real>(
    data: &[PointCloud],
    encoder: &Encoder<S>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(Decoder<S>, TrainReport)> {
    train_decoder_with(data, encoder, cfg, tc, schedule, None)
}

pub fn train_decoder_with<S: Real>(
    data: &[PointCloud],
    encoder: &Encoder<S>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    schedule: &NoiseSchedule,
    hook: Option<CheckpointHook<'_, S>>,
) -> Result<(Decoder<S>, TrainReport)> {
    cfg.validate()?;
    check_compatible(&encoder.cfg, cfg)?;
    check_dataset(data, cfg)?;
    if schedule.steps() != cfg.timesteps {
        return invalid(format!(
            "schedule has {} steps but the model expects {}",
            schedule.steps(),
            cfg.timesteps
        ));
    }
    let items: Vec<DecoderItem> = data
        .par_iter()
        .map(|c| DecoderItem::new(c, cfg))
        .collect::<Result<_>>()?;
    let mut dec = Decoder::<S>::new(cfg, tc.seed)?;
    let shell = dec.clone();
    let mut rng = train_rng(tc.seed);
    let mut fixed: Vec<Option<MaskSpec>> = vec![None; data.len()];
    let report = run_training(
        &mut dec.params,
        items.len(),
        tc,
        |_, i, rng| {
            let mut d = draw_decoder_inputs(cfg, &items[i].patchset.centers, rng)?;
            match (&fixed[i], tc.fresh_masks) {
                (Some(m), false) => d.mask = m.clone(),
                _ => fixed[i] = Some(d.mask.clone()),
            }
            let latent = latent_for(encoder, &items[i], &d.mask)?;
            Ok((d, latent))
        },
        |g, p, _, i, (d, latent)| decoder_loss(&shell, g, p, &items[i], latent, d, schedule, tc.loss_setting),
        hook,
        &mut rng,
    )?;
    Ok((dec, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{synth_shape, ShapeKind};
    use crate::diffusion::build_schedule;

    fn toy() -> ModelConfig {
        ModelConfig {
            latent_width: 8,
            enc_blocks: 1,
            enc_heads: 2,
            dec_blocks: 1,
            dec_heads: 2,
            num_groups: 4,
            group_size: 4,
            mask_ratio: 0.5,
            timesteps: 10,
            ..ModelConfig::default()
        }
    }

    fn small_tc(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            checkpoint_every: 2,
            ..TrainConfig::encoder_default()
        }
    }

    #[test]
    fn train_config_round_trip() {
        let mut tc = TrainConfig::decoder_default();
        tc.loss_setting = LossSetting::MaskedOnly;
        let mut back = TrainConfig::encoder_default();
        for line in tc.to_kv().lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            back.set(k, v).unwrap();
        }
        assert_eq!(back, tc);
        assert!(back.set("nope", "1").is_err());
    }

    #[test]
    fn zero_lr_gives_constant_curve_with_fixed_masks() {
        let data = vec![synth_shape(ShapeKind::Sphere, 16, 0.0, 1).unwrap()];
        let tc = TrainConfig {
            lr: 0.0,
            fresh_masks: false,
            ..small_tc(4)
        };
        let (enc, rep) = pretrain_encoder::<f64>(&data, &toy(), &tc).unwrap();
        assert_eq!(enc.params, Encoder::<f64>::new(&toy(), tc.seed).unwrap().params);
        assert!(rep.epoch_losses.windows(2).all(|w| w[0] == w[1]), "{:?}", rep.epoch_losses);
    }

    #[test]
    fn dataset_divisibility_enforced() {
        let data = vec![synth_shape(ShapeKind::Cube, 18, 0.0, 1).unwrap()];
        assert!(matches!(pretrain_encoder::<f64>(&data, &toy(), &small_tc(1)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn decoder_training_freezes_encoder_and_is_deterministic() {
        let cfg = toy();
        let data: Vec<PointCloud> = (0..3).map(|s| synth_shape(ShapeKind::Torus, 16, 0.0, s).unwrap()).collect();
        let enc = Encoder::<f64>::new(&cfg, 9).unwrap();
        let before = enc.params.clone();
        let sched = build_schedule(10, 1e-4, 0.05).unwrap();
        let mut seen = Vec::new();
        let mut hook = |_: &ParamStore<f64>, r: &CheckpointRecord| {
            seen.push(r.step);
            Ok(())
        };
        let (d1, r1) = train_decoder_with(&data, &enc, &cfg, &small_tc(3), &sched, Some(&mut hook)).unwrap();
        let (d2, r2) = train_decoder(&data, &enc, &cfg, &small_tc(3), &sched).unwrap();
        assert_eq!(enc.params, before);
        assert_eq!(r1, r2);
        assert_eq!(d1.params, d2.params);
        assert_eq!(r1.steps.len(), 6);
        assert_eq!(seen, vec![2, 4, 6]);
        assert!(r1.loss_csv().starts_with("step,epoch,loss\n1,0,"));
    }

    #[test]
    fn incompatible_encoder_rejected() {
        let cfg = toy();
        let enc = Encoder::<f64>::new(&ModelConfig { latent_width: 16, ..cfg.clone() }, 1).unwrap();
        let data = vec![synth_shape(ShapeKind::Sphere, 16, 0.0, 1).unwrap()];
        let sched = build_schedule(10, 1e-4, 0.05).unwrap();
        let err = train_decoder(&data, &enc, &cfg, &small_tc(1), &sched).unwrap_err();
        assert!(err.to_string().contains("latent_width"), "{err}");
    }

    #[test]
    fn x0_reanchors_to_masked_targets() {
        let cfg = toy();
        let cloud = synth_shape(ShapeKind::Cube, 16, 0.0, 4).unwrap();
        let item = DecoderItem::new(&cloud, &cfg).unwrap();
        let mask = apply_mask(&item.patchset.centers, 0.5, cfg.mask_strategy, 3).unwrap();
        let x0 = item.x0(&cfg, &mask);
        let order = prediction_order(&cfg, &mask);
        let rebuilt: Vec<Point> = order
            .iter()
            .enumerate()
            .flat_map(|(k, &i)| {
                let a = anchor(&cfg, &mask, &item.patchset.centers, i);
                x0[k * 4..(k + 1) * 4].iter().map(move |q| add(q, &a)).collect::<Vec<_>>()
            })
            .collect();
        let want: Vec<Point> = mask.masked_indices().iter().flat_map(|&i| item.targets[i].clone()).collect();
        assert_eq!(rebuilt.len(), want.len());
        for (a, b) in rebuilt.iter().zip(&want) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-15);
            }
        }
    }
}
