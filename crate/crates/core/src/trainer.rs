//! Optimisation loop.
//!
//! One step trains on one horizontal stripe of one training view: the stripe's
//! interior rows plus a halo of PSF-radius rows above and below are encoded and
//! pushed through the MLP, the intermediate image is rendered with the PSF, and
//! the combined loss is taken on the interior rows only. Interior rows
//! therefore see exactly the rendering a full-image pass would give them.
//!
//! `(view, stripe)` pairs are visited in a seeded shuffle, without replacement
//! within an epoch. Parameters are updated with Adam under an exponential
//! learning-rate decay.
//!
//! # Checkpoint file (`PWCK`, version 1, little-endian)
//!
//! magic, version u32, weight-file length u64, the `PWIN` weight file bytes,
//! Adam first then second moments (f32, same order as the weight blobs),
//! iteration u64, RNG seed (32 bytes), RNG stream u64, RNG word position u128,
//! epoch order length u32 followed by `(view, stripe)` u32 pairs, epoch cursor
//! u32, loss count u64 followed by f64 losses, CRC32 of every preceding byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::binio::{ByteReader, ByteWriter};
use crate::data_io::PlaneWaveStack;
use crate::encoding;
use crate::error::{Error, Result};
use crate::model::{init_params, Architecture, InputRanges, Layer, ModelParams};
use crate::numerics::{DenseArray, Real, Tape};
use crate::objective::{combined_loss_on_tape, LossConfig};
use crate::render::{render_on_tape, PsfKernel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which angles of the stack are used for training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSelection {
    All,
    Count(usize),
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsfConfig {
    pub axial_sigma: f64,
    pub lateral_sigma: f64,
    pub size: usize,
}

impl Default for PsfConfig {
    fn default() -> Self {
        let k = PsfKernel::standard();
        Self {
            axial_sigma: k.axial_sigma(),
            lateral_sigma: k.lateral_sigma(),
            size: k.size(),
        }
    }
}

impl PsfConfig {
    pub fn kernel(&self) -> Result<PsfKernel> {
        PsfKernel::new(self.axial_sigma, self.lateral_sigma, self.size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub stripes_per_image: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last iteration (exponential decay).
    pub final_learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub views: ViewSelection,
    pub holdout_orthogonal: bool,
    pub checkpoint_every: Option<u64>,
    pub model: Architecture,
    pub loss: LossConfig,
    pub psf: PsfConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            stripes_per_image: 10,
            learning_rate: 5e-4,
            final_learning_rate: 5e-5,
            adam: AdamConfig::default(),
            seed: 0,
            views: ViewSelection::All,
            holdout_orthogonal: false,
            checkpoint_every: None,
            model: Architecture::default(),
            loss: LossConfig::default(),
            psf: PsfConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::contract("iterations must be at least 1"));
        }
        if self.stripes_per_image == 0 {
            return Err(Error::contract("stripes_per_image must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.final_learning_rate >= 0.0) {
            return Err(Error::contract("learning rates must be non-negative"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::contract("checkpoint_every must be positive"));
        }
        self.model.validate()?;
        self.loss.validate()
    }

    /// Learning rate for the 0-based step `iteration`.
    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        if self.iterations <= 1 || self.learning_rate == 0.0 {
            return self.learning_rate;
        }
        let t = (iteration.min(self.iterations - 1)) as f64 / (self.iterations - 1) as f64;
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(t)
    }
}

/// `requested` indices out of `0..total` at a uniform stride, optionally
/// skipping `holdout`. Stride positions are rounded to nearest and always start
/// at the first eligible index.
pub fn select_views(total: usize, requested: usize, holdout: Option<usize>) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..total).filter(|&i| Some(i) != holdout).collect();
    if requested == 0 || requested > eligible.len() {
        return Err(Error::contract(format!(
            "requested {requested} views but {} are available",
            eligible.len()
        )));
    }
    if requested == 1 {
        return Ok(vec![eligible[0]]);
    }
    let stride = (eligible.len() - 1) as f64 / (requested - 1) as f64;
    Ok((0..requested)
        .map(|i| eligible[(i as f64 * stride).round() as usize])
        .collect())
}

/// Angle indices used for training under `cfg`.
pub fn training_views(stack: &PlaneWaveStack, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let total = stack.angle_count();
    let holdout = cfg.holdout_orthogonal.then(|| stack.orthogonal_index());
    match &cfg.views {
        ViewSelection::All => select_views(total, total - usize::from(holdout.is_some()), holdout),
        ViewSelection::Count(n) => select_views(total, *n, holdout),
        ViewSelection::Indices(list) => {
            let mut list = list.clone();
            list.sort_unstable();
            list.dedup();
            if list.is_empty() || list.iter().any(|&i| i >= total || Some(i) == holdout) {
                return Err(Error::contract(format!("invalid training index list {list:?}")));
            }
            Ok(list)
        }
    }
}

/// Interior rows `[start, end)` of one stripe and the halo-extended rows
/// `[ext_start, ext_end)` that are encoded for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stripe {
    pub start: usize,
    pub end: usize,
    pub ext_start: usize,
    pub ext_end: usize,
}

impl Stripe {
    pub fn rows(&self) -> usize {
        self.end - self.start
    }

    pub fn ext_rows(&self) -> usize {
        self.ext_end - self.ext_start
    }
}

/// Splits `height` rows into `count` near-equal stripes (at most `count`, at
/// least `min_rows` interior rows each when the image allows it).
pub fn stripes(height: usize, count: usize, halo: usize, min_rows: usize) -> Vec<Stripe> {
    let max_count = (height / min_rows.max(1)).max(1);
    let count = count.clamp(1, max_count);
    (0..count)
        .map(|s| {
            let start = s * height / count;
            let end = (s + 1) * height / count;
            Stripe {
                start,
                end,
                ext_start: start.saturating_sub(halo),
                ext_end: (end + halo).min(height),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    first_moment: Vec<Layer<T>>,
    second_moment: Vec<Layer<T>>,
    pub iteration: u64,
    rng: ChaCha8Rng,
    epoch_order: Vec<(usize, usize)>,
    cursor: usize,
    pub losses: Vec<f64>,
}

fn zero_like<T: Real>(layers: &[Layer<T>]) -> Vec<Layer<T>> {
    layers
        .iter()
        .map(|l| Layer {
            weight: DenseArray::zeros(l.weight.shape().to_vec()),
            bias: DenseArray::zeros(l.bias.shape().to_vec()),
        })
        .collect()
}

impl<T: Real> TrainState<T> {
    pub fn new(params: ModelParams<T>, seed: u64) -> Self {
        let zeros = zero_like(params.layers());
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            params,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5057_494e_5452_4149),
            epoch_order: Vec::new(),
            cursor: 0,
            losses: Vec::new(),
        }
    }

    /// Adam update of every parameter from gradients in layer order.
    fn adam_update(&mut self, grads: &[Layer<T>], lr: f64, adam: &AdamConfig) {
        let t = (self.iteration + 1) as i32;
        let b1 = T::lit(adam.beta1);
        let b2 = T::lit(adam.beta2);
        let one = T::one();
        let corr1 = T::lit(1.0 - adam.beta1.powi(t));
        let corr2 = T::lit(1.0 - adam.beta2.powi(t));
        let lr = T::lit(lr);
        let eps = T::lit(adam.epsilon);
        let layers = self.params.layers_mut();
        for (((layer, g), m), v) in layers
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            let groups = [
                (&mut layer.weight, &g.weight, &mut m.weight, &mut v.weight),
                (&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias),
            ];
            for (p, g, m, v) in groups {
                for (((p, &g), m), v) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut().iter_mut())
                    .zip(v.data_mut().iter_mut())
                {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / corr1;
                    let v_hat = *v / corr2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let weights = self.params.to_bytes();
        w.u64(weights.len() as u64);
        w.bytes(&weights);
        for moments in [&self.first_moment, &self.second_moment] {
            for l in moments {
                w.f32_slice(l.weight.data().iter().map(|v| v.as_f64() as f32));
                w.f32_slice(l.bias.data().iter().map(|v| v.as_f64() as f32));
            }
        }
        w.u64(self.iteration);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.u128(self.rng.get_word_pos());
        w.u32(self.epoch_order.len() as u32);
        for &(view, stripe) in &self.epoch_order {
            w.u32(view as u32);
            w.u32(stripe as u32);
        }
        w.u32(self.cursor as u32);
        w.u64(self.losses.len() as u64);
        for &l in &self.losses {
            w.f64(l);
        }
        w.finish_with_crc()
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let mut r = ByteReader::with_crc(bytes)?;
        r.take(8)?;
        let weight_len = r.u64()? as usize;
        let weights_at = r.offset();
        let params = ModelParams::<T>::from_bytes(r.take(weight_len)?).map_err(|e| match e {
            Error::Format { offset, reason } => Error::format(weights_at + offset, reason),
            other => other,
        })?;
        let mut moments = Vec::new();
        for _ in 0..2 {
            let mut layers = Vec::new();
            for l in params.layers() {
                let wd = r.f32_vec(l.weight.len())?;
                let bd = r.f32_vec(l.bias.len())?;
                layers.push(Layer {
                    weight: DenseArray::new(l.weight.shape().to_vec(), wd.into_iter().map(|v| T::lit(v as f64)).collect())?,
                    bias: DenseArray::new(l.bias.shape().to_vec(), bd.into_iter().map(|v| T::lit(v as f64)).collect())?,
                });
            }
            moments.push(layers);
        }
        let second_moment = moments.pop().expect("two moment sets");
        let first_moment = moments.pop().expect("two moment sets");
        let iteration = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(r.u128()?);
        let order_len = r.u32()? as usize;
        let mut epoch_order = Vec::with_capacity(order_len.min(1 << 20));
        for _ in 0..order_len {
            epoch_order.push((r.u32()? as usize, r.u32()? as usize));
        }
        let cursor_at = r.offset();
        let cursor = r.u32()? as usize;
        if cursor > epoch_order.len() {
            return Err(Error::format(cursor_at, "epoch cursor past end of order"));
        }
        let loss_count = r.u64()? as usize;
        let mut losses = Vec::with_capacity(loss_count.min(1 << 24));
        for _ in 0..loss_count {
            losses.push(r.f64()?);
        }
        r.expect_end()?;
        Ok(Self {
            params,
            first_moment,
            second_moment,
            iteration,
            rng,
            epoch_order,
            cursor,
            losses,
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<usize> {
        let bytes = self.to_checkpoint_bytes();
        fs::write(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub losses: Vec<f64>,
    pub wall_time_secs: f64,
    pub parameter_count: usize,
    pub training_views: Vec<usize>,
    pub stripes: usize,
}

/// Precomputed per-run data: selected views, stripe layout, PSF and the
/// normalised ground-truth images.
pub struct Trainer<'a, T> {
    stack: &'a PlaneWaveStack,
    cfg: TrainConfig,
    views: Vec<usize>,
    stripes: Vec<Stripe>,
    kernel: PsfKernel,
    ground_truth: Vec<DenseArray<T>>,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(stack: &'a PlaneWaveStack, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let views = training_views(stack, cfg)?;
        let kernel = cfg.psf.kernel()?;
        let window = cfg.loss.ssim_window;
        if stack.width() < window || stack.height() < window {
            return Err(Error::dim(
                "Trainer::new",
                format!("{}x{} image smaller than SSIM window {window}", stack.height(), stack.width()),
            ));
        }
        if stack.height() < kernel.radius() + 1 || stack.width() < kernel.radius() + 1 {
            return Err(Error::dim("Trainer::new", "image smaller than PSF radius + 1"));
        }
        let stripes = stripes(stack.height(), cfg.stripes_per_image, kernel.radius(), window);
        let ground_truth = (0..stack.angle_count())
            .map(|a| stack.image_normalized(a))
            .collect();
        Ok(Self {
            stack,
            cfg: cfg.clone(),
            views,
            stripes,
            kernel,
            ground_truth,
        })
    }

    pub fn views(&self) -> &[usize] {
        &self.views
    }

    pub fn stripes(&self) -> &[Stripe] {
        &self.stripes
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Fresh parameters and optimiser state for this stack.
    pub fn init_state(&self) -> Result<TrainState<T>> {
        let mut params = init_params::<T>(self.cfg.model, self.cfg.seed)?;
        let (lo, hi) = self.stack.angle_span();
        let (dmin, dmax) = self.stack.dyn_range_db();
        params.set_ranges(InputRanges {
            angle_min_deg: lo,
            angle_max_deg: hi,
            dyn_min_db: dmin,
            dyn_max_db: dmax,
        });
        Ok(TrainState::new(params, self.cfg.seed))
    }

    fn next_pair(&self, state: &mut TrainState<T>) -> (usize, usize) {
        if state.cursor >= state.epoch_order.len() {
            state.epoch_order = self
                .views
                .iter()
                .flat_map(|&v| (0..self.stripes.len()).map(move |s| (v, s)))
                .collect();
            state.epoch_order.shuffle(&mut state.rng);
            state.cursor = 0;
        }
        let pair = state.epoch_order[state.cursor];
        state.cursor += 1;
        pair
    }

    /// Loss and per-layer gradients for one `(view, stripe)` batch.
    pub fn loss_and_gradients(&self, params: &ModelParams<T>, view: usize, stripe: usize) -> Result<(f64, Vec<Layer<T>>)> {
        let st = self.stripes.get(stripe).ok_or_else(|| Error::contract(format!("stripe {stripe} out of range")))?;
        let angle_norm = params.ranges().normalize_angle(self.stack.angles_deg()[view] as f64);
        let coords = encoding::grid_coords(self.stack.height(), self.stack.width(), st.ext_start..st.ext_end, angle_norm)?;
        let gamma = encoding::positional_encode::<T>(&coords, params.arch().embedding_size)?;
        let gt = self.ground_truth[view].row_slice(st.start, st.end)?;

        let mut tape = Tape::new();
        let g = tape.constant(gamma.gamma)?;
        let (o, nodes) = params.forward_on_tape(&mut tape, g)?;
        let o_img = tape.reshape(o, [st.ext_rows(), self.stack.width()])?;
        let rendered = render_on_tape(&mut tape, o_img, &self.kernel)?;
        let interior = tape.crop_rows(rendered, st.start - st.ext_start, st.rows())?;
        let target = tape.constant(gt)?;
        let loss = combined_loss_on_tape(&mut tape, interior, target, &self.cfg.loss)?;
        let loss_value = tape.value(loss).data()[0].as_f64();

        let mut grads = tape.backward(loss)?;
        let layers = nodes
            .into_iter()
            .map(|(w, b)| Layer {
                weight: grads.take(w).expect("weight gradient"),
                bias: grads.take(b).expect("bias gradient"),
            })
            .collect();
        Ok((loss_value, layers))
    }

    /// One optimisation step; returns the batch loss.
    pub fn step(&self, state: &mut TrainState<T>) -> Result<f64> {
        let (view, stripe) = self.next_pair(state);
        let nan = |_| Error::NonFiniteLoss {
            iteration: state.iteration,
            angle: view,
            stripe,
        };
        let (loss, grads) = match self.loss_and_gradients(&state.params, view, stripe) {
            Ok(v) => v,
            Err(e @ Error::NonFinite { .. }) => return Err(nan(e)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(nan(Error::NonFinite { op: "loss" }));
        }
        let lr = self.cfg.learning_rate_at(state.iteration);
        state.adam_update(&grads, lr, &self.cfg.adam);
        state.iteration += 1;
        state.losses.push(loss);
        Ok(loss)
    }

    /// Steps until `cfg.iterations`, checkpointing into `checkpoint_dir` every
    /// `cfg.checkpoint_every` iterations when both are set.
    pub fn run(&self, state: &mut TrainState<T>, checkpoint_dir: Option<&Path>) -> Result<()> {
        while state.iteration < self.cfg.iterations {
            self.step(state)?;
            if let (Some(every), Some(dir)) = (self.cfg.checkpoint_every, checkpoint_dir) {
                if state.iteration % every == 0 {
                    state.save_checkpoint(checkpoint_path(dir))?;
                }
            }
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.pwck")
}

/// One step with a throwaway [`Trainer`].
pub fn train_step<T: Real>(state: &mut TrainState<T>, stack: &PlaneWaveStack, cfg: &TrainConfig) -> Result<f64> {
    Trainer::new(stack, cfg)?.step(state)
}

/// Trains from scratch (or resumes from `resume`) to `cfg.iterations`.
pub fn train_from<T: Real>(
    stack: &PlaneWaveStack,
    cfg: &TrainConfig,
    resume: Option<TrainState<T>>,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelParams<T>, TrainingReport)> {
    let started = Instant::now();
    let trainer = Trainer::<T>::new(stack, cfg)?;
    let mut state = match resume {
        Some(s) => s,
        None => trainer.init_state()?,
    };
    trainer.run(&mut state, checkpoint_dir)?;
    let report = TrainingReport {
        losses: state.losses.clone(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        parameter_count: state.params.parameter_count(),
        training_views: trainer.views().to_vec(),
        stripes: trainer.stripes().len(),
    };
    Ok((state.params, report))
}

pub fn train<T: Real>(stack: &PlaneWaveStack, cfg: &TrainConfig) -> Result<(ModelParams<T>, TrainingReport)> {
    train_from(stack, cfg, None, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_phantom, PhantomSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 6,
            stripes_per_image: 2,
            learning_rate: 1e-3,
            final_learning_rate: 1e-4,
            seed: 3,
            model: Architecture {
                num_layers: 2,
                width: 8,
                skip_layer: 2,
                embedding_size: 2,
            },
            ..Default::default()
        }
    }

    fn tiny_stack() -> PlaneWaveStack {
        let mut spec = PhantomSpec::bundled();
        spec.height = 24;
        spec.width = 16;
        spec.scatterers.clear();
        spec.disks.clear();
        spec.angles_deg = vec![-10.0, 0.0, 10.0];
        generate_phantom(&spec, 1).unwrap()
    }

    #[test]
    fn view_selection_examples() {
        let all_but: Vec<usize> = (0..75).filter(|&i| i != 37).collect();
        assert_eq!(select_views(75, 74, Some(37)).unwrap(), all_but);
        assert_eq!(select_views(75, 75, None).unwrap(), (0..75).collect::<Vec<_>>());
        assert_eq!(select_views(9, 3, None).unwrap(), vec![0, 4, 8]);
        assert!(select_views(75, 75, Some(37)).is_err());
        assert!(select_views(5, 0, None).is_err());
    }

    #[test]
    fn view_selection_counts_are_distinct_and_ascending() {
        for requested in [14, 25, 38, 74] {
            let v = select_views(75, requested, Some(37)).unwrap();
            assert_eq!(v.len(), requested);
            assert!(v.windows(2).all(|w| w[0] < w[1]));
            assert!(!v.contains(&37));
            assert_eq!(v[0], 0);
        }
    }

    #[test]
    fn stripes_cover_every_row_once() {
        for (h, n) in [(685, 10), (64, 10), (24, 2), (30, 7), (11, 3)] {
            let s = stripes(h, n, 5, 11);
            let mut covered = vec![0; h];
            for st in &s {
                assert!(st.ext_start <= st.start && st.end <= st.ext_end && st.ext_end <= h);
                for r in st.start..st.end {
                    covered[r] += 1;
                }
            }
            assert!(covered.iter().all(|&c| c == 1), "{h} {n}");
        }
        let full = stripes(685, 10, 5, 11);
        assert_eq!(full.len(), 10);
        assert!(full.iter().all(|s| s.rows() == 68 || s.rows() == 69));
        assert_eq!(stripes(64, 10, 5, 11).len(), 5);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert!((cfg.learning_rate_at(0) - 5e-4).abs() < 1e-15);
        assert!((cfg.learning_rate_at(9_999) - 5e-5).abs() < 1e-15);
        let mid = cfg.learning_rate_at(4_999) ;
        assert!(mid < 5e-4 && mid > 5e-5);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let stack = tiny_stack();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            final_learning_rate: 0.0,
            ..tiny_config()
        };
        let trainer = Trainer::<f32>::new(&stack, &cfg).unwrap();
        let mut state = trainer.init_state().unwrap();
        let before = state.params.clone();
        let loss = trainer.step(&mut state).unwrap();
        assert!(loss.is_finite());
        assert_eq!(state.params, before);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let stack = tiny_stack();
        let trainer = Trainer::<f64>::new(&stack, &tiny_config()).unwrap();
        let mut state = trainer.init_state().unwrap();
        let before = state.params.clone();
        let zeros = zero_like(state.params.layers());
        state.adam_update(&zeros, 1e-3, &AdamConfig::default());
        assert_eq!(state.params, before);
    }

    #[test]
    fn epochs_visit_every_pair_once() {
        let stack = tiny_stack();
        let trainer = Trainer::<f32>::new(&stack, &tiny_config()).unwrap();
        let mut state = trainer.init_state().unwrap();
        let n = trainer.views().len() * trainer.stripes().len();
        let mut seen: Vec<_> = (0..n).map(|_| trainer.next_pair(&mut state)).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), n);
    }

    #[test]
    fn single_iteration_report() {
        let stack = tiny_stack();
        let cfg = TrainConfig { iterations: 1, ..tiny_config() };
        let (_, report) = train::<f32>(&stack, &cfg).unwrap();
        assert_eq!(report.losses.len(), 1);
    }

    #[test]
    fn same_seed_same_losses() {
        let stack = tiny_stack();
        let (pa, ra) = train::<f32>(&stack, &tiny_config()).unwrap();
        let (pb, rb) = train::<f32>(&stack, &tiny_config()).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(pa.to_bytes(), pb.to_bytes());
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let stack = tiny_stack();
        let cfg = tiny_config();
        let (full, report) = train::<f32>(&stack, &cfg).unwrap();

        let trainer = Trainer::<f32>::new(&stack, &cfg).unwrap();
        let mut state = trainer.init_state().unwrap();
        for _ in 0..4 {
            trainer.step(&mut state).unwrap();
        }
        let bytes = state.to_checkpoint_bytes();
        let restored = TrainState::<f32>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(restored, state);
        let (resumed, resumed_report) = train_from(&stack, &cfg, Some(restored), None).unwrap();
        assert_eq!(resumed_report.losses, report.losses);
        assert_eq!(resumed.to_bytes(), full.to_bytes());
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let stack = tiny_stack();
        let trainer = Trainer::<f32>::new(&stack, &tiny_config()).unwrap();
        let mut state = trainer.init_state().unwrap();
        trainer.step(&mut state).unwrap();
        let mut bytes = state.to_checkpoint_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(TrainState::<f32>::from_checkpoint_bytes(&bytes).is_err());
    }

    #[test]
    fn holdout_indices_respected() {
        let stack = tiny_stack();
        let cfg = TrainConfig {
            holdout_orthogonal: true,
            ..tiny_config()
        };
        assert_eq!(training_views(&stack, &cfg).unwrap(), vec![0, 2]);
        let cfg = TrainConfig {
            views: ViewSelection::Indices(vec![1]),
            holdout_orthogonal: true,
            ..tiny_config()
        };
        assert!(training_views(&stack, &cfg).is_err());
    }
}
