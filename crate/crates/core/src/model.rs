//! The coordinate MLP and its weight file.
//!
//! Hidden layers are numbered from 1. Layer 1 reads the embedded input
//! `gamma`; the skip layer reads `concat(previous activation, gamma)`; every
//! hidden layer is affine + ReLU, and a final linear layer produces one
//! intensity per sample.
//!
//! # Weight file (`PWIN`, version 1, little-endian)
//!
//! | field | type |
//! |---|---|
//! | magic `"PWIN"` | 4 bytes |
//! | version | u32 |
//! | num_layers, width, skip_layer, embedding_size | 4 x u32 |
//! | init seed | u64 |
//! | angle_min_deg, angle_max_deg, dyn_min_db, dyn_max_db | 4 x f32 |
//! | per layer (hidden layers, then output): weight `in x out` row-major, bias `out` | f32 |
//! | CRC32 of every preceding byte | u32 |

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::binio::{ByteReader, ByteWriter};
use crate::encoding::{self, EncodedBatch};
use crate::error::{Error, Result};
use crate::numerics::{ops, DenseArray, NodeId, Real, Tape};

pub const WEIGHT_MAGIC: &[u8; 4] = b"PWIN";
pub const WEIGHT_VERSION: u32 = 1;
/// Bytes before the first parameter blob.
pub const WEIGHT_HEADER_BYTES: usize = 4 + 4 + 16 + 8 + 16;

/// Shape of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub num_layers: usize,
    pub width: usize,
    pub skip_layer: usize,
    pub embedding_size: usize,
}

impl Default for Architecture {
    /// 8 hidden layers of 256, skip into layer 5, L = 10.
    fn default() -> Self {
        Self {
            num_layers: 8,
            width: 256,
            skip_layer: 5,
            embedding_size: 10,
        }
    }
}

impl Architecture {
    /// `num_layers` hidden layers of `width` with the skip halfway up
    /// (`num_layers / 2 + 1`, which is layer 5 of 8).
    pub fn with_depth(num_layers: usize, width: usize, embedding_size: usize) -> Self {
        Self {
            num_layers,
            width,
            skip_layer: num_layers / 2 + 1,
            embedding_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::contract("width must be at least 1"));
        }
        if self.num_layers < 2 {
            return Err(Error::contract(format!(
                "need at least 2 hidden layers, got {}",
                self.num_layers
            )));
        }
        if !(self.skip_layer > 1 && self.skip_layer <= self.num_layers) {
            return Err(Error::contract(format!(
                "skip layer {} must lie in 2..={}",
                self.skip_layer, self.num_layers
            )));
        }
        if self.embedding_size == 0 {
            return Err(Error::contract("embedding size must be at least 1"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        encoding::encoded_width(self.embedding_size)
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.num_layers + 1);
        for layer in 1..=self.num_layers {
            let mut fan_in = if layer == 1 { self.input_width() } else { self.width };
            if layer == self.skip_layer {
                fan_in += self.input_width();
            }
            shapes.push((fan_in, self.width));
        }
        shapes.push((self.width, 1));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Ranges used to normalise inputs and outputs, carried with the weights so
/// that inference reproduces the training-time mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputRanges {
    pub angle_min_deg: f32,
    pub angle_max_deg: f32,
    pub dyn_min_db: f32,
    pub dyn_max_db: f32,
}

impl Default for InputRanges {
    fn default() -> Self {
        Self {
            angle_min_deg: -16.0,
            angle_max_deg: 16.0,
            dyn_min_db: -60.0,
            dyn_max_db: 0.0,
        }
    }
}

impl InputRanges {
    pub fn normalize_angle(&self, angle_deg: f64) -> f64 {
        encoding::normalize_angle(angle_deg, self.angle_min_deg as f64, self.angle_max_deg as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: DenseArray<T>,
    pub bias: DenseArray<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    arch: Architecture,
    layers: Vec<Layer<T>>,
    seed: u64,
    ranges: InputRanges,
}

/// Intermediate (pre-rendering) intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub o: DenseArray<T>,
}

impl<T: Real> Prediction<T> {
    /// Reinterprets the per-sample output as a `height x width` image.
    pub fn into_image(self, height: usize, width: usize) -> Result<DenseArray<T>> {
        self.o.reshape([height, width])
    }
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
pub fn init_params<T: Real>(arch: Architecture, seed: u64) -> Result<ModelParams<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight = DenseArray::from_fn(fan_in, fan_out, |_, _| T::lit(rng.random_range(-bound..bound)));
            Layer {
                weight,
                bias: DenseArray::zeros([fan_out]),
            }
        })
        .collect();
    Ok(ModelParams {
        arch,
        layers,
        seed,
        ranges: InputRanges::default(),
    })
}

impl<T: Real> ModelParams<T> {
    /// Builds parameters from explicit layers, checking them against `arch`.
    pub fn from_layers(arch: Architecture, layers: Vec<Layer<T>>, seed: u64, ranges: InputRanges) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::dim(
                "ModelParams::from_layers",
                format!("expected {} layers, got {}", shapes.len(), layers.len()),
            ));
        }
        for (i, ((fan_in, fan_out), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weight.shape() != [*fan_in, *fan_out] || layer.bias.shape() != [*fan_out] {
                return Err(Error::dim(
                    "ModelParams::from_layers",
                    format!(
                        "layer {i}: weight {:?} bias {:?}, expected [{fan_in}, {fan_out}] / [{fan_out}]",
                        layer.weight.shape(),
                        layer.bias.shape()
                    ),
                ));
            }
        }
        Ok(Self {
            arch,
            layers,
            seed,
            ranges,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ranges(&self) -> &InputRanges {
        &self.ranges
    }

    pub fn set_ranges(&mut self, ranges: InputRanges) {
        self.ranges = ranges;
    }

    /// Sum of all weight and bias extents.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            seed: self.seed,
            ranges: self.ranges,
        }
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.arch.input_width() {
            return Err(Error::dim(
                "forward",
                format!("encoded width {width}, model expects {}", self.arch.input_width()),
            ));
        }
        Ok(())
    }

    /// Inference without recording.
    pub fn forward(&self, gamma: &EncodedBatch<T>) -> Result<Prediction<T>> {
        self.check_input(gamma.width())?;
        let mut h: Option<DenseArray<T>> = None;
        let (hidden, output) = self.layers.split_at(self.arch.num_layers);
        for (idx, layer) in hidden.iter().enumerate() {
            let number = idx + 1;
            let input = match (&h, number == self.arch.skip_layer) {
                (None, _) => gamma.gamma.clone(),
                (Some(prev), true) => ops::concat_cols(prev, &gamma.gamma)?,
                (Some(prev), false) => prev.clone(),
            };
            let z = ops::affine_forward(&input, &layer.weight, &layer.bias)?;
            h = Some(ops::relu(&z));
        }
        let last = &output[0];
        let out = ops::affine_forward(h.as_ref().expect("at least one hidden layer"), &last.weight, &last.bias)?;
        let n = out.len();
        Ok(Prediction {
            o: out.reshape([n])?.ensure_finite("forward")?,
        })
    }

    /// Records the forward pass on `tape`; returns the `N x 1` output node and
    /// the `(weight, bias)` parameter nodes in layer order.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, gamma: NodeId) -> Result<(NodeId, Vec<(NodeId, NodeId)>)> {
        self.check_input(tape.value(gamma).cols())?;
        let mut nodes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.param(layer.weight.clone())?;
            let b = tape.param(layer.bias.clone())?;
            nodes.push((w, b));
        }
        let mut h = gamma;
        for (idx, &(w, b)) in nodes[..self.arch.num_layers].iter().enumerate() {
            let number = idx + 1;
            let input = if number == self.arch.skip_layer {
                tape.concat_cols(h, gamma)?
            } else {
                h
            };
            let z = tape.affine(input, w, b)?;
            h = tape.relu(z)?;
        }
        let (w, b) = nodes[self.arch.num_layers];
        let out = tape.affine(h, w, b)?;
        Ok((out, nodes))
    }

    /// Intermediate intensity image `o` on an arbitrary `height x width` grid
    /// at `angle_deg`, evaluated in row chunks to bound memory.
    pub fn predict_image(&self, height: usize, width: usize, angle_deg: f64) -> Result<DenseArray<T>> {
        const MAX_CHUNK_SAMPLES: usize = 1 << 15;
        let angle_norm = self.ranges.normalize_angle(angle_deg);
        let rows_per_chunk = (MAX_CHUNK_SAMPLES / width.max(1)).max(1);
        let mut data = Vec::with_capacity(height * width);
        let mut start = 0;
        while start < height {
            let end = (start + rows_per_chunk).min(height);
            let coords = encoding::grid_coords(height, width, start..end, angle_norm)?;
            let gamma = encoding::positional_encode(&coords, self.arch.embedding_size)?;
            data.extend_from_slice(self.forward(&gamma)?.o.data());
            start = end;
        }
        DenseArray::new([height, width], data)
    }

    /// Serialises to the `PWIN` format (parameters stored as f32).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(WEIGHT_MAGIC);
        w.u32(WEIGHT_VERSION);
        for v in [
            self.arch.num_layers,
            self.arch.width,
            self.arch.skip_layer,
            self.arch.embedding_size,
        ] {
            w.u32(v as u32);
        }
        w.u64(self.seed);
        w.f32(self.ranges.angle_min_deg);
        w.f32(self.ranges.angle_max_deg);
        w.f32(self.ranges.dyn_min_db);
        w.f32(self.ranges.dyn_max_db);
        for layer in &self.layers {
            w.f32_slice(layer.weight.data().iter().map(|v| v.as_f64() as f32));
            w.f32_slice(layer.bias.data().iter().map(|v| v.as_f64() as f32));
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(WEIGHT_MAGIC)?;
        r.version(WEIGHT_VERSION)?;
        let mut r = ByteReader::with_crc(bytes)?;
        r.take(8)?;
        let at = r.offset();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let arch = Architecture {
            num_layers: dims[0],
            width: dims[1],
            skip_layer: dims[2],
            embedding_size: dims[3],
        };
        arch.validate()
            .map_err(|e| Error::format(at, format!("invalid architecture: {e}")))?;
        let seed = r.u64()?;
        let ranges = InputRanges {
            angle_min_deg: r.f32()?,
            angle_max_deg: r.f32()?,
            dyn_min_db: r.f32()?,
            dyn_max_db: r.f32()?,
        };
        let mut layers = Vec::new();
        for (fan_in, fan_out) in arch.layer_shapes() {
            let weight = r.f32_vec(fan_in * fan_out)?;
            let bias = r.f32_vec(fan_out)?;
            layers.push(Layer {
                weight: DenseArray::new([fan_in, fan_out], weight.into_iter().map(|v| T::lit(v as f64)).collect())?,
                bias: DenseArray::new([fan_out], bias.into_iter().map(|v| T::lit(v as f64)).collect())?,
            });
        }
        r.expect_end()?;
        Self::from_layers(arch, layers, seed, ranges)
    }

    /// Writes the weight file; returns the number of bytes written.
    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<usize> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Size in bytes of the weight file for `arch`.
pub fn weight_file_size(arch: &Architecture) -> usize {
    WEIGHT_HEADER_BYTES + 4 * arch.parameter_count() + 4
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{grid_coords, positional_encode, CoordBatch};

    fn toy_arch() -> Architecture {
        Architecture {
            num_layers: 2,
            width: 8,
            skip_layer: 2,
            embedding_size: 1,
        }
    }

    #[test]
    fn default_parameter_count_closed_form() {
        let arch = Architecture::default();
        let dense = 256 * 256 + 256;
        let expected = (63 * 256 + 256) + 3 * dense + (319 * 256 + 256) + 3 * dense + (256 + 1);
        assert_eq!(arch.parameter_count(), expected);
        assert_eq!(expected, 493_313);
        let params = init_params::<f32>(arch, 0).unwrap();
        assert_eq!(params.parameter_count(), expected);
    }

    #[test]
    fn toy_parameter_count_by_hand() {
        // layer 1: 9 -> 8, layer 2 (skip): 8 + 9 -> 8, output: 8 -> 1
        assert_eq!(toy_arch().parameter_count(), (9 * 8 + 8) + (17 * 8 + 8) + (8 + 1));
        assert_eq!(toy_arch().parameter_count(), 233);
    }

    #[test]
    fn invalid_architectures() {
        let base = toy_arch();
        for bad in [
            Architecture { width: 0, ..base },
            Architecture { num_layers: 1, skip_layer: 1, ..base },
            Architecture { skip_layer: 1, ..base },
            Architecture { skip_layer: 3, ..base },
            Architecture { embedding_size: 0, ..base },
        ] {
            assert!(matches!(init_params::<f64>(bad, 0), Err(Error::Contract(_))), "{bad:?}");
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params::<f32>(toy_arch(), 42).unwrap();
        let b = init_params::<f32>(toy_arch(), 42).unwrap();
        let c = init_params::<f32>(toy_arch(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (layer, (fan_in, _)) in a.layers().iter().zip(toy_arch().layer_shapes()) {
            let bound = (6.0 / fan_in as f32).sqrt();
            assert!(layer.weight.data().iter().all(|w| w.abs() <= bound));
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_weights_output_final_bias() {
        let mut p = init_params::<f64>(toy_arch(), 1).unwrap();
        for layer in p.layers_mut() {
            layer.weight = DenseArray::zeros(layer.weight.shape().to_vec());
        }
        p.layers_mut().last_mut().unwrap().bias = DenseArray::filled([1], 0.37);
        let coords = grid_coords(4, 4, 0..4, 0.1).unwrap();
        let gamma = positional_encode(&coords, 1).unwrap();
        let out = p.forward(&gamma).unwrap();
        assert!(out.o.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_first_preactivation() {
        let p = init_params::<f64>(toy_arch(), 3).unwrap();
        let zeros = DenseArray::zeros([5, 9]);
        let z = ops::affine_forward(&zeros, &p.layers()[0].weight, &p.layers()[0].bias).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sample_matches_hand_chain() {
        let p = init_params::<f64>(toy_arch(), 5).unwrap();
        let coords = CoordBatch {
            x: vec![0.25],
            y: vec![-0.5],
            alpha: vec![0.75],
        };
        let gamma = positional_encode::<f64>(&coords, 1).unwrap();
        let g = gamma.gamma.data().to_vec();

        let dense = |input: &[f64], layer: &Layer<f64>, act: bool| -> Vec<f64> {
            let (fan_in, fan_out) = (layer.weight.rows(), layer.weight.cols());
            assert_eq!(input.len(), fan_in);
            (0..fan_out)
                .map(|j| {
                    let z: f64 = (0..fan_in).map(|i| input[i] * layer.weight.get(i, j)).sum::<f64>()
                        + layer.bias.data()[j];
                    if act {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect()
        };
        let h1 = dense(&g, &p.layers()[0], true);
        let h2 = dense(&[h1, g.clone()].concat(), &p.layers()[1], true);
        let o = dense(&h2, &p.layers()[2], false);
        let got = p.forward(&gamma).unwrap().o.data()[0];
        assert!((got - o[0]).abs() < 1e-12);
    }

    #[test]
    fn batching_is_consistent() {
        let p = init_params::<f64>(toy_arch(), 8).unwrap();
        let coords = grid_coords(5, 3, 0..5, -0.4).unwrap();
        let gamma = positional_encode::<f64>(&coords, 1).unwrap();
        let batch = p.forward(&gamma).unwrap();
        for i in 0..coords.len() {
            let one = CoordBatch {
                x: vec![coords.x[i]],
                y: vec![coords.y[i]],
                alpha: vec![coords.alpha[i]],
            };
            let single = p.forward(&positional_encode(&one, 1).unwrap()).unwrap();
            assert!((single.o.data()[0] - batch.o.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let p = init_params::<f64>(toy_arch(), 8).unwrap();
        let coords = grid_coords(2, 2, 0..2, 0.0).unwrap();
        let gamma = positional_encode::<f64>(&coords, 2).unwrap();
        assert!(matches!(p.forward(&gamma), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = init_params::<f64>(toy_arch(), 2).unwrap();
        let coords = grid_coords(3, 4, 0..3, 0.2).unwrap();
        let gamma = positional_encode::<f64>(&coords, 1).unwrap();
        let mut tape = Tape::new();
        let g = tape.constant(gamma.gamma.clone()).unwrap();
        let (out, nodes) = p.forward_on_tape(&mut tape, g).unwrap();
        assert_eq!(nodes.len(), 3);
        assert_eq!(tape.value(out).data(), p.forward(&gamma).unwrap().o.data());
    }

    #[test]
    fn predict_image_chunks_agree_with_single_batch() {
        let p = init_params::<f32>(toy_arch(), 4).unwrap();
        let img = p.predict_image(7, 5, 3.0).unwrap();
        let coords = grid_coords(7, 5, 0..7, p.ranges().normalize_angle(3.0)).unwrap();
        let direct = p.forward(&positional_encode(&coords, 1).unwrap()).unwrap();
        assert_eq!(img.data(), direct.o.data());
    }

    #[test]
    fn weight_bytes_round_trip_and_size() {
        let arch = Architecture::default();
        let p = init_params::<f32>(arch, 11).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), weight_file_size(&arch));
        assert_eq!(bytes.len(), 48 + 4 * 493_313 + 4);
        let q = ModelParams::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_weight_files_rejected() {
        let p = init_params::<f32>(toy_arch(), 11).unwrap();
        let bytes = p.to_bytes();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(ModelParams::<f32>::from_bytes(&bad_magic), Err(Error::Format { .. })));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(ModelParams::<f32>::from_bytes(&bad_version), Err(Error::Format { offset: 4, .. })));

        let truncated = &bytes[..bytes.len() - 10];
        assert!(ModelParams::<f32>::from_bytes(truncated).is_err());

        let mut flipped = bytes.clone();
        flipped[100] ^= 0x10;
        assert!(matches!(ModelParams::<f32>::from_bytes(&flipped), Err(Error::Format { .. })));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pwin");
        let p = init_params::<f32>(toy_arch(), 6).unwrap();
        let n = p.save_weights(&path).unwrap();
        assert_eq!(n as u64, std::fs::metadata(&path).unwrap().len());
        assert_eq!(ModelParams::<f32>::load_weights(&path).unwrap(), p);
    }
}
