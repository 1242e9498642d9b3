use crate::data_io::PlaneWaveStack;

/// On-disk encoding assumed for the raw image stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackEncoding {
    Float32,
    Uint8,
}

impl StackEncoding {
    pub fn bytes_per_pixel(self) -> u64 {
        match self {
            Self::Float32 => 4,
            Self::Uint8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionReport {
    pub model_bytes: u64,
    pub stack_bytes: u64,
    pub ratio: f64,
}

impl CompressionReport {
    pub fn from_sizes(model_bytes: u64, stack_bytes: u64) -> Self {
        Self {
            model_bytes,
            stack_bytes,
            ratio: stack_bytes as f64 / model_bytes as f64,
        }
    }

    pub fn to_json(&self) -> String {
        format!(
            "{{\"model_bytes\": {}, \"stack_bytes\": {}, \"ratio\": {:.4}}}",
            self.model_bytes, self.stack_bytes, self.ratio
        )
    }
}

/// Raw pixel payload of `stack` under `encoding` against a weight file size.
pub fn compression_report(weight_file_bytes: u64, stack: &PlaneWaveStack, encoding: StackEncoding) -> CompressionReport {
    let pixels = (stack.angle_count() * stack.height() * stack.width()) as u64;
    CompressionReport::from_sizes(weight_file_bytes, pixels * encoding.bytes_per_pixel())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{weight_file_size, Architecture};

    #[test]
    fn published_figures() {
        let r = CompressionReport::from_sizes(530_000, 8_000_000);
        assert!((r.ratio - 15.094).abs() < 1e-3);
    }

    #[test]
    fn equal_sizes() {
        assert_eq!(CompressionReport::from_sizes(1234, 1234).ratio, 1.0);
    }

    #[test]
    fn uint8_full_frames_vs_default_model() {
        let stack = PlaneWaveStack::new(685, 588, (0..75).map(|i| i as f32).collect(), (1.0, 1.0), (-60.0, 0.0), vec![-30.0; 75 * 685 * 588], "").unwrap();
        let model = weight_file_size(&Architecture::default()) as u64;
        let r = compression_report(model, &stack, StackEncoding::Uint8);
        assert_eq!(r.stack_bytes, 30_208_500);
        assert_eq!(r.model_bytes, 1_973_304);
        assert!((r.ratio - 30_208_500.0 / 1_973_304.0).abs() < 1e-12);
        let f = compression_report(model, &stack, StackEncoding::Float32);
        assert_eq!(f.stack_bytes, 4 * 30_208_500);
    }

    #[test]
    fn json_shape() {
        let r = CompressionReport::from_sizes(2, 8);
        assert_eq!(r.to_json(), "{\"model_bytes\": 2, \"stack_bytes\": 8, \"ratio\": 4.0000}");
    }
}
