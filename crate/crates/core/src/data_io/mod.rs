//! Plane-wave stack container, dB conversion, image export, synthetic
//! phantoms and compression accounting.

pub(crate) mod binio;
mod compression;
mod export;
mod phantom;
mod stack;

pub use compression::{compression_report, CompressionReport, StackEncoding};
pub use export::{export_image, quantize_u16, quantize_u8, ImageFormat};
pub use phantom::{generate_phantom, Disk, PhantomSpec, Scatterer, ShadowModel, DEFAULT_PHANTOM_SPEC};
pub use stack::{PlaneWaveStack, STACK_MAGIC, STACK_VERSION};

/// `(v - min) / (max - min)` clamped to `[0, 1]`.
pub fn normalize_db(v: f64, min_db: f64, max_db: f64) -> f64 {
    ((v - min_db) / (max_db - min_db)).clamp(0.0, 1.0)
}

/// Inverse of [`normalize_db`] on `[0, 1]`.
pub fn denormalize_db(u: f64, min_db: f64, max_db: f64) -> f64 {
    min_db + u.clamp(0.0, 1.0) * (max_db - min_db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(normalize_db(-60.0, -60.0, 0.0), 0.0);
        assert_eq!(normalize_db(0.0, -60.0, 0.0), 1.0);
        assert_eq!(normalize_db(-30.0, -60.0, 0.0), 0.5);
        assert_eq!(normalize_db(-75.0, -60.0, 0.0), 0.0);
        assert_eq!(normalize_db(3.0, -60.0, 0.0), 1.0);
    }

    proptest! {
        #[test]
        fn denormalize_inverts_on_range(v in -100.0f64..40.0) {
            let back = denormalize_db(normalize_db(v, -60.0, 0.0), -60.0, 0.0);
            prop_assert!((back - v.clamp(-60.0, 0.0)).abs() < 1e-12);
        }

        #[test]
        fn normalize_is_monotone(a in -80.0f64..10.0, b in -80.0f64..10.0) {
            if a <= b {
                prop_assert!(normalize_db(a, -60.0, 0.0) <= normalize_db(b, -60.0, 0.0));
            }
        }
    }
}
