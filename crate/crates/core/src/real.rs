use ndarray::NdFloat;

/// Floating point element type used by rasters and the convolutional path.
///
/// Production code runs in `f32`; the `f64` instantiation exists for
/// finite-difference gradient checks.
pub trait Real: NdFloat + Default {
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
