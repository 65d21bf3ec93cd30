//! Reference mixtures shipped with the experiments.
//!
//! The geometries are representative choices, not reconstructions of any
//! published figure.

use crate::error::Result;
use crate::metrics::GridSpec;
use crate::mixture::{GaussianMixture, MixtureSplit};

/// Three equal 1D modes at -6, 0 and +6 with variance 0.25; the leftmost is forbidden.
pub fn three_mode_1d() -> Result<MixtureSplit> {
    let full = GaussianMixture::new(
        vec![1.0 / 3.0; 3],
        vec![vec![-6.0], vec![0.0], vec![6.0]],
        vec![0.25; 3],
    )?;
    MixtureSplit::new(full, &[0])
}

/// Ten equal 1D modes at -18, -14, ..., +18 with variance 0.25; mode 0 is forbidden.
pub fn ten_mode_1d() -> Result<MixtureSplit> {
    let full = GaussianMixture::new(
        vec![0.1; 10],
        (0..10).map(|i| vec![-18.0 + 4.0 * i as f64]).collect(),
        vec![0.25; 10],
    )?;
    MixtureSplit::new(full, &[0])
}

/// Three memorized 2D points: two allowed at (-2, 2) and (2, 2) above one
/// forbidden at (0, -2). Zero variance at t = 0.
pub fn three_point_2d() -> Result<MixtureSplit> {
    let full = GaussianMixture::new(
        vec![1.0 / 3.0; 3],
        vec![vec![-2.0, 2.0], vec![2.0, 2.0], vec![0.0, -2.0]],
        vec![0.0; 3],
    )?;
    MixtureSplit::new(full, &[2])
}

/// Default grid for the 2D fields.
pub fn three_point_grid() -> GridSpec {
    GridSpec {
        x_range: (-4.0, 4.0),
        y_range: (-4.0, 4.0),
        nx: 41,
        ny: 41,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        let a = three_mode_1d().unwrap();
        assert!((a.prior() - 1.0 / 3.0).abs() < 1e-15);
        let b = ten_mode_1d().unwrap();
        assert!((b.prior() - 0.1).abs() < 1e-15);
        assert_eq!(b.full().means()[9], vec![18.0]);
        let c = three_point_2d().unwrap();
        assert_eq!(c.dim(), 2);
        assert_eq!(c.allowed().n_modes(), 2);
    }
}
