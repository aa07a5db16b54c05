//! Piecewise-constant coefficient fields (one value per fine triangle).

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::FineGrid;
use crate::io::{BinReader, BinWriter};
use crate::scalar::Scalar;

const FIELD_MAGIC: &[u8; 4] = b"PEXF";

/// Closed axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect<T> {
    pub x0: T,
    pub x1: T,
    pub y0: T,
    pub y1: T,
}

impl<T: Scalar> Rect<T> {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self {
            x0: T::lit(x0),
            x1: T::lit(x1),
            y0: T::lit(y0),
            y1: T::lit(y1),
        }
    }

    pub fn contains(&self, p: [T; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    pub fn area(&self) -> T {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Area of the intersection with the unit square.
    pub fn clipped_area(&self) -> T {
        let w = (self.x1.min(T::one()) - self.x0.max(T::zero())).max(T::zero());
        let h = (self.y1.min(T::one()) - self.y0.max(T::zero())).max(T::zero());
        w * h
    }
}

/// Strictly positive value per fine triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarCellField<T> {
    values: Vec<T>,
}

impl<T: Scalar> ScalarCellField<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("field value at triangle {i}")));
            }
            if *v <= T::zero() {
                return Err(Error::invalid(format!("nonpositive field value {v} at triangle {i}")));
            }
        }
        Ok(Self { values })
    }

    pub fn constant(grid: &FineGrid<T>, value: T) -> Result<Self> {
        Self::new(vec![value; grid.tri_count()])
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Pointwise scaling, e.g. `kappa * H^-2`.
    pub fn scaled(&self, factor: T) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| v * factor).collect())
    }

    /// Pointwise product with per-triangle weights.
    pub fn weighted(&self, weights: &[T]) -> Result<Self> {
        if weights.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                context: "field weighting",
                expected: self.values.len(),
                actual: weights.len(),
            });
        }
        Self::new(self.values.iter().zip(weights).map(|(&v, &w)| v * w).collect())
    }

    /// Checks that the field matches the triangle count of `grid`.
    pub fn check_grid(&self, grid: &FineGrid<T>) -> Result<()> {
        if self.values.len() != grid.tri_count() {
            return Err(Error::DimensionMismatch {
                context: "field vs grid triangles",
                expected: grid.tri_count(),
                actual: self.values.len(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::create(path, FIELD_MAGIC)?;
        w.u64(self.values.len())?;
        w.reals(self.values.iter().copied())?;
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path, FIELD_MAGIC)?;
        let count = r.u64()?;
        if count.checked_mul(8) != Some(r.remaining()) {
            return Err(r.malformed(format!(
                "count mismatch: header declares {count} values, payload holds {} bytes",
                r.remaining()
            )));
        }
        let values = r.reals(count)?;
        Self::new(values).map_err(|e| r.malformed(e.to_string()))
    }

    /// Loads a field and checks it against `grid`.
    pub fn load_for(path: &Path, grid: &FineGrid<T>) -> Result<Self> {
        let field = Self::load(path)?;
        field.check_grid(grid).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(field)
    }
}

/// `background` everywhere, `background * contrast` on triangles whose centroid
/// lies in one of the channels.
pub fn generate_channel_field<T: Scalar>(
    grid: &FineGrid<T>,
    background: T,
    contrast: T,
    channels: &[Rect<T>],
) -> Result<ScalarCellField<T>> {
    if background <= T::zero() || contrast <= T::zero() {
        return Err(Error::invalid("background and contrast must be positive"));
    }
    for c in channels {
        let inside = |v: T| v >= T::zero() && v <= T::one();
        if !(inside(c.x0) && inside(c.x1) && inside(c.y0) && inside(c.y1)) || c.x0 > c.x1 || c.y0 > c.y1 {
            return Err(Error::invalid(format!("channel {c:?} is not inside the unit square")));
        }
    }
    let high = background * contrast;
    let values = (0..grid.tri_count())
        .map(|t| {
            let p = grid.centroid(t);
            if channels.iter().any(|c| c.contains(p)) {
                high
            } else {
                background
            }
        })
        .collect();
    ScalarCellField::new(values)
}

/// Fixed layout of thin horizontal and vertical channels used by the experiments.
pub fn default_channels<T: Scalar>() -> Vec<Rect<T>> {
    [
        // horizontal
        (0.05, 0.95, 0.14, 0.17),
        (0.0, 0.7, 0.34, 0.37),
        (0.3, 1.0, 0.64, 0.67),
        (0.1, 0.85, 0.84, 0.87),
        // vertical
        (0.44, 0.47, 0.05, 0.55),
        (0.74, 0.77, 0.2, 0.95),
        (0.14, 0.17, 0.45, 1.0),
    ]
    .into_iter()
    .map(|(x0, x1, y0, y1)| Rect::new(x0, x1, y0, y1))
    .collect()
}

/// Seeded random axis-aligned channels of the given thickness.
pub fn random_channels<T: Scalar>(count: usize, thickness: f64, seed: u64) -> Vec<Rect<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let start: f64 = rng.random_range(0.0..0.5);
            let len: f64 = rng.random_range(0.3..(1.0 - start));
            let across: f64 = rng.random_range(0.0..(1.0 - thickness));
            if rng.random_bool(0.5) {
                Rect::new(start, start + len, across, across + thickness)
            } else {
                Rect::new(across, across + thickness, start, start + len)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_channels_is_constant() {
        let g = FineGrid::<f64>::new(10).unwrap();
        let f = generate_channel_field(&g, 2.0, 1e4, &[]).unwrap();
        assert!(f.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn channel_covers_centroid() {
        let g = FineGrid::<f64>::new(10).unwrap();
        let c = g.centroid(0);
        let ch = Rect::new(c[0] - 0.01, c[0] + 0.01, c[1] - 0.01, c[1] + 0.01);
        let f = generate_channel_field(&g, 1.0, 1e4, &[ch]).unwrap();
        assert_eq!(f.values()[0], 1e4);
        assert_eq!(f.values()[1], 1.0);
        let full = generate_channel_field(&g, 3.0, 10.0, &[Rect::new(0.0, 1.0, 0.0, 1.0)]).unwrap();
        assert!(full.values().iter().all(|&v| v == 30.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = FineGrid::<f64>::new(4).unwrap();
        assert!(generate_channel_field(&g, 0.0, 1.0, &[]).is_err());
        assert!(generate_channel_field(&g, 1.0, -1.0, &[]).is_err());
        assert!(generate_channel_field(&g, 1.0, 2.0, &[Rect::new(0.5, 1.5, 0.0, 1.0)]).is_err());
        assert!(ScalarCellField::new(vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn default_field_has_two_values() {
        let g = FineGrid::<f64>::new(40).unwrap();
        let f = generate_channel_field(&g, 1.0, 1e4, &default_channels()).unwrap();
        let high = f.values().iter().filter(|&&v| v == 1e4).count();
        assert!(high > 0 && high < g.tri_count());
        assert!(f.values().iter().all(|&v| v == 1.0 || v == 1e4));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.pexf");
        let f = ScalarCellField::new(vec![1.0, 0.1 + 0.2, 1e-300, 7e4]).unwrap();
        f.save(&path).unwrap();
        assert_eq!(ScalarCellField::<f64>::load(&path).unwrap(), f);
    }

    #[test]
    fn load_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let g = FineGrid::<f64>::new(100).unwrap();
        let empty = dir.path().join("empty.pexf");
        ScalarCellField::<f64> { values: vec![] }.save(&empty).unwrap();
        assert!(ScalarCellField::load_for(&empty, &g).is_err());

        let neg = dir.path().join("neg.pexf");
        ScalarCellField::<f64> { values: vec![1.0, -1.0] }.save(&neg).unwrap();
        let err = ScalarCellField::<f64>::load(&neg).unwrap_err();
        assert!(err.to_string().contains("nonpositive"));

        let bad = dir.path().join("bad.pexf");
        std::fs::write(&bad, b"PEXX\x01\0\0\0").unwrap();
        assert!(ScalarCellField::<f64>::load(&bad).is_err());

        let short = dir.path().join("short.pexf");
        let mut bytes = b"PEXF".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(3u64.to_le_bytes());
        bytes.extend(1.0f64.to_le_bytes());
        std::fs::write(&short, bytes).unwrap();
        assert!(ScalarCellField::<f64>::load(&short).is_err());
    }

    #[test]
    fn random_channels_are_seeded_and_inside() {
        let a = random_channels::<f64>(5, 0.03, 7);
        assert_eq!(a, random_channels::<f64>(5, 0.03, 7));
        let g = FineGrid::<f64>::new(20).unwrap();
        assert!(generate_channel_field(&g, 1.0, 100.0, &a).is_ok());
    }
}
