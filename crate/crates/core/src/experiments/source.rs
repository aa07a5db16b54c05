//! Parametrized well-type sources of the three experiments.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::field::Rect;
use crate::grid::FineGrid;
use crate::integrators::{Forcing, LoadShapes};
use crate::scalar::Scalar;

const AMPLITUDE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExampleId {
    /// Linear, two wells, four parameters.
    One,
    /// Linear, five wells, ten parameters.
    Two,
    /// Nonlinear coefficient `kappa e^u`, sources of example two.
    Three,
}

impl ExampleId {
    pub fn from_number(id: u32) -> Result<Self> {
        match id {
            1 => Ok(ExampleId::One),
            2 => Ok(ExampleId::Two),
            3 => Ok(ExampleId::Three),
            _ => Err(Error::Config(format!("unknown example id {id}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            ExampleId::One => 1,
            ExampleId::Two => 2,
            ExampleId::Three => 3,
        }
    }

    pub fn parameter_count(self) -> usize {
        match self {
            ExampleId::One => 4,
            _ => 10,
        }
    }

    /// `[L, U]` for every parameter.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ExampleId::One => (1.0, 10.0),
            _ => (1.0, 20.0),
        }
    }

    pub fn is_nonlinear(self) -> bool {
        self == ExampleId::Three
    }

    /// Final time and step count of the published runs.
    pub fn default_time(self) -> (f64, usize) {
        match self {
            ExampleId::Three => (0.001, 40),
            _ => (0.01, 100),
        }
    }

    pub fn wells(self) -> Vec<Well> {
        use Wave::{Cos, Sin};
        let sq = |a: f64, b: f64, c: f64, d: f64| Rect::new(a, b, c, d);
        match self {
            ExampleId::One => vec![
                Well::new(sq(0.2, 0.3, 0.2, 0.3), [(0, Sin, 2.0), (1, Sin, 5.2)]),
                Well::new(sq(0.8, 0.9, 0.8, 0.9), [(2, Sin, 2.4), (3, Sin, 4.0)]),
            ],
            _ => vec![
                Well::new(sq(0.2, 0.3, 0.2, 0.3), [(0, Sin, 1.0), (1, Cos, 3.2)]),
                Well::new(sq(0.8, 0.9, 0.8, 0.9), [(2, Sin, 2.2), (3, Sin, 1.6)]),
                Well::new(sq(0.2, 0.3, 0.8, 0.9), [(4, Cos, 3.0), (5, Cos, 4.6)]),
                Well::new(sq(0.8, 0.9, 0.2, 0.3), [(6, Cos, 1.4), (7, Sin, 5.0)]),
                Well::new(sq(0.5, 0.6, 0.5, 0.6), [(8, Sin, 2.8), (9, Sin, 4.0)]),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wave {
    Sin,
    Cos,
}

/// Rectangle carrying `100 * sum_j w_{p_j} wave_j(c_j pi t / T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Well {
    pub rect: Rect<f64>,
    pub terms: [(usize, Wave, f64); 2],
}

impl Well {
    fn new(rect: Rect<f64>, terms: [(usize, Wave, f64); 2]) -> Self {
        Self { rect, terms }
    }

    fn amplitude(&self, w: &[f64], t: f64, t_final: f64) -> f64 {
        AMPLITUDE
            * self
                .terms
                .iter()
                .map(|&(p, wave, c)| {
                    let arg = c * PI * t / t_final;
                    w[p] * match wave {
                        Wave::Sin => arg.sin(),
                        Wave::Cos => arg.cos(),
                    }
                })
                .sum::<f64>()
    }
}

/// One parameter vector of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub example: ExampleId,
    pub w: Vec<f64>,
    pub t_final: f64,
    wells: Vec<Well>,
}

impl SourceSpec {
    pub fn new(example: ExampleId, w: Vec<f64>, t_final: f64) -> Result<Self> {
        if w.len() != example.parameter_count() {
            return Err(Error::DimensionMismatch {
                context: "source parameters",
                expected: example.parameter_count(),
                actual: w.len(),
            });
        }
        if !(t_final > 0.0) {
            return Err(Error::invalid("final time must be positive"));
        }
        Ok(Self {
            example,
            w,
            t_final,
            wells: example.wells(),
        })
    }

    pub fn wells(&self) -> &[Well] {
        &self.wells
    }

    /// Whether every parameter lies in the example's bounds.
    pub fn in_bounds(&self) -> bool {
        let (l, u) = self.example.bounds();
        self.w.iter().all(|v| (l..=u).contains(v))
    }

    /// Per-well amplitudes at time `t`.
    pub fn well_amplitudes(&self, t: f64) -> Vec<f64> {
        self.wells.iter().map(|well| well.amplitude(&self.w, t, self.t_final)).collect()
    }

    /// `g_w(x, y, t)`; on shared edges of overlapping wells the amplitudes add.
    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        self.wells
            .iter()
            .filter(|well| well.rect.contains([x, y]))
            .map(|well| well.amplitude(&self.w, t, self.t_final))
            .sum()
    }
}

impl<T: Scalar> Forcing<T> for SourceSpec {
    fn amplitudes(&self, t: T) -> Vec<T> {
        self.well_amplitudes(t.as_f64()).into_iter().map(T::lit).collect()
    }
}

/// Fine load vectors of the well indicators of an example, in well order.
pub fn well_load_shapes<T: Scalar>(grid: &FineGrid<T>, example: ExampleId) -> LoadShapes<T> {
    LoadShapes::new(
        example
            .wells()
            .iter()
            .map(|well| {
                let rect = Rect::<T>::new(well.rect.x0, well.rect.x1, well.rect.y0, well.rect.y1);
                indicator_load(grid, &rect)
            })
            .collect(),
    )
}

/// Load vector of `sum_b a_b(t) 1_{well_b}` at time `t`.
pub fn discretize_source<T: Scalar>(spec: &SourceSpec, grid: &FineGrid<T>, t: f64) -> Result<DVector<T>> {
    let shapes = well_load_shapes(grid, spec.example);
    let amps: Vec<T> = spec.well_amplitudes(t).into_iter().map(T::lit).collect();
    shapes.combine(&amps, grid.node_count())
}

/// `int_rect phi_i` for every P1 basis function, integrated exactly by
/// clipping each triangle against the rectangle.
pub fn indicator_load<T: Scalar>(grid: &FineGrid<T>, rect: &Rect<T>) -> DVector<T> {
    let mut load = DVector::zeros(grid.node_count());
    for (t, tri) in grid.triangles().iter().enumerate() {
        let v = grid.vertices(t);
        let poly = clip_to_rect(&v, rect);
        let (area, centroid) = polygon_moments(&poly);
        if area <= T::zero() {
            continue;
        }
        // phi_i is affine, so its integral is area * phi_i(centroid)
        let bary = barycentric(&v, centroid);
        for k in 0..3 {
            load[tri[k]] += area * bary[k];
        }
    }
    load
}

/// `||g_1(t) - g_2(t)||^2_{L^2}` for two sources of the same example; wells
/// are disjoint in every example, so this is a sum over wells.
pub fn source_difference_sq(a: &SourceSpec, b: &SourceSpec, t: f64) -> Result<f64> {
    if a.example != b.example {
        return Err(Error::invalid("sources belong to different examples"));
    }
    Ok(a.wells
        .iter()
        .zip(a.well_amplitudes(t).iter().zip(b.well_amplitudes(t)))
        .map(|(well, (x, y))| well.rect.clipped_area() * (x - y) * (x - y))
        .sum())
}

fn clip_to_rect<T: Scalar>(tri: &[[T; 2]; 3], rect: &Rect<T>) -> Vec<[T; 2]> {
    let mut poly: Vec<[T; 2]> = tri.to_vec();
    // half-planes as (axis, bound, keep values >= bound)
    let planes = [(0, rect.x0, true), (0, rect.x1, false), (1, rect.y0, true), (1, rect.y1, false)];
    for (axis, bound, keep_above) in planes {
        if poly.is_empty() {
            break;
        }
        let inside = |p: &[T; 2]| if keep_above { p[axis] >= bound } else { p[axis] <= bound };
        let mut out = Vec::with_capacity(poly.len() + 2);
        for i in 0..poly.len() {
            let cur = poly[i];
            let prev = poly[(i + poly.len() - 1) % poly.len()];
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci != pi {
                let s = (bound - prev[axis]) / (cur[axis] - prev[axis]);
                let mut p = [prev[0] + s * (cur[0] - prev[0]), prev[1] + s * (cur[1] - prev[1])];
                p[axis] = bound;
                out.push(p);
            }
            if ci {
                out.push(cur);
            }
        }
        poly = out;
    }
    poly
}

/// Area and centroid of a simple polygon (shoelace).
fn polygon_moments<T: Scalar>(poly: &[[T; 2]]) -> (T, [T; 2]) {
    if poly.len() < 3 {
        return (T::zero(), [T::zero(); 2]);
    }
    let (mut a2, mut cx, mut cy) = (T::zero(), T::zero(), T::zero());
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let cross = p[0] * q[1] - q[0] * p[1];
        a2 += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    if a2.abs() <= T::zero() {
        return (T::zero(), [T::zero(); 2]);
    }
    let six_a = T::lit(3.0) * a2;
    ((a2 / T::lit(2.0)).abs(), [cx / six_a, cy / six_a])
}

fn barycentric<T: Scalar>(v: &[[T; 2]; 3], p: [T; 2]) -> [T; 3] {
    let det = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
    let l1 = ((p[0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (p[1] - v[0][1])) / det;
    let l2 = ((v[1][0] - v[0][0]) * (p[1] - v[0][1]) - (p[0] - v[0][0]) * (v[1][1] - v[0][1])) / det;
    [T::one() - l1 - l2, l1, l2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_mass;

    #[test]
    fn example_one_values() {
        let s = SourceSpec::new(ExampleId::One, vec![1.0, 0.0, 0.0, 0.0], 0.01).unwrap();
        assert_eq!(s.eval(0.5, 0.5, 0.003), 0.0);
        assert!((s.eval(0.25, 0.25, 0.0025) - 100.0).abs() < 1e-12);
        let zero = SourceSpec::new(ExampleId::Two, vec![0.0; 10], 0.01).unwrap();
        assert!(zero.well_amplitudes(0.004).iter().all(|&a| a == 0.0));
    }

    #[test]
    fn wrong_parameter_count() {
        assert!(SourceSpec::new(ExampleId::One, vec![1.0; 10], 0.01).is_err());
        assert!(ExampleId::from_number(4).is_err());
    }

    #[test]
    fn whole_domain_indicator_is_mass_row_sums() {
        let g = FineGrid::<f64>::new(5).unwrap();
        let load = indicator_load(&g, &Rect::new(0.0, 1.0, 0.0, 1.0));
        let m = assemble_mass(&g, None).unwrap();
        let rows = m.mul_vec(&DVector::from_element(g.node_count(), 1.0));
        assert!((load.clone() - rows).amax() < 1e-14);
        assert!((load.sum() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn unaligned_rectangle_integrates_its_area() {
        let g = FineGrid::<f64>::new(7).unwrap();
        let r = Rect::new(0.13, 0.71, 0.29, 0.52);
        let load = indicator_load(&g, &r);
        assert!((load.sum() - r.area()).abs() < 1e-14);
        // first moment: int x over the rectangle
        let x = g.interpolate(|x, _| x);
        let exact = 0.5 * (0.71f64.powi(2) - 0.13f64.powi(2)) * (0.52 - 0.29);
        assert!((load.dot(&x) - exact).abs() < 1e-14);
    }

    #[test]
    fn difference_norm_of_identical_sources_is_zero() {
        let a = SourceSpec::new(ExampleId::Two, (1..=10).map(f64::from).collect(), 0.01).unwrap();
        assert_eq!(source_difference_sq(&a, &a, 0.003).unwrap(), 0.0);
    }
}
