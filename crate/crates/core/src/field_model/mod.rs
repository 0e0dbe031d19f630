//! Latent-modulated sinusoidal coordinate network.
//!
//! A field is `f(p; z)`: the first layer encodes the position with
//! `sin(omega0 · W0 · p)`, each hidden layer applies
//! `sin(W · x + b + M · z)` (a shift modulation driven by the latent code)
//! and a linear head maps the last activation to `(u, v)`.
//!
//! Besides plain evaluation the network exposes its exact spatial Jacobian
//! and reverse-mode derivatives of value/Jacobian heads with respect to the
//! latent code, which is what topology guidance differentiates through.

mod train;

pub use train::LossGrads;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::diffmath::Jacobian2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SirenMeta {
    config: SirenConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirenConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub latent_dim: usize,
    pub omega0: f64,
}

impl Default for SirenConfig {
    fn default() -> Self {
        Self {
            hidden_width: 128,
            hidden_layers: 3,
            latent_dim: 64,
            omega0: 30.0,
        }
    }
}

impl SirenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.hidden_layers == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("siren dimensions must be positive"));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::invalid("omega0 must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    /// `D′ × D′`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// Modulation map `D′ × D`.
    pub modulation: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SirenWeights {
    pub config: SirenConfig,
    /// `D′ × 2`
    pub first: Array2<f64>,
    pub hidden: Vec<HiddenLayer>,
    /// `2 × D′`
    pub out_weight: Array2<f64>,
    pub out_bias: Array1<f64>,
}

/// Latent code in the network's (unnormalized) input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn zeros(dim: usize) -> Self {
        LatentCode(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for LatentCode {
    fn from(v: Vec<f64>) -> Self {
        LatentCode(v)
    }
}

/// Position in the normalized domain `[−1, 1]²`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainPoint {
    pub x: f64,
    pub y: f64,
}

impl DomainPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_domain(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.x.abs() <= 1.0 && self.y.abs() <= 1.0
    }

    pub fn distance(&self, other: &DomainPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Cell-centred samples of a vector field over `[−1, 1]²`. Row `r` runs
/// along `y`, column `c` along `x`; values are `(u, v)` interleaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorFieldGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl VectorFieldGrid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::invalid("grid must be at least 2x2"));
        }
        if values.len() != width * height * 2 {
            return Err(Error::shape(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height * 2,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid values"));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(DomainPoint) -> [f64; 2]) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height * 2);
        for r in 0..height {
            for c in 0..width {
                let [u, v] = f(cell_center(r, c, width, height));
                values.push(u);
                values.push(v);
            }
        }
        Self::new(width, height, values)
    }

    pub fn center(&self, r: usize, c: usize) -> DomainPoint {
        cell_center(r, c, self.width, self.height)
    }

    pub fn get(&self, r: usize, c: usize) -> [f64; 2] {
        let i = 2 * (r * self.width + c);
        [self.values[i], self.values[i + 1]]
    }

    /// All cell centres in row-major order as an `n × 2` array.
    pub fn centers(&self) -> Array2<f64> {
        grid_points(self.width, self.height)
    }

    /// Values as an `n × 2` array in row-major cell order.
    pub fn as_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.width * self.height, 2), self.values.clone())
            .expect("grid value length checked at construction")
    }

    pub fn norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.chunks_exact(2).map(|uv| uv[0].hypot(uv[1]))
    }
}

pub fn cell_center(r: usize, c: usize, width: usize, height: usize) -> DomainPoint {
    DomainPoint {
        x: -1.0 + (2 * c + 1) as f64 / width as f64,
        y: -1.0 + (2 * r + 1) as f64 / height as f64,
    }
}

pub fn grid_points(width: usize, height: usize) -> Array2<f64> {
    let mut pts = Array2::zeros((width * height, 2));
    for r in 0..height {
        for c in 0..width {
            let p = cell_center(r, c, width, height);
            let i = r * width + c;
            pts[[i, 0]] = p.x;
            pts[[i, 1]] = p.y;
        }
    }
    pts
}

/// Derivative of a scalar objective with respect to the network output at a
/// point (`value`) and its spatial Jacobian entries (`jacobian`, row-major).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeadGradients {
    pub value: [f64; 2],
    pub jacobian: [f64; 4],
}

/// Forward pass at one point, retaining what the latent pullback needs.
struct PointTrace {
    /// Pre-activations, index 0 is the positional layer.
    pre: Vec<Array1<f64>>,
    /// Spatial tangents of the pre-activations (`D′ × 2`).
    pre_tangent: Vec<Array2<f64>>,
    value: [f64; 2],
    jacobian: Jacobian2,
}

impl SirenWeights {
    /// Standard sinusoidal-network initialization. Modulation maps get the
    /// same fan-in scaling as a linear layer over the latent.
    pub fn init(config: SirenConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = config.hidden_width;
        let d = config.latent_dim;
        let mut uniform = |rows: usize, cols: usize, limit: f64| {
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..=limit))
        };
        let first = uniform(w, 2, 0.5);
        let hidden_limit = (6.0 / w as f64).sqrt();
        let mod_limit = (1.0 / d as f64).sqrt();
        let mut hidden = Vec::with_capacity(config.hidden_layers);
        for _ in 0..config.hidden_layers {
            hidden.push(HiddenLayer {
                weight: uniform(w, w, hidden_limit),
                bias: uniform(1, w, 1.0 / (w as f64).sqrt()).remove_axis(Axis(0)),
                modulation: uniform(w, d, mod_limit),
            });
        }
        let out_weight = uniform(2, w, hidden_limit / config.omega0);
        Ok(Self {
            config,
            first,
            hidden,
            out_weight,
            out_bias: Array1::zeros(2),
        })
    }

    /// All-zero weights of the given shape.
    pub fn zeros(config: SirenConfig) -> Self {
        let w = config.hidden_width;
        let d = config.latent_dim;
        Self {
            config,
            first: Array2::zeros((w, 2)),
            hidden: (0..config.hidden_layers)
                .map(|_| HiddenLayer {
                    weight: Array2::zeros((w, w)),
                    bias: Array1::zeros(w),
                    modulation: Array2::zeros((w, d)),
                })
                .collect(),
            out_weight: Array2::zeros((2, w)),
            out_bias: Array1::zeros(2),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Checks that every tensor has the shape the config implies and is
    /// finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let w = self.config.hidden_width;
        let d = self.config.latent_dim;
        let mut ok = self.first.dim() == (w, 2)
            && self.hidden.len() == self.config.hidden_layers
            && self.out_weight.dim() == (2, w)
            && self.out_bias.len() == 2;
        for layer in &self.hidden {
            ok &= layer.weight.dim() == (w, w)
                && layer.bias.len() == w
                && layer.modulation.dim() == (w, d);
        }
        if !ok {
            return Err(Error::shape("siren tensors do not match config"));
        }
        if self.tensors().iter().any(|(_, _, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("siren weights"));
        }
        Ok(())
    }

    /// Named views of every tensor as `(name, shape, row-major data)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = vec![(
            "first".to_string(),
            self.first.shape().to_vec(),
            self.first.as_slice().expect("standard layout"),
        )];
        for (l, layer) in self.hidden.iter().enumerate() {
            out.push((
                format!("hidden.{l}.weight"),
                layer.weight.shape().to_vec(),
                layer.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("hidden.{l}.bias"),
                layer.bias.shape().to_vec(),
                layer.bias.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("hidden.{l}.modulation"),
                layer.modulation.shape().to_vec(),
                layer.modulation.as_slice().expect("standard layout"),
            ));
        }
        out.push((
            "out.weight".to_string(),
            self.out_weight.shape().to_vec(),
            self.out_weight.as_slice().expect("standard layout"),
        ));
        out.push((
            "out.bias".to_string(),
            self.out_bias.shape().to_vec(),
            self.out_bias.as_slice().expect("standard layout"),
        ));
        out
    }

    /// Mutable flat views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.first.as_slice_mut().expect("standard layout")];
        for layer in &mut self.hidden {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
            out.push(layer.modulation.as_slice_mut().expect("standard layout"));
        }
        out.push(self.out_weight.as_slice_mut().expect("standard layout"));
        out.push(self.out_bias.as_slice_mut().expect("standard layout"));
        out
    }

    /// Forces row-major storage on every tensor; matrix products may hand
    /// back column-major results.
    pub(crate) fn make_standard_layout(&mut self) {
        fn fix<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) {
            if !a.is_standard_layout() {
                *a = a.as_standard_layout().into_owned();
            }
        }
        fix(&mut self.first);
        for layer in &mut self.hidden {
            fix(&mut layer.weight);
            fix(&mut layer.bias);
            fix(&mut layer.modulation);
        }
        fix(&mut self.out_weight);
        fix(&mut self.out_bias);
    }

    pub fn save(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        write_checkpoint(dir, stem, "siren", &SirenMeta { config: self.config }, &self.tensors())
    }

    pub fn load(dir: &std::path::Path, stem: &str) -> Result<Self> {
        let (meta, mut map) = read_checkpoint::<SirenMeta>(dir, stem, "siren")?;
        meta.config.validate()?;
        let mut w = SirenWeights::zeros(meta.config);
        let layout: Vec<(String, Vec<usize>)> =
            w.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        for ((name, shape), dst) in layout.into_iter().zip(w.tensors_mut()) {
            dst.copy_from_slice(&map.take(&name, &shape)?);
        }
        w.validate()?;
        Ok(w)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    fn check_latent(&self, z: &LatentCode) -> Result<()> {
        if z.dim() != self.config.latent_dim {
            return Err(Error::shape(format!(
                "latent has dimension {}, network expects {}",
                z.dim(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    /// Per-layer shift `b + M · z`.
    fn shifts(&self, z: &[f64]) -> Vec<Array1<f64>> {
        let z = ndarray::ArrayView1::from(z);
        self.hidden
            .iter()
            .map(|layer| &layer.bias + &layer.modulation.dot(&z))
            .collect()
    }

    pub fn evaluate(&self, z: &LatentCode, p: DomainPoint) -> Result<[f64; 2]> {
        self.check_latent(z)?;
        let shifts = self.shifts(&z.0);
        let pos = ndarray::arr1(&[p.x, p.y]);
        let mut x = (self.first.dot(&pos) * self.config.omega0).mapv_into(f64::sin);
        for (layer, shift) in self.hidden.iter().zip(&shifts) {
            x = (layer.weight.dot(&x) + shift).mapv_into(f64::sin);
        }
        let out = self.out_weight.dot(&x) + &self.out_bias;
        Ok([out[0], out[1]])
    }

    /// Evaluates the network at each row of `points` (`n × 2`), returning
    /// an `n × 2` array of `(u, v)`.
    pub fn evaluate_points(&self, z: &LatentCode, points: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_latent(z)?;
        if points.ncols() != 2 {
            return Err(Error::shape("points must be n x 2"));
        }
        let shifts = self.shifts(&z.0);
        let mut x = (points.dot(&self.first.t()) * self.config.omega0).mapv_into(f64::sin);
        for (layer, shift) in self.hidden.iter().zip(&shifts) {
            x = (x.dot(&layer.weight.t()) + shift).mapv_into(f64::sin);
        }
        Ok(x.dot(&self.out_weight.t()) + &self.out_bias)
    }

    pub fn evaluate_grid(&self, z: &LatentCode, width: usize, height: usize) -> Result<VectorFieldGrid> {
        if width < 2 || height < 2 {
            return Err(Error::invalid("grid must be at least 2x2"));
        }
        let out = self.evaluate_points(z, &grid_points(width, height))?;
        VectorFieldGrid::new(width, height, out.into_raw_vec_and_offset().0)
    }

    fn trace_point(&self, z: &LatentCode, p: DomainPoint) -> Result<PointTrace> {
        self.check_latent(z)?;
        let shifts = self.shifts(&z.0);
        let omega0 = self.config.omega0;
        let pos = ndarray::arr1(&[p.x, p.y]);

        let mut pre = Vec::with_capacity(self.hidden.len() + 1);
        let mut pre_tangent = Vec::with_capacity(self.hidden.len() + 1);

        let a0 = self.first.dot(&pos) * omega0;
        let s0 = &self.first * omega0;
        let mut x = a0.mapv(f64::sin);
        let mut t = scale_rows(&s0, &a0.mapv(f64::cos));
        pre.push(a0);
        pre_tangent.push(s0);

        for (layer, shift) in self.hidden.iter().zip(&shifts) {
            let a = layer.weight.dot(&x) + shift;
            let s = layer.weight.dot(&t);
            x = a.mapv(f64::sin);
            t = scale_rows(&s, &a.mapv(f64::cos));
            pre.push(a);
            pre_tangent.push(s);
        }
        let out = self.out_weight.dot(&x) + &self.out_bias;
        let jac = self.out_weight.dot(&t);
        Ok(PointTrace {
            pre,
            pre_tangent,
            value: [out[0], out[1]],
            jacobian: Jacobian2::new(jac[[0, 0]], jac[[0, 1]], jac[[1, 0]], jac[[1, 1]]),
        })
    }

    /// Exact `∂(u, v)/∂(x, y)` at `p`.
    pub fn spatial_jacobian(&self, z: &LatentCode, p: DomainPoint) -> Result<Jacobian2> {
        Ok(self.trace_point(z, p)?.jacobian)
    }

    pub fn value_and_jacobian(&self, z: &LatentCode, p: DomainPoint) -> Result<([f64; 2], Jacobian2)> {
        let tr = self.trace_point(z, p)?;
        Ok((tr.value, tr.jacobian))
    }

    /// Reverse-mode derivative with respect to `z` of the scalar whose
    /// gradients with respect to the output and the spatial Jacobian at `p`
    /// are `head`.
    pub fn pullback_to_latent(&self, z: &LatentCode, p: DomainPoint, head: &HeadGradients) -> Result<Vec<f64>> {
        let tr = self.trace_point(z, p)?;
        Ok(self.pullback_trace(&tr, head))
    }

    /// Like [`pullback_to_latent`](Self::pullback_to_latent) but lets the
    /// caller build the head gradients from the value and Jacobian computed
    /// in the same forward pass.
    pub fn value_jacobian_pullback<F>(&self, z: &LatentCode, p: DomainPoint, head: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce([f64; 2], Jacobian2) -> (f64, HeadGradients),
    {
        let tr = self.trace_point(z, p)?;
        let (value, g) = head(tr.value, tr.jacobian);
        Ok((value, self.pullback_trace(&tr, &g)))
    }

    fn pullback_trace(&self, tr: &PointTrace, head: &HeadGradients) -> Vec<f64> {
        let g_val = ndarray::arr1(&head.value);
        let g_jac = Array2::from_shape_vec((2, 2), head.jacobian.to_vec()).expect("2x2");
        // Adjoints of the last activation and its spatial tangent.
        let mut bar_x = self.out_weight.t().dot(&g_val);
        let mut bar_t = self.out_weight.t().dot(&g_jac);
        let mut bar_z = Array1::<f64>::zeros(self.config.latent_dim);

        for l in (1..=self.hidden.len()).rev() {
            let layer = &self.hidden[l - 1];
            let a = &tr.pre[l];
            let s = &tr.pre_tangent[l];
            let cos_a = a.mapv(f64::cos);
            let sin_a = a.mapv(f64::sin);
            let bar_s = scale_rows(&bar_t, &cos_a);
            let bar_cos = (&bar_t * s).sum_axis(Axis(1));
            let bar_a = &bar_x * &cos_a - &(&bar_cos * &sin_a);
            bar_z += &layer.modulation.t().dot(&bar_a);
            bar_x = layer.weight.t().dot(&bar_a);
            bar_t = layer.weight.t().dot(&bar_s);
        }
        bar_z.to_vec()
    }
}

/// A continuous 2D vector field with an analytic spatial Jacobian.
pub trait VectorField {
    fn value(&self, p: DomainPoint) -> [f64; 2];

    fn jacobian(&self, p: DomainPoint) -> Jacobian2;

    /// Values at each row of an `n × 2` point array.
    fn values(&self, points: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((points.nrows(), 2));
        for (i, row) in points.outer_iter().enumerate() {
            let [u, v] = self.value(DomainPoint::new(row[0], row[1]));
            out[[i, 0]] = u;
            out[[i, 1]] = v;
        }
        out
    }
}

/// The network bound to one latent code.
#[derive(Debug, Clone, Copy)]
pub struct ModulatedField<'a> {
    weights: &'a SirenWeights,
    latent: &'a LatentCode,
}

impl<'a> ModulatedField<'a> {
    pub fn new(weights: &'a SirenWeights, latent: &'a LatentCode) -> Result<Self> {
        weights.check_latent(latent)?;
        Ok(Self { weights, latent })
    }
}

impl VectorField for ModulatedField<'_> {
    fn value(&self, p: DomainPoint) -> [f64; 2] {
        self.weights.evaluate(self.latent, p).expect("latent dimension checked")
    }

    fn jacobian(&self, p: DomainPoint) -> Jacobian2 {
        self.weights.spatial_jacobian(self.latent, p).expect("latent dimension checked")
    }

    fn values(&self, points: &Array2<f64>) -> Array2<f64> {
        self.weights
            .evaluate_points(self.latent, points)
            .expect("latent dimension checked")
    }
}

/// Multiplies row `i` of `m` by `s[i]`.
pub(crate) fn scale_rows(m: &Array2<f64>, s: &Array1<f64>) -> Array2<f64> {
    m * &s.view().insert_axis(Axis(1))
}
