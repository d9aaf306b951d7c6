//! Small feedforward embedding network with unit-norm output.
//!
//! Parameters are enumerated in a fixed order (per layer: weight matrix
//! row-major, then bias), which defines the flat gradient vector layout and
//! the checkpoint format. All arithmetic is in `f64`; gradient checks demand
//! it.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

const NORM_EPS: f64 = 1e-12;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation value `a = act(z)`.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Tanh => write!(f, "tanh"),
            Activation::Relu => write!(f, "relu"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `(out, in)` weight matrix.
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// Feedforward network producing L2-normalized embeddings.
///
/// All layers but the last apply the hidden activation; the last layer is
/// linear and its output is normalized to the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Flat gradient vector aligned with [`EmbeddingModel`] parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Array1<f64>);

impl ParamGrads {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl EmbeddingModel {
    /// Builds a model with Xavier-uniform weights and zero biases.
    /// `dims` lists layer widths input-first, e.g. `[M, 32, m]`.
    pub fn new(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config(
                "model needs at least an input and an output dimension",
            ));
        }
        if dims.contains(&0) {
            return Err(Error::config("layer dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-limit..limit));
            layers.push(Layer {
                weight,
                bias: Array1::zeros(fan_out),
            });
        }
        Ok(Self { layers, activation })
    }

    /// Default desk-scale architecture: input -> 32 hidden -> `embed_dim`.
    pub fn with_default_arch(input_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        Self::new(&[input_dim, 32, embed_dim], Activation::Tanh, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Layer widths input-first, e.g. `[M, 32, m]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.nrows()));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in enumeration order (per layer: weight row-major, bias).
    pub fn params_flat(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        Array1::from_vec(out)
    }

    pub fn set_params_flat(&mut self, params: ArrayView1<'_, f64>) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::contract(format!(
                "parameter vector has length {}, model expects {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Maps one input to its unit-norm embedding.
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let batch = x.insert_axis(Axis(0));
        let out = self.forward_batch(batch)?;
        Ok(out.row(0).to_owned())
    }

    /// Maps a batch (rows are samples) to unit-norm embeddings.
    pub fn forward_batch(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let cache = self.forward_cached(xs)?;
        Ok(cache.embeddings)
    }

    fn check_input(&self, xs: ArrayView2<'_, f64>) -> Result<()> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::contract(format!(
                "input dimension {} does not match model input {}",
                xs.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, xs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(xs)?;
        let mut activations: Vec<Array2<f64>> = vec![xs.to_owned()];
        for (li, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().unwrap();
            let mut z = prev.dot(&layer.weight.t());
            z += &layer.bias;
            if li + 1 < self.layers.len() {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            activations.push(z);
        }
        let raw = activations.last().unwrap().clone();
        let mut embeddings = raw.clone();
        let mut norms = Array1::zeros(raw.nrows());
        for (i, mut row) in embeddings.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            norms[i] = norm;
            let scale = norm.max(NORM_EPS);
            row.mapv_inplace(|v| v / scale);
        }
        Ok(ForwardCache {
            activations,
            norms,
            embeddings,
        })
    }

    /// Exact gradient of a scalar loss with respect to every parameter,
    /// given the loss gradient with respect to each output embedding.
    pub fn backward(
        &self,
        batch: ArrayView2<'_, f64>,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<ParamGrads> {
        let cache = self.forward_cached(batch)?;
        self.backward_cached(&cache, upstream)
    }

    fn backward_cached(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<ParamGrads> {
        let n = cache.embeddings.nrows();
        let m = self.embedding_dim();
        if upstream.nrows() != n || upstream.ncols() != m {
            return Err(Error::contract(format!(
                "upstream gradient shape ({}, {}) does not match batch embeddings ({n}, {m})",
                upstream.nrows(),
                upstream.ncols()
            )));
        }

        // through the normalization: dv = (u - (u . e) e) / ||v||
        let mut delta = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            let norm = cache.norms[i];
            if norm <= NORM_EPS {
                return Err(Error::numeric(format!(
                    "sample {i} has a zero pre-normalization embedding"
                )));
            }
            let e = cache.embeddings.row(i);
            let u = upstream.row(i);
            let proj = u.dot(&e);
            for j in 0..m {
                delta[(i, j)] = (u[j] - proj * e[j]) / norm;
            }
        }

        let mut grads = vec![0.0; self.param_count()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.weight.len() + layer.bias.len();
        }

        // walk layers backwards; cache.activations[l] feeds layer l
        let mut d_z = delta;
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.activations[li];
            let grad_w = d_z.t().dot(input);
            let grad_b = d_z.sum_axis(Axis(0));
            let base = offsets[li];
            for (k, g) in grad_w.iter().enumerate() {
                grads[base + k] = *g;
            }
            let bias_base = base + layer.weight.len();
            for (k, g) in grad_b.iter().enumerate() {
                grads[bias_base + k] = *g;
            }
            if li > 0 {
                let mut d_h = d_z.dot(&layer.weight);
                let h = &cache.activations[li];
                d_h.zip_mut_with(h, |d, &a| *d *= self.activation.derivative(a));
                d_z = d_h;
            }
        }

        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("non-finite parameter gradient"));
        }
        Ok(ParamGrads(Array1::from_vec(grads)))
    }

    /// Plain gradient step `theta <- theta - lr * grads`.
    /// Refuses non-finite gradients without touching the parameters.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::contract(format!(
                "learning rate must be nonnegative, got {lr}"
            )));
        }
        if grads.len() != self.param_count() {
            return Err(Error::contract(format!(
                "gradient vector has length {}, model expects {}",
                grads.len(),
                self.param_count()
            )));
        }
        if grads.0.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("refusing step on non-finite gradients"));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut() {
                *w -= lr * grads.0[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b -= lr * grads.0[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Writes the checkpoint format documented in the README: a text header
    /// (`bspml-model v1`, activation, dims) followed by one parameter per
    /// line in enumeration order, printed with 17 significant digits so the
    /// round trip is exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bspml-model v1\n");
        let _ = writeln!(out, "activation {}", self.activation);
        let dims: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "dims {}", dims.join(" "));
        for p in self.params_flat().iter() {
            let _ = writeln!(out, "{p:.17e}");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some("bspml-model v1") => {}
            other => {
                return Err(Error::ingest(format!(
                    "line 1: expected `bspml-model v1`, got `{}`",
                    other.unwrap_or("")
                )))
            }
        }
        let activation: Activation = lines
            .next()
            .and_then(|l| l.strip_prefix("activation "))
            .ok_or_else(|| Error::ingest("line 2: expected `activation <name>`"))?
            .parse()?;
        let dims: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("dims "))
            .ok_or_else(|| Error::ingest("line 3: expected `dims d0 d1 ...`"))?
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::ingest(format!("line 3: bad dimension `{t}`")))
            })
            .collect::<Result<_>>()?;
        let mut model = EmbeddingModel::new(&dims, activation, 0)?;
        let mut params = Vec::with_capacity(model.param_count());
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|_| Error::ingest(format!("line {}: bad parameter `{line}`", i + 4)))?;
            params.push(v);
        }
        if params.len() != model.param_count() {
            return Err(Error::ingest(format!(
                "checkpoint holds {} parameters, dims imply {}",
                params.len(),
                model.param_count()
            )));
        }
        model.set_params_flat(Array1::from_vec(params).view())?;
        Ok(model)
    }
}

struct ForwardCache {
    /// `activations[0]` is the input batch; `activations[l+1]` is layer l's
    /// output (post-activation for hidden layers, raw for the last).
    activations: Vec<Array2<f64>>,
    /// Pre-normalization L2 norm per sample.
    norms: Array1<f64>,
    embeddings: Array2<f64>,
}

/// Dot-product similarity of two unit-norm embeddings.
pub fn similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}
