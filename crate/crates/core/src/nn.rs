//! Dense feed-forward networks built on the tape.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::{self, TAG_DROPOUT, TAG_INIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
    Softmax,
}

/// Input layout. Grid inputs are flattened row-major; the grid only matters to
/// priors that look at spatial structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub enum InputShape {
    Flat(usize),
    Grid(usize, usize),
}

impl InputShape {
    pub fn len(self) -> usize {
        match self {
            InputShape::Flat(p) => p,
            InputShape::Grid(h, w) => h * w,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn grid(self) -> Option<(usize, usize)> {
        match self {
            InputShape::Grid(h, w) => Some((h, w)),
            InputShape::Flat(_) => None,
        }
    }
}

impl From<Vec<usize>> for InputShape {
    fn from(v: Vec<usize>) -> Self {
        match v.as_slice() {
            [h, w] => InputShape::Grid(*h, *w),
            [p] => InputShape::Flat(*p),
            _ => InputShape::Flat(v.iter().product()),
        }
    }
}

impl From<InputShape> for Vec<usize> {
    fn from(s: InputShape) -> Self {
        match s {
            InputShape::Flat(p) => vec![p],
            InputShape::Grid(h, w) => vec![h, w],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    /// Dropout applied to the output of each layer; the last entry must be 0.
    #[serde(default)]
    pub dropout: Vec<f64>,
}

impl ModelSpec {
    /// ReLU hidden layers followed by a single output unit.
    pub fn mlp(input: InputShape, hidden: &[usize], head: Activation) -> Self {
        let mut layers: Vec<LayerSpec> =
            hidden.iter().map(|&units| LayerSpec { units, activation: Activation::Relu }).collect();
        layers.push(LayerSpec { units: 1, activation: head });
        Self { input, layers, dropout: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<DenseLayer>,
    pub dropout: Vec<f64>,
    pub input_shape: InputShape,
}

/// Builds a model with Glorot-uniform weights and zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    if spec.layers.is_empty() {
        return Err(Error::InvalidSpec("model needs at least one layer".into()));
    }
    if spec.input.is_empty() || spec.layers.iter().any(|l| l.units == 0) {
        return Err(Error::InvalidSpec("layer sizes must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, &[TAG_INIT]);
    let mut fan_in = spec.input.len();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let limit = (6.0 / (fan_in + l.units) as f64).sqrt();
        let weights = Array2::from_shape_fn((l.units, fan_in), |_| rng.random_range(-limit..limit));
        layers.push(DenseLayer { weights, biases: Array1::zeros(l.units), activation: l.activation });
        fan_in = l.units;
    }
    let model = Model {
        dropout: if spec.dropout.is_empty() { vec![0.0; layers.len()] } else { spec.dropout.clone() },
        layers,
        input_shape: spec.input,
    };
    model.validate()?;
    Ok(model)
}

/// Parameters of a model recorded as tape leaves.
pub struct Params<'t> {
    pub weights: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
}

impl<'t> Params<'t> {
    /// Weights then biases, layer by layer.
    pub fn all(&self) -> Vec<Var<'t>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b]).collect()
    }
}

/// Pre-activation and activation of the final layer.
#[derive(Clone, Copy)]
pub struct Output<'t> {
    pub logits: Var<'t>,
    pub out: Var<'t>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSpec {
    Mse,
    BinaryCrossEntropy,
    SoftmaxCrossEntropy,
}

fn apply_activation<'t>(z: Var<'t>, act: Activation) -> Var<'t> {
    match act {
        Activation::Relu => z.relu(),
        Activation::Sigmoid => z.sigmoid(),
        Activation::Tanh => z.tanh(),
        Activation::Identity => z,
        Activation::Softmax => {
            // Shift by the row max; softmax is invariant to it.
            let v = z.value();
            let m = z.shape().1;
            let shift = v.map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
            let shift = z.tape().leaf(shift.insert_axis(Axis(1))).broadcast_cols(m);
            let e = (z - shift).exp();
            e / e.sum_cols().broadcast_cols(m)
        }
    }
}

fn activate_values(z: &mut Array2<f64>, act: Activation) {
    match act {
        Activation::Relu => z.mapv_inplace(|x| if x > 0.0 { x } else { 0.0 }),
        Activation::Sigmoid => z.mapv_inplace(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }),
        Activation::Tanh => z.mapv_inplace(f64::tanh),
        Activation::Identity => {}
        Activation::Softmax => {
            for mut row in z.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|x| (x - m).exp());
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
        }
    }
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("model has no layers".into()));
        }
        let mut fan_in = self.input_shape.len();
        for (i, l) in self.layers.iter().enumerate() {
            if l.fan_in() != fan_in || l.biases.len() != l.fan_out() {
                return Err(Error::InvalidSpec(format!(
                    "layer {i}: weights {:?} and {} biases do not chain from width {fan_in}",
                    l.weights.dim(),
                    l.biases.len()
                )));
            }
            if l.activation == Activation::Softmax && i + 1 != self.layers.len() {
                return Err(Error::InvalidSpec("softmax is only allowed on the last layer".into()));
            }
            fan_in = l.fan_out();
        }
        if self.dropout.len() != self.layers.len() {
            return Err(Error::InvalidSpec(format!(
                "{} dropout rates for {} layers",
                self.dropout.len(),
                self.layers.len()
            )));
        }
        if self.dropout.iter().any(|&r| !(0.0..1.0).contains(&r)) {
            return Err(Error::InvalidSpec("dropout rates must lie in [0, 1)".into()));
        }
        if *self.dropout.last().unwrap() != 0.0 {
            return Err(Error::InvalidSpec("output layer cannot use dropout".into()));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.input_shape.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn head(&self) -> Activation {
        self.layers.last().expect("validated model has layers").activation
    }

    /// Records the parameters as leaves on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Params<'t> {
        let weights = self.layers.iter().map(|l| tape.leaf(l.weights.clone())).collect();
        let biases = self
            .layers
            .iter()
            .map(|l| tape.leaf(l.biases.clone().insert_axis(Axis(0))))
            .collect();
        Params { weights, biases }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.n_features() {
            return Err(shape_err(format!("input has {cols} features, model expects {}", self.n_features())));
        }
        Ok(())
    }

    /// Forward pass on the tape. `dropout_seed = Some(s)` switches to train
    /// mode with inverted-dropout masks drawn from `s`; `None` is eval mode.
    pub fn forward<'t>(&self, params: &Params<'t>, x: Var<'t>, dropout_seed: Option<u64>) -> Result<Output<'t>> {
        self.check_input(x.shape().1)?;
        let n = x.shape().0;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.matmul(params.weights[i].t()).add_row(params.biases[i]);
            if i == last {
                return Ok(Output { logits: z, out: apply_activation(z, layer.activation) });
            }
            h = apply_activation(z, layer.activation);
            let rate = self.dropout[i];
            if let (Some(seed), true) = (dropout_seed, rate > 0.0) {
                let keep = 1.0 - rate;
                let mut r = rng::stream(seed, &[TAG_DROPOUT, i as u64]);
                let mask = Array2::from_shape_fn((n, layer.fan_out()), |_| {
                    if r.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                h = h.mul_const(Arc::new(mask));
            }
        }
        unreachable!("loop returns at the last layer")
    }

    /// Eval-mode forward pass without a tape.
    pub fn predict_values(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weights.t());
            z += &layer.biases.view().insert_axis(Axis(0));
            activate_values(&mut z, layer.activation);
            h = z;
        }
        Ok(h)
    }

    /// Single-output convenience: one prediction per row.
    pub fn predict_column(&self, x: ArrayView2<'_, f64>, output: usize) -> Result<Array1<f64>> {
        Ok(self.predict_values(x)?.column(output).to_owned())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Model> {
        let doc: ModelJson = serde_json::from_str(s)?;
        doc.try_into()
    }
}

/// Train/eval forward pass producing per-sample outputs on the tape.
pub fn predict<'t>(
    model: &Model,
    params: &Params<'t>,
    x: Var<'t>,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<Var<'t>> {
    Ok(model.forward(params, x, train_mode.then_some(dropout_seed))?.out)
}

impl LossSpec {
    pub fn check_head(self, model: &Model) -> Result<()> {
        match self {
            LossSpec::Mse => Ok(()),
            LossSpec::BinaryCrossEntropy if model.n_outputs() == 1 && model.head() == Activation::Sigmoid => {
                Ok(())
            }
            LossSpec::SoftmaxCrossEntropy if model.head() == Activation::Softmax => Ok(()),
            _ => Err(Error::InvalidSpec(format!("{self:?} is incompatible with a {:?} head", model.head()))),
        }
    }
}

/// Per-sample losses as an `n × 1` column.
pub fn per_sample_loss<'t>(out: &Output<'t>, y: &Array1<f64>, spec: LossSpec) -> Result<Var<'t>> {
    let tape = out.out.tape();
    let (n, o) = out.out.shape();
    if y.len() != n {
        return Err(shape_err(format!("{} labels for {n} predictions", y.len())));
    }
    match spec {
        LossSpec::Mse => {
            if o != 1 {
                return Err(shape_err("mse expects a single output"));
            }
            let target = tape.leaf(y.clone().insert_axis(Axis(1)));
            Ok((out.out - target).square())
        }
        LossSpec::BinaryCrossEntropy => {
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Label("binary cross-entropy needs labels in {0, 1}".into()));
            }
            // max(z, 0) - z·y + log(1 + exp(-|z|)), computed from the logit.
            let z = out.logits;
            let target = Arc::new(y.clone().insert_axis(Axis(1)));
            Ok(z.relu() - z.mul_const(target) + ((-z.abs()).exp() + 1.0).ln())
        }
        LossSpec::SoftmaxCrossEntropy => {
            let mut onehot = Array2::<f64>::zeros((n, o));
            for (i, &c) in y.iter().enumerate() {
                if c < 0.0 || c.fract() != 0.0 || c as usize >= o {
                    return Err(Error::Label(format!("class label {c} outside 0..{o}")));
                }
                onehot[[i, c as usize]] = 1.0;
            }
            let z = out.logits;
            let v = z.value();
            let shift = v.map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
            let shift = tape.leaf(shift.insert_axis(Axis(1))).broadcast_cols(o);
            let zs = z - shift;
            let lse = zs.exp().sum_cols().ln();
            Ok(lse - zs.mul_const(Arc::new(onehot)).sum_cols())
        }
    }
}

/// Mean loss over samples.
pub fn loss<'t>(out: &Output<'t>, y: &Array1<f64>, spec: LossSpec) -> Result<Var<'t>> {
    Ok(per_sample_loss(out, y, spec)?.mean())
}

/// Loss of a model on a dataset evaluated without recording gradients.
pub fn loss_value(model: &Model, x: ArrayView2<'_, f64>, y: &Array1<f64>, spec: LossSpec) -> Result<f64> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let xv = tape.leaf(x.to_owned());
    let out = model.forward(&params, xv, None)?;
    let l = loss(&out, y, spec)?;
    tape.check_finite()?;
    Ok(l.item())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerJson {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelJson {
    layers: Vec<LayerJson>,
    input_shape: InputShape,
    dropout: Vec<f64>,
}

impl From<&Model> for ModelJson {
    fn from(m: &Model) -> Self {
        ModelJson {
            layers: m
                .layers
                .iter()
                .map(|l| LayerJson {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.iter().copied().collect(),
                    biases: l.biases.to_vec(),
                    activation: l.activation,
                })
                .collect(),
            input_shape: m.input_shape,
            dropout: m.dropout.clone(),
        }
    }
}

impl TryFrom<ModelJson> for Model {
    type Error = Error;

    fn try_from(doc: ModelJson) -> Result<Model> {
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let weights = Array2::from_shape_vec((l.rows, l.cols), l.weights)
                    .map_err(|e| Error::Format(format!("layer weights: {e}")))?;
                Ok(DenseLayer { weights, biases: Array1::from(l.biases), activation: l.activation })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Model { layers, dropout: doc.dropout, input_shape: doc.input_shape };
        model.validate()?;
        Ok(model)
    }
}
