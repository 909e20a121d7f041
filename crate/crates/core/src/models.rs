//! Split model architecture: a client-specific MLP feature extractor feeding
//! a structurally shared classification header. The extractor maps inputs to
//! a `d_rep`-dimensional representation; the header is one linear layer with
//! one weight row (plus bias) per class, so the header can be taken apart and
//! exchanged class by class.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{linear_forward, relu_forward, DenseLayer, DenseNet, Matrix};

/// Architecture of one feature extractor: `input_dim -> hidden... -> d_rep`,
/// ReLU after every layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub d_rep: usize,
}

impl ExtractorSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, d_rep: usize) -> Result<Self> {
        let spec = ExtractorSpec { input_dim, hidden, d_rep };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be > 0"));
        }
        if self.hidden.is_empty() {
            return Err(Error::config("hidden", "extractor needs at least one hidden layer"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be > 0"));
        }
        if self.d_rep == 0 {
            return Err(Error::config("d_rep", "must be > 0"));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of every extractor layer, in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.d_rep));
        dims
    }

    /// Extractor parameter count (weights and biases).
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// The per-class transmissible unit: one header weight row plus its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderRow {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl HeaderRow {
    pub fn param_count(&self) -> usize {
        self.weight.len() + 1
    }
}

/// Parameter count of `n_rows` header rows at width `d_rep` (bias included).
pub fn rows_param_count(n_rows: usize, d_rep: usize) -> usize {
    n_rows * (d_rep + 1)
}

/// The homogeneous classification header: an `S x d_rep` linear layer whose
/// row `s` (with its bias) is the complete parameter block for class `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationHeader {
    weight: Matrix,
    bias: Vec<f64>,
}

impl ClassificationHeader {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dim(format!(
                "header bias length {} vs {} classes",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(ClassificationHeader { weight, bias })
    }

    pub fn zeros(num_classes: usize, d_rep: usize) -> Self {
        ClassificationHeader { weight: Matrix::zeros(num_classes, d_rep), bias: vec![0.0; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_rep(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn class_row(&self, class: usize) -> Result<HeaderRow> {
        if class >= self.num_classes() {
            return Err(Error::index(format!(
                "class {class} with only {} classes",
                self.num_classes()
            )));
        }
        Ok(HeaderRow { weight: self.weight.row(class).to_vec(), bias: self.bias[class] })
    }

    pub fn set_class_row(&mut self, class: usize, row: &HeaderRow) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::index(format!(
                "class {class} with only {} classes",
                self.num_classes()
            )));
        }
        if row.weight.len() != self.d_rep() {
            return Err(Error::dim(format!(
                "row width {} vs header d_rep {}",
                row.weight.len(),
                self.d_rep()
            )));
        }
        self.weight.row_mut(class).copy_from_slice(&row.weight);
        self.bias[class] = row.bias;
        Ok(())
    }

    /// Extracts the rows for `classes`, keyed by class.
    pub fn rows_for(&self, classes: &BTreeSet<usize>) -> Result<BTreeMap<usize, HeaderRow>> {
        classes.iter().map(|&s| Ok((s, self.class_row(s)?))).collect()
    }

    /// Parameter count with biases included: `S * (d_rep + 1)`.
    pub fn param_count(&self) -> usize {
        rows_param_count(self.num_classes(), self.d_rep())
    }

    /// Weights-only count (`S * d_rep`), the convention that excludes biases.
    pub fn weight_param_count(&self) -> usize {
        self.num_classes() * self.d_rep()
    }

    pub fn to_layer(&self) -> DenseLayer {
        DenseLayer { weight: self.weight.clone(), bias: self.bias.clone() }
    }

    pub fn into_layer(self) -> DenseLayer {
        DenseLayer { weight: self.weight, bias: self.bias }
    }

    pub fn from_layer(layer: DenseLayer) -> Self {
        ClassificationHeader { weight: layer.weight, bias: layer.bias }
    }
}

/// One client's model: heterogeneous extractor plus homogeneous header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub extractor: Vec<DenseLayer>,
    pub header: ClassificationHeader,
}

impl LocalModel {
    pub fn num_classes(&self) -> usize {
        self.header.num_classes()
    }

    pub fn d_rep(&self) -> usize {
        self.header.d_rep()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.first().map_or(self.header.d_rep(), DenseLayer::in_dim)
    }

    /// Forward pass returning the representation (the header's input, exposed
    /// for prototype-based methods) and the class logits.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut rep = x.clone();
        for layer in &self.extractor {
            let z = linear_forward(&rep, &layer.weight, &layer.bias)?;
            rep = relu_forward(&z);
        }
        let logits = linear_forward(&rep, self.header.weight(), self.header.bias())?;
        Ok((rep, logits))
    }

    /// Total parameter count (extractor plus header, biases included).
    pub fn count_params(&self) -> usize {
        let extractor: usize = self.extractor.iter().map(DenseLayer::param_count).sum();
        extractor + self.header.param_count()
    }

    /// Moves the model into a flat trainable stack; the header becomes the
    /// final layer.
    pub fn into_net(self) -> DenseNet {
        let mut layers = self.extractor;
        layers.push(self.header.into_layer());
        DenseNet { layers }
    }

    /// Inverse of [`LocalModel::into_net`].
    pub fn from_net(net: DenseNet) -> Result<Self> {
        let mut layers = net.layers;
        let header = layers
            .pop()
            .ok_or_else(|| Error::dim("net has no layers".to_string()))?;
        Ok(LocalModel { extractor: layers, header: ClassificationHeader::from_layer(header) })
    }
}

/// Builds a model from `spec` with Xavier-uniform weights and zero biases,
/// deterministically from `seed`.
pub fn build_model(spec: &ExtractorSpec, num_classes: usize, seed: u64) -> Result<LocalModel> {
    if num_classes < 2 {
        return Err(Error::config("num_classes", "need at least 2 classes"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extractor = Vec::with_capacity(spec.hidden.len() + 1);
    for (fan_in, fan_out) in spec.layer_dims() {
        extractor.push(xavier_layer(fan_in, fan_out, &mut rng));
    }
    let header_layer = xavier_layer(spec.d_rep, num_classes, &mut rng);
    Ok(LocalModel { extractor, header: ClassificationHeader::from_layer(header_layer) })
}

/// Builds just a header with Xavier-uniform rows (used for the initial
/// global header).
pub fn build_header(d_rep: usize, num_classes: usize, seed: u64) -> Result<ClassificationHeader> {
    if num_classes < 2 {
        return Err(Error::config("num_classes", "need at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ClassificationHeader::from_layer(xavier_layer(d_rep, num_classes, &mut rng)))
}

fn xavier_layer(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> DenseLayer {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in).map(|_| rng.random_range(-a..a)).collect();
    DenseLayer {
        weight: Matrix::from_vec(fan_out, fan_in, data).expect("consistent dims"),
        bias: vec![0.0; fan_out],
    }
}

/// Splits a model into extractor parameters and header (copies).
pub fn split(model: &LocalModel) -> (Vec<DenseLayer>, ClassificationHeader) {
    (model.extractor.clone(), model.header.clone())
}

/// Splices an extractor and a header back into a model, checking that the
/// extractor's output width matches the header. An empty extractor is
/// accepted (the header then reads the raw input).
pub fn splice(extractor: Vec<DenseLayer>, header: ClassificationHeader) -> Result<LocalModel> {
    if let Some(last) = extractor.last() {
        if last.out_dim() != header.d_rep() {
            return Err(Error::dim(format!(
                "extractor output width {} vs header d_rep {}",
                last.out_dim(),
                header.d_rep()
            )));
        }
    }
    Ok(LocalModel { extractor, header })
}

/// The default zoo: five structurally different extractors sharing `d_rep`
/// (so they can feed the same header) but with pairwise different parameter
/// counts.
pub fn default_zoo(input_dim: usize, d_rep: usize) -> Vec<ExtractorSpec> {
    [
        vec![128, 96],
        vec![128],
        vec![96],
        vec![80],
        vec![48],
    ]
    .into_iter()
    .map(|hidden| ExtractorSpec { input_dim, hidden, d_rep })
    .collect()
}

/// One named array inside a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Flat JSON checkpoint document: named shaped arrays. Keys are
/// `extractor.<i>.weight`, `extractor.<i>.bias`, `header.weight`,
/// `header.bias`; biases are stored as `1 x n` arrays. The f64 payload
/// round-trips losslessly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub arrays: BTreeMap<String, ArrayDoc>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &LocalModel) -> Self {
        let mut arrays = BTreeMap::new();
        for (i, layer) in model.extractor.iter().enumerate() {
            arrays.insert(format!("extractor.{i}.weight"), matrix_doc(&layer.weight));
            arrays.insert(format!("extractor.{i}.bias"), vec_doc(&layer.bias));
        }
        arrays.insert("header.weight".to_string(), matrix_doc(model.header.weight()));
        arrays.insert("header.bias".to_string(), vec_doc(model.header.bias()));
        ModelCheckpoint { arrays }
    }

    pub fn to_model(&self) -> Result<LocalModel> {
        let mut extractor = Vec::new();
        for i in 0.. {
            let (Some(w), Some(b)) = (
                self.arrays.get(&format!("extractor.{i}.weight")),
                self.arrays.get(&format!("extractor.{i}.bias")),
            ) else {
                break;
            };
            extractor.push(DenseLayer::new(doc_matrix(w)?, b.data.clone())?);
        }
        let w = self
            .arrays
            .get("header.weight")
            .ok_or_else(|| Error::protocol("checkpoint missing header.weight"))?;
        let b = self
            .arrays
            .get("header.bias")
            .ok_or_else(|| Error::protocol("checkpoint missing header.bias"))?;
        let header = ClassificationHeader::new(doc_matrix(w)?, b.data.clone())?;
        splice(extractor, header)
    }
}

fn matrix_doc(m: &Matrix) -> ArrayDoc {
    ArrayDoc { rows: m.rows(), cols: m.cols(), data: m.data().to_vec() }
}

fn vec_doc(v: &[f64]) -> ArrayDoc {
    ArrayDoc { rows: 1, cols: v.len(), data: v.to_vec() }
}

fn doc_matrix(doc: &ArrayDoc) -> Result<Matrix> {
    Matrix::from_vec(doc.rows, doc.cols, doc.data.clone())
}

/// Writes a model checkpoint as JSON.
pub fn save_model(model: &LocalModel, path: &Path) -> Result<()> {
    let doc = ModelCheckpoint::from_model(model);
    let json = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Reads a model checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<LocalModel> {
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ModelCheckpoint = serde_json::from_str(&json)?;
    doc.to_model()
}
