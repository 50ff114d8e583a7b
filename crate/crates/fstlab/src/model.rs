//! Models split into a feature extractor and a classifier head.
//!
//! The split is the load-bearing abstraction: attacks train the whole
//! network, while defenses freeze, re-initialize, regularize, or project
//! the two sides differently. Parameters live in a flat registry (extractor
//! layers first, then head layers; weight before bias within a layer), and
//! every gradient or optimizer structure is index-aligned with it.
//!
//! Checkpoints are a JSON manifest plus a little-endian f64 blob in registry
//! order; save then load reproduces every parameter bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{backward_layer, forward_layer, LayerCache, LayerSpec, ParamKind};
use crate::loss::{cross_entropy, d_logits};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "fstlab-ckpt-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Side {
    Extractor,
    Head,
}

/// Address of one parameter tensor: which side, which layer, weight or bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamKey {
    pub side: Side,
    pub layer: usize,
    pub kind: ParamKind,
}

impl ParamKey {
    pub fn name(&self) -> String {
        let side = match self.side {
            Side::Extractor => "ext",
            Side::Head => "head",
        };
        let kind = match self.kind {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
        };
        format!("{side}.{}.{kind}", self.layer)
    }
}

/// Architecture description: per-sample input shape, the two layer chains,
/// and the number of classes the head must emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub extractor: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Two hidden dense layers over flattened pixels, linear head.
    /// The default architecture for the synthetic benchmark.
    pub fn toy_mlp(input_shape: &[usize], class_count: usize) -> ModelSpec {
        let pixels: usize = input_shape.iter().product();
        ModelSpec {
            input_shape: input_shape.to_vec(),
            class_count,
            extractor: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { input: pixels, output: 128, bias: true },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 128, output: 64, bias: true },
                LayerSpec::Relu,
            ],
            head: vec![LayerSpec::Dense { input: 64, output: class_count, bias: true }],
        }
    }

    /// Small convolutional variant exercising conv and pooling layers.
    pub fn toy_cnn(input_shape: &[usize], class_count: usize) -> Result<ModelSpec> {
        if input_shape.len() != 3 {
            return Err(Error::config(format!("toy cnn wants [h,w,c] input, got {input_shape:?}")));
        }
        let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
        let flat = (h / 2) * (w / 2) * 8;
        Ok(ModelSpec {
            input_shape: input_shape.to_vec(),
            class_count,
            extractor: vec![
                LayerSpec::Conv2d { in_channels: c, out_channels: 8 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                LayerSpec::Dense { input: flat, output: 64, bias: true },
                LayerSpec::Relu,
            ],
            head: vec![LayerSpec::Dense { input: 64, output: class_count, bias: true }],
        })
    }

    /// Walk shapes through both chains. Returns the feature shape (extractor
    /// output). Fails if any layer cannot accept its input or the head does
    /// not end in `class_count` logits.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.class_count < 2 {
            return Err(Error::config(format!("classCount must be >= 2, got {}", self.class_count)));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.extractor.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| {
                Error::config(format!("extractor layer {i} ({}): {e}", layer.describe()))
            })?;
        }
        let feature_shape = shape.clone();
        for (i, layer) in self.head.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::config(format!("head layer {i} ({}): {e}", layer.describe())))?;
        }
        if shape != [self.class_count] {
            return Err(Error::config(format!(
                "head emits shape {shape:?}, want [{}]",
                self.class_count
            )));
        }
        if !self.head.iter().any(|l| matches!(l, LayerSpec::Dense { .. })) {
            return Err(Error::config("head must contain at least one dense layer"));
        }
        Ok(feature_shape)
    }

    /// Initialize parameters and assemble the split model.
    ///
    /// Weights draw Kaiming-uniform U(-sqrt(6/fanIn), sqrt(6/fanIn)) in
    /// registry order from the model-init stream of `seed`; biases start
    /// at zero. Identical seeds give identical parameters.
    pub fn build(&self, seed: u64) -> Result<ModelSplit> {
        self.validate()?;
        let registry = build_registry(self)?;
        let mut rng = RngState::new(seed, crate::rng::stream::MODEL_INIT).rng();
        let mut params = Vec::with_capacity(registry.len());
        for key in &registry {
            let layer = layer_at(self, key.side, key.layer);
            params.push(init_param(layer, key.kind, &mut rng));
        }
        Ok(ModelSplit { spec: self.clone(), registry, params, seed })
    }
}

fn layer_at(spec: &ModelSpec, side: Side, index: usize) -> &LayerSpec {
    match side {
        Side::Extractor => &spec.extractor[index],
        Side::Head => &spec.head[index],
    }
}

fn build_registry(spec: &ModelSpec) -> Result<Vec<ParamKey>> {
    let mut registry = Vec::new();
    for (side, layers) in [(Side::Extractor, &spec.extractor), (Side::Head, &spec.head)] {
        for (i, layer) in layers.iter().enumerate() {
            for (kind, _) in layer.param_shapes() {
                registry.push(ParamKey { side, layer: i, kind });
            }
        }
    }
    Ok(registry)
}

fn init_param(layer: &LayerSpec, kind: ParamKind, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let shape = layer
        .param_shapes()
        .into_iter()
        .find(|(k, _)| *k == kind)
        .map(|(_, s)| s)
        .expect("registry kind exists on layer");
    match kind {
        ParamKind::Bias => Tensor::zeros(&shape),
        ParamKind::Weight => {
            let fan_in = layer.fan_in().expect("weight layer has fan-in") as f64;
            let limit = (6.0 / fan_in).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
            Tensor::from_vec(&shape, data).expect("init shape")
        }
    }
}

/// Gradients aligned one-to-one with a model's parameter registry.
#[derive(Debug, Clone)]
pub struct GradientSet {
    grads: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelSplit) -> GradientSet {
        GradientSet { grads: model.params.iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    /// Global L2 norm across every tensor in the set.
    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    /// Confirm this set is structurally aligned with `model`'s registry.
    pub fn aligned_with(&self, model: &ModelSplit) -> bool {
        self.grads.len() == model.params.len()
            && self.grads.iter().zip(&model.params).all(|(g, p)| g.shape() == p.shape())
    }
}

/// Extra gradient term: for each `(param index, reference)`, the training
/// objective gains `alpha * <param, reference>`, so the parameter's gradient
/// gains `alpha * reference`.
#[derive(Debug, Clone)]
pub struct GradPenalty {
    pub alpha: f64,
    pub terms: Vec<(usize, Tensor)>,
}

impl GradPenalty {
    /// Current penalty value `alpha * sum_i <param_i, ref_i>`.
    pub fn value(&self, model: &ModelSplit) -> f64 {
        self.alpha * self.terms.iter().map(|(i, r)| model.params[*i].dot(r)).sum::<f64>()
    }
}

/// A model with parameters, split into extractor and head.
#[derive(Debug, Clone)]
pub struct ModelSplit {
    spec: ModelSpec,
    registry: Vec<ParamKey>,
    params: Vec<Tensor>,
    seed: u64,
}

impl ModelSplit {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn registry(&self) -> &[ParamKey] {
        &self.registry
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Seed the parameters were originally initialized from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_index(&self, key: ParamKey) -> Option<usize> {
        self.registry.iter().position(|k| *k == key)
    }

    /// Registry indices on the given side.
    pub fn side_indices(&self, side: Side) -> Vec<usize> {
        self.registry
            .iter()
            .enumerate()
            .filter(|(_, k)| k.side == side)
            .map(|(i, _)| i)
            .collect()
    }

    /// Registry index of the last dense weight in the head: the classifier
    /// matrix.
    pub fn classifier_weight_index(&self) -> usize {
        self.registry
            .iter()
            .rposition(|k| k.side == Side::Head && k.kind == ParamKind::Weight)
            .expect("validated head has a dense layer")
    }

    fn side_param_spans(&self, side: Side) -> Vec<(usize, usize)> {
        // (registry offset, count) per layer on that side.
        let layers = match side {
            Side::Extractor => &self.spec.extractor,
            Side::Head => &self.spec.head,
        };
        let mut offset = match side {
            Side::Extractor => 0,
            Side::Head => self.spec.extractor.iter().map(|l| l.param_shapes().len()).sum(),
        };
        let mut spans = Vec::with_capacity(layers.len());
        for layer in layers {
            let n = layer.param_shapes().len();
            spans.push((offset, n));
            offset += n;
        }
        spans
    }

    fn run_side(
        &self,
        side: Side,
        input: &Tensor,
        keep_cache: bool,
    ) -> Result<(Tensor, Vec<Option<LayerCache>>)> {
        let layers = match side {
            Side::Extractor => &self.spec.extractor,
            Side::Head => &self.spec.head,
        };
        let spans = self.side_param_spans(side);
        let mut current = input.clone();
        let mut caches = Vec::with_capacity(layers.len());
        for (layer, (offset, count)) in layers.iter().zip(spans) {
            let (out, cache) =
                forward_layer(layer, &self.params[offset..offset + count], &current, keep_cache)?;
            caches.push(cache);
            current = out;
        }
        Ok((current, caches))
    }

    /// Extractor output for a batch ([batch, ...sample] in, [batch, featureDim] out).
    pub fn forward_features(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.run_side(Side::Extractor, batch, false)?.0)
    }

    /// Head output for a batch of features.
    pub fn features_to_logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.run_side(Side::Head, features, false)?.0)
    }

    /// Full forward pass to logits.
    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let features = self.forward_features(batch)?;
        self.features_to_logits(&features)
    }

    /// Forward and backward over one batch: mean cross-entropy (plus the
    /// penalty term if given) and gradients for every registered parameter.
    ///
    /// With `penalty.alpha == 0` the penalty contributes nothing and is
    /// skipped entirely, leaving gradients bit-identical to the no-penalty
    /// path.
    pub fn backward(
        &self,
        batch: &Tensor,
        labels: &[usize],
        penalty: Option<&GradPenalty>,
    ) -> Result<(f64, GradientSet)> {
        let (features, ext_caches) = self.run_side(Side::Extractor, batch, true)?;
        let (logits, head_caches) = self.run_side(Side::Head, &features, true)?;
        let mut loss = cross_entropy(&logits, labels)?;
        let mut d_current = d_logits(&logits, labels)?;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        for (side, caches) in [(Side::Head, head_caches), (Side::Extractor, ext_caches)] {
            let layers = match side {
                Side::Extractor => &self.spec.extractor,
                Side::Head => &self.spec.head,
            };
            let spans = self.side_param_spans(side);
            for (i, layer) in layers.iter().enumerate().rev() {
                let (offset, count) = spans[i];
                let cache = caches[i].as_ref().expect("training cache kept");
                let (layer_grads, d_in) =
                    backward_layer(layer, &self.params[offset..offset + count], cache, &d_current);
                for (j, g) in layer_grads.into_iter().enumerate() {
                    grads[offset + j] = Some(g);
                }
                d_current = d_in;
            }
        }
        let mut set = GradientSet {
            grads: grads.into_iter().map(|g| g.expect("every param got a gradient")).collect(),
        };

        if let Some(p) = penalty {
            if p.alpha != 0.0 {
                loss += p.value(self);
                for (idx, reference) in &p.terms {
                    set.grads[*idx].axpy(p.alpha, reference);
                }
            }
        }
        debug_assert!(set.aligned_with(self));
        Ok((loss, set))
    }

    /// Distance from the nearest ReLU pre-activation to zero, over the whole
    /// batch; `None` when the model has no ReLU layers.
    ///
    /// ReLU is not differentiable at 0, so numeric gradient checks reject a
    /// (model, batch) pair whose margin is below their step size and redraw
    /// instead of comparing garbage.
    pub fn min_relu_margin(&self, batch: &Tensor) -> Result<Option<f64>> {
        let mut margin: Option<f64> = None;
        let mut current = batch.clone();
        for side in [Side::Extractor, Side::Head] {
            let layers = match side {
                Side::Extractor => &self.spec.extractor,
                Side::Head => &self.spec.head,
            };
            let spans = self.side_param_spans(side);
            for (layer, (offset, count)) in layers.iter().zip(spans) {
                let is_relu = matches!(layer, LayerSpec::Relu);
                let (out, cache) = forward_layer(
                    layer,
                    &self.params[offset..offset + count],
                    &current,
                    is_relu,
                )?;
                if let Some(cache) = cache {
                    let local =
                        cache.input.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
                    margin = Some(margin.map_or(local, |m: f64| m.min(local)));
                }
                current = out;
            }
        }
        Ok(margin)
    }

    /// Replace every head parameter with a fresh draw (weights from the
    /// same Kaiming-uniform scheme as [`ModelSpec::build`], biases zero).
    /// Extractor parameters are untouched.
    pub fn reinit_head(&mut self, rng_state: RngState) {
        let mut rng = rng_state.rng();
        for i in self.side_indices(Side::Head) {
            let key = self.registry[i];
            let layer = layer_at(&self.spec, key.side, key.layer).clone();
            self.params[i] = init_param(&layer, key.kind, &mut rng);
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Write `<stem>.json` (manifest) and `<stem>.bin` (parameter blob,
    /// little-endian f64 in registry order).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            seed: self.seed,
            spec: self.spec.clone(),
            params: self
                .registry
                .iter()
                .zip(&self.params)
                .map(|(k, p)| ManifestParam { name: k.name(), shape: p.shape().to_vec() })
                .collect(),
        };
        let json_path = stem.with_extension("json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

        let bin_path = stem.with_extension("bin");
        let file = std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut writer = std::io::BufWriter::new(file);
        for p in &self.params {
            for &x in p.data() {
                writer.write_all(&x.to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
            }
        }
        writer.flush().map_err(|e| Error::io(&bin_path, e))?;
        Ok(())
    }

    /// Load a checkpoint written by [`ModelSplit::save`].
    pub fn load(stem: &Path) -> Result<ModelSplit> {
        let json_path = stem.with_extension("json");
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            code: "ckpt/bad-manifest",
            message: format!("{}: {e}", json_path.display()),
        })?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                code: "ckpt/bad-format",
                message: format!(
                    "{}: format {:?}, want {:?}",
                    json_path.display(),
                    manifest.format,
                    CHECKPOINT_FORMAT
                ),
            });
        }
        manifest.spec.validate()?;
        let registry = build_registry(&manifest.spec)?;
        if registry.len() != manifest.params.len() {
            return Err(Error::Parse {
                code: "ckpt/registry-mismatch",
                message: format!(
                    "{}: manifest lists {} params, spec builds {}",
                    json_path.display(),
                    manifest.params.len(),
                    registry.len()
                ),
            });
        }

        let bin_path = stem.with_extension("bin");
        let file = std::fs::File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut reader = std::io::BufReader::new(file);
        let mut params = Vec::with_capacity(registry.len());
        for (key, mp) in registry.iter().zip(&manifest.params) {
            if key.name() != mp.name {
                return Err(Error::Parse {
                    code: "ckpt/registry-mismatch",
                    message: format!(
                        "{}: manifest param {:?} where spec expects {:?}",
                        json_path.display(),
                        mp.name,
                        key.name()
                    ),
                });
            }
            let n: usize = mp.shape.iter().product();
            let mut data = vec![0.0; n];
            let mut buf = [0u8; 8];
            for x in &mut data {
                reader.read_exact(&mut buf).map_err(|e| Error::Parse {
                    code: "ckpt/truncated",
                    message: format!("{}: {e}", bin_path.display()),
                })?;
                *x = f64::from_le_bytes(buf);
            }
            params.push(Tensor::from_vec(&mp.shape, data)?);
        }
        let mut trailing = [0u8; 1];
        if reader.read(&mut trailing).map_err(|e| Error::io(&bin_path, e))? != 0 {
            return Err(Error::Parse {
                code: "ckpt/trailing-bytes",
                message: format!("{}: blob longer than manifest declares", bin_path.display()),
            });
        }

        let model = ModelSplit { spec: manifest.spec, registry, params, seed: manifest.seed };
        // Cross-check manifest shapes against the registry the architecture
        // itself derives, so a tampered manifest cannot smuggle in mismatched
        // parameter blocks.
        for (key, p) in model.registry.iter().zip(&model.params) {
            let want = layer_at(&model.spec, key.side, key.layer)
                .param_shapes()
                .into_iter()
                .find(|(k, _)| *k == key.kind)
                .map(|(_, s)| s)
                .expect("registry kind");
            if p.shape() != want.as_slice() {
                return Err(Error::Parse {
                    code: "ckpt/registry-mismatch",
                    message: format!(
                        "{}: param {} has shape {:?}, spec wants {:?}",
                        json_path.display(),
                        key.name(),
                        p.shape(),
                        want
                    ),
                });
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct Manifest {
    format: String,
    seed: u64,
    spec: ModelSpec,
    params: Vec<ManifestParam>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
}
