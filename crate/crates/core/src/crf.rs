//! Layered forests of honest causal trees.
//!
//! Layer `l` fits `Q` trees on subsamples of the layer input `Z_{l-1}` and
//! re-describes every row by the leaf it reaches in each tree. These leaf
//! ids become categorical covariates `tree_{l}_{q}` of `Z_l`. A final causal
//! tree fitted on `Z_L` turns the learned representation into effect
//! estimates.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal_tree::{fit_honest, prune_tree, CausalTree, TreeError, TreeParams};
use crate::data::{self, Column, DataError, Dataset, FeatureSpec, Frame, Schema};
use crate::rules::{extract_path_rule_with, Conjunction, FeatureKey};
use crate::seeds;

/// Stream label of the final tree's seed.
const FINAL_STREAM: u64 = 0xF1_4A1;

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("layer {layer}, tree {tree}: {source}")]
    Tree {
        layer: usize,
        tree: usize,
        #[source]
        source: TreeError,
    },
    #[error("final tree: {0}")]
    Final(#[source] TreeError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, CrfError>;

/// Name of the encoded column for tree `q` of layer `layer`.
pub fn encoded_name(layer: usize, q: usize) -> String {
    format!("tree_{layer}_{q}")
}

/// Seed of the final tree for a given master seed.
pub fn final_seed(master: u64) -> u64 {
    seeds::mix(master, FINAL_STREAM)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfConfig {
    /// Number of representation layers; 0 gives a plain causal tree.
    pub layers: usize,
    /// Trees per layer.
    pub trees: usize,
    pub subsample_fraction: f64,
    /// Parameters shared by every layer tree.
    pub tree_params: TreeParams,
    /// Keep the previous layer's covariates next to the new encodings.
    pub append_original: bool,
    pub master_seed: u64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            layers: 1,
            trees: 200,
            subsample_fraction: 0.5,
            tree_params: layer_tree_defaults(),
            append_original: false,
            master_seed: 0,
        }
    }
}

/// Layer tree defaults: bucketized thresholds, one candidate feature per
/// node and `nodesize = 1`.
pub fn layer_tree_defaults() -> TreeParams {
    TreeParams { mtry: Some(1), nodesize: 1, bucketized: true, ..TreeParams::default() }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 {
            return Err(CrfError::Config("trees must be at least 1".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(CrfError::Config("subsample_fraction must lie in (0, 1]".into()));
        }
        self.tree_params.validate().map_err(|e| CrfError::Config(format!("tree_params: {e}")))
    }
}

/// One fitted layer together with its output.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub trees: Vec<CausalTree>,
    /// Layer output: same rows, treatment and outcomes as the input, with
    /// the encodings as covariates.
    pub z: Dataset,
    /// Path rule of every leaf, per tree.
    pub rules: Vec<Vec<Conjunction>>,
}

/// Encodes each row of `frame` by the id of the leaf it reaches.
pub fn leaf_encode(tree: &CausalTree, frame: &Frame) -> std::result::Result<Column, TreeError> {
    let ids = tree.leaf_ids(frame)?;
    Ok(Column::Categorical(ids.into_iter().map(|i| i as u32).collect()))
}

fn encoded_spec(layer: usize, q: usize, leaves: usize) -> FeatureSpec {
    FeatureSpec::categorical(encoded_name(layer, q), (0..leaves).map(|j| j.to_string()).collect())
}

/// Builds `X_l` from the layer trees (plus `input` when `append`).
fn encode_layer(trees: &[CausalTree], input: &Frame, layer: usize, append: bool) -> Result<Frame> {
    let columns = trees
        .par_iter()
        .enumerate()
        .map(|(q, t)| leaf_encode(t, input).map_err(|source| CrfError::Tree { layer, tree: q, source }))
        .collect::<Result<Vec<_>>>()?;
    let schema = Schema::new(trees.iter().enumerate().map(|(q, t)| encoded_spec(layer, q, t.leaf_count)).collect());
    let encoded = Frame::new(schema, columns)?;
    Ok(if append { encoded.hstack(input)? } else { encoded })
}

/// Feature keys of the input columns of layer `layer` (1-based);
/// `layer = L + 1` describes the final tree's inputs.
fn input_keys(raw_len: usize, trees_per_layer: usize, layer: usize, append: bool) -> Vec<FeatureKey> {
    let mut keys: Vec<FeatureKey> = (0..raw_len).map(FeatureKey::Raw).collect();
    for l in 1..layer {
        let mut next: Vec<FeatureKey> =
            (0..trees_per_layer).map(|q| FeatureKey::Encoded { layer: l, tree: q }).collect();
        if append {
            next.extend(keys);
        }
        keys = next;
    }
    keys
}

fn fit_layer_tree(z: &Dataset, config: &CrfConfig, layer: usize, q: usize) -> Result<CausalTree> {
    let seed = seeds::tree_seed(config.master_seed, layer, q);
    let wrap = |source: TreeError| CrfError::Tree { layer, tree: q, source };
    let sub = data::subsample(z, config.subsample_fraction, seeds::mix(seed, seeds::STREAM_SUBSAMPLE))
        .map_err(|e| wrap(e.into()))?;
    let (tree, _, _) = fit_honest(&sub, &config.tree_params, seed).map_err(wrap)?;
    Ok(tree)
}

/// Fits the representation layers of a forest.
pub fn build_crf(ds: &Dataset, config: &CrfConfig) -> Result<Vec<LayerOutput>> {
    config.validate()?;
    data::require_positivity(ds, "input data")?;
    let mut z = ds.clone();
    let mut out = Vec::with_capacity(config.layers);
    for layer in 1..=config.layers {
        let trees = (0..config.trees)
            .into_par_iter()
            .map(|q| fit_layer_tree(&z, config, layer, q))
            .collect::<Result<Vec<_>>>()?;
        let keys = input_keys(ds.x.schema().len(), config.trees, layer, config.append_original);
        let rules = trees
            .iter()
            .enumerate()
            .map(|(q, t)| {
                (0..t.leaf_count)
                    .map(|j| extract_path_rule_with(t, j, |f| keys[f]))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|source| CrfError::Tree { layer, tree: q, source })
            })
            .collect::<Result<Vec<_>>>()?;
        let x = encode_layer(&trees, &z.x, layer, config.append_original)?;
        z = z.with_features(x)?;
        out.push(LayerOutput { trees, z: z.clone(), rules });
    }
    Ok(out)
}

/// A fitted forest with its final causal tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfModel {
    pub config: CrfConfig,
    pub final_params: TreeParams,
    /// Folds used to prune the final tree, if it was pruned.
    pub prune_folds: Option<usize>,
    pub raw_schema: Schema,
    /// Layer trees; `layers[l - 1][q]` is tree `q` of layer `l`.
    pub layers: Vec<Vec<CausalTree>>,
    pub final_ct: CausalTree,
    /// Encoded column name to `(layer, tree)`.
    pub provenance: BTreeMap<String, (usize, usize)>,
    #[serde(skip)]
    input_schemas: Vec<Arc<Schema>>,
}

impl CrfModel {
    fn assemble(
        config: CrfConfig,
        final_params: TreeParams,
        prune_folds: Option<usize>,
        raw_schema: Schema,
        layers: Vec<Vec<CausalTree>>,
        final_ct: CausalTree,
    ) -> Result<Self> {
        let provenance = layers
            .iter()
            .enumerate()
            .flat_map(|(l, trees)| (0..trees.len()).map(move |q| (encoded_name(l + 1, q), (l + 1, q))))
            .collect();
        let mut model = CrfModel {
            config,
            final_params,
            prune_folds,
            raw_schema,
            layers,
            final_ct,
            provenance,
            input_schemas: Vec::new(),
        };
        model.restore()?;
        Ok(model)
    }

    /// Recomputes the per-layer input schemas and attaches them to the
    /// trees. Needed after deserialization.
    pub fn restore(&mut self) -> Result<()> {
        let corrupt = |m: String| CrfError::Config(format!("corrupt model: {m}"));
        if self.layers.len() != self.config.layers {
            return Err(corrupt(format!("expected {} layers, found {}", self.config.layers, self.layers.len())));
        }
        let mut schema = Arc::new(self.raw_schema.clone());
        let mut schemas = Vec::with_capacity(self.layers.len() + 1);
        for (l, trees) in self.layers.iter_mut().enumerate() {
            if trees.len() != self.config.trees {
                return Err(corrupt(format!("layer {} has {} trees", l + 1, trees.len())));
            }
            schemas.push(Arc::clone(&schema));
            for t in trees.iter_mut() {
                t.attach_schema(Arc::clone(&schema));
            }
            let mut features: Vec<FeatureSpec> =
                trees.iter().enumerate().map(|(q, t)| encoded_spec(l + 1, q, t.leaf_count)).collect();
            if self.config.append_original {
                features.extend(schema.features.iter().cloned());
            }
            schema = Arc::new(Schema::new(features));
        }
        schemas.push(Arc::clone(&schema));
        self.final_ct.attach_schema(schema);
        self.input_schemas = schemas;
        Ok(())
    }

    /// Input schema of layer `layer` (1-based); `L + 1` is the final tree.
    pub fn input_schema(&self, layer: usize) -> &Schema {
        &self.input_schemas[layer - 1]
    }

    pub fn layer_tree(&self, layer: usize, q: usize) -> Option<&CausalTree> {
        self.layers.get(layer.checked_sub(1)?)?.get(q)
    }

    fn keys(&self, layer: usize) -> Vec<FeatureKey> {
        input_keys(self.raw_schema.len(), self.config.trees, layer, self.config.append_original)
    }

    /// Path rule of leaf `leaf` of tree `q` in layer `layer`.
    pub fn layer_rule(&self, layer: usize, q: usize, leaf: usize) -> std::result::Result<Conjunction, TreeError> {
        let tree = self.layer_tree(layer, q).ok_or(TreeError::UnknownLeaf(leaf))?;
        let keys = self.keys(layer);
        extract_path_rule_with(tree, leaf, |f| keys[f])
    }

    /// Path rule of a final-tree leaf over the final tree's inputs.
    pub fn final_rule(&self, leaf: usize) -> std::result::Result<Conjunction, TreeError> {
        let keys = self.keys(self.layers.len() + 1);
        extract_path_rule_with(&self.final_ct, leaf, |f| keys[f])
    }

    /// Leaf encodings of `frame` for every layer, in order.
    pub fn encode_all(&self, frame: &Frame) -> Result<Vec<Frame>> {
        let mut out: Vec<Frame> = Vec::with_capacity(self.layers.len());
        for (l, trees) in self.layers.iter().enumerate() {
            let input = out.last().unwrap_or(frame);
            let next = encode_layer(trees, input, l + 1, self.config.append_original)?;
            out.push(next);
        }
        Ok(out)
    }

    /// Final-tree inputs for `frame`.
    pub fn encode(&self, frame: &Frame) -> Result<Frame> {
        Ok(self.encode_all(frame)?.pop().unwrap_or_else(|| frame.clone()))
    }

    /// Replaces the covariates of `ds` by the last layer's encodings.
    pub fn encode_dataset(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(ds.with_features(self.encode(&ds.x)?)?)
    }

    pub fn predict(&self, frame: &Frame) -> Result<Vec<f64>> {
        let encoded = self.encode(frame)?;
        self.final_ct.predict_frame(&encoded).map_err(CrfError::Final)
    }

    pub fn tree_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn leaf_count(&self) -> usize {
        self.layers.iter().flatten().map(|t| t.leaf_count).sum()
    }

    /// Every tree in the model, layer trees first.
    pub fn all_trees(&self) -> impl Iterator<Item = &CausalTree> {
        self.layers.iter().flatten().chain(std::iter::once(&self.final_ct))
    }
}

/// Fits the layers and a final honest tree on the last encoding, pruned
/// by cross-validation when `prune_folds` is set.
pub fn fit_crf_ct(
    ds: &Dataset,
    config: &CrfConfig,
    final_params: &TreeParams,
    prune_folds: Option<usize>,
) -> Result<CrfModel> {
    config.validate()?;
    final_params.validate().map_err(|e| CrfError::Config(format!("final_params: {e}")))?;
    let layers = build_crf(ds, config)?;
    let z = layers.last().map_or(ds, |l| &l.z);
    let seed = final_seed(config.master_seed);
    let (mut tree, train, est) = fit_honest(z, final_params, seed).map_err(CrfError::Final)?;
    if let Some(folds) = prune_folds {
        tree = prune_tree(&tree, &train, &est, folds, seed).map_err(CrfError::Final)?;
    }
    let trees = layers.into_iter().map(|l| l.trees).collect();
    CrfModel::assemble(config.clone(), final_params.clone(), prune_folds, ds.x.schema().clone(), trees, tree)
}

/// Predictions of a model for every row of `frame`.
pub fn predict_model(model: &CrfModel, frame: &Frame) -> Result<Vec<f64>> {
    model.predict(frame)
}

/// Average of honest trees fitted on independent subsamples.
#[derive(Clone, Debug)]
pub struct ForestAverage {
    pub trees: Vec<CausalTree>,
}

impl ForestAverage {
    pub fn predict(&self, frame: &Frame) -> Result<Vec<f64>> {
        let per_tree = self
            .trees
            .par_iter()
            .enumerate()
            .map(|(q, t)| t.predict_frame(frame).map_err(|source| CrfError::Tree { layer: 0, tree: q, source }))
            .collect::<Result<Vec<_>>>()?;
        let mut sum = vec![0.0; frame.n()];
        for p in &per_tree {
            for (s, v) in sum.iter_mut().zip(p) {
                *s += v;
            }
        }
        let q = self.trees.len() as f64;
        Ok(sum.into_iter().map(|s| s / q).collect())
    }
}

/// Fits `q` honest trees on subsamples of `ds`; predictions average them.
pub fn forest_average_cate(
    ds: &Dataset,
    q: usize,
    tree_params: &TreeParams,
    fraction: f64,
    seed: u64,
) -> Result<ForestAverage> {
    let config = CrfConfig {
        layers: 1,
        trees: q,
        subsample_fraction: fraction,
        tree_params: tree_params.clone(),
        append_original: false,
        master_seed: seed,
    };
    config.validate()?;
    data::require_positivity(ds, "input data")?;
    let trees = (0..q).into_par_iter().map(|i| fit_layer_tree(ds, &config, 0, i)).collect::<Result<Vec<_>>>()?;
    Ok(ForestAverage { trees })
}
