//! The staged classifier: convolutional stem, MBConv stages, attention
//! stages, and a global-average-pool + linear head.
//!
//! Parameters carry canonical names `stage{i}.block{j}.{param}` (and
//! `head.weight` / `head.bias`) in a fixed order determined by the config.
//! Channel-statistic normalization layers also keep running statistics,
//! which are not trained by gradient but are saved with the parameters.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, StageKind, StageSpec};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    mbconv_block, transformer_block, NormParams, Padding, PoolKind, RunningStats, MbConvParams,
    TransformerParams, DEFAULT_NORM_EPSILON, EXPANSION_RATIO,
};
use crate::tensor::{softmax, Tensor};

/// Momentum of the running-statistics moving average.
pub const RUNNING_STATS_MOMENTUM: f64 = 0.1;

/// Standard deviation of the classifier head's initial weights.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Channel-statistic layers use batch statistics.
    Train,
    /// Channel-statistic layers use running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Bookkeeping stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub epoch: Option<usize>,
    pub seed: Option<u64>,
    pub loss: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Zero-mean normal with variance `2 / fan_in`.
    He(usize),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    Ones,
    Zeros,
}

#[derive(Clone, Debug)]
enum BlockPlan {
    Stem {
        prefix: String,
        in_c: usize,
        out_c: usize,
        stride: usize,
    },
    MbConv {
        prefix: String,
        in_c: usize,
        out_c: usize,
        stride: usize,
    },
    Transformer {
        prefix: String,
        in_c: usize,
        out_c: usize,
        downsample: bool,
    },
}

fn plan(config: &ModelConfig) -> Vec<BlockPlan> {
    let mut plans = Vec::new();
    let mut in_c = config.input.0;
    for (i, stage) in config.stages.iter().enumerate() {
        for j in 0..stage.blocks {
            let prefix = format!("stage{i}.block{j}");
            let stride = if j == 0 { stage.stride } else { 1 };
            let out_c = stage.channels;
            plans.push(match stage.kind {
                StageKind::ConvStem => BlockPlan::Stem {
                    prefix,
                    in_c,
                    out_c,
                    stride,
                },
                StageKind::MbConv => BlockPlan::MbConv {
                    prefix,
                    in_c,
                    out_c,
                    stride,
                },
                StageKind::Transformer => BlockPlan::Transformer {
                    prefix,
                    in_c,
                    out_c,
                    downsample: stride == 2,
                },
            });
            in_c = out_c;
        }
    }
    plans
}

/// Parameter names, shapes and initializers plus normalization-layer names,
/// all in canonical order.
#[allow(clippy::type_complexity)]
fn layout(config: &ModelConfig) -> (Vec<(String, Vec<usize>, Init)>, Vec<(String, usize)>) {
    let mut params = Vec::new();
    let mut norms = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| params.push((name, shape, init));
    let mut last_c = config.input.0;
    for block in plan(config) {
        match block {
            BlockPlan::Stem {
                prefix,
                in_c,
                out_c,
                ..
            } => {
                add(format!("{prefix}.conv.weight"), vec![out_c, in_c, 3, 3], Init::He(in_c * 9));
                add(format!("{prefix}.norm.scale"), vec![out_c], Init::Ones);
                add(format!("{prefix}.norm.shift"), vec![out_c], Init::Zeros);
                norms.push((format!("{prefix}.norm"), out_c));
                last_c = out_c;
            }
            BlockPlan::MbConv {
                prefix,
                in_c,
                out_c,
                stride,
            } => {
                let e = in_c * EXPANSION_RATIO;
                add(format!("{prefix}.expand.weight"), vec![e, in_c], Init::He(in_c));
                add(format!("{prefix}.norm1.scale"), vec![e], Init::Ones);
                add(format!("{prefix}.norm1.shift"), vec![e], Init::Zeros);
                add(format!("{prefix}.depthwise.weight"), vec![e, 3, 3], Init::He(9));
                add(format!("{prefix}.norm2.scale"), vec![e], Init::Ones);
                add(format!("{prefix}.norm2.shift"), vec![e], Init::Zeros);
                add(format!("{prefix}.project.weight"), vec![out_c, e], Init::He(e));
                if stride != 1 || in_c != out_c {
                    add(format!("{prefix}.shortcut.weight"), vec![out_c, in_c], Init::He(in_c));
                }
                norms.push((format!("{prefix}.norm1"), e));
                norms.push((format!("{prefix}.norm2"), e));
                last_c = out_c;
            }
            BlockPlan::Transformer {
                prefix,
                in_c,
                out_c,
                ..
            } => {
                let e = out_c * EXPANSION_RATIO;
                if in_c != out_c {
                    add(format!("{prefix}.shortcut.weight"), vec![out_c, in_c], Init::He(in_c));
                }
                add(format!("{prefix}.norm1.scale"), vec![out_c], Init::Ones);
                add(format!("{prefix}.norm1.shift"), vec![out_c], Init::Zeros);
                add(format!("{prefix}.norm2.scale"), vec![out_c], Init::Ones);
                add(format!("{prefix}.norm2.shift"), vec![out_c], Init::Zeros);
                add(format!("{prefix}.ffn.expand.weight"), vec![e, out_c], Init::He(out_c));
                add(format!("{prefix}.ffn.expand.bias"), vec![e], Init::Zeros);
                add(format!("{prefix}.ffn.project.weight"), vec![out_c, e], Init::He(e));
                add(format!("{prefix}.ffn.project.bias"), vec![out_c], Init::Zeros);
                last_c = out_c;
            }
        }
    }
    // small head weights keep initial predictions close to uniform
    add("head.weight".into(), vec![config.num_classes, last_c], Init::Normal(HEAD_INIT_STD));
    add("head.bias".into(), vec![config.num_classes], Init::Zeros);
    (params, norms)
}

/// Handles produced by one forward pass.
pub struct ForwardPass {
    /// `[B, num_classes]`.
    pub logits: Var,
    /// Output of the last MBConv block, the map Grad-CAM explains.
    pub hook: Option<Var>,
    /// One variable per model parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics per normalization layer (training mode only).
    pub batch_stats: Vec<(usize, RunningStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
    norms: Vec<(String, RunningStats)>,
    norm_index: BTreeMap<String, usize>,
    pub meta: TrainingMeta,
}

/// Initializes a model from its config. Equal seeds give bit-identical
/// parameters.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let (shapes, norms) = layout(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Vec::with_capacity(shapes.len());
    for (name, shape, init) in shapes {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Ones => vec![1.0; n],
            Init::Zeros => vec![0.0; n],
            Init::He(_) | Init::Normal(_) => {
                let std = match init {
                    Init::He(fan_in) => (2.0 / fan_in as f64).sqrt(),
                    Init::Normal(std) => std,
                    _ => unreachable!(),
                };
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        // parameters start exactly representable in the
                        // 32-bit checkpoint format
                        (z * std) as f32 as f64
                    })
                    .collect()
            }
        };
        params.push(Parameter {
            name,
            tensor: Tensor::new(shape, values)?,
        });
    }
    let norms = norms
        .into_iter()
        .map(|(name, c)| (name, RunningStats::identity(c)))
        .collect();
    Ok(Model::assemble(config.clone(), params, norms))
}

impl Model {
    fn assemble(
        config: ModelConfig,
        params: Vec<Parameter>,
        norms: Vec<(String, RunningStats)>,
    ) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let norm_index = norms
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Model {
            config,
            params,
            index,
            norms,
            norm_index,
            meta: TrainingMeta::default(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    /// Running statistics of each channel-statistic layer, in forward order.
    pub fn running_stats(&self) -> &[(String, RunningStats)] {
        &self.norms
    }

    pub fn running_stats_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.norms
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn update_running_stats(&mut self, batch_stats: &[(usize, RunningStats)], momentum: f64) {
        for (i, stats) in batch_stats {
            self.norms[*i].1.update(stats, momentum);
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.config.input;
        match *batch.shape() {
            [bc, bh, bw] if (bc, bh, bw) == (c, h, w) => batch.reshape([1, c, h, w]),
            [_, bc, bh, bw] if (bc, bh, bw) == (c, h, w) => Ok(batch.clone()),
            _ => Err(Error::Shape(format!(
                "model expects [B,{c},{h},{w}] input, got {:?}",
                batch.shape()
            ))),
        }
    }

    /// Records a forward pass on `g`.
    ///
    /// A `[C,H,W]` input is treated as a batch of one; logits are always
    /// `[B, num_classes]`.
    pub fn forward(&self, g: &mut Graph, batch: &Tensor, mode: Mode) -> Result<ForwardPass> {
        let input = self.check_input(batch)?;
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.tensor.clone())).collect();
        let p = |name: String| -> Var { params[self.index[&name]] };
        let mut batch_stats = Vec::new();
        let norm = |prefix: &str| {
            let i = self.norm_index[prefix];
            NormParams {
                scale: p(format!("{prefix}.scale")),
                shift: p(format!("{prefix}.shift")),
                running: match mode {
                    Mode::Train => None,
                    Mode::Eval => Some(self.norms[i].1.clone()),
                },
            }
        };

        let mut x = g.constant(input);
        let mut hook = None;
        for block in plan(&self.config) {
            match &block {
                BlockPlan::Stem { prefix, stride, .. } => {
                    let n = format!("{prefix}.norm");
                    let np = norm(&n);
                    let h = g.conv2d(x, p(format!("{prefix}.conv.weight")), Padding::Same, *stride)?;
                    let (h, stats) =
                        g.channel_norm(h, np.scale, np.shift, DEFAULT_NORM_EPSILON, np.running.as_ref())?;
                    if let Some(s) = stats {
                        batch_stats.push((self.norm_index[&n], s));
                    }
                    x = g.gelu(h)?;
                }
                BlockPlan::MbConv {
                    prefix, stride, ..
                } => {
                    let params = MbConvParams {
                        expand: p(format!("{prefix}.expand.weight")),
                        norm1: norm(&format!("{prefix}.norm1")),
                        depthwise: p(format!("{prefix}.depthwise.weight")),
                        norm2: norm(&format!("{prefix}.norm2")),
                        project: p(format!("{prefix}.project.weight")),
                        shortcut: self
                            .index
                            .get(&format!("{prefix}.shortcut.weight"))
                            .map(|&i| params[i]),
                        stride: *stride,
                    };
                    let out = mbconv_block(g, x, &params)?;
                    let ids = [
                        self.norm_index[&format!("{prefix}.norm1")],
                        self.norm_index[&format!("{prefix}.norm2")],
                    ];
                    batch_stats.extend(ids.into_iter().zip(out.batch_stats));
                    x = out.output;
                    hook = Some(x);
                }
                BlockPlan::Transformer {
                    prefix, downsample, ..
                } => {
                    let ln = |n: &str| NormParams {
                        scale: p(format!("{prefix}.{n}.scale")),
                        shift: p(format!("{prefix}.{n}.shift")),
                        running: None,
                    };
                    let params = TransformerParams {
                        downsample: *downsample,
                        shortcut: self
                            .index
                            .get(&format!("{prefix}.shortcut.weight"))
                            .map(|&i| params[i]),
                        norm1: ln("norm1"),
                        norm2: ln("norm2"),
                        ffn_expand: p(format!("{prefix}.ffn.expand.weight")),
                        ffn_expand_bias: p(format!("{prefix}.ffn.expand.bias")),
                        ffn_project: p(format!("{prefix}.ffn.project.weight")),
                        ffn_project_bias: p(format!("{prefix}.ffn.project.bias")),
                    };
                    x = transformer_block(g, x, &params)?.output;
                }
            }
        }
        let pooled = g.pool2d(x, PoolKind::GlobalAvg, 0, 0)?;
        let shape = g.shape(pooled).to_vec();
        let flat = g.reshape(pooled, [shape[0], shape[1]])?;
        let logits = g.linear(flat, p("head.weight".into()), p("head.bias".into()))?;
        if !g.value(logits).all_finite() {
            return Err(Error::Degenerate("forward pass produced non-finite logits".into()));
        }
        Ok(ForwardPass {
            logits,
            hook,
            params,
            batch_stats,
        })
    }

    /// Inference-mode logits `[B, num_classes]`.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, batch, Mode::Eval)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Class probabilities for a single `[C,H,W]` image.
    pub fn predict_proba(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.rank() != 3 {
            return Err(Error::Shape(format!(
                "predict_proba takes one [C,H,W] image, got {:?}",
                image.shape()
            )));
        }
        let logits = self.logits(image)?;
        Ok(softmax(&logits, 1)?.into_values())
    }

    /// Per-row class probabilities for a batch.
    pub fn predict_batch(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let probs = softmax(&self.logits(batch)?, 1)?;
        let k = self.num_classes();
        Ok(probs.values().chunks(k).map(<[f64]>::to_vec).collect())
    }
}

/// Names and shapes a model with this config must carry: parameters first,
/// then `{layer}.running_mean` / `{layer}.running_var` per normalization layer.
pub(crate) fn expected_tensors(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (params, norms) = layout(config);
    let mut out: Vec<(String, Vec<usize>)> =
        params.into_iter().map(|(n, s, _)| (n, s)).collect();
    for (name, c) in norms {
        out.push((format!("{name}.running_mean"), vec![c]));
        out.push((format!("{name}.running_var"), vec![c]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let dist = rand_distr::Uniform::new(0.0, 1.0).unwrap();
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn desk_model_output_shape() {
        let model = build_model(&ModelConfig::desk(7, 3)).unwrap();
        let logits = model.logits(&image(1, &[3, 32, 32])).unwrap();
        assert_eq!(logits.shape(), &[1, 7]);
        let batch = model.logits(&image(2, &[2, 3, 32, 32])).unwrap();
        assert_eq!(batch.shape(), &[2, 7]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&ModelConfig::desk(7, 11)).unwrap();
        let b = build_model(&ModelConfig::desk(7, 11)).unwrap();
        let c = build_model(&ModelConfig::desk(7, 12)).unwrap();
        let bits = |m: &Model| -> Vec<u64> {
            m.params()
                .iter()
                .flat_map(|p| p.tensor.values().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn invalid_stage_order() {
        let mut cfg = ModelConfig::desk(7, 0);
        cfg.stages.swap(1, 2);
        assert!(matches!(build_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut model = build_model(&ModelConfig::desk(4, 0)).unwrap();
        for name in ["head.weight", "head.bias"] {
            model.param_mut(name).unwrap().values_mut().fill(0.0);
        }
        let logits = model.logits(&image(5, &[3, 32, 32])).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));
        let p = model.predict_proba(&image(5, &[3, 32, 32])).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identical_images_identical_rows() {
        let model = build_model(&ModelConfig::desk(3, 9)).unwrap();
        let one = image(7, &[3, 32, 32]);
        let two = Tensor::new([2, 3, 32, 32], [one.values(), one.values()].concat()).unwrap();
        let logits = model.logits(&two).unwrap();
        assert_eq!(logits.values()[..3], logits.values()[3..]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = build_model(&ModelConfig::desk(7, 4)).unwrap();
        let p = model.predict_proba(&image(8, &[3, 32, 32])).unwrap();
        assert!(p.iter().all(|&v| v > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_input() {
        let model = build_model(&ModelConfig::desk(7, 4)).unwrap();
        assert!(matches!(model.logits(&image(1, &[3, 16, 16])), Err(Error::Shape(_))));
        assert!(matches!(model.logits(&image(1, &[1, 32, 32])), Err(Error::Shape(_))));
    }

    #[test]
    fn hook_has_last_conv_extent() {
        let cfg = ModelConfig::desk(7, 4);
        let model = build_model(&cfg).unwrap();
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &image(3, &[2, 3, 32, 32]), Mode::Train).unwrap();
        let hook = pass.hook.unwrap();
        let (h, w) = cfg.last_conv_extent().unwrap();
        assert_eq!(g.shape(hook), &[2, 16, h, w]);
        // stem + 2 mbconv blocks × 2 layers
        assert_eq!(pass.batch_stats.len(), 5);
    }

    #[test]
    fn canonical_names() {
        let model = build_model(&ModelConfig::desk(7, 0)).unwrap();
        let names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "stage0.block0.conv.weight");
        assert!(names.contains(&"stage1.block0.shortcut.weight"));
        assert!(!names.contains(&"stage1.block1.shortcut.weight"));
        assert!(names.contains(&"stage2.block1.ffn.project.bias"));
        assert_eq!(names.last(), Some(&"head.bias"));
    }
}
