//! Encoder, part pooling and projection heads.
//!
//! The encoder splits an image into non-overlapping patches, one per
//! feature-map cell, and applies two shared affine+ReLU stages to every
//! patch. The resulting feature map is kept channels-last as a
//! `[batch * map_height * map_width, channels]` matrix with rows ordered
//! `(sample, row, column)`, so both the global average and the horizontal
//! stripe averages are contiguous row groups.
//!
//! Three projection heads (FC, batch norm, L2 norm) map the pooled global
//! feature, each pooled stripe feature (one head shared across stripes), and
//! the concatenation of all stripe features into the common key space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub map_height: usize,
    pub map_width: usize,
    pub channels: usize,
    pub stripes: usize,
    pub key_dim: usize,
    /// Running statistics decay: `running = decay * running + (1 - decay) * batch`.
    pub bn_decay: f64,
    pub bn_eps: f64,
    /// Route stripe features through the global projection head instead of
    /// a dedicated one.
    pub share_global_stripe_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 16,
            image_channels: 3,
            map_height: 8,
            map_width: 4,
            channels: 64,
            stripes: 8,
            key_dim: 64,
            bn_decay: 0.9,
            bn_eps: 1e-5,
            share_global_stripe_projection: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("image_channels", self.image_channels),
            ("map_height", self.map_height),
            ("map_width", self.map_width),
            ("channels", self.channels),
            ("stripes", self.stripes),
            ("key_dim", self.key_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if self.image_height % self.map_height != 0 || self.image_width % self.map_width != 0 {
            return Err(Error::config(format!(
                "image {}x{} does not tile into a {}x{} feature map",
                self.image_height, self.image_width, self.map_height, self.map_width
            )));
        }
        if self.map_height % self.stripes != 0 {
            return Err(Error::config(format!(
                "feature map height {} is not divisible by {} stripes",
                self.map_height, self.stripes
            )));
        }
        if !(0.0..1.0).contains(&self.bn_decay) || self.bn_eps <= 0.0 {
            return Err(Error::config("bn_decay must be in [0, 1) and bn_eps > 0"));
        }
        Ok(())
    }

    pub fn patch_height(&self) -> usize {
        self.image_height / self.map_height
    }

    pub fn patch_width(&self) -> usize {
        self.image_width / self.map_width
    }

    pub fn patch_len(&self) -> usize {
        self.patch_height() * self.patch_width() * self.image_channels
    }

    pub fn cells(&self) -> usize {
        self.map_height * self.map_width
    }

    /// Feature-map rows that make up one stripe.
    pub fn cells_per_stripe(&self) -> usize {
        self.cells() / self.stripes
    }

    pub fn pixels(&self) -> usize {
        self.image_height * self.image_width * self.image_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("static shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(n: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[n], 1.0),
            beta: Tensor::zeros(&[n]),
            running_mean: Tensor::zeros(&[n]),
            running_var: Tensor::filled(&[n], 1.0),
        }
    }
}

/// FC -> BN -> L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub fc: Linear,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub enc1: Linear,
    pub enc2: Linear,
    pub proj_global: Projection,
    /// `None` when stripes share the global head.
    pub proj_stripe: Option<Projection>,
    pub proj_concat: Projection,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6465_6c00);
        let c = config.channels;
        let d = config.key_dim;
        let proj = |rng: &mut ChaCha8Rng, fan_in| Projection {
            fc: Linear::init(rng, fan_in, d, 1.0),
            bn: BatchNorm::new(d),
        };
        let enc1 = Linear::init(&mut rng, config.patch_len(), c, 2.0);
        let enc2 = Linear::init(&mut rng, c, c, 2.0);
        let proj_global = proj(&mut rng, c);
        let proj_stripe = proj(&mut rng, c);
        let proj_concat = proj(&mut rng, c * config.stripes);
        Ok(Self {
            config: config.clone(),
            enc1,
            enc2,
            proj_global,
            proj_stripe: (!config.share_global_stripe_projection).then_some(proj_stripe),
            proj_concat,
        })
    }

    fn heads(&self) -> Vec<(&'static str, &Projection)> {
        let mut v = vec![("proj_global", &self.proj_global)];
        if let Some(p) = &self.proj_stripe {
            v.push(("proj_stripe", p));
        }
        v.push(("proj_concat", &self.proj_concat));
        v
    }

    /// Every tensor, trainable or not, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("enc1.weight".to_string(), &self.enc1.weight),
            ("enc1.bias".to_string(), &self.enc1.bias),
            ("enc2.weight".to_string(), &self.enc2.weight),
            ("enc2.bias".to_string(), &self.enc2.bias),
        ];
        for (name, p) in self.heads() {
            out.push((format!("{name}.fc.weight"), &p.fc.weight));
            out.push((format!("{name}.fc.bias"), &p.fc.bias));
            out.push((format!("{name}.bn.gamma"), &p.bn.gamma));
            out.push((format!("{name}.bn.beta"), &p.bn.beta));
            out.push((format!("{name}.bn.running_mean"), &p.bn.running_mean));
            out.push((format!("{name}.bn.running_var"), &p.bn.running_var));
        }
        out
    }

    /// Names of the tensors updated by gradient descent.
    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !n.contains("running_"))
            .collect()
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (head, rest) = name.split_once('.')?;
        match head {
            "enc1" | "enc2" => {
                let l = if head == "enc1" { &mut self.enc1 } else { &mut self.enc2 };
                match rest {
                    "weight" => Some(&mut l.weight),
                    "bias" => Some(&mut l.bias),
                    _ => None,
                }
            }
            "proj_global" | "proj_stripe" | "proj_concat" => {
                let p = match head {
                    "proj_global" => &mut self.proj_global,
                    "proj_stripe" => self.proj_stripe.as_mut()?,
                    _ => &mut self.proj_concat,
                };
                match rest {
                    "fc.weight" => Some(&mut p.fc.weight),
                    "fc.bias" => Some(&mut p.fc.bias),
                    "bn.gamma" => Some(&mut p.bn.gamma),
                    "bn.beta" => Some(&mut p.bn.beta),
                    "bn.running_mean" => Some(&mut p.bn.running_mean),
                    "bn.running_var" => Some(&mut p.bn.running_var),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    /// Overwrites the named tensor, checking the shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensor_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_tensor",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Folds the batch statistics recorded during a training-mode forward
    /// pass into the running estimates.
    pub fn update_running_stats(&mut self, graph: &Graph, fwd: &BatchForward) {
        let decay = self.config.bn_decay;
        for (head, var, rows) in &fwd.bn_nodes {
            let Some((mean, var_b)) = graph.batch_stats(*var) else {
                continue;
            };
            let p = match *head {
                "proj_global" => &mut self.proj_global,
                "proj_stripe" => match self.proj_stripe.as_mut() {
                    Some(p) => p,
                    None => continue,
                },
                _ => &mut self.proj_concat,
            };
            let unbias = if *rows > 1 {
                *rows as f64 / (*rows as f64 - 1.0)
            } else {
                1.0
            };
            for (r, m) in p.bn.running_mean.data_mut().iter_mut().zip(mean) {
                *r = decay * *r + (1.0 - decay) * m;
            }
            for (r, v) in p.bn.running_var.data_mut().iter_mut().zip(var_b) {
                *r = decay * *r + (1.0 - decay) * v * unbias;
            }
        }
    }
}

struct LinearVars {
    weight: Var,
    bias: Var,
}

struct ProjectionVars {
    fc: LinearVars,
    gamma: Var,
    beta: Var,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// Model parameters bound as leaves of one graph.
pub struct ParamVars {
    enc1: LinearVars,
    enc2: LinearVars,
    proj_global: ProjectionVars,
    proj_stripe: Option<ProjectionVars>,
    proj_concat: ProjectionVars,
}

/// Binds every parameter into `graph`, as trainable leaves when `trainable`.
pub fn bind_params(graph: &mut Graph, params: &ModelParams, trainable: bool) -> ParamVars {
    let leaf = |g: &mut Graph, name: String, t: &Tensor| {
        if trainable {
            g.param(&name, t.clone())
        } else {
            g.bind(&name, t.clone())
        }
    };
    let linear = |g: &mut Graph, prefix: &str, l: &Linear| LinearVars {
        weight: leaf(g, format!("{prefix}.weight"), &l.weight),
        bias: leaf(g, format!("{prefix}.bias"), &l.bias),
    };
    let enc1 = linear(graph, "enc1", &params.enc1);
    let enc2 = linear(graph, "enc2", &params.enc2);
    let projection = |g: &mut Graph, prefix: &str, p: &Projection| ProjectionVars {
        fc: LinearVars {
            weight: leaf(g, format!("{prefix}.fc.weight"), &p.fc.weight),
            bias: leaf(g, format!("{prefix}.fc.bias"), &p.fc.bias),
        },
        gamma: leaf(g, format!("{prefix}.bn.gamma"), &p.bn.gamma),
        beta: leaf(g, format!("{prefix}.bn.beta"), &p.bn.beta),
        running_mean: p.bn.running_mean.data().to_vec(),
        running_var: p.bn.running_var.data().to_vec(),
    };
    let proj_global = projection(graph, "proj_global", &params.proj_global);
    let proj_stripe = params
        .proj_stripe
        .as_ref()
        .map(|p| projection(graph, "proj_stripe", p));
    let proj_concat = projection(graph, "proj_concat", &params.proj_concat);
    ParamVars {
        enc1,
        enc2,
        proj_global,
        proj_stripe,
        proj_concat,
    }
}

/// Rearranges `[H, W, C]` images into a `[batch * cells, patch_len]` matrix
/// of flattened patches, rows ordered `(sample, map_row, map_col)`.
pub fn patchify(config: &ModelConfig, images: &[&[f32]]) -> Result<Tensor> {
    let (ph, pw, ch) = (config.patch_height(), config.patch_width(), config.image_channels);
    let row_stride = config.image_width * ch;
    let mut data = Vec::with_capacity(images.len() * config.cells() * config.patch_len());
    for (i, img) in images.iter().enumerate() {
        if img.len() != config.pixels() {
            return Err(Error::shape(
                "extract_features",
                format!(
                    "image {i} has {} values, expected {}x{}x{}",
                    img.len(),
                    config.image_height,
                    config.image_width,
                    ch
                ),
            ));
        }
        for mr in 0..config.map_height {
            for mc in 0..config.map_width {
                for y in 0..ph {
                    let start = (mr * ph + y) * row_stride + mc * pw * ch;
                    data.extend(img[start..start + pw * ch].iter().map(|&v| v as f64));
                }
            }
        }
    }
    Tensor::matrix(images.len() * config.cells(), config.patch_len(), data)
}

/// Runs the encoder; returns the `[batch * cells, channels]` feature map.
pub fn extract_features(
    graph: &mut Graph,
    pv: &ParamVars,
    config: &ModelConfig,
    images: &[&[f32]],
) -> Result<Var> {
    let patches = graph.input(patchify(config, images)?);
    let h = graph.matmul(patches, pv.enc1.weight)?;
    let h = graph.add_bias(h, pv.enc1.bias)?;
    let h = graph.relu(h)?;
    let h = graph.matmul(h, pv.enc2.weight)?;
    let h = graph.add_bias(h, pv.enc2.bias)?;
    graph.relu(h)
}

/// Global average `[batch, C]` and stripe averages `[batch * stripes, C]`.
pub fn pool_features(graph: &mut Graph, config: &ModelConfig, fmap: Var) -> Result<(Var, Var)> {
    let global = graph.mean_pool_rows(fmap, config.cells())?;
    let stripes = graph.mean_pool_rows(fmap, config.cells_per_stripe())?;
    Ok((global, stripes))
}

fn apply_projection(
    graph: &mut Graph,
    p: &ProjectionVars,
    x: Var,
    train_mode: bool,
    eps: f64,
) -> Result<(Var, Var)> {
    let h = graph.matmul(x, p.fc.weight)?;
    let h = graph.add_bias(h, p.fc.bias)?;
    let bn = if train_mode {
        graph.batch_norm_train(h, p.gamma, p.beta, eps)?
    } else {
        graph.batch_norm_eval(h, p.gamma, p.beta, &p.running_mean, &p.running_var, eps)?
    };
    Ok((graph.l2_normalize(bn)?, bn))
}

/// Graph handles produced by one forward pass over a batch.
pub struct BatchForward {
    pub batch: usize,
    pub fmap: Var,
    pub pooled_global: Var,
    pub pooled_stripes: Var,
    /// `[batch, d]`
    pub v_global: Var,
    /// `[batch * stripes, d]`, rows ordered `(sample, stripe)`
    pub v_stripes: Var,
    /// `[batch, d]`
    pub v_concat: Var,
    bn_nodes: Vec<(&'static str, Var, usize)>,
}

/// Projects pooled features to unit keys.
pub fn project_keys(
    graph: &mut Graph,
    pv: &ParamVars,
    config: &ModelConfig,
    pooled_global: Var,
    pooled_stripes: Var,
    train_mode: bool,
) -> Result<(Var, Var, Var, Vec<(&'static str, Var, usize)>)> {
    let eps = config.bn_eps;
    let batch = graph.value(pooled_global).rows();
    let stripe_rows = graph.value(pooled_stripes).rows();
    let mut bn_nodes = Vec::new();
    let (v_global, v_stripes) = match &pv.proj_stripe {
        Some(ps) => {
            let (vg, bg) = apply_projection(graph, &pv.proj_global, pooled_global, train_mode, eps)?;
            let (vs, bs) = apply_projection(graph, ps, pooled_stripes, train_mode, eps)?;
            bn_nodes.push(("proj_global", bg, batch));
            bn_nodes.push(("proj_stripe", bs, stripe_rows));
            (vg, vs)
        }
        None => {
            let stacked = graph.concat_rows(&[pooled_global, pooled_stripes])?;
            let (v, b) = apply_projection(graph, &pv.proj_global, stacked, train_mode, eps)?;
            bn_nodes.push(("proj_global", b, batch + stripe_rows));
            (graph.rows(v, 0, batch)?, graph.rows(v, batch, stripe_rows)?)
        }
    };
    let concat = graph.reshape(pooled_stripes, &[batch, config.stripes * config.channels])?;
    let (v_concat, bc) = apply_projection(graph, &pv.proj_concat, concat, train_mode, eps)?;
    bn_nodes.push(("proj_concat", bc, batch));
    Ok((v_global, v_stripes, v_concat, bn_nodes))
}

/// Full forward pass for a batch of images.
pub fn forward_batch(
    graph: &mut Graph,
    pv: &ParamVars,
    config: &ModelConfig,
    images: &[&[f32]],
    train_mode: bool,
) -> Result<BatchForward> {
    let fmap = extract_features(graph, pv, config, images)?;
    let (pooled_global, pooled_stripes) = pool_features(graph, config, fmap)?;
    let (v_global, v_stripes, v_concat, bn_nodes) =
        project_keys(graph, pv, config, pooled_global, pooled_stripes, train_mode)?;
    Ok(BatchForward {
        batch: images.len(),
        fmap,
        pooled_global,
        pooled_stripes,
        v_global,
        v_stripes,
        v_concat,
        bn_nodes,
    })
}

/// Detached keys for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedKeys {
    pub v_global: Vec<f64>,
    /// `stripes` keys of length `d`, flattened.
    pub v_stripes: Vec<f64>,
    pub v_local_concat: Vec<f64>,
}

impl ProjectedKeys {
    pub fn stripe(&self, j: usize, d: usize) -> &[f64] {
        &self.v_stripes[j * d..(j + 1) * d]
    }
}

impl BatchForward {
    pub fn keys(&self, graph: &Graph, config: &ModelConfig, b: usize) -> ProjectedKeys {
        let s = config.stripes;
        let vs = graph.value(self.v_stripes);
        let d = vs.cols();
        ProjectedKeys {
            v_global: graph.value(self.v_global).row(b).to_vec(),
            v_stripes: vs.data()[b * s * d..(b + 1) * s * d].to_vec(),
            v_local_concat: graph.value(self.v_concat).row(b).to_vec(),
        }
    }
}

/// Evaluation-mode keys for many images, processed in chunks.
pub fn embed(params: &ModelParams, images: &[&[f32]]) -> Result<Vec<ProjectedKeys>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut g = Graph::new();
        let pv = bind_params(&mut g, params, false);
        let fwd = forward_batch(&mut g, &pv, &params.config, chunk, false)?;
        for b in 0..chunk.len() {
            out.push(fwd.keys(&g, &params.config, b));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_height: 8,
            image_width: 4,
            image_channels: 2,
            map_height: 4,
            map_width: 2,
            channels: 5,
            stripes: 4,
            key_dim: 6,
            ..ModelConfig::default()
        }
    }

    fn random_image(cfg: &ModelConfig, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.pixels()).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn config_rejects_bad_stripes() {
        let cfg = ModelConfig {
            stripes: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_image_and_zero_biases_give_zero_map() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let img = vec![0.0f32; cfg.pixels()];
        let mut g = Graph::new();
        let pv = bind_params(&mut g, &params, false);
        let fmap = extract_features(&mut g, &pv, &cfg, &[&img]).unwrap();
        assert_eq!(g.value(fmap).shape(), &[cfg.cells(), cfg.channels]);
        assert!(g.value(fmap).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_are_bit_identical_across_runs() {
        let cfg = ModelConfig::default();
        let img = random_image(&cfg, 7);
        let run = || {
            let params = ModelParams::init(&cfg, 11).unwrap();
            let mut g = Graph::new();
            let pv = bind_params(&mut g, &params, false);
            let f = extract_features(&mut g, &pv, &cfg, &[&img]).unwrap();
            g.value(f).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn encoder_matches_straight_line_reimplementation() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let img = random_image(&cfg, 9);
        let mut g = Graph::new();
        let pv = bind_params(&mut g, &params, false);
        let fmap = extract_features(&mut g, &pv, &cfg, &[&img]).unwrap();
        let got = g.value(fmap);

        let (ph, pw, ch, c) = (2, 2, 2, cfg.channels);
        let w1 = params.enc1.weight.data();
        let w2 = params.enc2.weight.data();
        for mr in 0..cfg.map_height {
            for mc in 0..cfg.map_width {
                let mut patch = Vec::new();
                for y in 0..ph {
                    for x in 0..pw {
                        for k in 0..ch {
                            let py = mr * ph + y;
                            let px = mc * pw + x;
                            patch.push(img[(py * cfg.image_width + px) * ch + k] as f64);
                        }
                    }
                }
                let mut h1 = vec![0.0; c];
                for (o, h) in h1.iter_mut().enumerate() {
                    let mut s = params.enc1.bias.data()[o];
                    for (i, p) in patch.iter().enumerate() {
                        s += p * w1[i * c + o];
                    }
                    *h = s.max(0.0);
                }
                let cell = mr * cfg.map_width + mc;
                for o in 0..c {
                    let mut s = params.enc2.bias.data()[o];
                    for (i, h) in h1.iter().enumerate() {
                        s += h * w2[i * c + o];
                    }
                    let expect = s.max(0.0);
                    assert!((got.row(cell)[o] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let cfg = ModelConfig::default();
        let mut g = Graph::new();
        let fmap = g.input(Tensor::filled(&[cfg.cells(), cfg.channels], 3.0));
        let (gl, st) = pool_features(&mut g, &cfg, fmap).unwrap();
        assert!(g.value(gl).data().iter().all(|&v| v == 3.0));
        assert_eq!(g.value(st).shape(), &[cfg.stripes, cfg.channels]);
        assert!(g.value(st).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn row_index_map_pools_to_row_means() {
        let cfg = ModelConfig {
            map_height: 8,
            map_width: 1,
            channels: 1,
            stripes: 8,
            image_width: 4,
            ..ModelConfig::default()
        };
        let mut g = Graph::new();
        let fmap = g.input(Tensor::matrix(8, 1, (0..8).map(|r| r as f64).collect()).unwrap());
        let (gl, st) = pool_features(&mut g, &cfg, fmap).unwrap();
        assert_eq!(g.value(st).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(g.value(gl).data(), &[3.5]);
    }

    #[test]
    fn stripe_mean_equals_global() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..cfg.cells() * cfg.channels).map(|_| rng.random::<f64>()).collect();
        let mut g = Graph::new();
        let fmap = g.input(Tensor::matrix(cfg.cells(), cfg.channels, data).unwrap());
        let (gl, st) = pool_features(&mut g, &cfg, fmap).unwrap();
        for c in 0..cfg.channels {
            let m: f64 = (0..cfg.stripes).map(|j| g.value(st).row(j)[c]).sum::<f64>()
                / cfg.stripes as f64;
            assert!((m - g.value(gl).data()[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn keys_are_unit_norm_in_both_modes() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 2).unwrap();
        let imgs: Vec<Vec<f32>> = (0..4).map(|s| random_image(&cfg, s)).collect();
        let refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        for train in [true, false] {
            let mut g = Graph::new();
            let pv = bind_params(&mut g, &params, train);
            let fwd = forward_batch(&mut g, &pv, &cfg, &refs, train).unwrap();
            for b in 0..refs.len() {
                let k = fwd.keys(&g, &cfg, b);
                assert!((crate::tensor::norm(&k.v_global) - 1.0).abs() < 1e-9);
                assert!((crate::tensor::norm(&k.v_local_concat) - 1.0).abs() < 1e-9);
                for j in 0..cfg.stripes {
                    assert!((crate::tensor::norm(k.stripe(j, cfg.key_dim)) - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn stripe_projection_is_permutation_covariant() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pooled: Vec<f64> = (0..cfg.stripes * cfg.channels).map(|_| rng.random()).collect();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Vec::new();
        for &p in &perm {
            permuted.extend_from_slice(&pooled[p * cfg.channels..(p + 1) * cfg.channels]);
        }
        let run = |rows: Vec<f64>| {
            let mut g = Graph::new();
            let pv = bind_params(&mut g, &params, false);
            let gl = g.input(Tensor::matrix(1, cfg.channels, rows[..cfg.channels].to_vec()).unwrap());
            let st = g.input(Tensor::matrix(cfg.stripes, cfg.channels, rows).unwrap());
            let (_, vs, _, _) = project_keys(&mut g, &pv, &cfg, gl, st, false).unwrap();
            g.value(vs).clone()
        };
        let a = run(pooled);
        let b = run(permuted);
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b.row(i), a.row(p));
        }
    }

    #[test]
    fn constant_map_gives_coinciding_stripe_keys() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 4).unwrap();
        let mut g = Graph::new();
        let pv = bind_params(&mut g, &params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row: Vec<f64> = (0..cfg.channels).map(|_| rng.random()).collect();
        let data: Vec<f64> = (0..cfg.cells()).flat_map(|_| row.clone()).collect();
        let fmap = g.input(Tensor::matrix(cfg.cells(), cfg.channels, data).unwrap());
        let (gl, st) = pool_features(&mut g, &cfg, fmap).unwrap();
        let (_, vs, _, _) = project_keys(&mut g, &pv, &cfg, gl, st, false).unwrap();
        let t = g.value(vs);
        for j in 1..cfg.stripes {
            assert_eq!(t.row(j), t.row(0));
        }
    }

    #[test]
    fn shared_projection_routes_stripes_through_global_head() {
        let cfg = ModelConfig {
            share_global_stripe_projection: true,
            ..small_config()
        };
        let params = ModelParams::init(&cfg, 1).unwrap();
        assert!(params.proj_stripe.is_none());
        assert!(params.trainable_names().iter().all(|n| !n.starts_with("proj_stripe")));
        let img = random_image(&cfg, 2);
        let keys = embed(&params, &[&img]).unwrap();
        assert_eq!(keys[0].v_stripes.len(), cfg.stripes * cfg.key_dim);
    }

    #[test]
    fn projection_weight_gradient_matches_finite_differences() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 6).unwrap();
        let imgs: Vec<Vec<f32>> = (0..3).map(|s| random_image(&cfg, 100 + s)).collect();
        let refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fixed: Vec<f64> = (0..cfg.key_dim).map(|_| rng.random::<f64>() - 0.5).collect();

        let objective = |p: &ModelParams, graph: &mut Graph| -> Result<Var> {
            let pv = bind_params(graph, p, true);
            let fwd = forward_batch(graph, &pv, &cfg, &refs, true)?;
            let row = graph.rows(fwd.v_global, 1, 1)?;
            let k = graph.input(Tensor::matrix(1, cfg.key_dim, fixed.clone())?);
            graph.dot(row, k)
        };
        let mut g = Graph::new();
        let loss = objective(&params, &mut g).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad_by_name("proj_global.fc.weight").unwrap();

        let fd = finite_difference_gradient(
            |w| {
                let mut p = params.clone();
                p.set_tensor("proj_global.fc.weight", w.clone())?;
                let mut h = Graph::new();
                let l = objective(&p, &mut h)?;
                Ok(h.value(l).item())
            },
            &params.proj_global.fc.weight,
            1e-5,
        )
        .unwrap();
        for (a, f) in analytic.data().iter().zip(fd.data()) {
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn running_stats_follow_decay() {
        let cfg = small_config();
        let mut params = ModelParams::init(&cfg, 6).unwrap();
        let imgs: Vec<Vec<f32>> = (0..4).map(|s| random_image(&cfg, s)).collect();
        let refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let mut g = Graph::new();
        let pv = bind_params(&mut g, &params, true);
        let fwd = forward_batch(&mut g, &pv, &cfg, &refs, true).unwrap();
        let (mean, _) = {
            let bn = fwd.bn_nodes[0].1;
            let (m, v) = g.batch_stats(bn).unwrap();
            (m.to_vec(), v.to_vec())
        };
        params.update_running_stats(&g, &fwd);
        for (r, m) in params.proj_global.bn.running_mean.data().iter().zip(&mean) {
            assert!((r - 0.1 * m).abs() < 1e-15);
        }
        assert!(params.all_finite());
    }
}
