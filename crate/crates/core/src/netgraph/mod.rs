//! Fully convolutional UNet denoiser backbone with noise-level conditioning.
//!
//! The network never applies a dense layer across spatial axes, so the same
//! parameters run on quarter-size patches, full images and enlarged canvases.
//! The noise level enters through a small embedding MLP whose output drives a
//! per-channel scale/shift in every residual block.

pub(crate) mod kernels;
mod optim;
mod tape;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use optim::{optimizer_step, AdamConfig, AdamState};
pub use tape::{Adjoints, Tape, Var};

/// Architecture of the denoiser network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Image channels plus the two coordinate channels.
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Number of 2x down/up-sampling levels.
    pub depth: usize,
    pub emb_dim: usize,
    /// Class count for conditional models; an extra null row encodes "no label".
    pub num_classes: Option<usize>,
    /// Smallest spatial extent the network must accept (the quarter-size patch).
    pub min_resolution: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::for_images(3, 32, 2, 8)
    }
}

impl NetConfig {
    pub fn for_images(image_channels: usize, base_width: usize, depth: usize, min_resolution: usize) -> Self {
        NetConfig {
            in_channels: image_channels + 2,
            out_channels: image_channels + 2,
            base_width,
            depth,
            emb_dim: 32,
            num_classes: None,
            min_resolution,
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = Some(num_classes);
        self
    }

    pub fn image_channels(&self) -> usize {
        self.in_channels - 2
    }

    /// Label id of the unconditional (null) class.
    pub fn null_class(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 3 {
            return Err(Error::config(
                "in_channels",
                "need at least one image channel plus two coordinate channels",
            ));
        }
        if self.out_channels != self.in_channels {
            return Err(Error::config("out_channels", "must equal in_channels"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be positive"));
        }
        if self.emb_dim < 2 || !self.emb_dim.is_multiple_of(2) {
            return Err(Error::config("emb_dim", "must be an even number >= 2"));
        }
        if self.num_classes == Some(0) {
            return Err(Error::config("num_classes", "must be positive when present"));
        }
        let stride = 1usize << self.depth;
        if self.min_resolution == 0 || !self.min_resolution.is_multiple_of(stride) {
            return Err(Error::config(
                "depth",
                format!(
                    "smallest resolution {} is not divisible by 2^{} = {stride}",
                    self.min_resolution, self.depth
                ),
            ));
        }
        Ok(())
    }

    /// Spatial divisor every input extent must respect.
    pub fn stride(&self) -> usize {
        1 << self.depth
    }

    pub fn level_width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            2 * self.base_width
        }
    }

    /// Upper bound on how far (in input pixels) an output pixel can see.
    pub fn receptive_radius(&self) -> usize {
        let levels: usize = (0..self.depth).map(|l| 6 << l).sum();
        2 + levels + (2 << self.depth)
    }

    /// Multiply-accumulates spent in convolutions for one `h x w` input.
    pub fn conv_macs(&self, h: usize, w: usize) -> u64 {
        let mut total = 0u64;
        let conv = |cin: usize, cout: usize, k: usize, px: usize| (cin * cout * k * k * px) as u64;
        let px = |l: usize| (h >> l) * (w >> l);
        let block = |cin: usize, cout: usize, p: usize| {
            conv(cin, cout, 3, p) + conv(cout, cout, 3, p) + if cin != cout { conv(cin, cout, 1, p) } else { 0 }
        };
        total += conv(self.in_channels, self.base_width, 3, px(0));
        let mut ch = self.base_width;
        for l in 0..self.depth {
            total += block(ch, self.level_width(l), px(l));
            ch = self.level_width(l);
        }
        total += block(ch, self.level_width(self.depth), px(self.depth));
        ch = self.level_width(self.depth);
        for l in (0..self.depth).rev() {
            total += block(ch + self.level_width(l), self.level_width(l), px(l));
            ch = self.level_width(l);
        }
        total + conv(self.base_width, self.out_channels, 3, px(0))
    }
}

/// Group count used by every normalization layer over `channels`.
fn norm_groups(channels: usize) -> usize {
    (1..=channels.min(8))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug)]
enum Init {
    FanIn(usize),
    Zero,
    One,
    Normal,
}

fn param_layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let e = cfg.emb_dim;
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

    add(
        "conv_in.weight".into(),
        vec![cfg.base_width, cfg.in_channels, 3, 3],
        Init::FanIn(cfg.in_channels * 9),
    );
    add("conv_in.bias".into(), vec![cfg.base_width], Init::Zero);
    add("emb.fc1.weight".into(), vec![e, e], Init::FanIn(e));
    add("emb.fc1.bias".into(), vec![e], Init::Zero);
    add("emb.fc2.weight".into(), vec![e, e], Init::FanIn(e));
    add("emb.fc2.bias".into(), vec![e], Init::Zero);
    if let Some(k) = cfg.num_classes {
        add("class_emb.table".into(), vec![k + 1, e], Init::Normal);
    }

    let mut block = |name: String, cin: usize, cout: usize| {
        add(format!("{name}.norm1.gain"), vec![cin], Init::One);
        add(format!("{name}.norm1.bias"), vec![cin], Init::Zero);
        add(
            format!("{name}.conv1.weight"),
            vec![cout, cin, 3, 3],
            Init::FanIn(cin * 9),
        );
        add(format!("{name}.conv1.bias"), vec![cout], Init::Zero);
        add(format!("{name}.film.weight"), vec![2 * cout, e], Init::FanIn(e));
        add(format!("{name}.film.bias"), vec![2 * cout], Init::Zero);
        add(format!("{name}.norm2.gain"), vec![cout], Init::One);
        add(format!("{name}.norm2.bias"), vec![cout], Init::Zero);
        add(
            format!("{name}.conv2.weight"),
            vec![cout, cout, 3, 3],
            Init::FanIn(cout * 9),
        );
        add(format!("{name}.conv2.bias"), vec![cout], Init::Zero);
        if cin != cout {
            add(format!("{name}.skip.weight"), vec![cout, cin, 1, 1], Init::FanIn(cin));
            add(format!("{name}.skip.bias"), vec![cout], Init::Zero);
        }
    };
    let mut ch = cfg.base_width;
    for l in 0..cfg.depth {
        block(format!("down{l}"), ch, cfg.level_width(l));
        ch = cfg.level_width(l);
    }
    block("mid".into(), ch, cfg.level_width(cfg.depth));
    ch = cfg.level_width(cfg.depth);
    for l in (0..cfg.depth).rev() {
        block(format!("up{l}"), ch + cfg.level_width(l), cfg.level_width(l));
        ch = cfg.level_width(l);
    }
    add("out.norm.gain".into(), vec![cfg.base_width], Init::One);
    add("out.norm.bias".into(), vec![cfg.base_width], Init::Zero);
    add(
        "out.conv.weight".into(),
        vec![cfg.out_channels, cfg.base_width, 3, 3],
        Init::Zero,
    );
    add("out.conv.bias".into(), vec![cfg.out_channels], Init::Zero);
    out
}

/// Named parameter tensors of the denoiser plus its immutable architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<T> {
    config: NetConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> DenoiserParams<T> {
    /// Rebuilds parameters from stored tensors, checking names and shapes against the architecture.
    pub fn from_tensors(config: NetConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &layout {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            t.expect_shape(shape)?;
        }
        for (name, t) in &tensors {
            if !t.all_finite() {
                return Err(Error::Numerical {
                    path: name.clone(),
                    reason: "non-finite parameter".into(),
                });
            }
        }
        Ok(DenoiserParams { config, tensors })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.tensors
    }
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Result<DenoiserParams<T>> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in param_layout(config) {
        let t = match init {
            Init::Zero => Tensor::zeros(&shape),
            Init::One => Tensor::full(&shape, T::one()),
            Init::Normal | Init::FanIn(_) => {
                let std = match init {
                    Init::FanIn(fan_in) => 1.0 / (fan_in as f64).sqrt(),
                    _ => 1.0,
                };
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                Tensor::from_vec(&shape, data)?
            }
        };
        tensors.insert(name, t);
    }
    Ok(DenoiserParams {
        config: config.clone(),
        tensors,
    })
}

/// Parameter leaves registered on a tape.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, params: &DenoiserParams<T>, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Sinusoidal features of the noise conditioning scalar, frequencies 0.5 .. 32.
fn noise_features<T: Scalar>(noise_cond: &[T], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(noise_cond.len() * dim);
    for &c in noise_cond {
        let c = c.as_f64();
        let freq = |k: usize| {
            if half <= 1 {
                1.0
            } else {
                0.5 * 64f64.powf(k as f64 / (half - 1) as f64)
            }
        };
        data.extend((0..half).map(|k| T::of((c * freq(k)).cos())));
        data.extend((0..half).map(|k| T::of((c * freq(k)).sin())));
    }
    Tensor::from_vec(&[noise_cond.len(), dim], data).expect("feature size")
}

fn res_block<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, name: &str, x: Var, emb_act: Var) -> Result<Var> {
    let p = |k: &str| pv.get(&format!("{name}.{k}"));
    let cin = tape.value(x).shape()[1];
    let h = tape.group_norm(x, p("norm1.gain")?, p("norm1.bias")?, norm_groups(cin))?;
    let h = tape.silu(h);
    let h = tape.conv2d(h, p("conv1.weight")?, Some(p("conv1.bias")?))?;
    let ss = tape.linear(emb_act, p("film.weight")?, p("film.bias")?)?;
    let h = tape.film(h, ss)?;
    let cout = tape.value(h).shape()[1];
    let h = tape.group_norm(h, p("norm2.gain")?, p("norm2.bias")?, norm_groups(cout))?;
    let h = tape.silu(h);
    let h = tape.conv2d(h, p("conv2.weight")?, Some(p("conv2.bias")?))?;
    let skip = if cin != cout {
        tape.conv2d(x, p("skip.weight")?, Some(p("skip.bias")?))?
    } else {
        x
    };
    tape.add(h, skip)
}

fn check_labels(cfg: &NetConfig, batch: usize, labels: Option<&[usize]>) -> Result<()> {
    let Some(labels) = labels else { return Ok(()) };
    let Some(k) = cfg.num_classes else {
        return Err(Error::Label {
            label: labels.first().copied().unwrap_or(0),
            num_classes: 0,
        });
    };
    if labels.len() != batch {
        return Err(Error::shape(&[batch], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > k) {
        return Err(Error::Label {
            label: bad,
            num_classes: k,
        });
    }
    Ok(())
}

/// Records the network evaluation `F(x; noise_cond, labels)` on `tape`.
///
/// `labels = None` skips the class embedding entirely; the null class must be
/// passed explicitly to evaluate the unconditional branch of a conditional model.
pub fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &NetConfig,
    x: Var,
    noise_cond: &[T],
    labels: Option<&[usize]>,
) -> Result<Var> {
    let (b, c, h, w) = tape.value(x).dims4()?;
    if c != cfg.in_channels {
        return Err(Error::shape(&[b, cfg.in_channels, h, w], tape.value(x).shape()));
    }
    let stride = cfg.stride();
    if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::InvalidResolution {
            resolution: h.max(w),
            reason: format!("{h}x{w} is not divisible by 2^{} = {stride}", cfg.depth),
        });
    }
    if noise_cond.len() != b {
        return Err(Error::shape(&[b], &[noise_cond.len()]));
    }
    check_labels(cfg, b, labels)?;

    let feats = tape.constant(noise_features(noise_cond, cfg.emb_dim));
    let e = tape.linear(feats, pv.get("emb.fc1.weight")?, pv.get("emb.fc1.bias")?)?;
    let e = tape.silu(e);
    let mut emb = tape.linear(e, pv.get("emb.fc2.weight")?, pv.get("emb.fc2.bias")?)?;
    if let Some(labels) = labels {
        let ce = tape.embedding(pv.get("class_emb.table")?, labels)?;
        emb = tape.add(emb, ce)?;
    }
    let emb_act = tape.silu(emb);

    let mut hcur = tape.conv2d(x, pv.get("conv_in.weight")?, Some(pv.get("conv_in.bias")?))?;
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        hcur = res_block(tape, pv, &format!("down{l}"), hcur, emb_act)?;
        skips.push(hcur);
        hcur = tape.avg_pool2(hcur)?;
    }
    hcur = res_block(tape, pv, "mid", hcur, emb_act)?;
    for l in (0..cfg.depth).rev() {
        let up = tape.upsample2(hcur)?;
        let cat = tape.concat(up, skips[l])?;
        hcur = res_block(tape, pv, &format!("up{l}"), cat, emb_act)?;
    }
    let hcur = tape.group_norm(
        hcur,
        pv.get("out.norm.gain")?,
        pv.get("out.norm.bias")?,
        norm_groups(cfg.base_width),
    )?;
    let hcur = tape.silu(hcur);
    tape.conv2d(hcur, pv.get("out.conv.weight")?, Some(pv.get("out.conv.bias")?))
}

/// Evaluates the raw network output `[B, C+2, h, w]` without recording gradients.
pub fn forward<T: Scalar>(
    params: &DenoiserParams<T>,
    x: &Tensor<T>,
    noise_cond: &[T],
    labels: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let out = forward_graph(&mut tape, &pv, &params.config, xv, noise_cond, labels)?;
    Ok(tape.value(out).clone())
}

/// Reverse-mode gradient of a scalar loss with respect to every parameter.
///
/// Parameters the loss does not depend on get exact zero gradients.
pub fn gradients<T, F>(params: &DenoiserParams<T>, loss: F) -> Result<(T, Gradients<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, true);
    let out = loss(&mut tape, &pv)?;
    let value = *tape
        .value(out)
        .data()
        .first()
        .ok_or_else(|| Error::shape(&[], tape.value(out).shape()))?;
    if !value.is_finite() {
        let path = params
            .tensors
            .iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(k, _)| k.clone())
            .unwrap_or_else(|| "loss".to_string());
        return Err(Error::Numerical {
            path,
            reason: format!("loss evaluated to {value}"),
        });
    }
    let mut adj = tape.backward(out)?;
    let mut grads = BTreeMap::new();
    for (name, var) in pv.iter() {
        let g = adj
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(params.tensors[name].shape()));
        grads.insert(name.clone(), g);
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small_cfg() -> NetConfig {
        let mut c = NetConfig::for_images(1, 4, 2, 4);
        c.emb_dim = 8;
        c
    }

    #[test]
    fn depth_divisibility_rule() {
        assert!(NetConfig::for_images(3, 8, 3, 8).validate().is_ok());
        let err = NetConfig::for_images(3, 8, 4, 8).validate().unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "depth"));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(init_params::<f32, _>(&NetConfig::for_images(3, 8, 4, 8), &mut rng).is_err());
    }

    #[test]
    fn init_is_deterministic_and_count_depends_on_config_only() {
        let cfg = NetConfig::for_images(3, 32, 2, 8);
        let a = init_params::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = init_params::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let c = init_params::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.param_count(), c.param_count());
        assert!(a.get("out.conv.weight").unwrap().max_abs() == 0.0);
    }

    #[test]
    fn fresh_network_outputs_zero_at_any_resolution() {
        let cfg = small_cfg();
        let params = init_params::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for r in [4, 8, 12, 16] {
            let x = Tensor::<f32>::randn(&[2, 3, r, r], &mut rng);
            let y = forward(&params, &x, &[0.1, -0.3], None).unwrap();
            assert_eq!(y.shape(), &[2, 3, r, r]);
            assert_eq!(y.max_abs(), 0.0);
        }
        let x = Tensor::<f32>::zeros(&[1, 3, 6, 6]);
        assert!(matches!(
            forward(&params, &x, &[0.0], None),
            Err(Error::InvalidResolution { .. })
        ));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let cfg = small_cfg();
        let params = init_params::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (loss, grads) = gradients(&params, |tape, pv| {
            let w = pv.get("mid.conv1.weight")?;
            Ok(tape.sum_sq(w))
        })
        .unwrap();
        let w = params.get("mid.conv1.weight").unwrap();
        assert!((loss - w.sum_sq()).abs() < 1e-12);
        for (name, g) in &grads {
            if name == "mid.conv1.weight" {
                assert_eq!(g, &w.map(|v| 2.0 * v));
            } else {
                assert_eq!(g.max_abs(), 0.0, "{name}");
            }
        }
    }

    #[test]
    fn unlabeled_forward_leaves_class_table_untouched() {
        let cfg = small_cfg().with_classes(3);
        let mut params = init_params::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        *params.get_mut("out.conv.weight").unwrap() = Tensor::randn(&[3, 4, 3, 3], &mut rng);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng);
        let (_, grads) = gradients(&params, |tape, pv| {
            let xv = tape.constant(x.clone());
            let y = forward_graph(tape, pv, &cfg, xv, &[0.2, 0.4], None)?;
            Ok(tape.sum_sq(y))
        })
        .unwrap();
        assert_eq!(grads["class_emb.table"].max_abs(), 0.0);
        assert!(grads["conv_in.weight"].max_abs() > 0.0);
        let (_, grads) = gradients(&params, |tape, pv| {
            let xv = tape.constant(x.clone());
            let y = forward_graph(tape, pv, &cfg, xv, &[0.2, 0.4], Some(&[0, 3]))?;
            Ok(tape.sum_sq(y))
        })
        .unwrap();
        assert!(grads["class_emb.table"].max_abs() > 0.0);
        assert!(forward(&params, &x, &[0.2, 0.4], Some(&[0, 4])).is_err());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let cfg = small_cfg();
        let mut params = init_params::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        params.get_mut("mid.conv2.bias").unwrap().data_mut()[0] = f64::NAN;
        let err = gradients(&params, |tape, pv| {
            let b = pv.get("mid.conv2.bias")?;
            Ok(tape.sum_sq(b))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numerical { ref path, .. } if path == "mid.conv2.bias"));
    }

    #[test]
    fn conv_macs_scale_with_area() {
        let cfg = NetConfig::for_images(3, 16, 2, 8);
        let full = cfg.conv_macs(32, 32);
        assert_eq!(full, 4 * cfg.conv_macs(16, 16));
        assert_eq!(full, 16 * cfg.conv_macs(8, 8));
    }
}
