//! The single-branch masked U-Net.
//!
//! Encoder stage 1 sees the raw query slice. Every later stage multiplies its
//! output features by the support mask, max-pooled to that stage's
//! resolution. The bottleneck feeds both a 1x1 prototype projection followed
//! by global average pooling, and a decoder with skip concatenation ending in
//! a 1x1 convolution and a sigmoid.
//!
//! Parameters are split into `theta.*` (encoder and prototype projection)
//! and `phi.*` (decoder and output head).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::phantom::stream_seed;
use crate::tensor::{Scalar, Tensor};

pub const THETA_PREFIX: &str = "theta.";
pub const PHI_PREFIX: &str = "phi.";

const PAPER_BOTTLENECK: usize = 1024;
const PAPER_PROTO_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder stages, including the bottleneck stage.
    pub levels: usize,
    /// Width of stage 1; doubles at every stage.
    pub base_channels: usize,
    pub proto_dim: usize,
    /// `(H, W)` of the slices the model is trained on.
    pub input_size: [usize; 2],
    /// Overrides the widths with a 1024-channel bottleneck and 64-d prototypes.
    pub paper_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 8,
            proto_dim: 16,
            input_size: [64, 64],
            paper_scale: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.levels > 10 {
            return Err(Error::Config(format!("levels {} is unreasonably deep", self.levels)));
        }
        if self.paper_scale && !PAPER_BOTTLENECK.is_multiple_of(1 << (self.levels - 1)) {
            return Err(Error::Config(format!(
                "paper_scale needs 2^(levels-1) to divide {PAPER_BOTTLENECK}"
            )));
        }
        if self.base_channels() < 2 {
            return Err(Error::Config("base_channels must be >= 2".into()));
        }
        if self.proto_dim() == 0 {
            return Err(Error::Config("proto_dim must be >= 1".into()));
        }
        let div = 1 << (self.levels - 1);
        if self.input_size.iter().any(|&e| e == 0 || e % div != 0) {
            return Err(Error::Config(format!(
                "input size {:?} not divisible by 2^(levels-1) = {div}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn base_channels(&self) -> usize {
        if self.paper_scale {
            PAPER_BOTTLENECK >> (self.levels - 1)
        } else {
            self.base_channels
        }
    }

    pub fn proto_dim(&self) -> usize {
        if self.paper_scale {
            PAPER_PROTO_DIM
        } else {
            self.proto_dim
        }
    }

    /// Width of encoder stage `s` (1-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels() << (s - 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.levels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvIdx {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    /// Two convolutions per encoder stage, stage 1 first.
    enc: Vec<[ConvIdx; 2]>,
    proj: ConvIdx,
    /// Two convolutions per decoder stage, indexed by the encoder stage whose
    /// skip they consume (`dec[s - 1]` for stage `s`).
    dec: Vec<[ConvIdx; 2]>,
    head: ConvIdx,
}

/// `(name, [out, in, k, k])` for every convolution, in storage order.
fn conv_specs(cfg: &ModelConfig) -> Vec<(String, [usize; 4])> {
    let mut specs = Vec::new();
    for s in 1..=cfg.levels {
        let cin = if s == 1 { 1 } else { cfg.stage_channels(s - 1) };
        let c = cfg.stage_channels(s);
        specs.push((format!("theta.enc{s}.conv1"), [c, cin, 3, 3]));
        specs.push((format!("theta.enc{s}.conv2"), [c, c, 3, 3]));
    }
    specs.push(("theta.proj".to_string(), [cfg.proto_dim(), cfg.bottleneck_channels(), 1, 1]));
    for s in (1..cfg.levels).rev() {
        let c = cfg.stage_channels(s);
        let cin = cfg.stage_channels(s + 1) + c;
        specs.push((format!("phi.dec{s}.conv1"), [c, cin, 3, 3]));
        specs.push((format!("phi.dec{s}.conv2"), [c, c, 3, 3]));
    }
    specs.push(("phi.head".to_string(), [1, cfg.base_channels(), 1, 1]));
    specs
}

impl Layout {
    fn new(levels: usize) -> Self {
        let conv = |i: usize| ConvIdx {
            weight: 2 * i,
            bias: 2 * i + 1,
        };
        let enc = (0..levels).map(|s| [conv(2 * s), conv(2 * s + 1)]).collect();
        let proj = conv(2 * levels);
        let first_dec = 2 * levels + 1;
        // Decoder convs are stored deepest stage first.
        let mut dec: Vec<[ConvIdx; 2]> = (0..levels - 1)
            .map(|j| [conv(first_dec + 2 * j), conv(first_dec + 2 * j + 1)])
            .collect();
        dec.reverse();
        let head = conv(first_dec + 2 * (levels - 1));
        Self { enc, proj, dec, head }
    }
}

/// All trainable tensors of one model, in a fixed storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn is_theta(name: &str) -> bool {
        name.starts_with(THETA_PREFIX)
    }

    pub fn is_phi(name: &str) -> bool {
        name.starts_with(PHI_PREFIX)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Reassembles parameters from named tensors, inferring the architecture
    /// from their shapes. `input_size` is not recoverable and is taken from
    /// `input_size`.
    pub fn from_named(named: Vec<(String, Tensor<T>)>, input_size: [usize; 2]) -> Result<Self> {
        let get = |name: &str| named.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let levels = (1..)
            .take_while(|s| get(&format!("theta.enc{s}.conv1.weight")).is_some())
            .count();
        let enc1 = get("theta.enc1.conv1.weight")
            .ok_or_else(|| Error::Invalid("missing theta.enc1.conv1.weight".into()))?;
        let proj = get("theta.proj.weight").ok_or_else(|| Error::Invalid("missing theta.proj.weight".into()))?;
        let config = ModelConfig {
            levels,
            base_channels: enc1.shape()[0],
            proto_dim: proj.shape()[0],
            input_size,
            paper_scale: false,
        };
        config.validate()?;
        let mut tensors = Vec::new();
        let mut names = Vec::new();
        for (conv, shape) in conv_specs(&config) {
            for (suffix, want) in [("weight", shape.to_vec()), ("bias", vec![shape[0]])] {
                let name = format!("{conv}.{suffix}");
                let t = get(&name).ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))?;
                if t.shape() != want.as_slice() {
                    return Err(Error::Shape {
                        op: "model_params",
                        detail: format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                    });
                }
                names.push(name);
                tensors.push(t.clone());
            }
        }
        if names.len() != named.len() {
            return Err(Error::Invalid(format!(
                "{} unexpected parameter tensors",
                named.len() - names.len()
            )));
        }
        Ok(Self { config, names, tensors })
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<BoundParams> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams {
            vars,
            layout: Layout::new(self.config.levels),
            levels: self.config.levels,
        })
    }
}

/// He-normal convolution weights (variance `2 / fan_in`) and zero biases.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 4]));
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (conv, shape) in conv_specs(cfg) {
        let fan_in = shape[1] * shape[2] * shape[3];
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        let w: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
        names.push(format!("{conv}.weight"));
        tensors.push(Tensor::new(shape.to_vec(), w)?);
        names.push(format!("{conv}.bias"));
        tensors.push(Tensor::zeros(vec![shape[0]]));
    }
    Ok(ModelParams {
        config: cfg.clone(),
        names,
        tensors,
    })
}

/// Parameter leaves of one tape, in [`ModelParams`] storage order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    layout: Layout,
    levels: usize,
}

impl BoundParams {
    /// Wraps leaves already on a tape, given in [`ModelParams`] storage order.
    pub fn from_vars(vars: Vec<Var>, cfg: &ModelConfig) -> Result<Self> {
        let expected = 2 * conv_specs(cfg).len();
        if vars.len() != expected {
            return Err(Error::Invalid(format!(
                "{} parameter leaves for a model with {expected}",
                vars.len()
            )));
        }
        Ok(Self {
            vars,
            layout: Layout::new(cfg.levels),
            levels: cfg.levels,
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, c: ConvIdx, padding: usize) -> Result<Var> {
        tape.conv2d(x, self.vars[c.weight], self.vars[c.bias], 1, padding)
    }

    fn block<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, convs: [ConvIdx; 2]) -> Result<Var> {
        let x = self.conv(tape, x, convs[0], 1)?;
        let x = tape.relu(x)?;
        let x = self.conv(tape, x, convs[1], 1)?;
        tape.relu(x)
    }
}

/// Encoder outputs: the bottleneck and the per-stage skip features
/// (`skips[s - 1]` for stage `s`; the last entry is the bottleneck itself).
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bottleneck: Var,
    pub skips: Vec<Var>,
}

fn as_nchw<T: Scalar>(tape: &mut Tape<T>, x: Var, what: &'static str) -> Result<Var> {
    match *tape.value(x).shape() {
        [1, h, w] => tape.reshape(x, vec![1, 1, h, w]),
        [1, 1, _, _] => Ok(x),
        ref other => Err(Error::Shape {
            op: what,
            detail: format!("expected a [1, H, W] slice, got {other:?}"),
        }),
    }
}

/// Runs the encoder. With `mask = None` no stage is masked, which is the
/// plain U-Net encoder.
pub fn encode_masked<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    image: Var,
    mask: Option<Var>,
) -> Result<Encoded> {
    let first = encode_first_stage(tape, params, image)?;
    encode_from(tape, params, first, mask)
}

/// The unmasked first encoder stage. Its output can be shared by several
/// support masks applied to the same image.
pub fn encode_first_stage<T: Scalar>(tape: &mut Tape<T>, params: &BoundParams, image: Var) -> Result<Var> {
    let x = as_nchw(tape, image, "encode_masked")?;
    let (h, w) = {
        let s = tape.value(x).shape();
        (s[2], s[3])
    };
    let div = 1 << (params.levels - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape {
            op: "encode_masked",
            detail: format!("slice {h}x{w} not divisible by {div}"),
        });
    }
    params.block(tape, x, params.layout.enc[0])
}

/// Remaining encoder stages on top of [`encode_first_stage`].
pub fn encode_from<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    first: Var,
    mask: Option<Var>,
) -> Result<Encoded> {
    let mut mask = match mask {
        Some(m) => {
            let m = as_nchw(tape, m, "encode_masked")?;
            let ms = tape.value(m).shape();
            let fs = tape.value(first).shape();
            if ms[2..] != fs[2..] {
                return Err(Error::Shape {
                    op: "encode_masked",
                    detail: format!("mask {:?} vs image {:?}", &ms[2..], &fs[2..]),
                });
            }
            Some(m)
        }
        None => None,
    };
    let mut skips = Vec::with_capacity(params.levels);
    let mut feat = first;
    skips.push(feat);
    for stage in 1..params.levels {
        let pooled = tape.maxpool2(feat)?;
        feat = params.block(tape, pooled, params.layout.enc[stage])?;
        if let Some(m) = mask {
            let down = tape.maxpool2(m)?;
            feat = tape.mul(feat, down)?;
            mask = Some(down);
        }
        skips.push(feat);
    }
    Ok(Encoded {
        bottleneck: feat,
        skips,
    })
}

/// Projects the bottleneck to `proto_dim` channels and averages each over
/// space, giving a `[proto_dim]` vector.
pub fn prototype_from<T: Scalar>(tape: &mut Tape<T>, params: &BoundParams, enc: &Encoded) -> Result<Var> {
    let proj = params.conv(tape, enc.bottleneck, params.layout.proj, 0)?;
    let pooled = tape.global_avg_pool(proj)?;
    let dim = tape.value(pooled).shape()[1];
    tape.reshape(pooled, vec![dim])
}

/// Decoder pass ending in per-pixel probabilities of shape `[1, H, W]`.
pub fn decode<T: Scalar>(tape: &mut Tape<T>, params: &BoundParams, enc: &Encoded) -> Result<Var> {
    let mut x = enc.bottleneck;
    for stage in (1..params.levels).rev() {
        let up = tape.upsample2(x)?;
        let cat = tape.concat_channels(up, enc.skips[stage - 1])?;
        x = params.block(tape, cat, params.layout.dec[stage - 1])?;
    }
    let logits = params.conv(tape, x, params.layout.head, 0)?;
    let probs = tape.sigmoid(logits)?;
    let s = tape.value(probs).shape().to_vec();
    tape.reshape(probs, vec![1, s[2], s[3]])
}

pub fn prototype_on<T: Scalar>(tape: &mut Tape<T>, params: &BoundParams, image: Var, mask: Var) -> Result<Var> {
    let enc = encode_masked(tape, params, image, Some(mask))?;
    prototype_from(tape, params, &enc)
}

/// Per-mask prototypes of one image, sharing the first encoder stage.
pub fn prototypes_on<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    image: Var,
    masks: &[Var],
) -> Result<Vec<Var>> {
    let first = encode_first_stage(tape, params, image)?;
    masks
        .iter()
        .map(|&m| {
            let enc = encode_from(tape, params, first, Some(m))?;
            prototype_from(tape, params, &enc)
        })
        .collect()
}

pub fn segment_on<T: Scalar>(tape: &mut Tape<T>, params: &BoundParams, image: Var, mask: Option<Var>) -> Result<Var> {
    let enc = encode_masked(tape, params, image, mask)?;
    decode(tape, params, &enc)
}

/// A class prototype computed from one (image, annotation) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeVector {
    pub values: Vec<f32>,
}

/// Prototype of `image` masked by `support_mask`.
pub fn prototype<T: Scalar>(params: &ModelParams<T>, image: &Tensor<T>, support_mask: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let x = tape.constant(image.clone())?;
    let m = tape.constant(support_mask.clone())?;
    let p = prototype_on(&mut tape, &bound, x, m)?;
    Ok(tape.value(p).clone())
}

/// Segmentation probabilities for `image` given `support_mask`.
pub fn segment<T: Scalar>(params: &ModelParams<T>, image: &Tensor<T>, support_mask: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let x = tape.constant(image.clone())?;
    let m = tape.constant(support_mask.clone())?;
    let y = segment_on(&mut tape, &bound, x, Some(m))?;
    Ok(tape.value(y).clone())
}

/// Plain U-Net forward with no support masking anywhere.
pub fn segment_unmasked<T: Scalar>(params: &ModelParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let x = tape.constant(image.clone())?;
    let y = segment_on(&mut tape, &bound, x, None)?;
    Ok(tape.value(y).clone())
}

/// Pixel-wise mean of the support annotations, a soft mask in `[0, 1]`.
pub fn combine_support<'a, T: Scalar>(annotations: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let mut iter = annotations.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Invalid("support set is empty".into()))?;
    let mut acc: Vec<T> = first.data().to_vec();
    let mut count = 1usize;
    for a in iter {
        if a.shape() != first.shape() {
            return Err(Error::Shape {
                op: "combine_support",
                detail: format!("{:?} vs {:?}", a.shape(), first.shape()),
            });
        }
        for (d, &v) in acc.iter_mut().zip(a.data()) {
            *d = *d + v;
        }
        count += 1;
    }
    let inv = T::one() / T::of(count as f64);
    for d in acc.iter_mut() {
        *d = *d * inv;
    }
    Tensor::new(first.shape().to_vec(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            levels: 3,
            base_channels: 4,
            proto_dim: 5,
            input_size: [16, 16],
            paper_scale: false,
        }
    }

    fn slice(seed: u64, h: usize, w: usize) -> Tensor {
        let mut s = seed;
        let data = (0..h * w)
            .map(|_| {
                s = crate::phantom::mix(s);
                (s >> 40) as f32 / (1u64 << 24) as f32
            })
            .collect();
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn layout_matches_storage_order() {
        let p = init_params(&tiny(), 1).unwrap();
        let layout = Layout::new(3);
        assert_eq!(p.names()[layout.enc[0][0].weight], "theta.enc1.conv1.weight");
        assert_eq!(p.names()[layout.enc[2][1].bias], "theta.enc3.conv2.bias");
        assert_eq!(p.names()[layout.proj.weight], "theta.proj.weight");
        assert_eq!(p.names()[layout.dec[1][0].weight], "phi.dec2.conv1.weight");
        assert_eq!(p.names()[layout.dec[0][1].weight], "phi.dec1.conv2.weight");
        assert_eq!(p.names()[layout.head.bias], "phi.head.bias");
        assert!(p.names().iter().all(|n| ModelParams::<f32>::is_theta(n) ^ ModelParams::<f32>::is_phi(n)));
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_params(&tiny(), 9).unwrap();
        assert_eq!(a, init_params(&tiny(), 9).unwrap());
        assert_ne!(a, init_params(&tiny(), 10).unwrap());
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn shapes() {
        let cfg = tiny();
        let p = init_params(&cfg, 2).unwrap();
        let img = slice(1, 16, 16);
        let mask = Tensor::full(vec![1, 16, 16], 1.0);
        let out = segment(&p, &img, &mask).unwrap();
        assert_eq!(out.shape(), &[1, 16, 16]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(prototype(&p, &img, &mask).unwrap().shape(), &[5]);

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false).unwrap();
        let x = tape.constant(img).unwrap();
        let m = tape.constant(mask).unwrap();
        let enc = encode_masked(&mut tape, &bound, x, Some(m)).unwrap();
        assert_eq!(tape.value(enc.bottleneck).shape(), &[1, 16, 4, 4]);
        assert_eq!(enc.skips.len(), 3);
    }

    #[test]
    fn zero_mask_annihilates_masked_stages() {
        let p = init_params(&tiny(), 3).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false).unwrap();
        let x = tape.constant(slice(4, 16, 16)).unwrap();
        let m = tape.constant(Tensor::zeros(vec![1, 16, 16])).unwrap();
        let enc = encode_masked(&mut tape, &bound, x, Some(m)).unwrap();
        assert!(tape.value(enc.skips[0]).data().iter().any(|&v| v != 0.0));
        for &s in &enc.skips[1..] {
            assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mask_extent_mismatch() {
        let p = init_params(&tiny(), 3).unwrap();
        let err = segment(&p, &slice(1, 16, 16), &Tensor::full(vec![1, 8, 8], 1.0));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn paper_scale_widths() {
        let cfg = ModelConfig {
            paper_scale: true,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.bottleneck_channels(), 1024);
        assert_eq!(cfg.proto_dim(), 64);
        let specs = conv_specs(&cfg);
        let proj = specs.iter().find(|(n, _)| n == "theta.proj").unwrap();
        assert_eq!(proj.1, [64, 1024, 1, 1]);
    }

    #[test]
    fn combine_support_mean() {
        let full = Tensor::new(vec![1, 1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let boxed = Tensor::new(vec![1, 1, 4], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(combine_support([&full]).unwrap(), full);
        let c = combine_support([&full, &boxed, &boxed, &boxed]).unwrap();
        assert_eq!(c.data(), &[1.0, 1.0, 0.75, 0.0]);
        let r = combine_support([&boxed, &full, &boxed, &boxed]).unwrap();
        assert_eq!(c, r);
        assert!(combine_support::<f32>(std::iter::empty()).is_err());
    }

    #[test]
    fn named_round_trip_infers_config() {
        let cfg = tiny();
        let p = init_params(&cfg, 5).unwrap();
        let named: Vec<(String, Tensor)> = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let q = ModelParams::from_named(named, cfg.input_size).unwrap();
        assert_eq!(p, q);
    }
}
