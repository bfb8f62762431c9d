//! Tiny ViT encoder producing multi-scale patch features.

use crate::error::{Error, Result};
use crate::nn::{check_finite, Attention, Bound, FeedForward, Linear, Norm, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        matches!(self, Label::Anomalous)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "normal" => Some(Label::Normal),
            "anomalous" => Some(Label::Anomalous),
            _ => None,
        }
    }
}

/// An image with values in `[0, 1]`, stored `H × W × channels` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    pub label: Label,
    /// Ground-truth anomaly mask, `H × W`.
    pub mask: Option<Vec<bool>>,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
        label: Label,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Dimension {
                op: "image",
                lhs: vec![height, width, channels],
                rhs: vec![pixels.len()],
            });
        }
        if let Some(m) = &mask {
            if m.len() != height * width {
                return Err(Error::Dimension {
                    op: "image mask",
                    lhs: vec![height, width],
                    rhs: vec![m.len()],
                });
            }
        }
        Ok(ImageSample {
            id: id.into(),
            height,
            width,
            channels,
            pixels,
            label,
            mask,
        })
    }
}

/// Per-layer features plus their elementwise mean.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T> {
    pub layers: Vec<Tensor<T>>,
    pub aggregate: Tensor<T>,
    /// Token grid `(n_h, n_w)`, `n_h * n_w == N`.
    pub grid: (usize, usize),
}

/// Graph handles for one encoder pass.
#[derive(Clone, Debug)]
pub struct FeatureVars {
    pub layers: Vec<Var>,
    pub aggregate: Var,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices whose outputs form the multi-scale features.
    pub extract: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            height: 64,
            width: 64,
            channels: 1,
            patch: 8,
            dim: 32,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            extract: vec![2, 3, 4],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.channels == 0 || self.dim == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.extract.is_empty() {
            return Err(Error::Config("no extraction layers".into()));
        }
        let increasing = self.extract.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.extract.iter().all(|&l| l >= 1 && l <= self.depth);
        if !increasing || !in_range {
            return Err(Error::Config(format!(
                "extraction layers {:?} must be strictly increasing within 1..={}",
                self.extract, self.depth
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: FeedForward,
}

impl EncoderBlock {
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Parameter ids of the encoder, independent of the values they index.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayout {
    pub patch_proj: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

/// Encoder configuration, layout and parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub layout: EncoderLayout,
    pub params: ParamSet<T>,
}

impl<T: Real> EncoderParams<T> {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let patch_proj = Linear::init(&mut ps, "enc.patch", config.patch_len(), config.dim, rng);
        let pos = (0..config.tokens() * config.dim)
            .map(|_| T::lit(rng.trunc_normal(crate::nn::INIT_STD)))
            .collect();
        let pos_embed = ps.add(
            "enc.pos",
            Tensor::new(vec![config.tokens(), config.dim], pos)?,
        );
        let hidden = config.dim * config.mlp_ratio;
        let mut blocks = Vec::with_capacity(config.depth);
        for b in 0..config.depth {
            let name = format!("enc.block{b}");
            blocks.push(EncoderBlock {
                norm1: Norm::init(&mut ps, &format!("{name}.norm1"), config.dim),
                attn: Attention::init(
                    &mut ps,
                    &format!("{name}.attn"),
                    config.dim,
                    config.heads,
                    rng,
                )?,
                norm2: Norm::init(&mut ps, &format!("{name}.norm2"), config.dim),
                mlp: FeedForward::init(&mut ps, &format!("{name}.mlp"), config.dim, hidden, rng),
            });
        }
        Ok(EncoderParams {
            config: config.clone(),
            layout: EncoderLayout {
                patch_proj,
                pos_embed,
                blocks,
            },
            params: ps,
        })
    }

    /// Gradient-free pass producing a [`FeatureStack`].
    pub fn encode(&self, img: &ImageSample) -> Result<FeatureStack<T>> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, false);
        let fv = encode(&mut g, &p, &self.layout, &self.config, img)?;
        Ok(FeatureStack {
            layers: fv.layers.iter().map(|&v| g.value(v).clone()).collect(),
            aggregate: g.value(fv.aggregate).clone(),
            grid: fv.grid,
        })
    }
}

/// Splits an image into non-overlapping patches: one row per patch in
/// row-major grid order, each row laid out `(dy, dx, channel)`.
pub fn patchify<T: Real>(img: &ImageSample, config: &EncoderConfig) -> Result<Tensor<T>> {
    if img.height != config.height || img.width != config.width || img.channels != config.channels {
        return Err(Error::Config(format!(
            "image {}x{}x{} does not match encoder input {}x{}x{}",
            img.height, img.width, img.channels, config.height, config.width, config.channels
        )));
    }
    config.validate()?;
    let p = config.patch;
    let (gh, gw) = config.grid();
    let ch = config.channels;
    let mut out = Vec::with_capacity(img.pixels.len());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let y = py * p + dy;
                let start = (y * img.width + px * p) * ch;
                out.extend(
                    img.pixels[start..start + p * ch]
                        .iter()
                        .map(|&v| T::lit(v as f64)),
                );
            }
        }
    }
    Tensor::new(vec![gh * gw, config.patch_len()], out)
}

/// Patch projection plus learned positional offsets, `N × C`.
pub fn patch_embed<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layout: &EncoderLayout,
    config: &EncoderConfig,
    img: &ImageSample,
) -> Result<Var> {
    let patches = g.constant(patchify(img, config)?);
    let tokens = layout.patch_proj.forward(g, p, patches)?;
    g.add(tokens, p.var(layout.pos_embed))
}

/// Runs every block and collects the configured layer outputs and their mean.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layout: &EncoderLayout,
    config: &EncoderConfig,
    img: &ImageSample,
) -> Result<FeatureVars> {
    let mut x = patch_embed(g, p, layout, config, img)?;
    let mut layers = Vec::with_capacity(config.extract.len());
    for (i, block) in layout.blocks.iter().enumerate() {
        x = block.forward(g, p, x)?;
        let depth = i + 1;
        check_finite(g, x, || format!("encoder layer {depth}"))?;
        if config.extract.contains(&depth) {
            layers.push(x);
        }
    }
    let aggregate = g.mean_of(&layers)?;
    Ok(FeatureVars {
        layers,
        aggregate,
        grid: config.grid(),
    })
}

/// `target ← β·target + (1 − β)·online`, elementwise over every parameter.
pub fn ema_update<T: Real>(
    online: &ParamSet<T>,
    target: &mut ParamSet<T>,
    beta: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Argument(format!("momentum {beta} outside [0, 1]")));
    }
    online.check_compatible(target)?;
    let b = T::lit(beta);
    let rest = T::lit(1.0 - beta);
    for (t, o) in target.values_mut().iter_mut().zip(online.values()) {
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = b * *tv + rest * ov;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_multi;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            height: 8,
            width: 8,
            channels: 1,
            patch: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            extract: vec![1, 2],
        }
    }

    fn image(cfg: &EncoderConfig, seed: u64) -> ImageSample {
        let mut rng = Rng::new(seed);
        let n = cfg.height * cfg.width * cfg.channels;
        let px = (0..n).map(|_| rng.uniform() as f32).collect();
        ImageSample::new(
            "t",
            cfg.height,
            cfg.width,
            cfg.channels,
            px,
            Label::Normal,
            None,
        )
        .unwrap()
    }

    #[test]
    fn token_count_for_default_geometry() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.tokens(), 64);
        let enc = EncoderParams::<f32>::init(&cfg, &mut Rng::new(1)).unwrap();
        let img = ImageSample::new("z", 64, 64, 1, vec![0.5; 4096], Label::Normal, None).unwrap();
        let fs = enc.encode(&img).unwrap();
        assert_eq!(fs.aggregate.shape(), &[64, 32]);
        assert_eq!(fs.layers.len(), 3);
    }

    #[test]
    fn indivisible_geometry_rejected() {
        let cfg = EncoderConfig {
            height: 30,
            ..EncoderConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let bad = EncoderConfig {
            extract: vec![3, 2],
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let out_of_range = EncoderConfig {
            extract: vec![2, 5],
            ..EncoderConfig::default()
        };
        assert!(out_of_range.validate().is_err());
    }

    #[test]
    fn zero_image_zero_embedding() {
        let cfg = tiny_config();
        let mut enc = EncoderParams::<f64>::init(&cfg, &mut Rng::new(2)).unwrap();
        *enc.params.get_mut(enc.layout.pos_embed) = Tensor::zeros(&[cfg.tokens(), cfg.dim]);
        let img = ImageSample::new("z", 8, 8, 1, vec![0.0; 64], Label::Normal, None).unwrap();
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &enc.params, false);
        let e = patch_embed(&mut g, &p, &enc.layout, &cfg, &img).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_is_exact_mean() {
        let cfg = tiny_config();
        let enc = EncoderParams::<f64>::init(&cfg, &mut Rng::new(3)).unwrap();
        let fs = enc.encode(&image(&cfg, 4)).unwrap();
        let c = fs.layers[0].data();
        let d = fs.layers[1].data();
        for (i, &a) in fs.aggregate.data().iter().enumerate() {
            assert_eq!(a, (c[i] + d[i]) * 0.5);
        }
    }

    #[test]
    fn patch_permutation_equivariance_without_positions() {
        let cfg = tiny_config();
        let mut enc = EncoderParams::<f64>::init(&cfg, &mut Rng::new(5)).unwrap();
        *enc.params.get_mut(enc.layout.pos_embed) = Tensor::zeros(&[cfg.tokens(), cfg.dim]);
        let img = image(&cfg, 6);
        // swap patch (0,0) with patch (1,1)
        let mut swapped = img.clone();
        for dy in 0..4 {
            for dx in 0..4 {
                let a = dy * 8 + dx;
                let b = (4 + dy) * 8 + 4 + dx;
                swapped.pixels.swap(a, b);
            }
        }
        let f1 = enc.encode(&img).unwrap();
        let f2 = enc.encode(&swapped).unwrap();
        let perm = [3, 1, 2, 0];
        for (layer1, layer2) in f1.layers.iter().zip(&f2.layers) {
            for (t, &pt) in perm.iter().enumerate() {
                for (x, y) in layer1.row(t).iter().zip(layer2.row(pt)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = EncoderConfig::default();
        let a = EncoderParams::<f32>::init(&cfg, &mut Rng::new(9)).unwrap();
        let b = EncoderParams::<f32>::init(&cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let mut rng = Rng::new(1);
        let px = (0..4096).map(|_| rng.uniform() as f32).collect();
        let img = ImageSample::new("d", 64, 64, 1, px, Label::Normal, None).unwrap();
        assert_eq!(a.encode(&img).unwrap(), b.encode(&img).unwrap());
    }

    #[test]
    fn patch_embedding_gradients() {
        let cfg = tiny_config();
        let enc = EncoderParams::<f64>::init(&cfg, &mut Rng::new(11)).unwrap();
        let img = image(&cfg, 12);
        let layout = enc.layout.clone();
        let mut rng = Rng::new(13);
        let probe = Tensor::from_f64(
            &[cfg.tokens(), cfg.dim],
            &(0..cfg.tokens() * cfg.dim)
                .map(|_| rng.normal())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let report = grad_check_multi(
            |g, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let e = patch_embed(g, &p, &layout, &cfg, &img)?;
                let w = g.constant(probe.clone());
                let s = g.mul(e, w)?;
                Ok(g.sum(s))
            },
            enc.params.values(),
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn ema_rules() {
        let mut online = ParamSet::<f64>::new();
        online.add("w", Tensor::scalar(0.0));
        let mut target = ParamSet::<f64>::new();
        target.add("w", Tensor::scalar(1.0));

        let mut t = target.clone();
        ema_update(&online, &mut t, 1.0).unwrap();
        assert_eq!(t, target);

        let mut t = target.clone();
        ema_update(&online, &mut t, 0.0).unwrap();
        assert_eq!(t, online);

        let mut t = target.clone();
        ema_update(&online, &mut t, 0.5).unwrap();
        assert_eq!(t.values()[0].item(), 0.5);

        assert!(ema_update(&online, &mut t, 1.5).is_err());
        let mut wrong = ParamSet::<f64>::new();
        wrong.add("w", Tensor::zeros(&[2]));
        assert!(matches!(
            ema_update(&online, &mut wrong, 0.5),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn ema_contracts_geometrically() {
        let cfg = tiny_config();
        let online = EncoderParams::<f64>::init(&cfg, &mut Rng::new(20)).unwrap();
        let mut target = EncoderParams::<f64>::init(&cfg, &mut Rng::new(21)).unwrap();
        let beta = 0.9;
        let mut prev = target.params.distance(&online.params);
        for _ in 0..10 {
            ema_update(&online.params, &mut target.params, beta).unwrap();
            let d = target.params.distance(&online.params);
            assert!((d - beta * prev).abs() < 1e-9 * prev.max(1.0));
            prev = d;
        }
    }
}
