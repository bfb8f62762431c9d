//! Bottleneck fusion, prototype-guided decoding, the soft-mining
//! reconstruction objective and the four encoder-adaptation variants.

use crate::error::{Error, Result};
use crate::nn::{check_finite, Attention, Bound, FeedForward, Linear, Norm, ParamSet};
use crate::prototype::{
    assignment_entropy, assignment_histogram, extract_prototypes, max_share, prototype_loss,
    AssignmentTable, ExtractorLayout, ProtoLossKind, PrototypeConfig,
};
use crate::rng::Rng;
use crate::tensor::{Gradients, Graph, Real, Tensor, Var};
use crate::vit::{encode, EncoderConfig, EncoderParams, FeatureVars, ImageSample};

/// Encoder-adaptation variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantMode {
    /// Frozen encoder.
    M0,
    /// End-to-end fine-tuning against the encoder's own detached features.
    M1,
    /// Trainable encoder reconstructing a frozen snapshot's features.
    M2,
    /// Trainable encoder reconstructing an EMA encoder's features.
    M2Plus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantFlags {
    pub unfrozen: bool,
    pub dual_encoder: bool,
    pub momentum: bool,
}

/// Which features the decoder is asked to reproduce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceBranch {
    Online,
    Frozen,
    Momentum,
}

impl VariantMode {
    pub const ALL: [VariantMode; 4] = [
        VariantMode::M0,
        VariantMode::M1,
        VariantMode::M2,
        VariantMode::M2Plus,
    ];

    pub fn flags(self) -> VariantFlags {
        let (unfrozen, dual_encoder, momentum) = match self {
            VariantMode::M0 => (false, false, false),
            VariantMode::M1 => (true, false, false),
            VariantMode::M2 => (true, true, false),
            VariantMode::M2Plus => (true, true, true),
        };
        VariantFlags {
            unfrozen,
            dual_encoder,
            momentum,
        }
    }

    pub fn reference_branch(self) -> ReferenceBranch {
        match self {
            VariantMode::M0 | VariantMode::M1 => ReferenceBranch::Online,
            VariantMode::M2 => ReferenceBranch::Frozen,
            VariantMode::M2Plus => ReferenceBranch::Momentum,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VariantMode::M0 => "m0",
            VariantMode::M1 => "m1",
            VariantMode::M2 => "m2",
            VariantMode::M2Plus => "m2plus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m0" => Some(VariantMode::M0),
            "m1" => Some(VariantMode::M1),
            "m2" => Some(VariantMode::M2),
            "m2plus" | "m2+" => Some(VariantMode::M2Plus),
            _ => None,
        }
    }
}

impl std::fmt::Display for VariantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture of every trainable module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prototypes: PrototypeConfig,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    /// Drop probability on the bottleneck input during training.
    pub bottleneck_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            prototypes: PrototypeConfig::default(),
            decoder_depth: 4,
            decoder_heads: 4,
            mlp_ratio: 4,
            bottleneck_dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let groups = self.encoder.extract.len();
        if self.decoder_depth < groups {
            return Err(Error::Config(format!(
                "decoder depth {} is shallower than the {} supervised layer groups",
                self.decoder_depth, groups
            )));
        }
        if self.prototypes.count == 0 {
            return Err(Error::Config("at least one prototype is required".into()));
        }
        if !(0.0..1.0).contains(&self.bottleneck_dropout) {
            return Err(Error::Config(format!(
                "bottleneck dropout {} outside [0, 1)",
                self.bottleneck_dropout
            )));
        }
        Ok(())
    }
}

/// Concatenated layers projected to `C`, followed by a residual GELU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckLayout {
    pub proj: Linear,
    pub mlp: FeedForward,
}

impl BottleneckLayout {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        layers: usize,
        dim: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Self {
        BottleneckLayout {
            proj: Linear::init(ps, "bottleneck.proj", layers * dim, dim, rng),
            mlp: FeedForward::init(ps, "bottleneck.mlp", dim, dim * mlp_ratio, rng),
        }
    }
}

/// Fuses the encoder layers into one `N × C` embedding.
pub fn bottleneck<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layout: &BottleneckLayout,
    layers: &[Var],
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("bottleneck needs at least one layer".into()));
    }
    let fused = if layers.len() == 1 {
        layers[0]
    } else {
        g.concat_cols(layers)?
    };
    let width = g.shape(fused)[1];
    if width != layout.proj.fan_in {
        return Err(Error::Config(format!(
            "bottleneck expects {} input channels, got {width}",
            layout.proj.fan_in
        )));
    }
    let h = layout.proj.forward(g, p, fused)?;
    let m = layout.mlp.forward(g, p, h)?;
    g.add(h, m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm_self: Norm,
    pub self_attn: Attention,
    pub norm_cross: Norm,
    pub norm_proto: Norm,
    pub cross_attn: Attention,
    pub norm_mlp: Norm,
    pub mlp: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayout {
    pub layers: Vec<DecoderLayer>,
    /// Number of supervised output groups.
    pub groups: usize,
}

impl DecoderLayout {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        config: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let dim = config.encoder.dim;
        let heads = config.decoder_heads;
        let hidden = dim * config.mlp_ratio;
        let mut layers = Vec::with_capacity(config.decoder_depth);
        for i in 0..config.decoder_depth {
            let n = format!("dec.layer{i}");
            layers.push(DecoderLayer {
                norm_self: Norm::init(ps, &format!("{n}.norm_self"), dim),
                self_attn: Attention::init(ps, &format!("{n}.self_attn"), dim, heads, rng)?,
                norm_cross: Norm::init(ps, &format!("{n}.norm_cross"), dim),
                norm_proto: Norm::init(ps, &format!("{n}.norm_proto"), dim),
                cross_attn: Attention::init(ps, &format!("{n}.cross_attn"), dim, heads, rng)?,
                norm_mlp: Norm::init(ps, &format!("{n}.norm_mlp"), dim),
                mlp: FeedForward::init(ps, &format!("{n}.mlp"), dim, hidden, rng),
            });
        }
        Ok(DecoderLayout {
            layers,
            groups: config.encoder.extract.len(),
        })
    }
}

pub struct DecoderLayerOutput {
    pub out: Var,
    pub cross_out: Var,
    pub cross_weights: Vec<Var>,
}

/// Self-attention over tokens, cross-attention into the prototypes, then
/// an FFN; each sub-block is pre-norm with a residual connection.
pub fn decoder_layer<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layer: &DecoderLayer,
    x: Var,
    prototypes: Var,
) -> Result<DecoderLayerOutput> {
    let h = layer.norm_self.forward(g, p, x)?;
    let h = layer.self_attn.forward(g, p, h, h)?;
    let x = g.add(x, h)?;
    let q = layer.norm_cross.forward(g, p, x)?;
    let kv = layer.norm_proto.forward(g, p, prototypes)?;
    let cross = layer.cross_attn.forward_with_weights(g, p, q, kv)?;
    let x = g.add(x, cross.out)?;
    let h = layer.norm_mlp.forward(g, p, x)?;
    let h = layer.mlp.forward(g, p, h)?;
    let out = g.add(x, h)?;
    Ok(DecoderLayerOutput {
        out,
        cross_out: cross.out,
        cross_weights: cross.weights,
    })
}

pub struct Decoded {
    /// One output per supervised group, in encoder extraction order.
    pub outputs: Vec<Var>,
    pub layers: Vec<DecoderLayerOutput>,
}

/// Decodes the fused embedding under prototype guidance.
///
/// The last `groups` decoder layers are supervised in reverse: the final
/// decoder layer reconstructs the shallowest extracted encoder layer.
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layout: &DecoderLayout,
    fused: Var,
    prototypes: Var,
) -> Result<Decoded> {
    if g.shape(fused).len() != 2
        || g.shape(prototypes).len() != 2
        || g.shape(fused)[1] != g.shape(prototypes)[1]
    {
        return Err(Error::Dimension {
            op: "decode",
            lhs: g.shape(fused).to_vec(),
            rhs: g.shape(prototypes).to_vec(),
        });
    }
    let mut x = fused;
    let mut layers = Vec::with_capacity(layout.layers.len());
    for (i, layer) in layout.layers.iter().enumerate() {
        let out = decoder_layer(g, p, layer, x, prototypes)?;
        check_finite(g, out.out, || format!("decoder layer {}", i + 1))?;
        x = out.out;
        layers.push(out);
    }
    let depth = layers.len();
    let outputs = (0..layout.groups)
        .map(|l| layers[depth - 1 - l].out)
        .collect();
    Ok(Decoded { outputs, layers })
}

/// Layouts of every head module; their values live in one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLayout {
    pub extractor: ExtractorLayout,
    pub bottleneck: BottleneckLayout,
    pub decoder: DecoderLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub layout: HeadLayout,
    pub params: ParamSet<T>,
}

impl<T: Real> HeadParams<T> {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let dim = config.encoder.dim;
        let mut ps = ParamSet::new();
        let extractor = ExtractorLayout::init(&mut ps, dim, &config.prototypes, rng)?;
        let bottleneck = BottleneckLayout::init(
            &mut ps,
            config.encoder.extract.len(),
            dim,
            config.mlp_ratio,
            rng,
        );
        let decoder = DecoderLayout::init(&mut ps, config, rng)?;
        Ok(HeadParams {
            layout: HeadLayout {
                extractor,
                bottleneck,
                decoder,
            },
            params: ps,
        })
    }
}

/// Soft-mining configuration for the reconstruction objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftMining {
    pub enabled: bool,
    pub gamma: f64,
    pub w_max: f64,
}

impl Default for SoftMining {
    fn default() -> Self {
        SoftMining {
            enabled: true,
            gamma: 3.0,
            w_max: 5.0,
        }
    }
}

/// Per-token weights `min((d_i / mean d)^gamma, w_max)`, renormalized to
/// mean one. All-zero distances give uniform weights.
pub fn soft_mining_weights(distances: &[f64], gamma: f64, w_max: f64) -> Result<Vec<f64>> {
    if distances.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
        return Err(Error::Argument(
            "soft-mining distances must be finite and non-negative".into(),
        ));
    }
    let n = distances.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mean = distances.iter().sum::<f64>() / n as f64;
    if mean <= 0.0 {
        return Ok(vec![1.0; n]);
    }
    let raw: Vec<f64> = distances
        .iter()
        .map(|&d| (d / mean).powf(gamma).min(w_max))
        .collect();
    let raw_mean = raw.iter().sum::<f64>() / n as f64;
    if raw_mean <= 0.0 {
        return Ok(vec![1.0; n]);
    }
    Ok(raw.iter().map(|w| w / raw_mean).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconObjective {
    /// Weighted mean of per-token cosine distances.
    PerToken,
    /// One cosine distance between flattened feature maps per group; ignores
    /// token weights.
    Global,
}

/// Reference features tagged with the branch that produced them.
pub struct References {
    pub branch: ReferenceBranch,
    pub layers: Vec<Var>,
}

/// Averages the per-group reconstruction distance; the reference side is
/// always detached.
pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    references: &References,
    decoded: &[Var],
    weights: Option<&[f64]>,
    mode: VariantMode,
    objective: ReconObjective,
) -> Result<Var> {
    if references.branch != mode.reference_branch() {
        return Err(Error::State(format!(
            "{mode} reconstructs {:?} features but {:?} features were supplied",
            mode.reference_branch(),
            references.branch
        )));
    }
    if references.layers.len() != decoded.len() || decoded.is_empty() {
        return Err(Error::Config(format!(
            "{} reference groups vs {} decoded groups",
            references.layers.len(),
            decoded.len()
        )));
    }
    let mut per_group = Vec::with_capacity(decoded.len());
    for (&r, &d) in references.layers.iter().zip(decoded) {
        let r = g.stop_gradient(r);
        let loss = match objective {
            ReconObjective::PerToken => {
                let dist = g.row_cosine_distance(r, d)?;
                match weights {
                    Some(w) => {
                        if w.len() != g.shape(dist)[0] {
                            return Err(Error::Dimension {
                                op: "reconstruction weights",
                                lhs: g.shape(dist).to_vec(),
                                rhs: vec![w.len()],
                            });
                        }
                        let wt = g.constant(Tensor::from_f64(&[w.len()], w)?);
                        let weighted = g.mul(dist, wt)?;
                        g.mean(weighted)
                    }
                    None => g.mean(dist),
                }
            }
            ReconObjective::Global => g.cosine_distance(r, d)?,
        };
        per_group.push(loss);
    }
    if per_group.len() == 1 {
        return Ok(per_group[0]);
    }
    g.mean_of(&per_group)
}

/// `recon + lambda * proto`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, recon: Var, proto: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!(
            "lambda {lambda} must be non-negative"
        )));
    }
    let weighted = g.scale(proto, T::lit(lambda));
    g.add(recon, weighted)
}

/// Loss terms of one step (or the batch mean of several).
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub step: usize,
    pub recon: f64,
    pub proto: f64,
    pub total: f64,
    pub entropy: f64,
    pub max_share: f64,
    pub flags: VariantFlags,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,recon,proto,total,entropy,max_share";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.recon, self.proto, self.total, self.entropy, self.max_share
        )
    }

    /// Batch mean of per-sample breakdowns.
    pub fn mean(items: &[LossBreakdown], step: usize) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(LossBreakdown {
            step,
            recon: avg(|b| b.recon),
            proto: avg(|b| b.proto),
            total: avg(|b| b.total),
            entropy: avg(|b| b.entropy),
            max_share: avg(|b| b.max_share),
            flags: first.flags,
        })
    }
}

/// Intermediates of one forward pass, detached from the graph.
#[derive(Clone, Debug)]
pub struct ReconstructionTrace<T> {
    pub bottleneck: Tensor<T>,
    pub decoded: Vec<Tensor<T>>,
    /// Soft-mining weights used by the objective (all ones when disabled).
    pub weights: Vec<f64>,
    pub reference: Vec<Tensor<T>>,
    pub branch: ReferenceBranch,
    pub prototypes: Tensor<T>,
    pub grid: (usize, usize),
}

/// Loss settings applied by [`forward_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub lambda: f64,
    pub proto_kind: ProtoLossKind,
    pub mining: SoftMining,
    pub objective: ReconObjective,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            lambda: 0.2,
            proto_kind: ProtoLossKind::Daa,
            mining: SoftMining::default(),
            objective: ReconObjective::PerToken,
        }
    }
}

/// Everything the model needs to train or score.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub mode: VariantMode,
    pub beta: f64,
    pub lambda: f64,
    pub proto_kind: ProtoLossKind,
    pub seed: u64,
    pub step: usize,
    /// Online (trainable) encoder.
    pub encoder: EncoderParams<T>,
    /// Frozen snapshot (M2) or momentum encoder (M2⁺); same layout as
    /// `encoder`.
    pub reference: Option<ParamSet<T>>,
    pub head: HeadParams<T>,
}

const STREAM_ENCODER: u64 = 1;
const STREAM_HEAD: u64 = 2;

impl<T: Real> ModelState<T> {
    pub fn init(config: &ModelConfig, mode: VariantMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let encoder = EncoderParams::init(&config.encoder, &mut root.derive(STREAM_ENCODER))?;
        let head = HeadParams::init(config, &mut root.derive(STREAM_HEAD))?;
        let mut state = ModelState {
            config: config.clone(),
            mode,
            beta: 0.9999,
            lambda: 0.2,
            proto_kind: ProtoLossKind::Daa,
            seed,
            step: 0,
            encoder,
            reference: None,
            head,
        };
        state.reset_reference();
        Ok(state)
    }

    /// Makes the reference branch an exact copy of the online encoder (or
    /// removes it for single-encoder modes).
    pub fn reset_reference(&mut self) {
        self.reference = if self.mode.flags().dual_encoder {
            Some(self.encoder.params.clone())
        } else {
            None
        };
    }

    /// Switches variant, keeping every parameter value.
    pub fn with_mode(mut self, mode: VariantMode) -> Self {
        self.mode = mode;
        self.reset_reference();
        self
    }

    fn reference_params(&self) -> Result<&ParamSet<T>> {
        self.reference.as_ref().ok_or_else(|| {
            Error::State(format!(
                "{} requires a reference encoder but none is set",
                self.mode
            ))
        })
    }

    /// Forward-only reconstruction of `img` for scoring.
    pub fn reconstruct(&self, img: &ImageSample) -> Result<ReconstructionTrace<T>> {
        let pass = forward_impl(img, self, &LossOptions::default(), None, false)?;
        Ok(pass.trace)
    }

    /// Forward-only pass that also returns the prototype assignment.
    pub fn inspect(&self, img: &ImageSample) -> Result<(ReconstructionTrace<T>, AssignmentTable)> {
        let pass = forward_impl(img, self, &LossOptions::default(), None, false)?;
        Ok((pass.trace, pass.assignments))
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            mode: self.mode,
            beta: self.beta,
            lambda: self.lambda,
            proto_kind: self.proto_kind,
            seed: self.seed,
            step: self.step,
            encoder: EncoderParams {
                config: self.encoder.config.clone(),
                layout: self.encoder.layout.clone(),
                params: self.encoder.params.cast(),
            },
            reference: self.reference.as_ref().map(|r| r.cast()),
            head: HeadParams {
                layout: self.head.layout.clone(),
                params: self.head.params.cast(),
            },
        }
    }
}

/// A recorded forward pass ready for backward.
pub struct ForwardPass<T> {
    graph: Graph<T>,
    total: Var,
    encoder: Bound,
    head: Bound,
    reference: Option<Bound>,
    pub breakdown: LossBreakdown,
    pub trace: ReconstructionTrace<T>,
    pub assignments: AssignmentTable,
}

/// Per-parameter gradients of one pass.
pub struct StepGrads<T> {
    pub encoder: Vec<Tensor<T>>,
    pub head: Vec<Tensor<T>>,
    /// Gradients reaching the reference encoder; zero by construction.
    pub reference: Option<Vec<Tensor<T>>>,
}

fn norm_of<T: Real>(ts: &[Tensor<T>]) -> f64 {
    ts.iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt()
}

impl<T: Real> StepGrads<T> {
    pub fn encoder_norm(&self) -> f64 {
        norm_of(&self.encoder)
    }

    pub fn head_norm(&self) -> f64 {
        norm_of(&self.head)
    }

    pub fn reference_norm(&self) -> f64 {
        self.reference.as_deref().map_or(0.0, norm_of)
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.iter().chain(&self.head).all(|t| t.is_finite())
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &StepGrads<T>) {
        fn add<T: Real>(dst: &mut [Tensor<T>], src: &[Tensor<T>]) {
            for (d, s) in dst.iter_mut().zip(src) {
                for (a, &b) in d.data_mut().iter_mut().zip(s.data()) {
                    *a += b;
                }
            }
        }
        add(&mut self.encoder, &other.encoder);
        add(&mut self.head, &other.head);
        if let (Some(d), Some(s)) = (self.reference.as_mut(), other.reference.as_ref()) {
            add(d, s);
        }
    }

    pub fn scale(&mut self, c: f64) {
        let c = T::lit(c);
        for t in self
            .encoder
            .iter_mut()
            .chain(self.head.iter_mut())
            .chain(self.reference.iter_mut().flatten())
        {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
}

impl<T: Real> ForwardPass<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn backward(mut self) -> Result<StepGrads<T>> {
        let mut grads: Gradients<T> = self.graph.backward(self.total)?;
        let encoder = self.encoder.gradients(&mut grads);
        let head = self.head.gradients(&mut grads);
        let reference = self.reference.as_ref().map(|b| b.gradients(&mut grads));
        Ok(StepGrads {
            encoder,
            head,
            reference,
        })
    }
}

/// Records the full training forward pass for `img`.
///
/// `dropout_rng` enables bottleneck dropout when the configured rate is
/// positive.
pub fn forward_step<T: Real>(
    img: &ImageSample,
    state: &ModelState<T>,
    opts: &LossOptions,
    dropout_rng: Option<&mut Rng>,
) -> Result<ForwardPass<T>> {
    forward_impl(img, state, opts, dropout_rng, true)
}

fn detach_all<T: Real>(g: &mut Graph<T>, fv: &FeatureVars) -> FeatureVars {
    FeatureVars {
        layers: fv.layers.iter().map(|&v| g.stop_gradient(v)).collect(),
        aggregate: g.stop_gradient(fv.aggregate),
        grid: fv.grid,
    }
}

fn forward_impl<T: Real>(
    img: &ImageSample,
    state: &ModelState<T>,
    opts: &LossOptions,
    dropout_rng: Option<&mut Rng>,
    track: bool,
) -> Result<ForwardPass<T>> {
    let mut g = Graph::new();
    let mode = state.mode;
    let flags = mode.flags();
    let enc_cfg = &state.encoder.config;

    let enc_bound = Bound::new(&mut g, &state.encoder.params, track);
    let mut online = encode(&mut g, &enc_bound, &state.encoder.layout, enc_cfg, img)?;
    if !flags.unfrozen {
        online = detach_all(&mut g, &online);
    }

    let branch = mode.reference_branch();
    let (ref_bound, ref_layers) = match branch {
        ReferenceBranch::Online => (None, online.layers.clone()),
        ReferenceBranch::Frozen | ReferenceBranch::Momentum => {
            let params = state.reference_params()?;
            let bound = Bound::new(&mut g, params, track);
            let fv = encode(&mut g, &bound, &state.encoder.layout, enc_cfg, img)?;
            (Some(bound), fv.layers)
        }
    };
    let ref_layers: Vec<Var> = ref_layers.iter().map(|&v| g.stop_gradient(v)).collect();

    let head_bound = Bound::new(&mut g, &state.head.params, track);
    let layout = &state.head.layout;
    let extraction = extract_prototypes(&mut g, &head_bound, &layout.extractor, online.aggregate)?;
    let proto = prototype_loss(
        &mut g,
        opts.proto_kind,
        online.aggregate,
        extraction.prototypes,
    )?;

    let mut fusion_input = online.layers.clone();
    if let Some(rng) = dropout_rng {
        let rate = state.config.bottleneck_dropout;
        if rate > 0.0 {
            let keep = 1.0 / (1.0 - rate);
            for v in fusion_input.iter_mut() {
                let shape = g.shape(*v).to_vec();
                let n: usize = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
                    .collect();
                let m = g.constant(Tensor::from_f64(&shape, &mask)?);
                *v = g.mul(*v, m)?;
            }
        }
    }
    let fused = bottleneck(&mut g, &head_bound, &layout.bottleneck, &fusion_input)?;
    let decoded = decode(
        &mut g,
        &head_bound,
        &layout.decoder,
        fused,
        extraction.prototypes,
    )?;

    let n_tokens = g.shape(fused)[0];
    let weights = if opts.mining.enabled {
        let mut per_token = vec![0.0; n_tokens];
        for (&r, &d) in ref_layers.iter().zip(&decoded.outputs) {
            let (rv, dv) = (g.value(r), g.value(d));
            for (i, acc) in per_token.iter_mut().enumerate() {
                *acc += crate::tensor::cosine_distance(rv.row(i), dv.row(i))?.value;
            }
        }
        let groups = ref_layers.len() as f64;
        per_token.iter_mut().for_each(|d| *d /= groups);
        soft_mining_weights(&per_token, opts.mining.gamma, opts.mining.w_max)?
    } else {
        vec![1.0; n_tokens]
    };

    let references = References {
        branch,
        layers: ref_layers.clone(),
    };
    let recon = reconstruction_loss(
        &mut g,
        &references,
        &decoded.outputs,
        opts.mining.enabled.then_some(weights.as_slice()),
        mode,
        opts.objective,
    )?;
    let total = total_loss(&mut g, recon, proto.loss, opts.lambda)?;

    let counts = assignment_histogram(&proto.table, state.config.prototypes.count);
    let breakdown = LossBreakdown {
        step: state.step,
        recon: g.value(recon).item().f64(),
        proto: g.value(proto.loss).item().f64(),
        total: g.value(total).item().f64(),
        entropy: assignment_entropy(&counts)?,
        max_share: max_share(&counts),
        flags,
    };
    let trace = ReconstructionTrace {
        bottleneck: g.value(fused).clone(),
        decoded: decoded
            .outputs
            .iter()
            .map(|&v| g.value(v).clone())
            .collect(),
        weights,
        reference: ref_layers.iter().map(|&v| g.value(v).clone()).collect(),
        branch,
        prototypes: g.value(extraction.prototypes).clone(),
        grid: online.grid,
    };
    Ok(ForwardPass {
        graph: g,
        total,
        encoder: enc_bound,
        head: head_bound,
        reference: ref_bound,
        breakdown,
        trace,
        assignments: proto.table,
    })
}
