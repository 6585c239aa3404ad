//! The harmonization model family: a three-stage generator per domain
//! (domain-specific encoder, shared encoder-decoder trunk, domain-specific
//! decoder) with a blending layer, a feature-level domain discriminator, and
//! a pair of style classifiers shared across domains.
//!
//! Everything lives in one computation graph with multiple roots: the
//! discriminator objective, the total generator objective with its component
//! taps, and per-domain forward paths for evaluation. Parameters are shared
//! across roots by name; gradient routing is expressed structurally (frozen
//! references and stop-gradients), so one `gradients` call per root yields
//! exactly the update each optimizer should apply.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    load_checkpoint, save_checkpoint, uniform_fan_in, CheckpointEntry, Graph, Mode, NodeId, Tensor,
};
use crate::error::{Error, Result};
use crate::losses::{self, LossFlags, LossWeights};
use crate::seeds;
use crate::synthscene::STYLE_COUNT;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const LEAKY_SLOPE: f64 = 0.2;

/// Total encoder (and decoder) depth of the generator.
pub const GENERATOR_DEPTH: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Rendered,
    Real,
}

impl DomainTag {
    fn key(self) -> &'static str {
        match self {
            DomainTag::Rendered => "rd",
            DomainTag::Real => "rl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierTap {
    In,
    Out,
}

impl ClassifierTap {
    fn key(self) -> &'static str {
        match self {
            ClassifierTap::In => "in",
            ClassifierTap::Out => "out",
        }
    }
}

/// Architecture description: unshared depths, channel plans, input size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Unshared encoder depth (first L_enc layers are per-domain).
    pub l_enc: usize,
    /// Unshared decoder depth (last L_dec layers are per-domain).
    pub l_dec: usize,
    /// Output channels of encoder depths 1..=7; the decoder mirrors them.
    pub enc_channels: Vec<usize>,
    /// Discriminator conv channels; the last entry must be 1.
    pub disc_channels: Vec<usize>,
    /// Classifier conv channels before the final K-channel conv.
    pub cls_channels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub k_styles: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            l_enc: 4,
            l_dec: 4,
            enc_channels: vec![16, 32, 32, 64, 64, 96, 96],
            disc_channels: vec![64, 32, 1],
            cls_channels: vec![64, 32, 16],
            height: 48,
            width: 48,
            k_styles: STYLE_COUNT,
        }
    }
}

impl ModelConfig {
    /// Shrunken channel plan whose full parameter set fits the exhaustive
    /// gradient-check budget.
    pub fn toy(height: usize, width: usize) -> Self {
        ModelConfig {
            l_enc: 4,
            l_dec: 4,
            enc_channels: vec![2, 3, 3, 4, 4, 5, 5],
            disc_channels: vec![3, 2, 1],
            cls_channels: vec![3, 2],
            height,
            width,
            k_styles: STYLE_COUNT,
        }
    }

    pub fn with_split(mut self, l: usize) -> Self {
        self.l_enc = l;
        self.l_dec = l;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_enc > GENERATOR_DEPTH || self.l_dec > GENERATOR_DEPTH {
            return Err(Error::InvalidArgument(format!(
                "split depths must lie in 0..=7, got ({}, {})",
                self.l_enc, self.l_dec
            )));
        }
        if self.enc_channels.len() != GENERATOR_DEPTH {
            return Err(Error::InvalidArgument(format!(
                "encoder channel plan needs {GENERATOR_DEPTH} entries, got {}",
                self.enc_channels.len()
            )));
        }
        if self.disc_channels.last() != Some(&1) {
            return Err(Error::InvalidArgument(
                "discriminator channel plan must end in 1".into(),
            ));
        }
        if self.cls_channels.is_empty() {
            return Err(Error::InvalidArgument(
                "classifier channel plan must be nonempty".into(),
            ));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidArgument(
                "input resolution must be at least 16x16".into(),
            ));
        }
        if self.k_styles != STYLE_COUNT {
            return Err(Error::InvalidArgument(format!(
                "k_styles must be {STYLE_COUNT}"
            )));
        }
        Ok(())
    }

    /// Channels of the stage-1 feature f_in (the depth-L_enc activation;
    /// the 4-channel input itself when L_enc = 0).
    pub fn f_in_channels(&self) -> usize {
        if self.l_enc == 0 {
            4
        } else {
            self.enc_channels[self.l_enc - 1]
        }
    }

    /// Channels of the stage-2 output f_out (the activation entering the
    /// first domain-specific decoder layer).
    pub fn f_out_channels(&self) -> usize {
        if self.l_dec == GENERATOR_DEPTH {
            self.enc_channels[GENERATOR_DEPTH - 1]
        } else {
            let depth = GENERATOR_DEPTH - self.l_dec; // last shared decoder depth
            if depth == GENERATOR_DEPTH {
                3
            } else {
                self.enc_channels[GENERATOR_DEPTH - 1 - depth]
            }
        }
    }

    fn decoder_out_channels(&self, depth: usize) -> usize {
        if depth == GENERATOR_DEPTH {
            3
        } else {
            self.enc_channels[GENERATOR_DEPTH - 1 - depth]
        }
    }

    fn encoder_stride(depth: usize) -> usize {
        if depth <= 4 {
            2
        } else {
            1
        }
    }

    fn decoder_upsamples(depth: usize) -> bool {
        depth >= 4
    }
}

/// Generator outputs for one batch.
pub struct GeneratorOutput {
    pub harmonized: Tensor,
    pub f_in: Tensor,
    pub f_out: Tensor,
}

/// Parameter scalar counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamPartition {
    pub shared_trunk: usize,
    pub rendered_branch: usize,
    pub real_branch: usize,
    pub discriminator: usize,
    pub classifier_in: usize,
    pub classifier_out: usize,
}

impl ParamPartition {
    pub fn total(&self) -> usize {
        self.shared_trunk
            + self.rendered_branch
            + self.real_branch
            + self.discriminator
            + self.classifier_in
            + self.classifier_out
    }
}

/// Node ids of the training-graph roots and component taps.
#[derive(Clone, Copy, Debug)]
pub struct TrainNodes {
    pub loss_d: Option<NodeId>,
    pub loss_total: NodeId,
    pub rec_total: NodeId,
    pub rec_rd: NodeId,
    pub rec_rl: NodeId,
    pub adv_g: Option<NodeId>,
    pub in_rd: Option<NodeId>,
    pub out_rd: Option<NodeId>,
    pub w_rl: Option<NodeId>,
    pub er_rl: Option<NodeId>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RefKind {
    Train,
    Frozen,
}

enum Act {
    Leaky,
    Relu,
    None,
}

pub struct CharmNet {
    pub config: ModelConfig,
    pub weights: LossWeights,
    pub flags: LossFlags,
    graph: Graph,
    train_nodes: TrainNodes,
}

impl CharmNet {
    pub fn new(
        config: ModelConfig,
        weights: LossWeights,
        flags: LossFlags,
        seed: u64,
    ) -> Result<CharmNet> {
        config.validate()?;
        let mut g = Graph::new();
        let mut rng = seeds::rng(seeds::derive(seed, &[0x1217]));
        register_params(&mut g, &config, &mut rng);
        let train_nodes = build_training_graph(&mut g, &config, &weights, &flags);
        build_eval_graphs(&mut g, &config);
        Ok(CharmNet {
            config,
            weights,
            flags,
            graph: g,
            train_nodes,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn train_nodes(&self) -> TrainNodes {
        self.train_nodes
    }

    /// Route one batch through its domain's three stages and the blending
    /// layer.
    pub fn generator_forward(
        &self,
        image: &Tensor,
        mask: &Tensor,
        domain: DomainTag,
        mode: Mode,
    ) -> Result<GeneratorOutput> {
        let d = domain.key();
        let mut inputs = indexmap::IndexMap::new();
        inputs.insert(format!("eval.{d}.image"), image.clone());
        inputs.insert(format!("eval.{d}.mask"), mask.clone());
        let names = [
            format!("eval.{d}.harmonized"),
            format!("eval.{d}.f_in"),
            format!("eval.{d}.f_out"),
        ];
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let (mut out, _) = self.graph.evaluate_named(&refs, &inputs, mode)?;
        Ok(GeneratorOutput {
            harmonized: out.shift_remove(&names[0]).unwrap(),
            f_in: out.shift_remove(&names[1]).unwrap(),
            f_out: out.shift_remove(&names[2]).unwrap(),
        })
    }

    /// One scalar score per sample from the stage-1 feature.
    pub fn discriminator_forward(&self, f_in: &Tensor) -> Result<Vec<f64>> {
        let mut inputs = indexmap::IndexMap::new();
        inputs.insert("eval.disc.f".to_string(), f_in.clone());
        let (out, _) = self
            .graph
            .evaluate_named(&["eval.disc.score"], &inputs, Mode::Eval)?;
        Ok(out["eval.disc.score"].data().to_vec())
    }

    /// K-way style distribution per sample; the same parameters serve both
    /// domains.
    pub fn classifier_forward(
        &self,
        f: &Tensor,
        which: ClassifierTap,
    ) -> Result<Vec<crate::compositegen::StyleLabel>> {
        let w = which.key();
        let mut inputs = indexmap::IndexMap::new();
        inputs.insert(format!("eval.cls.{w}.f"), f.clone());
        let name = format!("eval.cls.{w}.probs");
        let (out, _) = self
            .graph
            .evaluate_named(&[name.as_str()], &inputs, Mode::Eval)?;
        let probs = &out[&name];
        let k = self.config.k_styles;
        probs
            .data()
            .chunks_exact(k)
            .map(|row| crate::compositegen::StyleLabel::new(row.to_vec()))
            .collect()
    }

    /// Parameter scalar counts for {shared trunk, rendered branch, real
    /// branch, discriminator, classifiers}.
    pub fn param_partition(&self) -> ParamPartition {
        let mut p = ParamPartition::default();
        for (name, t) in self.graph.params() {
            let n = t.numel();
            if name.starts_with("enc.sh.") || name.starts_with("dec.sh.") {
                p.shared_trunk += n;
            } else if name.starts_with("enc.rd.") || name.starts_with("dec.rd.") {
                p.rendered_branch += n;
            } else if name.starts_with("enc.rl.") || name.starts_with("dec.rl.") {
                p.real_branch += n;
            } else if name.starts_with("disc.") {
                p.discriminator += n;
            } else if name.starts_with("cls.in.") {
                p.classifier_in += n;
            } else if name.starts_with("cls.out.") {
                p.classifier_out += n;
            }
        }
        p
    }

    pub fn checkpoint_entries(&self) -> Vec<CheckpointEntry> {
        let mut entries = Vec::new();
        for (name, t) in self.graph.params() {
            entries.push(CheckpointEntry {
                name: name.clone(),
                kind: "param".into(),
                tensor: t.clone(),
            });
        }
        for (name, t) in self.graph.buffers() {
            entries.push(CheckpointEntry {
                name: name.clone(),
                kind: "buffer".into(),
                tensor: t.clone(),
            });
        }
        entries
    }

    pub fn restore_entries(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        for e in entries {
            match e.kind.as_str() {
                "param" => self.graph.set_param(&e.name, e.tensor.clone())?,
                "buffer" => self.graph.set_buffer(&e.name, e.tensor.clone())?,
                _ => {}
            }
        }
        Ok(())
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "model_config": self.config,
            "loss_weights": self.weights,
            "loss_flags": self.flags,
        })
    }

    /// Save parameters and buffers plus any extra entries (optimizer state)
    /// and extra metadata.
    pub fn save_checkpoint_with(
        &self,
        path: &std::path::Path,
        extra_meta: serde_json::Value,
        extra_entries: &[CheckpointEntry],
    ) -> Result<()> {
        let mut meta = self.meta();
        meta["extra"] = extra_meta;
        let mut entries = self.checkpoint_entries();
        entries.extend(extra_entries.iter().cloned());
        save_checkpoint(path, &meta, &entries)
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        self.save_checkpoint_with(path, serde_json::Value::Null, &[])
    }

    /// Rebuild a net from a checkpoint; returns the extra metadata and the
    /// non-model entries (optimizer state) for the caller.
    pub fn load_from_checkpoint(
        path: &std::path::Path,
    ) -> Result<(CharmNet, serde_json::Value, Vec<CheckpointEntry>)> {
        let (meta, entries) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(meta["model_config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad model_config: {e}")))?;
        let weights: LossWeights = serde_json::from_value(meta["loss_weights"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad loss_weights: {e}")))?;
        let flags: LossFlags = serde_json::from_value(meta["loss_flags"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad loss_flags: {e}")))?;
        let mut net = CharmNet::new(config, weights, flags, 0)?;
        net.restore_entries(&entries)?;
        let rest: Vec<CheckpointEntry> = entries
            .into_iter()
            .filter(|e| e.kind != "param" && e.kind != "buffer")
            .collect();
        Ok((net, meta["extra"].clone(), rest))
    }
}

fn pref(g: &mut Graph, kind: RefKind, name: &str) -> NodeId {
    match kind {
        RefKind::Train => g.param_ref(name),
        RefKind::Frozen => g.frozen_ref(name),
    }
}

fn register_conv(
    g: &mut Graph,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    co: usize,
    ci: usize,
    k: usize,
    bn: bool,
) {
    let fan_in = ci * k * k;
    g.param(
        &format!("{prefix}.conv.w"),
        uniform_fan_in(&[co, ci, k, k], fan_in, rng),
    );
    g.param(&format!("{prefix}.conv.b"), Tensor::zeros(&[co]));
    if bn {
        g.param(&format!("{prefix}.bn.gamma"), Tensor::filled(&[co], 1.0));
        g.param(&format!("{prefix}.bn.beta"), Tensor::zeros(&[co]));
        g.register_buffer(&format!("{prefix}.bn.rmean"), Tensor::zeros(&[co]));
        g.register_buffer(&format!("{prefix}.bn.rvar"), Tensor::filled(&[co], 1.0));
    }
}

/// Register every parameter and buffer in a fixed order so initialization is
/// a deterministic function of the seed.
fn register_params(g: &mut Graph, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    // encoder
    let mut ci = 4;
    for d in 1..=GENERATOR_DEPTH {
        let co = cfg.enc_channels[d - 1];
        if d <= cfg.l_enc {
            register_conv(g, rng, &format!("enc.rd.{d}"), co, ci, 3, true);
            register_conv(g, rng, &format!("enc.rl.{d}"), co, ci, 3, true);
        } else {
            register_conv(g, rng, &format!("enc.sh.{d}"), co, ci, 3, true);
        }
        ci = co;
    }
    // decoder (depth 7 is the 3-channel output conv without normalization)
    for d in 1..=GENERATOR_DEPTH {
        let co = cfg.decoder_out_channels(d);
        let bn = d < GENERATOR_DEPTH;
        if d > GENERATOR_DEPTH - cfg.l_dec {
            register_conv(g, rng, &format!("dec.rd.{d}"), co, ci, 3, bn);
            register_conv(g, rng, &format!("dec.rl.{d}"), co, ci, 3, bn);
        } else {
            register_conv(g, rng, &format!("dec.sh.{d}"), co, ci, 3, bn);
        }
        ci = co;
    }
    // discriminator on f_in
    let mut ci = cfg.f_in_channels();
    for (l, &co) in cfg.disc_channels.iter().enumerate() {
        register_conv(g, rng, &format!("disc.{}", l + 1), co, ci, 3, false);
        ci = co;
    }
    // classifiers on f_in / f_out
    for (which, mut ci) in [("in", cfg.f_in_channels()), ("out", cfg.f_out_channels())] {
        for (l, &co) in cfg.cls_channels.iter().enumerate() {
            register_conv(g, rng, &format!("cls.{which}.{}", l + 1), co, ci, 3, true);
            ci = co;
        }
        register_conv(
            g,
            rng,
            &format!("cls.{which}.{}", cfg.cls_channels.len() + 1),
            cfg.k_styles,
            ci,
            3,
            false,
        );
    }
}

fn conv_block(
    g: &mut Graph,
    x: NodeId,
    prefix: &str,
    stride: usize,
    kind: RefKind,
    bn: bool,
    act: Act,
) -> NodeId {
    let w = pref(g, kind, &format!("{prefix}.conv.w"));
    let b = pref(g, kind, &format!("{prefix}.conv.b"));
    let mut y = g.conv2d(x, w, b, stride);
    if bn {
        let gamma = pref(g, kind, &format!("{prefix}.bn.gamma"));
        let beta = pref(g, kind, &format!("{prefix}.bn.beta"));
        y = g.batch_norm(
            y,
            gamma,
            beta,
            &format!("{prefix}.bn.rmean"),
            &format!("{prefix}.bn.rvar"),
            BN_EPS,
            BN_MOMENTUM,
        );
    }
    match act {
        Act::Leaky => g.leaky_relu(y, LEAKY_SLOPE),
        Act::Relu => g.relu(y),
        Act::None => y,
    }
}

struct GeneratorTaps {
    f_in: NodeId,
    f_out: NodeId,
    harmonized: NodeId,
}

/// Assemble one domain's generator path: domain-specific encoder depths
/// 1..=L_enc, shared trunk, domain-specific decoder tail, blending layer.
/// Skip connections add encoder depth d into decoder depth 8-d when both
/// endpoints are shared.
fn generator_path(
    g: &mut Graph,
    cfg: &ModelConfig,
    dom: DomainTag,
    image: NodeId,
    mask: NodeId,
    kind: RefKind,
) -> GeneratorTaps {
    let dk = dom.key();
    let x = g.concat_channels(image, mask);
    let mut cur = x;
    let mut enc_outs = Vec::with_capacity(GENERATOR_DEPTH);
    let mut f_in = x;
    for d in 1..=GENERATOR_DEPTH {
        let prefix = if d <= cfg.l_enc {
            format!("enc.{dk}.{d}")
        } else {
            format!("enc.sh.{d}")
        };
        cur = conv_block(
            g,
            cur,
            &prefix,
            ModelConfig::encoder_stride(d),
            kind,
            true,
            Act::Leaky,
        );
        enc_outs.push(cur);
        if d == cfg.l_enc {
            f_in = cur;
        }
    }
    let mut f_out = cur; // L_dec = 7: stage 2 ends at the bottleneck
    for d in 1..=GENERATOR_DEPTH {
        let shared = d <= GENERATOR_DEPTH - cfg.l_dec;
        let prefix = if shared {
            format!("dec.sh.{d}")
        } else {
            format!("dec.{dk}.{d}")
        };
        let skip_src = GENERATOR_DEPTH + 1 - d;
        if shared && skip_src > cfg.l_enc {
            cur = g.add(cur, enc_outs[skip_src - 1]);
        }
        if ModelConfig::decoder_upsamples(d) {
            cur = g.upsample2x(cur);
        }
        cur = if d < GENERATOR_DEPTH {
            conv_block(g, cur, &prefix, 1, kind, true, Act::Relu)
        } else {
            let y = conv_block(g, cur, &prefix, 1, kind, false, Act::None);
            g.clamp01(y)
        };
        if d == GENERATOR_DEPTH - cfg.l_dec {
            f_out = cur;
        }
    }
    let harmonized = g.blend(cur, image, mask);
    GeneratorTaps {
        f_in,
        f_out,
        harmonized,
    }
}

/// Stage-1 features -> one score per sample (global average pool after the
/// last conv, no output nonlinearity).
fn discriminator_path(g: &mut Graph, cfg: &ModelConfig, f: NodeId, kind: RefKind) -> NodeId {
    let mut cur = f;
    let last = cfg.disc_channels.len();
    for l in 1..=last {
        cur = conv_block(g, cur, &format!("disc.{l}"), 1, kind, false, Act::None);
        if l < last {
            cur = g.leaky_relu(cur, LEAKY_SLOPE);
            cur = g.max_pool2x2(cur);
        }
    }
    g.global_avg_pool(cur)
}

/// Features -> K-way style distribution.
fn classifier_path(
    g: &mut Graph,
    cfg: &ModelConfig,
    f: NodeId,
    which: ClassifierTap,
    kind: RefKind,
) -> NodeId {
    let wk = which.key();
    let mut cur = f;
    for l in 1..=cfg.cls_channels.len() {
        cur = conv_block(g, cur, &format!("cls.{wk}.{l}"), 1, kind, true, Act::Relu);
        cur = g.max_pool2x2(cur);
    }
    cur = conv_block(
        g,
        cur,
        &format!("cls.{wk}.{}", cfg.cls_channels.len() + 1),
        1,
        kind,
        false,
        Act::None,
    );
    let pooled = g.global_avg_pool(cur);
    g.softmax(pooled)
}

fn build_training_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    weights: &LossWeights,
    flags: &LossFlags,
) -> TrainNodes {
    let rd_comp = g.input("train.rd.composite");
    let rd_mask = g.input("train.rd.mask");
    let rd_gt = g.input("train.rd.gt");
    let rd_label_comp = g.input("train.rd.label.composite");
    let rd_label_gt = g.input("train.rd.label.gt");
    let rl_comp = g.input("train.rl.composite");
    let rl_mask = g.input("train.rl.mask");
    let rl_gt = g.input("train.rl.gt");

    let rd = generator_path(g, cfg, DomainTag::Rendered, rd_comp, rd_mask, RefKind::Train);
    let rl = generator_path(g, cfg, DomainTag::Real, rl_comp, rl_mask, RefKind::Train);

    let rec_rd = losses::graph::reconstruction(g, rd.harmonized, rd_gt);
    let rec_rl = losses::graph::reconstruction(g, rl.harmonized, rl_gt);

    // Discriminator root: updates D only, so the features are detached.
    let loss_d = flags.adv.then(|| {
        let f_rd = g.stop_gradient(rd.f_in);
        let f_rl = g.stop_gradient(rl.f_in);
        let s_rd = discriminator_path(g, cfg, f_rd, RefKind::Train);
        let s_rl = discriminator_path(g, cfg, f_rl, RefKind::Train);
        losses::graph::discriminator_hinge(g, s_rl, s_rd)
    });

    // Generator adversarial term: gradients flow through a frozen D into the
    // rendered encoder.
    let adv_g = flags.adv.then(|| {
        let s = discriminator_path(g, cfg, rd.f_in, RefKind::Frozen);
        losses::graph::adversarial_generator(g, s)
    });

    // Supervised style losses (rendered domain) train the classifiers and
    // shape the generator.
    let in_rd = flags.sty_in.then(|| {
        let p = classifier_path(g, cfg, rd.f_in, ClassifierTap::In, RefKind::Train);
        losses::graph::cross_entropy(g, p, rd_label_comp)
    });
    let out_rd = flags.sty_out.then(|| {
        let p = classifier_path(g, cfg, rd.f_out, ClassifierTap::Out, RefKind::Train);
        losses::graph::cross_entropy(g, p, rd_label_gt)
    });

    // Style aggregation (real domain): classifiers act as frozen measuring
    // devices; the input distribution is additionally a constant target.
    let (w_rl, er_rl) = {
        let need_p_in = flags.weighted || flags.entropy_reduction;
        let p_in_sg = need_p_in.then(|| {
            let p = classifier_path(g, cfg, rl.f_in, ClassifierTap::In, RefKind::Frozen);
            g.stop_gradient(p)
        });
        let p_out = (flags.weighted || flags.entropy_reduction)
            .then(|| classifier_path(g, cfg, rl.f_out, ClassifierTap::Out, RefKind::Frozen));
        let w = flags
            .weighted
            .then(|| losses::graph::cross_entropy(g, p_out.unwrap(), p_in_sg.unwrap()));
        let er = flags.entropy_reduction.then(|| {
            losses::graph::entropy_reduction(g, p_in_sg.unwrap(), p_out.unwrap(), weights.margin)
        });
        (w, er)
    };

    let rec_total = g.add(rec_rd, rec_rl);
    g.mark_output("train.loss.rec_total", rec_total);
    let mut total = rec_total;
    if let Some(adv) = adv_g {
        let t = g.affine(adv, weights.lambda_adv, 0.0);
        total = g.add(total, t);
    }
    let sty_rd = match (in_rd, out_rd) {
        (Some(a), Some(b)) => Some(g.add(a, b)),
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (None, None) => None,
    };
    if let Some(s) = sty_rd {
        let t = g.affine(s, weights.lambda_sty_rd, 0.0);
        total = g.add(total, t);
    }
    let sa = match (w_rl, er_rl) {
        (Some(a), Some(b)) => Some(g.add(a, b)),
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (None, None) => None,
    };
    if let Some(s) = sa {
        let t = g.affine(s, weights.lambda_sty_rl, 0.0);
        total = g.add(total, t);
    }

    g.mark_output("train.harmonized.rd", rd.harmonized);
    g.mark_output("train.harmonized.rl", rl.harmonized);
    g.mark_output("train.loss.total", total);
    g.mark_output("train.loss.rec_rd", rec_rd);
    g.mark_output("train.loss.rec_rl", rec_rl);
    if let Some(n) = loss_d {
        g.mark_output("train.loss.d", n);
    }

    TrainNodes {
        loss_d,
        loss_total: total,
        rec_total,
        rec_rd,
        rec_rl,
        adv_g,
        in_rd,
        out_rd,
        w_rl,
        er_rl,
    }
}

/// Frozen-reference forward paths used by evaluation and the public forward
/// operations.
fn build_eval_graphs(g: &mut Graph, cfg: &ModelConfig) {
    for dom in [DomainTag::Rendered, DomainTag::Real] {
        let d = dom.key();
        let image = g.input(&format!("eval.{d}.image"));
        let mask = g.input(&format!("eval.{d}.mask"));
        let taps = generator_path(g, cfg, dom, image, mask, RefKind::Frozen);
        let p_in = classifier_path(g, cfg, taps.f_in, ClassifierTap::In, RefKind::Frozen);
        let p_out = classifier_path(g, cfg, taps.f_out, ClassifierTap::Out, RefKind::Frozen);
        g.mark_output(&format!("eval.{d}.harmonized"), taps.harmonized);
        g.mark_output(&format!("eval.{d}.f_in"), taps.f_in);
        g.mark_output(&format!("eval.{d}.f_out"), taps.f_out);
        g.mark_output(&format!("eval.{d}.p_in"), p_in);
        g.mark_output(&format!("eval.{d}.p_out"), p_out);
    }
    let f = g.input("eval.disc.f");
    let score = discriminator_path(g, cfg, f, RefKind::Frozen);
    g.mark_output("eval.disc.score", score);
    for which in [ClassifierTap::In, ClassifierTap::Out] {
        let w = which.key();
        let f = g.input(&format!("eval.cls.{w}.f"));
        let p = classifier_path(g, cfg, f, which, RefKind::Frozen);
        g.mark_output(&format!("eval.cls.{w}.probs"), p);
    }
}
