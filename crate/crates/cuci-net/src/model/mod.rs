//! The three-stage network: structure-preserving encoders, interpretation-cue
//! construction, and cue-guided multimodal interaction with adaptive
//! aggregation.

pub mod stage1;
pub mod stage2;
pub mod stage3;

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_joint_sequence, make_pseudo_context, ConversationalSample, JointSequenceSet, Modality,
    ModalityDims,
};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::tape::Var;

use stage1::{RhoTrace, Stage1, Stage1Output};
use stage2::{CueConstructor, CueOutput};
use stage3::{Aggregator, InteractionStack, LayerIo};

/// Which modality pair's local cue to zero out in a pair-subset ablation.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pair {
    TextAudio,
    TextVisual,
    AudioVisual,
}

/// Structural switches. Every flag removes one mechanism while keeping all
/// tensor shapes fixed, so ablated models stay checkpoint- and
/// config-compatible.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Skip the context/utterance role embeddings (embedding is identity).
    pub no_role_embeddings: bool,
    /// Replace each dual-expert FFN with a single expert and no router.
    pub no_dual_expert: bool,
    /// One shared acoustic/visual encoder instead of the primary +
    /// structure-preserving pair.
    pub shared_branches: bool,
    /// Zero-substitute all three pairwise local cues.
    pub no_local_cue: bool,
    /// Zero-substitute the global context cue.
    pub no_global_cue: bool,
    /// Zero-substitute one pairwise cue, keeping the other two.
    pub drop_pair: Option<Pair>,
    /// Force the guided update to identity: streams never see the cue.
    pub no_guidance: bool,
    /// Fix aggregation weights at 1/3 instead of learned softmax scores.
    pub uniform_aggregation: bool,
    /// Replace every sample's context with a copy of its utterance.
    pub pseudo_context: bool,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared hidden width of all three encoders and the interaction space.
    pub d: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub n_text_layers: usize,
    pub n_audio_layers: usize,
    pub n_visual_layers: usize,
    /// Number of cue-guided interaction layers; 0 classifies the encoder
    /// streams directly.
    pub interaction_depth: usize,
    pub input_dims: ModalityDims,
    pub num_classes: usize,
    /// Padded joint sequence length; samples that exceed it are rejected.
    pub max_len: usize,
    pub dropout: f64,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            num_heads: 2,
            ffn_hidden: 32,
            n_text_layers: 2,
            n_audio_layers: 1,
            n_visual_layers: 1,
            interaction_depth: 2,
            input_dims: ModalityDims { t: 12, a: 10, v: 10 },
            num_classes: 2,
            max_len: 16,
            dropout: 0.1,
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    /// The MUStARD-scale configuration: 192-wide encoders with 12 text,
    /// 8 visual, and 1 acoustic layer over 768/81/91-dimensional features.
    pub fn mustard() -> Self {
        ModelConfig {
            d: 192,
            num_heads: 4,
            ffn_hidden: 768,
            n_text_layers: 12,
            n_audio_layers: 1,
            n_visual_layers: 8,
            interaction_depth: 2,
            input_dims: ModalityDims { t: 768, a: 81, v: 91 },
            num_classes: 2,
            max_len: 128,
            dropout: 0.4,
            ablation: AblationFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.num_heads == 0 || self.d % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be a positive multiple of num_heads {}",
                self.d, self.num_heads
            )));
        }
        if self.d % 2 != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be even (the cue encoder splits it across two GRU directions)",
                self.d
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be positive".to_string()));
        }
        if self.n_text_layers == 0 || self.n_audio_layers == 0 || self.n_visual_layers == 0 {
            return Err(Error::Config(
                "each encoder needs at least one layer".to_string(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes {} must be at least 2",
                self.num_classes
            )));
        }
        if self.max_len < 4 {
            return Err(Error::Config(format!(
                "max_len {} cannot hold three separators plus content",
                self.max_len
            )));
        }
        if self.input_dims.t == 0 || self.input_dims.a == 0 || self.input_dims.v == 0 {
            return Err(Error::Config("input feature dims must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Named single-switch model variants, the full model first.
pub const VARIANTS: &[(&str, &str)] = &[
    ("full", "all mechanisms enabled"),
    ("no-role-emb", "context/utterance role embeddings removed"),
    ("no-dual-expert", "single-expert feed-forward, no routing"),
    ("shared-branches", "one shared acoustic/visual encoder for both streams"),
    ("no-local-cue", "all pairwise local cues zeroed"),
    ("no-global-cue", "global context cue zeroed"),
    ("pair-ta-tv", "audio-visual pairwise cue zeroed"),
    ("pair-ta-av", "text-visual pairwise cue zeroed"),
    ("pair-tv-av", "text-audio pairwise cue zeroed"),
    ("no-guidance", "interaction layers run without the cue"),
    ("uniform-aggregation", "modality weights fixed at 1/3"),
    ("pseudo-context", "true context replaced by a copy of the utterance"),
];

/// Returns `config` with the named variant's switches applied.
pub fn apply_variant(config: &ModelConfig, variant: &str) -> Result<ModelConfig> {
    let mut out = config.clone();
    let flags = &mut out.ablation;
    match variant {
        "full" => {}
        "no-role-emb" => flags.no_role_embeddings = true,
        "no-dual-expert" => flags.no_dual_expert = true,
        "shared-branches" => flags.shared_branches = true,
        "no-local-cue" => flags.no_local_cue = true,
        "no-global-cue" => flags.no_global_cue = true,
        "pair-ta-tv" => flags.drop_pair = Some(Pair::AudioVisual),
        "pair-ta-av" => flags.drop_pair = Some(Pair::TextVisual),
        "pair-tv-av" => flags.drop_pair = Some(Pair::TextAudio),
        "no-guidance" => flags.no_guidance = true,
        "uniform-aggregation" => flags.uniform_aggregation = true,
        "pseudo-context" => flags.pseudo_context = true,
        other => {
            let ids: Vec<&str> = VARIANTS.iter().map(|(id, _)| *id).collect();
            return Err(Error::Config(format!(
                "unknown variant '{other}'; valid variants: {}",
                ids.join(", ")
            )));
        }
    }
    Ok(out)
}

/// Builds the padded joint sequences for one sample under `config`,
/// substituting a pseudo-context when the variant demands it or when the
/// sample carries no context at all.
pub fn prepare_joint(sample: &ConversationalSample, config: &ModelConfig) -> Result<JointSequenceSet> {
    let context_free = Modality::ALL.iter().all(|&m| sample.context(m).nrows() == 0);
    if config.ablation.pseudo_context || context_free {
        build_joint_sequence(&make_pseudo_context(sample), config.max_len)
    } else {
        build_joint_sequence(sample, config.max_len)
    }
}

/// One layer's stream states for one modality: input, guided update, output.
pub struct ForwardOutput {
    pub logits: Var,
    /// Final aggregated multimodal representation, `1 x d`.
    pub fused: Var,
    /// Aggregation weights over (text, audio, visual), `1 x 3`.
    pub alpha: Var,
    pub stage1: Stage1Output,
    pub cue: CueOutput,
    /// Per-(modality, layer) interaction stream states, for telemetry.
    pub layer_io: Vec<LayerIo>,
}

impl ForwardOutput {
    pub fn rho_traces(&self) -> &[RhoTrace] {
        &self.stage1.rho_traces
    }
}

/// The full three-stage network over one parameter store.
pub struct CuciNet {
    pub config: ModelConfig,
    pub stage1: Stage1,
    pub cue: CueConstructor,
    pub interaction: InteractionStack,
    pub aggregator: Aggregator,
}

impl CuciNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let stage1 = Stage1::new(store, rng, config)?;
        let cue = CueConstructor::new(store, rng, config)?;
        let interaction = InteractionStack::new(store, rng, config);
        let aggregator = Aggregator::new(store, rng, config);
        Ok(CuciNet { config: config.clone(), stage1, cue, interaction, aggregator })
    }

    /// Runs all three stages on one sample's joint sequences.
    pub fn forward(&self, ctx: &mut Ctx, joint: &JointSequenceSet) -> Result<ForwardOutput> {
        let flags = &self.config.ablation;
        let masks: [Rc<Vec<bool>>; 3] = [
            Rc::new(joint.get(Modality::Text).valid_mask()),
            Rc::new(joint.get(Modality::Audio).valid_mask()),
            Rc::new(joint.get(Modality::Visual).valid_mask()),
        ];

        let stage1 = self.stage1.forward(ctx, joint, &masks, flags)?;
        let cue = self.cue.forward(
            ctx,
            [stage1.h_text, stage1.h_audio_structure, stage1.h_visual_structure],
            joint,
            &masks,
            flags,
        )?;

        // The text encoder is shared: its stream feeds both branches.
        let streams = [stage1.h_text, stage1.h_audio_primary, stage1.h_visual_primary];
        let (streams, layer_io) =
            self.interaction.forward(ctx, cue.u_f, streams, &masks, flags)?;

        let (logits, fused, alpha) =
            self.aggregator.forward(ctx, streams, &masks, flags.uniform_aggregation)?;

        Ok(ForwardOutput { logits, fused, alpha, stage1, cue, layer_io })
    }

    /// Eval-mode class prediction for one sample (lowest index wins ties).
    pub fn predict(&self, store: &ParamStore, joint: &JointSequenceSet) -> Result<usize> {
        let mut ctx = Ctx::eval(store);
        let out = self.forward(&mut ctx, joint)?;
        Ok(argmax_row(ctx.tape.value(out.logits)))
    }
}

/// Per-sample loss components.
pub struct SampleLoss {
    /// `ce + lambda_gate * gate`, `1 x 1`.
    pub total: Var,
    pub ce: Var,
    pub gate: Var,
    pub output: ForwardOutput,
}

/// Cross-entropy plus the weighted routing regularizer for one sample.
pub fn sample_loss(
    ctx: &mut Ctx,
    net: &CuciNet,
    joint: &JointSequenceSet,
    lambda_gate: f64,
    lambda_bias: f64,
) -> Result<SampleLoss> {
    let label = joint.label;
    if label >= net.config.num_classes {
        return Err(Error::Data(format!(
            "loss: sample '{}' label {} outside 0..{}",
            joint.sample_id, label, net.config.num_classes
        )));
    }
    let output = net.forward(ctx, joint)?;
    let ce = ctx.tape.cross_entropy(output.logits, label);
    let gate = stage1::gate_loss(
        ctx,
        &output.stage1.rho_traces,
        output.stage1.relation_score,
        lambda_bias,
    );
    let weighted = ctx.tape.scale(gate, lambda_gate);
    let total = ctx.tape.add(ce, weighted);
    Ok(SampleLoss { total, ce, gate, output })
}

/// Index of the maximum entry in a single-row matrix; first wins ties.
pub fn argmax_row(row: &Array2<f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in row.row(0).iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}
