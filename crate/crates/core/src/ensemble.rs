//! The mediated ensemble: shared prefix, per-superclass experts with
//! confidence heads, and the mediator. Inference runs every expert up to
//! the confidence layer, gates, and finishes only the surviving experts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::builder::{
    attach_confidence_head, build_expert, build_mediator, ConfidenceHead, EnsembleConfig,
};
use crate::error::{Error, Result};
use crate::gating::{self, FusionWeights, GatingConfig, GatingDecision};
use crate::nn::ops::softmax;
use crate::nn::{Network, Tensor};
use crate::partition::SuperclassMap;
use crate::scalar::Scalar;

/// Stable per-purpose seed derived from the run seed (splitmix64 over an
/// FNV hash of the tag).
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    let mut z = seed ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert<S> {
    /// Layers above the shared prefix.
    pub body: Network<S>,
    pub head: ConfidenceHead<S>,
    /// `classes[local] = fine class`.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub mediator: bool,
    pub experts: Vec<bool>,
    pub heads: bool,
}

/// Parameters touched by each part of the pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCosts {
    pub shared: usize,
    /// Expert layers above the shared prefix up to and including the confidence layer.
    pub prefix: Vec<usize>,
    pub head: Vec<usize>,
    /// Expert layers after the confidence layer.
    pub suffix: Vec<usize>,
    pub mediator: usize,
}

impl ParamCosts {
    /// Always paid: shared prefix, every expert up to the checkpoint, every head.
    pub fn fixed(&self) -> usize {
        self.shared + self.prefix.iter().sum::<usize>() + self.head.iter().sum::<usize>()
    }

    /// Everything, i.e. the limit of a very large threshold.
    pub fn everything(&self) -> usize {
        self.fixed() + self.suffix.iter().sum::<usize>() + self.mediator
    }

    /// Classic mixture of experts: every expert in full, no sharing, no mediator.
    pub fn traditional_moe(&self) -> usize {
        (0..self.prefix.len())
            .map(|i| self.shared + self.prefix[i] + self.suffix[i])
            .sum()
    }

    /// A single network of the mediator's configuration.
    pub fn single_model(&self) -> usize {
        self.shared + self.mediator
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub predicted: usize,
    pub fused: Vec<f64>,
    pub decision: GatingDecision<f64>,
    pub weights: FusionWeights<f64>,
    pub mediator_run: bool,
    pub params_touched: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<S> {
    pub config: EnsembleConfig,
    pub map: SuperclassMap,
    pub gating: GatingConfig,
    pub seed: u64,
    pub(crate) shared: Network<S>,
    pub(crate) mediator: Network<S>,
    pub(crate) experts: Vec<Expert<S>>,
    pub(crate) state: TrainState,
}

impl<S: Scalar> Ensemble<S> {
    /// Fresh ensemble holding an untrained mediator; experts are derived
    /// from the mediator once it is trained.
    pub fn new(
        config: EnsembleConfig,
        map: SuperclassMap,
        gating: GatingConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        gating.validate()?;
        if config.n_experts != map.n_superclasses() {
            return Err(Error::Architecture(format!(
                "{} experts configured for {} superclasses",
                config.n_experts,
                map.n_superclasses()
            )));
        }
        let mediator: Network<S> =
            build_mediator(&config, map.n_classes(), &mut rng_for(seed, "mediator", 0))?;
        let (shared, mediator) = mediator.split_at(config.shared_split());
        Ok(Ensemble {
            config,
            map,
            gating,
            seed,
            shared,
            mediator,
            experts: Vec::new(),
            state: TrainState::default(),
        })
    }

    /// Ensemble around an already trained full mediator network, split at
    /// this config's shared prefix. Experts still need training.
    pub fn from_trained_mediator(
        config: EnsembleConfig,
        map: SuperclassMap,
        gating: GatingConfig,
        seed: u64,
        mediator: Network<S>,
    ) -> Result<Self> {
        let mut ens = Ensemble::new(config, map, gating, seed)?;
        if mediator.layers() != ens.mediator().layers()
            || mediator.input_shape() != ens.shared.input_shape()
        {
            return Err(Error::Architecture(
                "mediator does not match the ensemble config".into(),
            ));
        }
        let mut mediator = mediator;
        for i in 0..mediator.len() {
            mediator.set_frozen(i, false);
        }
        let (shared, body) = mediator.split_at(ens.split());
        ens.shared = shared;
        ens.mediator = body;
        ens.state.mediator = true;
        Ok(ens)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        config: EnsembleConfig,
        map: SuperclassMap,
        gating: GatingConfig,
        seed: u64,
        shared: Network<S>,
        mediator: Network<S>,
        experts: Vec<Expert<S>>,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        gating.validate()?;
        let split = config.shared_split();
        if shared.len() != split || shared.len() + mediator.len() != config.total_layers() {
            return Err(Error::Architecture(
                "shared/mediator split does not match config".into(),
            ));
        }
        if !experts.is_empty() && experts.len() != map.n_superclasses() {
            return Err(Error::Architecture(
                "expert count differs from superclass count".into(),
            ));
        }
        for (i, e) in experts.iter().enumerate() {
            if e.head.outputs() != map.n_superclasses() || e.classes != map.members(i) {
                return Err(Error::Architecture(format!(
                    "expert {i} inconsistent with superclass map"
                )));
            }
        }
        Ok(Ensemble {
            config,
            map,
            gating,
            seed,
            shared,
            mediator,
            experts,
            state,
        })
    }

    pub fn shared(&self) -> &Network<S> {
        &self.shared
    }

    /// Mediator layers above the shared prefix.
    pub fn mediator_body(&self) -> &Network<S> {
        &self.mediator
    }

    pub fn mediator(&self) -> Network<S> {
        self.shared.join(&self.mediator).expect("consistent split")
    }

    pub fn experts(&self) -> &[Expert<S>] {
        &self.experts
    }

    pub fn expert_network(&self, i: usize) -> Network<S> {
        self.shared
            .join(&self.experts[i].body)
            .expect("consistent split")
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn n_experts(&self) -> usize {
        self.map.n_superclasses()
    }

    pub fn n_classes(&self) -> usize {
        self.map.n_classes()
    }

    pub fn split(&self) -> usize {
        self.shared.len()
    }

    /// Creates every expert and its confidence head from the current
    /// mediator. The shared prefix becomes frozen.
    pub(crate) fn derive_experts(&mut self) -> Result<()> {
        let mediator = self.mediator();
        let n = self.map.n_superclasses();
        let mut experts = Vec::with_capacity(n);
        for i in 0..n {
            experts.push(self.new_expert(&mediator, i, n)?);
        }
        self.shared.freeze_all();
        self.experts = experts;
        self.state.experts = vec![false; n];
        self.state.heads = false;
        Ok(())
    }

    pub(crate) fn new_expert(
        &self,
        mediator: &Network<S>,
        i: usize,
        n_heads: usize,
    ) -> Result<Expert<S>> {
        let classes = self.map.members(i).to_vec();
        let full = build_expert(
            &self.config,
            mediator,
            classes.len(),
            &mut rng_for(self.seed, "expert", i as u64),
        )?;
        let head = attach_confidence_head(
            &full,
            self.config.confidence_layer_index,
            n_heads,
            &mut rng_for(self.seed, "head", i as u64),
        )?;
        let (_, body) = full.split_at(self.split());
        Ok(Expert {
            body,
            head,
            classes,
        })
    }

    pub fn check_ready(&self) -> Result<()> {
        if !self.state.mediator {
            return Err(Error::NotReady("mediator is untrained".into()));
        }
        if self.experts.is_empty() || self.state.experts.iter().any(|t| !t) {
            return Err(Error::NotReady("not every expert is trained".into()));
        }
        if !self.state.heads {
            return Err(Error::NotReady("confidence heads are untrained".into()));
        }
        Ok(())
    }

    /// Body-relative number of layers that produce the confidence activation,
    /// or `None` when the checkpoint lies inside the shared prefix.
    fn body_checkpoint(&self) -> Option<usize> {
        let j = self.config.confidence_layer_index;
        (j >= self.split()).then(|| j + 1 - self.split())
    }

    pub fn param_costs(&self) -> ParamCosts {
        let cut = self.body_checkpoint().unwrap_or(0);
        let prefix = self
            .experts
            .iter()
            .map(|e| e.body.param_count_range(0, cut))
            .collect();
        let suffix = self
            .experts
            .iter()
            .map(|e| e.body.param_count_range(cut, e.body.len()))
            .collect();
        ParamCosts {
            shared: self.shared.param_count(),
            prefix,
            head: self.experts.iter().map(|e| e.head.param_count()).collect(),
            suffix,
            mediator: self.mediator.param_count(),
        }
    }

    /// Shared-prefix output plus the confidence-layer activation of every
    /// expert, for a batch.
    pub(crate) fn checkpoint_activations(
        &self,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        match self.body_checkpoint() {
            Some(cut) => {
                let z = self.shared.infer(x)?;
                let acts = self
                    .experts
                    .iter()
                    .map(|e| e.body.forward_range(&z, 0, cut))
                    .collect::<Result<Vec<_>>>()?;
                Ok((z, acts))
            }
            None => {
                let trace = self.shared.forward(x)?;
                let at_j = trace.activations[self.config.confidence_layer_index + 1].clone();
                let z = trace.output().clone();
                Ok((z, vec![at_j; self.experts.len()]))
            }
        }
    }

    /// Per-expert self-scores for a batch, `scores[sample][expert]`.
    pub(crate) fn scores_from(&self, acts: &[Tensor<S>]) -> Result<Vec<Vec<f64>>> {
        let batch = acts.first().map_or(0, Tensor::batch);
        let mut scores = vec![vec![0.0; self.experts.len()]; batch];
        for (i, (e, a)) in self.experts.iter().zip(acts).enumerate() {
            let out = e.head.forward(a)?;
            for (b, row) in scores.iter_mut().enumerate() {
                row[i] = gating::self_score(i, out.sample(b))?.to_f64_lossless();
            }
        }
        Ok(scores)
    }

    /// Finishes expert `i` from its checkpoint activation (or from the shared
    /// output when the checkpoint is inside the prefix) and returns local
    /// class probabilities per sample.
    pub(crate) fn finish_expert(
        &self,
        i: usize,
        z: &Tensor<S>,
        act: &Tensor<S>,
    ) -> Result<Vec<Vec<f64>>> {
        let body = &self.experts[i].body;
        let logits = match self.body_checkpoint() {
            Some(cut) => body.forward_range(act, cut, body.len())?,
            None => body.infer(z)?,
        };
        Ok(probabilities(&logits))
    }

    pub(crate) fn mediator_probs(&self, z: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
        Ok(probabilities(&self.mediator.infer(z)?))
    }

    /// Single-sample MMoE inference with conditional execution.
    pub fn predict(&self, input: &Tensor<S>, cfg: &GatingConfig) -> Result<PredictionRecord> {
        self.check_ready()?;
        cfg.validate()?;
        if input.batch() != 1 {
            return Err(Error::InvalidArgument(format!(
                "predict takes one sample, got batch {}",
                input.batch()
            )));
        }
        let costs = self.param_costs();
        let (z, acts) = self.checkpoint_activations(input)?;
        let scores = self.scores_from(&acts)?.remove(0);
        let decision = gating::gate(&scores, cfg);
        let weights = gating::fusion_weights(&decision, cfg.mediator_weight);
        let n_classes = self.n_classes();

        let mut params_touched = costs.fixed();
        let mut scattered = Vec::with_capacity(self.experts.len());
        for (i, e) in self.experts.iter().enumerate() {
            let stopped = decision.stopped.contains(&i);
            let local = if stopped {
                vec![0.0; e.classes.len()]
            } else {
                params_touched += costs.suffix[i];
                self.finish_expert(i, &z, &acts[i])?.remove(0)
            };
            scattered.push(gating::scatter_expert_probs(
                &local, &e.classes, n_classes, stopped,
            )?);
        }
        let mediator_run = weights.mediator_weight > 0.0;
        let mediator = if mediator_run {
            params_touched += costs.mediator;
            Some(self.mediator_probs(&z)?.remove(0))
        } else {
            None
        };
        let fused = gating::fuse(&scattered, mediator.as_deref(), &weights)?;
        Ok(PredictionRecord {
            predicted: gating::argmax(&fused),
            fused,
            decision,
            weights,
            mediator_run,
            params_touched,
        })
    }

    /// Hard branching: the expert with the highest self-score alone decides.
    /// Returns `(chosen expert, predicted fine class)`.
    pub fn predict_branching(&self, input: &Tensor<S>) -> Result<(usize, usize)> {
        self.check_ready()?;
        let (z, acts) = self.checkpoint_activations(input)?;
        let scores = self.scores_from(&acts)?.remove(0);
        let chosen = gating::argmax(&scores);
        let local = self.finish_expert(chosen, &z, &acts[chosen])?.remove(0);
        Ok((chosen, self.experts[chosen].classes[gating::argmax(&local)]))
    }

    /// The mediator on its own (the single-model baseline).
    pub fn predict_single(&self, input: &Tensor<S>) -> Result<usize> {
        if !self.state.mediator {
            return Err(Error::NotReady("mediator is untrained".into()));
        }
        let z = self.shared.infer(input)?;
        Ok(gating::argmax(&self.mediator_probs(&z)?.remove(0)))
    }
}

/// Row-wise softmax of a `(batch, classes)` logit tensor, widened to f64.
pub(crate) fn probabilities<S: Scalar>(logits: &Tensor<S>) -> Vec<Vec<f64>> {
    (0..logits.batch())
        .map(|b| {
            let row: Vec<f64> = logits
                .sample(b)
                .iter()
                .map(|v| v.to_f64_lossless())
                .collect();
            softmax(&row)
        })
        .collect()
}
