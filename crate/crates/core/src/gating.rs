//! Confidence-based early stopping and mediator-weighted fusion.
//!
//! Expert `i` is stopped when some other expert's self-score beats its own
//! by at least the threshold: `max_{k≠i} s_k − s_i ≥ T`. Stopped experts
//! contribute an all-zero distribution. When more than one expert stays
//! active the mediator is run and mixed in with weight `w_med`; active
//! experts share the remaining `1 − w_med` by a softmax over their scores.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::softmax;
use crate::scalar::{cast, Scalar};

pub const DEFAULT_MEDIATOR_WEIGHT: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingConfig {
    /// Stopping threshold `T`, strictly positive.
    pub threshold: f64,
    /// Mediator weight when it runs; `0` disables the mediator entirely.
    pub mediator_weight: f64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        GatingConfig {
            threshold: 4.0,
            mediator_weight: DEFAULT_MEDIATOR_WEIGHT,
        }
    }
}

impl GatingConfig {
    pub fn new(threshold: f64, mediator_weight: f64) -> Result<Self> {
        let cfg = GatingConfig {
            threshold,
            mediator_weight,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.mediator_weight) {
            return Err(Error::InvalidArgument(format!(
                "mediator weight must be in [0, 1], got {}",
                self.mediator_weight
            )));
        }
        Ok(())
    }

    pub fn with_threshold(self, threshold: f64) -> Self {
        GatingConfig { threshold, ..self }
    }

    pub fn unmediated(self) -> Self {
        GatingConfig {
            mediator_weight: 0.0,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingDecision<S> {
    pub active: BTreeSet<usize>,
    pub stopped: BTreeSet<usize>,
    pub mediator_invoked: bool,
    pub scores: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights<S> {
    pub expert_weights: Vec<S>,
    pub mediator_weight: S,
}

impl<S: Scalar> FusionWeights<S> {
    pub fn total(&self) -> S {
        self.mediator_weight + self.expert_weights.iter().copied().sum::<S>()
    }
}

/// Expert `i`'s self-score: component `i` of its confidence head output.
pub fn self_score<S: Scalar>(i: usize, head_output: &[S]) -> Result<S> {
    head_output.get(i).copied().ok_or_else(|| {
        Error::InvalidArgument(format!(
            "expert {i} has no score in a head output of dimension {}",
            head_output.len()
        ))
    })
}

/// Whether expert `i` stops. With a single expert the max over `k ≠ i` is
/// empty and the expert never stops.
pub fn stop_decision<S: Scalar>(scores: &[S], i: usize, threshold: S) -> bool {
    let rival = scores
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &s)| s)
        .fold(None, |m: Option<S>, s| Some(m.map_or(s, |m| m.max(s))));
    match rival {
        Some(best) => best - scores[i] >= threshold,
        None => false,
    }
}

pub fn gate<S: Scalar>(scores: &[S], cfg: &GatingConfig) -> GatingDecision<S> {
    let t = cast::<S>(cfg.threshold);
    let (stopped, active): (BTreeSet<usize>, BTreeSet<usize>) =
        (0..scores.len()).partition(|&i| stop_decision(scores, i, t));
    GatingDecision {
        mediator_invoked: active.len() > 1,
        active,
        stopped,
        scores: scores.to_vec(),
    }
}

/// Places an expert's local distribution at its global class indices.
/// Stopped experts yield the zero vector.
pub fn scatter_expert_probs<S: Scalar>(
    local_probs: &[S],
    local_to_global: &[usize],
    n_classes: usize,
    is_stopped: bool,
) -> Result<Vec<S>> {
    if local_probs.len() != local_to_global.len() {
        return Err(Error::InvalidArgument(format!(
            "{} local probabilities for {} mapped classes",
            local_probs.len(),
            local_to_global.len()
        )));
    }
    if let Some(&bad) = local_to_global.iter().find(|&&g| g >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            n_classes,
        });
    }
    let mut out = vec![S::zero(); n_classes];
    if !is_stopped {
        for (&p, &g) in local_probs.iter().zip(local_to_global) {
            out[g] = p;
        }
    }
    Ok(out)
}

/// Confidence normalization for active experts. Raw head outputs may be
/// negative; a softmax over the active scores keeps weights positive and
/// summing to one.
pub fn normalize_scores<S: Scalar>(scores: &[S], active: &BTreeSet<usize>) -> Vec<S> {
    let picked: Vec<S> = active.iter().map(|&i| scores[i]).collect();
    let probs = softmax(&picked);
    let mut out = vec![S::zero(); scores.len()];
    for (&i, p) in active.iter().zip(probs) {
        out[i] = p;
    }
    out
}

pub fn fusion_weights<S: Scalar>(
    decision: &GatingDecision<S>,
    mediator_weight: f64,
) -> FusionWeights<S> {
    let med = if decision.mediator_invoked {
        cast::<S>(mediator_weight)
    } else {
        S::zero()
    };
    let scale = S::one() - med;
    let expert_weights = normalize_scores(&decision.scores, &decision.active)
        .into_iter()
        .map(|w| w * scale)
        .collect();
    FusionWeights {
        expert_weights,
        mediator_weight: med,
    }
}

/// `Σ_i w_i · scattered_i + w_med · mediator`, reduced in expert-id order.
pub fn fuse<S: Scalar>(
    scattered: &[Vec<S>],
    mediator: Option<&[S]>,
    w: &FusionWeights<S>,
) -> Result<Vec<S>> {
    if scattered.len() != w.expert_weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} expert distributions for {} weights",
            scattered.len(),
            w.expert_weights.len()
        )));
    }
    let n = scattered
        .first()
        .map(Vec::len)
        .or(mediator.map(<[S]>::len))
        .unwrap_or(0);
    let mut out = vec![S::zero(); n];
    for (dist, &wi) in scattered.iter().zip(&w.expert_weights) {
        if dist.len() != n {
            return Err(Error::InvalidArgument(
                "expert distributions differ in length".into(),
            ));
        }
        if wi == S::zero() {
            continue;
        }
        for (o, &p) in out.iter_mut().zip(dist) {
            *o += wi * p;
        }
    }
    if w.mediator_weight > S::zero() {
        let med = mediator.ok_or(Error::MissingMediator(w.mediator_weight.to_f64_lossless()))?;
        if med.len() != n {
            return Err(Error::InvalidArgument(
                "mediator distribution has wrong length".into(),
            ));
        }
        for (o, &p) in out.iter_mut().zip(med) {
            *o += w.mediator_weight * p;
        }
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One line of the per-sample prediction log.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLine {
    pub sample_id: usize,
    pub scores: Vec<f64>,
    pub stopped: BTreeSet<usize>,
    pub mediator_invoked: bool,
    pub predicted: usize,
    pub true_class: usize,
}

impl fmt::Display for PredictionLine {
    /// `id<TAB>s0,s1,..<TAB>stopped ids or -<TAB>0|1<TAB>predicted<TAB>true`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scores: Vec<String> = self.scores.iter().map(|s| s.to_string()).collect();
        let stopped = if self.stopped.is_empty() {
            "-".to_string()
        } else {
            self.stopped
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.sample_id,
            scores.join(","),
            stopped,
            u8::from(self.mediator_invoked),
            self.predicted,
            self.true_class
        )
    }
}

impl FromStr for PredictionLine {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad =
            |what: &str| Error::InvalidArgument(format!("bad prediction line ({what}): {line}"));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(bad("field count"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("integer"));
        let scores = fields[1]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| bad("score")))
            .collect::<Result<Vec<_>>>()?;
        let stopped = if fields[2] == "-" {
            BTreeSet::new()
        } else {
            fields[2].split(',').map(num).collect::<Result<_>>()?
        };
        let mediator_invoked = match fields[3] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("mediator flag")),
        };
        Ok(PredictionLine {
            sample_id: num(fields[0])?,
            scores,
            stopped,
            mediator_invoked,
            predicted: num(fields[4])?,
            true_class: num(fields[5])?,
        })
    }
}
