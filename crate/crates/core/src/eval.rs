//! Metrics, baselines and sweeps.
//!
//! Confidence scores do not depend on the threshold, so sweeps run every
//! network once per sample ([`EvalCache`]) and replay the gating per `T`.
//! [`evaluate`] is the reference path: a fresh `predict` per sample.

use std::fmt;
use std::str::FromStr;

use crate::ensemble::{Ensemble, ParamCosts};
use crate::error::{Error, Result};
use crate::gating::{self, GatingConfig, PredictionLine};
use crate::partition::{LabeledDataset, SuperclassMap};
use crate::scalar::Scalar;
use crate::training::{train_confidence_heads, train_experts, TrainConfig};

const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// The mediator on its own, as a plain full-class classifier.
    Baseline,
    /// Hard argmax over confidence scores; the chosen expert alone decides.
    Branching,
    /// Gating and fusion with the mediator weight forced to zero.
    Unmediated,
    Mmoe,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [
        EvalMode::Baseline,
        EvalMode::Branching,
        EvalMode::Unmediated,
        EvalMode::Mmoe,
    ];
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Baseline => "baseline",
            EvalMode::Branching => "branching",
            EvalMode::Unmediated => "unmediated",
            EvalMode::Mmoe => "mmoe",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown eval mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Summary {
            count: values.len(),
            mean,
            std: var.sqrt(),
        })
    }
}

/// Score margins (best minus runner-up), split by whether the best score
/// names the true superclass. An empty group is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MarginStats {
    pub correct: Option<Summary>,
    pub incorrect: Option<Summary>,
}

impl MarginStats {
    pub fn from_groups(correct: &[f64], incorrect: &[f64]) -> Self {
        MarginStats {
            correct: Summary::of(correct),
            incorrect: Summary::of(incorrect),
        }
    }
}

/// Best score minus second best; `None` for fewer than two scores.
pub fn margin(scores: &[f64]) -> Option<f64> {
    if scores.len() < 2 {
        return None;
    }
    let best = gating::argmax(scores);
    let runner_up = scores
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != best)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    Some(scores[best] - runner_up)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub threshold: f64,
    pub samples: usize,
    pub top1: f64,
    /// Fraction where the highest confidence score names the true
    /// superclass; `None` in baseline mode.
    pub superclass_accuracy: Option<f64>,
    /// Per-expert fraction of samples on which the expert did not run to
    /// completion; `None` in baseline mode.
    pub p_stop: Option<Vec<f64>>,
    /// Fraction where the expert owning the true superclass was stopped.
    pub false_stop_rate: f64,
    pub mediator_rate: f64,
    /// Analytic parameter load from the measured rates.
    pub expected_params: f64,
    /// Mean of per-sample parameter accounting.
    pub empirical_params: f64,
    pub margins: MarginStats,
}

impl MetricsReport {
    pub fn csv_header(n_experts: usize) -> String {
        let mut h = vec![
            "mode".to_string(),
            "T".into(),
            "samples".into(),
            "top1".into(),
            "superclass_acc".into(),
        ];
        h.extend((0..n_experts).map(|i| format!("p_stop_{i}")));
        h.extend(
            [
                "false_stop",
                "mediator_rate",
                "expected_params",
                "empirical_params",
                "margin_correct_mean",
                "margin_correct_std",
                "margin_incorrect_mean",
                "margin_incorrect_std",
            ]
            .map(String::from),
        );
        h.join(",")
    }

    /// One CSV row; absent values are empty cells.
    pub fn csv_row(&self, n_experts: usize) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut row = vec![
            self.mode.to_string(),
            self.threshold.to_string(),
            self.samples.to_string(),
            self.top1.to_string(),
            opt(self.superclass_accuracy),
        ];
        for i in 0..n_experts {
            row.push(opt(self.p_stop.as_ref().map(|p| p[i])));
        }
        row.push(self.false_stop_rate.to_string());
        row.push(self.mediator_rate.to_string());
        row.push(self.expected_params.to_string());
        row.push(self.empirical_params.to_string());
        for g in [self.margins.correct, self.margins.incorrect] {
            row.push(opt(g.map(|s| s.mean)));
            row.push(opt(g.map(|s| s.std)));
        }
        row.join(",")
    }
}

/// `fixed + Σ (1 − p_i)·suffix_i + p_mediator·mediator`.
pub fn expected_params(costs: &ParamCosts, p_stop: &[f64], p_mediator: f64) -> f64 {
    let experts: f64 = costs
        .suffix
        .iter()
        .zip(p_stop)
        .map(|(&s, &p)| (1.0 - p) * s as f64)
        .sum();
    costs.fixed() as f64 + experts + p_mediator * costs.mediator as f64
}

/// Per-sample outcome shared by the fresh and replayed paths.
#[derive(Debug, Clone)]
struct Outcome {
    predicted: usize,
    scores: Vec<f64>,
    stopped: Vec<bool>,
    mediator_run: bool,
    params: usize,
}

struct Tally<'a> {
    mode: EvalMode,
    threshold: f64,
    map: &'a SuperclassMap,
    costs: &'a ParamCosts,
    n: usize,
    correct: usize,
    branch_correct: usize,
    stops: Vec<usize>,
    false_stops: usize,
    mediator_runs: usize,
    params: f64,
    margin_ok: Vec<f64>,
    margin_bad: Vec<f64>,
    lines: Vec<PredictionLine>,
}

impl<'a> Tally<'a> {
    fn new(mode: EvalMode, threshold: f64, map: &'a SuperclassMap, costs: &'a ParamCosts) -> Self {
        Tally {
            mode,
            threshold,
            map,
            costs,
            n: 0,
            correct: 0,
            branch_correct: 0,
            stops: vec![0; map.n_superclasses()],
            false_stops: 0,
            mediator_runs: 0,
            params: 0.0,
            margin_ok: Vec::new(),
            margin_bad: Vec::new(),
            lines: Vec::new(),
        }
    }

    fn add(&mut self, label: usize, o: Outcome) -> Result<()> {
        let sc = self
            .map
            .superclass_of(label)
            .ok_or(Error::UncoveredLabel(label))?;
        self.correct += usize::from(o.predicted == label);
        if self.mode != EvalMode::Baseline {
            let branch_ok = gating::argmax(&o.scores) == sc;
            self.branch_correct += usize::from(branch_ok);
            if let Some(m) = margin(&o.scores) {
                if branch_ok {
                    self.margin_ok.push(m);
                } else {
                    self.margin_bad.push(m);
                }
            }
        }
        for (i, &s) in o.stopped.iter().enumerate() {
            self.stops[i] += usize::from(s);
        }
        self.false_stops += usize::from(o.stopped.get(sc).copied().unwrap_or(false));
        self.mediator_runs += usize::from(o.mediator_run);
        self.params += o.params as f64;
        self.lines.push(PredictionLine {
            sample_id: self.n,
            stopped: (0..o.stopped.len()).filter(|&i| o.stopped[i]).collect(),
            scores: o.scores,
            mediator_invoked: o.mediator_run,
            predicted: o.predicted,
            true_class: label,
        });
        self.n += 1;
        Ok(())
    }

    fn finish(self) -> (MetricsReport, Vec<PredictionLine>) {
        let n = self.n.max(1) as f64;
        let baseline = self.mode == EvalMode::Baseline;
        let p_stop: Vec<f64> = self.stops.iter().map(|&s| s as f64 / n).collect();
        let mediator_rate = self.mediator_runs as f64 / n;
        let expected = if baseline {
            self.costs.single_model() as f64
        } else {
            expected_params(self.costs, &p_stop, mediator_rate)
        };
        let report = MetricsReport {
            mode: self.mode,
            threshold: self.threshold,
            samples: self.n,
            top1: self.correct as f64 / n,
            superclass_accuracy: (!baseline).then(|| self.branch_correct as f64 / n),
            p_stop: (!baseline).then_some(p_stop),
            false_stop_rate: self.false_stops as f64 / n,
            mediator_rate,
            expected_params: expected,
            empirical_params: self.params / n,
            margins: MarginStats::from_groups(&self.margin_ok, &self.margin_bad),
        };
        (report, self.lines)
    }
}

fn mode_gating(cfg: &GatingConfig, mode: EvalMode) -> GatingConfig {
    match mode {
        EvalMode::Unmediated => cfg.unmediated(),
        _ => *cfg,
    }
}

/// Reference evaluation: one fresh forward pass per sample through the
/// public prediction API. Also returns the per-sample prediction log.
pub fn evaluate_detailed<S: Scalar>(
    ens: &Ensemble<S>,
    data: &LabeledDataset<S>,
    cfg: &GatingConfig,
    mode: EvalMode,
) -> Result<(MetricsReport, Vec<PredictionLine>)> {
    cfg.validate()?;
    if mode != EvalMode::Baseline {
        ens.check_ready()?;
    }
    let costs = ens.param_costs();
    let n_exp = ens.n_experts();
    let gcfg = mode_gating(cfg, mode);
    let mut tally = Tally::new(mode, cfg.threshold, &ens.map, &costs);
    for s in 0..data.len() {
        let x = data.images.select(&[s]);
        let outcome = match mode {
            EvalMode::Baseline => Outcome {
                predicted: ens.predict_single(&x)?,
                scores: Vec::new(),
                stopped: vec![false; n_exp],
                mediator_run: true,
                params: costs.single_model(),
            },
            EvalMode::Branching => {
                let (chosen, predicted) = ens.predict_branching(&x)?;
                let (_, acts) = ens.checkpoint_activations(&x)?;
                Outcome {
                    predicted,
                    scores: ens.scores_from(&acts)?.remove(0),
                    stopped: (0..n_exp).map(|i| i != chosen).collect(),
                    mediator_run: false,
                    params: costs.fixed() + costs.suffix[chosen],
                }
            }
            EvalMode::Unmediated | EvalMode::Mmoe => {
                let r = ens.predict(&x, &gcfg)?;
                Outcome {
                    predicted: r.predicted,
                    stopped: (0..n_exp)
                        .map(|i| r.decision.stopped.contains(&i))
                        .collect(),
                    scores: r.decision.scores,
                    mediator_run: r.mediator_run,
                    params: r.params_touched,
                }
            }
        };
        tally.add(data.labels[s], outcome)?;
    }
    Ok(tally.finish())
}

pub fn evaluate<S: Scalar>(
    ens: &Ensemble<S>,
    data: &LabeledDataset<S>,
    cfg: &GatingConfig,
    mode: EvalMode,
) -> Result<MetricsReport> {
    evaluate_detailed(ens, data, cfg, mode).map(|(r, _)| r)
}

/// Everything the gating needs for one sample, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutputs {
    pub label: usize,
    pub scores: Vec<f64>,
    /// Local class probabilities of every expert.
    pub expert_probs: Vec<Vec<f64>>,
    pub mediator_probs: Vec<f64>,
}

/// Cached forward passes of every expert, head and the mediator.
#[derive(Debug, Clone)]
pub struct EvalCache {
    pub map: SuperclassMap,
    pub costs: ParamCosts,
    pub samples: Vec<SampleOutputs>,
}

impl EvalCache {
    pub fn build<S: Scalar>(ens: &Ensemble<S>, data: &LabeledDataset<S>) -> Result<Self> {
        ens.check_ready()?;
        let mut samples = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(CHUNK) {
            let x = data.images.select(chunk);
            let (z, acts) = ens.checkpoint_activations(&x)?;
            let scores = ens.scores_from(&acts)?;
            let experts = (0..ens.n_experts())
                .map(|i| ens.finish_expert(i, &z, &acts[i]))
                .collect::<Result<Vec<_>>>()?;
            let mediator = ens.mediator_probs(&z)?;
            for (b, &s) in chunk.iter().enumerate() {
                samples.push(SampleOutputs {
                    label: data.labels[s],
                    scores: scores[b].clone(),
                    expert_probs: experts.iter().map(|e| e[b].clone()).collect(),
                    mediator_probs: mediator[b].clone(),
                });
            }
        }
        Ok(EvalCache {
            map: ens.map.clone(),
            costs: ens.param_costs(),
            samples,
        })
    }

    fn outcome(&self, s: &SampleOutputs, cfg: &GatingConfig, mode: EvalMode) -> Result<Outcome> {
        let n_exp = self.map.n_superclasses();
        let n_classes = self.map.n_classes();
        Ok(match mode {
            EvalMode::Baseline => Outcome {
                predicted: gating::argmax(&s.mediator_probs),
                scores: Vec::new(),
                stopped: vec![false; n_exp],
                mediator_run: true,
                params: self.costs.single_model(),
            },
            EvalMode::Branching => {
                let chosen = gating::argmax(&s.scores);
                Outcome {
                    predicted: self.map.members(chosen)[gating::argmax(&s.expert_probs[chosen])],
                    scores: s.scores.clone(),
                    stopped: (0..n_exp).map(|i| i != chosen).collect(),
                    mediator_run: false,
                    params: self.costs.fixed() + self.costs.suffix[chosen],
                }
            }
            EvalMode::Unmediated | EvalMode::Mmoe => {
                let cfg = mode_gating(cfg, mode);
                let decision = gating::gate(&s.scores, &cfg);
                let weights = gating::fusion_weights(&decision, cfg.mediator_weight);
                let mut params = self.costs.fixed();
                let mut scattered = Vec::with_capacity(n_exp);
                for i in 0..n_exp {
                    let stopped = decision.stopped.contains(&i);
                    let local = if stopped {
                        vec![0.0; s.expert_probs[i].len()]
                    } else {
                        params += self.costs.suffix[i];
                        s.expert_probs[i].clone()
                    };
                    scattered.push(gating::scatter_expert_probs(
                        &local,
                        self.map.members(i),
                        n_classes,
                        stopped,
                    )?);
                }
                let mediator_run = weights.mediator_weight > 0.0;
                if mediator_run {
                    params += self.costs.mediator;
                }
                let fused = gating::fuse(
                    &scattered,
                    mediator_run.then_some(&s.mediator_probs[..]),
                    &weights,
                )?;
                Outcome {
                    predicted: gating::argmax(&fused),
                    stopped: (0..n_exp).map(|i| decision.stopped.contains(&i)).collect(),
                    scores: decision.scores,
                    mediator_run,
                    params,
                }
            }
        })
    }

    /// Replays gating and fusion over the cached outputs.
    pub fn replay_detailed(
        &self,
        cfg: &GatingConfig,
        mode: EvalMode,
    ) -> Result<(MetricsReport, Vec<PredictionLine>)> {
        cfg.validate()?;
        let mut tally = Tally::new(mode, cfg.threshold, &self.map, &self.costs);
        for s in &self.samples {
            tally.add(s.label, self.outcome(s, cfg, mode)?)?;
        }
        Ok(tally.finish())
    }

    pub fn replay(&self, cfg: &GatingConfig, mode: EvalMode) -> Result<MetricsReport> {
        self.replay_detailed(cfg, mode).map(|(r, _)| r)
    }

    pub fn margin_stats(&self) -> Result<MarginStats> {
        Ok(self
            .replay(&GatingConfig::default(), EvalMode::Branching)?
            .margins)
    }

    /// MMoE metrics at every threshold in `t_list`.
    pub fn threshold_sweep(
        &self,
        t_list: &[f64],
        mediator_weight: f64,
    ) -> Result<Vec<MetricsReport>> {
        t_list
            .iter()
            .map(|&t| self.replay(&GatingConfig::new(t, mediator_weight)?, EvalMode::Mmoe))
            .collect()
    }
}

pub fn margin_stats<S: Scalar>(ens: &Ensemble<S>, data: &LabeledDataset<S>) -> Result<MarginStats> {
    EvalCache::build(ens, data)?.margin_stats()
}

/// Analytic expected parameter load of the full pipeline at `cfg`.
pub fn expected_param_load<S: Scalar>(
    ens: &Ensemble<S>,
    data: &LabeledDataset<S>,
    cfg: &GatingConfig,
) -> Result<f64> {
    Ok(EvalCache::build(ens, data)?
        .replay(cfg, EvalMode::Mmoe)?
        .expected_params)
}

pub fn sweep_csv(rows: &[MetricsReport], n_experts: usize) -> String {
    let mut out = String::from("T,top1");
    for i in 0..n_experts {
        out.push_str(&format!(",p_stop_{i}"));
    }
    out.push_str(",false_stop,mediator_rate,expected_params\n");
    for r in rows {
        out.push_str(&format!("{},{}", r.threshold, r.top1));
        for i in 0..n_experts {
            let p = r.p_stop.as_ref().map_or(0.0, |p| p[i]);
            out.push_str(&format!(",{p}"));
        }
        out.push_str(&format!(
            ",{},{},{}\n",
            r.false_stop_rate, r.mediator_rate, r.expected_params
        ));
    }
    out
}

/// Per-superclass comparison of the owning expert against the baseline,
/// both on the test samples of that superclass only.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedAccuracy {
    pub superclass: usize,
    pub samples: usize,
    pub expert: f64,
    pub baseline: f64,
}

pub fn restricted_accuracies(cache: &EvalCache) -> Vec<RestrictedAccuracy> {
    (0..cache.map.n_superclasses())
        .map(|i| {
            let members = cache.map.members(i);
            let mut n = 0;
            let (mut e, mut b) = (0, 0);
            for s in cache
                .samples
                .iter()
                .filter(|s| cache.map.superclass_of(s.label) == Some(i))
            {
                n += 1;
                e += usize::from(members[gating::argmax(&s.expert_probs[i])] == s.label);
                b += usize::from(gating::argmax(&s.mediator_probs) == s.label);
            }
            let d = n.max(1) as f64;
            RestrictedAccuracy {
                superclass: i,
                samples: n,
                expert: e as f64 / d,
                baseline: b as f64 / d,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedRow {
    pub k: usize,
    pub top1: f64,
}

/// Re-derives and retrains experts and heads from the trained mediator of
/// `ens` for every shared-prefix length in `k_list`, evaluating MMoE at
/// `cfg`. Each `k` uses the same seed.
pub fn shared_layers_sweep<S: Scalar>(
    ens: &Ensemble<S>,
    train: &LabeledDataset<S>,
    test: &LabeledDataset<S>,
    k_list: &[usize],
    train_cfg: &TrainConfig,
    cfg: &GatingConfig,
) -> Result<Vec<SharedRow>> {
    k_list
        .iter()
        .map(|&k| {
            let mut config = ens.config.clone();
            config.shared_prefix_len = k;
            let mut e = Ensemble::from_trained_mediator(
                config,
                ens.map.clone(),
                *cfg,
                ens.seed,
                ens.mediator(),
            )?;
            train_experts(&mut e, train, train_cfg)?;
            train_confidence_heads(&mut e, train, train_cfg)?;
            let top1 = EvalCache::build(&e, test)?
                .replay(cfg, EvalMode::Mmoe)?
                .top1;
            Ok(SharedRow { k, top1 })
        })
        .collect()
}

pub fn shared_csv(rows: &[SharedRow]) -> String {
    let mut out = String::from("k,top1\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.k, r.top1));
    }
    out
}

pub fn prediction_log(lines: &[PredictionLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}
