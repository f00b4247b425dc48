//! The alternating two-phase training loop and its per-episode log.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::episodes::{Episode, EpisodeSampler, FoldSpec};
use crate::error::{Error, Result};
use crate::model::{combine_support, init_params, prototypes_on, segment_on, ModelParams};
use crate::objectives::{nn_loss, weighted_ce, PrototypeRegistry};
use crate::optim::{Optimizer, OptimizerConfig, ParamGrads};
use crate::volume::AnnotatedVolume;

/// The only parameter outside the segmentation path.
const PROJECTION_PREFIX: &str = "theta.proj.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    /// Seeds parameter initialization; episodes use the episode seed.
    pub seed: u64,
    /// Calls the checkpoint hook every this many episodes; 0 disables it.
    pub checkpoint_every: usize,
    pub weak_support: bool,
    /// Global L2 norm cap applied to each step's gradients.
    pub grad_clip: Option<f64>,
    pub registry_momentum: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            lr: 1e-3,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            weak_support: false,
            grad_clip: Some(5.0),
            registry_momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        if !(0.0..1.0).contains(&self.registry_momentum) {
            return Err(Error::Config(format!(
                "registry_momentum must be in [0, 1), got {}",
                self.registry_momentum
            )));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub class_id: u8,
    pub l_nn: f64,
    pub l_wce: f64,
    /// Mean positive-class weight over the query slices.
    pub beta: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpisodeRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Invalid(format!("train log: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    /// `(L_NN, L_WCE, beta)` per episode, without timings.
    pub fn loss_trace(&self) -> Vec<(f64, f64, f64)> {
        self.records.iter().map(|r| (r.l_nn, r.l_wce, r.beta)).collect()
    }

    /// Mean `L_WCE` over the records with index in `range`.
    pub fn mean_wce(&self, range: std::ops::Range<u64>) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| range.contains(&r.episode))
            .map(|r| r.l_wce)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub registry: PrototypeRegistry,
    pub log: TrainLog,
}

/// Losses of one episode's two steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub l_nn: f64,
    pub l_wce: f64,
    pub beta: f64,
}

/// Optimizer and registry state carried across episodes.
pub struct Trainer {
    pub params: ModelParams,
    pub registry: PrototypeRegistry,
    optimizer: Optimizer,
    cfg: RunConfig,
}

fn diverged(episode: u64, tensor: &str) -> Error {
    Error::Diverged {
        episode,
        tensor: tensor.to_string(),
    }
}

/// Tags forward-pass numeric failures with the episode they happened in.
fn tag(episode: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => diverged(episode, op),
        other => other,
    }
}

fn collect_grads(tape: &Tape, loss: Var, vars: &[Var]) -> Result<ParamGrads> {
    let mut grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.take(v)).collect())
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params: init_params(&cfg.model, cfg.train.seed)?,
            registry: PrototypeRegistry::new(cfg.train.registry_momentum),
            optimizer: Optimizer::new(cfg.train.optimizer.clone(), cfg.train.lr),
            cfg: cfg.clone(),
        })
    }

    /// Prototype step: the query image masked by each support annotation
    /// gives one prototype per shot; their mean is scored against the
    /// registry and only encoder-side parameters move.
    pub fn phase_one(&mut self, ep: &Episode) -> Result<f64> {
        let e = ep.index;
        let k = ep.class_id;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true)?;
        let mut p_hats = Vec::with_capacity(ep.query.len());
        for q in &ep.query {
            let x = tape.constant(q.image.clone())?;
            let masks = ep
                .support
                .iter()
                .map(|s| tape.constant(s.annotation.clone()))
                .collect::<Result<Vec<_>>>()?;
            let shots = prototypes_on(&mut tape, &bound, x, &masks).map_err(|err| tag(e, err))?;
            p_hats.push(tape.mean(&shots).map_err(|err| tag(e, err))?);
        }

        // Episode prototype for the registry: mean over the query slices.
        let dim = tape.value(p_hats[0]).numel();
        let mut episode_proto = vec![0.0f32; dim];
        for &p in &p_hats {
            for (acc, &v) in episode_proto.iter_mut().zip(tape.value(p).data()) {
                *acc += v;
            }
        }
        let inv = 1.0 / p_hats.len() as f32;
        episode_proto.iter_mut().for_each(|v| *v *= inv);

        // A class seen for the first time enters the registry before it is
        // scored, so the loss always has its own entry to compare against.
        let fresh = !self.registry.contains(k);
        if fresh {
            self.registry.update(k, &episode_proto).map_err(|err| tag(e, err))?;
        }

        let mut losses = Vec::with_capacity(p_hats.len());
        for &p in &p_hats {
            losses.push(nn_loss(&mut tape, p, &self.registry, k, &self.cfg.loss).map_err(|err| tag(e, err))?);
        }
        let loss = tape.mean(&losses).map_err(|err| tag(e, err))?;
        let l_nn = tape.value(loss).item() as f64;
        if !l_nn.is_finite() {
            return Err(diverged(e, "L_NN"));
        }
        let mut grads = collect_grads(&tape, loss, bound.vars())?;
        self.optimizer
            .step(&mut self.params, &mut grads, ModelParams::<f32>::is_theta, self.cfg.train.grad_clip)
            .map_err(|err| match err {
                Error::NonFinite { .. } => diverged(e, "L_NN gradient"),
                other => other,
            })?;
        if !fresh {
            self.registry.update(k, &episode_proto).map_err(|err| tag(e, err))?;
        }
        Ok(l_nn)
    }

    /// Segmentation step on the same queries, masked by the combined support,
    /// over every parameter on the segmentation path.
    pub fn phase_two(&mut self, ep: &Episode) -> Result<(f64, f64)> {
        let e = ep.index;
        let combined = combine_support(ep.support.iter().map(|s| &s.annotation))?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true)?;
        let m = tape.constant(combined)?;
        let mut losses = Vec::with_capacity(ep.query.len());
        let mut beta_sum = 0.0;
        for q in &ep.query {
            let x = tape.constant(q.image.clone())?;
            let pred = segment_on(&mut tape, &bound, x, Some(m)).map_err(|err| tag(e, err))?;
            let (l, beta) = weighted_ce(&mut tape, pred, &q.label, &self.cfg.loss).map_err(|err| tag(e, err))?;
            losses.push(l);
            beta_sum += beta;
        }
        let loss = tape.mean(&losses).map_err(|err| tag(e, err))?;
        let l_wce = tape.value(loss).item() as f64;
        if !l_wce.is_finite() {
            return Err(diverged(e, "L_WCE"));
        }
        let mut grads = collect_grads(&tape, loss, bound.vars())?;
        self.optimizer
            .step(
                &mut self.params,
                &mut grads,
                |name| !name.starts_with(PROJECTION_PREFIX),
                self.cfg.train.grad_clip,
            )
            .map_err(|err| match err {
                Error::NonFinite { .. } => diverged(e, "L_WCE gradient"),
                other => other,
            })?;
        Ok((l_wce, beta_sum / ep.query.len() as f64))
    }

    pub fn episode(&mut self, ep: &Episode) -> Result<StepReport> {
        let l_nn = self.phase_one(ep)?;
        let (l_wce, beta) = self.phase_two(ep)?;
        Ok(StepReport { l_nn, l_wce, beta })
    }
}

fn check_data(fold: &FoldSpec, data: &[AnnotatedVolume], cfg: &RunConfig) -> Result<()> {
    let [h, w] = cfg.model.input_size;
    for r in data.iter().filter(|r| fold.train_classes.contains(&r.class_id)) {
        let d = r.volume.dims();
        if d[1] != h || d[2] != w {
            return Err(Error::Shape {
                op: "train_fold",
                detail: format!(
                    "class {} patient {} has slices {}x{}, model expects {h}x{w}",
                    r.class_id, r.patient_id, d[1], d[2]
                ),
            });
        }
    }
    Ok(())
}

pub fn train_fold(fold: &FoldSpec, data: &[AnnotatedVolume], cfg: &RunConfig) -> Result<TrainOutcome> {
    train_fold_with(fold, data, cfg, |_, _, _| Ok(()))
}

/// [`train_fold`] with a hook called after every `checkpoint_every`-th
/// episode (1-based count) with the current parameters and registry.
pub fn train_fold_with(
    fold: &FoldSpec,
    data: &[AnnotatedVolume],
    cfg: &RunConfig,
    mut on_checkpoint: impl FnMut(usize, &ModelParams, &PrototypeRegistry) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(fold, data, cfg)?;
    let episode_cfg = cfg.effective_episode();
    let sampler = EpisodeSampler::new(fold, data, &episode_cfg)?;
    let mut trainer = Trainer::new(cfg)?;
    let mut log = TrainLog::default();
    for i in 0..cfg.train.episodes {
        let ep = sampler.sample(i as u64);
        if ep.class_id == fold.test_class {
            return Err(Error::Sampling(format!("episode {i} drew the held-out class")));
        }
        let start = Instant::now();
        let report = trainer.episode(&ep)?;
        log.records.push(EpisodeRecord {
            episode: i as u64,
            class_id: ep.class_id,
            l_nn: report.l_nn,
            l_wce: report.l_wce,
            beta: report.beta,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.train.checkpoint_every > 0 && (i + 1) % cfg.train.checkpoint_every == 0 {
            on_checkpoint(i + 1, &trainer.params, &trainer.registry)?;
        }
        if (i + 1) % 100 == 0 {
            log::info!(
                "episode {}: L_NN {:.4} L_WCE {:.4}",
                i + 1,
                report.l_nn,
                report.l_wce
            );
        }
    }
    Ok(TrainOutcome {
        params: trainer.params,
        registry: trainer.registry,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::fold_for;
    use crate::model::ModelConfig;
    use crate::phantom::{generate_phantoms, PhantomSpec};

    fn small() -> (Vec<AnnotatedVolume>, RunConfig) {
        let spec = PhantomSpec {
            n_classes: 3,
            n_patients: 3,
            dims: [12, 32, 32],
            ..PhantomSpec::default()
        };
        let data = generate_phantoms(&spec).unwrap();
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            levels: 3,
            base_channels: 4,
            proto_dim: 8,
            input_size: [32, 32],
            paper_scale: false,
        };
        cfg.episode.query_size = 2;
        cfg.train.episodes = 3;
        (data, cfg)
    }

    #[test]
    fn zero_episodes_returns_init() {
        let (data, mut cfg) = small();
        cfg.train.episodes = 0;
        let fold = fold_for(3, 3, 1).unwrap();
        let out = train_fold(&fold, &data, &cfg).unwrap();
        assert_eq!(out.params, init_params(&cfg.model, cfg.train.seed).unwrap());
        assert!(out.registry.is_empty());
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn phases_touch_their_partitions() {
        let (data, cfg) = small();
        let fold = fold_for(3, 3, 2).unwrap();
        let sampler = EpisodeSampler::new(&fold, &data, &cfg.effective_episode()).unwrap();
        let mut trainer = Trainer::new(&cfg).unwrap();
        for i in 0..3 {
            let ep = sampler.sample(i);
            let before = trainer.params.clone();
            trainer.phase_one(&ep).unwrap();
            for ((name, a), b) in trainer.params.iter().zip(before.tensors()) {
                if ModelParams::<f32>::is_phi(name) {
                    assert_eq!(a, b, "{name} moved in the prototype step");
                }
            }
            assert!(trainer.registry.contains(ep.class_id));
            let mid = trainer.params.clone();
            let reg_mid = trainer.registry.clone();
            trainer.phase_two(&ep).unwrap();
            assert_eq!(trainer.registry, reg_mid, "registry moved in the segmentation step");
            let changed_phi = trainer
                .params
                .iter()
                .zip(mid.tensors())
                .any(|((name, a), b)| ModelParams::<f32>::is_phi(name) && a != b);
            assert!(changed_phi);
            assert_eq!(trainer.params.get("theta.proj.weight"), mid.get("theta.proj.weight"));
        }
    }

    #[test]
    fn log_is_jsonl_round_trip() {
        let (data, cfg) = small();
        let fold = fold_for(3, 3, 1).unwrap();
        let out = train_fold(&fold, &data, &cfg).unwrap();
        assert_eq!(out.log.records.len(), 3);
        let mut buf = Vec::new();
        out.log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(TrainLog::from_jsonl(&text).unwrap(), out.log);
        for (i, r) in out.log.records.iter().enumerate() {
            assert_eq!(r.episode, i as u64);
            assert_ne!(r.class_id, fold.test_class);
            assert!(r.l_nn.is_finite() && r.l_wce.is_finite());
        }
    }

    #[test]
    fn checkpoint_hook_cadence() {
        let (data, mut cfg) = small();
        cfg.train.episodes = 5;
        cfg.train.checkpoint_every = 2;
        let fold = fold_for(3, 3, 1).unwrap();
        let mut seen = Vec::new();
        train_fold_with(&fold, &data, &cfg, |i, _, _| {
            seen.push(i);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, [2, 4]);
    }

    #[test]
    fn mismatched_extents_rejected() {
        let (data, mut cfg) = small();
        cfg.model.input_size = [64, 64];
        let fold = fold_for(3, 3, 1).unwrap();
        assert!(matches!(train_fold(&fold, &data, &cfg), Err(Error::Shape { .. })));
    }

    #[test]
    fn huge_lr_diverges_with_diagnostic() {
        let (data, mut cfg) = small();
        cfg.train.optimizer = OptimizerConfig::sgd();
        cfg.train.lr = 1e30;
        cfg.train.grad_clip = None;
        cfg.train.episodes = 20;
        let fold = fold_for(3, 3, 1).unwrap();
        match train_fold(&fold, &data, &cfg) {
            Err(Error::Diverged { episode, tensor }) => {
                assert!(episode < 20);
                assert!(!tensor.is_empty());
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log.records.len())),
        }
    }
}
