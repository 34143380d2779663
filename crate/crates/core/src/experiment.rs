//! End-to-end workflows shared by the command line and the acceptance suite:
//! data generation, training, per-prior evaluation, solver sweeps, rollouts and
//! likelihood reports.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cardinality::{self, CardinalityConfig, CardinalityModel, TrainConfig};
use crate::net::AdamW;
use crate::cfm::{self, BaseConfig, BaseMode, CouplingConfig, FlowConfig, FlowModel, FlowTrace};
use crate::compose::{
    per_round_deposition, rollout_summaries, BaseKernel, DensitySchedule, Kernel, LearnedKernel, OracleKernel, ScheduleKind,
};
use crate::dataset::{
    condition_vector, encode_all, encode_event, sample_condition, sample_gun, Cardinalities, ConditionTemplate, Context,
    EncodeStats, EncodedEvent, EventRecord, PriorKind, PriorSpec,
};
use crate::error::{Error, Result};
use crate::flow::{log_likelihood_batch, sample_base_kernel, sample_flow_batch, sample_kernel_batch, SolverConfig, SolverMethod};
use crate::metrics::{self, mmd, subsample_report, ClassifierConfig, Estimate};
use crate::oracle::{simulate_event, Condition, ToyPhysicsConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 100_000,
            n_val: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CardinalitySection {
    pub model: CardinalityConfig,
    pub train: TrainConfig,
}

impl Default for CardinalitySection {
    fn default() -> Self {
        Self {
            model: CardinalityConfig {
                n_max: 20,
                hidden: 64,
                layers: 2,
                heads: 4,
                ff_mult: 2,
                dropout: 0.0,
            },
            train: TrainConfig {
                epochs: 4,
                batch_size: 256,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub model: FlowConfig,
    pub base: BaseConfig,
    pub coupling: CouplingConfig,
    pub train: TrainConfig,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            model: FlowConfig {
                hidden: 64,
                layers: 3,
                heads: 4,
                ff_mult: 2,
                dropout: 0.0,
            },
            base: BaseConfig::default(),
            coupling: CouplingConfig::default(),
            train: TrainConfig {
                epochs: 8,
                batch_size: 256,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub priors: Vec<PriorKind>,
    pub n_eval: usize,
    pub k: usize,
    pub classifier: ClassifierConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            priors: PriorKind::ALL.to_vec(),
            n_eval: 2000,
            k: 10,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParetoConfig {
    pub methods: Vec<SolverMethod>,
    pub steps: Vec<usize>,
    pub n_events: usize,
    pub repeats: usize,
    pub k: usize,
}

impl Default for ParetoConfig {
    fn default() -> Self {
        Self {
            methods: SolverMethod::ALL.to_vec(),
            steps: vec![2, 4, 10, 20, 40],
            n_events: 1000,
            repeats: 5,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub schedules: Vec<ScheduleKind>,
    /// Densities of the custom schedule, if listed.
    pub custom: Vec<f64>,
    pub n_rollouts: usize,
    pub k: usize,
    pub initial: ConditionTemplate,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            schedules: ScheduleKind::NAMED.to_vec(),
            custom: Vec::new(),
            n_rollouts: 1000,
            k: 10,
            initial: ConditionTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NllConfig {
    pub n_events: usize,
    pub solver: SolverConfig,
}

impl Default for NllConfig {
    fn default() -> Self {
        Self {
            n_events: 300,
            solver: SolverConfig {
                method: SolverMethod::Rk4,
                steps: 8,
            },
        }
    }
}

/// Every setting of a run. Unknown keys are rejected at parse time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub physics: ToyPhysicsConfig,
    pub data: DataConfig,
    pub cardinality: CardinalitySection,
    pub flow: FlowSection,
    pub solver: SolverConfig,
    pub eval: EvalConfig,
    pub pareto: ParetoConfig,
    pub rollout: RolloutConfig,
    pub nll: NllConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            physics: ToyPhysicsConfig::default(),
            data: DataConfig::default(),
            cardinality: CardinalitySection::default(),
            flow: FlowSection::default(),
            solver: SolverConfig::default(),
            eval: EvalConfig::default(),
            pareto: ParetoConfig::default(),
            rollout: RolloutConfig::default(),
            nll: NllConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        self.flow.base.validate()?;
        self.flow.coupling.validate()?;
        self.solver.validate()?;
        self.nll.solver.validate()?;
        if (self.flow.base.e_cutoff - self.physics.e_cutoff).abs() > 0.0 {
            return Err(Error::invalid("flow.base.e_cutoff must equal physics.e_cutoff"));
        }
        if self.eval.k < 2 || self.rollout.k < 2 || self.pareto.k < 2 {
            return Err(Error::invalid("subsample counts k must be at least 2"));
        }
        if self.pareto.steps.contains(&0) || self.pareto.repeats == 0 {
            return Err(Error::invalid("pareto steps and repeats must be positive"));
        }
        if !self.rollout.custom.is_empty() {
            DensitySchedule::custom(self.rollout.custom.clone())?;
        }
        self.rollout.initial.condition()?;
        Ok(())
    }

    /// Sub-seed of a named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        rng::named(self.seed, stage)
    }

    pub fn e_cutoff(&self) -> f64 {
        self.physics.e_cutoff
    }

    pub fn schedules(&self) -> Result<Vec<DensitySchedule>> {
        let mut out = Vec::new();
        for &k in &self.rollout.schedules {
            if k == ScheduleKind::Custom {
                out.push(DensitySchedule::custom(self.rollout.custom.clone())?);
            } else {
                out.push(DensitySchedule::named(k, self.stage_seed("schedule"))?);
            }
        }
        Ok(out)
    }
}

/// Gun-prior events; event `i` depends only on `(seed, i)`.
pub fn generate_dataset(physics: &ToyPhysicsConfig, n: usize, seed: u64) -> Vec<EventRecord> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[i as u64]);
            let c = sample_gun(&mut r);
            EventRecord::from_event(&simulate_event(physics, &c, &mut r))
        })
        .collect()
}

/// Oracle events for given conditions; event `i` uses `seeds[i]`.
pub fn oracle_events(physics: &ToyPhysicsConfig, conditions: &[Condition], seeds: &[u64]) -> Result<Vec<EventRecord>> {
    OracleKernel { cfg: physics.clone() }.apply(conditions, seeds)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DataStats {
    pub events: usize,
    pub mean_e_dep: f64,
    pub mean_multiplicity: f64,
    pub max_count: usize,
    pub empty_events: usize,
}

impl DataStats {
    pub fn of(records: &[EventRecord]) -> Self {
        let n = records.len();
        let denom = n.max(1) as f64;
        Self {
            events: n,
            mean_e_dep: records.iter().map(|r| r.e_dep).sum::<f64>() / denom,
            mean_multiplicity: records.iter().map(|r| r.outgoing.len() as f64).sum::<f64>() / denom,
            max_count: records.iter().map(|r| r.outgoing.len()).max().unwrap_or(0),
            empty_events: records.iter().filter(|r| r.outgoing.is_empty()).count(),
        }
    }
}

pub fn encode(cfg: &RunConfig, records: &[EventRecord]) -> (Vec<EncodedEvent>, EncodeStats) {
    encode_all(records, cfg.e_cutoff(), cfg.cardinality.model.n_max)
}

pub fn cardinality_pairs(data: &[EncodedEvent]) -> Vec<(Context, Cardinalities)> {
    data.iter().map(|e| (Context::of(e), e.cardinalities)).collect()
}

/// Trains the cardinality model; returns `(train, validation)` mean NLL per epoch.
pub fn train_cardinality_model(
    cfg: &RunConfig,
    data: &[EncodedEvent],
    val: &[EncodedEvent],
    mut on_epoch: impl FnMut(usize, &CardinalityModel, f64, f64) -> Result<()>,
) -> Result<(CardinalityModel, Vec<(f64, f64)>)> {
    let seed = cfg.stage_seed("train-card");
    let mut model = CardinalityModel::new(cfg.cardinality.model, seed)?;
    let train = &cfg.cardinality.train;
    let pairs = cardinality_pairs(data);
    let val_pairs = cardinality_pairs(val);
    let mut opt = AdamW::new(&model.net.params, train.optimizer);
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let trace = cardinality::train_epoch(&mut model, &mut opt, &pairs, train.batch_size, seed, epoch)?;
        let t = trace.iter().sum::<f64>() / trace.len().max(1) as f64;
        let v = if val_pairs.is_empty() { f64::NAN } else { cardinality::evaluate(&model, &val_pairs)? };
        on_epoch(epoch, &model, t, v)?;
        history.push((t, v));
    }
    Ok((model, history))
}

pub fn train_flow_model(
    cfg: &RunConfig,
    data: &[EncodedEvent],
    val: &[EncodedEvent],
    on_epoch: impl FnMut(usize, &FlowModel, f64, f64) -> Result<()>,
) -> Result<(FlowModel, FlowTrace)> {
    let seed = cfg.stage_seed("train-flow");
    let mut model = FlowModel::new(cfg.flow.model, seed)?;
    let train = TrainConfig {
        seed,
        ..cfg.flow.train
    };
    let trace = cfm::train_flow(&mut model, data, val, &cfg.flow.base, &cfg.flow.coupling, &train, on_epoch)?;
    Ok((model, trace))
}

/// Trained kernel components.
pub struct Models {
    pub card: CardinalityModel,
    pub flow: FlowModel,
    pub base: BaseConfig,
}

/// Physical base with the given spread, matching a run's cutoff.
pub fn physical_base(cfg: &RunConfig, kappa: f64) -> BaseConfig {
    BaseConfig {
        kappa,
        e_cutoff: cfg.e_cutoff(),
        mode: BaseMode::Physical,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Model,
    PhysBase,
    IsoBase,
    Oracle,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Model => "model",
            Source::PhysBase => "phys_base",
            Source::IsoBase => "iso_base",
            Source::Oracle => "oracle",
        }
    }
}

pub const EVAL_HEADER: &str = "prior,source,mmd,mmd_sem,ed,ed_sem,auc,auc_sem,n_eval,k";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub prior: PriorKind,
    pub source: Source,
    pub mmd: Estimate,
    pub ed: Estimate,
    pub auc: Estimate,
    pub n_eval: usize,
    pub k: usize,
}

impl EvalRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.prior.name(),
            self.source.name(),
            self.mmd.value,
            self.mmd.sem,
            self.ed.value,
            self.ed.sem,
            self.auc.value,
            self.auc.sem,
            self.n_eval,
            self.k
        )
    }
}

/// Conditions and per-event seeds of one prior's evaluation set.
pub fn prior_conditions(prior: PriorKind, n: usize, seed: u64) -> Result<(Vec<Condition>, Vec<u64>)> {
    let spec = PriorSpec::standard(prior);
    let mut r = rng::stream(seed, &[prior as u64]);
    let conds = (0..n).map(|_| sample_condition(&spec, &mut r)).collect::<Result<Vec<_>>>()?;
    let seeds = (0..n).map(|i| rng::derive(seed, &[prior as u64, 1, i as u64])).collect();
    Ok((conds, seeds))
}

/// Events of `source` for the given conditions.
pub fn source_events(
    cfg: &RunConfig,
    models: &Models,
    source: Source,
    conditions: &[Condition],
    seeds: &[u64],
    solver: &SolverConfig,
) -> Result<Vec<EventRecord>> {
    let kappa = match source {
        Source::Model => return sample_kernel_batch(&models.card, &models.flow, conditions, seeds, &models.base, solver),
        Source::Oracle => return oracle_events(&cfg.physics, conditions, seeds),
        Source::PhysBase => BaseConfig::KAPPA_PHYSICAL,
        Source::IsoBase => BaseConfig::KAPPA_ISOTROPIC,
    };
    BaseKernel {
        card: &models.card,
        base: physical_base(cfg, kappa),
    }
    .apply(conditions, seeds)
}

/// One row per source for the prior: each source is compared against oracle
/// events on the same conditions with disjoint seeds.
pub fn evaluate_prior(cfg: &RunConfig, models: &Models, prior: PriorKind, sources: &[Source]) -> Result<Vec<EvalRow>> {
    let seed = cfg.stage_seed("eval");
    let n = cfg.eval.n_eval;
    let (conds, seeds) = prior_conditions(prior, n, seed)?;
    let reference = oracle_events(&cfg.physics, &conds, &seeds)?;
    let ref_summary = metrics::summarize_all(&reference)?;
    let mut rows = Vec::new();
    for (si, &source) in sources.iter().enumerate() {
        let other_seeds: Vec<u64> = seeds.iter().map(|&s| rng::derive(s, &[2 + si as u64])).collect();
        let events = source_events(cfg, models, source, &conds, &other_seeds, &cfg.solver)?;
        let summary = metrics::summarize_all(&events)?;
        let d = metrics::distance_report(&summary, &ref_summary, cfg.eval.k)?;
        let auc = metrics::classifier_auc(&events, &reference, cfg.e_cutoff(), &cfg.eval.classifier, cfg.eval.k, rng::derive(seed, &[prior as u64, 7]))?;
        rows.push(EvalRow {
            prior,
            source,
            mmd: d.mmd,
            ed: d.ed,
            auc,
            n_eval: n,
            k: cfg.eval.k,
        });
    }
    Ok(rows)
}

/// `b − a` exceeds `n` combined standard errors.
pub fn clearly_less(a: &Estimate, b: &Estimate, n: f64) -> bool {
    b.value - a.value > n * (a.sem * a.sem + b.sem * b.sem).sqrt()
}

pub const PARETO_HEADER_PREFIX: &str = "method,steps,stages,evaluations,ms_per_event,ms_std,mmd,mmd_sem";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub method: SolverMethod,
    pub steps: usize,
    /// Wall-clock milliseconds per event of each timed repeat.
    pub repeat_ms: Vec<f64>,
    pub mmd: Estimate,
}

impl ParetoRow {
    pub fn mean_ms(&self) -> f64 {
        self.repeat_ms.iter().sum::<f64>() / self.repeat_ms.len() as f64
    }

    /// Bessel-corrected standard deviation of the repeats.
    pub fn std_ms(&self) -> f64 {
        let m = self.mean_ms();
        let n = self.repeat_ms.len() as f64;
        (self.repeat_ms.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
    }

    pub fn header(repeats: usize) -> String {
        let mut h = PARETO_HEADER_PREFIX.to_string();
        for r in 1..=repeats {
            h.push_str(&format!(",repeat_{r}_ms"));
        }
        h
    }

    pub fn csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{}",
            self.method.name(),
            self.steps,
            self.method.stages(),
            self.steps * self.method.stages(),
            self.mean_ms(),
            self.std_ms(),
            self.mmd.value,
            self.mmd.sem
        );
        for v in &self.repeat_ms {
            s.push_str(&format!(",{v}"));
        }
        s
    }
}

/// Times flow integration over the solver grid on gun-prior conditions with
/// fixed cardinalities, and measures MMD against oracle events. One warm-up
/// call per cell is discarded.
pub fn pareto(cfg: &RunConfig, models: &Models) -> Result<Vec<ParetoRow>> {
    let seed = cfg.stage_seed("pareto");
    let n = cfg.pareto.n_events;
    let (conds, seeds) = prior_conditions(PriorKind::Gun, n, seed)?;
    let reference = oracle_events(&cfg.physics, &conds, &seeds)?;
    let ref_summary = metrics::summarize_all(&reference)?;
    let sample_seeds: Vec<u64> = seeds.iter().map(|&s| rng::derive(s, &[9])).collect();
    let ctx: Vec<Context> = conds
        .iter()
        .map(|c| Context::new(&condition_vector(c, cfg.e_cutoff()), c.incident.species))
        .collect();
    let cards = models.card.sample_batch(&ctx, &sample_seeds)?;
    let warm = n.min(32);
    let mut rows = Vec::new();
    for &method in &cfg.pareto.methods {
        for &steps in &cfg.pareto.steps {
            let solver = SolverConfig { method, steps };
            sample_flow_batch(&models.flow, &conds[..warm], &cards[..warm], &sample_seeds[..warm], &models.base, &solver)?;
            let mut repeat_ms = Vec::with_capacity(cfg.pareto.repeats);
            let mut events = Vec::new();
            for _ in 0..cfg.pareto.repeats {
                let t0 = Instant::now();
                events = sample_flow_batch(&models.flow, &conds, &cards, &sample_seeds, &models.base, &solver)?;
                repeat_ms.push(t0.elapsed().as_secs_f64() * 1e3 / n as f64);
            }
            let summary = metrics::summarize_all(&events)?;
            let mmd_est = subsample_report(|a, b| mmd(a, b), &summary, &ref_summary, cfg.pareto.k)?;
            rows.push(ParetoRow {
                method,
                steps,
                repeat_ms,
                mmd: mmd_est,
            });
        }
    }
    Ok(rows)
}

pub const ROLLOUT_HEADER: &str = "schedule,comparison,mmd,mmd_sem,n_rollouts,k";
pub const TRACE_HEADER: &str = "schedule,kernel,round,density,mean_multiplicity,mean_e_dep,e_dep_sem";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub schedule: DensitySchedule,
    /// Oracle against oracle with disjoint seeds.
    pub floor: Estimate,
    pub model: Estimate,
    pub base: Estimate,
    /// Per kernel (`oracle`, `model`, `phys_base`), per round: mean multiplicity and e_dep.
    pub traces: Vec<(String, Vec<(f64, Estimate)>)>,
}

impl RolloutReport {
    pub fn csv_rows(&self, n: usize, k: usize) -> Vec<String> {
        let name = self.schedule.kind.name();
        [("oracle_vs_oracle", self.floor), ("model_vs_oracle", self.model), ("base_vs_oracle", self.base)]
            .iter()
            .map(|(c, e)| format!("{name},{c},{},{},{n},{k}", e.value, e.sem))
            .collect()
    }

    pub fn trace_rows(&self) -> Vec<String> {
        let name = self.schedule.kind.name();
        let mut rows = Vec::new();
        for (kernel, rounds) in &self.traces {
            for (r, (mult, dep)) in rounds.iter().enumerate() {
                rows.push(format!("{name},{kernel},{},{},{mult},{},{}", r + 1, self.schedule.densities[r], dep.value, dep.sem));
            }
        }
        rows
    }
}

fn mean_multiplicity(summaries: &[Vec<f64>]) -> Vec<f64> {
    let rounds = summaries.first().map(|s| s.len() / 2).unwrap_or(0);
    (0..rounds)
        .map(|r| summaries.iter().map(|s| s[2 * r]).sum::<f64>() / summaries.len().max(1) as f64)
        .collect()
}

pub fn rollout_report(cfg: &RunConfig, models: &Models, schedule: &DensitySchedule) -> Result<RolloutReport> {
    let seed = cfg.stage_seed("rollout");
    let initial = cfg.rollout.initial.condition()?.incident;
    let (n, k, e_cut) = (cfg.rollout.n_rollouts, cfg.rollout.k, cfg.e_cutoff());
    let oracle = OracleKernel { cfg: cfg.physics.clone() };
    let learned = LearnedKernel {
        card: &models.card,
        flow: &models.flow,
        base: models.base,
        solver: cfg.solver,
    };
    let base = BaseKernel {
        card: &models.card,
        base: physical_base(cfg, BaseConfig::KAPPA_PHYSICAL),
    };
    let run = |kernel: &dyn Kernel, tag: u64| rollout_summaries(kernel, &initial, schedule, e_cut, n, rng::derive(seed, &[tag]));
    let reference = run(&oracle, 0)?;
    let other = run(&oracle, 1)?;
    let model = run(&learned, 2)?;
    let base_s = run(&base, 3)?;
    let cmp = |xs: &Vec<Vec<f64>>| subsample_report(|a, b| mmd(a, b), xs, &reference, k);
    let trace = |s: &[Vec<f64>]| mean_multiplicity(s).into_iter().zip(per_round_deposition(s)).collect::<Vec<_>>();
    Ok(RolloutReport {
        schedule: schedule.clone(),
        floor: cmp(&other)?,
        model: cmp(&model)?,
        base: cmp(&base_s)?,
        traces: vec![
            ("oracle".into(), trace(&reference)),
            ("model".into(), trace(&model)),
            ("phys_base".into(), trace(&base_s)),
        ],
    })
}

pub const NLL_HEADER: &str = "sample,index,nll";

/// Negative log-likelihoods under the learned flow of model samples, oracle
/// samples and near-isotropic base samples on gun-prior conditions.
/// Non-finite values (points outside the base support) are kept as `inf`.
pub fn nll_report(cfg: &RunConfig, models: &Models) -> Result<Vec<(Source, Vec<f64>)>> {
    let seed = cfg.stage_seed("nll");
    let n = cfg.nll.n_events;
    let (conds, seeds) = prior_conditions(PriorKind::Gun, n, seed)?;
    let mut out = Vec::new();
    for source in [Source::Model, Source::Oracle, Source::IsoBase] {
        let events = source_events(cfg, models, source, &conds, &seeds, &cfg.solver)?;
        let mut pts = Vec::new();
        for (ev, c) in events.iter().zip(&conds) {
            if let Some(e) = n_max_ok(cfg, ev) {
                let (enc, _) = encode_event(&e, cfg.e_cutoff())?;
                pts.push((enc.target.coords, *c, enc.cardinalities));
            }
        }
        let batch: Vec<(&[f64], &Condition, Cardinalities)> = pts.iter().map(|(y, c, k)| (y.as_slice(), c, *k)).collect();
        let mut nll = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(64) {
            nll.extend(log_likelihood_batch(&models.flow, chunk, &models.base, &cfg.nll.solver)?.into_iter().map(|l| -l));
        }
        out.push((source, nll));
    }
    Ok(out)
}

/// Records whose counts fit the flow's cardinality range and whose particles
/// are all above the cutoff.
fn n_max_ok(cfg: &RunConfig, ev: &EventRecord) -> Option<EventRecord> {
    match ev.cardinalities() {
        Ok(c) if c.0.iter().all(|&n| n <= cfg.cardinality.model.n_max) => Some(ev.clone()),
        _ => None,
    }
}

/// Decoded base samples with the oracle's own cardinalities (useful as a
/// flow-free reference).
pub fn base_with_true_counts(cfg: &RunConfig, events: &[EventRecord], kappa: f64, seed: u64) -> Result<Vec<EventRecord>> {
    let conds = events.iter().map(|e| e.condition()).collect::<Result<Vec<_>>>()?;
    let cards = events.iter().map(|e| e.cardinalities()).collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..events.len()).map(|i| rng::derive(seed, &[i as u64])).collect();
    sample_base_kernel(&conds, &cards, &seeds, &physical_base(cfg, kappa))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"seeed": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"flow": {"base": {"kapa": 3}}}"#).is_err());
        cfg.validate().unwrap();
    }

    #[test]
    fn dataset_is_reproducible_and_prefix_stable() {
        let p = ToyPhysicsConfig::default();
        let a = generate_dataset(&p, 50, 1);
        assert_eq!(a, generate_dataset(&p, 50, 1));
        assert_eq!(a[..20], generate_dataset(&p, 20, 1)[..]);
        assert!(generate_dataset(&p, 0, 1).is_empty());
        let s = DataStats::of(&a);
        assert!((s.mean_e_dep - a.iter().map(|r| r.e_dep).sum::<f64>() / 50.0).abs() < 1e-12);
    }

    #[test]
    fn prior_conditions_are_deterministic() {
        let (c1, s1) = prior_conditions(PriorKind::EnergySweep, 10, 3).unwrap();
        let (c2, s2) = prior_conditions(PriorKind::EnergySweep, 10, 3).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(s1, s2);
        assert!(c1.iter().all(|c| (20.0..=300.0).contains(&c.incident.magnitude)));
    }

    #[test]
    fn clearly_less_uses_combined_errors() {
        let a = Estimate { value: 0.0, sem: 0.3 };
        let b = Estimate { value: 1.6, sem: 0.4 };
        assert!(clearly_less(&a, &b, 3.0));
        assert!(!clearly_less(&a, &b, 3.5));
        assert!(!clearly_less(&b, &a, 0.0));
    }
}
