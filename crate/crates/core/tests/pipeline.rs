//! End-to-end run of the experiment workflows at toy scale.

use cascade_core::cardinality::CardinalityConfig;
use cascade_core::cfm::FlowConfig;
use cascade_core::compose::{DensitySchedule, ScheduleKind};
use cascade_core::dataset::PriorKind;
use cascade_core::experiment::{self as exp, Models, RunConfig, Source};
use cascade_core::flow::{SolverConfig, SolverMethod};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.n_train = 400;
    cfg.data.n_val = 50;
    cfg.cardinality.model = CardinalityConfig { hidden: 16, layers: 1, ..cfg.cardinality.model };
    cfg.cardinality.train.epochs = 2;
    cfg.flow.model = FlowConfig { hidden: 16, layers: 1, ..cfg.flow.model };
    cfg.flow.train.epochs = 2;
    cfg.eval.priors = vec![PriorKind::Gun, PriorKind::DensitySweep];
    cfg.eval.n_eval = 80;
    cfg.eval.k = 2;
    cfg.eval.classifier.epochs = 2;
    cfg.pareto.methods = vec![SolverMethod::Euler, SolverMethod::Rk4];
    cfg.pareto.steps = vec![1, 3];
    cfg.pareto.n_events = 24;
    cfg.pareto.repeats = 2;
    cfg.pareto.k = 2;
    cfg.rollout.n_rollouts = 8;
    cfg.rollout.k = 2;
    cfg.rollout.initial.energy = 0.5;
    cfg.nll.n_events = 6;
    cfg.nll.solver = SolverConfig { method: SolverMethod::Euler, steps: 2 };
    cfg.validate().unwrap();
    cfg
}

fn train(cfg: &RunConfig) -> (Models, Vec<(f64, f64)>, Vec<f64>) {
    let seed = cfg.stage_seed("gen-data");
    let train = exp::generate_dataset(&cfg.physics, cfg.data.n_train, seed);
    let val = exp::generate_dataset(&cfg.physics, cfg.data.n_val, seed + 1);
    let (train, _) = exp::encode(cfg, &train);
    let (val, _) = exp::encode(cfg, &val);
    let (card, card_hist) = exp::train_cardinality_model(cfg, &train, &val, |_, _, _, _| Ok(())).unwrap();
    let mut seen = Vec::new();
    let (flow, trace) = exp::train_flow_model(cfg, &train, &val, |e, _, t, _| {
        seen.push((e, t));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen.len(), cfg.flow.train.epochs);
    assert_eq!(trace.train_loss.len(), cfg.flow.train.epochs);
    (Models { card, flow, base: cfg.flow.base }, card_hist, trace.train_loss)
}

#[test]
fn workflows_run_and_are_reproducible() {
    let cfg = tiny();
    let (models, card_hist, flow_loss) = train(&cfg);
    assert!(card_hist.iter().all(|(t, v)| t.is_finite() && v.is_finite()));
    assert!(card_hist[1].0 < card_hist[0].0, "cardinality loss should fall: {card_hist:?}");
    assert!(flow_loss.iter().all(|l| l.is_finite()));
    let (again, card_again, flow_again) = train(&cfg);
    assert_eq!(card_hist, card_again);
    assert_eq!(flow_loss, flow_again);

    let rows = exp::evaluate_prior(&cfg, &models, PriorKind::Gun, &[Source::Model, Source::Oracle]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.mmd.value.is_finite() && (0.0..=1.0).contains(&r.auc.value)));
    let twice = exp::evaluate_prior(&cfg, &again, PriorKind::Gun, &[Source::Model, Source::Oracle]).unwrap();
    assert_eq!(rows, twice);

    let pareto = exp::pareto(&cfg, &models).unwrap();
    assert_eq!(pareto.len(), 4);
    assert!(pareto.iter().all(|r| r.repeat_ms.len() == 2 && r.mean_ms() > 0.0));

    let schedule = DensitySchedule::named(ScheduleKind::HighLow, cfg.seed).unwrap();
    let report = exp::rollout_report(&cfg, &models, &schedule).unwrap();
    assert_eq!(report.csv_rows(8, 2).len(), 3);
    assert_eq!(report.trace_rows().len(), 3 * schedule.rounds());

    let nll = exp::nll_report(&cfg, &models).unwrap();
    assert_eq!(nll.len(), 3);
    assert!(nll.iter().all(|(_, v)| v.len() <= cfg.nll.n_events));
}
