use std::collections::BTreeSet;

use odp_core::cache::ScheduleOptions;
use odp_core::model::select_trainable;
use odp_core::trainer::*;
use odp_core::*;

fn setup(n: usize) -> (RnntModel, Vec<Utterance>, Vec<Utterance>) {
    let cfg = ModelConfig::tiny();
    let model = RnntModel::init(cfg.clone(), 4).unwrap();
    let shift = SpeakerShift {
        scale: 1.3,
        offset: 0.2,
        noise: 0.1,
    };
    let spec = SyntheticTaskSpec::for_model(&cfg, 21, shift);
    let data = synth_generate(&spec, n).unwrap();
    let eval = synth_generate(&spec.with_seed(22), 3).unwrap();
    (model, data, eval)
}

fn schedule(total: usize, w: usize, s: usize, b: usize, e: usize) -> Schedule {
    generate_schedule(
        total,
        &CacheConfig::new(w, s, b, e).unwrap(),
        ScheduleOptions::default(),
    )
    .unwrap()
}

fn opts(lr: f64) -> RunOptions {
    RunOptions {
        optimizer: OptimizerConfig { lr, momentum: 0.9 },
        ..RunOptions::default()
    }
}

fn bit_equal_runs(a: &RunResult, b: &RunResult) -> bool {
    let bits = |r: &RunResult| {
        r.sessions
            .iter()
            .flat_map(|s| {
                [
                    s.mean_train_loss.to_bits(),
                    s.heldout_loss.to_bits(),
                    s.heldout_wer.to_bits(),
                ]
            })
            .collect::<Vec<_>>()
    };
    bits(a) == bits(b) && a.initial == b.initial
}

#[test]
fn zero_learning_rate_keeps_heldout_loss_flat() {
    let (mut model, data, eval) = setup(8);
    let before = model.clone();
    let r = run_personalization(
        &mut model,
        &data,
        &schedule(8, 4, 2, 2, 2),
        GroupName::All,
        &eval,
        &opts(0.0),
    )
    .unwrap();
    assert_eq!(r.sessions.len(), 3);
    for s in &r.sessions {
        assert_eq!(s.heldout_loss, r.initial.heldout_loss);
    }
    assert_eq!(model, before);
}

#[test]
fn session_bookkeeping() {
    let (mut model, data, eval) = setup(10);
    let sched = schedule(10, 6, 2, 4, 2);
    let r = run_personalization(&mut model, &data, &sched, GroupName::Joint, &eval, &opts(0.01)).unwrap();
    for (i, s) in r.sessions.iter().enumerate() {
        assert_eq!(s.session, i + 1);
        assert_eq!(s.examples_seen, 6 + i * 2);
    }
    // E_s * ceil(N_w / B) steps per session.
    assert_eq!(r.optimizer_steps, 3 * 2 * 2);
    assert_eq!(r.optimizer_steps, sched.optimizer_steps());
}

#[test]
fn split_runs_match_unsplit_runs_for_every_boundary() {
    let (model, data, eval) = setup(6);
    let sched = schedule(6, 4, 2, 2, 1);
    let group = GroupName::Encoder { from: 1 };
    let mut plain_model = model.clone();
    let plain = run_personalization(&mut plain_model, &data, &sched, group, &eval, &opts(0.01)).unwrap();
    for b in 0..=model.config().enc_layers {
        let mut m = model.clone();
        let o = RunOptions {
            split_boundary: Some(b),
            ..opts(0.01)
        };
        let split = run_personalization(&mut m, &data, &sched, group, &eval, &o).unwrap();
        assert!(bit_equal_runs(&plain, &split), "boundary {b}");
        assert_eq!(m, plain_model);
    }
}

#[test]
fn feature_cache_is_transparent_and_frozen_params_never_move() {
    let (model, data, eval) = setup(8);
    let sched = schedule(8, 4, 2, 2, 2);
    let group = GroupName::Encoder { from: 2 };
    let mut plain_model = model.clone();
    let plain = run_personalization(&mut plain_model, &data, &sched, group, &eval, &opts(0.01)).unwrap();
    let mut cached_model = model.clone();
    let o = RunOptions {
        feature_cache: true,
        ..opts(0.01)
    };
    let cached = run_personalization(&mut cached_model, &data, &sched, group, &eval, &o).unwrap();
    assert!(bit_equal_runs(&plain, &cached));
    assert_eq!(plain_model, cached_model);

    let trainable = select_trainable(&model, group).unwrap().ids;
    for id in model.param_ids().filter(|id| !trainable.contains(id)) {
        assert!(model.param(id).bit_eq(cached_model.param(id)));
    }
    assert!(trainable
        .iter()
        .any(|id| !model.param(*id).bit_eq(cached_model.param(*id))));

    // Hits per utterance are its usage count minus the first computation.
    let usage = sched.usage_counts();
    let hits = cached.cache_hits.unwrap();
    for (id, count) in usage.iter().enumerate() {
        if *count > 0 {
            assert_eq!(hits[&(id as u64)], count - 1, "utterance {id}");
        }
    }
}

#[test]
fn quantized_cache_perturbs_but_stays_close() {
    let (model, data, _) = setup(4);
    let group = GroupName::Encoder { from: 2 };
    let trainable = select_trainable(&model, group).unwrap().ids;
    let batch = &data[..2];
    let exact = combined_backward(&model, batch, &trainable, &Ledger::new()).unwrap();
    let mut cache = FeatureCache::new(&model, group, true).unwrap();
    for u in batch {
        cache.ensure(&model, u).unwrap();
    }
    let items: Vec<_> = batch
        .iter()
        .map(|u| odp_core::split::Item {
            source: odp_core::split::Source::Activation {
                layer: 2,
                value: cache.get(u.id).unwrap(),
            },
            labels: &u.labels,
        })
        .collect();
    let quant = odp_core::split::combined_backward_items(&model, &items, &trainable, &Ledger::new()).unwrap();
    let delta = odp_core::split::max_rel_diff(&exact.grads, &quant.grads);
    assert!(delta > 0.0 && delta.is_finite(), "{delta}");
}

#[test]
fn group_complement_consistency() {
    let (model, _, _) = setup(1);
    let joint = select_trainable(&model, GroupName::Joint).unwrap().ids;
    let all: BTreeSet<_> = model.param_ids().collect();
    let rest: BTreeSet<_> = model
        .encoder_param_ids(0..model.config().enc_layers)
        .union(&model.lm_param_ids())
        .copied()
        .collect();
    let complement: BTreeSet<_> = all.difference(&rest).copied().collect();
    assert_eq!(joint, complement);
}

#[test]
fn cache_requires_frozen_prefix_group() {
    let (mut model, data, eval) = setup(4);
    let o = RunOptions {
        feature_cache: true,
        ..opts(0.01)
    };
    let err = run_personalization(&mut model, &data, &schedule(4, 4, 4, 2, 1), GroupName::All, &eval, &o);
    assert!(matches!(err, Err(Error::NoFrozenPrefix(_))));
}

#[test]
fn metrics_serialize_as_jsonl_and_csv() {
    let (mut model, data, eval) = setup(6);
    let r = run_personalization(
        &mut model,
        &data,
        &schedule(6, 4, 2, 2, 1),
        GroupName::Joint,
        &eval,
        &opts(0.01),
    )
    .unwrap();
    let mut jsonl = Vec::new();
    r.write_jsonl(&mut jsonl).unwrap();
    let lines: Vec<SessionMetrics> = String::from_utf8(jsonl)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, r.sessions);
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("session,examples_seen,mean_train_loss,heldout_loss,heldout_wer\n"));
    assert_eq!(text.lines().count(), 1 + r.sessions.len());
}
