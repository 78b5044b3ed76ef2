use super::*;
use crate::backbone::BackboneConfig;
use crate::codebook::AttachMode;
use crate::data::{make_protocol, synth_generate, ClassOrder, ProtocolSpec, SynthParams};

struct Fixture {
    topology: SkeletonTopology,
    dataset: SplitDataset,
    protocol: ContinualProtocol,
    subsets: Vec<Vec<SkeletonSequence>>,
}

fn fixture(sessions: usize) -> Fixture {
    let topology = SkeletonTopology::chain(5).unwrap();
    let dataset = synth_generate(
        &topology,
        &SynthParams {
            class_count: 6,
            per_class_train: 8,
            per_class_test: 4,
            time_steps: 8,
            noise_sigma: 0.2,
            phase_jitter: 0.0,
            seed: 3,
        },
    )
    .unwrap();
    let spec = ProtocolSpec {
        base_classes: 2,
        sessions,
        ways: 2,
        shots: 3,
        class_order: ClassOrder::default(),
        seed: 5,
    };
    let (protocol, subsets) = make_protocol(&dataset, &spec).unwrap();
    Fixture {
        topology,
        dataset,
        protocol,
        subsets,
    }
}

fn small(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        backbone: BackboneConfig {
            layer_channels: vec![8, 8, 8],
            embed_dim: 8,
            ..BackboneConfig::default()
        },
        pretrain: Schedule { epochs: 2, lr: 0.1, batch: 4 },
        base: Schedule { epochs: 1, lr: 0.1, batch: 4 },
        session: Schedule { epochs: 2, lr: 0.1, batch: 6 },
        seed: 11,
        ..TrainConfig::default()
    }
}

fn run(f: &Fixture, config: &TrainConfig, options: &RunOptions) -> RunOutcome {
    run_protocol(config, &f.topology, &f.dataset, &f.protocol, &f.subsets, options).unwrap()
}

fn traced() -> RunOptions {
    RunOptions {
        log_selections: true,
        trace: true,
        ..RunOptions::default()
    }
}

/// Report content that must be reproducible; wall-clock time is excluded.
fn metrics(reports: &[SessionReport]) -> Vec<(f64, Option<f64>, f64, Option<f64>, Option<f64>)> {
    reports.iter().map(|r| (r.avg, r.old, r.new, r.a_hm, r.bwf)).collect()
}

fn group_values(store: &ParamStore, group: ParamGroup) -> Vec<(String, Tensor)> {
    store.snapshot(group)
}

#[test]
fn one_report_per_session() {
    let f = fixture(2);
    let out = run(&f, &small(Method::Poet), &RunOptions::default());
    assert_eq!(out.state.reports().len(), 3);
    assert_eq!(out.sessions.len(), 3);
    assert_eq!(out.state.session(), 2);
    for (t, r) in out.state.reports().iter().enumerate() {
        assert_eq!(r.session, t);
        assert_eq!(r.classes.len(), 2 + 2 * t);
    }

    let f0 = fixture(0);
    let out = run(&f0, &small(Method::Poet), &RunOptions::default());
    assert_eq!(out.state.reports().len(), 1);
    assert!(out.state.reports()[0].old.is_none());
}

#[test]
fn same_seed_same_run() {
    let f = fixture(2);
    let a = run(&f, &small(Method::Poet), &traced());
    let b = run(&f, &small(Method::Poet), &traced());
    assert_eq!(metrics(a.state.reports()), metrics(b.state.reports()));
    assert_eq!(a.state.store(), b.state.store());
    for (x, y) in a.sessions.iter().zip(&b.sessions) {
        assert_eq!(x.selections, y.selections);
        assert_eq!(x.trace, y.trace);
    }
}

#[test]
fn classifier_rows_grow_by_ways() {
    let f = fixture(2);
    let mut config = small(Method::Fe);
    config.pretrain.epochs = 1;
    let (mut state, _) = train_base(&config, &f.topology, &f.dataset, &f.protocol.base_classes, &f.subsets[0], &RunOptions::default()).unwrap();
    let mut rows = state.head().class_count(state.store());
    assert_eq!(rows, 2);
    for t in 1..=2 {
        train_session(&mut state, &f.dataset, t, f.protocol.session_classes(t), &f.subsets[t], &RunOptions::default()).unwrap();
        let now = state.head().class_count(state.store());
        assert_eq!(now, rows + 2);
        rows = now;
    }
}

#[test]
fn fe_session_changes_only_the_classifier() {
    let f = fixture(1);
    let config = small(Method::Fe);
    let (mut state, _) = train_base(&config, &f.topology, &f.dataset, &f.protocol.base_classes, &f.subsets[0], &RunOptions::default()).unwrap();
    let before = state.store().clone();
    train_session(&mut state, &f.dataset, 1, f.protocol.session_classes(1), &f.subsets[1], &RunOptions::default()).unwrap();
    let mut changed = Vec::new();
    for (id, p) in state.store().iter() {
        let old = before.get(id);
        let same = if p.value.shape() == old.value.shape() {
            p.value == old.value
        } else {
            // expanded tensors: compare the rows that existed before
            p.value.data()[..old.value.len()] == *old.value.data()
        };
        if !same || p.value.shape() != old.value.shape() {
            changed.push(p.group);
        }
    }
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|&g| g == ParamGroup::Classifier), "{changed:?}");
}

#[test]
fn session_update_groups_for_poet() {
    let f = fixture(1);
    let config = small(Method::Poet);
    let (mut state, _) = train_base(&config, &f.topology, &f.dataset, &f.protocol.base_classes, &f.subsets[0], &RunOptions::default()).unwrap();
    let before = state.store().clone();
    train_session(&mut state, &f.dataset, 1, f.protocol.session_classes(1), &f.subsets[1], &RunOptions::default()).unwrap();
    let allowed = [ParamGroup::QueryAdaptor, ParamGroup::Keys, ParamGroup::Pool, ParamGroup::Classifier];
    let mut moved = BTreeMap::new();
    for (id, p) in state.store().iter() {
        if p.value != before.get(id).value {
            moved.insert(p.group, true);
        }
    }
    for g in moved.keys() {
        assert!(allowed.contains(g), "group {g} changed during a session");
    }
    for g in allowed {
        assert!(moved.contains_key(&g), "group {g} never updated");
    }
}

#[test]
fn backbone_frozen_after_base_except_ft() {
    let f = fixture(1);
    for method in [Method::Poet, Method::Fe, Method::FeFrozen, Method::Ft] {
        let config = small(method);
        let (mut state, _) = train_base(&config, &f.topology, &f.dataset, &f.protocol.base_classes, &f.subsets[0], &RunOptions::default()).unwrap();
        let embed = group_values(state.store(), ParamGroup::Embed);
        let extract = group_values(state.store(), ParamGroup::Extract);
        train_session(&mut state, &f.dataset, 1, f.protocol.session_classes(1), &f.subsets[1], &RunOptions::default()).unwrap();
        let same = group_values(state.store(), ParamGroup::Embed) == embed && group_values(state.store(), ParamGroup::Extract) == extract;
        assert_eq!(same, method != Method::Ft, "{method:?}");
    }
}

#[test]
fn query_backbone_mirrors_main_and_stays_frozen() {
    let f = fixture(1);
    let out = run(&f, &small(Method::Poet), &RunOptions::default());
    let store = out.state.store();
    let main: Vec<Tensor> = group_values(store, ParamGroup::Embed)
        .into_iter()
        .chain(group_values(store, ParamGroup::Extract))
        .map(|(_, t)| t)
        .collect();
    let cb = out.state.codebook().unwrap();
    let query: Vec<Tensor> = cb.query_backbone().params().into_iter().map(|id| store.value(id).clone()).collect();
    assert_eq!(main.len(), query.len());
    assert!(store.value(cb.query_center()).data().iter().any(|&v| v != 0.0));
    // The query copy is taken after pretraining, then the main model keeps training.
    assert_ne!(main, query);
    for (_, p) in store.iter().filter(|(_, p)| matches!(p.group, ParamGroup::QueryEmbed | ParamGroup::QueryExtract)) {
        assert!(p.frozen);
    }
}

#[test]
fn fe_frozen_keeps_old_rows() {
    let f = fixture(2);
    let config = small(Method::FeFrozen);
    let (mut state, _) = train_base(&config, &f.topology, &f.dataset, &f.protocol.base_classes, &f.subsets[0], &RunOptions::default()).unwrap();
    let w = state.head().weight();
    let base_rows = state.store().value(w).clone();
    for t in 1..=2 {
        let before = state.store().value(w).clone();
        train_session(&mut state, &f.dataset, t, f.protocol.session_classes(t), &f.subsets[t], &RunOptions::default()).unwrap();
        let after = state.store().value(w);
        assert_eq!(after.data()[..before.len()], *before.data(), "session {t}");
    }
    assert_eq!(state.store().value(w).data()[..base_rows.len()], *base_rows.data());
}

#[test]
fn cosine_scale_frozen_in_sessions() {
    let f = fixture(1);
    let config = TrainConfig {
        head: HeadKind::Cosine,
        ..small(Method::Poet)
    };
    let (mut state, _) = train_base(&config, &f.topology, &f.dataset, &f.protocol.base_classes, &f.subsets[0], &RunOptions::default()).unwrap();
    let scale = state.head().scale().unwrap();
    let eta = state.store().value(scale).clone();
    train_session(&mut state, &f.dataset, 1, f.protocol.session_classes(1), &f.subsets[1], &RunOptions::default()).unwrap();
    assert_eq!(*state.store().value(scale), eta);
}

#[test]
fn session_trace_follows_algorithm_order() {
    let f = fixture(1);
    let out = run(&f, &small(Method::Poet), &traced());
    let trace = &out.sessions[1].trace;
    assert!(matches!(trace[0].what, TraceStep::ExpandClassifier { added: 2 }));
    match &trace[1].what {
        TraceStep::Freeze { frozen } => {
            for g in [ParamGroup::Embed, ParamGroup::Extract, ParamGroup::QueryEmbed, ParamGroup::QueryExtract] {
                assert!(frozen.contains(&g), "{g} not frozen");
            }
            assert!(!frozen.contains(&ParamGroup::Classifier));
        }
        other => panic!("expected freeze, got {other:?}"),
    }
    let per_step = [
        TraceStep::Query,
        TraceStep::Sort,
        TraceStep::Gather,
        TraceStep::Attach,
        TraceStep::Predict,
        TraceStep::CrossEntropyLoss,
        TraceStep::ClusteringLoss,
        TraceStep::Update,
    ];
    let steps = &trace[2..];
    // 6 samples in one batch, 2 epochs
    assert_eq!(steps.len(), 2 * per_step.len());
    for (i, chunk) in steps.chunks(per_step.len()).enumerate() {
        let whats: Vec<TraceStep> = chunk.iter().map(|e| e.what.clone()).collect();
        assert_eq!(whats, per_step);
        assert!(chunk.iter().all(|e| e.step == Some(i) && e.session == 1));
    }

    let expand = TrainConfig {
        pool_mode: PoolMode::Expand,
        ..small(Method::Poet)
    };
    let out = run(&f, &expand, &traced());
    assert!(matches!(out.sessions[1].trace[0].what, TraceStep::ExpandPool { added: 4 }));
    assert!(matches!(out.sessions[1].trace[1].what, TraceStep::ExpandClassifier { .. }));
}

#[test]
fn baseline_trace_has_no_prompt_steps() {
    let f = fixture(1);
    let out = run(&f, &small(Method::Fe), &traced());
    let whats: Vec<&TraceStep> = out.sessions[1].trace.iter().map(|e| &e.what).collect();
    assert!(whats.iter().all(|w| !matches!(w, TraceStep::Query | TraceStep::Sort | TraceStep::ClusteringLoss | TraceStep::ExpandPool { .. })));
    assert!(out.sessions[1].selections.is_empty());
}

#[test]
fn overlapping_or_out_of_order_sessions_rejected() {
    let f = fixture(1);
    let config = small(Method::Fe);
    let (mut state, _) = train_base(&config, &f.topology, &f.dataset, &f.protocol.base_classes, &f.subsets[0], &RunOptions::default()).unwrap();
    let base = f.protocol.base_classes.clone();
    let data: Vec<SkeletonSequence> = f.dataset.train.iter().filter(|s| s.class_id == base[0]).take(3).cloned().collect();
    assert!(matches!(
        train_session(&mut state, &f.dataset, 1, &base[..1], &data, &RunOptions::default()),
        Err(Error::Protocol(_))
    ));
    assert!(matches!(
        train_session(&mut state, &f.dataset, 2, f.protocol.session_classes(1), &f.subsets[1], &RunOptions::default()),
        Err(Error::Protocol(_))
    ));
    // a sample whose class is not introduced by the session
    assert!(matches!(
        train_session(&mut state, &f.dataset, 1, f.protocol.session_classes(1), &data, &RunOptions::default()),
        Err(Error::Protocol(_))
    ));
}

#[test]
fn divergence_names_the_step() {
    let f = fixture(0);
    let config = TrainConfig {
        grad_clip: 0.0,
        pretrain: Schedule { epochs: 3, lr: 1e12, batch: 4 },
        ..small(Method::Fe)
    };
    match train_base(&config, &f.topology, &f.dataset, &f.protocol.base_classes, &f.subsets[0], &RunOptions::default()) {
        Err(Error::Diverged { session: 0, step, loss }) => {
            assert!(step > 0);
            assert!(!loss.is_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn sorting_changes_order_not_set() {
    let f = fixture(1);
    let on = run(&f, &small(Method::Poet), &traced());
    let off = run(
        &f,
        &TrainConfig {
            sorting: false,
            ..small(Method::Poet)
        },
        &traced(),
    );
    let t = on.state.time_steps();
    let mut any_differs = false;
    for (a, b) in on.sessions[1].selections.iter().zip(&off.sessions[1].selections) {
        let (mut sa, mut sb) = (a.order.clone(), b.order.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, (0..t).collect::<Vec<_>>());
        assert_eq!(sa, sb);
        any_differs |= a.order != b.order;
        assert_eq!(b.order, (0..t).collect::<Vec<_>>());
    }
    assert!(any_differs);
}

#[test]
fn expand_mode_places_new_prompts_last() {
    let f = fixture(2);
    let config = TrainConfig {
        pool_mode: PoolMode::Expand,
        expand_r: 3,
        ..small(Method::Poet)
    };
    let out = run(&f, &config, &traced());
    let t = out.state.time_steps();
    for s in 1..=2 {
        let tail: Vec<usize> = (t + 3 * (s - 1)..t + 3 * s).collect();
        let log = &out.sessions[s].selections;
        assert!(!log.is_empty());
        for r in log {
            assert_eq!(r.order.len(), t);
            assert_eq!(r.order[t - 3..], tail[..], "session {s}");
        }
    }
    let cb = out.state.codebook().unwrap();
    assert_eq!(cb.pool_size(out.state.store()), t + 6);
    let pool = out.state.store().get(cb.pool());
    assert_eq!(pool.frozen_rows.iter().filter(|&&f| f).count(), t + 3);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let f = fixture(2);
    for config in [
        small(Method::Poet),
        TrainConfig {
            pool_mode: PoolMode::Expand,
            head: HeadKind::Cosine,
            attach: AttachMode::ConcatTemporal,
            ..small(Method::Poet)
        },
        small(Method::FeFrozen),
    ] {
        let out = run(&f, &config, &RunOptions::default());
        let bytes = checkpoint_bytes(&out.state).unwrap();
        let loaded = parse_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.store(), out.state.store());
        assert_eq!(loaded.reports(), out.state.reports());
        assert_eq!(loaded.history(), out.state.history());
        assert_eq!(loaded.session_classes(), out.state.session_classes());
        assert_eq!(loaded.config(), out.state.config());
        assert_eq!(checkpoint_bytes(&loaded).unwrap(), bytes);
        assert_eq!(loaded.predict(&f.dataset.test).unwrap(), out.state.predict(&f.dataset.test).unwrap());
    }
}

#[test]
fn checkpoints_written_each_session_hold_no_samples() {
    let f = fixture(2);
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let out = run(&f, &small(Method::Poet), &options);
    for t in 0..=2 {
        let bytes = std::fs::read(checkpoint_path(dir.path(), t)).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains(&format!("\nsession = {t}\n")), "session {t}");
        let state = parse_checkpoint(&bytes).unwrap();
        let header = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let manifest: usize = text[..header].trim().rsplit('=').next().unwrap().parse().unwrap();
        assert_eq!(bytes.len(), header + manifest + 4 * state.store().total_elements());
    }
    assert_eq!(latest_checkpoint(dir.path()).unwrap().unwrap().0, 2);
    let last = load_checkpoint(&checkpoint_path(dir.path(), 2)).unwrap();
    assert_eq!(last.store(), out.state.store());
}

#[test]
fn tampered_checkpoint_names_the_tensor() {
    let f = fixture(0);
    let out = run(&f, &small(Method::Poet), &RunOptions::default());
    let bytes = checkpoint_bytes(&out.state).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
    let manifest: usize = std::str::from_utf8(&bytes[..nl]).unwrap().trim().rsplit('=').next().unwrap().parse().unwrap();
    let text = std::str::from_utf8(&bytes[..nl + manifest]).unwrap();
    let line = text.lines().find(|l| l.starts_with("tensor.head.weight")).unwrap().to_string();
    let len = line.split("len=").nth(1).unwrap().split(' ').next().unwrap().to_string();
    // same digit count, so the manifest keeps its byte length
    let last = len.chars().last().unwrap();
    let other = if last == '9' { '8' } else { char::from(last as u8 + 1) };
    let bad = line.replace(&format!("len={len}"), &format!("len={}{other}", &len[..len.len() - 1]));
    let mut tampered_bytes = text.replacen(&line, &bad, 1).into_bytes();
    tampered_bytes.extend_from_slice(&bytes[nl + manifest..]);
    assert_eq!(tampered_bytes.len(), bytes.len());
    match parse_checkpoint(&tampered_bytes) {
        Err(Error::Integrity(msg)) => assert!(msg.contains("head.weight"), "{msg}"),
        other => panic!("expected integrity error, got {:?}", other.map(|_| ())),
    }

    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() - 4);
    match parse_checkpoint(&truncated) {
        Err(Error::Integrity(msg)) => assert!(msg.contains("tensor"), "{msg}"),
        other => panic!("expected integrity error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = fixture(2);
    let config = small(Method::Poet);
    let full = run(&f, &config, &RunOptions::default());

    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        resume: true,
        ..RunOptions::default()
    };
    let short = Fixture {
        protocol: ContinualProtocol {
            sessions: f.protocol.sessions[..1].to_vec(),
            ..f.protocol.clone()
        },
        subsets: f.subsets[..2].to_vec(),
        topology: f.topology.clone(),
        dataset: f.dataset.clone(),
    };
    run(&short, &config, &options);
    let resumed = run(&f, &config, &options);
    assert_eq!(resumed.resumed_from, Some(1));
    assert_eq!(resumed.sessions.len(), 1);
    assert_eq!(resumed.state.store(), full.state.store());
    assert_eq!(metrics(resumed.state.reports()), metrics(full.state.reports()));

    let other = TrainConfig { lambda: 0.5, ..config };
    assert!(matches!(
        run_protocol(&other, &f.topology, &f.dataset, &f.protocol, &f.subsets, &options),
        Err(Error::Config { .. })
    ));
}
