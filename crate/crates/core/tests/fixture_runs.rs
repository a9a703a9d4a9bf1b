use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use tpgo::gateway::GatewayEnv;
use tpgo::memory::ExperienceMemory;
use tpgo::orchestrator::{
    replay, Ablations, Archive, Evolution, LoopParams, RunOutcome, ValidationReport,
};
use tpgo::sim::fixture;

fn run_with(name: &str, params: LoopParams, dir: Option<&Path>) -> RunOutcome {
    let bundle = fixture(name, params.seed).unwrap();
    let sim = bundle.services(GatewayEnv::deterministic());
    let archive = dir.map(|d| Archive::create(d).unwrap());
    let memory = match dir {
        Some(d) => ExperienceMemory::open(d.join("memory.jsonl")).unwrap(),
        None => ExperienceMemory::in_memory(),
    };
    let mut evo = Evolution::new(
        params,
        sim.services.clone(),
        bundle.tasks(),
        bundle.graph().unwrap(),
        memory,
        archive,
        Some(name),
    )
    .unwrap();
    evo.optimize().unwrap()
}

fn run(name: &str, ablations: Ablations, dir: Option<&Path>) -> RunOutcome {
    let params = LoopParams {
        seed: 7,
        ablations,
        ..LoopParams::default()
    };
    run_with(name, params, dir)
}

fn validations(dir: &Path, n: u32) -> Vec<ValidationReport> {
    serde_json::from_str(
        &fs::read_to_string(dir.join(format!("iter_{n}/validations.json"))).unwrap(),
    )
    .unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn convergence_reaches_full_success_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("convergence", Ablations::default(), Some(dir.path()));
    let first = &out.reports[0];
    assert_eq!(
        (
            first.passed_before,
            first.cluster_count,
            first.proposals_accepted
        ),
        (4, 3, 3)
    );
    assert_eq!(out.reports.last().unwrap().passed_after, 10);
    assert!(out.reports.len() <= 5);
    let replayed = replay(dir.path()).unwrap();
    assert_eq!(replayed.final_hash, out.final_graph.content_hash());
    assert_eq!(replayed.accepted_proposals, 3);
    assert_eq!(
        out.cost.unwrap().trajectory_count,
        out.reports.iter().map(|r| r.trajectories).sum::<u64>()
    );
}

#[test]
fn poisoned_proposal_is_rolled_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("poisoned", Ablations::default(), Some(dir.path()));
    let v = validations(dir.path(), 1);
    let bad = v
        .iter()
        .find(|r| r.subset_task_ids == ["t05", "t06"])
        .unwrap();
    assert_eq!(bad.effectiveness, 0.0);
    assert!(!bad.accepted);
    assert_eq!(bad.hash_before, bad.hash_after);
    let last = out.reports.last().unwrap();
    assert_eq!(last.passed_after, 8);
    assert!(replay(dir.path()).is_ok());
}

#[test]
fn stability_full_arm_beats_no_memory_arm() {
    let full = run("stability", Ablations::default(), None);
    let ablated = run(
        "stability",
        Ablations {
            no_grao: true,
            ..Ablations::default()
        },
        None,
    );
    let end = |o: &RunOutcome| o.reports.last().unwrap().passed_after;
    assert_eq!(end(&full), 8);
    assert!(end(&ablated) < end(&full));
    let trace: Vec<usize> = ablated.reports.iter().map(|r| r.passed_after).collect();
    assert_eq!(trace, [5, 6, 5, 6, 5]);
    assert!(full
        .reports
        .windows(2)
        .all(|w| w[0].passed_after <= w[1].passed_after));
}

#[test]
fn archives_are_identical_across_concurrency() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let params = |concurrency| LoopParams {
        concurrency,
        seed: 3,
        ..LoopParams::default()
    };
    run_with("convergence", params(1), Some(a.path()));
    run_with("convergence", params(8), Some(b.path()));
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        if k == "run_meta.json" {
            continue;
        }
        assert!(v == &tb[k], "{k} differs");
    }
    let meta = |m: &Vec<u8>| {
        let mut v: serde_json::Value = serde_json::from_slice(m).unwrap();
        v["params"].as_object_mut().unwrap().remove("concurrency");
        v
    };
    assert_eq!(meta(&ta["run_meta.json"]), meta(&tb["run_meta.json"]));
    assert!(ta.contains_key("iter_1/graph_before.json"));
    assert!(ta.contains_key("memory.jsonl"));
    assert!(ta.contains_key("gradients.jsonl"));
}

#[test]
fn ablation_arms_complete() {
    for ablations in [
        Ablations {
            no_graph: true,
            ..Ablations::default()
        },
        Ablations {
            no_structural_edits: true,
            ..Ablations::default()
        },
        Ablations {
            no_clustering: true,
            ..Ablations::default()
        },
        Ablations {
            random_clustering: true,
            ..Ablations::default()
        },
    ] {
        let out = run("convergence", ablations, None);
        assert!(!out.reports.is_empty());
        let last = out.reports.last().unwrap();
        assert!(last.passed_after >= 4, "{ablations:?}");
    }
}
