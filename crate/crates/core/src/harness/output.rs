//! Result files, the run manifest and replay.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::routing::PolicyRow;
use super::scenario::{hex_sha1, load_scenario, Scenario};
use super::{run, HarnessError, MetricsBundle, RunOptions};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha1: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub scenario_hash: String,
    pub scenario: String,
    pub files: Vec<FileDigest>,
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

/// Renders every output file as `(name, contents)`.
pub fn render(bundle: &MetricsBundle) -> Vec<(String, String)> {
    let mut files = Vec::new();
    let mut s = String::from("app,round,dissemination_depth,dissemination_ms,aggregation_depth,aggregation_ms,deliveries,messages\n");
    for r in &bundle.rounds {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.app, r.round, r.dissemination_depth, r.dissemination_ms, r.aggregation_depth, r.aggregation_ms, r.deliveries, r.messages
        );
    }
    files.push(("rounds.csv".to_string(), s));
    let mut s = String::from("app,failed,master_failed,orphans,recovery_ms,max_contacted,total_contacted,unrecoverable\n");
    for r in &bundle.recovery {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.app, r.failed, r.master_failed, r.orphans, r.recovery_ms, r.max_contacted, r.total_contacted, r.unrecoverable
        );
    }
    files.push(("recovery.csv".to_string(), s));
    if let Some(g) = &bundle.game {
        let mut s = String::from("episode,node,policy,chosen_hop,reward\n");
        for r in &g.policies {
            let _ = writeln!(s, "{},{},{},{},{}", r.episode, r.node, join(&r.policy, ";"), r.chosen, r.mean_reward);
        }
        files.push(("policies.csv".to_string(), s));
        let mut s = String::from("episode,instantaneous,cumulative,average\n");
        for r in &g.regret {
            let _ = writeln!(s, "{},{},{},{}", r.episode, r.instantaneous, r.cumulative, r.average);
        }
        files.push(("regret.csv".to_string(), s));
        let mut s = String::from("episode,mean_latency_ms\n");
        for (e, l) in g.latency_ms.iter().enumerate() {
            let _ = writeln!(s, "{e},{l}");
        }
        files.push(("latency.csv".to_string(), s));
        let mut s = format!("# rows: packet bins, columns: relays {}\n", join(&g.relays, " "));
        for row in &g.heatmap {
            let _ = writeln!(s, "{}", join(row, " "));
        }
        files.push(("heatmap.txt".to_string(), s));
    }
    let mut s = String::from("node,bytes\n");
    for (n, b) in &bundle.traffic {
        let _ = writeln!(s, "{n},{b}");
    }
    files.push(("traffic.csv".to_string(), s));
    let mut s = String::from("trees_mastered,nodes\n");
    for (k, v) in &bundle.masters {
        let _ = writeln!(s, "{k},{v}");
    }
    files.push(("masters.csv".to_string(), s));
    files.push(("overlay.tsv".to_string(), bundle.overlay_dump.clone()));
    files.push((
        "summary.json".to_string(),
        serde_json::to_string_pretty(&bundle.summary).expect("summary serializes") + "\n",
    ));
    if let Some(t) = &bundle.trace {
        files.push(("trace.tsv".to_string(), t.clone()));
    }
    files
}

/// Writes every output file plus `manifest.json` into `dir`.
pub fn emit(sc: &Scenario, bundle: &MetricsBundle, dir: &Path) -> Result<Manifest, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut digests = Vec::new();
    for (name, body) in render(bundle) {
        std::fs::write(dir.join(&name), &body)?;
        digests.push(FileDigest {
            name,
            sha1: hex_sha1(body.as_bytes()),
        });
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: sc.seed,
        scenario_hash: sc.hash(),
        scenario: sc.to_toml(),
        files: digests,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(manifest)
}

/// Re-runs the scenario recorded in a manifest and lists every output whose
/// digest differs. An empty list means the run reproduced byte for byte.
pub fn replay(manifest: &Manifest, trace: bool) -> Result<Vec<String>, HarnessError> {
    let sc = load_scenario(&manifest.scenario)?;
    if sc.hash() != manifest.scenario_hash {
        return Err(HarnessError::Parse("scenario text does not match its recorded hash".into()));
    }
    let bundle = run(&sc, RunOptions { trace })?;
    let fresh: Vec<(String, String)> = render(&bundle)
        .into_iter()
        .map(|(n, b)| (n, hex_sha1(b.as_bytes())))
        .collect();
    let mut diffs = Vec::new();
    for f in &manifest.files {
        match fresh.iter().find(|(n, _)| *n == f.name) {
            Some((_, h)) if *h == f.sha1 => {}
            Some(_) => diffs.push(f.name.clone()),
            None => diffs.push(format!("{} (missing)", f.name)),
        }
    }
    Ok(diffs)
}

/// Parses `policies.csv`.
pub fn read_policy_history(text: &str) -> Result<Vec<PolicyRow>, HarnessError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || HarnessError::Parse(format!("policy history line {}", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        rows.push(PolicyRow {
            episode: f[0].parse().map_err(|_| bad())?,
            node: f[1].parse().map_err(|_| bad())?,
            policy: f[2]
                .split(';')
                .map(|x| x.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_, _>>()?,
            chosen: f[3].parse().map_err(|_| bad())?,
            mean_reward: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emit_and_replay_match() {
        let mut sc = Scenario::minimal(30, 11);
        sc.workload.rounds = 1;
        sc.workload.packets = 20;
        let bundle = run(&sc, RunOptions::default()).unwrap();
        let dir = std::env::temp_dir().join(format!("edgeforest-emit-{}", std::process::id()));
        let m = emit(&sc, &bundle, &dir).unwrap();
        let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
        let back: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert!(replay(&back, false).unwrap().is_empty());
        let hist = read_policy_history(&std::fs::read_to_string(dir.join("policies.csv")).unwrap()).unwrap();
        assert_eq!(hist, bundle.game.unwrap().policies);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
