//! Browser bindings for three small views of the core library: team
//! formation on a point cloud, a random-policy episode, and the exploration
//! schedule. Every export takes and returns plain values or JSON strings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rochico_core::env::{EnvSpec, GridEnv, Scenario, StepTrace};
use rochico_core::org::{build_team_graph, find_teams, nearest_neighbors, structural_reward};
use rochico_core::trainer::EpsilonSchedule;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Teams {
    neighbors: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    team_of: Vec<Option<usize>>,
    team_count: usize,
    /// Per-agent structural change against the all-singleton graph.
    structural: Vec<f64>,
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Teams formed when agent `i` links to neighbor `k` iff bit `i * m + k`
/// of `links` is set. `xs`, `ys` hold agent positions.
pub fn form_teams_json(xs: &[f64], ys: &[f64], links: &[u8], m: usize) -> Result<String, String> {
    if xs.len() != ys.len() {
        return Err(format!("{} x coordinates but {} y coordinates", xs.len(), ys.len()));
    }
    let positions: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    let neighbors = nearest_neighbors(&positions, None, m);
    let decisions: Vec<Vec<bool>> = neighbors
        .iter()
        .enumerate()
        .map(|(i, nb)| (0..nb.len()).map(|k| links.get(i * m + k).is_some_and(|&b| b != 0)).collect())
        .collect();
    let graph = build_team_graph(&decisions, &neighbors).map_err(|e| e.to_string())?;
    let alone = build_team_graph(&vec![vec![false; m]; neighbors.len()], &neighbors).map_err(|e| e.to_string())?;
    let teams = find_teams(&graph);
    let structural = (0..graph.n)
        .map(|i| structural_reward(&alone, &graph, i))
        .collect::<rochico_core::Result<Vec<f64>>>()
        .map_err(|e| e.to_string())?;
    let out = Teams {
        neighbors,
        edges: graph.edges.iter().copied().collect(),
        team_count: teams.teams.len(),
        team_of: teams.team_of,
        structural,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// One episode of uniformly random actions on the desk-scale map of
/// `scenario`, as a JSON array of per-step snapshots.
pub fn simulate_episode_json(scenario: &str, seed: u64) -> Result<String, String> {
    let scenario: Scenario = scenario.parse().map_err(|e: rochico_core::Error| e.to_string())?;
    let spec = EnvSpec::desk(scenario);
    let (n, actions) = (spec.n_agents, spec.action_count());
    let mut env = GridEnv::reset(spec, seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut trace = Vec::new();
    while !env.is_done() {
        let acts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..actions)).collect();
        let out = env.step(&acts).map_err(|e| e.to_string())?;
        trace.push(StepTrace::capture(&env, &acts, &out));
    }
    serde_json::to_string(&trace).map_err(|e| e.to_string())
}

/// Exploration rate for episodes `0..episodes` under the breakpoints given
/// as comma lists.
pub fn epsilon_curve_values(breakpoints: &str, values: &str, episodes: usize) -> Result<Vec<f64>, String> {
    let parse = |s: &str| -> Result<Vec<f64>, String> {
        s.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| format!("not a number: {x:?}"))).collect()
    };
    let at: Vec<usize> = parse(breakpoints)?.into_iter().map(|x| x as usize).collect();
    let schedule = EpsilonSchedule::new(at, parse(values)?).map_err(|e| e.to_string())?;
    Ok((0..episodes).map(|e| schedule.at(e)).collect())
}

#[wasm_bindgen]
pub fn form_teams(xs: &[f64], ys: &[f64], links: &[u8], m: usize) -> Result<String, JsError> {
    form_teams_json(xs, ys, links, m).map_err(js_err)
}

#[wasm_bindgen]
pub fn simulate_episode(scenario: &str, seed: u32) -> Result<String, JsError> {
    simulate_episode_json(scenario, seed as u64).map_err(js_err)
}

#[wasm_bindgen]
pub fn epsilon_curve(breakpoints: &str, values: &str, episodes: usize) -> Result<Vec<f64>, JsError> {
    epsilon_curve_values(breakpoints, values, episodes).map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_of_links_forms_one_team() {
        let xs = [0.0, 1.0, 2.0, 10.0];
        let ys = [0.0; 4];
        // 0 links to its nearest (1), 1 links to its nearest (0 or 2 first), 2 links to 1
        let links = [1, 0, 1, 1, 1, 0, 0, 0];
        let v: serde_json::Value = serde_json::from_str(&form_teams_json(&xs, &ys, &links, 2).unwrap()).unwrap();
        let team_of = v["team_of"].as_array().unwrap();
        assert_eq!(team_of[0], team_of[1]);
        assert_eq!(team_of[1], team_of[2]);
        assert_ne!(team_of[0], team_of[3]);
        assert_eq!(v["team_count"], 2);
    }

    #[test]
    fn no_links_gives_singletons_and_zero_change() {
        let v: serde_json::Value =
            serde_json::from_str(&form_teams_json(&[0.0, 1.0, 2.0], &[0.0; 3], &[], 2).unwrap()).unwrap();
        assert_eq!(v["team_count"], 3);
        assert!(v["structural"].as_array().unwrap().iter().all(|x| x.as_f64() == Some(0.0)));
    }

    #[test]
    fn episode_runs_to_completion() {
        let trace: Vec<serde_json::Value> =
            serde_json::from_str(&simulate_episode_json("pacmen", 3).unwrap()).unwrap();
        assert!(!trace.is_empty());
        assert!(simulate_episode_json("chess", 3).is_err());
    }

    #[test]
    fn epsilon_curve_hits_breakpoints() {
        let c = epsilon_curve_values("0,200,400", "1,0.2,0.05", 401).unwrap();
        assert_eq!((c[0], c[200], c[400]), (1.0, 0.2, 0.05));
        assert!(epsilon_curve_values("0,x", "1,2", 3).is_err());
    }
}
