//! Trajectory logs, the dataset MDP, and the neighbour graph over dataset states.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BatsError, Result};
use crate::mdp::{Edge, TabularMdp};
use crate::metric::{DistanceMetric, MetricKind, Normalizer};
use crate::spatial::KdTree;

/// Ingestion logs a warning above this many records.
pub const RECORD_WARNING_THRESHOLD: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
    pub normalization: Normalizer,
}

#[derive(Serialize, Deserialize)]
struct Header {
    state_dim: usize,
    action_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    traj: usize,
    t: usize,
    s: Vec<f64>,
    a: Vec<f64>,
    r: f64,
    s2: Vec<f64>,
    terminal: bool,
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

impl TrajectoryDataset {
    /// Validate trajectories and compute the normalisation statistics.
    pub fn new(state_dim: usize, action_dim: usize, trajectories: Vec<Trajectory>) -> Result<Self> {
        for (j, traj) in trajectories.iter().enumerate() {
            validate_trajectory(j, traj, state_dim, action_dim)?;
        }
        let normalization = {
            let rows = trajectories.iter().flat_map(|t| {
                t.transitions
                    .iter()
                    .map(|r| r.state.as_slice())
                    .chain(t.transitions.last().map(|r| r.next_state.as_slice()))
            });
            Normalizer::fit(rows, state_dim)
        };
        Ok(TrajectoryDataset {
            state_dim,
            action_dim,
            trajectories,
            normalization,
        })
    }

    pub fn n_records(&self) -> usize {
        self.trajectories.iter().map(|t| t.transitions.len()).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    /// Distinct states (exact bit identity) in first-appearance order; this is
    /// also the state order of [`build_m0`].
    pub fn distinct_states(&self) -> Vec<Vec<f64>> {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut out = Vec::new();
        for r in self.records() {
            for s in [&r.state, &r.next_state] {
                seen.entry(bits(s)).or_insert_with(|| {
                    out.push(s.clone());
                    out.len() - 1
                });
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_dataset(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        serde_json::to_writer(
            &mut *w,
            &Header {
                state_dim: self.state_dim,
                action_dim: self.action_dim,
            },
        )?;
        w.write_all(b"\n")?;
        for (j, traj) in self.trajectories.iter().enumerate() {
            for (t, r) in traj.transitions.iter().enumerate() {
                let line = RecordLine {
                    traj: j,
                    t,
                    s: r.state.clone(),
                    a: r.action.clone(),
                    r: r.reward,
                    s2: r.next_state.clone(),
                    terminal: r.terminal,
                };
                serde_json::to_writer(&mut *w, &line)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

fn validate_trajectory(j: usize, traj: &Trajectory, state_dim: usize, action_dim: usize) -> Result<()> {
    let err = |record: usize, message: String| BatsError::Load {
        trajectory: j,
        record,
        message,
    };
    for (i, r) in traj.transitions.iter().enumerate() {
        if r.state.len() != state_dim || r.next_state.len() != state_dim {
            return Err(err(i, format!("state dimension differs from declared {state_dim}")));
        }
        if r.action.len() != action_dim {
            return Err(err(i, format!("action dimension differs from declared {action_dim}")));
        }
        let finite = r.state.iter().chain(&r.next_state).chain(&r.action).all(|v| v.is_finite())
            && r.reward.is_finite();
        if !finite {
            return Err(err(i, "non-finite value".into()));
        }
        if let Some(next) = traj.transitions.get(i + 1) {
            if r.terminal {
                return Err(err(i, "terminal record is followed by further records".into()));
            }
            if bits(&r.next_state) != bits(&next.state) {
                return Err(err(i, "next_state does not match the following record's state".into()));
            }
        }
    }
    Ok(())
}

/// Read the JSON-lines dataset format: a `{"state_dim", "action_dim"}` header
/// followed by one record per line, sorted by `(traj, t)`.
pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| BatsError::Input(format!("{} is empty", path.display())))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| BatsError::Input(format!("bad dataset header: {e}")))?;

    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut last_traj_id: Option<usize> = None;
    let mut n_records = 0usize;
    for (line_no, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| BatsError::Load {
            trajectory: trajectories.len().saturating_sub(1),
            record: line_no,
            message: format!("unparseable line {}: {e}", line_no + 2),
        })?;
        match last_traj_id {
            Some(id) if id == rec.traj => {}
            Some(id) if rec.traj < id => {
                return Err(BatsError::Load {
                    trajectory: trajectories.len(),
                    record: rec.t,
                    message: format!("trajectory id {} after {id}: lines must be sorted", rec.traj),
                });
            }
            _ => {
                trajectories.push(Trajectory::default());
                last_traj_id = Some(rec.traj);
            }
        }
        let j = trajectories.len() - 1;
        let current = &mut trajectories[j].transitions;
        if rec.t != current.len() {
            return Err(BatsError::Load {
                trajectory: j,
                record: current.len(),
                message: format!("expected t = {}, found {}", current.len(), rec.t),
            });
        }
        current.push(Transition {
            state: rec.s,
            action: rec.a,
            reward: rec.r,
            next_state: rec.s2,
            terminal: rec.terminal,
        });
        n_records += 1;
    }
    if n_records > RECORD_WARNING_THRESHOLD {
        log::warn!("{} holds {n_records} records; ingestion and graph building will be slow", path.display());
    }
    TrajectoryDataset::new(header.state_dim, header.action_dim, trajectories)
}

/// The MDP induced by the logged data.
///
/// One state per distinct logged state, one action per distinct logged
/// `(action, outcome)` at that state, uniform start weight on trajectory
/// initial states. States logged as terminal become zero-reward absorbing
/// states. Trajectory ends with no outgoing record (truncations) stay
/// non-terminal but receive a zero-reward self-loop, so their value is zero
/// until a stitch gives them somewhere to go.
pub fn build_m0(data: &TrajectoryDataset, discount: f64) -> Result<TabularMdp> {
    if data.n_records() == 0 {
        return Err(BatsError::Input("cannot build an MDP from an empty dataset".into()));
    }
    let mut mdp = TabularMdp::new(data.state_dim, data.action_dim, discount)?;
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut intern = |mdp: &mut TabularMdp, s: &[f64]| -> usize {
        *index
            .entry(bits(s))
            .or_insert_with(|| mdp.add_state(s.to_vec(), false, false))
    };
    let mut terminal_states = Vec::new();
    for traj in &data.trajectories {
        for (i, r) in traj.transitions.iter().enumerate() {
            let s = intern(&mut mdp, &r.state);
            let s2 = intern(&mut mdp, &r.next_state);
            if i == 0 && !mdp.start_states.contains(&s) {
                mdp.start_states.push(s);
            }
            let duplicate = mdp.actions[s].iter().any(|e| {
                e.next == s2 && e.reward.to_bits() == r.reward.to_bits() && bits(&e.action) == bits(&r.action)
            });
            if !duplicate {
                mdp.actions[s].push(Edge::logged(r.action.clone(), s2, r.reward));
            }
            if r.terminal {
                terminal_states.push(s2);
            }
        }
    }
    for s in terminal_states {
        if !mdp.terminal[s] {
            mdp.make_terminal(s);
        }
    }
    for s in 0..mdp.n_states() {
        if mdp.actions[s].is_empty() {
            let stay = Edge::logged(vec![0.0; data.action_dim], s, 0.0);
            mdp.actions[s].push(stay);
        }
    }
    mdp.validate()?;
    Ok(mdp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    /// Undirected ball graph of the given radius.
    Radius(f64),
    /// Directed k-nearest lists.
    Knn(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub mode: NeighborMode,
    pub metric: MetricKind,
    /// Indexed like the dataset MDP's states. Radius mode lists are ascending
    /// by index; k-NN lists are ascending by `(distance, index)`.
    pub adjacency: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn build(points: &[Vec<f64>], mode: NeighborMode, metric: &DistanceMetric) -> Result<Self> {
        let embedded: Vec<Vec<f64>> = points.iter().map(|p| metric.embed(p)).collect();
        let tree = KdTree::new(&embedded);
        let adjacency = match mode {
            NeighborMode::Radius(eps) => {
                if !(eps > 0.0) {
                    return Err(BatsError::Input(format!("neighbour radius {eps} must be positive")));
                }
                embedded
                    .iter()
                    .enumerate()
                    .map(|(i, p)| tree.within_radius(p, eps).into_iter().filter(|&j| j != i).collect())
                    .collect()
            }
            NeighborMode::Knn(k) => {
                if k == 0 || k >= points.len() {
                    return Err(BatsError::Input(format!(
                        "k = {k} must be in 1..{} for {} states",
                        points.len(),
                        points.len()
                    )));
                }
                embedded
                    .iter()
                    .enumerate()
                    .map(|(i, p)| tree.knn(p, k, Some(i)).into_iter().map(|(_, j)| j).collect())
                    .collect()
            }
        };
        Ok(NeighborGraph {
            mode,
            metric: metric.kind(),
            adjacency,
        })
    }

    pub fn n_states(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, state: usize) -> &[usize] {
        self.adjacency.get(state).map_or(&[], Vec::as_slice)
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }
}

/// Neighbour graph over the dataset's distinct states, indexed like [`build_m0`].
pub fn build_neighbor_graph(
    data: &TrajectoryDataset,
    mode: NeighborMode,
    metric: &DistanceMetric,
) -> Result<NeighborGraph> {
    NeighborGraph::build(&data.distinct_states(), mode, metric)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// Axis-aligned box, bounds inclusive.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Union of closed Euclidean balls.
    Points { points: Vec<Vec<f64>>, radius: f64 },
}

impl Region {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Region::Box { lo, hi } => {
                if lo.len() != dim || hi.len() != dim {
                    return Err(BatsError::Input(format!("region box must have dimension {dim}")));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                    return Err(BatsError::Input("region box has lo > hi".into()));
                }
            }
            Region::Points { points, radius } => {
                if !(*radius >= 0.0) || points.iter().any(|p| p.len() != dim) {
                    return Err(BatsError::Input("region point set is malformed".into()));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| *l <= *v && *v <= *h),
            Region::Points { points, radius } => points
                .iter()
                .any(|p| crate::spatial::squared_distance(p, x).sqrt() <= *radius),
        }
    }
}

/// Add every logged (non-imagined) state inside `region` to the start set.
/// Returns the number of states added.
pub fn relabel_start_states(mdp: &mut TabularMdp, region: &Region) -> Result<usize> {
    region.validate(mdp.state_dim)?;
    let mut is_start = vec![false; mdp.n_states()];
    for &s in &mdp.start_states {
        is_start[s] = true;
    }
    let mut matched = 0usize;
    let mut added = 0usize;
    for s in 0..mdp.n_states() {
        if mdp.imagined[s] || !region.contains(&mdp.states[s]) {
            continue;
        }
        matched += 1;
        if !is_start[s] {
            is_start[s] = true;
            mdp.start_states.push(s);
            added += 1;
        }
    }
    if matched == 0 {
        log::warn!("start-state region matched no dataset states");
    }
    Ok(added)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(s: f64, a: f64, r: f64, s2: f64, terminal: bool) -> Transition {
        Transition {
            state: vec![s],
            action: vec![a],
            reward: r,
            next_state: vec![s2],
            terminal,
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_two_record_trajectory() {
        let f = write_lines(&[
            r#"{"state_dim":1,"action_dim":1}"#,
            r#"{"traj":0,"t":0,"s":[0.0],"a":[1.0],"r":0.5,"s2":[1.0],"terminal":false}"#,
            r#"{"traj":0,"t":1,"s":[1.0],"a":[1.0],"r":0.5,"s2":[2.0],"terminal":true}"#,
        ]);
        let d = load_dataset(f.path()).unwrap();
        assert_eq!(d.trajectories.len(), 1);
        assert_eq!(d.trajectories[0].transitions.len(), 2);
    }

    #[test]
    fn broken_chain_names_the_record() {
        let f = write_lines(&[
            r#"{"state_dim":1,"action_dim":1}"#,
            r#"{"traj":0,"t":0,"s":[0.0],"a":[1.0],"r":0.5,"s2":[1.0],"terminal":false}"#,
            r#"{"traj":0,"t":1,"s":[1.5],"a":[1.0],"r":0.5,"s2":[2.0],"terminal":false}"#,
        ]);
        match load_dataset(f.path()) {
            Err(BatsError::Load { trajectory, record, .. }) => assert_eq!((trajectory, record), (0, 0)),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_and_nan_rejected() {
        let f = write_lines(&[
            r#"{"state_dim":2,"action_dim":1}"#,
            r#"{"traj":0,"t":0,"s":[0.0],"a":[1.0],"r":0.5,"s2":[1.0],"terminal":false}"#,
        ]);
        assert!(matches!(load_dataset(f.path()), Err(BatsError::Load { .. })));
        let bad = Trajectory {
            transitions: vec![tr(0.0, f64::NAN, 0.0, 1.0, false)],
        };
        assert!(TrajectoryDataset::new(1, 1, vec![bad]).is_err());
    }

    #[test]
    fn m0_counts_and_shared_state() {
        let t1 = Trajectory {
            transitions: vec![tr(0.0, 0.0, 0.0, 1.0, false), tr(1.0, 0.0, 0.0, 2.0, false), tr(2.0, 0.0, 1.0, 3.0, false)],
        };
        let d = TrajectoryDataset::new(1, 1, vec![t1.clone()]).unwrap();
        let m = build_m0(&d, 0.9).unwrap();
        assert_eq!(m.n_states(), 4);
        assert_eq!(m.actions.iter().zip(&m.terminal).filter(|(_, t)| !**t).map(|(a, _)| a.len()).sum::<usize>(), 4);
        assert_eq!(m.start_states, vec![0]);
        assert!(!m.terminal[3]);
        assert_eq!(m.actions[3][0].next, 3, "trajectory end gets a self-loop");

        let t2 = Trajectory {
            transitions: vec![tr(5.0, 1.0, 0.0, 1.0, false), tr(1.0, 1.0, 0.0, 6.0, true)],
        };
        let d = TrajectoryDataset::new(1, 1, vec![t1, t2]).unwrap();
        let m = build_m0(&d, 0.9).unwrap();
        let shared = m.states.iter().position(|s| s == &vec![1.0]).unwrap();
        assert_eq!(m.actions[shared].len(), 2);
        assert_eq!(m.start_states.len(), 2);
    }

    #[test]
    fn duplicate_records_collapse() {
        let t = Trajectory {
            transitions: vec![tr(0.0, 0.5, 1.0, 1.0, false)],
        };
        let d = TrajectoryDataset::new(1, 1, vec![t.clone(), t]).unwrap();
        let m = build_m0(&d, 0.9).unwrap();
        assert_eq!(m.actions[0].len(), 1);
        assert_eq!(m.start_states, vec![0]);
    }

    #[test]
    fn two_point_ball_graph() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0]];
        let g = NeighborGraph::build(&pts, NeighborMode::Radius(0.2), &DistanceMetric::Euclidean).unwrap();
        assert_eq!(g.adjacency, vec![vec![1], vec![0]]);
        let pts = vec![vec![0.0, 0.0], vec![0.3, 0.0]];
        let g = NeighborGraph::build(&pts, NeighborMode::Radius(0.2), &DistanceMetric::Euclidean).unwrap();
        assert_eq!(g.n_edges(), 0);
        assert!(NeighborGraph::build(&pts, NeighborMode::Radius(0.0), &DistanceMetric::Euclidean).is_err());
        assert!(NeighborGraph::build(&pts, NeighborMode::Knn(2), &DistanceMetric::Euclidean).is_err());
    }

    #[test]
    fn relabel_region_edges() {
        let t = Trajectory {
            transitions: vec![tr(0.0, 0.0, 0.0, 1.0, false), tr(1.0, 0.0, 0.0, 2.0, false)],
        };
        let d = TrajectoryDataset::new(1, 1, vec![t]).unwrap();
        let mut m = build_m0(&d, 0.9).unwrap();
        let none = Region::Box { lo: vec![10.0], hi: vec![11.0] };
        assert_eq!(relabel_start_states(&mut m, &none).unwrap(), 0);
        assert_eq!(m.start_states, vec![0]);
        let all = Region::Points { points: vec![vec![1.0]], radius: 5.0 };
        relabel_start_states(&mut m, &all).unwrap();
        let mut starts = m.start_states.clone();
        starts.sort();
        assert_eq!(starts, vec![0, 1, 2]);
        let bad = Region::Box { lo: vec![1.0], hi: vec![0.0] };
        assert!(relabel_start_states(&mut m, &bad).is_err());
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let t = Trajectory {
            transitions: vec![tr(0.1, 1.0 / 3.0, -0.7, 0.2, false), tr(0.2, 1e-300, 2.5, -0.0, true)],
        };
        let d = TrajectoryDataset::new(1, 1, vec![t]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        d.save(f.path()).unwrap();
        let back = load_dataset(f.path()).unwrap();
        assert_eq!(d, back);
        assert_eq!(back.trajectories[0].transitions[1].next_state[0].to_bits(), (-0.0f64).to_bits());
    }
}
