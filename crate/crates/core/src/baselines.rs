//! Classical MAPF planners: space-time A*, cooperative A* with a reservation
//! table, and conflict-based search.
//!
//! A path lists an agent's cell at every time step from `t = 0` until it
//! reaches its goal for the last time; afterwards the agent is assumed to wait
//! there forever. The cost of a path is its number of steps (`cells - 1`).

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;

use crate::grid_world::{Action, Cell, Env, EnvConfig, GridMap};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Path {
    pub cells: Vec<Cell>,
}

impl Path {
    /// Steps until the final arrival at the goal.
    pub fn cost(&self) -> usize {
        self.cells.len().saturating_sub(1)
    }

    /// Position at time `t`, waiting at the last cell after the path ends.
    pub fn at(&self, t: usize) -> Cell {
        self.cells[t.min(self.cells.len() - 1)]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Solution {
    pub paths: Vec<Path>,
    pub makespan: usize,
    pub soc: usize,
}

impl Solution {
    pub fn new(paths: Vec<Path>) -> Self {
        let makespan = paths.iter().map(Path::cost).max().unwrap_or(0);
        let soc = paths.iter().map(Path::cost).sum();
        Self { paths, makespan, soc }
    }

    /// Joint action taking every agent from time `t` to `t + 1`.
    pub fn joint_action(&self, t: usize) -> Vec<Action> {
        self.paths
            .iter()
            .map(|p| Action::between(p.at(t), p.at(t + 1)).unwrap_or(Action::Stay))
            .collect()
    }
}

/// A CBS constraint on one agent. Edge constraints forbid the move
/// `from -> to` that arrives at `time`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Constraint {
    Vertex { agent: usize, cell: Cell, time: usize },
    Edge { agent: usize, from: Cell, to: Cell, time: usize },
}

impl Constraint {
    pub fn agent(&self) -> usize {
        match *self {
            Constraint::Vertex { agent, .. } | Constraint::Edge { agent, .. } => agent,
        }
    }
}

/// Cells and moves claimed by already planned agents.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReservationTable {
    vertices: BTreeSet<(Cell, usize)>,
    edges: BTreeSet<(Cell, Cell, usize)>,
    /// Goal cells held from the given time onward.
    parked: BTreeMap<Cell, usize>,
}

impl ReservationTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Claims every cell and move of `path`, and its final cell forever.
    pub fn reserve(&mut self, path: &Path) {
        for (t, &c) in path.cells.iter().enumerate() {
            self.vertices.insert((c, t));
            if t > 0 {
                self.edges.insert((path.cells[t - 1], c, t));
            }
        }
        if let Some(&last) = path.cells.last() {
            self.parked.insert(last, path.cells.len() - 1);
        }
    }

    pub fn is_reserved(&self, cell: Cell, t: usize) -> bool {
        self.vertices.contains(&(cell, t)) || self.parked.get(&cell).is_some_and(|&p| t >= p)
    }

    /// Whether some planned agent moves `to -> from` arriving at `t`.
    pub fn blocks_move(&self, from: Cell, to: Cell, t: usize) -> bool {
        self.edges.contains(&(to, from, t))
    }

    fn latest(&self) -> usize {
        let v = self.vertices.iter().map(|&(_, t)| t).max().unwrap_or(0);
        let p = self.parked.values().copied().max().unwrap_or(0);
        v.max(p)
    }
}

/// Default search horizon `4 (W + H)`.
pub fn default_horizon(map: &GridMap) -> usize {
    4 * (map.width() + map.height())
}

struct Rules<'a> {
    vertex: BTreeSet<(Cell, usize)>,
    edge: BTreeSet<(Cell, Cell, usize)>,
    reservation: &'a ReservationTable,
}

impl Rules<'_> {
    fn may_enter(&self, from: Cell, to: Cell, t: usize) -> bool {
        !self.vertex.contains(&(to, t))
            && !self.edge.contains(&(from, to, t))
            && !self.reservation.is_reserved(to, t)
            && !self.reservation.blocks_move(from, to, t)
    }

    /// First time from which the agent may stay at `goal` forever, if any.
    fn final_time(&self, goal: Cell) -> Option<usize> {
        if self.reservation.parked.contains_key(&goal) {
            return None;
        }
        let v = self.vertex.iter().filter(|(c, _)| *c == goal).map(|&(_, t)| t + 1).max().unwrap_or(0);
        let r = self
            .reservation
            .vertices
            .iter()
            .filter(|(c, _)| *c == goal)
            .map(|&(_, t)| t + 1)
            .max()
            .unwrap_or(0);
        Some(v.max(r))
    }
}

/// Shortest path for `agent` from `start` to `goal` that honours the agent's
/// constraints and the reservation table. `f = g + h` with Manhattan `h`;
/// ties go to the larger `g`, then to the action order Up, Down, Left, Right,
/// Stay.
pub fn astar_spacetime(
    map: &GridMap,
    agent: usize,
    start: Cell,
    goal: Cell,
    constraints: &[Constraint],
    reservation: &ReservationTable,
) -> Result<Path> {
    if !map.is_free(start) || !map.is_free(goal) {
        return Err(Error::InvalidMap(alloc::format!("agent {agent} start or goal is not a free cell")));
    }
    let mut rules = Rules {
        vertex: BTreeSet::new(),
        edge: BTreeSet::new(),
        reservation,
    };
    for c in constraints.iter().filter(|c| c.agent() == agent) {
        match *c {
            Constraint::Vertex { cell, time, .. } => {
                rules.vertex.insert((cell, time));
            }
            Constraint::Edge { from, to, time, .. } => {
                rules.edge.insert((from, to, time));
            }
        }
    }
    let Some(final_time) = rules.final_time(goal) else {
        return Err(Error::Infeasible { agent });
    };
    let latest = rules.vertex.iter().map(|&(_, t)| t).chain(rules.edge.iter().map(|&(_, _, t)| t)).max().unwrap_or(0);
    let horizon = default_horizon(map).max(latest.max(reservation.latest()) + map.width() + map.height());
    if rules.vertex.contains(&(start, 0)) || reservation.is_reserved(start, 0) {
        return Err(Error::Infeasible { agent });
    }

    let cells = map.cell_count();
    let mut closed = vec![false; cells * (horizon + 1)];
    // arena of (cell, time, parent)
    let mut nodes: Vec<(Cell, usize, usize)> = vec![(start, 0, usize::MAX)];
    let mut open = BinaryHeap::new();
    let mut seq = 0usize;
    open.push(Reverse((start.manhattan(goal) as usize, Reverse(0usize), 0usize, seq, 0usize)));
    while let Some(Reverse((_, Reverse(g), _, _, node))) = open.pop() {
        let (cell, t, _) = nodes[node];
        let key = t * cells + map.index(cell);
        if closed[key] {
            continue;
        }
        closed[key] = true;
        if cell == goal && t >= final_time {
            let mut out = Vec::with_capacity(t + 1);
            let mut k = node;
            while k != usize::MAX {
                out.push(nodes[k].0);
                k = nodes[k].2;
            }
            out.reverse();
            return Ok(Path { cells: out });
        }
        if t == horizon {
            continue;
        }
        for (ai, a) in Action::ALL.into_iter().enumerate() {
            let next = a.apply(cell);
            if !map.is_free(next) || !rules.may_enter(cell, next, t + 1) {
                continue;
            }
            if closed[(t + 1) * cells + map.index(next)] {
                continue;
            }
            seq += 1;
            nodes.push((next, t + 1, node));
            let f = g + 1 + next.manhattan(goal) as usize;
            open.push(Reverse((f, Reverse(g + 1), ai, seq, nodes.len() - 1)));
        }
    }
    Err(Error::Infeasible { agent })
}

/// Plans agents one at a time in `order`, each avoiding the cells and moves
/// of those planned before it. Agents park at their goals.
pub fn cooperative_astar(map: &GridMap, tasks: &[(Cell, Cell)], order: &[usize]) -> Result<Solution> {
    if order.len() != tasks.len() {
        return Err(Error::LengthMismatch("priority order and tasks"));
    }
    let mut table = ReservationTable::new();
    let mut paths = vec![Path::default(); tasks.len()];
    for &i in order {
        let (s, g) = tasks[i];
        let path = astar_spacetime(map, i, s, g, &[], &table)?;
        table.reserve(&path);
        paths[i] = path;
    }
    Ok(Solution::new(paths))
}

/// A collision between agents `a < b` at time `time`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Conflict {
    Vertex { time: usize, a: usize, b: usize, cell: Cell },
    /// `a` moves `from_a -> from_b` while `b` moves `from_b -> from_a`,
    /// arriving at `time`.
    Swap { time: usize, a: usize, b: usize, from_a: Cell, from_b: Cell },
}

impl Conflict {
    fn key(&self) -> (usize, usize, usize, u8) {
        match *self {
            Conflict::Vertex { time, a, b, .. } => (time, a, b, 0),
            Conflict::Swap { time, a, b, .. } => (time, a, b, 1),
        }
    }
}

/// Every pairwise vertex and swap conflict, ordered by time, then agent pair.
pub fn find_conflicts(paths: &[Path]) -> Vec<Conflict> {
    let horizon = paths.iter().map(|p| p.cells.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for t in 0..horizon {
        for a in 0..paths.len() {
            for b in a + 1..paths.len() {
                if paths[a].at(t) == paths[b].at(t) {
                    out.push(Conflict::Vertex { time: t, a, b, cell: paths[a].at(t) });
                }
                if t > 0 {
                    let (pa, pb) = (paths[a].at(t - 1), paths[b].at(t - 1));
                    if pa != pb && paths[a].at(t) == pb && paths[b].at(t) == pa {
                        out.push(Conflict::Swap { time: t, a, b, from_a: pa, from_b: pb });
                    }
                }
            }
        }
    }
    out.sort_by_key(Conflict::key);
    out
}

fn first_conflict(paths: &[Path]) -> Option<Conflict> {
    let horizon = paths.iter().map(|p| p.cells.len()).max().unwrap_or(0);
    for t in 0..horizon {
        for a in 0..paths.len() {
            for b in a + 1..paths.len() {
                if paths[a].at(t) == paths[b].at(t) {
                    return Some(Conflict::Vertex { time: t, a, b, cell: paths[a].at(t) });
                }
                if t > 0 {
                    let (pa, pb) = (paths[a].at(t - 1), paths[b].at(t - 1));
                    if pa != pb && paths[a].at(t) == pb && paths[b].at(t) == pa {
                        return Some(Conflict::Swap { time: t, a, b, from_a: pa, from_b: pb });
                    }
                }
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CbsOutcome {
    /// The optimal solution, or on timeout the incumbent (a cooperative A*
    /// solution) if one exists.
    pub solution: Option<Solution>,
    pub optimal: bool,
    pub expanded: usize,
}

struct CbsNode {
    constraints: Vec<Constraint>,
    paths: Vec<Path>,
    soc: usize,
}

/// Conflict-based search with at most `max_expansions` high-level nodes.
pub fn cbs(map: &GridMap, tasks: &[(Cell, Cell)], max_expansions: usize) -> Result<CbsOutcome> {
    cbs_until(map, tasks, max_expansions, &mut || false)
}

/// Like [`cbs`], additionally stopping as soon as `stop` returns true (it is
/// polled once per expansion).
pub fn cbs_until(
    map: &GridMap,
    tasks: &[(Cell, Cell)],
    max_expansions: usize,
    stop: &mut dyn FnMut() -> bool,
) -> Result<CbsOutcome> {
    let empty = ReservationTable::new();
    let mut root_paths = Vec::with_capacity(tasks.len());
    for (i, &(s, g)) in tasks.iter().enumerate() {
        root_paths.push(astar_spacetime(map, i, s, g, &[], &empty)?);
    }
    let mut nodes = vec![CbsNode {
        soc: root_paths.iter().map(Path::cost).sum(),
        constraints: Vec::new(),
        paths: root_paths,
    }];
    let mut open = BinaryHeap::new();
    open.push(Reverse((nodes[0].soc, find_conflicts(&nodes[0].paths).len(), 0usize)));
    let mut expanded = 0;
    while let Some(Reverse((_, _, id))) = open.pop() {
        let Some(conflict) = first_conflict(&nodes[id].paths) else {
            let paths = core::mem::take(&mut nodes[id].paths);
            return Ok(CbsOutcome {
                solution: Some(Solution::new(paths)),
                optimal: true,
                expanded,
            });
        };
        if expanded >= max_expansions || stop() {
            let order: Vec<usize> = (0..tasks.len()).collect();
            return Ok(CbsOutcome {
                solution: cooperative_astar(map, tasks, &order).ok(),
                optimal: false,
                expanded,
            });
        }
        expanded += 1;
        let children = match conflict {
            Conflict::Vertex { time, a, b, cell } => [
                Constraint::Vertex { agent: a, cell, time },
                Constraint::Vertex { agent: b, cell, time },
            ],
            Conflict::Swap { time, a, b, from_a, from_b } => [
                Constraint::Edge { agent: a, from: from_a, to: from_b, time },
                Constraint::Edge { agent: b, from: from_b, to: from_a, time },
            ],
        };
        for c in children {
            let agent = c.agent();
            let mut constraints = nodes[id].constraints.clone();
            constraints.push(c);
            let (s, g) = tasks[agent];
            let Ok(path) = astar_spacetime(map, agent, s, g, &constraints, &empty) else {
                continue;
            };
            let mut paths = nodes[id].paths.clone();
            paths[agent] = path;
            let soc = paths.iter().map(Path::cost).sum();
            let conflicts = find_conflicts(&paths).len();
            nodes.push(CbsNode { constraints, paths, soc });
            open.push(Reverse((soc, conflicts, nodes.len() - 1)));
        }
        // Expanded nodes are never revisited.
        nodes[id].paths = Vec::new();
        nodes[id].constraints = Vec::new();
    }
    Ok(CbsOutcome {
        solution: None,
        optimal: false,
        expanded,
    })
}

/// What happened when a solution was executed in the simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplayReport {
    pub steps: usize,
    pub collisions: usize,
    pub all_at_goal: bool,
    /// The executed positions differed from the planned ones at some step.
    pub diverged: bool,
}

/// Executes `solution` step by step in a fresh environment.
pub fn replay(map: &GridMap, tasks: &[(Cell, Cell)], solution: &Solution, config: EnvConfig) -> Result<ReplayReport> {
    let config = EnvConfig {
        max_steps: config.max_steps.max(solution.makespan + 1),
        ..config
    };
    let mut env = Env::from_tasks(map.clone(), tasks, config)?;
    let mut report = ReplayReport {
        steps: 0,
        collisions: 0,
        all_at_goal: env.all_at_goal(),
        diverged: false,
    };
    for t in 0..solution.makespan {
        if env.is_done() {
            break;
        }
        let outcome = env.step(&solution.joint_action(t))?;
        report.steps += 1;
        report.collisions += outcome.collisions();
        let planned: Vec<Cell> = solution.paths.iter().map(|p| p.at(t + 1)).collect();
        report.diverged |= planned != env.positions();
    }
    report.all_at_goal = env.all_at_goal();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn start_equals_goal() {
        let map = GridMap::empty(5, 5).unwrap();
        let c = Cell::new(2, 2);
        let p = astar_spacetime(&map, 0, c, c, &[], &ReservationTable::new()).unwrap();
        assert_eq!(p.cells, vec![c]);
        assert_eq!(p.cost(), 0);
    }

    #[test]
    fn empty_corner_to_corner() {
        let map = GridMap::empty(5, 5).unwrap();
        let p = astar_spacetime(&map, 0, Cell::new(0, 0), Cell::new(4, 4), &[], &ReservationTable::new()).unwrap();
        assert_eq!(p.cost(), 8);
    }

    #[test]
    fn vertex_constraint_forces_detour_or_wait() {
        let map = GridMap::from_rows(&["....."]).err();
        assert!(map.is_some(), "one-row maps are rejected");
        let map = GridMap::from_rows(&[".....", "@@@@@"]).unwrap();
        let cons = [Constraint::Vertex { agent: 0, cell: Cell::new(2, 0), time: 2 }];
        let p = astar_spacetime(&map, 0, Cell::new(0, 0), Cell::new(4, 0), &cons, &ReservationTable::new()).unwrap();
        assert_eq!(p.cost(), 5);
        assert_ne!(p.at(2), Cell::new(2, 0));
    }

    #[test]
    fn goal_constraint_after_arrival_delays_the_finish() {
        let map = GridMap::empty(3, 3).unwrap();
        let cons = [Constraint::Vertex { agent: 0, cell: Cell::new(2, 0), time: 5 }];
        let p = astar_spacetime(&map, 0, Cell::new(0, 0), Cell::new(2, 0), &cons, &ReservationTable::new()).unwrap();
        assert_eq!(p.cost(), 6);
    }

    #[test]
    fn conflicts_are_detected() {
        let a = Path { cells: vec![Cell::new(0, 0), Cell::new(1, 0)] };
        let b = Path { cells: vec![Cell::new(1, 0), Cell::new(0, 0)] };
        assert!(matches!(find_conflicts(&[a, b])[..], [Conflict::Swap { time: 1, .. }]));
    }
}
