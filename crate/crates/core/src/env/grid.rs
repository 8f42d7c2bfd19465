use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use super::tabular::TabularMdp;
use crate::error::{Error, Result};
use crate::Scalar;

const TWO_ROOM: &str = include_str!("../../assets/two_room.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Wall,
    Goal,
    Start,
}

impl Cell {
    fn from_char(c: char) -> Option<Self> {
        match c {
            '.' => Some(Cell::Free),
            '#' => Some(Cell::Wall),
            'G' => Some(Cell::Goal),
            'S' => Some(Cell::Start),
            _ => None,
        }
    }

    fn to_char(self) -> char {
        match self {
            Cell::Free => '.',
            Cell::Wall => '#',
            Cell::Goal => 'G',
            Cell::Start => 'S',
        }
    }
}

/// Rectangular ASCII map: `#` wall, `.` free, `G` goal, `S` start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    rows: usize,
    cols: usize,
    cells: Vec<Cell>,
}

impl GridMap {
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(Error::validation("empty map"));
        }
        let cols = lines[0].chars().count();
        let mut cells = Vec::with_capacity(cols * lines.len());
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(Error::validation(format!(
                    "map is not rectangular: row {r} has {} columns, expected {cols}",
                    line.chars().count()
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                cells.push(Cell::from_char(ch).ok_or_else(|| {
                    Error::validation(format!("unknown map character {ch:?} at row {r}, column {c}"))
                })?);
            }
        }
        let map = Self { rows: lines.len(), cols, cells };
        map.validate()?;
        Ok(map)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The bundled two-room layout: a left room with the start, a doorway, and
    /// a right room holding the goal.
    pub fn two_room() -> Self {
        Self::parse(TWO_ROOM).expect("bundled map is valid")
    }

    /// Open `rows x cols` room with a wall border, start top-left, goal
    /// bottom-right.
    pub fn open_room(rows: usize, cols: usize) -> Result<Self> {
        let mut text = String::new();
        text.push_str(&"#".repeat(cols + 2));
        text.push('\n');
        for r in 0..rows {
            text.push('#');
            for c in 0..cols {
                text.push(match (r, c) {
                    (0, 0) => 'S',
                    _ if r + 1 == rows && c + 1 == cols => 'G',
                    _ => '.',
                });
            }
            text.push_str("#\n");
        }
        text.push_str(&"#".repeat(cols + 2));
        Self::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        let goals = self.cells.iter().filter(|&&c| c == Cell::Goal).count();
        if goals != 1 {
            return Err(Error::validation(format!("map needs exactly one goal, found {goals}")));
        }
        if !self.cells.contains(&Cell::Start) {
            return Err(Error::validation("map needs at least one start cell"));
        }
        if !self.cells.iter().any(|&c| c == Cell::Free || c == Cell::Start) {
            return Err(Error::validation("map has no free cells"));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.cols + col]
    }
}

impl fmt::Display for GridMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            for c in 0..self.cols {
                write!(f, "{}", self.cell(r, c).to_char())?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Moves in action order: up, down, left, right.
pub const MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

#[derive(Debug, Clone)]
pub struct Gridworld<T> {
    pub map: GridMap,
    pub mdp: TabularMdp<T>,
    /// (row, col) of each state; states are the non-wall cells in row-major order.
    pub cells: Vec<(usize, usize)>,
    state_at: Vec<Option<usize>>,
    pub goal: usize,
}

impl<T: Scalar> Gridworld<T> {
    pub fn state_at(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.map.rows || col >= self.map.cols {
            return None;
        }
        self.state_at[row * self.map.cols + col]
    }

    /// Wall-respecting shortest path lengths from `from` to every state
    /// (`None` when unreachable).
    pub fn path_lengths_from(&self, from: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.mdp.num_states()];
        dist[from] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(s) = queue.pop_front() {
            let here = dist[s].unwrap_or(0);
            for a in 0..self.mdp.num_actions() {
                let n = self.mdp.next_of_pair(self.mdp.pair_index(s, a));
                if dist[n].is_none() {
                    dist[n] = Some(here + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Path lengths *to* `target`, following moves backwards. Differs from
    /// [`Self::path_lengths_from`] only around absorbing cells.
    pub fn path_lengths_to(&self, target: usize) -> Vec<Option<usize>> {
        let n = self.mdp.num_states();
        let mut preds = vec![Vec::new(); n];
        for s in 0..n {
            if self.mdp.is_terminal(s) {
                continue;
            }
            for a in 0..self.mdp.num_actions() {
                let next = self.mdp.next_of_pair(self.mdp.pair_index(s, a));
                if next != s {
                    preds[next].push(s);
                }
            }
        }
        let mut dist = vec![None; n];
        dist[target] = Some(0);
        let mut queue = VecDeque::from([target]);
        while let Some(s) = queue.pop_front() {
            let here = dist[s].unwrap_or(0);
            for &p in &preds[s] {
                if dist[p].is_none() {
                    dist[p] = Some(here + 1);
                    queue.push_back(p);
                }
            }
        }
        dist
    }
}

/// Builds the gridworld MDP. Entering the goal pays `goal_reward` and ends
/// the episode; the goal is absorbing and pays `goal_reward` per step there.
pub fn build_gridworld<T: Scalar>(
    map: &GridMap,
    time_limit: usize,
    goal_reward: T,
) -> Result<Gridworld<T>> {
    build_gridworld_with(map, time_limit, goal_reward, goal_reward)
}

/// As [`build_gridworld`] with an explicit reward for acting inside the
/// absorbed goal.
pub fn build_gridworld_with<T: Scalar>(
    map: &GridMap,
    time_limit: usize,
    goal_reward: T,
    absorbing_reward: T,
) -> Result<Gridworld<T>> {
    map.validate()?;
    if !goal_reward.is_finite() || !absorbing_reward.is_finite() {
        return Err(Error::NonFinite("gridworld rewards".into()));
    }
    let mut state_at = vec![None; map.rows * map.cols];
    let mut cells = Vec::new();
    for r in 0..map.rows {
        for c in 0..map.cols {
            if map.cell(r, c) != Cell::Wall {
                state_at[r * map.cols + c] = Some(cells.len());
                cells.push((r, c));
            }
        }
    }
    let num_states = cells.len();
    let num_actions = MOVES.len();
    let mut next = Vec::with_capacity(num_states * num_actions);
    let mut reward = Vec::with_capacity(num_states * num_actions);
    let mut terminal = vec![false; num_states];
    let mut starts = Vec::new();
    let mut goal = 0;
    for (s, &(r, c)) in cells.iter().enumerate() {
        match map.cell(r, c) {
            Cell::Goal => {
                goal = s;
                terminal[s] = true;
            }
            Cell::Start => starts.push(s),
            _ => {}
        }
    }
    for (s, &(r, c)) in cells.iter().enumerate() {
        for &(dr, dc) in &MOVES {
            if s == goal {
                next.push(s);
                reward.push(absorbing_reward);
                continue;
            }
            let rr = r as isize + dr;
            let cc = c as isize + dc;
            let target = if rr < 0 || cc < 0 || rr >= map.rows as isize || cc >= map.cols as isize {
                None
            } else {
                state_at[rr as usize * map.cols + cc as usize]
            };
            // walls and the map edge are no-ops
            let n = target.unwrap_or(s);
            next.push(n);
            reward.push(if n == goal { goal_reward } else { T::zero() });
        }
    }
    let mdp = TabularMdp::new(num_states, num_actions, next, reward, terminal, time_limit, starts)?;
    Ok(Gridworld { map: map.clone(), mdp, cells, state_at, goal })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn open_room_shape() {
        let g = build_gridworld::<f64>(&GridMap::open_room(5, 5).unwrap(), 50, 1.0).unwrap();
        assert_eq!(g.mdp.num_states(), 25);
        assert_eq!(g.mdp.num_actions(), 4);
        let terminals = (0..25).filter(|&s| g.mdp.is_terminal(s)).count();
        assert_eq!(terminals, 1);
        assert_eq!(g.mdp.time_limit(), 50);
    }

    #[test]
    fn step_semantics() {
        let g = build_gridworld_with::<f64>(&GridMap::open_room(5, 5).unwrap(), 50, 1.0, 0.0)
            .unwrap();
        for a in 0..4 {
            let st = g.mdp.step(g.goal, a).unwrap();
            assert_eq!((st.next_state, st.reward, st.done), (g.goal, 0.0, true));
        }
        let s = g.state_at(1, 1).unwrap();
        let st = g.mdp.step(s, 3).unwrap();
        assert_eq!((st.next_state, st.reward, st.done), (g.state_at(1, 2).unwrap(), 0.0, false));
        // cell left of the goal, moving right
        let s = g.state_at(5, 4).unwrap();
        let st = g.mdp.step(s, 3).unwrap();
        assert_eq!((st.next_state, st.reward, st.done), (g.goal, 1.0, true));
    }

    #[test]
    fn default_goal_keeps_paying() {
        let g = build_gridworld::<f64>(&GridMap::two_room(), 50, 1.0).unwrap();
        let st = g.mdp.step(g.goal, 0).unwrap();
        assert_eq!((st.next_state, st.reward, st.done), (g.goal, 1.0, true));
    }

    #[test]
    fn walls_are_no_ops() {
        let map = GridMap::parse("#####\n#S..#\n###.#\n#..G#\n#####").unwrap();
        let g = build_gridworld::<f64>(&map, 50, 1.0).unwrap();
        let mut checked = 0;
        for (s, &(r, c)) in g.cells.iter().enumerate() {
            if s == g.goal {
                continue;
            }
            for (a, &(dr, dc)) in MOVES.iter().enumerate() {
                let (rr, cc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
                if map.cell(rr, cc) == Cell::Wall {
                    assert_eq!(g.mdp.step(s, a).unwrap().next_state, s);
                    checked += 1;
                }
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn malformed_maps() {
        assert!(GridMap::parse("###\n#S#\n###").is_err());
        assert!(GridMap::parse("###\n#G#\n###").is_err());
        assert!(GridMap::parse("####\n#SG\n####").is_err());
        assert!(GridMap::parse("#SGG#").is_err());
        assert!(GridMap::parse("#SGx#").is_err());
        assert!(GridMap::parse("").is_err());
    }

    #[test]
    fn display_round_trips() {
        let m = GridMap::two_room();
        assert_eq!(GridMap::parse(&m.to_string()).unwrap(), m);
    }
}
