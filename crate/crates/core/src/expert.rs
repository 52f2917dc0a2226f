//! Shortest-path navigation for scripted controllers.
//!
//! Breadth-first search over walkable tiles with the neighbour order shuffled
//! on every call, so equal-length paths are chosen at random (seeded).

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::gridworld::{Action, Dir, Move, Pos, Turn, WorldState};

/// First step of a shortest route to a tile adjacent to `target`, ending with
/// the agent facing it. `None` once the agent already faces `target` or when
/// no route exists.
pub fn step_toward_facing<R: Rng + ?Sized>(
    state: &WorldState,
    target: Pos,
    rng: &mut R,
) -> Option<Action> {
    let agent = state.agent.pos;
    if agent.offset(state.agent.facing) == target {
        return None;
    }
    if agent.manhattan(target) == 1 {
        return Some(face(state, target));
    }
    let first = first_move(state, |p| p.manhattan(target) == 1, rng)?;
    Some(Action::moving(Move::from_dir(first)))
}

/// First step of a shortest route onto any tile satisfying `goal`.
pub fn step_toward<R: Rng + ?Sized>(
    state: &WorldState,
    goal: impl Fn(Pos) -> bool,
    rng: &mut R,
) -> Option<Action> {
    if goal(state.agent.pos) {
        return None;
    }
    first_move(state, goal, rng).map(|d| Action::moving(Move::from_dir(d)))
}

/// Single action that turns the agent toward an adjacent tile. Moving into a
/// blocked tile only changes the facing; a walkable tile needs turns instead.
fn face(state: &WorldState, target: Pos) -> Action {
    let dir = Dir::ALL
        .into_iter()
        .find(|d| state.agent.pos.offset(*d) == target)
        .expect("target is adjacent");
    if !state.is_walkable(target) {
        return Action::moving(Move::from_dir(dir));
    }
    let turn = if state.agent.facing.cw() == dir {
        Turn::Cw
    } else {
        Turn::Ccw
    };
    Action {
        turn,
        ..Action::NOOP
    }
}

fn first_move<R: Rng + ?Sized>(
    state: &WorldState,
    goal: impl Fn(Pos) -> bool,
    rng: &mut R,
) -> Option<Dir> {
    let w = state.width as usize;
    let idx = |p: Pos| p.y as usize * w + p.x as usize;
    let start = state.agent.pos;
    let mut first: Vec<Option<Dir>> = vec![None; w * state.height as usize];
    let mut seen = vec![false; first.len()];
    seen[idx(start)] = true;
    let mut queue = VecDeque::from([start]);
    let mut dirs = Dir::ALL;
    while let Some(p) = queue.pop_front() {
        dirs.shuffle(rng);
        for d in dirs {
            let q = p.offset(d);
            if !state.in_bounds(q) || seen[idx(q)] || !state.is_walkable(q) {
                continue;
            }
            seen[idx(q)] = true;
            first[idx(q)] = if p == start { Some(d) } else { first[idx(p)] };
            if goal(q) {
                return first[idx(q)];
            }
            queue.push_back(q);
        }
    }
    None
}
