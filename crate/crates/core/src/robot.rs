//! Symbolic two-arm world driven by decoded commands.
//!
//! Each vibrator maps to one arm action. A command whose precondition fails
//! leaves the world untouched and yields a [`Rejection`]; rejections are
//! ordinary values, the functional task simply carries on.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::stim::{VibratorId, N_VIBRATORS};

pub const BFS_STATE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmId {
    Arm1,
    Arm2,
}

impl ArmId {
    fn idx(self) -> usize {
        match self {
            ArmId::Arm1 => 0,
            ArmId::Arm2 => 1,
        }
    }

    fn other(self) -> ArmId {
        match self {
            ArmId::Arm1 => ArmId::Arm2,
            ArmId::Arm2 => ArmId::Arm1,
        }
    }
}

impl fmt::Display for ArmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArmId::Arm1 => "arm 1",
            ArmId::Arm2 => "arm 2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pose {
    Home,
    AtPickup,
    AtDropoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holding {
    Nothing,
    Cup,
    Straw,
    Ball,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArmState {
    pub pose: Pose,
    pub holding: Holding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CupPlace {
    OnTable,
    Held,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CupState {
    pub place: CupPlace,
    pub has_straw: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrawState {
    AtRest,
    Held,
    InCup,
}

/// Balls are interchangeable, so they are tracked by count per place.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Balls {
    pub at_pickup: u32,
    pub held: u32,
    pub delivered: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub arms: [ArmState; 2],
    pub cup: CupState,
    pub straw: StrawState,
    pub balls: Balls,
}

impl WorldState {
    pub fn new(n_balls: u32) -> Self {
        let home = ArmState { pose: Pose::Home, holding: Holding::Nothing };
        Self {
            arms: [home; 2],
            cup: CupState { place: CupPlace::OnTable, has_straw: false },
            straw: StrawState::AtRest,
            balls: Balls { at_pickup: n_balls, held: 0, delivered: 0 },
        }
    }

    pub fn arm(&self, arm: ArmId) -> &ArmState {
        &self.arms[arm.idx()]
    }

    fn arm_mut(&mut self, arm: ArmId) -> &mut ArmState {
        &mut self.arms[arm.idx()]
    }

    fn holders(&self, what: Holding) -> usize {
        self.arms.iter().filter(|a| a.holding == what).count()
    }

    /// Violated holding invariants, empty when the world is consistent.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let cup_holders = self.holders(Holding::Cup);
        if cup_holders > 1 || (cup_holders == 1) != (self.cup.place == CupPlace::Held) {
            out.push("cup must be held by exactly the arm holding it".to_string());
        }
        let straw_holders = self.holders(Holding::Straw);
        if straw_holders > 1 || (straw_holders == 1) != (self.straw == StrawState::Held) {
            out.push("straw must be held by exactly the arm holding it".to_string());
        }
        if self.cup.has_straw != (self.straw == StrawState::InCup) {
            out.push("cup has_straw must match straw in_cup".to_string());
        }
        if self.holders(Holding::Ball) as u32 != self.balls.held {
            out.push("held ball count must match arms holding a ball".to_string());
        }
        if self.arms.iter().filter(|a| a.pose == Pose::AtPickup).count() > 1 {
            out.push("at most one arm at the pickup point".to_string());
        }
        out
    }
}

impl Default for WorldState {
    fn default() -> Self {
        Self::new(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "action", content = "arm", rename_all = "snake_case")]
pub enum Action {
    /// Home, empty-handed, pickup point free: move there.
    MoveToPickup(ArmId),
    /// At the pickup point with a ball there: grasp it and return home.
    GraspBallReturn(ArmId),
    /// Home, empty, cup on the table: pick the cup up.
    PickUpCup(ArmId),
    /// The other arm holds the cup and the straw is at rest: grasp the
    /// straw and drop it into the cup.
    PlaceStrawInCup(ArmId),
    /// Holding the cup with the straw in it: put the cup down.
    PlaceCupDown(ArmId),
    /// Home, empty, while the other arm is home holding a ball: take the
    /// ball over and carry it to the drop-off point.
    TakeBallToDropoff(ArmId),
    /// At the drop-off point holding a ball: release it and return home.
    ReleaseBallReturn(ArmId),
    NoOp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub command: VibratorId,
    pub action: Action,
    pub reason: String,
}

fn reject(command: VibratorId, action: Action, reason: impl Into<String>) -> Rejection {
    Rejection { command, action, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Goal {
    /// Some arm is home holding a ball.
    BallRetrieved,
    /// Straw in the cup and the cup back on the table.
    StrawInCupOnTable,
    /// `balls` delivered with both arms home and empty.
    Delivered { balls: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskScript {
    pub name: String,
    /// Action of vibrator 1..=4.
    pub command_map: [Action; N_VIBRATORS],
    pub initial: WorldState,
    pub goal: Goal,
}

impl TaskScript {
    pub fn action(&self, command: VibratorId) -> Action {
        self.command_map[command.slot()]
    }

    pub fn goal_reached(&self, world: &WorldState) -> bool {
        match self.goal {
            Goal::BallRetrieved => world.arms.iter().any(|a| a.pose == Pose::Home && a.holding == Holding::Ball),
            Goal::StrawInCupOnTable => world.cup.place == CupPlace::OnTable && world.straw == StrawState::InCup,
            Goal::Delivered { balls } => {
                world.balls.delivered >= balls
                    && world.arms.iter().all(|a| a.pose == Pose::Home && a.holding == Holding::Nothing)
            }
        }
    }

    /// Commands the script would currently accept.
    pub fn legal_commands(&self, world: &WorldState) -> Vec<VibratorId> {
        VibratorId::ALL.into_iter().filter(|&c| apply_command(world, self, c).is_ok()).collect()
    }
}

/// Ball grasping with free arm choice. The per-vibrator assignment follows
/// the demonstration trace: vibrator 1 sends arm 2 to the pickup point and
/// vibrator 2 makes it grasp and return; 3 and 4 do the same for arm 1.
pub fn ball_grasp() -> TaskScript {
    TaskScript {
        name: "ball_grasp".into(),
        command_map: [
            Action::MoveToPickup(ArmId::Arm2),
            Action::GraspBallReturn(ArmId::Arm2),
            Action::MoveToPickup(ArmId::Arm1),
            Action::GraspBallReturn(ArmId::Arm1),
        ],
        initial: WorldState::new(1),
        goal: Goal::BallRetrieved,
    }
}

/// Arm 1 picks up the cup, arm 2 drops the straw in, arm 1 puts the cup
/// down. Vibrator 4 has no action.
pub fn straw_in_cup() -> TaskScript {
    TaskScript {
        name: "straw_in_cup".into(),
        command_map: [
            Action::PickUpCup(ArmId::Arm1),
            Action::PlaceStrawInCup(ArmId::Arm2),
            Action::PlaceCupDown(ArmId::Arm1),
            Action::NoOp,
        ],
        initial: WorldState::new(0),
        goal: Goal::StrawInCupOnTable,
    }
}

/// Arm 1 fetches a ball and returns home, arm 2 takes it to the drop-off
/// point and comes back; repeated `cycles` times. The arm roles come from
/// the workflow description; the command order within a cycle is 1, 2, 3, 4.
pub fn dual_arm_cycle(cycles: u32) -> TaskScript {
    TaskScript {
        name: "dual_arm_cycle".into(),
        command_map: [
            Action::MoveToPickup(ArmId::Arm1),
            Action::GraspBallReturn(ArmId::Arm1),
            Action::TakeBallToDropoff(ArmId::Arm2),
            Action::ReleaseBallReturn(ArmId::Arm2),
        ],
        initial: WorldState::new(cycles),
        goal: Goal::Delivered { balls: cycles },
    }
}

pub fn builtin_scripts() -> Vec<TaskScript> {
    vec![ball_grasp(), straw_in_cup(), dual_arm_cycle(2)]
}

pub fn script_by_name(name: &str, cycles: u32) -> Option<TaskScript> {
    match name {
        "ball_grasp" => Some(ball_grasp()),
        "straw_in_cup" => Some(straw_in_cup()),
        "dual_arm_cycle" => Some(dual_arm_cycle(cycles)),
        _ => None,
    }
}

pub fn apply_command(world: &WorldState, script: &TaskScript, command: VibratorId) -> Result<WorldState, Rejection> {
    let action = script.action(command);
    let no = |reason: &str| Err(reject(command, action, reason));
    let mut w = *world;
    match action {
        Action::NoOp => return no("no action is bound to this command"),
        Action::MoveToPickup(arm) => {
            let a = *w.arm(arm);
            if a.pose != Pose::Home || a.holding != Holding::Nothing {
                return no("arm must be home and empty");
            }
            if w.arm(arm.other()).pose == Pose::AtPickup {
                return no("pickup point occupied by the other arm");
            }
            w.arm_mut(arm).pose = Pose::AtPickup;
        }
        Action::GraspBallReturn(arm) => {
            let a = *w.arm(arm);
            if a.pose != Pose::AtPickup || a.holding != Holding::Nothing {
                return no("arm must be empty at the pickup point");
            }
            if w.balls.at_pickup == 0 {
                return no("no ball at the pickup point");
            }
            w.balls.at_pickup -= 1;
            w.balls.held += 1;
            *w.arm_mut(arm) = ArmState { pose: Pose::Home, holding: Holding::Ball };
        }
        Action::PickUpCup(arm) => {
            let a = *w.arm(arm);
            if a.pose != Pose::Home || a.holding != Holding::Nothing {
                return no("arm must be home and empty");
            }
            if w.cup.place != CupPlace::OnTable {
                return no("cup is not on the table");
            }
            w.cup.place = CupPlace::Held;
            w.arm_mut(arm).holding = Holding::Cup;
        }
        Action::PlaceStrawInCup(arm) => {
            if w.arm(arm.other()).holding != Holding::Cup {
                return no("the other arm must hold the cup");
            }
            if w.arm(arm).holding != Holding::Nothing {
                return no("arm must be empty");
            }
            if w.straw != StrawState::AtRest {
                return no("straw is not available");
            }
            w.straw = StrawState::InCup;
            w.cup.has_straw = true;
        }
        Action::PlaceCupDown(arm) => {
            if w.arm(arm).holding != Holding::Cup {
                return no("arm is not holding the cup");
            }
            if !w.cup.has_straw {
                return no("straw must be in the cup first");
            }
            w.cup.place = CupPlace::OnTable;
            w.arm_mut(arm).holding = Holding::Nothing;
        }
        Action::TakeBallToDropoff(arm) => {
            let a = *w.arm(arm);
            if a.pose != Pose::Home || a.holding != Holding::Nothing {
                return no("arm must be home and empty");
            }
            let giver = *w.arm(arm.other());
            if giver.pose != Pose::Home || giver.holding != Holding::Ball {
                return no("the other arm must be home holding a ball");
            }
            w.arm_mut(arm.other()).holding = Holding::Nothing;
            *w.arm_mut(arm) = ArmState { pose: Pose::AtDropoff, holding: Holding::Ball };
        }
        Action::ReleaseBallReturn(arm) => {
            let a = *w.arm(arm);
            if a.pose != Pose::AtDropoff || a.holding != Holding::Ball {
                return no("arm must hold a ball at the drop-off point");
            }
            w.balls.held -= 1;
            w.balls.delivered += 1;
            *w.arm_mut(arm) = ArmState { pose: Pose::Home, holding: Holding::Nothing };
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    /// Commands accepted before the first rejection.
    pub accepted_prefix: usize,
    /// (position, rejection) for every rejected command.
    pub violations: Vec<(usize, Rejection)>,
    pub goal_reached: bool,
    pub final_world: WorldState,
}

/// Replay commands from the script's initial world; rejected commands leave
/// the world unchanged and replay continues.
pub fn validate_sequence(script: &TaskScript, commands: &[VibratorId]) -> SequenceReport {
    let mut world = script.initial;
    let mut violations = Vec::new();
    for (i, &c) in commands.iter().enumerate() {
        match apply_command(&world, script, c) {
            Ok(w) => world = w,
            Err(r) => violations.push((i, r)),
        }
    }
    SequenceReport {
        accepted_prefix: violations.first().map_or(commands.len(), |v| v.0),
        violations,
        goal_reached: script.goal_reached(&world),
        final_world: world,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityReport {
    pub states: usize,
    pub truncated: bool,
    /// Reachable worlds breaking a holding invariant, with the violations.
    pub unsafe_states: Vec<(WorldState, Vec<String>)>,
    /// Shortest command sequence reaching the goal.
    pub shortest_plan: Option<Vec<VibratorId>>,
}

/// Breadth-first sweep of every world reachable from the initial state.
pub fn explore(script: &TaskScript, limit: usize) -> ReachabilityReport {
    explore_from(script, &script.initial, limit)
}

/// Shortest command sequence from `world` to the script's goal.
pub fn plan_from(script: &TaskScript, world: &WorldState) -> Option<Vec<VibratorId>> {
    explore_from(script, world, BFS_STATE_LIMIT).shortest_plan
}

pub fn explore_from(script: &TaskScript, start: &WorldState, limit: usize) -> ReachabilityReport {
    let mut seen: HashSet<WorldState> = HashSet::new();
    let mut queue: VecDeque<(WorldState, Vec<VibratorId>)> = VecDeque::new();
    let mut unsafe_states = Vec::new();
    let mut shortest_plan = None;
    let mut truncated = false;
    seen.insert(*start);
    queue.push_back((*start, Vec::new()));
    while let Some((w, path)) = queue.pop_front() {
        let bad = w.invariant_violations();
        if !bad.is_empty() {
            unsafe_states.push((w, bad));
        }
        if shortest_plan.is_none() && script.goal_reached(&w) {
            shortest_plan = Some(path.clone());
        }
        for c in VibratorId::ALL {
            if let Ok(next) = apply_command(&w, script, c) {
                if seen.contains(&next) {
                    continue;
                }
                if seen.len() >= limit {
                    truncated = true;
                    continue;
                }
                seen.insert(next);
                let mut p = path.clone();
                p.push(c);
                queue.push_back((next, p));
            }
        }
    }
    ReachabilityReport { states: seen.len(), truncated, unsafe_states, shortest_plan }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmds(xs: &[u8]) -> Vec<VibratorId> {
        xs.iter().map(|&x| VibratorId::new(x).unwrap()).collect()
    }

    #[test]
    fn straw_task_sequence() {
        let s = straw_in_cup();
        let w = apply_command(&s.initial, &s, cmds(&[1])[0]).unwrap();
        assert_eq!(w.arm(ArmId::Arm1).holding, Holding::Cup);
        let r = apply_command(&s.initial, &s, cmds(&[2])[0]).unwrap_err();
        assert!(r.reason.contains("cup"));
        let ok = validate_sequence(&s, &cmds(&[1, 2, 3]));
        assert!(ok.goal_reached && ok.violations.is_empty() && ok.accepted_prefix == 3);
        let twice = validate_sequence(&s, &cmds(&[1, 1]));
        assert_eq!(twice.accepted_prefix, 1);
        assert_eq!(twice.violations[0].0, 1);
        let empty = validate_sequence(&s, &[]);
        assert!(!empty.goal_reached && empty.accepted_prefix == 0);
    }

    #[test]
    fn straw_task_rejects_every_out_of_order_permutation() {
        let s = straw_in_cup();
        for p in [[1, 3, 2], [2, 1, 3], [2, 3, 1], [3, 1, 2], [3, 2, 1]] {
            let r = validate_sequence(&s, &cmds(&p));
            assert!(!r.violations.is_empty(), "{p:?}");
            assert!(r.accepted_prefix < 3);
        }
    }

    #[test]
    fn command_four_is_a_recorded_noop() {
        let s = straw_in_cup();
        let r = apply_command(&s.initial, &s, cmds(&[4])[0]).unwrap_err();
        assert_eq!(r.action, Action::NoOp);
        let covered: Vec<_> = s.command_map.iter().filter(|a| **a != Action::NoOp).collect();
        assert_eq!(covered.len(), 3);
    }

    #[test]
    fn ball_grasp_either_arm_move_then_grasp() {
        let s = ball_grasp();
        assert!(validate_sequence(&s, &cmds(&[1, 2])).goal_reached);
        assert!(validate_sequence(&s, &cmds(&[3, 4])).goal_reached);
        let wrong = validate_sequence(&s, &cmds(&[2]));
        assert_eq!(wrong.accepted_prefix, 0);
        // arm 2 at the pickup point blocks arm 1 from going there too
        let blocked = validate_sequence(&s, &cmds(&[1, 3]));
        assert_eq!(blocked.violations.len(), 1);
    }

    #[test]
    fn dual_cycle_delivers_balls() {
        let s = dual_arm_cycle(2);
        let r = validate_sequence(&s, &cmds(&[1, 2, 3, 4, 1, 2, 3, 4]));
        assert!(r.goal_reached && r.violations.is_empty());
        assert_eq!(r.final_world.balls.delivered, 2);
        assert!(r.final_world.arms.iter().all(|a| a.pose == Pose::Home));
        assert!(!validate_sequence(&s, &cmds(&[1, 2, 3, 4])).goal_reached);
    }

    #[test]
    fn bfs_safety_and_reachability() {
        for s in builtin_scripts().into_iter().chain([dual_arm_cycle(5)]) {
            let r = explore(&s, BFS_STATE_LIMIT);
            assert!(!r.truncated, "{}", s.name);
            assert!(r.unsafe_states.is_empty(), "{}: {:?}", s.name, r.unsafe_states);
            let plan = r.shortest_plan.expect("goal reachable");
            assert!(validate_sequence(&s, &plan).goal_reached);
        }
        assert_eq!(explore(&straw_in_cup(), BFS_STATE_LIMIT).shortest_plan.unwrap(), cmds(&[1, 2, 3]));
    }

    #[test]
    fn apply_is_pure() {
        let s = dual_arm_cycle(3);
        let w = s.initial;
        for c in VibratorId::ALL {
            assert_eq!(apply_command(&w, &s, c), apply_command(&w, &s, c));
        }
        assert_eq!(w, s.initial);
    }

    #[test]
    fn legal_commands_hint() {
        let s = straw_in_cup();
        assert_eq!(s.legal_commands(&s.initial), cmds(&[1]));
        let w = apply_command(&s.initial, &s, cmds(&[1])[0]).unwrap();
        assert_eq!(s.legal_commands(&w), cmds(&[2]));
    }

    #[test]
    fn world_serializes() {
        let w = dual_arm_cycle(2).initial;
        let text = serde_json::to_string(&w).unwrap();
        assert_eq!(serde_json::from_str::<WorldState>(&text).unwrap(), w);
        let a = serde_json::to_string(&Action::PickUpCup(ArmId::Arm1)).unwrap();
        assert_eq!(a, r#"{"action":"pick_up_cup","arm":"arm1"}"#);
    }
}
