mod common;

use dds_core::datastore::encode_dataset;
use dds_core::env::{Env, MEDIUM_MAZE};
use dds_core::runtime::{generate, RunConfig};
use dds_core::scripts::{goal_reaching_from_start, replay_rewards};
use proptest::prelude::*;

/// Steps taken by a noiseless waypoint follower along the shortest cell path
/// from the start to the goal, using only the public dynamics.
fn scripted_solver_steps(env: &Env) -> Option<usize> {
    let maze = env.maze()?;
    let path = maze.layout.shortest_path(maze.layout.start, maze.layout.goal)?;
    let mut st = env.reset();
    let mut next = 1;
    for t in 0..env.spec().max_steps {
        let [wx, wy] = path[next].center();
        let (dx, dy) = (wx - st.obs[0], wy - st.obs[1]);
        let d = (dx * dx + dy * dy).sqrt();
        if d < 0.2 && next + 1 < path.len() {
            next += 1;
        }
        let speed = 0.15;
        let k = if d > speed { speed / d } else { 1.0 };
        let ax = ((dx * k - maze.damping * st.obs[2]) / maze.accel).clamp(-1.0, 1.0);
        let ay = ((dy * k - maze.damping * st.obs[3]) / maze.accel).clamp(-1.0, 1.0);
        let step = env.step(&mut st, &[ax, ay]).ok()?;
        if step.terminal {
            return Some(t + 1);
        }
        if step.done {
            return None;
        }
    }
    None
}

#[test]
fn bundled_maze_admits_a_short_composite_path() {
    let env = Env::by_name("medium-maze").unwrap();
    let steps = scripted_solver_steps(&env).expect("solver reaches the goal");
    assert!(steps <= 200, "{steps} steps");
    assert_eq!(steps, 95, "pinned solver length changed");
    assert!(MEDIUM_MAZE.contains('S') && MEDIUM_MAZE.contains('G'));
}

#[test]
fn stitching_data_rarely_reaches_the_goal_from_the_start() {
    let cfg = RunConfig::desk();
    let env = cfg.env().unwrap();
    let ds = generate(&cfg).unwrap();
    let (hit, from_start) = goal_reaching_from_start(&env, &ds);
    assert!(from_start > 0);
    assert!((hit as f64) < 0.05 * from_start as f64, "{hit} of {from_start} start episodes reach the goal");
    assert!(ds.episodes.iter().any(|e| e.is_terminal()), "the goal must appear somewhere in the data");
    for ep in ds.episodes.iter().step_by(97) {
        assert_eq!(replay_rewards(&env, ep).unwrap(), ep.rewards);
    }
}

#[test]
fn generated_file_is_byte_identical_for_a_seed() {
    let mut cfg = RunConfig::desk();
    cfg.data.episodes = 50;
    let a = encode_dataset(&generate(&cfg).unwrap()).unwrap();
    let b = encode_dataset(&generate(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    cfg.seed += 1;
    assert_ne!(a, encode_dataset(&generate(&cfg).unwrap()).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_agent_never_enters_walls(actions in prop::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 1..300)) {
        let env = Env::by_name("medium-maze").unwrap();
        let maze = env.maze().unwrap();
        let mut st = env.reset();
        let mut again = env.reset();
        for (ax, ay) in actions {
            if st.done {
                break;
            }
            let s = env.step(&mut st, &[ax, ay]).unwrap();
            let s2 = env.step(&mut again, &[ax, ay]).unwrap();
            prop_assert_eq!(&s.obs, &s2.obs);
            let (x, y) = (s.obs[0], s.obs[1]);
            for (px, py) in [(x - maze.radius + 1e-9, y), (x + maze.radius - 1e-9, y), (x, y - maze.radius + 1e-9), (x, y + maze.radius - 1e-9)] {
                let c = maze.layout.cell_of(px, py);
                prop_assert!(!maze.layout.is_wall(c.row as isize, c.col as isize), "agent overlaps a wall at {:?}", s.obs);
            }
        }
        prop_assert!(st.clamped_actions <= st.t);
    }
}
