//! Balls: constant-velocity discs in a 50x50 box with elastic wall reflection.
//! Balls pass through each other.

use rand::Rng;

use super::frame::{Frame, FRAME_SIDE};
use crate::error::{Error, Result};

pub const ARENA: f64 = FRAME_SIDE as f64;
pub const MAX_VELOCITY: f64 = 2.0;
pub const MIN_SPEED: f64 = 0.5;

pub const BALL_COLORS: [[u8; 3]; 7] = [
    [230, 25, 25],
    [20, 200, 40],
    [30, 60, 235],
    [235, 220, 20],
    [160, 40, 200],
    [20, 210, 210],
    [240, 140, 20],
];

#[derive(Clone, Debug, PartialEq)]
pub struct BallState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub radius: f64,
}

impl BallState {
    pub fn num_balls(&self) -> usize {
        self.positions.len()
    }

    pub fn in_box(&self) -> bool {
        let lo = self.radius;
        let hi = ARENA - self.radius;
        self.positions
            .iter()
            .all(|p| p.iter().all(|&c| c >= lo && c <= hi))
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.velocities.iter().map(|v| v[0].hypot(v[1])).collect()
    }
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Non-overlapping uniform placement; velocities uniform in `[-2, 2]^2`,
/// resampled until the speed is at least 0.5.
pub fn balls_init<R: Rng>(num_balls: usize, radius: f64, rng: &mut R) -> Result<BallState> {
    if num_balls == 0 {
        return Err(Error::InvalidArgument("at least one ball is required".into()));
    }
    if !(radius > 0.0) || 2.0 * radius >= ARENA {
        return Err(Error::InvalidArgument(format!("radius {radius}")));
    }
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(num_balls);
    for _ in 0..num_balls {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let p = [
                rng.gen_range(radius..=ARENA - radius),
                rng.gen_range(radius..=ARENA - radius),
            ];
            let clear = positions
                .iter()
                .all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= 2.0 * radius);
            if clear {
                positions.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Capacity(format!(
                "could not place {num_balls} balls of radius {radius} without overlap"
            )));
        }
    }
    let velocities = (0..num_balls)
        .map(|_| loop {
            let v = [
                rng.gen_range(-MAX_VELOCITY..=MAX_VELOCITY),
                rng.gen_range(-MAX_VELOCITY..=MAX_VELOCITY),
            ];
            if v[0].hypot(v[1]) >= MIN_SPEED {
                break v;
            }
        })
        .collect();
    Ok(BallState {
        positions,
        velocities,
        radius,
    })
}

/// Advances every ball by its velocity, reflecting about the wall planes
/// `radius` and `50 - radius`.
pub fn balls_step(state: &BallState) -> BallState {
    let lo = state.radius;
    let hi = ARENA - state.radius;
    let mut next = state.clone();
    for (p, v) in next.positions.iter_mut().zip(next.velocities.iter_mut()) {
        for axis in 0..2 {
            let mut x = p[axis] + v[axis];
            // speeds never exceed the free span, so one reflection per step suffices
            if x < lo {
                x = 2.0 * lo - x;
                v[axis] = -v[axis];
            } else if x > hi {
                x = 2.0 * hi - x;
                v[axis] = -v[axis];
            }
            p[axis] = x;
        }
    }
    next
}

/// Filled discs in fixed per-index colors on black; later balls paint over earlier ones.
pub fn balls_render(state: &BallState) -> Frame {
    let mut frame = Frame::black();
    let r2 = state.radius * state.radius;
    for (i, p) in state.positions.iter().enumerate() {
        let rgb = BALL_COLORS[i % BALL_COLORS.len()];
        let x0 = (p[0] - state.radius).floor().max(0.0) as usize;
        let x1 = ((p[0] + state.radius).ceil() as usize).min(FRAME_SIDE);
        let y0 = (p[1] - state.radius).floor().max(0.0) as usize;
        let y1 = ((p[1] + state.radius).ceil() as usize).min(FRAME_SIDE);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - p[0];
                let dy = y as f64 + 0.5 - p[1];
                if dx * dx + dy * dy <= r2 {
                    frame.set(x, y, rgb);
                }
            }
        }
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_contract() {
        let a = balls_init(3, 4.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = balls_init(3, 4.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        for seed in 0..200 {
            let s = balls_init(3, 4.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for i in 0..3 {
                for j in i + 1..3 {
                    let d = (s.positions[i][0] - s.positions[j][0]).hypot(s.positions[i][1] - s.positions[j][1]);
                    assert!(d >= 8.0);
                }
            }
            for v in s.speeds() {
                assert!((0.5..=2.0 * 2f64.sqrt()).contains(&v));
            }
            assert!(s.in_box());
        }
    }

    #[test]
    fn crowded_arena_is_a_capacity_error() {
        let err = balls_init(40, 20.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Capacity(_) | Error::InvalidArgument(_)));
        let err = balls_init(30, 6.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn free_flight() {
        let s = BallState {
            positions: vec![[10.0, 10.0]],
            velocities: vec![[1.0, -2.0]],
            radius: 4.0,
        };
        let n = balls_step(&s);
        assert_eq!(n.positions[0], [11.0, 8.0]);
        assert_eq!(n.velocities[0], [1.0, -2.0]);
    }

    #[test]
    fn wall_reflection() {
        let r = 4.0;
        let s = BallState {
            positions: vec![[r + 1.0, 20.0]],
            velocities: vec![[-2.0, 0.0]],
            radius: r,
        };
        let n = balls_step(&s);
        // x' = 2r - (x + vx)
        assert_eq!(n.positions[0][0], 2.0 * r - (r + 1.0 - 2.0));
        assert_eq!(n.positions[0][0], r + 1.0);
        assert_eq!(n.velocities[0][0], 2.0);
    }

    #[test]
    fn render_empty_and_deterministic() {
        let empty = BallState {
            positions: vec![],
            velocities: vec![],
            radius: 4.0,
        };
        assert!(balls_render(&empty).pixels().iter().all(|&p| p == 0));
        let s = balls_init(3, 4.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(balls_render(&s), balls_render(&s));
    }
}
