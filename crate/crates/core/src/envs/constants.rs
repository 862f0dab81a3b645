//! Frozen simulator constants (world units, seconds).

/// Physics sub-step.
pub const DT: f64 = 0.05;
/// Spring constant of the tether once it is stretched past its length.
pub const TETHER_STIFFNESS: f64 = 8.0;
/// Slack length of the tether; also the ball's starting distance.
pub const TETHER_LENGTH: f64 = 0.4;
/// Linear drag on the ball.
pub const BALL_DAMPING: f64 = 0.9;
/// Linear drag on the cup. Large relative to its mass, so the cup's velocity
/// tracks the applied force within a few sub-steps.
pub const CUP_DAMPING: f64 = 4.0;
pub const CUP_MASS: f64 = 1.0;
pub const BALL_MASS: f64 = 0.5;
/// Force applied per unit of action.
pub const FORCE_SCALE: f64 = 2.0;
/// Ball-to-cup distance below which a catch sub-step is rewarded.
pub const CATCH_RADIUS: f64 = 0.1;
/// End-effector-to-target distance below which a reacher sub-step is rewarded.
pub const REACH_RADIUS: f64 = 0.12;
/// Range of reacher target distances from the origin at reset.
pub const REACH_TARGET_MIN: f64 = 0.3;
pub const REACH_TARGET_MAX: f64 = 0.8;
/// Positions are clamped to `[-ARENA_HALF_WIDTH, ARENA_HALF_WIDTH]^2`.
pub const ARENA_HALF_WIDTH: f64 = 1.0;

/// Frame colours (RGB in [0, 1]).
pub const BACKGROUND: [f64; 3] = [0.1, 0.1, 0.1];
pub const CUP_COLOR: [f64; 3] = [0.95, 0.35, 0.2];
pub const BALL_COLOR: [f64; 3] = [0.25, 0.6, 0.95];
