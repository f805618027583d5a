//! Point-mass Circle environment.
//!
//! A deterministic double integrator on the plane. The agent is rewarded for
//! circulating counter-clockwise around the origin near a circle of radius
//! `d_circle`, while the safe set is the axis-aligned box
//! `|x| <= x_max, |y| <= y_max`. Leaving the box ends the episode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Physical and constraint parameters of one environment instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvParams {
    pub m: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub d_circle: f64,
    pub dt: f64,
    pub horizon: usize,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self::target()
    }
}

impl EnvParams {
    /// The target instance used for transfer experiments.
    pub fn target() -> Self {
        Self {
            m: 1.0,
            v_max: 2.0,
            a_max: 1.0,
            x_max: 2.5,
            y_max: 15.0,
            d_circle: 10.0,
            dt: 0.05,
            horizon: 300,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("v_max", self.v_max),
            ("a_max", self.a_max),
            ("x_max", self.x_max),
            ("y_max", self.y_max),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("env.{name} must be finite and > 0, got {v}")));
            }
        }
        if self.horizon < 1 {
            return Err(Error::Config("env.horizon must be >= 1".into()));
        }
        if !(self.d_circle.is_finite() && self.d_circle > self.x_max) {
            return Err(Error::Config(format!(
                "env.d_circle ({}) must exceed env.x_max ({})",
                self.d_circle, self.x_max
            )));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 8] =
        ["m", "v_max", "a_max", "x_max", "y_max", "d_circle", "dt", "horizon"];

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("m", self.m);
        kv.insert("v_max", self.v_max);
        kv.insert("a_max", self.a_max);
        kv.insert("x_max", self.x_max);
        kv.insert("y_max", self.y_max);
        kv.insert("d_circle", self.d_circle);
        kv.insert("dt", self.dt);
        kv.insert("horizon", self.horizon);
        kv
    }

    /// Flat text block, one `key = value` line per field in declaration order.
    pub fn to_text(&self) -> String {
        let kv = self.to_kv();
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", kv.get_raw(k).unwrap_or_default()))
            .collect()
    }

    /// Reads every key; all eight must be present.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let p = Self {
            m: kv.require("m")?,
            v_max: kv.require("v_max")?,
            a_max: kv.require("a_max")?,
            x_max: kv.require("x_max")?,
            y_max: kv.require("y_max")?,
            d_circle: kv.require("d_circle")?,
            dt: kv.require("dt")?,
            horizon: kv.require("horizon")?,
        };
        p.validate()?;
        Ok(p)
    }

    /// Starts from `self` and overrides whichever keys are present.
    pub fn overridden(&self, kv: &KvMap) -> Result<Self> {
        let mut p = *self;
        kv.read_into("m", &mut p.m)?;
        kv.read_into("v_max", &mut p.v_max)?;
        kv.read_into("a_max", &mut p.a_max)?;
        kv.read_into("x_max", &mut p.x_max)?;
        kv.read_into("y_max", &mut p.y_max)?;
        kv.read_into("d_circle", &mut p.d_circle)?;
        kv.read_into("dt", &mut p.dt)?;
        kv.read_into("horizon", &mut p.horizon)?;
        p.validate()?;
        Ok(p)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl State {
    pub const DIM: usize = 4;

    pub fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        Self { x, y, vx, vy }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.vx, self.vy]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Action {
    pub ax: f64,
    pub ay: f64,
}

impl Action {
    pub const DIM: usize = 2;

    pub fn new(ax: f64, ay: f64) -> Self {
        Self { ax, ay }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { ax: v[0], ay: v[1] }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.ax, self.ay]
    }

    /// Component-wise clip to `[-a_max, a_max]`.
    pub fn clipped(self, a_max: f64) -> Self {
        Self {
            ax: self.ax.clamp(-a_max, a_max),
            ay: self.ay.clamp(-a_max, a_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    pub reward: f64,
    pub cost: f64,
    pub violated: bool,
    pub done: bool,
}

pub fn is_safe(params: &EnvParams, s: &State) -> bool {
    s.x.abs() <= params.x_max && s.y.abs() <= params.y_max
}

/// Initial state: zero velocity, position uniform on the disc of radius 0.1.
pub fn reset(_params: &EnvParams, rng: &mut ChaCha8Rng) -> State {
    let r = 0.1 * rng.random::<f64>().sqrt();
    let theta = std::f64::consts::TAU * rng.random::<f64>();
    State::new(r * theta.cos(), r * theta.sin(), 0.0, 0.0)
}

/// Semi-implicit Euler step. `done` is only raised by a violation; callers
/// enforce the horizon.
pub fn step(params: &EnvParams, s: &State, a: &Action) -> Result<StepResult> {
    if !(a.ax.is_finite() && a.ay.is_finite()) {
        return Err(Error::Domain(format!("non-finite action ({}, {})", a.ax, a.ay)));
    }
    let a = a.clipped(params.a_max);
    let vx = (s.vx + a.ax / params.m * params.dt).clamp(-params.v_max, params.v_max);
    let vy = (s.vy + a.ay / params.m * params.dt).clamp(-params.v_max, params.v_max);
    let next = State::new(s.x + vx * params.dt, s.y + vy * params.dt, vx, vy);

    let violated = !is_safe(params, &next);
    let reward = if violated {
        0.0
    } else {
        let radius = (s.x * s.x + s.y * s.y).sqrt();
        (-s.y * vx + s.x * vy) / (1.0 + (radius - params.d_circle).abs())
    };
    Ok(StepResult {
        next_state: next,
        reward,
        cost: cost_hinge(params, &next, crate::DEFAULT_ALPHA),
        violated,
        done: violated,
    })
}

/// Distance from `s` to the unsafe set, zero outside the safe box.
pub fn dist_to_unsafe(params: &EnvParams, s: &State) -> f64 {
    let m = (params.x_max - s.x)
        .min(params.x_max + s.x)
        .min(params.y_max - s.y)
        .min(params.y_max + s.y);
    m.max(0.0)
}

/// Hinge cost of the distance to the unsafe set; the violation indicator when
/// `alpha == 0`.
pub fn cost_hinge(params: &EnvParams, s: &State, alpha: f64) -> f64 {
    let dist = dist_to_unsafe(params, s);
    if alpha == 0.0 {
        if dist == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - dist / alpha).max(0.0)
    }
}

/// Closed sampling interval for one environment factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.low == self.high {
            self.low
        } else {
            rng.random_range(self.low..=self.high)
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite()) || self.low > self.high {
            return Err(Error::Config(format!(
                "range `{name}` is empty or inverted: [{}, {}]",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Sampling ranges for source instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRanges {
    pub m: Range,
    pub x_max: Range,
    pub y_max: Range,
    pub v_max: Range,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            m: Range::new(0.5, 1.5),
            x_max: Range::new(0.5, 3.5),
            y_max: Range::new(5.0, 25.0),
            v_max: Range::new(1.0, 3.0),
        }
    }
}

impl ParamRanges {
    /// Reads `<factor>.low` / `<factor>.high` pairs, keeping defaults for
    /// absent factors.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut r = Self::default();
        for (name, slot) in [
            ("m", &mut r.m),
            ("x_max", &mut r.x_max),
            ("y_max", &mut r.y_max),
            ("v_max", &mut r.v_max),
        ] {
            kv.read_into(&format!("{name}.low"), &mut slot.low)?;
            kv.read_into(&format!("{name}.high"), &mut slot.high)?;
        }
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        self.m.check("m")?;
        self.x_max.check("x_max")?;
        self.y_max.check("y_max")?;
        self.v_max.check("v_max")
    }

    pub fn contains(&self, p: &EnvParams) -> bool {
        let inside = |r: &Range, v: f64| r.low <= v && v <= r.high;
        inside(&self.m, p.m)
            && inside(&self.x_max, p.x_max)
            && inside(&self.y_max, p.y_max)
            && inside(&self.v_max, p.v_max)
    }
}

/// Draws a source instance. Factors not covered by `ranges` come from `base`.
pub fn sample_instance(
    ranges: &ParamRanges,
    base: &EnvParams,
    rng: &mut ChaCha8Rng,
) -> Result<EnvParams> {
    ranges.validate()?;
    let p = EnvParams {
        m: ranges.m.sample(rng),
        x_max: ranges.x_max.sample(rng),
        y_max: ranges.y_max.sample(rng),
        v_max: ranges.v_max.sample(rng),
        ..*base
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn reset_is_near_origin_and_at_rest() {
        let p = EnvParams::target();
        let s = reset(&p, &mut rng(3));
        assert!(s.x * s.x + s.y * s.y <= 0.01);
        assert_eq!((s.vx, s.vy), (0.0, 0.0));
        assert_eq!(reset(&p, &mut rng(3)), s);
    }

    #[test]
    fn many_resets_are_safe() {
        let p = EnvParams::target();
        let mut r = rng(11);
        for _ in 0..1000 {
            let s = reset(&p, &mut r);
            assert!(s.x.abs() <= p.x_max && is_safe(&p, &s));
        }
    }

    #[test]
    fn origin_at_rest_is_a_fixed_point() {
        let p = EnvParams::target();
        let out = step(&p, &State::default(), &Action::default()).unwrap();
        assert_eq!(out.next_state, State::default());
        assert_eq!(out.reward, 0.0);
        assert!(!out.violated && !out.done);
    }

    #[test]
    fn leaving_the_box_terminates_with_zero_reward() {
        let p = EnvParams::target();
        let s = State::new(p.x_max - 0.01, 0.0, 2.0, 1.0);
        let out = step(&p, &s, &Action::new(1.0, 0.0)).unwrap();
        assert!(out.next_state.x > p.x_max);
        assert!(out.violated && out.done);
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.cost, 1.0);
    }

    #[test]
    fn counter_clockwise_motion_is_rewarded() {
        let p = EnvParams::target();
        let s = State::new(2.4, 0.0, 0.0, 2.0);
        let out = step(&p, &s, &Action::default()).unwrap();
        assert!((out.next_state.y - 2.0 * p.dt).abs() < 1e-15);
        // x * vy / (1 + |r - d|) = 2.4 * 2 / (1 + 7.6)
        let expected = 4.8 / 8.6;
        assert!((out.reward - expected).abs() < 1e-12);
        assert!(out.reward > 0.0);
    }

    #[test]
    fn actions_and_speeds_are_clipped() {
        let p = EnvParams::target();
        let s = State::new(0.0, 0.0, 1.99, -1.99);
        let out = step(&p, &s, &Action::new(50.0, -50.0)).unwrap();
        assert_eq!(out.next_state.vx, p.v_max);
        assert_eq!(out.next_state.vy, -p.v_max);
        let slow = step(&p, &State::default(), &Action::new(50.0, 0.0)).unwrap();
        assert!((slow.next_state.vx - p.a_max / p.m * p.dt).abs() < 1e-15);
    }

    #[test]
    fn non_finite_action_is_rejected() {
        let p = EnvParams::target();
        assert!(matches!(
            step(&p, &State::default(), &Action::new(f64::NAN, 0.0)),
            Err(Error::Domain(_))
        ));
        assert!(step(&p, &State::default(), &Action::new(0.0, f64::INFINITY)).is_err());
    }

    #[test]
    fn distance_examples() {
        let p = EnvParams::target();
        assert_eq!(dist_to_unsafe(&p, &State::default()), 2.5);
        assert_eq!(dist_to_unsafe(&p, &State::new(p.x_max, 0.0, 0.0, 0.0)), 0.0);
        assert_eq!(dist_to_unsafe(&p, &State::new(p.x_max + 1.0, 0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn hinge_examples() {
        let p = EnvParams::target();
        let at = |d: f64| State::new(p.x_max - d, 0.0, 0.0, 0.0);
        assert_eq!(cost_hinge(&p, &at(0.0), 0.5), 1.0);
        assert_eq!(cost_hinge(&p, &at(0.5), 0.5), 0.0);
        assert_eq!(cost_hinge(&p, &at(1.3), 0.5), 0.0);
        assert!((cost_hinge(&p, &at(0.25), 0.5) - 0.5).abs() < 1e-15);
        assert_eq!(cost_hinge(&p, &at(0.0), 0.0), 1.0);
        assert_eq!(cost_hinge(&p, &at(0.1), 0.0), 0.0);
    }

    #[test]
    fn degenerate_ranges_give_the_point() {
        let point = Range::new(1.0, 1.0);
        let ranges = ParamRanges {
            m: point,
            x_max: Range::new(2.0, 2.0),
            y_max: Range::new(9.0, 9.0),
            v_max: point,
        };
        let p = sample_instance(&ranges, &EnvParams::target(), &mut rng(0)).unwrap();
        assert_eq!((p.m, p.x_max, p.y_max, p.v_max), (1.0, 2.0, 9.0, 1.0));
        assert_eq!(p.d_circle, 10.0);
        assert_eq!(p.horizon, 300);
    }

    #[test]
    fn samples_are_reproducible_and_in_range() {
        let ranges = ParamRanges::default();
        let base = EnvParams::target();
        let draw = |seed| {
            let mut r = rng(seed);
            (0..25)
                .map(|_| sample_instance(&ranges, &base, &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        let mut r = rng(9);
        for _ in 0..1000 {
            let p = sample_instance(&ranges, &base, &mut r).unwrap();
            assert!(ranges.contains(&p), "{p:?}");
        }
    }

    #[test]
    fn inverted_range_is_a_config_error() {
        let mut ranges = ParamRanges::default();
        ranges.m = Range::new(2.0, 1.0);
        assert!(matches!(
            sample_instance(&ranges, &EnvParams::target(), &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn text_block_round_trips() {
        let p = EnvParams {
            m: 0.731_234_567_891_234_5,
            ..EnvParams::target()
        };
        let text = p.to_text();
        assert!(text.starts_with("m = "));
        assert_eq!(EnvParams::from_text(&text).unwrap(), p);
    }

    #[test]
    fn params_validation() {
        let mut p = EnvParams::target();
        p.d_circle = 2.0;
        assert!(p.validate().is_err());
        let mut q = EnvParams::target();
        q.horizon = 0;
        assert!(q.validate().is_err());
        assert!(EnvParams::target().validate().is_ok());
    }
}
