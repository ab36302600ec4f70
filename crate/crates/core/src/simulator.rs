//! Synthetic event streams of rotating multi-blade propellers.
//!
//! Time advances in 50 µs ticks. At every tick each blade is a rectangle
//! rooted at the propeller center; a Poisson number of events is scattered
//! along its two long edges, blurred, jittered and rounded to pixels.
//! Angles grow counter-clockwise as seen in the image (y axis pointing down),
//! so a positive rpm produces a positive yaw between consecutive slices.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, EventStream, Geometry, Micros, Polarity};

pub const TICK_US: Micros = 50;
pub const POSITION_BLUR_PX: f64 = 0.5;
pub const JITTER_PERIOD_US: f64 = 500_000.0;
pub const MAX_BLADES: u32 = 8;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("target index {index} out of range ({count} propellers)")]
    IndexOutOfRange { index: usize, count: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropellerSpec {
    pub center: [f64; 2],
    pub n_blades: u32,
    pub blade_length: f64,
    pub blade_width: f64,
    /// Signed; positive is counter-clockwise.
    pub rpm: f64,
    #[serde(default)]
    pub phase0: f64,
}

impl PropellerSpec {
    pub fn new(center: [f64; 2], n_blades: u32, rpm: f64) -> Self {
        PropellerSpec {
            center,
            n_blades,
            blade_length: 50.0,
            blade_width: 8.0,
            rpm,
            phase0: 0.0,
        }
    }

    /// Angular velocity in rad/s.
    pub fn omega(&self) -> f64 {
        self.rpm * 2.0 * PI / 60.0
    }

    pub fn symmetry_angle(&self) -> f64 {
        2.0 * PI / self.n_blades as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    /// Microseconds.
    pub duration: Micros,
    pub propellers: Vec<PropellerSpec>,
    pub events_per_blade_ms: f64,
    pub noise_rate: f64,
    pub jitter_amp: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// A 346x260 scene with a single 3-blade propeller in the middle.
    pub fn single(rpm: f64, seed: u64) -> Self {
        SceneSpec {
            width: 346,
            height: 260,
            duration: 150_000,
            propellers: vec![PropellerSpec::new([173.0, 130.0], 3, rpm)],
            events_per_blade_ms: 100.0,
            noise_rate: 0.0,
            jitter_amp: 0.0,
            seed,
        }
    }

    /// Four propellers laid out like a quadcopter seen from below.
    pub fn quad(rpms: [f64; 4], seed: u64) -> Self {
        let centers = [[90.0, 70.0], [256.0, 70.0], [90.0, 190.0], [256.0, 190.0]];
        let propellers = centers
            .iter()
            .zip(rpms)
            .enumerate()
            .map(|(i, (&c, rpm))| PropellerSpec {
                blade_length: 45.0,
                phase0: 0.7 * i as f64,
                ..PropellerSpec::new(c, 3, rpm)
            })
            .collect();
        SceneSpec {
            propellers,
            ..SceneSpec::single(rpms[0], seed)
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.width, self.height)
    }

    pub fn duration_ms(&self) -> f64 {
        self.duration as f64 / 1000.0
    }

    /// Mean number of events the scene generates before frame clipping.
    pub fn expected_event_count(&self) -> f64 {
        let blades: f64 = self.propellers.iter().map(|p| p.n_blades as f64).sum();
        self.duration_ms() * (blades * self.events_per_blade_ms + self.noise_rate)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidScene(msg));
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as u32 + 1 || self.height > u16::MAX as u32 + 1 {
            return bad(format!("sensor geometry {}x{} is not usable", self.width, self.height));
        }
        if self.duration == 0 {
            return bad("duration must be positive".into());
        }
        if !(self.events_per_blade_ms > 0.0) || !self.events_per_blade_ms.is_finite() {
            return bad(format!("events_per_blade_ms must be > 0, got {}", self.events_per_blade_ms));
        }
        if !(self.noise_rate >= 0.0) || !self.noise_rate.is_finite() {
            return bad(format!("noise_rate must be >= 0, got {}", self.noise_rate));
        }
        if !(self.jitter_amp >= 0.0) || !self.jitter_amp.is_finite() {
            return bad(format!("jitter_amp must be >= 0, got {}", self.jitter_amp));
        }
        for (i, p) in self.propellers.iter().enumerate() {
            if p.n_blades < 1 || p.n_blades > MAX_BLADES {
                return bad(format!("propeller {i}: n_blades must be in 1..={MAX_BLADES}, got {}", p.n_blades));
            }
            if !(p.blade_width > 0.0 && p.blade_length > p.blade_width) {
                return bad(format!(
                    "propeller {i}: requires blade_length > blade_width > 0 (length {}, width {})",
                    p.blade_length, p.blade_width
                ));
            }
            if !(p.rpm.abs() > 0.0) || !p.rpm.is_finite() {
                return bad(format!("propeller {i}: |rpm| must be > 0, got {}", p.rpm));
            }
            if !p.phase0.is_finite() {
                return bad(format!("propeller {i}: phase0 must be finite"));
            }
            let [cx, cy] = p.center;
            let r = p.blade_length;
            let inside = cx - r >= 0.0
                && cy - r >= 0.0
                && cx + r <= (self.width - 1) as f64
                && cy + r <= (self.height - 1) as f64;
            if !inside {
                return bad(format!(
                    "propeller {i}: disk centered at ({cx}, {cy}) with radius {r} does not lie inside the {}x{} frame",
                    self.width, self.height
                ));
            }
        }
        Ok(())
    }
}

/// Origin of a simulated event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Propeller(usize),
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthTarget {
    pub rpm: f64,
    pub center: [f64; 2],
    pub n_blades: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub targets: Vec<TruthTarget>,
}

impl GroundTruth {
    pub fn from_scene(scene: &SceneSpec) -> Self {
        GroundTruth {
            targets: scene
                .propellers
                .iter()
                .map(|p| TruthTarget {
                    rpm: p.rpm,
                    center: p.center,
                    n_blades: p.n_blades,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub stream: EventStream,
    pub truth: GroundTruth,
    /// One label per event of `stream`, same order.
    pub labels: Vec<Source>,
}

pub fn ground_truth_rpm(scene: &SceneSpec, target_index: usize) -> Result<f64, SimError> {
    scene
        .propellers
        .get(target_index)
        .map(|p| p.rpm)
        .ok_or(SimError::IndexOutOfRange {
            index: target_index,
            count: scene.propellers.len(),
        })
}

fn jitter_offset(amp: f64, t: f64) -> (f64, f64) {
    if amp == 0.0 {
        return (0.0, 0.0);
    }
    let phase = 2.0 * PI * t / JITTER_PERIOD_US;
    (amp * phase.sin(), amp * phase.cos())
}

/// Raw (unclipped, unrounded) event before jitter.
struct RawEvent {
    t: Micros,
    x: f64,
    y: f64,
    p: Polarity,
}

fn propeller_events(scene: &SceneSpec, prop: &PropellerSpec, index: usize) -> Vec<RawEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(index as u64 + 1);
    let mean = scene.events_per_blade_ms * TICK_US as f64 / 1000.0;
    let poisson = Poisson::new(mean).expect("validated positive rate");
    let blur = Normal::new(0.0, POSITION_BLUR_PX).unwrap();
    let omega_us = prop.omega() / 1e6;
    let spacing = prop.symmetry_angle();
    let half_w = prop.blade_width / 2.0;
    let lead = prop.rpm.signum();
    let [cx, cy] = prop.center;

    let mut out = Vec::with_capacity(scene.expected_event_count() as usize / scene.propellers.len().max(1));
    let mut tick = 0;
    while tick < scene.duration {
        let tick_len = TICK_US.min(scene.duration - tick);
        for blade in 0..prop.n_blades {
            let angle = prop.phase0 + omega_us * tick as f64 + spacing * blade as f64;
            // Blade axis and its normal toward increasing angle, y pointing down.
            let (s, c) = angle.sin_cos();
            let axis = (c, -s);
            let normal = (-s, -c);
            let n: f64 = poisson.sample(&mut rng);
            for _ in 0..n as u64 {
                let along = rng.random::<f64>() * prop.blade_length;
                let leading = rng.random::<bool>();
                let side = if leading { lead } else { -lead } * half_w;
                let x = cx + axis.0 * along + normal.0 * side + blur.sample(&mut rng);
                let y = cy + axis.1 * along + normal.1 * side + blur.sample(&mut rng);
                let t = tick + rng.random_range(0..tick_len);
                let p = if leading { Polarity::Positive } else { Polarity::Negative };
                out.push(RawEvent { t, x, y, p });
            }
        }
        tick += TICK_US;
    }
    out
}

fn noise_events(scene: &SceneSpec) -> Vec<RawEvent> {
    if scene.noise_rate == 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(0);
    let poisson = Poisson::new(scene.noise_rate * TICK_US as f64 / 1000.0).unwrap();
    let mut out = Vec::new();
    let mut tick = 0;
    while tick < scene.duration {
        let tick_len = TICK_US.min(scene.duration - tick);
        let n: f64 = poisson.sample(&mut rng);
        for _ in 0..n as u64 {
            let x = rng.random::<f64>() * scene.width as f64 - 0.5;
            let y = rng.random::<f64>() * scene.height as f64 - 0.5;
            let t = tick + rng.random_range(0..tick_len);
            let p = if rng.random::<bool>() { Polarity::Positive } else { Polarity::Negative };
            out.push(RawEvent { t, x, y, p });
        }
        tick += TICK_US;
    }
    out
}

/// Generates the event stream of `scene`; deterministic in `scene.seed`.
pub fn simulate(scene: &SceneSpec) -> Result<Simulation, SimError> {
    scene.validate()?;
    let geometry = scene.geometry();

    let mut batches: Vec<(Source, Vec<RawEvent>)> = scene
        .propellers
        .par_iter()
        .enumerate()
        .map(|(i, p)| (Source::Propeller(i), propeller_events(scene, p, i)))
        .collect();
    batches.push((Source::Noise, noise_events(scene)));

    let mut labelled: Vec<(Event, Source)> = Vec::new();
    for (source, raw) in batches {
        for r in raw {
            let (jx, jy) = jitter_offset(scene.jitter_amp, r.t as f64);
            let x = (r.x + jx).round();
            let y = (r.y + jy).round();
            if x < 0.0 || y < 0.0 || x >= geometry.width as f64 || y >= geometry.height as f64 {
                continue;
            }
            labelled.push((Event::new(r.t, x as u16, y as u16, r.p), source));
        }
    }
    labelled.sort_by_key(|(e, _)| e.t);
    let (events, labels): (Vec<Event>, Vec<Source>) = labelled.into_iter().unzip();
    let stream = EventStream::new(events, geometry, Some(scene.duration))
        .expect("simulated events are in frame and within duration");
    Ok(Simulation {
        stream,
        truth: GroundTruth::from_scene(scene),
        labels,
    })
}
