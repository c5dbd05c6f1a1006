//! Synthetic scan sequences with exact ground truth: a static world of
//! primitives seen from a moving sensor.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloudproc::PointCloud;
use crate::error::{Error, Result};
use crate::geom3d::{compose, inverse, PoseSet, RigidTransform, Rotation3};

use super::ScanSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionModel {
    Static,
    /// The same step every scan: rotation vector then translation.
    ConstantVelocity { translation: [f64; 3], rotation: [f64; 3] },
    /// Independent uniform steps; yaw and planar translation up to the
    /// bounds, roll, pitch and height change up to a fifth of them.
    RandomWalk { max_translation: f64, max_rotation: f64 },
    /// Once around a circle of `radius` meters, back to the start, with
    /// yaw swinging by `yaw_amplitude` radians.
    Loop { radius: f64, yaw_amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureSpec {
    pub ground: bool,
    /// Sensor height above the ground (meters).
    pub ground_depth: f64,
    /// Half-width of the square world (meters).
    pub extent: f64,
    pub planes: usize,
    pub boxes: usize,
    pub cylinders: usize,
}

impl Default for StructureSpec {
    fn default() -> Self {
        StructureSpec {
            ground: true,
            ground_depth: 0.8,
            extent: 1.5,
            planes: 1,
            boxes: 3,
            cylinders: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub n_scans: usize,
    /// Points sampled on the world's surfaces; every scan sees all of them
    /// that are within `sensor_range`.
    pub points_per_scan: usize,
    pub motion: MotionModel,
    pub structure: StructureSpec,
    /// Gaussian sensor noise per coordinate (meters).
    pub noise_sigma: f64,
    pub sensor_range: Option<f64>,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            seed: 0,
            n_scans: 10,
            points_per_scan: 3000,
            motion: MotionModel::ConstantVelocity {
                translation: [0.1, 0.0, 0.0],
                rotation: [0.0, 0.0, 0.05],
            },
            structure: StructureSpec::default(),
            noise_sigma: 0.01,
            sensor_range: None,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("synthetic scene: {what}")));
        if self.n_scans == 0 {
            return bad("n_scans must be at least 1");
        }
        if self.points_per_scan == 0 {
            return bad("points_per_scan must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(self.structure.extent > 0.0) || !(self.structure.ground_depth > 0.0) {
            return bad("extent and ground_depth must be positive");
        }
        if !self.structure.ground && self.structure.planes + self.structure.boxes + self.structure.cylinders == 0 {
            return bad("the world needs at least one primitive");
        }
        if let Some(r) = self.sensor_range {
            if !(r > 0.0) {
                return bad("sensor_range must be positive");
            }
        }
        match self.motion {
            MotionModel::RandomWalk { max_translation, max_rotation } if !(max_translation > 0.0 && max_rotation > 0.0) => {
                bad("random-walk bounds must be positive")
            }
            MotionModel::Loop { radius, yaw_amplitude } if !(radius > 0.0 && yaw_amplitude >= 0.0) => {
                bad("loop radius must be positive")
            }
            _ => Ok(()),
        }
    }
}

/// A surface patch, sampled uniformly by area.
#[derive(Debug, Clone, Copy)]
enum Patch {
    Quad { origin: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64> },
    Disk { center: Vector3<f64>, radius: f64 },
    Tube { base: Vector3<f64>, radius: f64, height: f64 },
}

impl Patch {
    fn area(&self) -> f64 {
        match *self {
            Patch::Quad { a, b, .. } => a.cross(&b).norm(),
            Patch::Disk { radius, .. } => PI * radius * radius,
            Patch::Tube { radius, height, .. } => 2.0 * PI * radius * height,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Vector3<f64> {
        match *self {
            Patch::Quad { origin, a, b } => origin + a * rng.random::<f64>() + b * rng.random::<f64>(),
            Patch::Disk { center, radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let t = 2.0 * PI * rng.random::<f64>();
                center + Vector3::new(r * t.cos(), r * t.sin(), 0.0)
            }
            Patch::Tube { base, radius, height } => {
                let t = 2.0 * PI * rng.random::<f64>();
                base + Vector3::new(radius * t.cos(), radius * t.sin(), height * rng.random::<f64>())
            }
        }
    }
}

fn world_patches(s: &StructureSpec, rng: &mut impl Rng) -> Vec<Patch> {
    let e = s.extent;
    let z0 = -s.ground_depth;
    let mut patches = Vec::new();
    if s.ground {
        patches.push(Patch::Quad {
            origin: Vector3::new(-e, -e, z0),
            a: Vector3::new(2.0 * e, 0.0, 0.0),
            b: Vector3::new(0.0, 2.0 * e, 0.0),
        });
    }
    let spot = |rng: &mut ChaCha8Rng| Vector3::new(rng.random_range(-0.8 * e..0.8 * e), rng.random_range(-0.8 * e..0.8 * e), z0);
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    for _ in 0..s.planes {
        let c = spot(&mut local);
        let yaw = local.random_range(0.0..PI);
        let len = local.random_range(0.5 * e..e);
        let dir = Vector3::new(yaw.cos(), yaw.sin(), 0.0) * len;
        patches.push(Patch::Quad {
            origin: c - dir * 0.5,
            a: dir,
            b: Vector3::new(0.0, 0.0, local.random_range(0.8..1.5)),
        });
    }
    for _ in 0..s.boxes {
        let c = spot(&mut local);
        let (w, d, h) = (local.random_range(0.2..0.6), local.random_range(0.2..0.6), local.random_range(0.2..0.8));
        let yaw: f64 = local.random_range(0.0..PI);
        let ux = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let uy = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
        let o = c - ux * (w / 2.0) - uy * (d / 2.0);
        let up = Vector3::new(0.0, 0.0, h);
        patches.push(Patch::Quad { origin: o, a: ux * w, b: up });
        patches.push(Patch::Quad { origin: o, a: uy * d, b: up });
        patches.push(Patch::Quad { origin: o + ux * w, a: uy * d, b: up });
        patches.push(Patch::Quad { origin: o + uy * d, a: ux * w, b: up });
        patches.push(Patch::Quad { origin: o + up, a: ux * w, b: uy * d });
    }
    for _ in 0..s.cylinders {
        let c = spot(&mut local);
        let radius = local.random_range(0.08..0.25);
        let height = local.random_range(0.5..1.2);
        patches.push(Patch::Tube { base: c, radius, height });
        patches.push(Patch::Disk {
            center: c + Vector3::new(0.0, 0.0, height),
            radius,
        });
    }
    patches
}

/// The static world of `spec`, in world coordinates (the frame of pose 0).
pub fn synth_world(spec: &SyntheticSceneSpec) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patches = world_patches(&spec.structure, &mut rng);
    let areas: Vec<f64> = patches.iter().map(|p| p.area()).collect();
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(spec.points_per_scan);
    for _ in 0..spec.points_per_scan {
        let mut u = rng.random::<f64>() * total;
        let mut k = 0;
        while k + 1 < patches.len() && u >= areas[k] {
            u -= areas[k];
            k += 1;
        }
        points.push(patches[k].sample(&mut rng));
    }
    points
}

/// Sensor poses of `spec`'s trajectory, pose 0 at the identity.
pub fn synth_trajectory(spec: &SyntheticSceneSpec) -> PoseSet {
    let n = spec.n_scans;
    let poses = match spec.motion {
        MotionModel::Static => vec![RigidTransform::identity(); n],
        MotionModel::ConstantVelocity { translation, rotation } => {
            let step = RigidTransform::new(Rotation3::exp(&Vector3::from(rotation)), Vector3::from(translation));
            let mut p = vec![RigidTransform::identity()];
            for _ in 1..n {
                p.push(compose(p.last().expect("non-empty"), &step));
            }
            p
        }
        MotionModel::RandomWalk { max_translation: t, max_rotation: r } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0005_EED0_FA1C);
            let mut p = vec![RigidTransform::identity()];
            for _ in 1..n {
                let w = Vector3::new(rng.random_range(-0.2 * r..=0.2 * r), rng.random_range(-0.2 * r..=0.2 * r), rng.random_range(-r..=r));
                let v = Vector3::new(rng.random_range(-t..=t), rng.random_range(-t..=t), rng.random_range(-0.2 * t..=0.2 * t));
                p.push(compose(p.last().expect("non-empty"), &RigidTransform::new(Rotation3::exp(&w), v)));
            }
            p
        }
        MotionModel::Loop { radius, yaw_amplitude } => (0..n)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / n as f64;
                RigidTransform::new(
                    Rotation3::exp(&Vector3::new(0.0, 0.0, yaw_amplitude * th.sin())),
                    Vector3::new(radius * th.sin(), radius * (1.0 - th.cos()), 0.0),
                )
            })
            .collect(),
    };
    PoseSet::new(poses)
}

/// Renders every scan as the world seen from its pose plus Gaussian noise.
pub fn synth_generate(spec: &SyntheticSceneSpec) -> Result<ScanSequence> {
    spec.validate()?;
    let world = synth_world(spec);
    let truth = synth_trajectory(spec);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let clouds = truth
        .poses
        .iter()
        .enumerate()
        .map(|(k, pose)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9).wrapping_add(k as u64 + 1));
            let inv = inverse(pose);
            let points = world
                .iter()
                .map(|p| inv.transform_point(p))
                .filter(|q| spec.sensor_range.is_none_or(|r| q.norm() <= r))
                .map(|q| q + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
                .collect();
            PointCloud::from_points(points)
        })
        .collect();
    ScanSequence::new(format!("synth-{}", spec.seed), clouds, Some(truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudproc::KdTree;

    #[test]
    fn static_scans_differ_only_by_noise() {
        let spec = SyntheticSceneSpec {
            motion: MotionModel::Static,
            n_scans: 3,
            ..Default::default()
        };
        let seq = synth_generate(&spec).unwrap();
        let truth = seq.truth.as_ref().unwrap();
        assert!(truth.poses.iter().all(|p| *p == RigidTransform::identity()));
        for c in &seq.clouds[1..] {
            let max = c.points.iter().zip(&seq.clouds[0].points).map(|(a, b)| (a - b).abs().max()).fold(0.0, f64::max);
            assert!(max < 12.0 * spec.noise_sigma);
        }
    }

    #[test]
    fn constant_velocity_translates_scans() {
        let spec = SyntheticSceneSpec {
            noise_sigma: 0.0,
            motion: MotionModel::ConstantVelocity {
                translation: [0.1, 0.0, 0.0],
                rotation: [0.0; 3],
            },
            n_scans: 5,
            ..Default::default()
        };
        let seq = synth_generate(&spec).unwrap();
        for (k, c) in seq.clouds.iter().enumerate() {
            for (p, q) in c.points.iter().zip(&seq.clouds[0].points) {
                assert!((p - (q - Vector3::new(0.1 * k as f64, 0.0, 0.0))).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSceneSpec {
            motion: MotionModel::RandomWalk {
                max_translation: 0.2,
                max_rotation: 0.1,
            },
            ..Default::default()
        };
        assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
        let other = SyntheticSceneSpec { seed: 1, ..spec.clone() };
        assert_ne!(synth_generate(&spec).unwrap().clouds[0], synth_generate(&other).unwrap().clouds[0]);
    }

    #[test]
    fn truth_reconstructs_world() {
        for motion in [
            MotionModel::Loop { radius: 0.5, yaw_amplitude: 0.3 },
            MotionModel::RandomWalk { max_translation: 0.3, max_rotation: 0.2 },
        ] {
            let spec = SyntheticSceneSpec { motion, noise_sigma: 0.01, ..Default::default() };
            let world = synth_world(&spec);
            let tree = KdTree::new(&world);
            let seq = synth_generate(&spec).unwrap();
            let truth = seq.truth.as_ref().unwrap();
            for (c, pose) in seq.clouds.iter().zip(&truth.poses) {
                let mean: f64 = c.points.iter().map(|p| tree.nearest(&pose.transform_point(p)).unwrap().1.sqrt()).sum::<f64>() / c.len() as f64;
                assert!(mean <= 3.0 * spec.noise_sigma, "{mean}");
            }
        }
    }

    #[test]
    fn loop_returns_near_start() {
        let spec = SyntheticSceneSpec {
            motion: MotionModel::Loop { radius: 0.5, yaw_amplitude: 0.3 },
            ..Default::default()
        };
        let t = synth_trajectory(&spec);
        assert!(t[9].translation.norm() < 0.35);
        assert!(t[5].translation.norm() > 0.9);
    }

    #[test]
    fn sensor_range_limits_points() {
        let spec = SyntheticSceneSpec {
            sensor_range: Some(1.0),
            noise_sigma: 0.0,
            ..Default::default()
        };
        let seq = synth_generate(&spec).unwrap();
        assert!(seq.clouds[0].len() < spec.points_per_scan);
        assert!(seq.clouds[0].points.iter().all(|p| p.norm() <= 1.0 + 1e-12));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synth_generate(&SyntheticSceneSpec { n_scans: 0, ..Default::default() }).is_err());
        assert!(synth_generate(&SyntheticSceneSpec { noise_sigma: -1.0, ..Default::default() }).is_err());
    }
}
