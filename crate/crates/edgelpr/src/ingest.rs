//! LiDAR scan and pose ingestion plus the synthetic loop-world generator.
//!
//! Two on-disk input paths are supported: KITTI Velodyne `.bin` scans with a
//! KITTI odometry pose file, and a generic CSV frame manifest
//! (`id,timestamp,cloud_path,r00..r22,tx,ty,tz`) so other datasets can be
//! adapted externally.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub const ORTHONORMALITY_TOL: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("truncated record: byte length {0} is not a multiple of 16")]
    TruncatedRecord(usize),
    #[error("non-finite value in point {0}")]
    NonFiniteValue(usize),
    #[error("malformed line {0}")]
    MalformedLine(usize),
    #[error("non-orthonormal rotation on line {0}")]
    NonOrthonormalRotation(usize),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One LiDAR return: position in meters plus unitless reflectance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// World-from-sensor pose.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose {
    pub position: [f32; 3],
    /// Row-major 3x3 rotation matrix.
    pub rotation: [[f32; 3]; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: [0.0; 3],
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn from_yaw(yaw: f32, position: [f32; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose {
            position,
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Checks |R^T R - I|_max <= tol and |det(R) - 1| <= tol.
    pub fn is_orthonormal(&self, tol: f32) -> bool {
        let r = &self.rotation;
        let mut max_dev = 0.0f32;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0f32;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((dot - target).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        max_dev <= tol && (det - 1.0).abs() <= tol
    }

    pub fn distance(&self, other: &Pose) -> f32 {
        let dx = self.position[0] - other.position[0];
        let dy = self.position[1] - other.position[1];
        let dz = self.position[2] - other.position[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Ordered point set; iteration order is file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One sensor acquisition with its metadata.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: u64,
    pub timestamp: f64,
    pub cloud: PointCloud,
    pub pose: Pose,
    pub sequence_tag: String,
}

/// Decodes KITTI Velodyne binary: consecutive little-endian f32 quadruples
/// (x, y, z, intensity). With `validate` set, rejects NaN/inf fields.
pub fn parse_point_cloud_bin(bytes: &[u8], validate: bool) -> Result<PointCloud, IngestError> {
    if bytes.len() % 16 != 0 {
        return Err(IngestError::TruncatedRecord(bytes.len()));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let at = |k: usize| {
            let o = 16 * i + 4 * k;
            f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
        };
        let p = Point {
            x: at(0),
            y: at(1),
            z: at(2),
            intensity: at(3),
        };
        if validate && !p.is_finite() {
            return Err(IngestError::NonFiniteValue(i));
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

/// Inverse of [`parse_point_cloud_bin`]; round-trips bit-exactly.
pub fn serialize_point_cloud_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.points.len() * 16);
    for p in &cloud.points {
        out.extend_from_slice(&p.x.to_le_bytes());
        out.extend_from_slice(&p.y.to_le_bytes());
        out.extend_from_slice(&p.z.to_le_bytes());
        out.extend_from_slice(&p.intensity.to_le_bytes());
    }
    out
}

/// Parses KITTI odometry poses: 12 whitespace-separated numbers per line,
/// the row-major 3x4 world-from-sensor matrix. Empty lines are skipped.
pub fn parse_pose_file(text: &str) -> Result<Vec<Pose>, IngestError> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<f32> = line
            .split_whitespace()
            .map(|t| t.parse::<f32>())
            .collect::<Result<_, _>>()
            .map_err(|_| IngestError::MalformedLine(lineno + 1))?;
        if nums.len() != 12 {
            return Err(IngestError::MalformedLine(lineno + 1));
        }
        let mut rotation = [[0.0f32; 3]; 3];
        let mut position = [0.0f32; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = nums[4 * i + j];
            }
            position[i] = nums[4 * i + 3];
        }
        let pose = Pose { position, rotation };
        if !pose.is_orthonormal(ORTHONORMALITY_TOL) {
            return Err(IngestError::NonOrthonormalRotation(lineno + 1));
        }
        poses.push(pose);
    }
    Ok(poses)
}

/// Parses the CSV frame manifest. `load_cloud` maps a `cloud_path` cell to
/// raw bytes so callers control file access.
pub fn parse_manifest<F>(text: &str, mut load_cloud: F) -> Result<Vec<Frame>, IngestError>
where
    F: FnMut(&str) -> Result<Vec<u8>, IngestError>,
{
    let mut frames = Vec::new();
    let mut lines = text.lines().enumerate();
    // header
    match lines.next() {
        Some((_, h)) if h.trim().starts_with("id,timestamp,cloud_path") => {}
        _ => return Err(IngestError::MalformedLine(1)),
    }
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(|c| c.trim()).collect();
        if cells.len() != 15 {
            return Err(IngestError::MalformedLine(lineno + 1));
        }
        let id: u64 = cells[0]
            .parse()
            .map_err(|_| IngestError::MalformedLine(lineno + 1))?;
        let timestamp: f64 = cells[1]
            .parse()
            .map_err(|_| IngestError::MalformedLine(lineno + 1))?;
        let mut nums = [0.0f32; 12];
        for (k, cell) in cells[3..15].iter().enumerate() {
            nums[k] = cell
                .parse()
                .map_err(|_| IngestError::MalformedLine(lineno + 1))?;
        }
        let rotation = [
            [nums[0], nums[1], nums[2]],
            [nums[3], nums[4], nums[5]],
            [nums[6], nums[7], nums[8]],
        ];
        let position = [nums[9], nums[10], nums[11]];
        let pose = Pose { position, rotation };
        if !pose.is_orthonormal(ORTHONORMALITY_TOL) {
            return Err(IngestError::NonOrthonormalRotation(lineno + 1));
        }
        let bytes = load_cloud(cells[2])?;
        let cloud = parse_point_cloud_bin(&bytes, true)?;
        frames.push(Frame {
            id,
            timestamp,
            cloud,
            pose,
            sequence_tag: String::new(),
        });
    }
    Ok(frames)
}

/// Parameters of the synthetic loop world used for desk-scale experiments.
///
/// The trajectory is a closed circular loop of `lap_frames` frames spaced
/// `frame_spacing_m` apart; frames past one lap retrace the loop, so frame
/// `lap_frames + i` revisits the pose of frame `i` (index gap = `lap_frames`).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frame_count: usize,
    pub lap_frames: usize,
    pub frame_spacing_m: f32,
    pub landmark_count: usize,
    pub points_per_landmark: usize,
    pub sensor_range_m: f32,
    pub noise_std_m: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frame_count: 600,
            lap_frames: 400,
            frame_spacing_m: 1.5,
            landmark_count: 900,
            points_per_landmark: 6,
            sensor_range_m: 38.0,
            noise_std_m: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.frame_count < 2 {
            return Err(IngestError::InvalidConfig("frame_count must be >= 2".into()));
        }
        if self.lap_frames == 0 {
            return Err(IngestError::InvalidConfig("lap_frames must be > 0".into()));
        }
        if self.frame_spacing_m <= 0.0 || self.sensor_range_m <= 0.0 {
            return Err(IngestError::InvalidConfig(
                "spacing and sensor range must be positive".into(),
            ));
        }
        if self.landmark_count == 0 || self.points_per_landmark == 0 {
            return Err(IngestError::InvalidConfig(
                "landmark_count and points_per_landmark must be positive".into(),
            ));
        }
        if self.noise_std_m < 0.0 {
            return Err(IngestError::InvalidConfig("noise_std_m must be >= 0".into()));
        }
        Ok(())
    }
}

struct Landmark {
    x: f32,
    y: f32,
    z: f32,
    intensity: f32,
    /// Fixed local jitter of each return around the landmark center, so
    /// revisits observe the same structure.
    offsets: Vec<[f32; 3]>,
}

/// Generates a deterministic loop trajectory over a fixed landmark field.
/// Revisited poses observe the same landmarks, so descriptors of true
/// revisits can match.
pub fn generate_synthetic_world(config: &SynthConfig, seed: u64) -> Result<Vec<Frame>, IngestError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = config.lap_frames as f32 * config.frame_spacing_m / std::f32::consts::TAU;
    let corridor = config.sensor_range_m * 0.9;

    let mut landmarks = Vec::with_capacity(config.landmark_count);
    for _ in 0..config.landmark_count {
        let theta = rng.gen::<f32>() * std::f32::consts::TAU;
        let r = radius + rng.gen_range(-corridor..corridor);
        let mut offsets = Vec::with_capacity(config.points_per_landmark);
        for _ in 0..config.points_per_landmark {
            offsets.push([
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-0.5..0.5),
            ]);
        }
        landmarks.push(Landmark {
            x: r * theta.cos(),
            y: r * theta.sin(),
            z: rng.gen_range(-1.5..1.5),
            intensity: rng.gen_range(0.2..1.0),
            offsets,
        });
    }

    let noise = Normal::new(0.0f32, config.noise_std_m.max(f32::MIN_POSITIVE))
        .expect("valid normal distribution");
    let range_sq = config.sensor_range_m * config.sensor_range_m;
    let mut frames = Vec::with_capacity(config.frame_count);
    for t in 0..config.frame_count {
        let lap_pos = (t % config.lap_frames) as f32 / config.lap_frames as f32;
        let alpha = lap_pos * std::f32::consts::TAU;
        let position = [radius * alpha.cos(), radius * alpha.sin(), 0.0];
        let heading = alpha + std::f32::consts::FRAC_PI_2; // along the tangent
        let pose = Pose::from_yaw(heading, position);
        let (sh, ch) = heading.sin_cos();

        let frame_seed = seed ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut frame_rng = ChaCha8Rng::seed_from_u64(frame_seed);
        let mut points = Vec::new();
        for lm in &landmarks {
            let dx = lm.x - position[0];
            let dy = lm.y - position[1];
            if dx * dx + dy * dy > range_sq {
                continue;
            }
            for off in &lm.offsets {
                let wx = dx + off[0];
                let wy = dy + off[1];
                // world -> sensor: rotate by -heading
                let lx = ch * wx + sh * wy + noise.sample(&mut frame_rng);
                let ly = -sh * wx + ch * wy + noise.sample(&mut frame_rng);
                let lz = lm.z + off[2] + noise.sample(&mut frame_rng);
                points.push(Point {
                    x: lx,
                    y: ly,
                    z: lz,
                    intensity: lm.intensity,
                });
            }
        }
        frames.push(Frame {
            id: t as u64,
            timestamp: t as f64,
            cloud: PointCloud { points },
            pose,
            sequence_tag: "synth".to_string(),
        });
    }
    Ok(frames)
}
