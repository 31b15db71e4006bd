//! Bird's-Eye-View rasterization of point clouds and rotation augmentation.

use crate::ingest::{Point, PointCloud};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BevError {
    #[error("invalid BEV config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// How intensities of points falling into the same cell are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accumulation {
    Max,
    Mean,
}

/// Raster geometry. The extent covers both x and y, centered on the sensor;
/// the defaults (80 m at 256 px, z in [-3, 3]) give 0.3125 m/pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct BevConfig {
    pub width: usize,
    pub height: usize,
    pub extent_m: f32,
    pub z_min: f32,
    pub z_max: f32,
    pub accumulation: Accumulation,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            width: 256,
            height: 256,
            extent_m: 80.0,
            z_min: -3.0,
            z_max: 3.0,
            accumulation: Accumulation::Max,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<(), BevError> {
        if self.width == 0 || self.height == 0 {
            return Err(BevError::InvalidConfig("width and height must be > 0".into()));
        }
        if !(self.extent_m > 0.0) {
            return Err(BevError::InvalidConfig("extent must be > 0".into()));
        }
        if !(self.z_min < self.z_max) {
            return Err(BevError::InvalidConfig("z_min must be < z_max".into()));
        }
        Ok(())
    }
}

/// Three-channel raster with all channels identical (single intensity
/// channel replicated to match image-backbone input conventions).
#[derive(Debug, Clone, PartialEq)]
pub struct BevImage {
    pub width: usize,
    pub height: usize,
    /// CHW layout, 3 equal channels, values in [0, 1].
    pub pixels: Vec<f32>,
    pub source_frame_id: u64,
}

impl BevImage {
    pub fn channel(&self) -> &[f32] {
        &self.pixels[..self.width * self.height]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.pixels.clone())
            .expect("consistent BEV buffer")
    }
}

/// Builds an input batch tensor (N, 3, H, W) from equally sized BEV images.
pub fn batch_tensor(images: &[&BevImage]) -> Tensor {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert_eq!((img.height, img.width), (h, w));
        data.extend_from_slice(&img.pixels);
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data).expect("consistent image sizes")
}

/// Per-rasterization statistics: points dropped outside the extent or z-crop,
/// and intensities clamped into [0, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RasterStats {
    pub dropped: usize,
    pub clamped: usize,
}

/// Projects a cloud into the BEV grid. A point (x, y, z, i) with
/// |x| < extent/2, |y| < extent/2 and z in [z_min, z_max] maps to
/// row = floor((extent/2 - x)/res), col = floor((y + extent/2)/res) with
/// res = extent/width; out-of-extent points are silently dropped.
pub fn rasterize_with_stats(
    cloud: &PointCloud,
    config: &BevConfig,
    source_frame_id: u64,
) -> Result<(BevImage, RasterStats), BevError> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let half = config.extent_m / 2.0;
    let res = config.extent_m / w as f32;
    let mut plane = vec![0.0f32; w * h];
    let mut counts = if config.accumulation == Accumulation::Mean {
        vec![0u32; w * h]
    } else {
        Vec::new()
    };
    let mut stats = RasterStats::default();

    for p in &cloud.points {
        if !(p.x.abs() < half && p.y.abs() < half && p.z >= config.z_min && p.z <= config.z_max) {
            stats.dropped += 1;
            continue;
        }
        let mut intensity = p.intensity;
        if !(0.0..=1.0).contains(&intensity) {
            intensity = intensity.clamp(0.0, 1.0);
            stats.clamped += 1;
        }
        let row = ((half - p.x) / res).floor() as usize;
        let col = ((p.y + half) / res).floor() as usize;
        let row = row.min(h - 1);
        let col = col.min(w - 1);
        let idx = row * w + col;
        match config.accumulation {
            Accumulation::Max => plane[idx] = plane[idx].max(intensity),
            Accumulation::Mean => {
                plane[idx] += intensity;
                counts[idx] += 1;
            }
        }
    }
    if config.accumulation == Accumulation::Mean {
        for (v, &c) in plane.iter_mut().zip(&counts) {
            if c > 0 {
                *v /= c as f32;
            }
        }
    }

    let mut pixels = Vec::with_capacity(3 * w * h);
    for _ in 0..3 {
        pixels.extend_from_slice(&plane);
    }
    Ok((
        BevImage {
            width: w,
            height: h,
            pixels,
            source_frame_id,
        },
        stats,
    ))
}

pub fn rasterize(
    cloud: &PointCloud,
    config: &BevConfig,
    source_frame_id: u64,
) -> Result<BevImage, BevError> {
    rasterize_with_stats(cloud, config, source_frame_id).map(|(img, _)| img)
}

/// Exact z-axis rotation of the cloud; z and intensity are unchanged.
pub fn rotate_cloud(cloud: &PointCloud, angle: f32) -> PointCloud {
    let (s, c) = angle.sin_cos();
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| Point {
                x: c * p.x - s * p.y,
                y: s * p.x + c * p.y,
                z: p.z,
                intensity: p.intensity,
            })
            .collect(),
    }
}

/// Debug dump as 8-bit grayscale PGM (value = round(255 * pixel)).
pub fn write_pgm(image: &BevImage, path: &std::path::Path) -> Result<(), BevError> {
    let mut buf = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.extend(
        image
            .channel()
            .iter()
            .map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8),
    );
    std::fs::write(path, buf).map_err(|source| BevError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(points: &[(f32, f32, f32, f32)]) -> PointCloud {
        PointCloud {
            points: points
                .iter()
                .map(|&(x, y, z, intensity)| Point { x, y, z, intensity })
                .collect(),
        }
    }

    #[test]
    fn single_point_lands_in_center_cell() {
        let img = rasterize(&cloud(&[(0.0, 0.0, 0.0, 0.8)]), &BevConfig::default(), 0).unwrap();
        let ch = img.channel();
        assert_eq!(ch[128 * 256 + 128], 0.8);
        assert_eq!(ch.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn out_of_extent_point_is_dropped() {
        let (img, stats) =
            rasterize_with_stats(&cloud(&[(100.0, 0.0, 0.0, 0.5)]), &BevConfig::default(), 0)
                .unwrap();
        assert!(img.pixels.iter().all(|&v| v == 0.0));
        assert_eq!(stats.dropped, 1);
    }

    #[test]
    fn max_rule_takes_largest_intensity() {
        let img = rasterize(
            &cloud(&[(0.0, 0.0, 0.0, 0.3), (-0.01, 0.01, 0.0, 0.9)]),
            &BevConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(img.channel()[128 * 256 + 128], 0.9);
    }

    #[test]
    fn mean_rule_averages() {
        let cfg = BevConfig {
            accumulation: Accumulation::Mean,
            ..Default::default()
        };
        let img = rasterize(&cloud(&[(0.0, 0.0, 0.0, 0.2), (-0.01, 0.01, 0.0, 0.6)]), &cfg, 0)
            .unwrap();
        assert!((img.channel()[128 * 256 + 128] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn intensity_outside_unit_range_is_clamped() {
        let (img, stats) =
            rasterize_with_stats(&cloud(&[(0.0, 0.0, 0.0, 1.7)]), &BevConfig::default(), 0)
                .unwrap();
        assert_eq!(img.channel()[128 * 256 + 128], 1.0);
        assert_eq!(stats.clamped, 1);
    }

    #[test]
    fn z_crop_drops_points() {
        let (_, stats) =
            rasterize_with_stats(&cloud(&[(0.0, 0.0, 5.0, 0.5)]), &BevConfig::default(), 0)
                .unwrap();
        assert_eq!(stats.dropped, 1);
    }

    #[test]
    fn channels_are_replicated() {
        let img = rasterize(&cloud(&[(1.0, -2.0, 0.0, 0.4)]), &BevConfig::default(), 0).unwrap();
        let n = img.width * img.height;
        assert_eq!(&img.pixels[..n], &img.pixels[n..2 * n]);
        assert_eq!(&img.pixels[..n], &img.pixels[2 * n..]);
    }

    #[test]
    fn rotate_cloud_basics() {
        let c = cloud(&[(1.0, 0.0, 0.3, 0.5)]);
        let same = rotate_cloud(&c, 0.0);
        assert_eq!(same, c);

        let quarter = rotate_cloud(&c, std::f32::consts::FRAC_PI_2);
        assert!((quarter.points[0].x - 0.0).abs() < 1e-6);
        assert!((quarter.points[0].y - 1.0).abs() < 1e-6);
        assert_eq!(quarter.points[0].z, 0.3);

        let full = rotate_cloud(&c, std::f32::consts::TAU);
        assert!((full.points[0].x - 1.0).abs() < 1e-5);
        assert!((full.points[0].y - 0.0).abs() < 1e-5);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = BevConfig {
            z_min: 1.0,
            z_max: -1.0,
            ..Default::default()
        };
        assert!(rasterize(&cloud(&[]), &cfg, 0).is_err());
    }

    // Rotating the cloud then rasterizing should approximately equal rotating
    // the raster about its center; cell-boundary effects allowed.
    #[test]
    fn cloud_rotation_matches_image_rotation() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<(f32, f32, f32, f32)> = (0..20)
            .map(|_| {
                (
                    rng.gen_range(-30.0..30.0),
                    rng.gen_range(-30.0..30.0),
                    0.0,
                    rng.gen_range(0.2f32..1.0),
                )
            })
            .collect();
        let c = cloud(&pts);
        let cfg = BevConfig::default();
        let angle = std::f32::consts::FRAC_PI_2; // exact 90 deg image rotation
        let rotated_cloud_img = rasterize(&rotate_cloud(&c, angle), &cfg, 0).unwrap();
        let base = rasterize(&c, &cfg, 0).unwrap();

        // rotate base image by 90 deg CCW in the world = map each nonzero cell
        let n = cfg.width;
        let mut agree = 0usize;
        let mut nonzero = 0usize;
        let rot = rotated_cloud_img.channel();
        let b = base.channel();
        for row in 0..n {
            for col in 0..n {
                let v = b[row * n + col];
                if v == 0.0 {
                    continue;
                }
                nonzero += 1;
                // world coords of cell center
                let half = cfg.extent_m / 2.0;
                let res = cfg.extent_m / n as f32;
                let x = half - (row as f32 + 0.5) * res;
                let y = (col as f32 + 0.5) * res - half;
                let (xr, yr) = (-y, x); // rotate by pi/2
                let r2 = ((half - xr) / res).floor() as usize;
                let c2 = ((yr + half) / res).floor() as usize;
                if r2 < n && c2 < n && (rot[r2 * n + c2] - v).abs() < 1e-6 {
                    agree += 1;
                }
            }
        }
        assert!(nonzero > 0);
        assert!(
            agree as f32 >= 0.95 * nonzero as f32,
            "only {agree}/{nonzero} cells agree"
        );
    }

    proptest! {
        #[test]
        fn max_rasterization_is_permutation_invariant(
            seed in 0u64..1000,
        ) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pts: Vec<Point> = (0..50)
                .map(|_| Point {
                    x: rng.gen_range(-45.0..45.0),
                    y: rng.gen_range(-45.0..45.0),
                    z: rng.gen_range(-4.0..4.0),
                    intensity: rng.gen_range(0.0f32..1.0),
                })
                .collect();
            let cfg = BevConfig::default();
            let a = rasterize(&PointCloud { points: pts.clone() }, &cfg, 0).unwrap();
            pts.shuffle(&mut rng);
            let b = rasterize(&PointCloud { points: pts }, &cfg, 0).unwrap();
            prop_assert_eq!(a.pixels, b.pixels);
        }

        #[test]
        fn pixels_stay_in_unit_range(seed in 0u64..1000) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point> = (0..30)
                .map(|_| Point {
                    x: rng.gen_range(-50.0..50.0),
                    y: rng.gen_range(-50.0..50.0),
                    z: rng.gen_range(-5.0..5.0),
                    intensity: rng.gen_range(-0.5f32..2.0),
                })
                .collect();
            let img = rasterize(&PointCloud { points: pts }, &BevConfig::default(), 0).unwrap();
            prop_assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
