//! Synthetic "moving actors" clips with keyframe ground truth.
//!
//! Each actor is a textured rectangle that translates and scales at a
//! constant rate. Motion classes are decidable from the actor's own box over
//! time; context classes depend on where the other actors are; the
//! `reappearing` class depends on earlier clips of the same long video.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stmixer_tensor::Tensor;

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const CLASS_NAMES: [&str; 8] = [
    "move_left",
    "move_right",
    "grow",
    "shrink",
    "fast",
    "near_other",
    "alone",
    "reappearing",
];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

pub const MOVE_LEFT: usize = 0;
pub const MOVE_RIGHT: usize = 1;
pub const GROW: usize = 2;
pub const SHRINK: usize = 3;
pub const FAST: usize = 4;
pub const NEAR_OTHER: usize = 5;
pub const ALONE: usize = 6;
pub const REAPPEARING: usize = 7;

/// Classes decidable from one actor's own trajectory.
pub const BOX_LOCAL_CLASSES: [usize; 5] = [MOVE_LEFT, MOVE_RIGHT, GROW, SHRINK, FAST];
/// Classes that depend on the other actors in the keyframe.
pub const CONTEXT_CLASSES: [usize; 2] = [NEAR_OTHER, ALONE];

const HORIZONTAL_SPEEDS: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];
const VERTICAL_SPEEDS: [f64; 3] = [-0.5, 0.0, 0.5];
const GROWTH_RATES: [f64; 3] = [-0.05, 0.0, 0.05];
const MAX_OVERLAP: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_actors: usize,
    pub max_actors: usize,
    /// Keyframe actor width range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Context distance as a multiple of the mean keyframe actor width.
    pub near_factor: f64,
    /// Amplitude of uniform background noise.
    pub noise: f64,
    /// Number of distinguishable actor textures.
    pub identities: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 64,
            width: 64,
            min_actors: 1,
            max_actors: 3,
            min_size: 10.0,
            max_size: 18.0,
            near_factor: 1.5,
            noise: 0.05,
            identities: 6,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("clip sizes must be positive"));
        }
        if self.frames % 2 != 0 {
            return Err(Error::config("frame count must be even"));
        }
        if self.min_actors == 0 || self.min_actors > self.max_actors {
            return Err(Error::config("need 1 <= min_actors <= max_actors"));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::config("need 0 < min_size <= max_size"));
        }
        if self.identities < self.max_actors {
            return Err(Error::config("identities must be at least max_actors"));
        }
        Ok(())
    }

    pub fn keyframe_index(&self) -> usize {
        self.frames / 2
    }

    /// Canonical text form; the manifest hash is computed over it.
    pub fn canonical(&self) -> String {
        format!(
            "frames={}\nheight={}\nwidth={}\nmin_actors={}\nmax_actors={}\nmin_size={:?}\nmax_size={:?}\nnear_factor={:?}\nnoise={:?}\nidentities={}\n",
            self.frames,
            self.height,
            self.width,
            self.min_actors,
            self.max_actors,
            self.min_size,
            self.max_size,
            self.near_factor,
            self.noise,
            self.identities
        )
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Generative parameters of one actor, relative to the keyframe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorTrack {
    pub identity: usize,
    pub center: (f64, f64),
    pub size: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Relative size change per frame.
    pub growth: f64,
}

impl ActorTrack {
    /// Box at frame offset `dt` from the keyframe.
    pub fn box_at(&self, dt: f64) -> BBox {
        let cx = self.center.0 + self.velocity.0 * dt;
        let cy = self.center.1 + self.velocity.1 * dt;
        let s = 1.0 + self.growth * dt;
        let (hw, hh) = (self.size.0 * s / 2.0, self.size.1 * s / 2.0);
        BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    pub fn motion_labels(&self) -> Vec<usize> {
        let mut labels = Vec::new();
        if self.velocity.0 < 0.0 {
            labels.push(MOVE_LEFT);
        }
        if self.velocity.0 > 0.0 {
            labels.push(MOVE_RIGHT);
        }
        if self.growth > 0.0 {
            labels.push(GROW);
        }
        if self.growth < 0.0 {
            labels.push(SHRINK);
        }
        if self.velocity.0.abs() >= 2.0 {
            labels.push(FAST);
        }
        labels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    /// Sorted class indices, never empty.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    /// `[1, T, H, W]` intensities in `[0, 1]`.
    pub video: Tensor,
    pub gt: Vec<GroundTruth>,
    pub keyframe_index: usize,
    pub actors: Vec<ActorTrack>,
    pub seed: u64,
}

/// splitmix64 step, for deriving independent per-item seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn overlap_fraction(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    w.max(0.0) * h.max(0.0) / a.area().min(b.area())
}

/// Context labels from keyframe geometry: `near_other` when some other
/// actor's center lies within `near_factor` mean widths, otherwise `alone`.
pub fn context_labels(boxes: &[BBox], near_factor: f64) -> Vec<usize> {
    let mean_width = boxes.iter().map(BBox::width).sum::<f64>() / boxes.len().max(1) as f64;
    let d_near = near_factor * mean_width;
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (cx, cy) = b.center();
            let near = boxes.iter().enumerate().any(|(j, o)| {
                let (ox, oy) = o.center();
                j != i && (cx - ox).hypot(cy - oy) <= d_near
            });
            if near {
                NEAR_OTHER
            } else {
                ALONE
            }
        })
        .collect()
}

/// Per clip, per actor: whether its identity occurred in an earlier clip.
pub fn reappearing_flags(identities: &[Vec<usize>]) -> Vec<Vec<bool>> {
    let mut seen = std::collections::BTreeSet::new();
    identities
        .iter()
        .map(|clip| {
            let flags = clip.iter().map(|id| seen.contains(id)).collect();
            seen.extend(clip.iter().copied());
            flags
        })
        .collect()
}

fn sample_actors(
    rng: &mut ChaCha8Rng,
    cfg: &GeneratorConfig,
    identities: &[usize],
) -> Result<Vec<ActorTrack>> {
    let kf = cfg.keyframe_index() as f64;
    let before = kf;
    let after = (cfg.frames - 1) as f64 - kf;
    let mut actors: Vec<ActorTrack> = Vec::with_capacity(identities.len());
    for &identity in identities {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.random_range(cfg.min_size..=cfg.max_size);
            let h = w * rng.random_range(1.0..=1.6);
            let vx = HORIZONTAL_SPEEDS[rng.random_range(0..HORIZONTAL_SPEEDS.len())];
            let vy = VERTICAL_SPEEDS[rng.random_range(0..VERTICAL_SPEEDS.len())];
            let growth = GROWTH_RATES[rng.random_range(0..GROWTH_RATES.len())];
            // largest extent over the clip, so every frame stays in bounds
            let smax = (1.0 + growth * before).max(1.0 - growth * after).max(1.0 + growth * after);
            let mx = w * smax / 2.0 + vx.abs() * before.max(after);
            let my = h * smax / 2.0 + vy.abs() * before.max(after);
            let (fw, fh) = (cfg.width as f64, cfg.height as f64);
            if 2.0 * mx >= fw || 2.0 * my >= fh {
                continue;
            }
            let cx = rng.random_range(mx..=fw - mx);
            let cy = rng.random_range(my..=fh - my);
            let cand = ActorTrack {
                identity,
                center: (cx, cy),
                size: (w, h),
                velocity: (vx, vy),
                growth,
            };
            let kb = cand.box_at(0.0);
            if actors
                .iter()
                .all(|a| overlap_fraction(&a.box_at(0.0), &kb) <= MAX_OVERLAP)
            {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(a) => actors.push(a),
            None => {
                return Err(Error::Generation(format!(
                    "could not place {} actors in a {}x{} frame with at most {:.0}% overlap",
                    identities.len(),
                    cfg.width,
                    cfg.height,
                    MAX_OVERLAP * 100.0
                )))
            }
        }
    }
    Ok(actors)
}

/// Texture of an identity: base intensity and stripe period.
fn texture(identity: usize) -> (f64, usize) {
    let level = 0.45 + 0.1 * (identity % 6) as f64;
    let period = 2 + (identity / 2) % 3;
    (level, period)
}

fn render(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, actors: &[ActorTrack]) -> Tensor {
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let kf = cfg.keyframe_index() as f64;
    let mut data: Vec<f64> = (0..t * h * w).map(|_| rng.random::<f64>() * cfg.noise).collect();
    for f in 0..t {
        for a in actors {
            let b = a.box_at(f as f64 - kf);
            let (level, period) = texture(a.identity);
            let y0 = b.y1.floor().max(0.0) as usize;
            let y1 = (b.y2.ceil() as usize).min(h);
            let x0 = b.x1.floor().max(0.0) as usize;
            let x1 = (b.x2.ceil() as usize).min(w);
            for py in y0..y1 {
                let yc = py as f64 + 0.5;
                if yc < b.y1 || yc >= b.y2 {
                    continue;
                }
                let stripe = ((yc - b.y1) as usize / period) % 2;
                let v = level * if stripe == 0 { 1.0 } else { 0.7 };
                for px in x0..x1 {
                    let xc = px as f64 + 0.5;
                    if xc >= b.x1 && xc < b.x2 {
                        data[(f * h + py) * w + px] = v;
                    }
                }
            }
        }
    }
    Tensor::new([1, t, h, w], data).expect("sized by construction")
}

fn assemble(
    rng: &mut ChaCha8Rng,
    cfg: &GeneratorConfig,
    actors: Vec<ActorTrack>,
    reappearing: &[bool],
    seed: u64,
) -> ClipSample {
    let video = render(rng, cfg, &actors);
    let boxes: Vec<BBox> = actors.iter().map(|a| a.box_at(0.0)).collect();
    let context = context_labels(&boxes, cfg.near_factor);
    let gt = actors
        .iter()
        .zip(&boxes)
        .zip(&context)
        .zip(reappearing)
        .map(|(((a, b), &c), &re)| {
            let mut labels = a.motion_labels();
            labels.push(c);
            if re {
                labels.push(REAPPEARING);
            }
            labels.sort_unstable();
            GroundTruth { bbox: *b, labels }
        })
        .collect();
    ClipSample {
        video,
        gt,
        keyframe_index: cfg.keyframe_index(),
        actors,
        seed,
    }
}

fn pick_identities(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Vec<usize> {
    let count = rng.random_range(cfg.min_actors..=cfg.max_actors);
    let mut pool: Vec<usize> = (0..cfg.identities).collect();
    (0..count)
        .map(|_| pool.swap_remove(rng.random_range(0..pool.len())))
        .collect()
}

pub fn generate_clip(seed: u64, cfg: &GeneratorConfig) -> Result<ClipSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = pick_identities(&mut rng, cfg);
    let actors = sample_actors(&mut rng, cfg, &ids)?;
    let flags = vec![false; actors.len()];
    Ok(assemble(&mut rng, cfg, actors, &flags, seed))
}

/// A sequence of clips from one video; identities recur across clips and
/// an actor is `reappearing` when its identity occurred in an earlier clip.
pub fn generate_long_video(seed: u64, n_clips: usize, cfg: &GeneratorConfig) -> Result<Vec<ClipSample>> {
    cfg.validate()?;
    if n_clips == 0 {
        return Err(Error::config("a long video needs at least one clip"));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n_clips)
        .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64)))
        .collect();
    let ids: Vec<Vec<usize>> = rngs.iter_mut().map(|r| pick_identities(r, cfg)).collect();
    let flags = reappearing_flags(&ids);
    rngs.into_iter()
        .zip(ids)
        .zip(flags)
        .enumerate()
        .map(|(i, ((mut rng, ids), flags))| {
            let actors = sample_actors(&mut rng, cfg, &ids)?;
            Ok(assemble(&mut rng, cfg, actors, &flags, derive_seed(seed, i as u64)))
        })
        .collect()
}

/// How a dataset was produced; enough to regenerate it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DatasetKind {
    Clips,
    LongVideos { clips_per_video: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub seed: u64,
    pub cfg_hash: String,
    /// Video index and clip position for long-video datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<(usize, usize)>,
    pub labels: Vec<Vec<String>>,
}

/// A dataset regenerable from a base seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub base_seed: u64,
    pub count: usize,
    pub kind: DatasetKind,
    pub cfg: GeneratorConfig,
}

impl DatasetSpec {
    pub fn clips(base_seed: u64, count: usize, cfg: GeneratorConfig) -> Self {
        Self {
            base_seed,
            count,
            kind: DatasetKind::Clips,
            cfg,
        }
    }

    pub fn long_videos(base_seed: u64, videos: usize, clips_per_video: usize, cfg: GeneratorConfig) -> Self {
        Self {
            base_seed,
            count: videos,
            kind: DatasetKind::LongVideos { clips_per_video },
            cfg,
        }
    }

    /// Clips grouped by video; a plain clip dataset yields one-clip groups.
    pub fn generate(&self) -> Result<Vec<Vec<ClipSample>>> {
        (0..self.count)
            .map(|i| {
                let seed = derive_seed(self.base_seed, i as u64);
                match self.kind {
                    DatasetKind::Clips => Ok(vec![generate_clip(seed, &self.cfg)?]),
                    DatasetKind::LongVideos { clips_per_video } => {
                        generate_long_video(seed, clips_per_video, &self.cfg)
                    }
                }
            })
            .collect()
    }

    pub fn manifest(&self) -> Result<Vec<ManifestRecord>> {
        let hash = self.cfg.hash();
        let videos = self.generate()?;
        let long = matches!(self.kind, DatasetKind::LongVideos { .. });
        let mut out = Vec::new();
        for (v, clips) in videos.iter().enumerate() {
            for (c, clip) in clips.iter().enumerate() {
                out.push(ManifestRecord {
                    index: out.len(),
                    seed: clip.seed,
                    cfg_hash: hash.clone(),
                    video: long.then_some((v, c)),
                    labels: clip
                        .gt
                        .iter()
                        .map(|g| g.labels.iter().map(|&l| CLASS_NAMES[l].to_string()).collect())
                        .collect(),
                });
            }
        }
        Ok(out)
    }
}

/// Manifest file: a JSON header line with the dataset spec, then one JSON
/// record per clip.
pub fn write_manifest(path: &Path, spec: &DatasetSpec) -> Result<usize> {
    let records = spec.manifest()?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", serde_json::to_string(spec).map_err(|e| Error::Format(e.to_string()))?)?;
    for r in &records {
        writeln!(out, "{}", serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?)?;
    }
    out.flush()?;
    Ok(records.len())
}

pub fn read_manifest(path: &Path) -> Result<(DatasetSpec, Vec<ManifestRecord>)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty manifest", path.display())))??;
    let spec: DatasetSpec =
        serde_json::from_str(&head).map_err(|e| Error::Format(format!("manifest header: {e}")))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("manifest record {i}: {e}")))?,
        );
    }
    Ok((spec, records))
}
