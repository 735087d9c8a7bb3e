//! Episode generation under a random policy and the `RSMD` dataset file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RSMD" | u16 version
//! u8 env kind | u8 split | u32 episode count | u32 episode length | u64 seed
//! u8 object count | f64 radius | object count x (u8 shape, u8 color)
//! per episode: u64 episode seed | frames (row-major RGB bytes) | actions (u8 object, u8 direction)
//! u32 crc32 of every preceding byte
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::balls::{balls_init, balls_render, balls_step};
use super::frame::{Frame, FRAME_BYTES};
use super::grid::{grid_init, grid_render, grid_step, Direction, GridAction, ObjectSpec, ShapeKind, GRID_SIZE, PALETTE_SPECS};
use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader};
use crate::scalar::Scalar;

pub const DATASET_MAGIC: &[u8; 4] = b"RSMD";
pub const DATASET_VERSION: u16 = 1;
/// Transitions per generated episode.
pub const EPISODE_LEN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Shapes,
    Balls,
}

impl EnvKind {
    pub fn code(self) -> u8 {
        match self {
            EnvKind::Shapes => 0,
            EnvKind::Balls => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(EnvKind::Shapes),
            1 => Some(EnvKind::Balls),
            _ => None,
        }
    }

    /// Frames stacked on the channel axis to form one observation.
    pub fn input_frames(self) -> usize {
        match self {
            EnvKind::Shapes => 1,
            EnvKind::Balls => 2,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::Shapes => 4,
            EnvKind::Balls => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Shapes => "shapes",
            EnvKind::Balls => "balls",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(EnvKind::Shapes),
            "balls" => Ok(EnvKind::Balls),
            _ => Err(Error::InvalidArgument(format!("unknown env {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
    TestIid,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Eval, Split::TestIid, Split::TestOod];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::TestIid => "test-iid",
            Split::TestOod => "test-ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}")))
    }
}

/// Environment parameters for one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Objects (Shapes) or balls (Balls).
    pub objects: usize,
    /// Ball radius in pixels; zero for Shapes.
    pub radius: f64,
}

impl EnvConfig {
    /// Shapes: 5 objects, 3 for OOD. Balls: 3 balls of radius 4, 5 for eval, 3 for OOD.
    pub fn for_split(kind: EnvKind, split: Split) -> Self {
        match kind {
            EnvKind::Shapes => Self {
                kind,
                objects: if split == Split::TestOod { 3 } else { 5 },
                radius: 0.0,
            },
            EnvKind::Balls => Self {
                kind,
                objects: 3,
                radius: match split {
                    Split::Train | Split::TestIid => 4.0,
                    Split::Eval => 5.0,
                    Split::TestOod => 3.0,
                },
            },
        }
    }

    pub fn validate_for(&self, split: Split) -> Result<()> {
        let expected = Self::for_split(self.kind, split);
        if *self != expected {
            return Err(Error::InvalidArgument(format!(
                "{} split of {} expects {} objects, radius {}; got {} objects, radius {}",
                split, self.kind, expected.objects, expected.radius, self.objects, self.radius
            )));
        }
        Ok(())
    }

    pub fn object_specs(&self) -> Vec<ObjectSpec> {
        match self.kind {
            EnvKind::Shapes => (0..self.objects).map(|i| PALETTE_SPECS[i % PALETTE_SPECS.len()]).collect(),
            EnvKind::Balls => (0..self.objects)
                .map(|i| ObjectSpec {
                    shape: ShapeKind::Circle,
                    color: i as u8,
                })
                .collect(),
        }
    }
}

/// Episode counts per split: Shapes 1k/10k/10k, Balls 5k/1k/1k.
pub fn default_count(kind: EnvKind, split: Split) -> usize {
    match (kind, split) {
        (EnvKind::Shapes, Split::Train) => 1_000,
        (EnvKind::Shapes, _) => 10_000,
        (EnvKind::Balls, Split::Train) => 5_000,
        (EnvKind::Balls, _) => 1_000,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub kind: EnvKind,
    pub frames: Vec<Frame>,
    /// One per transition for Shapes; empty for Balls.
    pub actions: Vec<GridAction>,
    pub object_count: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Episode {
    pub fn transitions(&self) -> usize {
        self.frames.len() - self.kind.input_frames()
    }

    pub fn is_consistent(&self) -> bool {
        let t = self.transitions();
        match self.kind {
            EnvKind::Shapes => self.actions.len() == t,
            EnvKind::Balls => self.actions.is_empty(),
        }
    }

    pub fn observation(&self, t: usize) -> &[Frame] {
        &self.frames[t..t + self.kind.input_frames()]
    }

    /// Writes observation `t` as stacked channels-first values in `[0, 1]`.
    pub fn write_observation<F: Scalar>(&self, t: usize, out: &mut [F]) {
        for (i, frame) in self.observation(t).iter().enumerate() {
            frame.write_chw(&mut out[i * FRAME_BYTES..(i + 1) * FRAME_BYTES]);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub config: EnvConfig,
    pub split: Split,
    pub episode_len: usize,
    pub seed: u64,
    pub specs: Vec<ObjectSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of episode `index` of `split`, derived from the master seed by a counter.
pub fn episode_seed(master: u64, split: Split, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(((split.code() as u64) << 40) | index as u64))
}

/// One random-policy rollout of `episode_len` transitions.
pub fn generate_episode(config: &EnvConfig, episode_len: usize, seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(episode_len + config.kind.input_frames());
    let mut actions = Vec::new();
    match config.kind {
        EnvKind::Shapes => {
            let mut state = grid_init(config.objects, GRID_SIZE, &mut rng)?;
            frames.push(grid_render(&state));
            for _ in 0..episode_len {
                let action = GridAction {
                    object: rng.gen_range(0..config.objects),
                    direction: Direction::from_index(rng.gen_range(0..4)).unwrap(),
                };
                state = grid_step(&state, action);
                actions.push(action);
                frames.push(grid_render(&state));
            }
        }
        EnvKind::Balls => {
            let mut state = balls_init(config.objects, config.radius, &mut rng)?;
            frames.push(balls_render(&state));
            for _ in 0..=episode_len {
                state = balls_step(&state);
                frames.push(balls_render(&state));
            }
        }
    }
    Ok(Episode {
        kind: config.kind,
        frames,
        actions,
        object_count: config.objects,
        radius: config.radius,
        seed,
    })
}

/// `count` episodes for `split`; a pure function of the arguments.
pub fn generate_dataset(
    config: &EnvConfig,
    split: Split,
    count: usize,
    episode_len: usize,
    seed: u64,
) -> Result<Dataset> {
    config.validate_for(split)?;
    if count == 0 || episode_len == 0 {
        return Err(Error::InvalidArgument("count and episode length must be positive".into()));
    }
    let episodes = (0..count)
        .into_par_iter()
        .map(|i| generate_episode(config, episode_len, episode_seed(seed, split, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            config: *config,
            split,
            episode_len,
            seed,
            specs: config.object_specs(),
        },
        episodes,
    })
}

impl Dataset {
    pub fn kind(&self) -> EnvKind {
        self.header.config.kind
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// First `count` episodes, header unchanged.
    pub fn truncated(&self, count: usize) -> Dataset {
        Dataset {
            header: self.header.clone(),
            episodes: self.episodes.iter().take(count).cloned().collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let frames_per = h.episode_len + h.config.kind.input_frames();
        let mut out = Vec::with_capacity(64 + self.episodes.len() * (8 + frames_per * FRAME_BYTES + 2 * h.episode_len));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(h.config.kind.code());
        out.push(h.split.code());
        out.extend_from_slice(&(self.episodes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(h.episode_len as u32).to_le_bytes());
        out.extend_from_slice(&h.seed.to_le_bytes());
        out.push(h.config.objects as u8);
        out.extend_from_slice(&h.config.radius.to_le_bytes());
        for spec in &h.specs {
            out.push(spec.shape.code());
            out.push(spec.color);
        }
        for ep in &self.episodes {
            out.extend_from_slice(&ep.seed.to_le_bytes());
            for f in &ep.frames {
                out.extend_from_slice(f.pixels());
            }
            for a in &ep.actions {
                out.push(a.object as u8);
                out.push(a.direction.index() as u8);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != DATASET_MAGIC {
            return Err(Error::format(path, "not a dataset file (bad magic)"));
        }
        let mut r = ByteReader::new(path, bytes);
        r.take(4)?;
        let version = r.u16()?;
        if version != DATASET_VERSION {
            return Err(Error::format(path, format!("unsupported dataset version {version}")));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::format(path, "checksum mismatch"));
        }
        let mut r = ByteReader::new(path, body);
        r.take(6)?;
        let kind = EnvKind::from_code(r.u8()?).ok_or_else(|| Error::format(path, "unknown env kind"))?;
        let split = Split::from_code(r.u8()?).ok_or_else(|| Error::format(path, "unknown split"))?;
        let count = r.u32()? as usize;
        let episode_len = r.u32()? as usize;
        let seed = r.u64()?;
        let objects = r.u8()? as usize;
        let radius = r.f64()?;
        let mut specs = Vec::with_capacity(objects);
        for _ in 0..objects {
            let shape = ShapeKind::from_code(r.u8()?).ok_or_else(|| Error::format(path, "unknown shape"))?;
            specs.push(ObjectSpec { shape, color: r.u8()? });
        }
        let config = EnvConfig { kind, objects, radius };
        let frames_per = episode_len + kind.input_frames();
        let actions_per = if kind == EnvKind::Shapes { episode_len } else { 0 };
        let mut episodes = Vec::with_capacity(count);
        for _ in 0..count {
            let ep_seed = r.u64()?;
            let mut frames = Vec::with_capacity(frames_per);
            for _ in 0..frames_per {
                frames.push(Frame::from_bytes(r.take(FRAME_BYTES)?.to_vec())?);
            }
            let mut actions = Vec::with_capacity(actions_per);
            for _ in 0..actions_per {
                let object = r.u8()? as usize;
                let direction = Direction::from_index(r.u8()? as usize)
                    .ok_or_else(|| Error::format(path, "unknown direction"))?;
                if object >= objects {
                    return Err(Error::format(path, "action targets a missing object"));
                }
                actions.push(GridAction { object, direction });
            }
            episodes.push(Episode {
                kind,
                frames,
                actions,
                object_count: objects,
                radius,
                seed: ep_seed,
            });
        }
        if !r.is_empty() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Dataset {
            header: DatasetHeader {
                config,
                split,
                episode_len,
                seed,
                specs,
            },
            episodes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_parameters() {
        assert_eq!(EnvConfig::for_split(EnvKind::Shapes, Split::TestOod).objects, 3);
        assert_eq!(EnvConfig::for_split(EnvKind::Shapes, Split::Train).objects, 5);
        assert_eq!(EnvConfig::for_split(EnvKind::Balls, Split::TestOod).radius, 3.0);
        assert_eq!(EnvConfig::for_split(EnvKind::Balls, Split::Eval).radius, 5.0);
        assert_eq!(EnvConfig::for_split(EnvKind::Balls, Split::TestIid).radius, 4.0);
    }

    #[test]
    fn mismatched_split_config_rejected() {
        let cfg = EnvConfig::for_split(EnvKind::Shapes, Split::Train);
        assert!(generate_dataset(&cfg, Split::TestOod, 2, 3, 0).is_err());
    }

    #[test]
    fn shapes_episode_shape() {
        let cfg = EnvConfig::for_split(EnvKind::Shapes, Split::Train);
        let ds = generate_dataset(&cfg, Split::Train, 4, EPISODE_LEN, 1).unwrap();
        for ep in &ds.episodes {
            assert_eq!(ep.frames.len(), 11);
            assert_eq!(ep.actions.len(), 10);
            assert!(ep.is_consistent());
        }
    }

    #[test]
    fn balls_episode_shape() {
        let cfg = EnvConfig::for_split(EnvKind::Balls, Split::TestOod);
        let ds = generate_dataset(&cfg, Split::TestOod, 3, EPISODE_LEN, 1).unwrap();
        for ep in &ds.episodes {
            assert_eq!(ep.frames.len(), 12);
            assert!(ep.actions.is_empty());
            assert_eq!(ep.radius, 3.0);
            assert_eq!(ep.transitions(), 10);
        }
    }

    #[test]
    fn corrupted_file_fails_checksum() {
        let cfg = EnvConfig::for_split(EnvKind::Shapes, Split::Train);
        let ds = generate_dataset(&cfg, Split::Train, 2, 2, 1).unwrap();
        let mut bytes = ds.to_bytes();
        bytes[100] ^= 1;
        let err = Dataset::from_bytes(Path::new("d"), &bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"));
        let mut bytes = ds.to_bytes();
        bytes[4] = 7;
        assert!(Dataset::from_bytes(Path::new("d"), &bytes).unwrap_err().to_string().contains("version"));
    }
}
