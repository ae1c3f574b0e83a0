//! Tractography containers and their on-disk encodings.
//!
//! Two encodings are supported: TrackVis TRK version 2 (binary, little-endian)
//! and a line-oriented JSON text format that is convenient for hand-written
//! fixtures. Both preserve per-point scalar channels such as FA.

mod text;
mod trk;

pub use text::{read_text, write_text};
pub use trk::{read_trk, read_trk_with, write_trk, ReadOptions, TRK_HEADER_SIZE, TRK_MAX_CHANNELS};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TractIoError {
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("bad magic: expected \"TRACK\"")]
    BadMagic,
    #[error("unsupported TRK version {0} (only version 2 is supported)")]
    UnsupportedVersion(i32),
    #[error("header size field is {0}, expected 1000")]
    BadHeaderSize(i32),
    #[error("negative count in {what}: {value}")]
    NegativeCount { what: &'static str, value: i64 },
    #[error("{0} scalar channels requested, the TRK format holds at most 10")]
    TooManyScalarChannels(usize),
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: {channel} has {got} values for {expected} points")]
    LengthMismatch {
        line: usize,
        channel: String,
        got: usize,
        expected: usize,
    },
    #[error("streamline {index}: {reason}")]
    InvalidStreamline { index: usize, reason: String },
    #[error("vox_to_ras last row is not [0, 0, 0, 1]")]
    NotAffine,
    #[error("unrecognized tractogram extension: {0}")]
    UnknownExtension(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TractIoError>;

/// An ordered polyline in millimetres with optional per-point scalars.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Streamline {
    pub points: Vec<[f64; 3]>,
    /// One vector per point, in the channel order of the owning tractogram.
    /// Empty when the tractogram declares no channels.
    pub scalars: Vec<Vec<f64>>,
}

impl Streamline {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            scalars: Vec::new(),
        }
    }

    pub fn with_scalars(points: Vec<[f64; 3]>, scalars: Vec<Vec<f64>>) -> Self {
        Self { points, scalars }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Values of one scalar channel along the streamline.
    pub fn channel(&self, index: usize) -> impl Iterator<Item = f64> + '_ {
        self.scalars.iter().map(move |s| s[index])
    }

    /// Reversed copy; point and scalar order both flip.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        out.points.reverse();
        out.scalars.reverse();
        out
    }
}

/// TRK header fields that carry no meaning for classification but are kept
/// so a read/write cycle reproduces the file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrkExtras {
    pub origin: [f32; 3],
    pub voxel_order: [u8; 4],
    pub pad2: [u8; 4],
    pub image_orientation_patient: [f32; 6],
    pub pad1: [u8; 2],
    pub flags: [u8; 6],
}

impl Default for TrkExtras {
    fn default() -> Self {
        Self {
            origin: [0.0; 3],
            voxel_order: *b"RAS\0",
            pad2: [0; 4],
            image_orientation_patient: [0.0; 6],
            pad1: [0; 2],
            flags: [0; 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tractogram {
    pub streamlines: Vec<Streamline>,
    pub scalar_names: Vec<String>,
    pub voxel_size: [f32; 3],
    pub vox_to_ras: [[f32; 4]; 4],
    pub dim: [i16; 3],
    pub extras: TrkExtras,
}

pub const IDENTITY_AFFINE: [[f32; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

impl Default for Tractogram {
    fn default() -> Self {
        Self {
            streamlines: Vec::new(),
            scalar_names: Vec::new(),
            voxel_size: [1.0; 3],
            vox_to_ras: IDENTITY_AFFINE,
            dim: [1; 3],
            extras: TrkExtras::default(),
        }
    }
}

impl Tractogram {
    pub fn new(scalar_names: Vec<String>) -> Self {
        Self {
            scalar_names,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    /// Index of a scalar channel, matched case-insensitively.
    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.scalar_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
    }

    /// Same header, different streamlines.
    pub fn with_streamlines(&self, streamlines: Vec<Streamline>) -> Self {
        Self {
            streamlines,
            scalar_names: self.scalar_names.clone(),
            voxel_size: self.voxel_size,
            vox_to_ras: self.vox_to_ras,
            dim: self.dim,
            extras: self.extras.clone(),
        }
    }

    /// Checks the container invariants: at least two finite points per
    /// streamline, one value per channel per point, affine last row.
    pub fn validate(&self) -> Result<()> {
        let channels = self.scalar_names.len();
        for (index, s) in self.streamlines.iter().enumerate() {
            let bad = |reason: String| TractIoError::InvalidStreamline { index, reason };
            if s.points.len() < 2 {
                return Err(bad(format!("{} points, need at least 2", s.points.len())));
            }
            if s.points.iter().flatten().any(|c| !c.is_finite()) {
                return Err(bad("non-finite coordinate".into()));
            }
            if channels == 0 {
                if !s.scalars.is_empty() {
                    return Err(bad("scalars present but no channels declared".into()));
                }
            } else {
                if s.scalars.len() != s.points.len() {
                    return Err(bad(format!(
                        "{} scalar rows for {} points",
                        s.scalars.len(),
                        s.points.len()
                    )));
                }
                if s.scalars.iter().any(|row| row.len() != channels) {
                    return Err(bad(format!("expected {channels} scalar values per point")));
                }
            }
        }
        if self.vox_to_ras[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(TractIoError::NotAffine);
        }
        Ok(())
    }
}

/// Reads `.trk` or `.txt` based on the file extension.
pub fn load(path: &Path) -> Result<Tractogram> {
    match extension(path).as_str() {
        "trk" => read_trk(&std::fs::read(path)?),
        "txt" => read_text(&std::fs::read_to_string(path)?),
        other => Err(TractIoError::UnknownExtension(other.to_string())),
    }
}

/// Writes `.trk` or `.txt` based on the file extension.
pub fn save(path: &Path, tractogram: &Tractogram) -> Result<()> {
    match extension(path).as_str() {
        "trk" => std::fs::write(path, write_trk(tractogram)?)?,
        "txt" => std::fs::write(path, write_text(tractogram)?)?,
        other => return Err(TractIoError::UnknownExtension(other.to_string())),
    }
    Ok(())
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}
