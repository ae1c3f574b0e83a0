//! Line-oriented text tractograms.
//!
//! The first non-empty line is a JSON header object:
//!
//! ```text
//! {"format":"tractscl-text","scalars":["FA"],"voxel_size":[1,1,1],"dim":[1,1,1],"vox_to_ras":[[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}
//! ```
//!
//! Only `scalars` is required. Every following line is one streamline:
//!
//! ```text
//! {"points":[[0,0,0],[1,0,0],[2,0,0]],"fa":[0.2,0.4,0.6]}
//! ```
//!
//! Each declared channel appears under its lower-cased name. Floats are
//! written in shortest round-trip form, so reading back is exact.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Result, Streamline, TractIoError, Tractogram, TrkExtras, IDENTITY_AFFINE};

const FORMAT_TAG: &str = "tractscl-text";

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    format: Option<String>,
    scalars: Vec<String>,
    #[serde(default = "default_voxel_size")]
    voxel_size: [f32; 3],
    #[serde(default = "default_dim")]
    dim: [i16; 3],
    #[serde(default = "default_affine")]
    vox_to_ras: [[f32; 4]; 4],
    #[serde(default)]
    origin: [f32; 3],
}

fn default_voxel_size() -> [f32; 3] {
    [1.0; 3]
}

fn default_dim() -> [i16; 3] {
    [1; 3]
}

fn default_affine() -> [[f32; 4]; 4] {
    IDENTITY_AFFINE
}

pub fn read_text(src: &str) -> Result<Tractogram> {
    let mut lines = src
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (header_line, header_src) = lines.next().ok_or(TractIoError::ParseError {
        line: 1,
        message: "missing header line".into(),
    })?;
    let header: Header = serde_json::from_str(header_src).map_err(|e| TractIoError::ParseError {
        line: header_line,
        message: format!("header: {e}"),
    })?;
    if let Some(tag) = &header.format {
        if tag != FORMAT_TAG {
            return Err(TractIoError::ParseError {
                line: header_line,
                message: format!("unknown format tag {tag:?}"),
            });
        }
    }
    let keys: Vec<String> = header.scalars.iter().map(|s| s.to_lowercase()).collect();

    let mut t = Tractogram {
        streamlines: Vec::new(),
        scalar_names: header.scalars,
        voxel_size: header.voxel_size,
        vox_to_ras: header.vox_to_ras,
        dim: header.dim,
        extras: TrkExtras {
            origin: header.origin,
            ..TrkExtras::default()
        },
    };

    for (line, record) in lines {
        let parse_err = |message: String| TractIoError::ParseError { line, message };
        let mut obj: Map<String, Value> =
            serde_json::from_str(record).map_err(|e| parse_err(e.to_string()))?;
        let points: Vec<[f64; 3]> = match obj.remove("points") {
            Some(v) => serde_json::from_value(v).map_err(|e| parse_err(format!("points: {e}")))?,
            None => return Err(parse_err("record has no \"points\"".into())),
        };
        if points.len() < 2 {
            return Err(parse_err(format!("{} points, need at least 2", points.len())));
        }
        let mut channels = Vec::with_capacity(keys.len());
        for key in &keys {
            let values: Vec<f64> = match obj.remove(key) {
                Some(v) => {
                    serde_json::from_value(v).map_err(|e| parse_err(format!("{key}: {e}")))?
                }
                None => return Err(parse_err(format!("record has no {key:?}"))),
            };
            if values.len() != points.len() {
                return Err(TractIoError::LengthMismatch {
                    line,
                    channel: key.clone(),
                    got: values.len(),
                    expected: points.len(),
                });
            }
            channels.push(values);
        }
        if let Some(extra) = obj.keys().next() {
            return Err(parse_err(format!("undeclared field {extra:?}")));
        }
        let scalars = if channels.is_empty() {
            Vec::new()
        } else {
            (0..points.len())
                .map(|i| channels.iter().map(|c| c[i]).collect())
                .collect()
        };
        t.streamlines.push(Streamline { points, scalars });
    }
    Ok(t)
}

pub fn write_text(t: &Tractogram) -> Result<String> {
    t.validate()?;
    let header = Header {
        format: Some(FORMAT_TAG.into()),
        scalars: t.scalar_names.clone(),
        voxel_size: t.voxel_size,
        dim: t.dim,
        vox_to_ras: t.vox_to_ras,
        origin: t.extras.origin,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    let keys: Vec<String> = t.scalar_names.iter().map(|s| s.to_lowercase()).collect();
    for s in &t.streamlines {
        let mut obj = Map::new();
        obj.insert("points".into(), serde_json::to_value(&s.points).expect("finite"));
        for (c, key) in keys.iter().enumerate() {
            let values: Vec<f64> = s.channel(c).collect();
            obj.insert(key.clone(), serde_json::to_value(values).expect("finite"));
        }
        out.push_str(&serde_json::to_string(&obj).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}
