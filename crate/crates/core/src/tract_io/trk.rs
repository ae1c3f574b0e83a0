//! TrackVis TRK v2 reader and writer.
//!
//! Header layout (1000 bytes, little-endian):
//!
//! | offset | field                         |
//! |-------:|-------------------------------|
//! |      0 | id_string `TRACK\0`           |
//! |      6 | dim, 3 x i16                  |
//! |     12 | voxel_size, 3 x f32           |
//! |     24 | origin, 3 x f32               |
//! |     36 | n_scalars, i16                |
//! |     38 | scalar_name, 10 x 20 bytes    |
//! |    238 | n_properties, i16             |
//! |    240 | property_name, 10 x 20 bytes  |
//! |    440 | vox_to_ras, 16 x f32          |
//! |    504 | reserved, 444 bytes           |
//! |    948 | voxel_order, 4 bytes          |
//! |    952 | pad2, 4 bytes                 |
//! |    956 | image_orientation, 6 x f32    |
//! |    980 | pad1, 2 bytes                 |
//! |    982 | invert/swap flags, 6 x u8     |
//! |    988 | n_count, i32                  |
//! |    992 | version, i32                  |
//! |    996 | hdr_size, i32                 |

use super::{Result, Streamline, TractIoError, Tractogram, TrkExtras, IDENTITY_AFFINE};

pub const TRK_HEADER_SIZE: usize = 1000;
pub const TRK_MAX_CHANNELS: usize = 10;
const NAME_LEN: usize = 20;

const OFF_DIM: usize = 6;
const OFF_VOXEL_SIZE: usize = 12;
const OFF_ORIGIN: usize = 24;
const OFF_N_SCALARS: usize = 36;
const OFF_SCALAR_NAMES: usize = 38;
const OFF_N_PROPERTIES: usize = 238;
const OFF_VOX_TO_RAS: usize = 440;
const OFF_VOXEL_ORDER: usize = 948;
const OFF_PAD2: usize = 952;
const OFF_ORIENTATION: usize = 956;
const OFF_PAD1: usize = 980;
const OFF_FLAGS: usize = 982;
const OFF_N_COUNT: usize = 988;
const OFF_VERSION: usize = 992;
const OFF_HDR_SIZE: usize = 996;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadOptions {
    /// Map stored voxel-mm coordinates to world space through `vox_to_ras`.
    pub apply_vox_to_ras: bool,
}

pub fn read_trk(bytes: &[u8]) -> Result<Tractogram> {
    read_trk_with(bytes, ReadOptions::default())
}

pub fn read_trk_with(bytes: &[u8], options: ReadOptions) -> Result<Tractogram> {
    if bytes.len() < TRK_HEADER_SIZE {
        return Err(TractIoError::TruncatedFile(format!(
            "{} bytes, header needs {TRK_HEADER_SIZE}",
            bytes.len()
        )));
    }
    let h = &bytes[..TRK_HEADER_SIZE];
    if &h[..5] != b"TRACK" {
        return Err(TractIoError::BadMagic);
    }
    let hdr_size = i32_at(h, OFF_HDR_SIZE);
    if hdr_size != TRK_HEADER_SIZE as i32 {
        return Err(TractIoError::BadHeaderSize(hdr_size));
    }
    let version = i32_at(h, OFF_VERSION);
    if version != 2 {
        return Err(TractIoError::UnsupportedVersion(version));
    }

    let n_scalars = nonnegative(i16_at(h, OFF_N_SCALARS) as i64, "n_scalars")?;
    if n_scalars > TRK_MAX_CHANNELS {
        return Err(TractIoError::TooManyScalarChannels(n_scalars));
    }
    let n_properties = nonnegative(i16_at(h, OFF_N_PROPERTIES) as i64, "n_properties")?;
    let n_count = nonnegative(i32_at(h, OFF_N_COUNT) as i64, "n_count")?;

    let scalar_names = (0..n_scalars)
        .map(|i| {
            let start = OFF_SCALAR_NAMES + i * NAME_LEN;
            let raw = &h[start..start + NAME_LEN];
            let end = raw.iter().position(|&b| b == 0).unwrap_or(NAME_LEN);
            String::from_utf8_lossy(&raw[..end]).into_owned()
        })
        .collect();

    let mut vox_to_ras = [[0f32; 4]; 4];
    for (r, row) in vox_to_ras.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f32_at(h, OFF_VOX_TO_RAS + 4 * (4 * r + c));
        }
    }
    // An all-zero matrix means "not set" in files written by older tools.
    if vox_to_ras.iter().flatten().all(|&v| v == 0.0) {
        vox_to_ras = IDENTITY_AFFINE;
    }
    if vox_to_ras[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(TractIoError::NotAffine);
    }

    let mut orientation = [0f32; 6];
    for (i, v) in orientation.iter_mut().enumerate() {
        *v = f32_at(h, OFF_ORIENTATION + 4 * i);
    }

    let mut t = Tractogram {
        streamlines: Vec::new(),
        scalar_names,
        voxel_size: [
            f32_at(h, OFF_VOXEL_SIZE),
            f32_at(h, OFF_VOXEL_SIZE + 4),
            f32_at(h, OFF_VOXEL_SIZE + 8),
        ],
        vox_to_ras,
        dim: [
            i16_at(h, OFF_DIM),
            i16_at(h, OFF_DIM + 2),
            i16_at(h, OFF_DIM + 4),
        ],
        extras: TrkExtras {
            origin: [
                f32_at(h, OFF_ORIGIN),
                f32_at(h, OFF_ORIGIN + 4),
                f32_at(h, OFF_ORIGIN + 8),
            ],
            voxel_order: h[OFF_VOXEL_ORDER..OFF_VOXEL_ORDER + 4].try_into().unwrap(),
            pad2: h[OFF_PAD2..OFF_PAD2 + 4].try_into().unwrap(),
            image_orientation_patient: orientation,
            pad1: h[OFF_PAD1..OFF_PAD1 + 2].try_into().unwrap(),
            flags: h[OFF_FLAGS..OFF_FLAGS + 6].try_into().unwrap(),
        },
    };

    let body = &bytes[TRK_HEADER_SIZE..];
    let mut pos = 0usize;
    let stride = 3 + n_scalars;
    // n_count == 0 means "unknown": read until the body is exhausted.
    let mut index = 0usize;
    while if n_count > 0 { index < n_count } else { pos < body.len() } {
        if body.len() - pos < 4 {
            return Err(TractIoError::TruncatedFile(format!(
                "track {index}: missing point count"
            )));
        }
        let n = nonnegative(i32_at(body, pos) as i64, "point count")?;
        pos += 4;
        let needed = n
            .checked_mul(stride)
            .and_then(|v| v.checked_add(n_properties))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| TractIoError::TruncatedFile(format!("track {index}: size overflow")))?;
        if body.len() - pos < needed {
            return Err(TractIoError::TruncatedFile(format!(
                "track {index}: needs {needed} bytes, {} remain",
                body.len() - pos
            )));
        }
        if n < 2 {
            return Err(TractIoError::InvalidStreamline {
                index,
                reason: format!("{n} points, need at least 2"),
            });
        }
        let mut points = Vec::with_capacity(n);
        let mut scalars = Vec::with_capacity(if n_scalars > 0 { n } else { 0 });
        for _ in 0..n {
            let x = f32_at(body, pos) as f64;
            let y = f32_at(body, pos + 4) as f64;
            let z = f32_at(body, pos + 8) as f64;
            if !(x.is_finite() && y.is_finite() && z.is_finite()) {
                return Err(TractIoError::InvalidStreamline {
                    index,
                    reason: "non-finite coordinate".into(),
                });
            }
            points.push([x, y, z]);
            if n_scalars > 0 {
                scalars.push(
                    (0..n_scalars)
                        .map(|c| f32_at(body, pos + 12 + 4 * c) as f64)
                        .collect(),
                );
            }
            pos += 4 * stride;
        }
        // per-track properties are not used
        pos += 4 * n_properties;
        t.streamlines.push(Streamline { points, scalars });
        index += 1;
    }

    if options.apply_vox_to_ras {
        apply_vox_to_ras(&mut t);
    }
    Ok(t)
}

/// TRK stores points in voxel-mm with the origin at the voxel corner.
fn apply_vox_to_ras(t: &mut Tractogram) {
    let vs = t.voxel_size.map(|v| if v == 0.0 { 1.0 } else { v as f64 });
    let a = t.vox_to_ras.map(|row| row.map(|v| v as f64));
    for s in &mut t.streamlines {
        for p in &mut s.points {
            let vox = [p[0] / vs[0] - 0.5, p[1] / vs[1] - 0.5, p[2] / vs[2] - 0.5];
            for (r, out) in p.iter_mut().enumerate() {
                *out = a[r][0] * vox[0] + a[r][1] * vox[1] + a[r][2] * vox[2] + a[r][3];
            }
        }
    }
}

pub fn write_trk(t: &Tractogram) -> Result<Vec<u8>> {
    let n_scalars = t.scalar_names.len();
    if n_scalars > TRK_MAX_CHANNELS {
        return Err(TractIoError::TooManyScalarChannels(n_scalars));
    }
    t.validate()?;

    let body_len: usize = t
        .streamlines
        .iter()
        .map(|s| 4 + 4 * s.points.len() * (3 + n_scalars))
        .sum();
    let mut out = vec![0u8; TRK_HEADER_SIZE];
    out.reserve(body_len);
    out[..6].copy_from_slice(b"TRACK\0");
    for (i, d) in t.dim.iter().enumerate() {
        put(&mut out, OFF_DIM + 2 * i, &d.to_le_bytes());
    }
    for i in 0..3 {
        put(&mut out, OFF_VOXEL_SIZE + 4 * i, &t.voxel_size[i].to_le_bytes());
        put(&mut out, OFF_ORIGIN + 4 * i, &t.extras.origin[i].to_le_bytes());
    }
    put(&mut out, OFF_N_SCALARS, &(n_scalars as i16).to_le_bytes());
    for (i, name) in t.scalar_names.iter().enumerate() {
        let raw = name.as_bytes();
        // keep a terminating NUL
        let len = raw.len().min(NAME_LEN - 1);
        put(&mut out, OFF_SCALAR_NAMES + i * NAME_LEN, &raw[..len]);
    }
    for (r, row) in t.vox_to_ras.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            put(&mut out, OFF_VOX_TO_RAS + 4 * (4 * r + c), &v.to_le_bytes());
        }
    }
    put(&mut out, OFF_VOXEL_ORDER, &t.extras.voxel_order);
    put(&mut out, OFF_PAD2, &t.extras.pad2);
    for (i, v) in t.extras.image_orientation_patient.iter().enumerate() {
        put(&mut out, OFF_ORIENTATION + 4 * i, &v.to_le_bytes());
    }
    put(&mut out, OFF_PAD1, &t.extras.pad1);
    put(&mut out, OFF_FLAGS, &t.extras.flags);
    put(&mut out, OFF_N_COUNT, &(t.streamlines.len() as i32).to_le_bytes());
    put(&mut out, OFF_VERSION, &2i32.to_le_bytes());
    put(&mut out, OFF_HDR_SIZE, &(TRK_HEADER_SIZE as i32).to_le_bytes());

    for s in &t.streamlines {
        out.extend_from_slice(&(s.points.len() as i32).to_le_bytes());
        for (i, p) in s.points.iter().enumerate() {
            for c in p {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
            if n_scalars > 0 {
                for v in &s.scalars[i] {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

fn put(buf: &mut [u8], offset: usize, bytes: &[u8]) {
    buf[offset..offset + bytes.len()].copy_from_slice(bytes);
}

fn nonnegative(value: i64, what: &'static str) -> Result<usize> {
    usize::try_from(value).map_err(|_| TractIoError::NegativeCount { what, value })
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}
