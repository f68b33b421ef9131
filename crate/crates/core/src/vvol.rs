//! VVOL on-disk format.
//!
//! A single line of JSON header terminated by `\n`, immediately followed by the
//! raw little-endian payload in volume linearization order:
//!
//! ```text
//! {"magic":"VVOL1","dims":[nx,ny,nz],"channels":C,"dtype":"f32"|"u8","kind":"scalar"|"channel"|"label"}\n<payload>
//! ```
//!
//! Reals are stored as `f32`, labels as `u8`. There is no padding and no footer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ChannelVolume, LabelVolume, ScalarVolume, Shape3};

pub const MAGIC: &str = "VVOL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Scalar,
    Channel,
    Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    dims: [usize; 3],
    channels: usize,
    dtype: Dtype,
    kind: Kind,
}

/// Any volume that can be stored in a VVOL file.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Channel(ChannelVolume),
    Label(LabelVolume),
}

impl Volume {
    pub fn shape(&self) -> Shape3 {
        match self {
            Volume::Scalar(v) => v.shape(),
            Volume::Channel(v) => v.shape(),
            Volume::Label(v) => v.shape(),
        }
    }

    pub fn kind(&self) -> Kind {
        match self {
            Volume::Scalar(_) => Kind::Scalar,
            Volume::Channel(_) => Kind::Channel,
            Volume::Label(_) => Kind::Label,
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            Volume::Scalar(v) => Ok(v),
            Volume::Channel(v) if v.channels() == 1 => Ok(v.channel_volume(0)),
            other => Err(kind_mismatch(Kind::Scalar, other.kind())),
        }
    }

    pub fn into_channels(self) -> Result<ChannelVolume> {
        match self {
            Volume::Channel(v) => Ok(v),
            Volume::Scalar(v) => Ok(v.into_channels()),
            other => Err(kind_mismatch(Kind::Channel, other.kind())),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Volume::Label(v) => Ok(v),
            other => Err(kind_mismatch(Kind::Label, other.kind())),
        }
    }
}

fn kind_mismatch(want: Kind, got: Kind) -> Error {
    Error::Format {
        offset: 0,
        message: format!("expected a {want:?} volume, file holds {got:?}"),
    }
}

impl From<ScalarVolume> for Volume {
    fn from(v: ScalarVolume) -> Self {
        Volume::Scalar(v)
    }
}

impl From<ChannelVolume> for Volume {
    fn from(v: ChannelVolume) -> Self {
        Volume::Channel(v)
    }
}

impl From<LabelVolume> for Volume {
    fn from(v: LabelVolume) -> Self {
        Volume::Label(v)
    }
}

pub fn encode(volume: &Volume) -> Vec<u8> {
    let shape = volume.shape();
    let (channels, dtype) = match volume {
        Volume::Scalar(_) => (1, Dtype::F32),
        Volume::Channel(v) => (v.channels(), Dtype::F32),
        Volume::Label(_) => (1, Dtype::U8),
    };
    let header = Header {
        magic: MAGIC.to_string(),
        dims: shape.dims(),
        channels,
        dtype,
        kind: volume.kind(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    match volume {
        Volume::Scalar(v) => push_f32(&mut out, v.data()),
        Volume::Channel(v) => push_f32(&mut out, v.data()),
        Volume::Label(v) => out.extend_from_slice(v.data()),
    }
    out
}

fn push_f32(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn decode(bytes: &[u8]) -> Result<Volume> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format {
            offset: bytes.len(),
            message: "header is not newline-terminated".into(),
        })?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format {
        offset: e.column().saturating_sub(1),
        message: format!("malformed header: {e}"),
    })?;
    if header.magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}", header.magic),
        });
    }
    let [nx, ny, nz] = header.dims;
    let shape = Shape3::new(nx, ny, nz).map_err(|e| Error::Format {
        offset: 0,
        message: e.to_string(),
    })?;
    if header.channels == 0 {
        return Err(Error::Format {
            offset: 0,
            message: "channels must be at least 1".into(),
        });
    }
    let expected_dtype = match header.kind {
        Kind::Label => Dtype::U8,
        Kind::Scalar | Kind::Channel => Dtype::F32,
    };
    if header.dtype != expected_dtype {
        return Err(Error::Format {
            offset: 0,
            message: format!("{:?} volumes must use {:?}", header.kind, expected_dtype),
        });
    }
    if matches!(header.kind, Kind::Scalar | Kind::Label) && header.channels != 1 {
        return Err(Error::Format {
            offset: 0,
            message: format!("{:?} volumes have exactly one channel", header.kind),
        });
    }

    let start = nl + 1;
    let payload = &bytes[start..];
    let count = header.channels * shape.len();
    let width = match header.dtype {
        Dtype::F32 => 4,
        Dtype::U8 => 1,
    };
    let need = count * width;
    if payload.len() != need {
        return Err(Error::Format {
            offset: start + payload.len().min(need),
            message: if payload.len() < need {
                format!(
                    "payload truncated: need {need} bytes, have {}",
                    payload.len()
                )
            } else {
                format!("{} trailing bytes after payload", payload.len() - need)
            },
        });
    }

    let at = |i: usize| -> Error {
        Error::Format {
            offset: start + i * width,
            message: "non-finite value in payload".into(),
        }
    };
    match header.kind {
        Kind::Label => {
            let data = payload.to_vec();
            Ok(Volume::Label(LabelVolume::inferred(shape, data)?))
        }
        Kind::Scalar | Kind::Channel => {
            let mut data = Vec::with_capacity(count);
            for (i, chunk) in payload.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                if !v.is_finite() {
                    return Err(at(i));
                }
                data.push(v as f64);
            }
            if header.kind == Kind::Scalar {
                Ok(Volume::Scalar(ScalarVolume::new(shape, data)?))
            } else {
                Ok(Volume::Channel(ChannelVolume::new(
                    header.channels,
                    shape,
                    data,
                )?))
            }
        }
    }
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(volume)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let v =
            Volume::Label(LabelVolume::new(Shape3::new(1, 1, 2).unwrap(), vec![0, 3], 4).unwrap());
        let bytes = encode(&v);
        let expected =
            b"{\"magic\":\"VVOL1\",\"dims\":[1,1,2],\"channels\":1,\"dtype\":\"u8\",\"kind\":\"label\"}\n\x00\x03";
        assert_eq!(bytes, expected.to_vec());
    }

    #[test]
    fn channel_roundtrip_preserves_order() {
        let shape = Shape3::cube(2).unwrap();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.25).collect();
        let v = ChannelVolume::new(2, shape, data).unwrap();
        let back = decode(&encode(&v.clone().into()))
            .unwrap()
            .into_channels()
            .unwrap();
        assert_eq!(back, v);
        assert_eq!(back.channel(1)[0], 2.0);
    }

    #[test]
    fn zero_dim_is_format_error() {
        let bytes = b"{\"magic\":\"VVOL1\",\"dims\":[0,1,1],\"channels\":1,\"dtype\":\"f32\",\"kind\":\"scalar\"}\n";
        assert!(matches!(decode(bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let v = Volume::Scalar(ScalarVolume::filled(Shape3::cube(2).unwrap(), 1.0));
        let mut bytes = encode(&v);
        let full = bytes.len();
        bytes.truncate(full - 3);
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, full - 3),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn dtype_kind_mismatch() {
        let bytes = b"{\"magic\":\"VVOL1\",\"dims\":[1,1,1],\"channels\":1,\"dtype\":\"f32\",\"kind\":\"label\"}\n\0\0\0\0";
        assert!(matches!(decode(bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_newline_and_bad_json() {
        assert!(matches!(decode(b"{\"magic\""), Err(Error::Format { .. })));
        assert!(matches!(decode(b"not json\n"), Err(Error::Format { .. })));
        let bytes = b"{\"magic\":\"VVOL2\",\"dims\":[1,1,1],\"channels\":1,\"dtype\":\"u8\",\"kind\":\"label\"}\n\0";
        assert!(matches!(decode(bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn file_roundtrip_and_missing_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vvol");
        let v = Volume::Scalar(
            ScalarVolume::new(
                Shape3::new(4, 5, 6).unwrap(),
                (0..120).map(|i| i as f64).collect(),
            )
            .unwrap(),
        );
        write_volume(&p, &v).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
        let err = read_volume(dir.path().join("missing.vvol")).unwrap_err();
        assert!(err.to_string().contains("missing.vvol"));
    }

    proptest! {
        #[test]
        fn scalar_roundtrip_is_bit_exact(vals in proptest::collection::vec(-1e3f32..1e3, 120)) {
            let shape = Shape3::new(4, 5, 6).unwrap();
            let v = ScalarVolume::new(shape, vals.iter().map(|&x| x as f64).collect()).unwrap();
            let back = decode(&encode(&v.clone().into())).unwrap().into_scalar().unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn label_roundtrip(vals in proptest::collection::vec(0u8..6, 24)) {
            let v = LabelVolume::inferred(Shape3::new(2, 3, 4).unwrap(), vals).unwrap();
            let back = decode(&encode(&v.clone().into())).unwrap().into_labels().unwrap();
            prop_assert_eq!(back.data(), v.data());
        }
    }
}
