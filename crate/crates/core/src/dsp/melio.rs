use std::io::Write;
use std::path::Path;

use super::{MelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MEL0_MAGIC: &[u8; 4] = b"MEL0";

pub fn encode_mel0(mel: &MelSpectrogram) -> Vec<u8> {
    let t = mel.num_frames();
    let mut out = Vec::with_capacity(8 + t * N_MELS * 8);
    out.extend_from_slice(MEL0_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    for v in mel.frames().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mel0(bytes: &[u8]) -> Result<MelSpectrogram> {
    let err = |offset: usize, detail: String| Error::Format {
        what: "MEL0".into(),
        offset: offset as u64,
        detail,
    };
    if bytes.get(0..4) != Some(MEL0_MAGIC) {
        return Err(err(0, "missing MEL0 magic".into()));
    }
    let t = bytes
        .get(4..8)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize)
        .ok_or_else(|| err(4, "truncated header".into()))?;
    let need = 8 + t * N_MELS * 8;
    if bytes.len() != need {
        return Err(err(
            8,
            format!("{t} frames need {need} bytes, file has {}", bytes.len()),
        ));
    }
    if t == 0 {
        return Err(err(4, "zero frames".into()));
    }
    let data = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MelSpectrogram::new(Tensor::new(vec![t, N_MELS], data)?)
}

pub fn write_mel0(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_mel0(mel)).map_err(|e| Error::io(path, e))
}

pub fn read_mel0(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mel0(&bytes).map_err(|e| match e {
        Error::Format { offset, detail, .. } => Error::Format {
            what: path.display().to_string(),
            offset,
            detail,
        },
        other => other,
    })
}

/// One frame per line, comma separated.
pub fn write_mel_csv(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let frames = mel.frames();
    for t in 0..frames.rows() {
        let line: Vec<String> = frames.row(t).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel0_roundtrip_is_exact() {
        let data: Vec<f64> = (0..160).map(|i| (i as f64).sin() - 3.0).collect();
        let m = MelSpectrogram::new(Tensor::new(vec![2, 80], data).unwrap()).unwrap();
        let bytes = encode_mel0(&m);
        assert_eq!(&bytes[..4], b"MEL0");
        assert_eq!(bytes.len(), 8 + 160 * 8);
        assert_eq!(decode_mel0(&bytes).unwrap(), m);
        assert!(matches!(
            decode_mel0(&bytes[..100]),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = MelSpectrogram::new(Tensor::zeros(vec![3, 80])).unwrap();
        write_mel_csv(&p, &m).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 80);
    }
}
