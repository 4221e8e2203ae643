use std::fs;
use std::path::Path;

use super::{MelSpectrogram, Waveform};
use crate::error::{Error, Result};

pub const MELF_MAGIC: &[u8; 4] = b"MELF";
pub const MELF_VERSION: u32 = 1;
pub const MELF_HEADER_LEN: usize = 16;

/// Reads RIFF PCM-16 mono audio, scaling samples by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Wav(format!("{}: {} channels, only mono is supported", path.display(), spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "{}: {:?} {}-bit samples, only PCM-16 is supported",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes PCM-16 mono, rounding and clamping to the i16 range.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let path = path.as_ref();
    let wrap = |e: hound::Error| Error::Wav(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in wave.samples() {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

pub fn melf_bytes(mel: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(MELF_HEADER_LEN + mel.data().len() * 4);
    out.extend_from_slice(MELF_MAGIC);
    out.extend_from_slice(&MELF_VERSION.to_le_bytes());
    out.extend_from_slice(&(mel.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(mel.n_mels() as u32).to_le_bytes());
    for v in mel.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_melf(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    fs::write(path, melf_bytes(mel))?;
    Ok(())
}

pub fn parse_melf(bytes: &[u8], origin: &str) -> Result<MelSpectrogram> {
    let fail = |offset: usize, msg: String| Error::Format {
        path: origin.to_string(),
        offset: offset as u64,
        msg,
    };
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| fail(bytes.len(), "truncated MELF header".into()))
    };
    if bytes.len() < 4 || &bytes[..4] != MELF_MAGIC {
        return Err(fail(0, "bad MELF magic".into()));
    }
    let version = u32_at(4)?;
    if version != MELF_VERSION {
        return Err(fail(4, format!("unsupported MELF version {version}")));
    }
    let t = u32_at(8)? as usize;
    let m = u32_at(12)? as usize;
    if m == 0 {
        return Err(fail(12, "MELF declares zero mel bins".into()));
    }
    let want = MELF_HEADER_LEN + t * m * 4;
    if bytes.len() < want {
        return Err(fail(bytes.len(), format!("truncated MELF payload, expected {want} bytes")));
    }
    if bytes.len() > want {
        return Err(fail(want, "trailing bytes after MELF payload".into()));
    }
    let data: Vec<f32> = bytes[MELF_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(fail(MELF_HEADER_LEN + 4 * i, "non-finite MELF value".into()));
    }
    MelSpectrogram::new(t, m, data)
}

pub fn read_melf(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_melf(&bytes, &path.display().to_string())
}
