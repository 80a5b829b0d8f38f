use std::path::Path;

use super::AudioBuffer;
use crate::error::{KwsError, Result};

/// Sample encoding used by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn map_hound(path: &Path, err: hound::Error) -> KwsError {
    match err {
        hound::Error::IoError(e) => KwsError::io(path, e),
        hound::Error::Unsupported => {
            KwsError::Unsupported(format!("{}: unsupported WAV codec", path.display()))
        }
        other => KwsError::Format(format!("{}: {other}", path.display())),
    }
}

/// Format tag of the `fmt ` chunk, if the file is RIFF/WAVE and has one.
fn format_tag(bytes: &[u8]) -> Option<u16> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return None;
    }
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().ok()?) as usize;
        if &bytes[pos..pos + 4] == b"fmt " {
            return bytes
                .get(pos + 8..pos + 10)
                .map(|b| u16::from_le_bytes([b[0], b[1]]));
        }
        pos = pos.checked_add(8 + len + (len & 1))?;
    }
    None
}

/// Reads a PCM16 or float32 WAV file, averaging channels down to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
    // PCM, IEEE float, WAVE_FORMAT_EXTENSIBLE
    if let Some(tag) = format_tag(&bytes).filter(|t| ![1, 3, 0xfffe].contains(t)) {
        return Err(KwsError::Unsupported(format!(
            "{}: WAV format tag {tag:#06x} (expected PCM16 or float32)",
            path.display()
        )));
    }
    let mut reader =
        hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(KwsError::Unsupported(format!(
                "{}: {bits}-bit {fmt:?} samples (expected PCM16 or float32)",
                path.display()
            )))
        }
    };
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(KwsError::Format(format!("{}: zero channels", path.display())));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes mono audio; PCM16 values are clamped to `[-1, 1)` before scaling.
pub fn write_wav(audio: &AudioBuffer, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate_hz(),
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in audio.samples() {
        let res = match encoding {
            WavEncoding::Pcm16 => {
                let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)
            }
            WavEncoding::Float32 => writer.write_sample(s),
        };
        res.map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}
