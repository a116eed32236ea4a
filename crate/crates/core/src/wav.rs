//! 16-bit PCM mono WAV reading and writing.
//!
//! Samples are scaled by 1/32768 on read and by 32768 (rounded, clamped to
//! the i16 range) on write, so a read → write cycle reproduces the file's
//! sample data exactly.

use std::fs;
use std::path::Path;

use crate::dsp::AudioBuffer;
use crate::error::{io_err, Error, Result};

const PCM_FORMAT: u16 = 1;
const EXTENSIBLE_FORMAT: u16 = 0xFFFE;

fn wav_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn sample_to_i16(v: f64) -> i16 {
    (v * 32768.0)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn encode_pcm16_mono(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&sample_to_i16(s).to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    fs::write(
        path,
        encode_pcm16_mono(audio.samples(), audio.sample_rate()),
    )
    .map_err(io_err(path))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pcm16_mono(&bytes).map_err(|msg| wav_err(path, msg))
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_pcm16_mono(bytes: &[u8]) -> std::result::Result<AudioBuffer, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format!("chunk {:?} truncated", String::from_utf8_lossy(id)))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err("fmt chunk too short".into());
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format.ok_or("data chunk before fmt chunk")?;
                if tag != PCM_FORMAT && tag != EXTENSIBLE_FORMAT {
                    return Err(format!("unsupported format tag {tag:#x}"));
                }
                if channels != 1 {
                    return Err(format!("expected mono audio, found {channels} channels"));
                }
                if bits != 16 {
                    return Err(format!("expected 16-bit samples, found {bits}"));
                }
                if !size.is_multiple_of(2) {
                    return Err("odd data chunk length".into());
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return AudioBuffer::new(samples, rate).map_err(|e| e.to_string());
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = end + (size & 1);
    }
    Err("no data chunk".into())
}
