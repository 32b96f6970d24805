//! Minimal RIFF/WAVE codec: PCM16 or float32, mono or stereo.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{AudioClip, SAMPLE_RATE};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xfffe;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::WavParse {
        offset,
        message: message.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| parse_err(at, "truncated"))
}

fn u32_at(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| parse_err(at, "truncated"))
}

struct Format {
    tag: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

/// Decodes WAV bytes. Only 22,050 Hz input is accepted.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 {
        return Err(parse_err(bytes.len(), "file shorter than RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(parse_err(0, format!("bad magic {:?}, expected \"RIFF\"", String::from_utf8_lossy(&bytes[0..4]))));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(parse_err(8, "missing WAVE form type"));
    }
    let mut pos = 12;
    let mut format: Option<Format> = None;
    let mut data: Option<(usize, &[u8])> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4)? as usize;
        let body_at = pos + 8;
        let body = bytes
            .get(body_at..body_at + size)
            .ok_or_else(|| parse_err(pos, format!("chunk {:?} runs past end of file", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(parse_err(pos, "fmt chunk shorter than 16 bytes"));
                }
                let mut tag = u16_at(bytes, body_at)?;
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(parse_err(pos, "extensible fmt chunk shorter than 40 bytes"));
                    }
                    tag = u16_at(bytes, body_at + 24)?;
                }
                format = Some(Format {
                    tag,
                    channels: u16_at(bytes, body_at + 2)?,
                    rate: u32_at(bytes, body_at + 4)?,
                    bits: u16_at(bytes, body_at + 14)?,
                });
            }
            b"data" => data = Some((body_at, body)),
            _ => {}
        }
        pos = body_at + size + (size & 1);
    }
    let fmt = format.ok_or_else(|| parse_err(12, "no fmt chunk"))?;
    let (data_at, data) = data.ok_or_else(|| parse_err(12, "no data chunk"))?;
    let bytes_per_sample = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_FLOAT, 32) => 4,
        (tag, bits) => {
            return Err(parse_err(20, format!("unsupported encoding: format tag {tag}, {bits} bits")));
        }
    };
    if !(fmt.channels == 1 || fmt.channels == 2) {
        return Err(parse_err(22, format!("{} channels; only mono or stereo supported", fmt.channels)));
    }
    if fmt.rate != SAMPLE_RATE {
        return Err(Error::UnsupportedRate {
            rate: fmt.rate,
            expected: SAMPLE_RATE,
        });
    }
    let frame_bytes = bytes_per_sample * fmt.channels as usize;
    if data.len() % frame_bytes != 0 {
        return Err(parse_err(data_at, "data length is not a whole number of frames"));
    }
    let decode = |s: &[u8]| -> f64 {
        if bytes_per_sample == 2 {
            (f64::from(i16::from_le_bytes([s[0], s[1]])) / 32767.0).max(-1.0)
        } else {
            f64::from(f32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        }
    };
    let mut samples = Vec::with_capacity(data.len() / frame_bytes);
    for (i, frame) in data.chunks_exact(frame_bytes).enumerate() {
        let mut acc = 0.0;
        for ch in frame.chunks_exact(bytes_per_sample) {
            acc += decode(ch);
        }
        let v = acc / f64::from(fmt.channels);
        if !v.is_finite() {
            return Err(parse_err(data_at + i * frame_bytes, "non-finite sample"));
        }
        samples.push(v);
    }
    AudioClip::new(samples, fmt.rate)
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

/// Encodes mono PCM16 (samples are clamped to [-1, 1]).
pub fn encode_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    encode(clip.sample_rate, 1, FORMAT_PCM, 16, |out| {
        for &s in &clip.samples {
            let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            out.extend_from_slice(&q.to_le_bytes());
        }
    })
}

/// Encodes interleaved float32 with the given channel count.
pub fn encode_wav_f32(interleaved: &[f32], channels: u16, sample_rate: u32) -> Vec<u8> {
    encode(sample_rate, channels, FORMAT_FLOAT, 32, |out| {
        for s in interleaved {
            out.extend_from_slice(&s.to_le_bytes());
        }
    })
}

fn encode(rate: u32, channels: u16, tag: u16, bits: u16, body: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let mut data = Vec::new();
    body(&mut data);
    let block = channels * bits / 8;
    let mut out = Vec::with_capacity(44 + data.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * u32::from(block)).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(&data);
    if data.len() % 2 == 1 {
        out.push(0);
    }
    out
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_wav_pcm16(clip)).map_err(|e| Error::io(path, e))
}
