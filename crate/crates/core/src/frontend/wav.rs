//! RIFF/WAVE PCM decoding and encoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Sample encoding used by [`write_wav`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Decode { offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, Debug)]
struct Format {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
    block_align: u16,
}

/// Decodes a WAV byte buffer to mono (channel mean).
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "RIFF tag")? != b"RIFF" {
        return Err(Error::Decode { offset: 0, msg: "missing RIFF tag".into() });
    }
    r.u32("RIFF size")?;
    if r.take(4, "WAVE tag")? != b"WAVE" {
        return Err(Error::Decode { offset: 8, msg: "missing WAVE tag".into() });
    }
    let mut format: Option<(Format, usize)> = None;
    loop {
        let chunk_at = r.pos;
        let id = r.take(4, "chunk id")?;
        let size = r.u32("chunk size")? as usize;
        match id {
            b"fmt " => {
                let start = r.pos;
                if size < 16 {
                    return Err(Error::Decode { offset: chunk_at as u64, msg: format!("fmt chunk too small ({size} bytes)") });
                }
                let mut tag = r.u16("format tag")?;
                let channels = r.u16("channel count")?;
                let sample_rate = r.u32("sample rate")?;
                r.u32("byte rate")?;
                let block_align = r.u16("block align")?;
                let bits = r.u16("bits per sample")?;
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(r.err("extensible fmt chunk shorter than 40 bytes"));
                    }
                    r.take(8, "extension header")?;
                    tag = r.u16("sub-format")?;
                }
                r.pos = start;
                r.take(size + (size & 1), "fmt chunk")?;
                format = Some((Format { tag, channels, sample_rate, bits, block_align }, start));
            }
            b"data" => {
                let Some((fmt, fmt_at)) = format else {
                    return Err(Error::Decode { offset: chunk_at as u64, msg: "data chunk before fmt chunk".into() });
                };
                let data_at = r.pos;
                let avail = bytes.len() - data_at;
                let data = &bytes[data_at..data_at + size.min(avail)];
                return decode_samples(fmt, fmt_at, data, data_at);
            }
            _ => {
                r.take(size + (size & 1), "chunk body")?;
            }
        }
    }
}

fn decode_samples(fmt: Format, fmt_at: usize, data: &[u8], data_at: usize) -> Result<AudioClip> {
    let bad = |msg: String| Error::Decode { offset: fmt_at as u64, msg };
    if fmt.channels == 0 {
        return Err(bad("zero channels".into()));
    }
    if fmt.sample_rate == 0 {
        return Err(bad("zero sample rate".into()));
    }
    let width = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 8 | 16 | 24 | 32) | (FORMAT_FLOAT, 32 | 64) => fmt.bits as usize / 8,
        (tag, bits) => return Err(bad(format!("unsupported codec: format tag {tag} with {bits} bits"))),
    };
    let ch = fmt.channels as usize;
    let frame = width * ch;
    if fmt.block_align as usize != frame {
        return Err(bad(format!("block align {} does not match {ch} channels of {width} bytes", fmt.block_align)));
    }
    if data.len() % frame != 0 {
        return Err(Error::Decode {
            offset: (data_at + data.len() - data.len() % frame) as u64,
            msg: format!("data length {} is not a whole number of {frame}-byte frames", data.len()),
        });
    }
    let decode = |s: &[u8]| -> f64 {
        match (fmt.tag, width) {
            (FORMAT_PCM, 1) => (s[0] as f64 - 128.0) / 128.0,
            (FORMAT_PCM, 2) => i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0,
            (FORMAT_PCM, 3) => (i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8) as f64 / 8_388_608.0,
            (FORMAT_PCM, 4) => i32::from_le_bytes(s.try_into().unwrap()) as f64 / 2_147_483_648.0,
            (_, 4) => f32::from_le_bytes(s.try_into().unwrap()) as f64,
            _ => f64::from_le_bytes(s.try_into().unwrap()),
        }
    };
    let samples = data
        .chunks_exact(frame)
        .map(|f| (f.chunks_exact(width).map(decode).sum::<f64>() / ch as f64) as f32)
        .collect();
    Ok(AudioClip { samples, sample_rate: fmt.sample_rate })
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_wav(&bytes)
}

/// Encodes interleaved `channels`-channel samples.
pub fn encode_wav(samples: &[f32], channels: u16, sample_rate: u32, encoding: WavEncoding) -> Vec<u8> {
    let (tag, width) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 2u16),
        WavEncoding::Float32 => (FORMAT_FLOAT, 4u16),
    };
    let block = width * channels;
    let data_len = samples.len() * width as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&(width * 8).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        match encoding {
            WavEncoding::Pcm16 => {
                let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            WavEncoding::Float32 => out.extend_from_slice(&s.to_le_bytes()),
        }
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(&clip.samples, 1, clip.sample_rate, encoding))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
