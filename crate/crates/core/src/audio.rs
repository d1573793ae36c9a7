//! Mono 16-bit PCM buffers and WAV file IO.

use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioBuffer {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<i16>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy out the half-open interval `[start, end)` given in seconds.
    ///
    /// The result holds `round((end - start) * rate)` samples starting at
    /// `round(start * rate)`.
    pub fn extract_segment(&self, start: f64, end: f64) -> Result<AudioBuffer> {
        let duration = self.duration();
        if !(start.is_finite() && end.is_finite()) {
            return Err(Error::EmptySegment { start, end });
        }
        if end == start {
            return Err(Error::EmptySegment { start, end });
        }
        if start < 0.0 || start >= duration {
            return Err(Error::OutOfRange {
                bound: "start",
                value: start,
                duration,
            });
        }
        if end > duration + 0.5 / self.sample_rate as f64 {
            return Err(Error::OutOfRange {
                bound: "end",
                value: end,
                duration,
            });
        }
        if end < start {
            return Err(Error::EmptySegment { start, end });
        }
        let rate = self.sample_rate as f64;
        let first = (start * rate).round() as usize;
        let len = ((end - start) * rate).round() as usize;
        let last = (first + len).min(self.samples.len());
        if last <= first {
            return Err(Error::EmptySegment { start, end });
        }
        Ok(AudioBuffer::new(
            self.samples[first..last].to_vec(),
            self.sample_rate,
        ))
    }

    /// Samples scaled to `[-1, 1)`.
    pub fn to_f32(&self) -> Vec<f32> {
        self.samples.iter().map(|&s| s as f32 / 32768.0).collect()
    }
}

/// Read a RIFF/WAVE file holding mono 16-bit integer PCM.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            path,
            format!("expected mono audio, found {} channels", spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit integer PCM, found {} bits {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Ok(AudioBuffer::new(samples, spec.sample_rate))
}

/// Write a mono 16-bit PCM WAV file. Output bytes depend only on the buffer.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    {
        let mut w = writer.get_i16_writer(audio.samples.len() as u32);
        for &s in &audio.samples {
            w.write_sample(s);
        }
        w.flush().map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::format(path, other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buffer(seconds: f64) -> AudioBuffer {
        let n = (seconds * DEFAULT_SAMPLE_RATE as f64) as usize;
        AudioBuffer::new((0..n).map(|i| (i % 1000) as i16).collect(), DEFAULT_SAMPLE_RATE)
    }

    #[test]
    fn extract_first_second() {
        let audio = buffer(2.0);
        let seg = audio.extract_segment(0.0, 1.0).unwrap();
        assert_eq!(seg.len(), 16_000);
        assert_eq!(seg.samples[..10], audio.samples[..10]);
    }

    #[test]
    fn extract_rejects_end_past_duration() {
        let err = buffer(2.0).extract_segment(1.9, 2.5).unwrap_err();
        assert!(err.to_string().starts_with("end out of range"), "{err}");
    }

    #[test]
    fn extract_rejects_empty_segment() {
        let err = buffer(2.0).extract_segment(0.5, 0.5).unwrap_err();
        assert!(err.to_string().starts_with("empty segment"), "{err}");
    }

    #[test]
    fn extract_rejects_negative_start() {
        let err = buffer(2.0).extract_segment(-0.1, 0.5).unwrap_err();
        assert!(err.to_string().starts_with("start out of range"), "{err}");
    }

    #[test]
    fn extract_up_to_exact_end() {
        let audio = buffer(2.0);
        let seg = audio.extract_segment(1.5, 2.0).unwrap();
        assert_eq!(seg.len(), 8_000);
        assert_eq!(seg.samples.last(), audio.samples.last());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let audio = AudioBuffer::new(vec![0, 1, -1, i16::MAX, i16::MIN, 1234], 16_000);
        write_wav(&path, &audio).unwrap();
        assert_eq!(read_wav(&path).unwrap(), audio);
    }

    #[test]
    fn wav_missing_file_names_path() {
        let err = read_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.wav"));
    }
}
