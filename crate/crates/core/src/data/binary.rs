//! Flat little-endian dataset file.
//!
//! ```text
//! magic       8 bytes  "STAMDS1\0"
//! header     10 × u64  C, N, D_f, s, μ, σ, σ_d (f64 bit patterns), train, test, seed
//! per split (train, then test), for `size` samples:
//!   features  size·N·D_f × f64, row-major
//!   labels    size × u64
//!   masks     size·N × u8 (0 or 1)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, LabeledSample, NeedleTaskSpec};
use crate::attention::ClipFeatures;
use crate::error::{Result, StamError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STAMDS1\0";

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    put_u64(w, v.to_bits())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| StamError::Format(format!("truncated file: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    get_u64(r).map(f64::from_bits)
}

fn get_usize(r: &mut impl Read) -> Result<usize> {
    let v = get_u64(r)?;
    usize::try_from(v).map_err(|_| StamError::Format(format!("count {v} does not fit in memory")))
}

fn write_split(w: &mut impl Write, split: &[LabeledSample]) -> Result<()> {
    for s in split {
        for &v in s.clips.tensor().values() {
            put_f64(w, v)?;
        }
    }
    for s in split {
        put_u64(w, s.label as u64)?;
    }
    for s in split {
        let bytes: Vec<u8> = s.signal_mask.iter().map(|&m| u8::from(m)).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn write_dataset(w: &mut impl Write, data: &Dataset) -> Result<()> {
    let s = &data.spec;
    w.write_all(MAGIC)?;
    for v in [s.num_classes, s.clip_count, s.feature_dim, s.signal_clips] {
        put_u64(w, v as u64)?;
    }
    for v in [s.signal_strength, s.noise_std, s.distractor_std] {
        put_f64(w, v)?;
    }
    put_u64(w, s.train_size as u64)?;
    put_u64(w, s.test_size as u64)?;
    put_u64(w, s.seed)?;
    write_split(w, &data.train)?;
    write_split(w, &data.test)
}

fn read_split(r: &mut impl Read, spec: &NeedleTaskSpec, size: usize) -> Result<Vec<LabeledSample>> {
    let (n, d) = (spec.clip_count, spec.feature_dim);
    let mut clips = Vec::with_capacity(size);
    for _ in 0..size {
        let values = (0..n * d).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
        clips.push(ClipFeatures::new(Tensor::matrix(n, d, values)?)?);
    }
    let mut labels = Vec::with_capacity(size);
    for _ in 0..size {
        let label = get_usize(r)?;
        if label >= spec.num_classes {
            return Err(StamError::Format(format!("label {label} out of range")));
        }
        labels.push(label);
    }
    let mut samples = Vec::with_capacity(size);
    for (clips, label) in clips.into_iter().zip(labels) {
        let mut mask = vec![0u8; n];
        r.read_exact(&mut mask)
            .map_err(|e| StamError::Format(format!("truncated mask: {e}")))?;
        let signal_mask = mask
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(StamError::Format(format!("mask byte {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(LabeledSample {
            clips,
            label,
            signal_mask,
        });
    }
    Ok(samples)
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| StamError::Format(format!("missing header: {e}")))?;
    if &magic != MAGIC {
        return Err(StamError::Format("bad magic".into()));
    }
    let spec = NeedleTaskSpec {
        num_classes: get_usize(r)?,
        clip_count: get_usize(r)?,
        feature_dim: get_usize(r)?,
        signal_clips: get_usize(r)?,
        signal_strength: get_f64(r)?,
        noise_std: get_f64(r)?,
        distractor_std: get_f64(r)?,
        train_size: get_usize(r)?,
        test_size: get_usize(r)?,
        seed: get_u64(r)?,
    };
    spec.validate()
        .map_err(|e| StamError::Format(format!("header: {e}")))?;
    let prototypes = spec.prototypes()?;
    let train = read_split(r, &spec, spec.train_size)?;
    let test = read_split(r, &spec, spec.test_size)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(StamError::Format("trailing bytes".into()));
    }
    Ok(Dataset {
        spec,
        prototypes,
        train,
        test,
    })
}

pub fn write_dataset_file(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    #[test]
    fn header_layout() {
        let spec = NeedleTaskSpec {
            train_size: 3,
            test_size: 2,
            clip_count: 2,
            feature_dim: 3,
            signal_clips: 1,
            seed: 77,
            ..NeedleTaskSpec::default()
        };
        let data = generate(&spec).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 4);
        assert_eq!(f64::from_le_bytes(buf[40..48].try_into().unwrap()), 1.25);
        assert_eq!(u64::from_le_bytes(buf[80..88].try_into().unwrap()), 77);
        let per_split = |size: usize| size * 2 * 3 * 8 + size * 8 + size * 2;
        assert_eq!(buf.len(), 88 + per_split(3) + per_split(2));
    }

    #[test]
    fn corrupt_files_rejected() {
        let spec = NeedleTaskSpec {
            train_size: 2,
            test_size: 1,
            ..NeedleTaskSpec::default()
        };
        let mut buf = Vec::new();
        write_dataset(&mut buf, &generate(&spec).unwrap()).unwrap();
        assert!(read_dataset(&mut &buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_dataset(&mut extra.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_dataset(&mut bad.as_slice()),
            Err(StamError::Format(_))
        ));
    }
}
