//! Binary container for record sets.
//!
//! ```text
//! magic "ECGDSET\0", version u32 = 1, count u32, then per record:
//!   id_len u32, id utf-8, fold u8 (0 = unassigned), fs f64,
//!   has_labels u8, labels 5 x u8, leads u32, len u32, samples f64 x leads*len
//! ```
//! Little-endian throughout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, EcgRecord, LabelVector, Signal, NUM_CLASSES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ECGDSET\0";
const VERSION: u32 = 1;

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.records.len() as u32).to_le_bytes())?;
    for r in &ds.records {
        w.write_all(&(r.id.len() as u32).to_le_bytes())?;
        w.write_all(r.id.as_bytes())?;
        w.write_all(&[ds.folds.get(&r.id).copied().unwrap_or(0)])?;
        w.write_all(&r.sampling_rate.to_le_bytes())?;
        match r.labels {
            Some(l) => {
                w.write_all(&[1])?;
                w.write_all(&l.bits().map(u8::from))?;
            }
            None => w.write_all(&[0; 1 + NUM_CLASSES])?,
        }
        w.write_all(&(r.signal.leads() as u32).to_le_bytes())?;
        w.write_all(&(r.signal.len() as u32).to_le_bytes())?;
        for v in r.signal.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::SignalData(format!("dataset file: {}", msg.into()))
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(b)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    if &take::<8, _>(&mut r)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut ds = Dataset::default();
    for _ in 0..count {
        let id_len = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(|_| bad("truncated id"))?;
        let id = String::from_utf8(id).map_err(|_| bad("id is not utf-8"))?;
        let [fold] = take::<1, _>(&mut r)?;
        let fs = f64::from_le_bytes(take(&mut r)?);
        let [has] = take::<1, _>(&mut r)?;
        let bits = take::<NUM_CLASSES, _>(&mut r)?;
        let leads = u32::from_le_bytes(take(&mut r)?) as usize;
        let len = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut raw = vec![0u8; leads * len * 8];
        r.read_exact(&mut raw).map_err(|_| bad(format!("truncated samples for {id}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let labels = (has == 1).then(|| LabelVector::new(bits.map(|b| b != 0)));
        let rec = EcgRecord::new(id.clone(), Signal::new(leads, len, data)?, fs, labels)?;
        if fold != 0 {
            ds.folds.insert(id, fold);
        }
        ds.records.push(rec);
    }
    Ok(ds)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(BufWriter::new(f), ds).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticConfig;

    #[test]
    fn roundtrip() {
        let mut ds = Dataset::synthetic(&SyntheticConfig {
            n: 5,
            len: 50,
            ..Default::default()
        })
        .unwrap();
        ds.records[1].labels = None;
        ds.folds.remove(&ds.records[2].id.clone());
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back.records, ds.records);
        assert_eq!(back.folds, ds.folds);
        assert!(read_dataset(&buf[..buf.len() - 1]).is_err());
    }
}
