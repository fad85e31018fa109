//! Minimal reader for PTB-XL as distributed: WFDB text headers, format-16
//! signal files and the `ptbxl_database.csv` metadata table.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::data::{Dataset, EcgRecord, LabelVector, Signal, Superclass};
use crate::error::{Error, Result};

pub const DEFAULT_GAIN: f64 = 200.0;
pub const INVALID_SAMPLE: i16 = i16::MIN;
/// Minimum likelihood for an SCP statement to count towards a superclass.
pub const LIKELIHOOD_THRESHOLD: f64 = 50.0;

const SCP_TABLE: &str = include_str!("../data/scp_superclass.csv");

#[derive(Clone, Debug, PartialEq)]
pub struct SignalSpec {
    pub file_name: String,
    pub format: u32,
    /// ADC units per physical unit.
    pub adc_gain: f64,
    pub baseline: i32,
    pub units: String,
    pub lead_name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WfdbHeader {
    pub record_name: String,
    pub sampling_rate: f64,
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
}

impl WfdbHeader {
    pub fn n_signals(&self) -> usize {
        self.signals.len()
    }
}

fn header_err(line: usize, detail: impl Into<String>) -> Error {
    Error::Header {
        line,
        detail: detail.into(),
    }
}

/// Leading decimal number of a token such as `100/...` or `1000.0(0)/mV`.
fn leading_number(tok: &str) -> &str {
    let end = tok
        .char_indices()
        .find(|&(i, c)| !(c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || ((c == '-' || c == '+') && i == 0)))
        .map_or(tok.len(), |(i, _)| i);
    &tok[..end]
}

fn parse_record_line(line_no: usize, line: &str) -> Result<(String, usize, f64, usize)> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() < 4 {
        return Err(header_err(
            line_no,
            format!("record line needs name, signal count, frequency and sample count, got {:?}", line.trim()),
        ));
    }
    if f[0].contains('/') {
        return Err(header_err(line_no, "multi-segment records are not supported"));
    }
    let n_signals: usize = f[1]
        .parse()
        .map_err(|_| header_err(line_no, format!("bad signal count {:?}", f[1])))?;
    let fs: f64 = leading_number(f[2])
        .parse()
        .map_err(|_| header_err(line_no, format!("bad sampling frequency {:?}", f[2])))?;
    let n_samples: usize = f[3]
        .parse()
        .map_err(|_| header_err(line_no, format!("bad sample count {:?}", f[3])))?;
    if n_signals == 0 || n_samples == 0 || !(fs > 0.0) {
        return Err(header_err(line_no, "signal count, frequency and sample count must be positive"));
    }
    Ok((f[0].to_string(), n_signals, fs, n_samples))
}

fn parse_signal_line(line_no: usize, line: &str) -> Result<SignalSpec> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() < 2 {
        return Err(header_err(line_no, "signal line needs a file name and a format"));
    }
    let fmt_tok = f[1];
    let fmt_digits = fmt_tok
        .split(|c: char| !c.is_ascii_digit())
        .next()
        .unwrap_or_default();
    let format: u32 = fmt_digits
        .parse()
        .map_err(|_| header_err(line_no, format!("bad format {fmt_tok:?}")))?;
    if format != 16 {
        return Err(Error::UnsupportedFormat(format));
    }
    let (mut adc_gain, mut baseline, mut units) = (DEFAULT_GAIN, 0i32, "mV".to_string());
    if let Some(tok) = f.get(2) {
        let g: f64 = leading_number(tok)
            .parse()
            .map_err(|_| header_err(line_no, format!("bad gain {tok:?}")))?;
        if g < 0.0 || !g.is_finite() {
            return Err(header_err(line_no, format!("gain must be positive, got {g}")));
        }
        if g > 0.0 {
            adc_gain = g;
        }
        if let Some(open) = tok.find('(') {
            let close = tok[open..]
                .find(')')
                .ok_or_else(|| header_err(line_no, format!("unterminated baseline in {tok:?}")))?;
            baseline = tok[open + 1..open + close]
                .parse()
                .map_err(|_| header_err(line_no, format!("bad baseline in {tok:?}")))?;
        }
        if let Some(slash) = tok.find('/') {
            units = tok[slash + 1..].to_string();
        }
    }
    let lead_name = if f.len() > 8 { f[8..].join(" ") } else { String::new() };
    Ok(SignalSpec {
        file_name: f[0].to_string(),
        format,
        adc_gain,
        baseline,
        units,
        lead_name,
    })
}

pub fn parse_header(text: &str) -> Result<WfdbHeader> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let (no, first) = lines.next().ok_or_else(|| header_err(0, "no record line"))?;
    let (record_name, n_signals, sampling_rate, n_samples) = parse_record_line(no, first)?;
    let signals = lines
        .take(n_signals)
        .map(|(no, l)| parse_signal_line(no, l))
        .collect::<Result<Vec<_>>>()?;
    if signals.len() != n_signals {
        return Err(header_err(
            no,
            format!("record declares {n_signals} signals but {} are listed", signals.len()),
        ));
    }
    Ok(WfdbHeader {
        record_name,
        sampling_rate,
        n_samples,
        signals,
    })
}

/// Decodes interleaved little-endian int16 frames into physical units.
pub fn read_signal(header: &WfdbHeader, bytes: &[u8]) -> Result<EcgRecord> {
    let (d, l) = (header.n_signals(), header.n_samples);
    if bytes.len() != 2 * d * l {
        return Err(Error::SignalData(format!(
            "{}: expected {} bytes for {d} signals x {l} samples, got {}",
            header.record_name,
            2 * d * l,
            bytes.len()
        )));
    }
    let mut data = vec![0.0; d * l];
    for (i, pair) in bytes.chunks_exact(2).enumerate() {
        let adc = i16::from_le_bytes([pair[0], pair[1]]);
        let (t, s) = (i / d, i % d);
        if adc == INVALID_SAMPLE {
            return Err(Error::InvalidSample { sample: t, signal: s });
        }
        let spec = &header.signals[s];
        data[s * l + t] = (adc as f64 - spec.baseline as f64) / spec.adc_gain;
    }
    EcgRecord::new(header.record_name.clone(), Signal::new(d, l, data)?, header.sampling_rate, None)
}

/// Raw adc values per signal, without the physical conversion.
pub fn read_adc(header: &WfdbHeader, bytes: &[u8]) -> Result<Vec<Vec<i16>>> {
    let (d, l) = (header.n_signals(), header.n_samples);
    if bytes.len() != 2 * d * l {
        return Err(Error::SignalData(format!("expected {} bytes, got {}", 2 * d * l, bytes.len())));
    }
    let mut out = vec![Vec::with_capacity(l); d];
    for (i, pair) in bytes.chunks_exact(2).enumerate() {
        out[i % d].push(i16::from_le_bytes([pair[0], pair[1]]));
    }
    Ok(out)
}

/// Renders a header in the layout [`parse_header`] accepts.
pub fn format_header(h: &WfdbHeader) -> String {
    let mut s = format!("{} {} {} {}\n", h.record_name, h.n_signals(), h.sampling_rate, h.n_samples);
    for sig in &h.signals {
        s.push_str(&format!(
            "{} {} {}({})/{} 16 0 0 0 0 {}\n",
            sig.file_name, sig.format, sig.adc_gain, sig.baseline, sig.units, sig.lead_name
        ));
    }
    s
}

/// Interleaves per-signal adc values into a format-16 byte stream.
pub fn write_signal(adc: &[Vec<i16>]) -> Result<Vec<u8>> {
    let l = adc.first().map_or(0, |s| s.len());
    if adc.iter().any(|s| s.len() != l) {
        return Err(Error::SignalData("signals differ in length".into()));
    }
    let mut out = Vec::with_capacity(2 * adc.len() * l);
    for t in 0..l {
        for s in adc {
            out.extend_from_slice(&s[t].to_le_bytes());
        }
    }
    Ok(out)
}

/// Bundled SCP statement -> diagnostic superclass table.
pub fn scp_table() -> BTreeMap<&'static str, Superclass> {
    SCP_TABLE
        .lines()
        .skip(1)
        .filter_map(|l| {
            let (code, class) = l.split_once(',')?;
            Some((code.trim(), Superclass::from_code(class.trim())?))
        })
        .collect()
}

pub fn map_scp_to_superclass(scp_codes: &BTreeMap<String, f64>) -> LabelVector {
    let table = scp_table();
    let mut labels = LabelVector::default();
    for (code, &likelihood) in scp_codes {
        if likelihood >= LIKELIHOOD_THRESHOLD {
            if let Some(&class) = table.get(code.as_str()) {
                labels.set(class);
            }
        }
    }
    labels
}

/// Parses the serialized dict in the `scp_codes` column, e.g.
/// `{'NORM': 100.0, 'SR': 0.0}`.
pub fn parse_scp_codes(text: &str) -> Result<BTreeMap<String, f64>> {
    let err = |d: String| Error::Metadata { row: 0, detail: d };
    let inner = text
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| err(format!("scp_codes is not a mapping: {text:?}")))?;
    let mut out = BTreeMap::new();
    for item in inner.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once(':')
            .ok_or_else(|| err(format!("bad scp entry {item:?}")))?;
        let key = k.trim().trim_matches(|c| c == '\'' || c == '"').to_string();
        let val: f64 = v
            .trim()
            .parse()
            .map_err(|_| err(format!("bad likelihood in {item:?}")))?;
        out.insert(key, val);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PtbxlMetadataRow {
    pub ecg_id: String,
    pub scp_codes: BTreeMap<String, f64>,
    pub strat_fold: u8,
    pub filename_lr: String,
}

pub fn read_metadata<R: Read>(reader: R) -> Result<Vec<PtbxlMetadataRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Metadata {
            row: 0,
            detail: format!("missing column {name}"),
        })
    };
    let (c_id, c_scp, c_fold, c_file) = (col("ecg_id")?, col("scp_codes")?, col("strat_fold")?, col("filename_lr")?);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let err = |d: String| Error::Metadata { row, detail: d };
        let get = |c: usize| rec.get(c).unwrap_or_default().trim();
        let ecg_id = get(c_id);
        let ecg_id = ecg_id.strip_suffix(".0").unwrap_or(ecg_id).to_string();
        let scp_codes = parse_scp_codes(get(c_scp)).map_err(|e| err(e.to_string()))?;
        let fold_txt = get(c_fold);
        let strat_fold: u8 = fold_txt
            .strip_suffix(".0")
            .unwrap_or(fold_txt)
            .parse()
            .map_err(|_| err(format!("bad strat_fold {fold_txt:?}")))?;
        if !(1..=10).contains(&strat_fold) {
            return Err(err(format!("strat_fold {strat_fold} outside 1..=10")));
        }
        let filename_lr = get(c_file).to_string();
        if filename_lr.is_empty() {
            return Err(err("empty filename_lr".into()));
        }
        rows.push(PtbxlMetadataRow {
            ecg_id,
            scp_codes,
            strat_fold,
            filename_lr,
        });
    }
    Ok(rows)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads every record listed in `<root>/ptbxl_database.csv` (up to `limit`)
/// from its 100 Hz files. Ids are the `ecg_id` column; labels come from
/// [`map_scp_to_superclass`].
pub fn load_ptbxl(root: &Path, limit: Option<usize>) -> Result<Dataset> {
    let meta_path = root.join("ptbxl_database.csv");
    let meta = read_metadata(std::fs::File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let rows: Vec<_> = meta.into_iter().take(limit.unwrap_or(usize::MAX)).collect();
    let loaded = crate::par::map_slice(&rows, |row| -> Result<EcgRecord> {
        let base = root.join(&row.filename_lr);
        let hea = base.with_extension("hea");
        let text = String::from_utf8(read_file(&hea)?).map_err(|_| Error::Header {
            line: 0,
            detail: format!("{} is not utf-8", hea.display()),
        })?;
        let header = parse_header(&text)?;
        let dat = base.with_file_name(&header.signals[0].file_name);
        let mut rec = read_signal(&header, &read_file(&dat)?)?;
        rec.id = row.ecg_id.clone();
        rec.labels = Some(map_scp_to_superclass(&row.scp_codes));
        Ok(rec)
    });
    let mut ds = Dataset::default();
    for (row, rec) in rows.iter().zip(loaded) {
        ds.folds.insert(row.ecg_id.clone(), row.strat_fold);
        ds.records.push(rec?);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PTBXL_HEADER: &str = "00001_lr 12 100 1000\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 -119 1508 0 I\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 -55 723 0 II\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 64 64758 0 III\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 86 64423 0 AVR\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 -91 1211 0 AVL\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 4 7 0 AVF\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 -69 63827 0 V1\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 -31 6999 0 V2\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 0 63759 0 V3\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 -26 61447 0 V4\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 -39 64979 0 V5\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 -79 832 0 V6\n";

    #[test]
    fn parses_ptbxl_style_header() {
        let h = parse_header(PTBXL_HEADER).unwrap();
        assert_eq!(h.record_name, "00001_lr");
        assert_eq!((h.n_signals(), h.sampling_rate, h.n_samples), (12, 100.0, 1000));
        assert_eq!(h.signals[0].adc_gain, 1000.0);
        assert_eq!(h.signals[11].lead_name, "V6");
        assert_eq!(h.signals[3].format, 16);
    }

    #[test]
    fn minimal_header_defaults() {
        let h = parse_header("# comment\nrec001 1 100 1000\nrec001.dat 16\n").unwrap();
        assert_eq!(h.signals[0].adc_gain, DEFAULT_GAIN);
        assert_eq!(h.signals[0].baseline, 0);
        let h = parse_header("rec001 12 100 1000\n");
        assert!(matches!(h, Err(Error::Header { .. })));
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(
            parse_header("r 1 100 10\nr.dat 212 200\n"),
            Err(Error::UnsupportedFormat(212))
        ));
        assert!(matches!(parse_header("r 1 100\n"), Err(Error::Header { .. })));
        assert!(matches!(parse_header("r x 100 10\nr.dat 16\n"), Err(Error::Header { .. })));
        assert!(matches!(parse_header(""), Err(Error::Header { .. })));
        assert!(matches!(parse_header("r 1 100 10\nr.dat 16 -3\n"), Err(Error::Header { .. })));
    }

    #[test]
    fn little_endian_and_offset() {
        let h = parse_header("r 1 100 2\nr.dat 16 1(0)/mV\n").unwrap();
        let rec = read_signal(&h, &[0x01, 0x00, 0x00, 0x01]).unwrap();
        assert_eq!(rec.signal.data(), &[1.0, 256.0]);
        let h = parse_header("r 1 100 2\nr.dat 16 10(7)/mV\n").unwrap();
        let rec = read_signal(&h, &write_signal(&[vec![7, 17]]).unwrap()).unwrap();
        assert_eq!(rec.signal.data(), &[0.0, 1.0]);
    }

    #[test]
    fn signal_errors() {
        let h = parse_header("r 2 100 2\nr.dat 16\nr.dat 16\n").unwrap();
        assert!(matches!(read_signal(&h, &[0; 6]), Err(Error::SignalData(_))));
        let bytes = write_signal(&[vec![1, 2], vec![3, i16::MIN]]).unwrap();
        assert!(matches!(
            read_signal(&h, &bytes),
            Err(Error::InvalidSample { sample: 1, signal: 1 })
        ));
    }

    #[test]
    fn scp_mapping() {
        let m = |pairs: &[(&str, f64)]| pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let l = map_scp_to_superclass(&m(&[("NORM", 100.0)]));
        assert_eq!(l.bits(), [true, false, false, false, false]);
        assert!(map_scp_to_superclass(&m(&[])).is_empty());
        assert!(map_scp_to_superclass(&m(&[("IMI", 35.0), ("SR", 100.0)])).is_empty());
        assert_eq!(scp_table().len(), 44);
    }

    #[test]
    fn scp_dict_and_metadata_csv() {
        let d = parse_scp_codes("{'NORM': 100.0, 'LVOLT': 0.0, 'SR': 0.0}").unwrap();
        assert_eq!(d["NORM"], 100.0);
        assert_eq!(d.len(), 3);
        assert!(parse_scp_codes("NORM").is_err());
        let csv = "ecg_id,patient_id,scp_codes,strat_fold,filename_lr,filename_hr\n\
                   1,15709.0,\"{'NORM': 100.0, 'SR': 0.0}\",3,records100/00000/00001_lr,records500/00000/00001_hr\n\
                   2,13243.0,\"{'IMI': 100.0}\",10,records100/00000/00002_lr,records500/00000/00002_hr\n";
        let rows = read_metadata(csv.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].strat_fold, 10);
        assert_eq!(rows[0].filename_lr, "records100/00000/00001_lr");
        let bad = "ecg_id,scp_codes,strat_fold,filename_lr\n1,{},11,x\n";
        assert!(matches!(read_metadata(bad.as_bytes()), Err(Error::Metadata { row: 1, .. })));
        let missing = "ecg_id,scp_codes,filename_lr\n";
        assert!(read_metadata(missing.as_bytes()).is_err());
    }
}
