//! File formats.
//!
//! Measurement CSV, one observation per row, preceded by a `# format:` line:
//!
//! ```text
//! # format: selfcal-v1
//! channel_id,position,profile_id,value,mask
//! ch00,0,p0,2.4873,1
//! ```
//!
//! `mask` is `1` (use) or `0` (retained but excluded from inference). A
//! channel must report the same position in every profile. Cells absent from
//! the file are read as masked-out `NaN`. Lines starting with `#` are
//! comments. Numbers are written with 17 significant digits, so a set
//! survives [`write_profile_set`] → [`read_profile_set`] exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::inference::{McmcChain, PosteriorSummary};
use crate::kernels::{rbf_spectral_density, white_spectral_density, KernelParams};
use crate::model::{validate, ProfileSet};
use crate::FORMAT_VERSION;

pub const MEASUREMENT_HEADER: [&str; 5] = ["channel_id", "position", "profile_id", "value", "mask"];

/// Shortest form carrying 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else if v == 0.0 {
        if v.is_sign_negative() { "-0" } else { "0" }.to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn version_line() -> String {
    format!("# format: {FORMAT_VERSION}\n")
}

fn parse_f64(s: &str, line: usize, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse { line, message: format!("invalid {what} {s:?}") })
}

/// Parse a measurement CSV without validating the resulting set.
pub fn parse_profile_set(text: &str) -> Result<ProfileSet> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != MEASUREMENT_HEADER {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", MEASUREMENT_HEADER.join(",")) });
    }

    let mut channel_index: HashMap<String, usize> = HashMap::new();
    let mut channels: Vec<(String, f64)> = Vec::new();
    let mut profile_index: HashMap<String, usize> = HashMap::new();
    let mut profiles: Vec<String> = Vec::new();
    let mut cells: HashMap<(usize, usize), (f64, bool, usize)> = HashMap::new();

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 5 {
            return Err(Error::Parse { line, message: format!("expected 5 fields, found {}", record.len()) });
        }
        let channel = record[0].to_string();
        let position = parse_f64(&record[1], line, "position")?;
        let profile = record[2].to_string();
        let value = parse_f64(&record[3], line, "value")?;
        let mask = match &record[4] {
            "1" => true,
            "0" => false,
            other => return Err(Error::Parse { line, message: format!("mask must be 0 or 1, found {other:?}") }),
        };
        if channel.is_empty() || profile.is_empty() {
            return Err(Error::Parse { line, message: "empty channel or profile id".into() });
        }
        let ci = match channel_index.get(&channel) {
            Some(&ci) => {
                if channels[ci].1.to_bits() != position.to_bits() {
                    return Err(Error::Parse {
                        line,
                        message: format!(
                            "channel {channel} at position {position}, earlier rows say {}",
                            channels[ci].1
                        ),
                    });
                }
                ci
            }
            None => {
                channel_index.insert(channel.clone(), channels.len());
                channels.push((channel.clone(), position));
                channels.len() - 1
            }
        };
        let pi = *profile_index.entry(profile.clone()).or_insert_with(|| {
            profiles.push(profile.clone());
            profiles.len() - 1
        });
        if let Some((_, _, first)) = cells.insert((ci, pi), (value, mask, line)) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate cell ({channel}, {profile}), first seen on line {first}"),
            });
        }
    }
    if channels.is_empty() {
        return Err(Error::Parse { line: 1, message: "no observations".into() });
    }

    let mut order: Vec<usize> = (0..channels.len()).collect();
    order.sort_by(|&a, &b| channels[a].1.total_cmp(&channels[b].1));
    let (n, m) = (channels.len(), profiles.len());
    let mut data = DMatrix::from_element(n, m, f64::NAN);
    let mut mask = DMatrix::from_element(n, m, false);
    for (row, &ci) in order.iter().enumerate() {
        for pi in 0..m {
            if let Some(&(v, mk, _)) = cells.get(&(ci, pi)) {
                data[(row, pi)] = v;
                mask[(row, pi)] = mk;
            }
        }
    }
    let mut ps = ProfileSet::new(order.iter().map(|&ci| channels[ci].1).collect(), data)?.with_mask(mask)?;
    ps.channel_ids = order.iter().map(|&ci| channels[ci].0.clone()).collect();
    ps.profile_ids = profiles;
    Ok(ps)
}

/// Read and validate a measurement CSV.
pub fn read_profile_set(path: &Path) -> Result<ProfileSet> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let ps = parse_profile_set(&text)?;
    validate(&ps).into_result()?;
    Ok(ps)
}

/// Serialize raw (uncentered) data; stored offsets are not written.
pub fn profile_set_to_string(ps: &ProfileSet) -> Result<String> {
    let mut out = version_line().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(MEASUREMENT_HEADER)?;
        for j in 0..ps.n_profiles() {
            for i in 0..ps.n_channels() {
                w.write_record([
                    ps.channel_ids[i].clone(),
                    fmt_f64(ps.positions[i]),
                    ps.profile_ids[j].clone(),
                    fmt_f64(ps.data[(i, j)]),
                    if ps.mask[(i, j)] { "1" } else { "0" }.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    Ok(String::from_utf8(out).expect("csv output is UTF-8"))
}

pub fn write_profile_set(ps: &ProfileSet, path: &Path) -> Result<()> {
    std::fs::write(path, profile_set_to_string(ps)?)?;
    Ok(())
}

/// Rows of `(s, S_f(s), S_n, S_f(s) + S_n)` for an RBF kernel plus white
/// noise of std `noise_sigma`.
pub fn spectrum_rows(kp: &KernelParams, noise_sigma: f64, freqs: &[f64]) -> Vec<[f64; 4]> {
    freqs
        .iter()
        .map(|&s| {
            let sf = rbf_spectral_density(s, kp);
            let sn = white_spectral_density(s, noise_sigma);
            [s, sf, sn, sf + sn]
        })
        .collect()
}

pub fn spectrum_to_string(rows: &[[f64; 4]]) -> Result<String> {
    let mut out = version_line().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["s", "S_f", "S_n", "S_total"])?;
        for r in rows {
            w.write_record(r.iter().map(|v| fmt_f64(*v)))?;
        }
        w.flush()?;
    }
    Ok(String::from_utf8(out).expect("csv output is UTF-8"))
}

/// Parse a spectrum CSV back into rows.
pub fn parse_spectrum(text: &str) -> Result<Vec<[f64; 4]>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut r = [0.0; 4];
        for (k, slot) in r.iter_mut().enumerate() {
            *slot = parse_f64(&record[k], line, "number")?;
        }
        rows.push(r);
    }
    Ok(rows)
}

/// Long-format band file for one derivative order:
/// `position,profile_id,median,lower95,upper95`.
pub fn write_bands(summary: &PosteriorSummary, order: usize, path: &Path) -> Result<()> {
    let bands = summary.order(order).ok_or_else(|| Error::Config(format!("order {order} not in summary")))?;
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(version_line().as_bytes())?;
    file.write_all(format!("# order: {order}\n").as_bytes())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["position", "profile_id", "median", "lower95", "upper95"])?;
    for (j, band) in bands.profiles.iter().enumerate() {
        for (g, x) in summary.grid.iter().enumerate() {
            w.write_record([
                fmt_f64(*x),
                summary.profile_ids[j].clone(),
                fmt_f64(band.median[g]),
                fmt_f64(band.lower95[g]),
                fmt_f64(band.upper95[g]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `chain,draw,<channel ids…>` with one row of `log a` per retained draw.
pub fn write_chain(chain: &McmcChain, channel_ids: &[String], path: &Path) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(version_line().as_bytes())?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(channel_ids.iter().cloned());
    w.write_record(&header)?;
    for (row, s) in chain.samples.iter().enumerate() {
        let mut rec = vec![(row / chain.draws_per_chain).to_string(), (row % chain.draws_per_chain).to_string()];
        rec.extend(s.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a chain file. Returns the per-chain draws and the channel ids in
/// column order.
/// Draws indexed `[chain][draw][channel]`.
pub type ChainDraws = Vec<Vec<Vec<f64>>>;

pub fn read_chain(path: &Path) -> Result<(ChainDraws, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "chain" || &headers[1] != "draw" {
        return Err(Error::Parse { line: 1, message: "expected header chain,draw,<channel ids>".into() });
    }
    let ids: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let mut chains: Vec<Vec<Vec<f64>>> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let c: usize = record[0].parse().map_err(|_| Error::Parse { line, message: "invalid chain index".into() })?;
        if c > chains.len() {
            return Err(Error::Parse { line, message: "chains out of order".into() });
        }
        if c == chains.len() {
            chains.push(Vec::new());
        }
        let row = (2..record.len()).map(|k| parse_f64(&record[k], line, "log gain")).collect::<Result<Vec<_>>>()?;
        chains[c].push(row);
    }
    if chains.is_empty() || chains.iter().any(|c| c.len() != chains[0].len()) {
        return Err(Error::Parse { line: 0, message: "chains empty or of unequal length".into() });
    }
    Ok((chains, ids))
}
