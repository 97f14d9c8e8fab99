//! Layout: 8-byte magic, little-endian u64 header length, JSON header, then
//! every array of the header's `arrays` list as raw little-endian f64, in order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{IntervalAccumulator, MetricsRow};
use super::run::SeedRun;
use crate::autodiff::{ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"NMCKPT\0\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ExperimentConfig,
    seed: u64,
    input_dim: usize,
    classes: usize,
    step: usize,
    rng_stream: u64,
    /// u128 as a decimal string.
    rng_word_pos: String,
    adamw_steps: u64,
    accumulator: IntervalAccumulator,
    rows: Vec<MetricsRow>,
    arrays: Vec<ArrayMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

fn collect(run: &SeedRun) -> Result<Vec<(String, Tensor)>> {
    let s = &run.state;
    let mut out = Vec::new();
    let mut push_store = |prefix: &str, store: &ParamStore| {
        for (name, t) in store.iter() {
            out.push((format!("{prefix}/{name}"), t.clone()));
        }
    };
    push_store("disc", &s.disc.params);
    push_store("nfc", &s.nfc.params);
    push_store("ema", s.ema.shadow());
    let like =
        |store: &ParamStore, bufs: &[Vec<f64>], prefix: &str| -> Result<Vec<(String, Tensor)>> {
            store
                .iter()
                .zip(bufs)
                .map(|((name, t), b)| {
                    Ok((
                        format!("{prefix}/{name}"),
                        Tensor::new(t.shape().to_vec(), b.clone())?,
                    ))
                })
                .collect()
        };
    out.extend(like(&s.disc.params, s.sgd.velocity(), "sgd_velocity")?);
    let (m, v) = s.adamw.moments();
    out.extend(like(&s.nfc.params, m, "adamw_m")?);
    out.extend(like(&s.nfc.params, v, "adamw_v")?);
    let c = s.da.classes();
    let window: Vec<f64> = s.da.window().flatten().copied().collect();
    out.push((
        "da_window".into(),
        Tensor::matrix(window.len() / c, c, window)?,
    ));
    Ok(out)
}

pub fn save_checkpoint(path: &Path, run: &SeedRun) -> Result<()> {
    let arrays = collect(run)?;
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: run.config.clone(),
        seed: run.seed,
        input_dim: run.data.train.input_dim(),
        classes: run.data.train.classes,
        step: run.state.step,
        rng_stream: run.state.rng.get_stream(),
        rng_word_pos: run.state.rng.get_word_pos().to_string(),
        adamw_steps: run.state.adamw.steps_taken(),
        accumulator: run.acc.clone(),
        rows: run.rows.clone(),
        arrays: arrays
            .iter()
            .map(|(n, t)| ArrayMeta {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(
        16 + json.len() + 8 * arrays.iter().map(|(_, t)| t.len()).sum::<usize>(),
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &arrays {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Write-then-rename so a crash never leaves a truncated checkpoint behind.
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn restore_store(
    store: &mut ParamStore,
    prefix: &str,
    arrays: &mut std::collections::HashMap<String, Tensor>,
) -> Result<()> {
    for (name, t) in store.names().to_vec().iter().zip(store.tensors_mut()) {
        let key = format!("{prefix}/{name}");
        let saved = arrays
            .remove(&key)
            .ok_or_else(|| bad(format!("missing array {key}")))?;
        if saved.shape() != t.shape() {
            return Err(bad(format!(
                "array {key} has shape {:?}, expected {:?}",
                saved.shape(),
                t.shape()
            )));
        }
        *t = saved;
    }
    Ok(())
}

fn take_buffers(
    store: &ParamStore,
    prefix: &str,
    arrays: &mut std::collections::HashMap<String, Tensor>,
) -> Result<Vec<Vec<f64>>> {
    let mut tmp = store.clone();
    restore_store(&mut tmp, prefix, arrays)?;
    Ok(tmp.tensors().iter().map(|t| t.data().to_vec()).collect())
}

/// Rebuilds a run from disk. Nothing is returned unless every piece validates.
pub fn load_checkpoint(path: &Path) -> Result<SeedRun> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad(format!("{} is not a checkpoint", path.display())));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("corrupt header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let payload = &body[len..];
    let total: usize = header
        .arrays
        .iter()
        .map(|a| a.shape.iter().product::<usize>())
        .sum();
    if payload.len() != 8 * total {
        return Err(bad(format!(
            "payload holds {} bytes, header describes {}",
            payload.len(),
            8 * total
        )));
    }
    let mut arrays = std::collections::HashMap::new();
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for a in header.arrays {
        let n = a.shape.iter().product();
        let t = Tensor::new(a.shape, values.by_ref().take(n).collect())
            .map_err(|e| bad(e.to_string()))?;
        arrays.insert(a.name, t);
    }

    let mut run = SeedRun::new(&header.config, header.seed)?;
    if run.data.train.input_dim() != header.input_dim || run.data.train.classes != header.classes {
        return Err(bad(
            "data shape recorded in the checkpoint does not match its config",
        ));
    }
    let s = &mut run.state;
    restore_store(&mut s.disc.params, "disc", &mut arrays)?;
    restore_store(&mut s.nfc.params, "nfc", &mut arrays)?;
    restore_store(s.ema.shadow_mut(), "ema", &mut arrays)?;
    let velocity = take_buffers(&s.disc.params, "sgd_velocity", &mut arrays)?;
    s.sgd
        .velocity_mut()
        .iter_mut()
        .zip(velocity)
        .for_each(|(v, saved)| *v = saved);
    let m = take_buffers(&s.nfc.params, "adamw_m", &mut arrays)?;
    let v = take_buffers(&s.nfc.params, "adamw_v", &mut arrays)?;
    s.adamw.restore(header.adamw_steps, m, v)?;
    let window = arrays
        .remove("da_window")
        .ok_or_else(|| bad("missing array da_window"))?;
    if window.cols() != s.da.classes() {
        return Err(bad("DA window has the wrong class count"));
    }
    s.da.restore_window((0..window.rows()).map(|i| window.row(i).to_vec()).collect())?;
    if let Some(extra) = arrays.keys().next() {
        return Err(bad(format!("unexpected array {extra}")));
    }
    s.rng.set_stream(header.rng_stream);
    s.rng.set_word_pos(
        header
            .rng_word_pos
            .parse()
            .map_err(|_| bad("bad rng position"))?,
    );
    s.step = header.step;
    run.acc = header.accumulator;
    run.rows = header.rows;
    Ok(run)
}
