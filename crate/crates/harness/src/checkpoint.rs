//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPPL" | u32 version
//! u64 len | config TOML
//! u64 seed | u64 epoch | u64 global_step | u64 view_digest
//! u32 count | { u32 len | name | u32 rank | u64 extents[rank] | f64 payload[..] }
//! u32 queues | { u64 capacity | u64 dim | u64 next_stamp | u64 n | { u64 label | u64 stamp | f64[dim] } }
//! u64 len | metrics CSV
//! u64 len | diagnostics JSON
//! u32 CRC32 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use semppl_core::nets::NetworkPair;
use semppl_core::plqueue::{LabeledQueue, QueueBank};
use semppl_core::Scalar;

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{parse_csv, render_csv};
use crate::trainer::{EpochDiagnostics, Trainer, TrainerState};

pub const MAGIC: &[u8; 4] = b"SPPL";
pub const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "lars.momentum.";

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn text(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor<S: Scalar>(&mut self, name: &str, shape: &[usize], values: &[S]) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(shape.len() as u32);
        for &e in shape {
            self.u64(e as u64);
        }
        for v in values {
            self.f64(v.as_f64());
        }
    }
}

/// Serializes the complete resumable state of `trainer`.
pub fn encode<S: Scalar>(trainer: &Trainer<S>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.text(&trainer.config().to_toml());
    w.u64(trainer.config().train.seed);
    w.u64(trainer.epoch() as u64);
    w.u64(trainer.global_step());
    w.u64(trainer.view_digest());

    let nets = trainer.nets().state_entries();
    let params: Vec<_> = trainer.nets().online_params().collect();
    let momentum = trainer.lars().buffers();
    w.u32((nets.len() + momentum.len()) as u32);
    for (name, shape, values) in &nets {
        w.tensor(name, shape, values);
    }
    for (i, (buf, p)) in momentum.iter().zip(&params).enumerate() {
        w.tensor(&format!("{MOMENTUM_PREFIX}{i}"), &p.shape, buf);
    }

    let queues = trainer.bank().queues();
    w.u32(queues.len() as u32);
    for q in queues {
        let (capacity, dim, next_stamp, entries) = q.snapshot();
        w.u64(capacity as u64);
        w.u64(dim as u64);
        w.u64(next_stamp);
        w.u64(entries.len() as u64);
        for (label, stamp, emb) in entries {
            w.u64(label as u64);
            w.u64(stamp);
            for v in emb {
                w.f64(v.as_f64());
            }
        }
    }

    w.text(&render_csv(trainer.metrics()));
    w.text(&serde_json::to_string(trainer.diagnostics()).expect("diagnostics serialize"));
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn save<S: Scalar>(trainer: &Trainer<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(trainer))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(HarnessError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// A count of `width`-byte items that must fit in what is left.
    fn count(&mut self, raw: u64, width: usize) -> Result<usize> {
        let n = usize::try_from(raw).map_err(|_| HarnessError::Truncated)?;
        if n.saturating_mul(width) > self.bytes.len() - self.pos {
            return Err(HarnessError::Truncated);
        }
        Ok(n)
    }

    fn text(&mut self) -> Result<&'a str> {
        let raw = self.u64()?;
        let n = self.count(raw, 1)?;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| HarnessError::Malformed("text field is not UTF-8".into()))
    }

    fn tensor<S: Scalar>(&mut self) -> Result<(String, Vec<usize>, Vec<S>)> {
        let raw = self.u32()? as u64;
        let n = self.count(raw, 1)?;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| HarnessError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let raw = self.u32()? as u64;
        let rank = self.count(raw, 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let raw = self.u64()?;
            shape.push(usize::try_from(raw).map_err(|_| HarnessError::Truncated)?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or(HarnessError::Truncated)?;
        let len = self.count(len as u64, 8)?;
        let values = (0..len)
            .map(|_| self.f64().map(S::lit))
            .collect::<Result<_>>()?;
        Ok((name, shape, values))
    }
}

struct Parsed<S> {
    config: TrainConfig,
    state: TrainerState<S>,
}

fn parse<S: Scalar>(bytes: &[u8]) -> Result<Parsed<S>> {
    let mut r = Reader { bytes, pos: 8 };
    let config = TrainConfig::from_toml(r.text()?)
        .map_err(|e| HarnessError::Malformed(format!("config echo: {e}")))?;
    let seed = r.u64()?;
    if seed != config.train.seed {
        return Err(HarnessError::Malformed(
            "seed disagrees with the config echo".into(),
        ));
    }
    let epoch = r.u64()? as usize;
    let global_step = r.u64()?;
    let view_digest = r.u64()?;

    let raw = r.u32()? as u64;
    let count = r.count(raw, 4)?;
    let mut table = BTreeMap::new();
    let mut momentum = BTreeMap::new();
    for _ in 0..count {
        let (name, shape, values) = r.tensor::<S>()?;
        match name.strip_prefix(MOMENTUM_PREFIX) {
            Some(i) => {
                let i: usize = i
                    .parse()
                    .map_err(|_| HarnessError::Malformed(format!("bad tensor name {name}")))?;
                momentum.insert(i, values);
            }
            None => {
                table.insert(name, (shape, values));
            }
        }
    }
    let momentum: Vec<Vec<S>> = momentum.into_values().collect();

    let raw = r.u32()? as u64;
    let nq = r.count(raw, 32)?;
    let mut queues = Vec::with_capacity(nq);
    for _ in 0..nq {
        let capacity = r.u64()? as usize;
        let raw = r.u64()?;
        let dim = r.count(raw, 8)?;
        let next_stamp = r.u64()?;
        let raw = r.u64()?;
        let n = r.count(raw, 16 + 8 * dim)?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let label = r.u64()? as usize;
            let stamp = r.u64()?;
            let emb = (0..dim)
                .map(|_| r.f64().map(S::lit))
                .collect::<Result<Vec<S>>>()?;
            entries.push((label, stamp, emb));
        }
        queues.push(LabeledQueue::from_snapshot(
            capacity, dim, next_stamp, entries,
        )?);
    }
    let bank = QueueBank::from_queues(queues)?;

    let metrics = parse_csv(r.text()?)?;
    let diagnostics: Vec<EpochDiagnostics> = serde_json::from_str(r.text()?)
        .map_err(|e| HarnessError::Malformed(format!("diagnostics: {e}")))?;
    if bytes.len() - r.pos < 4 {
        return Err(HarnessError::Truncated);
    }
    if bytes.len() - r.pos > 4 {
        return Err(HarnessError::Malformed(
            "trailing bytes after the checksum".into(),
        ));
    }

    let mut nets = NetworkPair::build(&config.networks, 0)?;
    nets.restore_state(&table)
        .map_err(|e| HarnessError::Malformed(e.to_string()))?;
    Ok(Parsed {
        config,
        state: TrainerState {
            epoch,
            global_step,
            view_digest,
            nets,
            bank,
            momentum,
            metrics,
            diagnostics,
        },
    })
}

/// Rebuilds a trainer from checkpoint bytes.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Trainer<S>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(if bytes.len() < 4 && MAGIC.starts_with(bytes) {
            HarnessError::Truncated
        } else {
            HarnessError::BadMagic
        });
    }
    if bytes.len() < 8 {
        return Err(HarnessError::Truncated);
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != VERSION {
        return Err(HarnessError::Version {
            found,
            expected: VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(HarnessError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        // Tell a short file apart from a damaged one.
        return Err(match parse::<S>(bytes) {
            Err(HarnessError::Truncated) => HarnessError::Truncated,
            _ => HarnessError::Checksum { stored, computed },
        });
    }
    let Parsed { config, state } = parse(bytes)?;
    Trainer::restore(config, state)
}

pub fn load<S: Scalar>(path: &Path) -> Result<Trainer<S>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig::load(
            crate::config::BASE_PRESET,
            &[
                ("dataset.samples_per_class".into(), "12".into()),
                ("train.batch_size".into(), "40".into()),
                ("train.epochs".into(), "2".into()),
                ("train.test_samples_per_class".into(), "4".into()),
                ("lars.warmup_epochs".into(), "1".into()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut t = Trainer::<f64>::new(tiny()).unwrap();
        t.run_epoch().unwrap();
        let bytes = encode(&t);
        let back = decode::<f64>(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn damage_is_detected() {
        let t = Trainer::<f64>::new(tiny()).unwrap();
        let bytes = encode(&t);

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(
            decode::<f64>(&flipped),
            Err(HarnessError::Checksum { .. })
        ));

        assert!(matches!(
            decode::<f64>(&bytes[..bytes.len() - 100]),
            Err(HarnessError::Truncated)
        ));

        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(
            decode::<f64>(&future),
            Err(HarnessError::Version { found, .. }) if found == VERSION + 1
        ));

        assert!(matches!(
            decode::<f64>(b"NOPE\x01\0\0\0"),
            Err(HarnessError::BadMagic)
        ));
        assert!(matches!(decode::<f64>(b"SP"), Err(HarnessError::Truncated)));
    }
}
