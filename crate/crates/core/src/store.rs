//! Persistent per-document state cache and the cached-inference latency
//! benchmark.
//!
//! Records live under `<root>/<fingerprint-hex>/<doc_id>.state`, so a cache
//! can never silently serve states from a different model. Composition loads
//! any subset of cached records and pools them without re-encoding anything.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{LayerState, Model, ModelState};
use crate::soup::{pool_states, SoupConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"SSOUP1";
const VERSION: u16 = 1;

/// A persisted, fingerprinted state for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct StateCacheRecord {
    pub doc_id: String,
    pub model_fingerprint: [u8; 32],
    pub token_count: usize,
    /// Per-layer state tensors, shape `[n_heads, d_head, d_state]`.
    pub layers: Vec<Tensor<f32>>,
}

impl StateCacheRecord {
    pub fn from_state(doc_id: impl Into<String>, state: &ModelState<f32>) -> Self {
        StateCacheRecord {
            doc_id: doc_id.into(),
            model_fingerprint: state.model_fingerprint,
            token_count: state.source_token_count,
            layers: state.layers.iter().map(|l| l.s.clone()).collect(),
        }
    }

    pub fn to_state(&self) -> ModelState<f32> {
        ModelState {
            layers: self
                .layers
                .iter()
                .map(|s| LayerState { s: s.clone() })
                .collect(),
            model_fingerprint: self.model_fingerprint,
            source_token_count: self.token_count,
        }
    }
}

/// Binary layout: magic, version, length-prefixed doc id, token count,
/// fingerprint, layer count, per-layer `(n_heads, d_head, d_state)` triples,
/// little-endian f32 payload, CRC32.
pub fn save_state(record: &StateCacheRecord, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let id = record.doc_id.as_bytes();
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&(record.token_count as u64).to_le_bytes());
    buf.extend_from_slice(&record.model_fingerprint);
    buf.extend_from_slice(&(record.layers.len() as u32).to_le_bytes());
    for layer in &record.layers {
        let sh = layer.shape();
        if sh.len() != 3 {
            return Err(Error::Format(format!("state layer must be 3-d, got {sh:?}")));
        }
        for d in sh {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    }
    for layer in &record.layers {
        for v in layer.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("state file truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_state(path: &Path) -> Result<StateCacheRecord> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 2 + 4 {
        return Err(Error::Format("state file truncated".into()));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(Error::Format("bad state-file magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported state version {version}")));
    }
    let id_len = r.u32()? as usize;
    let doc_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| Error::Format("doc id is not utf-8".into()))?;
    let token_count = r.u64()? as usize;
    let model_fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let n_layers = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let h = r.u32()? as usize;
        let p = r.u32()? as usize;
        let n = r.u32()? as usize;
        shapes.push([h, p, n]);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for sh in &shapes {
        let count = sh[0] * sh[1] * sh[2];
        let raw = r.take(count * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        layers.push(Tensor::from_vec(sh, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in state file".into()));
    }
    Ok(StateCacheRecord {
        doc_id,
        model_fingerprint,
        token_count,
        layers,
    })
}

/// Directory-per-model cache: `<root>/<fingerprint-hex>/<doc_id>.state`.
#[derive(Debug, Clone)]
pub struct StateStore {
    root: PathBuf,
}

impl StateStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StateStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record_path(&self, fingerprint: &[u8; 32], doc_id: &str) -> PathBuf {
        self.root.join(hex::encode(fingerprint)).join(format!("{doc_id}.state"))
    }

    pub fn save(&self, record: &StateCacheRecord) -> Result<PathBuf> {
        let path = self.record_path(&record.model_fingerprint, &record.doc_id);
        save_state(record, &path)?;
        Ok(path)
    }

    pub fn load(&self, fingerprint: &[u8; 32], doc_id: &str) -> Result<StateCacheRecord> {
        let path = self.record_path(fingerprint, doc_id);
        if !path.exists() {
            return Err(Error::CacheMiss(vec![doc_id.to_string()]));
        }
        let record = load_state(&path)?;
        if record.model_fingerprint != *fingerprint {
            return Err(Error::StaleState);
        }
        Ok(record)
    }

    /// Load the given cached documents and pool them. Never re-encodes; any
    /// missing id fails with the full missing list.
    pub fn compose(
        &self,
        doc_ids: &[String],
        cfg: &SoupConfig,
        fingerprint: &[u8; 32],
    ) -> Result<ModelState<f32>> {
        if doc_ids.is_empty() {
            return Err(Error::EmptyPool);
        }
        let missing: Vec<String> = doc_ids
            .iter()
            .filter(|id| !self.record_path(fingerprint, id).exists())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::CacheMiss(missing));
        }
        let states: Result<Vec<ModelState<f32>>> = doc_ids
            .iter()
            .map(|id| Ok(self.load(fingerprint, id)?.to_state()))
            .collect();
        pool_states(&states?, cfg)
    }

    /// The unique model directory containing every one of `doc_ids`; errors
    /// when no directory (or more than one) qualifies.
    pub fn resolve_fingerprint(&self, doc_ids: &[String]) -> Result<[u8; 32]> {
        let mut candidates = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().to_string();
            let Ok(bytes) = hex::decode(&name) else { continue };
            let Ok(fp) = <[u8; 32]>::try_from(bytes.as_slice()) else {
                continue;
            };
            if doc_ids.iter().all(|id| self.record_path(&fp, id).exists()) {
                candidates.push(fp);
            }
        }
        match candidates.len() {
            0 => Err(Error::CacheMiss(doc_ids.to_vec())),
            1 => Ok(candidates[0]),
            n => Err(Error::Format(format!(
                "{n} model caches contain these ids; pass the model explicitly"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// latency benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LatencyRow {
    pub doc_len: usize,
    pub concat_ms: f64,
    pub cached_ms: f64,
    pub speedup: f64,
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Wall-clock comparison of (a) a full joint pass over document + query
/// against (b) loading the document's cached state and running the query
/// alone. Median over `trials`, one discarded warmup trial each.
pub fn bench_latency(
    model: &Model<f32>,
    doc_lengths: &[usize],
    trials: usize,
    query_len: usize,
    cache_dir: &Path,
    seed: u64,
) -> Result<Vec<LatencyRow>> {
    use rand::Rng;
    use rand::SeedableRng;
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config().vocab_size;
    let mut tok = |len: usize| -> Vec<usize> {
        (0..len).map(|_| rng.gen_range(3..vocab)).collect()
    };
    let query = tok(query_len);
    let store = StateStore::new(cache_dir);

    let mut rows = Vec::with_capacity(doc_lengths.len());
    for &len in doc_lengths {
        let doc = tok(len);
        // offline, untimed: encode once and persist
        let state = model.encode(&doc, None)?;
        let record = StateCacheRecord::from_state(format!("bench_{len}"), &state);
        store.save(&record)?;
        let record_path = store.record_path(&model.fingerprint(), &format!("bench_{len}"));

        let joint: Vec<usize> = doc.iter().chain(&query).copied().collect();
        let mut concat_samples = Vec::with_capacity(trials);
        let mut cached_samples = Vec::with_capacity(trials);
        for trial in 0..trials + 1 {
            let t0 = Instant::now();
            let (logits, _) = model.forward_from(&joint, None, doc.len())?;
            let concat_elapsed = t0.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(logits);

            let t0 = Instant::now();
            let loaded = load_state(&record_path)?.to_state();
            let (logits, _) = model.forward_from(&query, Some(&loaded), 0)?;
            let cached_elapsed = t0.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(logits);

            if trial > 0 {
                concat_samples.push(concat_elapsed);
                cached_samples.push(cached_elapsed);
            }
        }
        let concat_ms = median(&mut concat_samples);
        let cached_ms = median(&mut cached_samples);
        rows.push(LatencyRow {
            doc_len: len,
            concat_ms,
            cached_ms,
            speedup: concat_ms / cached_ms,
        });
    }
    Ok(rows)
}

pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut out = String::from("doc_len,concat_ms,cached_ms,speedup\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.3},{:.3},{:.2}\n",
            r.doc_len, r.concat_ms, r.cached_ms, r.speedup
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::soup::soup_encode;
    use rand::Rng;
    use rand::SeedableRng;
    use tempfile::tempdir;

    fn model() -> Model<f32> {
        Model::init(ModelConfig {
            vocab_size: 29,
            n_layers: 2,
            d_model: 12,
            d_inner: 16,
            d_state: 6,
            n_heads: 2,
            eps: 1e-5,
            seed: 4,
        })
        .unwrap()
    }

    fn toks(rng: &mut rand_chacha::ChaCha8Rng, len: usize) -> Vec<usize> {
        (0..len).map(|_| rng.gen_range(3..29)).collect()
    }

    #[test]
    fn state_file_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let m = model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let state = m.encode(&toks(&mut rng, 33), None).unwrap();
        let rec = StateCacheRecord::from_state("doc_a", &state);
        let path = dir.path().join("doc_a.state");
        save_state(&rec, &path).unwrap();
        let loaded = load_state(&path).unwrap();
        assert_eq!(loaded, rec);
        for (a, b) in loaded.layers.iter().zip(&rec.layers) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corrupt_and_truncated_files_rejected() {
        let dir = tempdir().unwrap();
        let m = model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let state = m.encode(&toks(&mut rng, 10), None).unwrap();
        let path = dir.path().join("x.state");
        save_state(&StateCacheRecord::from_state("x", &state), &path).unwrap();

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_state(&path),
            Err(Error::Corrupt) | Err(Error::Format(_))
        ));

        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_state(&path), Err(Error::Corrupt)));

        fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(load_state(&path), Err(Error::Format(_))));
    }

    #[test]
    fn compose_equals_direct_soup_encode() {
        let dir = tempdir().unwrap();
        let m = model();
        let store = StateStore::new(dir.path());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let docs: Vec<Vec<usize>> = (0..3).map(|_| toks(&mut rng, 20)).collect();
        for (i, d) in docs.iter().enumerate() {
            let st = m.encode(d, None).unwrap();
            store
                .save(&StateCacheRecord::from_state(format!("d{i}"), &st))
                .unwrap();
        }
        let cfg = SoupConfig::average();
        let direct = soup_encode(&m, &docs, &cfg).unwrap();
        let ids: Vec<String> = (0..3).map(|i| format!("d{i}")).collect();
        let composed = store.compose(&ids, &cfg, &m.fingerprint()).unwrap();
        for (a, b) in composed.layers.iter().zip(&direct.layers) {
            assert!(a.s.max_abs_diff(&b.s) <= 1e-6);
        }
        assert_eq!(composed.source_token_count, direct.source_token_count);
    }

    #[test]
    fn compose_single_doc_is_the_cached_state() {
        let dir = tempdir().unwrap();
        let m = model();
        let store = StateStore::new(dir.path());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let st = m.encode(&toks(&mut rng, 15), None).unwrap();
        store.save(&StateCacheRecord::from_state("solo", &st)).unwrap();
        let composed = store
            .compose(&["solo".into()], &SoupConfig::average(), &m.fingerprint())
            .unwrap();
        assert_eq!(composed, st);
    }

    #[test]
    fn any_subset_composes_without_reencoding() {
        let dir = tempdir().unwrap();
        let m = model();
        let store = StateStore::new(dir.path());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for i in 0..4 {
            let st = m.encode(&toks(&mut rng, 12), None).unwrap();
            store
                .save(&StateCacheRecord::from_state(format!("d{i}"), &st))
                .unwrap();
        }
        m.reset_encode_calls();
        let mut composed = 0;
        for i in 0..4usize {
            for j in i + 1..4 {
                let ids = vec![format!("d{i}"), format!("d{j}")];
                store.compose(&ids, &SoupConfig::average(), &m.fingerprint()).unwrap();
                composed += 1;
            }
        }
        assert_eq!(composed, 6);
        assert_eq!(m.encode_calls(), 0, "compose must never re-encode");
    }

    #[test]
    fn stale_record_rejected_at_composition() {
        let dir = tempdir().unwrap();
        let other = Model::<f32>::init(ModelConfig {
            seed: 999,
            ..model().config().clone()
        })
        .unwrap();
        let store = StateStore::new(dir.path());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let st = other.encode(&toks(&mut rng, 10), None).unwrap();
        store.save(&StateCacheRecord::from_state("d0", &st)).unwrap();

        let m = model();
        let err = store.compose(&["d0".into()], &SoupConfig::average(), &m.fingerprint());
        assert!(matches!(err, Err(Error::CacheMiss(_))), "{err:?}");

        // same record, forged into the serving model's directory: caught by
        // the in-file fingerprint
        let forged = store.record_path(&m.fingerprint(), "d0");
        fs::create_dir_all(forged.parent().unwrap()).unwrap();
        fs::copy(store.record_path(&other.fingerprint(), "d0"), &forged).unwrap();
        let err = store.load(&m.fingerprint(), "d0");
        assert!(matches!(err, Err(Error::StaleState)), "{err:?}");
    }

    #[test]
    fn compose_lists_missing_ids() {
        let dir = tempdir().unwrap();
        let m = model();
        let store = StateStore::new(dir.path());
        let err = store.compose(
            &["a".into(), "b".into()],
            &SoupConfig::average(),
            &m.fingerprint(),
        );
        match err {
            Err(Error::CacheMiss(ids)) => assert_eq!(ids, vec!["a".to_string(), "b".to_string()]),
            other => panic!("expected cache miss, got {other:?}"),
        }
    }

    #[test]
    fn cache_transparency_for_decode() {
        let dir = tempdir().unwrap();
        let m = model();
        let store = StateStore::new(dir.path());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let docs: Vec<Vec<usize>> = (0..3).map(|_| toks(&mut rng, 18)).collect();
        for (i, d) in docs.iter().enumerate() {
            let st = m.encode(d, None).unwrap();
            store
                .save(&StateCacheRecord::from_state(format!("d{i}"), &st))
                .unwrap();
        }
        let q = toks(&mut rng, 5);
        let cfg = SoupConfig::average();
        let ids: Vec<String> = (0..3).map(|i| format!("d{i}")).collect();
        let via_cache = m
            .decode(&q, &store.compose(&ids, &cfg, &m.fingerprint()).unwrap())
            .unwrap();
        let direct = m.decode(&q, &soup_encode(&m, &docs, &cfg).unwrap()).unwrap();
        let max = via_cache.max_abs_diff(&direct);
        assert!(max <= 1e-6, "diff {max}");
    }

    #[test]
    fn bench_latency_smoke() {
        let dir = tempdir().unwrap();
        let m = model();
        let rows = bench_latency(&m, &[8, 16], 2, 4, dir.path(), 0).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.concat_ms > 0.0 && r.cached_ms > 0.0 && r.speedup > 0.0);
        }
        let csv = latency_csv(&rows);
        assert!(csv.starts_with("doc_len,concat_ms,cached_ms,speedup\n"));
    }
}
