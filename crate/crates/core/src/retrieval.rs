//! The search side of the environment: an in-process deterministic corpus
//! retriever for tests and desk-scale training, and a client for a remote
//! image-search service. Both satisfy [`SearchEnv`]; the rollout engine
//! cannot tell them apart.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::perception::{decode_image, ImageDocument};
use crate::trajectory::QueryTask;

/// A ranked retrieval outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `(doc_id, score)` sorted by non-increasing score.
    pub ranked: Vec<(String, f64)>,
    pub query: String,
    pub top_k: usize,
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("search endpoint unreachable after {attempts} attempts: {last}")]
    Timeout { attempts: u32, last: String },
    #[error("malformed search response: {0}")]
    MalformedResponse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("image decode error: {0}")]
    Decode(String),
}

/// One corpus entry: the page image plus the text surrogate the simulated
/// scorer matches queries against.
#[derive(Debug, Clone)]
pub struct CorpusDocument {
    pub doc: ImageDocument,
    pub surrogate: String,
    pub payload: ImagePayload,
}

#[derive(Debug, Clone)]
pub enum ImagePayload {
    Bytes(Arc<Vec<u8>>),
    Path(PathBuf),
}

/// A fetched page ready for the perception pipeline.
#[derive(Debug, Clone)]
pub struct FetchedDocument {
    pub doc: ImageDocument,
    pub pixels: Arc<image::DynamicImage>,
    /// Hex SHA-256 of the encoded payload, used for image references.
    pub payload_hash: String,
}

/// Common interface over simulated and remote retrieval.
pub trait SearchEnv: Send + Sync {
    fn search(&self, query: &str, top_k: usize) -> Result<RetrievalResult, RetrievalError>;
    fn fetch_document(&self, doc_id: &str) -> Result<FetchedDocument, RetrievalError>;
}

/// Immutable-after-load document collection.
pub struct Corpus {
    pub corpus_id: String,
    documents: BTreeMap<String, CorpusDocument>,
    decode_cache: Mutex<HashMap<String, Arc<image::DynamicImage>>>,
    hash_cache: Mutex<HashMap<String, String>>,
}

impl Corpus {
    pub fn new(corpus_id: impl Into<String>, documents: Vec<CorpusDocument>) -> Self {
        Corpus {
            corpus_id: corpus_id.into(),
            documents: documents
                .into_iter()
                .map(|d| (d.doc.doc_id.clone(), d))
                .collect(),
            decode_cache: Mutex::new(HashMap::new()),
            hash_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn document(&self, doc_id: &str) -> Option<&CorpusDocument> {
        self.documents.get(doc_id)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &String> {
        self.documents.keys()
    }

    fn payload_bytes(&self, doc_id: &str) -> Result<Arc<Vec<u8>>, RetrievalError> {
        let entry = self
            .documents
            .get(doc_id)
            .ok_or_else(|| RetrievalError::UnknownDocument(doc_id.to_string()))?;
        match &entry.payload {
            ImagePayload::Bytes(b) => Ok(b.clone()),
            ImagePayload::Path(p) => Ok(Arc::new(std::fs::read(p)?)),
        }
    }

    pub fn fetch(&self, doc_id: &str) -> Result<FetchedDocument, RetrievalError> {
        let entry = self
            .documents
            .get(doc_id)
            .ok_or_else(|| RetrievalError::UnknownDocument(doc_id.to_string()))?;
        let pixels = {
            let cache = self.decode_cache.lock().unwrap();
            cache.get(doc_id).cloned()
        };
        let pixels = match pixels {
            Some(p) => p,
            None => {
                let bytes = self.payload_bytes(doc_id)?;
                let decoded = Arc::new(
                    decode_image(&bytes).map_err(|e| RetrievalError::Decode(e.to_string()))?,
                );
                self.decode_cache
                    .lock()
                    .unwrap()
                    .insert(doc_id.to_string(), decoded.clone());
                decoded
            }
        };
        let payload_hash = {
            let cached = self.hash_cache.lock().unwrap().get(doc_id).cloned();
            match cached {
                Some(h) => h,
                None => {
                    let bytes = self.payload_bytes(doc_id)?;
                    let h = hex_sha256(&bytes);
                    self.hash_cache
                        .lock()
                        .unwrap()
                        .insert(doc_id.to_string(), h.clone());
                    h
                }
            }
        };
        Ok(FetchedDocument {
            doc: entry.doc.clone(),
            pixels,
            payload_hash,
        })
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn tokenize(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Seed-keyed tiebreak value for a document; deterministic across runs.
fn tiebreak(seed: u64, doc_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(doc_id.as_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Deterministic lexical-overlap retrieval: Jaccard overlap between the
/// query tokens and each document surrogate, ties broken by a seed-keyed
/// stable order.
pub fn search_simulated(
    corpus: &Corpus,
    query: &str,
    top_k: usize,
    seed: u64,
) -> Result<RetrievalResult, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    if top_k == 0 {
        return Err(RetrievalError::InvalidTopK);
    }
    let query_tokens = tokenize(query);
    let mut scored: Vec<(String, f64)> = corpus
        .documents
        .values()
        .map(|d| {
            let doc_tokens = tokenize(&d.surrogate);
            let inter = query_tokens.intersection(&doc_tokens).count();
            let union = query_tokens.union(&doc_tokens).count();
            let score = if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            };
            (d.doc.doc_id.clone(), score)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| tiebreak(seed, &a.0).cmp(&tiebreak(seed, &b.0)))
    });
    scored.truncate(top_k);
    Ok(RetrievalResult {
        ranked: scored,
        query: query.to_string(),
        top_k,
    })
}

/// Corpus-backed retriever with a fixed tiebreak seed.
pub struct SimulatedRetriever {
    pub corpus: Arc<Corpus>,
    pub seed: u64,
}

impl SearchEnv for SimulatedRetriever {
    fn search(&self, query: &str, top_k: usize) -> Result<RetrievalResult, RetrievalError> {
        search_simulated(&self.corpus, query, top_k, self.seed)
    }

    fn fetch_document(&self, doc_id: &str) -> Result<FetchedDocument, RetrievalError> {
        self.corpus.fetch(doc_id)
    }
}

/// Per-position golden-membership indicators for a ranked id list.
pub fn relevance_labels(result_ids: &[String], golden: &HashSet<String>) -> Vec<u8> {
    result_ids
        .iter()
        .map(|id| u8::from(golden.contains(id)))
        .collect()
}

// ---------------------------------------------------------------------------
// Remote search client
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct RemoteSearchRequest<'a> {
    query: &'a str,
    top_k: usize,
}

#[derive(Debug, Deserialize)]
struct RemoteSearchResponse {
    results: Vec<RemoteSearchHit>,
}

#[derive(Debug, Deserialize)]
struct RemoteSearchHit {
    doc_id: String,
    score: f64,
    image_url: String,
}

/// Client for a remote image-search service speaking
/// `{query, top_k}` → `{results: [{doc_id, score, image_url}]}`.
/// Transport errors and 5xx responses are retried up to 3 attempts;
/// responses missing required fields surface as [`RetrievalError::MalformedResponse`].
pub struct RemoteSearchClient {
    endpoint: String,
    http: reqwest::blocking::Client,
    max_attempts: u32,
    image_urls: Mutex<HashMap<String, String>>,
    image_cache: Mutex<HashMap<String, FetchedDocument>>,
}

impl RemoteSearchClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteSearchClient {
            endpoint: endpoint.into(),
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .expect("http client"),
            max_attempts: 3,
            image_urls: Mutex::new(HashMap::new()),
            image_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client");
        self
    }
}

impl SearchEnv for RemoteSearchClient {
    fn search(&self, query: &str, top_k: usize) -> Result<RetrievalResult, RetrievalError> {
        if top_k == 0 {
            return Err(RetrievalError::InvalidTopK);
        }
        let body = RemoteSearchRequest { query, top_k };
        let mut last_err = String::new();
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 * attempt as u64));
            }
            match self.http.post(&self.endpoint).json(&body).send() {
                Ok(resp) if resp.status().is_server_error() => {
                    last_err = format!("server error {}", resp.status());
                }
                Ok(resp) if !resp.status().is_success() => {
                    return Err(RetrievalError::MalformedResponse(format!(
                        "status {}",
                        resp.status()
                    )));
                }
                Ok(resp) => {
                    let text = resp
                        .text()
                        .map_err(|e| RetrievalError::MalformedResponse(e.to_string()))?;
                    let parsed: RemoteSearchResponse = serde_json::from_str(&text)
                        .map_err(|e| RetrievalError::MalformedResponse(e.to_string()))?;
                    let mut urls = self.image_urls.lock().unwrap();
                    let ranked = parsed
                        .results
                        .into_iter()
                        .map(|hit| {
                            urls.insert(hit.doc_id.clone(), hit.image_url);
                            (hit.doc_id, hit.score)
                        })
                        .collect();
                    return Ok(RetrievalResult {
                        ranked,
                        query: query.to_string(),
                        top_k,
                    });
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(RetrievalError::Timeout {
            attempts: self.max_attempts,
            last: last_err,
        })
    }

    fn fetch_document(&self, doc_id: &str) -> Result<FetchedDocument, RetrievalError> {
        if let Some(cached) = self.image_cache.lock().unwrap().get(doc_id) {
            return Ok(cached.clone());
        }
        let url = self
            .image_urls
            .lock()
            .unwrap()
            .get(doc_id)
            .cloned()
            .ok_or_else(|| RetrievalError::UnknownDocument(doc_id.to_string()))?;
        let bytes = self
            .http
            .get(&url)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.bytes())
            .map_err(|e| RetrievalError::Timeout {
                attempts: 1,
                last: e.to_string(),
            })?
            .to_vec();
        let pixels = Arc::new(
            decode_image(&bytes).map_err(|e| RetrievalError::Decode(e.to_string()))?,
        );
        let fetched = FetchedDocument {
            doc: ImageDocument {
                doc_id: doc_id.to_string(),
                width: pixels.width(),
                height: pixels.height(),
            },
            payload_hash: hex_sha256(&bytes),
            pixels,
        };
        self.image_cache
            .lock()
            .unwrap()
            .insert(doc_id.to_string(), fetched.clone());
        Ok(fetched)
    }
}

// ---------------------------------------------------------------------------
// Corpus manifest (on-disk format)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub documents: Vec<ManifestDocument>,
    #[serde(default)]
    pub tasks: Vec<QueryTask>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestDocument {
    pub doc_id: String,
    /// Image path, relative to the manifest file.
    pub image: String,
    pub surrogate: String,
}

/// Loads a corpus plus its tasks from a manifest file.
pub fn load_corpus(manifest_path: &Path) -> Result<(Corpus, Vec<QueryTask>), RetrievalError> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| RetrievalError::Manifest(e.to_string()))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut documents = Vec::with_capacity(manifest.documents.len());
    let mut seen = HashSet::new();
    for entry in manifest.documents {
        if !seen.insert(entry.doc_id.clone()) {
            return Err(RetrievalError::Manifest(format!(
                "duplicate doc_id {}",
                entry.doc_id
            )));
        }
        let path = base.join(&entry.image);
        let (width, height) = image::image_dimensions(&path)
            .map_err(|e| RetrievalError::Manifest(format!("{}: {e}", path.display())))?;
        documents.push(CorpusDocument {
            doc: ImageDocument {
                doc_id: entry.doc_id,
                width,
                height,
            },
            surrogate: entry.surrogate,
            payload: ImagePayload::Path(path),
        });
    }
    if documents.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    Ok((Corpus::new(manifest.corpus_id, documents), manifest.tasks))
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub corpus_id: String,
    pub num_docs: usize,
    pub num_tasks: usize,
    pub golden_per_task: usize,
    pub seed: u64,
    /// Generated page dimensions in raw pixels.
    pub page_width: u32,
    pub page_height: u32,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            corpus_id: "synthetic".into(),
            num_docs: 24,
            num_tasks: 4,
            golden_per_task: 1,
            seed: 7,
            page_width: 640,
            page_height: 480,
        }
    }
}

const FILLER_WORDS: [&str; 16] = [
    "report", "quarterly", "figure", "table", "margin", "revenue", "chart", "layout", "summary",
    "index", "appendix", "caption", "diagram", "overview", "slide", "survey",
];

fn synthetic_page(doc_idx: usize, width: u32, height: u32) -> Vec<u8> {
    let mut img = image::RgbImage::new(width, height);
    let base = (doc_idx as u32).wrapping_mul(2654435761);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = base ^ (x / 40).wrapping_mul(97) ^ (y / 40).wrapping_mul(193);
        *px = image::Rgb([
            (v & 0xff) as u8,
            ((v >> 8) & 0xff) as u8,
            ((v >> 16) & 0xff) as u8,
        ]);
    }
    let mut out = std::io::Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("png encode");
    out.into_inner()
}

/// Generates a seeded synthetic corpus in which each task plants its answer
/// in the surrogate text of exactly its golden documents, so a policy that
/// searches for the planted key retrieves the golden documents first.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> (Corpus, Vec<QueryTask>) {
    assert!(spec.num_docs >= spec.num_tasks * spec.golden_per_task.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut surrogates: Vec<String> = (0..spec.num_docs)
        .map(|i| {
            let words: Vec<&str> = (0..6)
                .map(|_| FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())])
                .collect();
            format!("page {} {}", i, words.join(" "))
        })
        .collect();

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    let mut next_doc = 0usize;
    for t in 0..spec.num_tasks {
        let key = format!("plantedkey{t}x{}", rng.random_range(1000..9999u32));
        let answer = format!("{}", rng.random_range(10..999u32));
        let mut golden = HashSet::new();
        for _ in 0..spec.golden_per_task.max(1) {
            let doc_id = format!("doc{next_doc:04}");
            surrogates[next_doc] = format!("{key} answer {answer} {}", surrogates[next_doc]);
            golden.insert(doc_id);
            next_doc += 1;
        }
        tasks.push(QueryTask {
            id: format!("task{t:03}"),
            question: format!("What value is recorded for {key}?"),
            golden_answer: answer,
            golden_doc_ids: golden,
            corpus_id: spec.corpus_id.clone(),
            answer_only: false,
        });
    }

    let documents = surrogates
        .into_iter()
        .enumerate()
        .map(|(i, surrogate)| {
            let png = synthetic_page(i, spec.page_width, spec.page_height);
            CorpusDocument {
                doc: ImageDocument {
                    doc_id: format!("doc{i:04}"),
                    width: spec.page_width,
                    height: spec.page_height,
                },
                surrogate,
                payload: ImagePayload::Bytes(Arc::new(png)),
            }
        })
        .collect();
    (Corpus::new(spec.corpus_id.clone(), documents), tasks)
}

/// Writes a generated corpus (images plus manifest) to a directory.
pub fn write_corpus(
    dir: &Path,
    corpus: &Corpus,
    tasks: &[QueryTask],
) -> Result<PathBuf, RetrievalError> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut documents = Vec::new();
    for (doc_id, entry) in &corpus.documents {
        let bytes = corpus.payload_bytes(doc_id)?;
        let rel = format!("images/{doc_id}.png");
        std::fs::write(dir.join(&rel), bytes.as_slice())?;
        documents.push(ManifestDocument {
            doc_id: doc_id.clone(),
            image: rel,
            surrogate: entry.surrogate.clone(),
        });
    }
    let manifest = CorpusManifest {
        corpus_id: corpus.corpus_id.clone(),
        documents,
        tasks: tasks.to_vec(),
    };
    let path = dir.join("corpus.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini_corpus() -> Corpus {
        let make = |id: &str, surrogate: &str| CorpusDocument {
            doc: ImageDocument {
                doc_id: id.into(),
                width: 64,
                height: 64,
            },
            surrogate: surrogate.into(),
            payload: ImagePayload::Bytes(Arc::new(synthetic_page(0, 8, 8))),
        };
        Corpus::new(
            "mini",
            vec![
                make("a", "alpha beta gamma"),
                make("b", "delta epsilon zeta"),
                make("c", "eta theta iota"),
            ],
        )
    }

    #[test]
    fn self_match_scores_one() {
        let c = mini_corpus();
        let r = search_simulated(&c, "alpha beta gamma", 1, 0).unwrap();
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.ranked[0].0, "a");
        assert!((r.ranked[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_all_zero() {
        let c = mini_corpus();
        let r = search_simulated(&c, "xyzzy", 3, 0).unwrap();
        assert!(r.ranked.iter().all(|(_, s)| *s == 0.0));
        assert_eq!(r.ranked.len(), 3);
    }

    #[test]
    fn determinism_per_seed() {
        let c = mini_corpus();
        for seed in [1u64, 2, 99] {
            let r1 = search_simulated(&c, "nothing shared", 3, seed).unwrap();
            let r2 = search_simulated(&c, "nothing shared", 3, seed).unwrap();
            assert_eq!(r1, r2);
        }
    }

    #[test]
    fn scores_non_increasing() {
        let c = mini_corpus();
        let r = search_simulated(&c, "alpha delta", 3, 5).unwrap();
        for w in r.ranked.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = Corpus::new("empty", vec![]);
        assert!(matches!(
            search_simulated(&c, "q", 1, 0),
            Err(RetrievalError::EmptyCorpus)
        ));
    }

    #[test]
    fn relevance_label_examples() {
        let golden: HashSet<String> = ["a", "c"].iter().map(|s| s.to_string()).collect();
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(relevance_labels(&ids, &golden), vec![1, 0, 1]);
        assert_eq!(relevance_labels(&[], &golden), Vec::<u8>::new());
        let none: HashSet<String> = HashSet::new();
        let xy: Vec<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
        assert_eq!(relevance_labels(&xy, &none), vec![0, 0]);
    }

    #[test]
    fn planted_corpus_ranks_golden_first() {
        let spec = SyntheticCorpusSpec::default();
        let (corpus, tasks) = generate_synthetic_corpus(&spec);
        for task in &tasks {
            let golden = task.golden_doc_ids.iter().next().unwrap();
            let surrogate = corpus.document(golden).unwrap().surrogate.clone();
            let r = search_simulated(&corpus, &surrogate, 1, 0).unwrap();
            assert_eq!(&r.ranked[0].0, golden, "task {}", task.id);
        }
    }

    #[test]
    fn corpus_roundtrip_through_manifest() {
        let spec = SyntheticCorpusSpec {
            num_docs: 4,
            num_tasks: 1,
            page_width: 32,
            page_height: 32,
            ..Default::default()
        };
        let (corpus, tasks) = generate_synthetic_corpus(&spec);
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path(), &corpus, &tasks).unwrap();
        let (loaded, loaded_tasks) = load_corpus(&manifest).unwrap();
        assert_eq!(loaded.len(), 4);
        assert_eq!(loaded_tasks, tasks);
        let fetched = loaded.fetch("doc0000").unwrap();
        assert_eq!(fetched.doc.width, 32);
        assert_eq!(fetched.payload_hash.len(), 64);
    }
}
