//! Word vectors, label embeddings and the projection of pooled video
//! features into the same 300-d space.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Grads, Linear, ParamBuilder, ParamStore, RELU_GAIN};
use crate::taxonomy::LabelTaxonomy;

pub const EMBED_DIM: usize = 300;

/// A finite vector in the joint label/video space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::WordVectors("embedding must be non-empty and finite".into()));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy")]
pub enum OovPolicy {
    /// Unknown words map to the zero vector.
    Zero,
    /// Unknown words map to a unit-norm pseudo-vector derived from a hash of
    /// `(seed, word)`.
    Hashed { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct WordVectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    oov: OovPolicy,
}

/// Unit-norm pseudo word vector, a pure function of `(seed, word, dim)`.
pub fn hashed_vector(word: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(word.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(hasher.finalize().as_slice());
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

impl WordVectorTable {
    /// Empty table where every lookup falls through to hashed vectors.
    pub fn hashed(seed: u64) -> Self {
        WordVectorTable {
            dim: EMBED_DIM,
            vectors: HashMap::new(),
            oov: OovPolicy::Hashed { seed },
        }
    }

    /// Loads `word v1 .. v300` lines.
    pub fn load(path: impl AsRef<Path>, oov: OovPolicy) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("malformed value: {e}"),
                })?;
            if values.len() != EMBED_DIM {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected {EMBED_DIM} values, found {}", values.len()),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "non-finite value".into(),
                });
            }
            vectors.insert(word.to_string(), values);
        }
        Ok(WordVectorTable {
            dim: EMBED_DIM,
            vectors,
            oov,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lookup(&self, word: &str) -> Vec<f64> {
        if let Some(v) = self.vectors.get(word) {
            return v.clone();
        }
        match self.oov {
            OovPolicy::Zero => vec![0.0; self.dim],
            OovPolicy::Hashed { seed } => hashed_vector(word, seed, self.dim),
        }
    }
}

/// Mean of the word vectors of a label's words.
pub fn embed_label(words: &[String], table: &WordVectorTable) -> Result<EmbeddingVector> {
    if words.is_empty() {
        return Err(Error::WordVectors("cannot embed an empty word list".into()));
    }
    let mut acc = vec![0.0; table.dim()];
    for w in words {
        for (a, v) in acc.iter_mut().zip(table.lookup(w)) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|v| *v /= words.len() as f64);
    EmbeddingVector::new(acc)
}

/// Embeds every fine label of a taxonomy once, in id order.
pub fn label_embeddings(taxonomy: &LabelTaxonomy, table: &WordVectorTable) -> Result<Vec<EmbeddingVector>> {
    taxonomy
        .fine()
        .iter()
        .map(|f| embed_label(&f.words, table))
        .collect()
}

// ---------------------------------------------------------------------------

pub const PROJECTOR_OUT_GAIN: f64 = 0.1;

/// Learned map from pooled video features to the embedding space: affine
/// layers with rectifiers between them.
#[derive(Clone, Debug)]
pub struct Projector {
    pub layers: Vec<Linear>,
}

pub struct ProjectorCache {
    inputs: Vec<Vec<f64>>,
}

impl Projector {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, hidden: &[usize], out_dim: usize) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                // A small output layer keeps early embedding-loss gradients
                // from swamping the classifier.
                let gain = if i + 1 < n { RELU_GAIN } else { PROJECTOR_OUT_GAIN };
                let name = if n == 1 { "fc".to_string() } else { format!("fc{i}") };
                Linear::new(&mut pb.pp(&name), dims[i], dims[i + 1], gain)
            })
            .collect();
        Projector { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, ProjectorCache)> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "projector expects {} features, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(ps, &h, 1);
            if i + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(h);
            h = out;
        }
        Ok((h, ProjectorCache { inputs }))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &ProjectorCache, dy: &[f64], grads: &mut Grads) -> Result<Vec<f64>> {
        let mut d = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(ps, &cache.inputs[i], &d, 1, grads);
            if i > 0 {
                // input of layer i is the rectified output of layer i-1
                for (g, &v) in d.iter_mut().zip(&cache.inputs[i]) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
        Ok(d)
    }
}

/// `x / |x|` and its backward map. Zero vectors are passed through.
pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|v| v / n).collect()
}

pub fn l2_normalize_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return dy.to_vec();
    }
    let dot: f64 = x.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>() / (n * n);
    x.iter().zip(dy).map(|(a, g)| (g - a * dot) / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_rng;
    use proptest::prelude::*;
    use std::io::Write;

    fn row(word: &str, n: usize, scale: f64) -> String {
        let vals: Vec<String> = (0..n).map(|i| format!("{}", scale * i as f64)).collect();
        format!("{word} {}", vals.join(" "))
    }

    #[test]
    fn loads_text_vectors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", row("nodding", 300, 0.01)).unwrap();
        writeln!(f, "{}", row("head", 300, -0.02)).unwrap();
        let t = WordVectorTable::load(f.path(), OovPolicy::Zero).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.lookup("head")[2], -0.04);
        assert!(t.lookup("unknown").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_row_reports_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", row("a", 300, 1.0)).unwrap();
        writeln!(f, "{}", row("b", 299, 1.0)).unwrap();
        match WordVectorTable::load(f.path(), OovPolicy::Zero).unwrap_err() {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("299"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_value_reports_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a {}", vec!["x"; 300].join(" ")).unwrap();
        assert!(matches!(
            WordVectorTable::load(f.path(), OovPolicy::Zero),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn hashed_vectors_are_deterministic_unit_vectors() {
        let t = WordVectorTable::hashed(3);
        let a = t.lookup("nodding");
        let b = t.lookup("nodding");
        assert_eq!(a, b);
        assert_eq!(a.len(), 300);
        let n: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert_ne!(a, t.lookup("shrugging"));
        assert_ne!(a, WordVectorTable::hashed(4).lookup("nodding"));
    }

    #[test]
    fn embed_label_cases() {
        let t = WordVectorTable::hashed(0);
        let one = embed_label(&["nod".into()], &t).unwrap();
        assert_eq!(one.as_slice(), t.lookup("nod").as_slice());
        assert!(embed_label(&[], &t).is_err());

        // v and -v cancel
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", row("up", 300, 0.5)).unwrap();
        writeln!(f, "{}", row("down", 300, -0.5)).unwrap();
        let table = WordVectorTable::load(f.path(), OovPolicy::Zero).unwrap();
        let z = embed_label(&["up".into(), "down".into()], &table).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));

        // three words against sum / 3
        let words: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let got = embed_label(&words, &t).unwrap();
        let (va, vb, vc) = (t.lookup("a"), t.lookup("b"), t.lookup("c"));
        for i in 0..300 {
            assert_eq!(got.as_slice()[i], (va[i] + vb[i] + vc[i]) / 3.0);
        }
    }

    proptest! {
        #[test]
        fn embed_label_is_permutation_invariant(words in prop::collection::vec("[a-z]{1,6}", 1..6), rot in 0usize..6) {
            let t = WordVectorTable::hashed(1);
            let mut shuffled = words.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = embed_label(&words, &t).unwrap();
            let b = embed_label(&shuffled, &t).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    fn projector(hidden: &[usize]) -> (ParamStore, Projector) {
        let mut store = ParamStore::new();
        let mut rng = init_rng(5);
        let p = Projector::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, hidden, 300);
        (store, p)
    }

    #[test]
    fn projector_zero_weights_and_zero_input() {
        let (mut store, p) = projector(&[]);
        let w = p.layers[0].weight;
        let b = p.layers[0].bias;
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!(p.forward(&store, &x).unwrap().0.iter().all(|&v| v == 0.0));

        let (mut store, p) = projector(&[]);
        let bias: Vec<f64> = (0..300).map(|i| (i as f64).cos()).collect();
        store.get_mut(b).data_mut().copy_from_slice(&bias);
        assert_eq!(p.forward(&store, &[0.0; 8]).unwrap().0, bias);
    }

    #[test]
    fn projector_matches_dense_oracle() {
        let (store, p) = projector(&[]);
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let got = p.forward(&store, &x).unwrap().0;
        let w = store.get(p.layers[0].weight).data();
        let b = store.get(p.layers[0].bias).data();
        for j in 0..300 {
            let mut acc = b[j];
            for i in 0..8 {
                acc += x[i] * w[i * 300 + j];
            }
            assert!((acc - got[j]).abs() <= 1e-6);
        }
        assert!(p.forward(&store, &x[..7]).is_err());
    }

    #[test]
    fn deep_projector_backward_matches_finite_differences() {
        let (mut store, p) = projector(&[6]);
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).cos()).collect();
        let r: Vec<f64> = (0..300).map(|i| (i as f64 * 0.11).sin()).collect();
        let f = |s: &ParamStore, x: &[f64]| -> f64 {
            p.forward(s, x).unwrap().0.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = p.forward(&store, &x).unwrap();
        let mut grads = Grads::zeros_like(&store);
        let dx = p.backward(&store, &cache, &r, &mut grads).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            assert!(((f(&store, &xp) - f(&store, &xm)) / (2.0 * h) - dx[i]).abs() < 1e-6);
        }
        let w0 = p.layers[0].weight;
        for i in [0, 9, 20, 47] {
            let orig = store.get(w0).data()[i];
            store.get_mut(w0).data_mut()[i] = orig + h;
            let lp = f(&store, &x);
            store.get_mut(w0).data_mut()[i] = orig - h;
            let lm = f(&store, &x);
            store.get_mut(w0).data_mut()[i] = orig;
            assert!(((lp - lm) / (2.0 * h) - grads.get(w0).data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = vec![0.3, -1.2, 2.0];
        let r = vec![0.5, 0.25, -1.0];
        let f = |x: &[f64]| -> f64 { l2_normalize(x).iter().zip(&r).map(|(a, b)| a * b).sum() };
        let g = l2_normalize_backward(&x, &r);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            assert!(((f(&xp) - f(&xm)) / (2.0 * h) - g[i]).abs() < 1e-8);
        }
    }
}
