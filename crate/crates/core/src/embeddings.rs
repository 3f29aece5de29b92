//! Pre-trained word vectors in GloVe text format, restricted to a vocabulary.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};

use crate::corpus::{TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seeded_rng, Matrix, Real, Vector};

pub const DEFAULT_EMBEDDING_DIM: usize = 300;

/// Half-width of the uniform range used for rows the file does not supply.
pub const FILL_RANGE: f64 = 0.1;

const CACHE_MAGIC: &[u8; 5] = b"GRUME";
const CACHE_VERSION: u8 = 1;

/// Token-id → vector lookup. Row `i` is the vector for id `i`; the not-found
/// and end-of-sentence ids have rows like any other id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vectors: Matrix<f32>,
    seed: u64,
    found: usize,
}

/// Vector assigned to an id that has no pre-trained row.
///
/// Depends only on `(seed, id)`, so a row is the same whichever other tokens
/// happen to be missing.
pub fn fill_vector(seed: u64, id: TokenId, dim: usize) -> Vec<f32> {
    let mut rng = seeded_rng(derive_seed(seed, id as u64));
    let dist = Uniform::new(-FILL_RANGE, FILL_RANGE);
    (0..dim).map(|_| dist.sample(&mut rng) as f32).collect()
}

impl EmbeddingTable {
    /// A table where every row is a fill vector.
    pub fn random(id_count: usize, dim: usize, seed: u64) -> Self {
        let mut data = Vec::with_capacity(id_count * dim);
        for id in 0..id_count {
            data.extend(fill_vector(seed, id as TokenId, dim));
        }
        EmbeddingTable {
            vectors: Matrix::new(id_count, dim, data).expect("shape"),
            seed,
            found: 0,
        }
    }

    pub fn from_matrix(vectors: Matrix<f32>, seed: u64) -> Result<Self> {
        if !vectors.is_finite() {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(EmbeddingTable {
            vectors,
            seed,
            found: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn rows(&self) -> usize {
        self.vectors.rows()
    }

    /// Seed used for rows without a pre-trained vector.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// How many ranked vocabulary tokens were found in the source file.
    pub fn found(&self) -> usize {
        self.found
    }

    pub fn vectors(&self) -> &Matrix<f32> {
        &self.vectors
    }

    pub fn row(&self, id: TokenId) -> Result<&[f32]> {
        let i = id as usize;
        if i >= self.rows() {
            return Err(Error::InvalidId {
                id,
                len: self.rows(),
            });
        }
        Ok(self.vectors.row(i))
    }

    /// Looks up every id of `seq`, preserving order.
    pub fn embed(&self, seq: &TokenSequence) -> Result<Vec<Vector<f32>>> {
        seq.ids
            .iter()
            .map(|&id| Ok(self.row(id)?.to_vec().into()))
            .collect()
    }

    /// Stacks the rows for `ids` into a `ids.len() × dim` matrix.
    pub fn gather<T: Real>(&self, ids: &[TokenId]) -> Result<Matrix<T>> {
        let mut data = Vec::with_capacity(ids.len() * self.dim());
        for &id in ids {
            data.extend(self.row(id)?.iter().map(|&x| T::lit(x as f64)));
        }
        Matrix::new(ids.len(), self.dim(), data)
    }

    /// Reads GloVe text (`token v1 ... v_dim` per line) for `vocab`.
    ///
    /// File tokens outside the vocabulary are skipped; vocabulary tokens the
    /// file lacks, plus the not-found and end-of-sentence ids, get
    /// [`fill_vector`] rows.
    pub fn read_text<R: BufRead>(
        reader: R,
        label: &str,
        vocab: &Vocabulary,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let id_count = vocab.id_count();
        let mut rows: Vec<Option<Vec<f32>>> = vec![None; id_count];
        let parse_err = |line: usize, message: String| Error::Parse {
            path: label.to_owned(),
            line,
            message,
        };
        for (n, line) in reader.lines().enumerate() {
            let lineno = n + 1;
            let line = line.map_err(|e| parse_err(lineno, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().expect("non-empty line");
            let values = fields
                .map(|f| {
                    f.parse::<f32>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(lineno, format!("invalid component {f:?}")))
                })
                .collect::<Result<Vec<f32>>>()?;
            if values.len() != dim {
                return Err(parse_err(
                    lineno,
                    format!("expected {dim} components, found {}", values.len()),
                ));
            }
            let id = vocab.id(token);
            if id != vocab.nf_id() && rows[id as usize].is_none() {
                rows[id as usize] = Some(values);
            }
        }
        let found = rows.iter().filter(|r| r.is_some()).count();
        let mut data = Vec::with_capacity(id_count * dim);
        for (id, row) in rows.into_iter().enumerate() {
            match row {
                Some(v) => data.extend(v),
                None => data.extend(fill_vector(seed, id as TokenId, dim)),
            }
        }
        Ok(EmbeddingTable {
            vectors: Matrix::new(id_count, dim, data)?,
            seed,
            found,
        })
    }

    /// Binary cache: `GRUME`, version byte, rows and dim as little-endian
    /// `u32`, seed as little-endian `u64`, then row-major little-endian `f32`.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&[CACHE_VERSION])?;
        w.write_all(&(self.rows() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for x in self.vectors.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("embedding cache: {m}"));
        let mut head = [0u8; 6];
        r.read_exact(&mut head)?;
        if &head[..5] != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        if head[5] != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {}", head[5])));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let seed = u64::from_le_bytes(u64buf);
        let mut data = Vec::with_capacity(rows * dim);
        for _ in 0..rows * dim {
            r.read_exact(&mut u32buf)?;
            data.push(f32::from_le_bytes(u32buf));
        }
        let mut table = Self::from_matrix(Matrix::new(rows, dim, data)?, seed)?;
        table.found = rows;
        Ok(table)
    }
}

/// Loads embeddings for `vocab` from `path`, which may be GloVe text or a
/// binary cache written by [`EmbeddingTable::write_cache`].
pub fn load_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let mut reader = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
    let is_cache = reader
        .fill_buf()
        .map_err(|e| Error::file(path, e))?
        .starts_with(CACHE_MAGIC);
    let table = if is_cache {
        EmbeddingTable::read_cache(reader)?
    } else {
        EmbeddingTable::read_text(reader, &path.display().to_string(), vocab, dim, seed)?
    };
    if table.dim() != dim {
        return Err(Error::EmbeddingDim {
            expected: dim,
            found: table.dim(),
        });
    }
    if table.rows() != vocab.id_count() {
        return Err(Error::Vocabulary(format!(
            "{} has {} rows but the vocabulary has {} ids",
            path.display(),
            table.rows(),
            vocab.id_count()
        )));
    }
    Ok(table)
}
