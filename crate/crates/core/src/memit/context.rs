//! Tokenized edit requests and the random-prefix contexts they are read in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{FactRecord, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{generate, ModelParams};

/// A record reduced to token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditRequest {
    pub record_id: u64,
    /// Efficacy prompt without `<bos>`.
    pub prompt: Vec<usize>,
    /// Index into `prompt` of the subject's last token.
    pub subject_last: usize,
    /// New-object tokens.
    pub target: Vec<usize>,
}

/// Position of the last token of the first occurrence of `needle` in `hay`.
pub fn find_last_token(hay: &[usize], needle: &[usize]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle).map(|i| i + needle.len() - 1)
}

impl EditRequest {
    pub fn from_record(record: &FactRecord, tok: &Tokenizer) -> Result<Self> {
        Self::with_prompt(record, &record.efficacy_prompt, &record.target_new, tok)
    }

    /// Request for an arbitrary prompt of `record` and object text.
    pub fn with_prompt(record: &FactRecord, prompt: &str, target: &str, tok: &Tokenizer) -> Result<Self> {
        let prompt_ids = tok.encode(prompt)?;
        let subject = tok.encode(&record.subject)?;
        let subject_last = find_last_token(&prompt_ids, &subject).ok_or_else(|| Error::Alignment {
            record_id: record.id,
            reason: format!("subject {:?} not found in tokenized prompt {prompt:?}", record.subject),
        })?;
        let target = tok.encode(target)?;
        if target.is_empty() {
            return Err(Error::Input(format!("record {}: empty target", record.id)));
        }
        Ok(Self {
            record_id: record.id,
            prompt: prompt_ids,
            subject_last,
            target,
        })
    }

    pub fn from_records(records: &[FactRecord], tok: &Tokenizer) -> Result<Vec<Self>> {
        records.iter().map(|r| Self::from_record(r, tok)).collect()
    }
}

/// Random prefixes prepended to prompts. Each prefix is `<bos>` followed by
/// model-sampled text and a separator, or just `<bos>` for the empty prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prefixes(pub Vec<Vec<usize>>);

impl Prefixes {
    /// Only the bare `<bos>` context.
    pub fn empty(tok: &Tokenizer) -> Self {
        Self(vec![vec![tok.bos()]])
    }

    /// The empty prefix followed by `count - 1` sampled ones (temperature 1,
    /// lengths drawn from `len_range`).
    pub fn sample(
        params: &ModelParams,
        tok: &Tokenizer,
        count: usize,
        len_range: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("at least one prefix context is required".into()));
        }
        if len_range.0 > len_range.1 {
            return Err(Error::Config("prefix length range is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![vec![tok.bos()]];
        for i in 1..count {
            let n = rng.random_range(len_range.0..=len_range.1);
            let mut p = vec![tok.bos()];
            p.extend(generate(params, &[tok.bos()], n, 1.0, seed.wrapping_add(i as u64), None)?);
            p.push(tok.sep());
            out.push(p);
        }
        Ok(Self(out))
    }

    /// Only the sampled prefixes (drops the bare context when others exist).
    pub fn sampled_only(&self) -> Self {
        if self.0.len() > 1 {
            Self(self.0[1..].to_vec())
        } else {
            self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `prefix + prompt` and the row of the subject's last token in it.
    pub fn context(&self, i: usize, req: &EditRequest) -> (Vec<usize>, usize) {
        let mut seq = self.0[i].clone();
        let offset = seq.len();
        seq.extend(&req.prompt);
        (seq, offset + req.subject_last)
    }
}
