use std::collections::HashMap;

use crate::error::{arg, Result};

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

/// Fixed symbol vocabulary with greedy longest-match encoding.
///
/// Pieces are literal strings (they may span several words), so decoding
/// is plain concatenation and `decode(encode(s)) == s` whenever `s` is
/// covered by the vocabulary. Uncovered characters become `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
}

impl Tokenizer {
    pub fn new<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(pieces.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, p) in all.iter().enumerate() {
            if p.is_empty() {
                return Err(arg("empty vocabulary piece"));
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(arg(format!("duplicate vocabulary piece {p:?}")));
            }
        }
        let max_piece_chars = all.iter().map(|p| p.chars().count()).max().unwrap_or(1);
        Ok(Self {
            pieces: all,
            index,
            max_piece_chars,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
        let mut out = Vec::new();
        let mut at = 0;
        while at + 1 < bounds.len() {
            let longest = (at + 1..=(at + self.max_piece_chars).min(bounds.len() - 1))
                .rev()
                .find_map(|end| self.id(&text[bounds[at]..bounds[end]]).map(|id| (id, end)));
            match longest {
                Some((id, end)) if id > UNK_ID => {
                    out.push(id);
                    at = end;
                }
                _ => {
                    out.push(UNK_ID);
                    at += 1;
                }
            }
        }
        out
    }

    /// Concatenates pieces, skipping `<bos>`/`<eos>`; `<unk>` and unknown
    /// ids render as U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                BOS_ID | EOS_ID => {}
                id if id > UNK_ID && id < self.pieces.len() => out.push_str(&self.pieces[id]),
                _ => out.push('\u{FFFD}'),
            }
        }
        out
    }
}
