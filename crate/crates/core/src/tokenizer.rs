//! Character-level tokenizer over the synthetic-task alphabet.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// Characters for ids 3..32, in id order.
const CHARS: &str = "0123456789+-*=,[] \nmodax?:()%";

pub const VOCAB_SIZE: usize = 3 + 29;

pub fn char_id(c: char) -> Option<u32> {
    CHARS.chars().position(|x| x == c).map(|p| p as u32 + 3)
}

pub fn id_char(id: u32) -> Option<char> {
    if id < 3 {
        return None;
    }
    CHARS.chars().nth(id as usize - 3)
}

/// Encodes text without special tokens.
pub fn encode(text: &str) -> Result<Vec<u32>> {
    text.chars()
        .map(|c| char_id(c).ok_or_else(|| Error::Index(format!("character {c:?} not in vocabulary"))))
        .collect()
}

/// `BOS` followed by the encoded prompt.
pub fn encode_prompt(text: &str) -> Result<Vec<u32>> {
    let mut ids = vec![BOS];
    ids.extend(encode(text)?);
    Ok(ids)
}

/// Decodes ids to text, dropping special tokens and stopping at `EOS`.
pub fn decode(ids: &[u32]) -> String {
    ids.iter().take_while(|&&i| i != EOS).filter_map(|&i| id_char(i)).collect()
}
