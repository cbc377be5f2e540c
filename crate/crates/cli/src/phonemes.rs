//! Phoneme input files: whitespace-separated integer ids, or symbol names
//! resolved against a vocabulary file with one symbol per line.

use std::collections::HashMap;

use cif_tts::{Error, Result};

/// Symbol → id, where the id is the zero-based line index. Blank lines
/// keep their index but can never match.
pub fn parse_vocab(text: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let sym = line.trim();
        if sym.is_empty() {
            continue;
        }
        if map.insert(sym.to_string(), i).is_some() {
            return Err(Error::usage(format!(
                "vocabulary line {}: duplicate symbol {sym:?}",
                i + 1
            )));
        }
    }
    Ok(map)
}

pub fn parse_phonemes(text: &str, vocab: Option<&HashMap<String, usize>>) -> Result<Vec<usize>> {
    let ids = text
        .split_whitespace()
        .map(|tok| match vocab {
            Some(v) => v.get(tok).copied().ok_or_else(|| {
                Error::usage(format!("phoneme symbol {tok:?} is not in the vocabulary"))
            }),
            None => tok.parse::<usize>().map_err(|_| {
                Error::usage(format!(
                    "phoneme {tok:?} is not an integer id (pass --vocab for symbols)"
                ))
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(Error::usage("phoneme file is empty"));
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_symbols() {
        assert_eq!(
            parse_phonemes("3 1\n4  1\t5", None).unwrap(),
            vec![3, 1, 4, 1, 5]
        );
        let v = parse_vocab("sil\naa\n\nb\n").unwrap();
        assert_eq!(parse_phonemes("b aa sil", Some(&v)).unwrap(), vec![3, 1, 0]);
        assert!(parse_phonemes("zz", Some(&v)).is_err());
        assert!(parse_phonemes("a", None).is_err());
        assert!(parse_phonemes("  \n", None).is_err());
        assert!(parse_vocab("a\na\n").is_err());
    }
}
