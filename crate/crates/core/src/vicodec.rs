//! Reversible ASCII encoding of Vietnamese diacritic letters.
//!
//! Each of the 134 precomposed Vietnamese letters is replaced by `@` followed
//! by its 1-based index in [`DiacriticTable`]. The table is ordered by
//! ascending Unicode scalar value, so `À` is `@1` and `ỹ` is `@134`.
//!
//! The scheme has no delimiter after the index. Decoding resolves `@` plus
//! digits greedily (three digits, then two, then one), which means a letter
//! with a one- or two-digit index that is immediately followed by an ASCII
//! digit does not survive a round trip.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use unicode_normalization::UnicodeNormalization;

/// Number of letters covered by the table.
pub const TABLE_SIZE: usize = 134;

/// Prefix that introduces an encoded letter.
pub const ESCAPE: char = '@';

/// Vietnamese letters from the Latin-1 supplement block.
const LATIN1_LETTERS: &str = "ÀÁÂÃÈÉÊÌÍÒÓÔÕÙÚÝàáâãèéêìíòóôõùúý";
/// Vietnamese letters from Latin Extended-A.
const EXTENDED_A_LETTERS: &str = "ĂăĐđĨĩŨũƠơƯư";
/// The Latin Extended Additional range reserved for Vietnamese.
const EXTENDED_ADDITIONAL: std::ops::RangeInclusive<u32> = 0x1EA0..=0x1EF9;

/// Bijection between the 134 Vietnamese diacritic letters and indexes `1..=134`.
#[derive(Debug, Clone)]
pub struct DiacriticTable {
    letters: Vec<char>,
    index: HashMap<char, u8>,
}

impl DiacriticTable {
    /// Build the canonical table: the letter set sorted by code point, 1-based.
    pub fn build() -> Self {
        let mut letters: Vec<char> = LATIN1_LETTERS
            .chars()
            .chain(EXTENDED_A_LETTERS.chars())
            .chain(EXTENDED_ADDITIONAL.filter_map(char::from_u32))
            .collect();
        letters.sort_unstable();
        letters.dedup();
        assert_eq!(letters.len(), TABLE_SIZE, "diacritic letter set is malformed");

        let index = letters
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + 1) as u8))
            .collect();
        Self { letters, index }
    }

    /// Shared instance of the canonical table.
    pub fn canonical() -> &'static DiacriticTable {
        static TABLE: OnceLock<DiacriticTable> = OnceLock::new();
        TABLE.get_or_init(DiacriticTable::build)
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    /// Letter at a 1-based index.
    pub fn letter(&self, index: usize) -> Option<char> {
        index.checked_sub(1).and_then(|i| self.letters.get(i)).copied()
    }

    /// 1-based index of a letter, if it belongs to the table.
    pub fn index_of(&self, letter: char) -> Option<usize> {
        self.index.get(&letter).map(|&i| i as usize)
    }

    /// `(index, letter)` pairs in table order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, char)> + '_ {
        self.letters.iter().enumerate().map(|(i, &c)| (i + 1, c))
    }

    /// The audit file format: `index<TAB>letter<TAB>U+XXXX`, one entry per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 16);
        for (i, c) in self.entries() {
            out.push_str(&format!("{i}\t{c}\tU+{:04X}\n", c as u32));
        }
        out
    }

    /// Encode `text`, replacing every table letter with `@<index>`.
    ///
    /// Input is NFC-normalized first so that decomposed letters still match.
    /// Non-ASCII characters outside the table pass through unchanged and are
    /// reported as warnings.
    pub fn encode(&self, text: &str) -> Encoded {
        let mut out = String::with_capacity(text.len() + 8);
        let mut warnings = Vec::new();
        for (pos, c) in text.nfc().enumerate() {
            if let Some(i) = self.index_of(c) {
                out.push(ESCAPE);
                out.push_str(&i.to_string());
            } else {
                if !c.is_ascii() {
                    warnings.push(CodecWarning::OutOfAlphabet { position: pos, ch: c });
                }
                out.push(c);
            }
        }
        Encoded { text: out, warnings }
    }

    /// Inverse of [`DiacriticTable::encode`].
    ///
    /// `@` is resolved against the longest digit run (up to three digits)
    /// whose value is a valid index; an `@` that cannot be resolved is copied
    /// through literally and reported.
    pub fn decode(&self, text: &str) -> Decoded {
        let chars: Vec<char> = text.chars().collect();
        let mut out = String::with_capacity(text.len());
        let mut warnings = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c != ESCAPE {
                out.push(c);
                i += 1;
                continue;
            }
            let digits = chars[i + 1..]
                .iter()
                .take(3)
                .take_while(|d| d.is_ascii_digit())
                .count();
            let resolved = (1..=digits).rev().find_map(|len| {
                let run: String = chars[i + 1..i + 1 + len].iter().collect();
                if run.starts_with('0') {
                    return None;
                }
                let value: usize = run.parse().ok()?;
                self.letter(value).map(|letter| (letter, len))
            });
            match resolved {
                Some((letter, len)) => {
                    out.push(letter);
                    i += 1 + len;
                }
                None => {
                    warnings.push(CodecWarning::UnresolvedEscape { position: i });
                    out.push(c);
                    i += 1;
                }
            }
        }
        Decoded { text: out, warnings }
    }
}

/// Encode with the canonical table, discarding warnings.
pub fn encode(text: &str) -> String {
    DiacriticTable::canonical().encode(text).text
}

/// Decode with the canonical table, discarding warnings.
pub fn decode(text: &str) -> String {
    DiacriticTable::canonical().decode(text).text
}

/// Non-fatal anomaly found while encoding or decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodecWarning {
    /// A non-ASCII character with no table entry; `position` counts chars of
    /// the normalized input.
    OutOfAlphabet { position: usize, ch: char },
    /// An `@` not followed by a valid index; `position` counts input chars.
    UnresolvedEscape { position: usize },
}

impl fmt::Display for CodecWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecWarning::OutOfAlphabet { position, ch } => write!(
                f,
                "character {ch:?} (U+{:04X}) at {position} is not a Vietnamese letter; copied verbatim",
                *ch as u32
            ),
            CodecWarning::UnresolvedEscape { position } => {
                write!(f, "'@' at {position} has no valid index; copied verbatim")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub text: String,
    pub warnings: Vec<CodecWarning>,
}

impl Encoded {
    /// True when the output holds only 7-bit ASCII.
    pub fn is_ascii(&self) -> bool {
        self.text.is_ascii()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    pub warnings: Vec<CodecWarning>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> &'static DiacriticTable {
        DiacriticTable::canonical()
    }

    #[test]
    fn anchors_match_published_rows() {
        let t = table();
        assert_eq!(t.len(), 134);
        assert_eq!(t.letter(1), Some('À'));
        assert_eq!(t.letter(2), Some('Á'));
        assert_eq!(t.letter(3), Some('Â'));
        assert_eq!(t.letter(133), Some('Ỹ'));
        assert_eq!(t.letter(134), Some('ỹ'));
        assert_eq!(t.letter(0), None);
        assert_eq!(t.letter(135), None);
    }

    #[test]
    fn table_is_sorted_and_bijective() {
        let t = table();
        let letters: Vec<char> = t.entries().map(|(_, c)| c).collect();
        assert!(letters.windows(2).all(|w| w[0] < w[1]));
        for i in 1..=134 {
            assert_eq!(t.index_of(t.letter(i).unwrap()), Some(i));
        }
    }

    #[test]
    fn committed_table_file_matches() {
        let committed = include_str!("../data/diacritics.tsv");
        assert_eq!(committed, table().to_tsv());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode("À"), "@1");
        assert_eq!(encode("Oslo"), "Oslo");
        // ị is U+1ECB (rank 88), ử is U+1EED (rank 122)
        assert_eq!(encode("Lịch sử Oslo"), "L@88ch s@122 Oslo");
    }

    #[test]
    fn encode_normalizes_decomposed_input() {
        // "ị" as i + combining dot below
        assert_eq!(encode("Li\u{0323}ch"), "L@88ch");
    }

    #[test]
    fn encode_reports_foreign_letters() {
        let out = table().encode("Straße");
        assert_eq!(out.text, "Straße");
        assert!(!out.is_ascii());
        assert_eq!(
            out.warnings,
            vec![CodecWarning::OutOfAlphabet { position: 4, ch: 'ß' }]
        );
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode("@1"), "À");
        assert_eq!(decode("Oslo"), "Oslo");
        assert_eq!(decode("L@88ch s@122 Oslo"), "Lịch sử Oslo");
    }

    #[test]
    fn decode_backtracks_over_out_of_range_digits() {
        // 334 is out of range, 33 is Ă (U+0102)
        assert_eq!(table().letter(33), Some('Ă'));
        let out = table().decode("@334");
        assert_eq!(out.text, "Ă4");
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn decode_passes_through_unresolved_escapes() {
        let out = table().decode("a@0b@");
        assert_eq!(out.text, "a@0b@");
        assert_eq!(
            out.warnings,
            vec![
                CodecWarning::UnresolvedEscape { position: 1 },
                CodecWarning::UnresolvedEscape { position: 4 },
            ]
        );
        assert_eq!(decode("user@x"), "user@x");
    }

    fn vietnamese_char() -> impl Strategy<Value = char> {
        let letters: Vec<char> = table().entries().map(|(_, c)| c).collect();
        prop_oneof![
            proptest::sample::select(letters),
            proptest::char::range('a', 'z'),
            Just(' '),
            proptest::char::range('0', '9'),
        ]
    }

    fn digit_safe(s: &[char]) -> bool {
        s.windows(2)
            .all(|w| !(table().index_of(w[0]).is_some() && w[1].is_ascii_digit()))
    }

    proptest! {
        #[test]
        fn roundtrip_on_digit_safe_strings(chars in proptest::collection::vec(vietnamese_char(), 0..40)) {
            prop_assume!(digit_safe(&chars));
            let s: String = chars.into_iter().collect();
            let enc = table().encode(&s);
            prop_assert!(enc.is_ascii());
            prop_assert!(enc.warnings.is_empty());
            prop_assert_eq!(decode(&enc.text), s);
        }
    }
}
