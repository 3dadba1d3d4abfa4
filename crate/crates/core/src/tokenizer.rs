//! Context-aware tokenizer.
//!
//! Label tokens are assigned by first-occurrence order inside a context
//! string, so the same query symbol can receive different labels under
//! different contexts. Symbols missing from the context encode to
//! [`SpecialToken::Ooc`] and decode to [`OOC_CHAR`].

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};

/// Default number of label tokens (maximum distinct symbols per context).
pub const DEFAULT_LABEL_COUNT: usize = 26;

/// Number of special tokens appended after the label block.
pub const SPECIAL_COUNT: usize = 13;

/// Character used when decoding `<ooc>` or an unmapped label.
pub const OOC_CHAR: char = '*';

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("context has {found} distinct symbols, vocabulary holds at most {limit}")]
    DistinctSymbolOverflow { found: usize, limit: usize },
    #[error("unknown token id {0}")]
    UnknownId(u32),
}

/// A context-relative class label `<t_k>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelToken(pub u16);

impl LabelToken {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// The 13 fixed special tokens. Their discriminant is the offset inside the
/// special block; the vocabulary id is `label_count + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SpecialToken {
    Ooc = 0,
    VisionStart,
    VisionEnd,
    Bos,
    Eos,
    Pad,
    SepContextText,
    SepQuery,
    Reserved0,
    Reserved1,
    Reserved2,
    Reserved3,
    Reserved4,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; SPECIAL_COUNT] = [
        SpecialToken::Ooc,
        SpecialToken::VisionStart,
        SpecialToken::VisionEnd,
        SpecialToken::Bos,
        SpecialToken::Eos,
        SpecialToken::Pad,
        SpecialToken::SepContextText,
        SpecialToken::SepQuery,
        SpecialToken::Reserved0,
        SpecialToken::Reserved1,
        SpecialToken::Reserved2,
        SpecialToken::Reserved3,
        SpecialToken::Reserved4,
    ];

    pub fn offset(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SpecialToken::Ooc => "<ooc>",
            SpecialToken::VisionStart => "<vision_start>",
            SpecialToken::VisionEnd => "<vision_end>",
            SpecialToken::Bos => "<bos>",
            SpecialToken::Eos => "<eos>",
            SpecialToken::Pad => "<pad>",
            SpecialToken::SepContextText => "<sep_context_text>",
            SpecialToken::SepQuery => "<sep_query>",
            SpecialToken::Reserved0 => "<reserved_0>",
            SpecialToken::Reserved1 => "<reserved_1>",
            SpecialToken::Reserved2 => "<reserved_2>",
            SpecialToken::Reserved3 => "<reserved_3>",
            SpecialToken::Reserved4 => "<reserved_4>",
        }
    }
}

/// One element of a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Label(LabelToken),
    Special(SpecialToken),
}

impl Token {
    pub const OOC: Token = Token::Special(SpecialToken::Ooc);

    pub fn label(k: usize) -> Token {
        Token::Label(LabelToken(k as u16))
    }

    pub fn is_ooc(self) -> bool {
        self == Token::OOC
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Label(l) => write!(f, "<t{}>", l.0),
            Token::Special(s) => f.write_str(s.name()),
        }
    }
}

pub type TokenSeq = Vec<Token>;

/// Integer id layout: labels first, then the special block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub label_count: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab { label_count: DEFAULT_LABEL_COUNT }
    }
}

impl Vocab {
    pub fn new(label_count: usize) -> Self {
        Vocab { label_count }
    }

    pub fn size(&self) -> usize {
        self.label_count + SPECIAL_COUNT
    }

    pub fn id(&self, token: Token) -> u32 {
        match token {
            Token::Label(l) => l.0 as u32,
            Token::Special(s) => (self.label_count + s.offset()) as u32,
        }
    }

    pub fn special_id(&self, s: SpecialToken) -> u32 {
        self.id(Token::Special(s))
    }

    pub fn token(&self, id: u32) -> Result<Token, TokenizerError> {
        let i = id as usize;
        if i < self.label_count {
            Ok(Token::label(i))
        } else if i < self.size() {
            Ok(Token::Special(SpecialToken::ALL[i - self.label_count]))
        } else {
            Err(TokenizerError::UnknownId(id))
        }
    }

    pub fn ids(&self, tokens: &[Token]) -> Vec<u32> {
        tokens.iter().map(|&t| self.id(t)).collect()
    }

    pub fn tokens(&self, ids: &[u32]) -> Result<TokenSeq, TokenizerError> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Writes the vocabulary manifest: `<id>\t<kind>\t<name>` per line, LF endings.
    pub fn write_manifest<W: Write>(&self, mut w: W) -> io::Result<()> {
        for k in 0..self.label_count {
            writeln!(w, "{k}\tlabel\t<t{k}>")?;
        }
        for s in SpecialToken::ALL {
            writeln!(w, "{}\tspecial\t{}", self.special_id(s), s.name())?;
        }
        Ok(())
    }

    pub fn manifest_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_manifest(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("manifest is ASCII")
    }
}

/// Bidirectional symbol <-> label mapping built from a context string.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenMap {
    forward: HashMap<char, LabelToken>,
    reverse: Vec<char>,
}

impl TokenMap {
    pub fn len(&self) -> usize {
        self.reverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reverse.is_empty()
    }

    pub fn get(&self, symbol: char) -> Option<LabelToken> {
        self.forward.get(&symbol).copied()
    }

    pub fn symbol(&self, label: LabelToken) -> Option<char> {
        self.reverse.get(label.index()).copied()
    }

    /// Symbols in label order.
    pub fn symbols(&self) -> &[char] {
        &self.reverse
    }
}

/// Result of [`decode_with`]: the text plus the number of label tokens that
/// had no entry in the map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    pub out_of_range_count: usize,
}

/// Builds the dictionary from `context` and returns its token sequence.
pub fn encode_context(context: &str, label_count: usize) -> Result<(TokenSeq, TokenMap), TokenizerError> {
    let mut map = TokenMap::default();
    let mut tokens = Vec::with_capacity(context.len());
    for c in context.chars() {
        let label = match map.forward.get(&c) {
            Some(&l) => l,
            None => {
                let l = LabelToken(map.reverse.len() as u16);
                map.forward.insert(c, l);
                map.reverse.push(c);
                l
            }
        };
        tokens.push(Token::Label(label));
    }
    if map.len() > label_count {
        return Err(TokenizerError::DistinctSymbolOverflow { found: map.len(), limit: label_count });
    }
    Ok((tokens, map))
}

pub fn encode_with(text: &str, map: &TokenMap) -> TokenSeq {
    text.chars()
        .map(|c| map.get(c).map_or(Token::OOC, Token::Label))
        .collect()
}

/// Decodes labels through `map`. `<ooc>`, unmapped labels and any structural
/// special token become [`OOC_CHAR`]; only unmapped labels are counted.
pub fn decode_with(tokens: &[Token], map: &TokenMap) -> Decoded {
    let mut out_of_range_count = 0;
    let text = tokens
        .iter()
        .map(|t| match t {
            Token::Label(l) => map.symbol(*l).unwrap_or_else(|| {
                out_of_range_count += 1;
                OOC_CHAR
            }),
            Token::Special(_) => OOC_CHAR,
        })
        .collect();
    Decoded { text, out_of_range_count }
}
