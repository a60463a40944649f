//! Unified action vocabulary.
//!
//! GUI actions are printed in a small canonical grammar and split into text
//! pieces by a toy greedy tokenizer. Embodied actions have seven components in
//! `[-1, 1]`; each is binned into one of `k_bins` uniform intervals and the
//! bin is mapped to a reserved token id through a lookup table. Both kinds of
//! token live in one vocabulary with disjoint id ranges.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const EMBODIED_DIMS: usize = 7;
pub const DEFAULT_K_BINS: usize = 256;

const COMPONENT_NAMES: [&str; EMBODIED_DIMS] = ["pos_x", "pos_y", "pos_z", "rot_x", "rot_y", "rot_z", "gripper"];

const WORDS: &[&str] = &[
    "click", "tap", "type", "scroll", "done", "the", "bright", "cell", "in", "row", "column", "move", "effector",
    "to", "goal", "and", "gui", "robot", "act", "action", "actions", "tokens", "open", "gripper", "reach", "mark",
    "grasp", "you", "are", "agent", "an", "at", "on", "text", "seven", "bins", "history", "prev",
];

const ACTION_PIECES: &[&str] = &["(x=", ",y=", ")", "()", "(text=\"", "\")", "0.", "1."];

/// Toy text tokenizer: greedy longest match over a fixed piece list.
///
/// Id 0 is a reserved padding token that tokenization never emits. Every
/// printable ASCII character is a piece, so any printable string encodes.
#[derive(Clone, Debug)]
pub struct TextVocab {
    pieces: Vec<String>,
    lookup: HashMap<String, u32>,
    max_piece: usize,
}

impl Default for TextVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl TextVocab {
    pub fn new() -> Self {
        let mut pieces = vec!["<pad>".to_string()];
        pieces.extend((32u8..=126).map(|b| (b as char).to_string()));
        for w in WORDS {
            pieces.push(w.to_string());
            pieces.push(format!(" {w}"));
        }
        pieces.extend(ACTION_PIECES.iter().map(|p| p.to_string()));
        let mut lookup = HashMap::new();
        for (i, p) in pieces.iter().enumerate().skip(1) {
            lookup.entry(p.clone()).or_insert(i as u32);
        }
        let max_piece = pieces.iter().skip(1).map(|p| p.len()).max().unwrap_or(1);
        Self {
            pieces,
            lookup,
            max_piece,
        }
    }

    /// Number of text ids; text ids are exactly `0..len()`.
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        (id as usize) < self.pieces.len()
    }

    pub fn encode(&self, s: &str) -> Result<Vec<u32>> {
        let bytes = s.as_bytes();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let mut matched = None;
            for len in (1..=self.max_piece.min(bytes.len() - pos)).rev() {
                if let Some(piece) = s.get(pos..pos + len) {
                    if let Some(&id) = self.lookup.get(piece) {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    return Err(Error::Parse {
                        pos,
                        msg: format!("character {:?} is not in the text vocabulary", s[pos..].chars().next().unwrap_or('?')),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            if id == 0 || !self.contains(id) {
                return Err(Error::InvalidActionToken(id));
            }
            s.push_str(&self.pieces[id as usize]);
        }
        Ok(s)
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        if id == 0 {
            return None;
        }
        self.pieces.get(id as usize).map(String::as_str)
    }
}

// ---------------------------------------------------------------------------
// Embodied actions

/// End-effector displacement plus gripper command, all normalized to `[-1, 1]`.
/// A gripper value `>= 0` means open.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbodiedAction {
    pub pos_x: f32,
    pub pos_y: f32,
    pub pos_z: f32,
    pub rot_x: f32,
    pub rot_y: f32,
    pub rot_z: f32,
    pub gripper: f32,
}

impl EmbodiedAction {
    pub fn from_array(a: [f32; EMBODIED_DIMS]) -> Self {
        Self {
            pos_x: a[0],
            pos_y: a[1],
            pos_z: a[2],
            rot_x: a[3],
            rot_y: a[4],
            rot_z: a[5],
            gripper: a[6],
        }
    }

    pub fn to_array(&self) -> [f32; EMBODIED_DIMS] {
        [
            self.pos_x,
            self.pos_y,
            self.pos_z,
            self.rot_x,
            self.rot_y,
            self.rot_z,
            self.gripper,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in COMPONENT_NAMES.iter().zip(self.to_array()) {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Range {
                    component: name.to_string(),
                    value: v,
                });
            }
        }
        Ok(())
    }

    pub fn gripper_open(&self) -> bool {
        self.gripper >= 0.0
    }
}

/// Uniform binning of `[-1, 1]`: `min(floor((v + 1) / 2 * k), k - 1)`.
pub fn bin_index(v: f32, k_bins: usize) -> Result<usize> {
    if k_bins < 2 {
        return Err(Error::InvalidArgument(format!("k_bins must be >= 2, got {k_bins}")));
    }
    if !(-1.0..=1.0).contains(&v) {
        return Err(Error::Range {
            component: "value".into(),
            value: v,
        });
    }
    let idx = ((v as f64 + 1.0) / 2.0 * k_bins as f64).floor() as usize;
    Ok(idx.min(k_bins - 1))
}

pub fn bin_center(idx: usize, k_bins: usize) -> f32 {
    (-1.0 + (2.0 * idx as f64 + 1.0) / k_bins as f64) as f32
}

/// Bin-to-token table for embodied actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionCodecConfig {
    k_bins: usize,
    bin_to_token: Vec<u32>,
    vocab_size: usize,
    token_to_bins: BTreeMap<u32, Vec<usize>>,
}

impl ActionCodecConfig {
    /// Builds a table, rejecting duplicate tokens, ids outside the vocabulary,
    /// and ids that collide with the `text_len` text ids.
    pub fn new(bin_to_token: Vec<u32>, vocab_size: usize, text_len: usize) -> Result<Self> {
        let cfg = Self::with_shared_tokens(bin_to_token, vocab_size, text_len)?;
        if !cfg.is_injective() {
            let (tok, bins) = cfg.token_to_bins.iter().find(|(_, b)| b.len() > 1).expect("non-injective");
            return Err(Error::Config(format!("token {tok} is assigned to bins {bins:?}")));
        }
        Ok(cfg)
    }

    /// Like [`ActionCodecConfig::new`] but tolerates several bins sharing one
    /// token. Encoding works as usual; decoding a shared token is an
    /// [`Error::AmbiguousActionToken`]. Meant for externally supplied
    /// reference tables, never for training.
    pub fn with_shared_tokens(bin_to_token: Vec<u32>, vocab_size: usize, text_len: usize) -> Result<Self> {
        let k_bins = bin_to_token.len();
        if k_bins < 2 {
            return Err(Error::Config(format!("table needs at least 2 bins, got {k_bins}")));
        }
        let mut token_to_bins: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (bin, &tok) in bin_to_token.iter().enumerate() {
            if tok as usize >= vocab_size {
                return Err(Error::Config(format!("bin {bin} maps to {tok} >= vocab size {vocab_size}")));
            }
            if (tok as usize) < text_len {
                return Err(Error::Config(format!("bin {bin} maps to {tok}, which is a text token id")));
            }
            token_to_bins.entry(tok).or_default().push(bin);
        }
        Ok(Self {
            k_bins,
            bin_to_token,
            vocab_size,
            token_to_bins,
        })
    }

    pub fn k_bins(&self) -> usize {
        self.k_bins
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn bin_to_token(&self) -> &[u32] {
        &self.bin_to_token
    }

    pub fn is_injective(&self) -> bool {
        self.token_to_bins.len() == self.k_bins
    }

    pub fn is_action_token(&self, id: u32) -> bool {
        self.token_to_bins.contains_key(&id)
    }

    pub fn token_for_bin(&self, bin: usize) -> u32 {
        self.bin_to_token[bin]
    }

    pub fn bin_for_token(&self, id: u32) -> Result<usize> {
        match self.token_to_bins.get(&id) {
            None => Err(Error::UnknownActionToken(id)),
            Some(bins) if bins.len() > 1 => Err(Error::AmbiguousActionToken(id)),
            Some(bins) => Ok(bins[0]),
        }
    }

    /// Reads `bin<TAB>token` lines (ascending bin, `#` comments allowed).
    pub fn parse_table(text: &str, vocab_size: usize, text_len: usize) -> Result<Self> {
        let mut table = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut fields = body.split('\t');
            let (Some(b), Some(t), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Parse {
                    pos: lineno + 1,
                    msg: format!("expected `bin<TAB>token`, got {body:?}"),
                });
            };
            let bin: usize = b.trim().parse().map_err(|_| Error::Parse {
                pos: lineno + 1,
                msg: format!("bad bin index {b:?}"),
            })?;
            let tok: u32 = t.trim().parse().map_err(|_| Error::Parse {
                pos: lineno + 1,
                msg: format!("bad token id {t:?}"),
            })?;
            if bin != table.len() {
                return Err(Error::Parse {
                    pos: lineno + 1,
                    msg: format!("expected bin {} next, got {bin}", table.len()),
                });
            }
            table.push(tok);
        }
        Self::with_shared_tokens(table, vocab_size, text_len)
    }

    pub fn load_table(path: &Path, vocab_size: usize, text_len: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_table(&text, vocab_size, text_len)
    }

    pub fn table_text(&self) -> String {
        let mut s = format!("# bin\ttoken  (k_bins={})\n", self.k_bins);
        for (bin, tok) in self.bin_to_token.iter().enumerate() {
            s.push_str(&format!("{bin}\t{tok}\n"));
        }
        s
    }

    pub fn save_table(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.table_text()).map_err(|e| Error::io(path, e))
    }
}

/// Reserves the `k_bins` highest ids of the vocabulary for bins, in ascending
/// order.
pub fn build_default_table(vocab_size: usize, k_bins: usize, text_len: usize) -> Result<ActionCodecConfig> {
    if k_bins < 2 {
        return Err(Error::Config(format!("k_bins must be >= 2, got {k_bins}")));
    }
    if vocab_size < text_len + k_bins {
        return Err(Error::Config(format!(
            "vocab size {vocab_size} cannot hold {text_len} text ids plus {k_bins} bins"
        )));
    }
    let start = (vocab_size - k_bins) as u32;
    ActionCodecConfig::new((0..k_bins as u32).map(|b| start + b).collect(), vocab_size, text_len)
}

pub fn encode_embodied(a: &EmbodiedAction, cfg: &ActionCodecConfig) -> Result<[u32; EMBODIED_DIMS]> {
    let mut out = [0u32; EMBODIED_DIMS];
    for (i, v) in a.to_array().into_iter().enumerate() {
        let bin = bin_index(v, cfg.k_bins).map_err(|e| match e {
            Error::Range { value, .. } => Error::Range {
                component: COMPONENT_NAMES[i].to_string(),
                value,
            },
            other => other,
        })?;
        out[i] = cfg.token_for_bin(bin);
    }
    Ok(out)
}

/// Maps each token back to the center of its bin.
pub fn decode_embodied(tokens: &[u32], cfg: &ActionCodecConfig) -> Result<EmbodiedAction> {
    if tokens.len() != EMBODIED_DIMS {
        return Err(Error::InvalidArgument(format!(
            "embodied action needs {EMBODIED_DIMS} tokens, got {}",
            tokens.len()
        )));
    }
    let mut a = [0.0f32; EMBODIED_DIMS];
    for (slot, &t) in a.iter_mut().zip(tokens) {
        *slot = bin_center(cfg.bin_for_token(t)?, cfg.k_bins);
    }
    Ok(EmbodiedAction::from_array(a))
}

// ---------------------------------------------------------------------------
// GUI actions

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuiVerb {
    Click,
    Tap,
    Type,
    Scroll,
    Done,
}

impl GuiVerb {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuiVerb::Click => "click",
            GuiVerb::Tap => "tap",
            GuiVerb::Type => "type",
            GuiVerb::Scroll => "scroll",
            GuiVerb::Done => "done",
        }
    }
}

/// GUI action with normalized screen coordinates in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub enum GuiAction {
    Click { x: f32, y: f32 },
    Tap { x: f32, y: f32 },
    Scroll { x: f32, y: f32 },
    Type { text: String },
    Done,
}

impl GuiAction {
    pub fn verb(&self) -> GuiVerb {
        match self {
            GuiAction::Click { .. } => GuiVerb::Click,
            GuiAction::Tap { .. } => GuiVerb::Tap,
            GuiAction::Scroll { .. } => GuiVerb::Scroll,
            GuiAction::Type { .. } => GuiVerb::Type,
            GuiAction::Done => GuiVerb::Done,
        }
    }

    pub fn point(&self) -> Option<(f32, f32)> {
        match *self {
            GuiAction::Click { x, y } | GuiAction::Tap { x, y } | GuiAction::Scroll { x, y } => Some((x, y)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((x, y)) = self.point() {
            for (name, v) in [("x", x), ("y", y)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Range {
                        component: name.into(),
                        value: v,
                    });
                }
            }
        }
        if let GuiAction::Type { text } = self {
            if let Some(c) = text.chars().find(|c| !(' '..='~').contains(c)) {
                return Err(Error::InvalidArgument(format!("typed text contains non-printable {c:?}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for GuiAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuiAction::Click { x, y } | GuiAction::Tap { x, y } | GuiAction::Scroll { x, y } => {
                write!(f, "{}(x={:.3},y={:.3})", self.verb().as_str(), x, y)
            }
            GuiAction::Type { text } => {
                f.write_str("type(text=\"")?;
                for c in text.chars() {
                    if c == '"' || c == '\\' {
                        f.write_str("\\")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str("\")")
            }
            GuiAction::Done => f.write_str("done()"),
        }
    }
}

/// Parses the canonical action grammar.
pub fn parse_gui(s: &str) -> Result<GuiAction> {
    let mut p = Parser { s, pos: 0 };
    let verb = p.ident()?;
    p.expect("(")?;
    let action = match verb.as_str() {
        "click" | "tap" | "scroll" => {
            p.expect("x=")?;
            let x = p.coord()?;
            p.expect(",y=")?;
            let y = p.coord()?;
            match verb.as_str() {
                "click" => GuiAction::Click { x, y },
                "tap" => GuiAction::Tap { x, y },
                _ => GuiAction::Scroll { x, y },
            }
        }
        "type" => {
            p.expect("text=\"")?;
            GuiAction::Type { text: p.quoted()? }
        }
        "done" => GuiAction::Done,
        other => {
            return Err(Error::Parse {
                pos: 0,
                msg: format!("unknown action verb {other:?}"),
            })
        }
    };
    p.expect(")")?;
    if p.pos != s.len() {
        return Err(Error::Parse {
            pos: p.pos,
            msg: "trailing characters after action".into(),
        });
    }
    Ok(action)
}

struct Parser<'a> {
    s: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn rest(&self) -> &str {
        &self.s[self.pos..]
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(self.err(format!("expected {lit:?}")))
        }
    }

    fn ident(&mut self) -> Result<String> {
        let n = self.rest().bytes().take_while(|b| b.is_ascii_lowercase()).count();
        if n == 0 {
            return Err(self.err("expected action verb"));
        }
        let id = self.rest()[..n].to_string();
        self.pos += n;
        Ok(id)
    }

    fn coord(&mut self) -> Result<f32> {
        let n = self.rest().bytes().take_while(|b| b.is_ascii_digit() || *b == b'.').count();
        let text = &self.rest()[..n];
        let v: f32 = text.parse().map_err(|_| self.err(format!("bad coordinate {text:?}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(self.err(format!("coordinate {v} outside [0, 1]")));
        }
        self.pos += n;
        Ok(v)
    }

    fn quoted(&mut self) -> Result<String> {
        let mut out = String::new();
        let mut chars = self.rest().char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, e @ ('"' | '\\'))) => out.push(e),
                    _ => {
                        self.pos += i;
                        return Err(self.err("bad escape"));
                    }
                },
                c => out.push(c),
            }
        }
        self.pos = self.s.len();
        Err(self.err("unterminated string"))
    }
}

/// True once `s` holds a complete action: it ends in `)` outside any quoted
/// string. Greedy GUI decoding stops here.
pub fn gui_text_complete(s: &str) -> bool {
    let mut in_str = false;
    let mut escaped = false;
    let mut last_close = false;
    for c in s.chars() {
        last_close = false;
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
        } else if c == '"' {
            in_str = true;
        } else if c == ')' {
            last_close = true;
        }
    }
    last_close && !in_str
}

pub fn encode_gui(a: &GuiAction, vocab: &TextVocab) -> Result<Vec<u32>> {
    a.validate()?;
    vocab.encode(&a.to_string())
}

pub fn decode_gui(tokens: &[u32], vocab: &TextVocab) -> Result<GuiAction> {
    parse_gui(&vocab.decode(tokens)?)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Gui(GuiAction),
    Embodied(EmbodiedAction),
}

/// Text vocabulary plus embodied bin table: the whole unified action space.
#[derive(Clone, Debug)]
pub struct Codec {
    pub text: TextVocab,
    pub actions: ActionCodecConfig,
}

impl Codec {
    pub fn new(vocab_size: usize, k_bins: usize) -> Result<Self> {
        let text = TextVocab::new();
        let actions = build_default_table(vocab_size, k_bins, text.len())?;
        Ok(Self { text, actions })
    }

    pub fn vocab_size(&self) -> usize {
        self.actions.vocab_size()
    }

    pub fn encode_action(&self, a: &Action) -> Result<Vec<u32>> {
        match a {
            Action::Gui(g) => encode_gui(g, &self.text),
            Action::Embodied(e) => Ok(encode_embodied(e, &self.actions)?.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_table(k: usize) -> ActionCodecConfig {
        ActionCodecConfig::new((0..k as u32).collect(), k, 0).unwrap()
    }

    #[test]
    fn bin_edges_and_midpoint() {
        assert_eq!(bin_index(-1.0, 256).unwrap(), 0);
        assert_eq!(bin_index(1.0, 256).unwrap(), 255);
        assert_eq!(bin_index(0.0, 256).unwrap(), 128);
        // boundary values go to the upper interval
        assert_eq!(bin_index(-0.5, 4).unwrap(), 1);
    }

    #[test]
    fn bin_index_rejects_out_of_range() {
        assert!(matches!(bin_index(1.0001, 256), Err(Error::Range { .. })));
        assert!(matches!(bin_index(-1.5, 256), Err(Error::Range { .. })));
        assert!(bin_index(f32::NAN, 256).is_err());
        assert!(bin_index(0.0, 1).is_err());
    }

    #[test]
    fn encode_zero_and_lower_edge_with_identity_table() {
        let cfg = identity_table(256);
        let zero = EmbodiedAction::from_array([0.0; 7]);
        assert_eq!(encode_embodied(&zero, &cfg).unwrap(), [128; 7]);
        let low = EmbodiedAction::from_array([-1.0; 7]);
        assert_eq!(encode_embodied(&low, &cfg).unwrap(), [0; 7]);
    }

    #[test]
    fn encode_names_offending_component() {
        let cfg = identity_table(256);
        let mut a = [0.0; 7];
        a[4] = 1.5;
        let err = encode_embodied(&EmbodiedAction::from_array(a), &cfg).unwrap_err();
        assert!(err.to_string().contains("rot_y"), "{err}");
    }

    #[test]
    fn decode_bin_center_and_unknown_token() {
        let cfg = identity_table(2);
        let a = decode_embodied(&[0; 7], &cfg).unwrap();
        assert_eq!(a.pos_x, -0.5);
        let cfg = identity_table(256);
        let err = decode_embodied(&[0, 0, 0, 0, 0, 0, 999], &cfg).unwrap_err();
        assert!(matches!(err, Error::UnknownActionToken(999)));
    }

    #[test]
    fn default_table_uses_vocab_tail() {
        let cfg = build_default_table(1024, 256, 200).unwrap();
        let expected: Vec<u32> = (768..1024).collect();
        assert_eq!(cfg.bin_to_token(), expected.as_slice());
        assert!(cfg.is_injective());
        assert!(build_default_table(300, 256, 200).is_err());
    }

    #[test]
    fn injective_constructor_rejects_duplicates() {
        assert!(ActionCodecConfig::new(vec![5, 6, 5], 10, 0).is_err());
        let shared = ActionCodecConfig::with_shared_tokens(vec![5, 6, 5], 10, 0).unwrap();
        assert!(!shared.is_injective());
        assert!(matches!(shared.bin_for_token(5), Err(Error::AmbiguousActionToken(5))));
        assert_eq!(shared.bin_for_token(6).unwrap(), 1);
    }

    #[test]
    fn table_text_round_trip_and_comments() {
        let cfg = build_default_table(600, 64, 200).unwrap();
        let back = ActionCodecConfig::parse_table(&cfg.table_text(), 600, 200).unwrap();
        assert_eq!(back, cfg);
        let bad = "0\t10\n2\t11\n";
        assert!(matches!(ActionCodecConfig::parse_table(bad, 20, 0), Err(Error::Parse { pos: 2, .. })));
    }

    #[test]
    fn gui_canonical_forms() {
        let v = TextVocab::new();
        let a = GuiAction::Click { x: 0.312, y: 0.744 };
        assert_eq!(a.to_string(), "click(x=0.312,y=0.744)");
        let toks = encode_gui(&a, &v).unwrap();
        assert_eq!(decode_gui(&toks, &v).unwrap(), a);

        let done = encode_gui(&GuiAction::Done, &v).unwrap();
        assert_eq!(v.decode(&done).unwrap(), "done()");
        assert_eq!(decode_gui(&done, &v).unwrap(), GuiAction::Done);

        let t = GuiAction::Type {
            text: r#"say "hi" \o/"#.into(),
        };
        assert_eq!(decode_gui(&encode_gui(&t, &v).unwrap(), &v).unwrap(), t);
    }

    #[test]
    fn click_round_trip_within_print_precision() {
        let v = TextVocab::new();
        let a = GuiAction::Click { x: 0.5, y: 0.5 };
        let back = decode_gui(&encode_gui(&a, &v).unwrap(), &v).unwrap();
        let (x, y) = back.point().unwrap();
        assert!((x - 0.5).abs() <= 5e-4 && (y - 0.5).abs() <= 5e-4);
    }

    #[test]
    fn gui_parse_errors_carry_position() {
        match parse_gui("click(x=0.5;y=0.2)") {
            Err(Error::Parse { pos, .. }) => assert_eq!(pos, 11),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_gui("jump()").is_err());
        assert!(parse_gui("click(x=1.5,y=0.2)").is_err());
        assert!(parse_gui("type(text=\"abc)").is_err());
        assert!(parse_gui("done())").is_err());
    }

    #[test]
    fn completeness_ignores_parens_inside_strings() {
        assert!(gui_text_complete("done()"));
        assert!(!gui_text_complete("type(text=\"a)"));
        assert!(gui_text_complete("type(text=\"a)\")"));
        assert!(!gui_text_complete("click(x=0.1"));
    }

    #[test]
    fn tokenizer_prefers_long_pieces() {
        let v = TextVocab::new();
        let ids = v.encode("click the bright cell in row 2").unwrap();
        assert!(ids.len() <= 8, "{ids:?}");
        assert_eq!(v.decode(&ids).unwrap(), "click the bright cell in row 2");
        assert!(v.encode("héllo").is_err());
    }
}
