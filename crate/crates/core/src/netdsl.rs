//! The `.netdsl` network-definition language.
//!
//! Parsing records the byte span of every integer attribute literal, so a
//! mutation can be applied as a literal substitution in the original text
//! instead of regenerating it. The grammar is documented in `docs/netdsl.ebnf`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::ir::{Attr, Edge, InputShape, LayerKind, LayerSpec, NetworkDef, Span, INPUT};

/// 1-based line and column of a byte offset.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(offset, |nl| offset - nl - 1) + 1;
    (line, col)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at {line}:{col} (offset {offset}): expected {}, found {found}", .expected.join(" or "))]
    Syntax { offset: usize, line: usize, col: usize, expected: Vec<String>, found: String },
    #[error("semantic error at {line}:{col} (offset {offset}): {message}")]
    Semantic { offset: usize, line: usize, col: usize, message: String },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::Semantic { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    Decimal(f64),
    Cross,
    Punct(char),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::Int(n) => write!(f, "integer `{n}`"),
            Tok::Decimal(x) => write!(f, "number `{x}`"),
            Tok::Cross => f.write_str("`x`"),
            Tok::Punct(c) => write!(f, "`{c}`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: Span,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let value = text[start..i].parse::<f64>().expect("digits");
                out.push(Token { tok: Tok::Decimal(value), span: Span::new(start, i) });
            } else {
                let value = text[start..i].parse::<u64>().map_err(|_| syntax(text, start, &["integer below 2^64"], "overflowing literal"))?;
                out.push(Token { tok: Tok::Int(value), span: Span::new(start, i) });
            }
            // `3x32x32`: an `x` glued between digits is a dimension separator.
            if i + 1 < bytes.len() && bytes[i] == b'x' && bytes[i + 1].is_ascii_digit() {
                out.push(Token { tok: Tok::Cross, span: Span::new(i, i + 1) });
                i += 1;
            }
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(text[start..i].to_string()), span: Span::new(start, i) });
        } else if b"{}();:,=".contains(&c) {
            out.push(Token { tok: Tok::Punct(c as char), span: Span::new(i, i + 1) });
            i += 1;
        } else {
            let ch = text[i..].chars().next().unwrap_or('?');
            return Err(syntax(text, i, &["token"], &format!("`{ch}`")));
        }
    }
    out.push(Token { tok: Tok::Eof, span: Span::new(text.len(), text.len()) });
    Ok(out)
}

fn syntax(text: &str, offset: usize, expected: &[&str], found: &str) -> ParseError {
    let (line, col) = line_col(text, offset);
    ParseError::Syntax {
        offset,
        line,
        col,
        expected: expected.iter().map(|s| s.to_string()).collect(),
        found: found.to_string(),
    }
}

fn semantic(text: &str, offset: usize, message: impl Into<String>) -> ParseError {
    let (line, col) = line_col(text, offset);
    ParseError::Semantic { offset, line, col, message: message.into() }
}

enum Value {
    Int(u64, Span),
    Decimal(f64),
    Ident(String, Span),
}

struct RawLayer {
    id: String,
    id_span: Span,
    kind: LayerKind,
    refs: Vec<(String, Span)>,
    args: Vec<(String, Span, Value)>,
}

struct Parser<'a> {
    text: &'a str,
    toks: Vec<Token>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, expected: &[&str]) -> ParseError {
        let t = self.peek();
        syntax(self.text, t.span.start, expected, &t.tok.to_string())
    }

    fn punct(&mut self, c: char) -> Result<Span, ParseError> {
        if self.peek().tok == Tok::Punct(c) {
            Ok(self.bump().span)
        } else {
            Err(self.err(&[&format!("`{c}`")]))
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match &self.peek().tok {
            Tok::Ident(s) if s == kw => {
                self.bump();
                Ok(())
            }
            _ => Err(self.err(&[&format!("`{kw}`")])),
        }
    }

    fn ident(&mut self) -> Result<(String, Span), ParseError> {
        match self.peek().tok.clone() {
            Tok::Ident(s) => Ok((s, self.bump().span)),
            _ => Err(self.err(&["identifier"])),
        }
    }

    fn int(&mut self) -> Result<(u64, Span), ParseError> {
        match self.peek().tok {
            Tok::Int(n) => Ok((n, self.bump().span)),
            _ => Err(self.err(&["integer"])),
        }
    }

    fn cross(&mut self) -> Result<(), ParseError> {
        match &self.peek().tok {
            Tok::Cross => {
                self.bump();
                Ok(())
            }
            Tok::Ident(s) if s == "x" => {
                self.bump();
                Ok(())
            }
            _ => Err(self.err(&["`x`"])),
        }
    }

    fn layer(&mut self) -> Result<RawLayer, ParseError> {
        let (id, id_span) = self.ident()?;
        self.punct(':')?;
        let (kw, kw_span) = self.ident()?;
        let kind = LayerKind::from_keyword(&kw).ok_or_else(|| {
            let kinds: Vec<&str> = LayerKind::ALL.iter().map(|k| k.keyword()).collect();
            syntax(self.text, kw_span.start, &kinds, &format!("`{kw}`"))
        })?;
        self.punct('(')?;
        let mut refs = Vec::new();
        let mut args = Vec::new();
        if self.peek().tok != Tok::Punct(')') {
            loop {
                let (name, span) = self.ident()?;
                if self.peek().tok == Tok::Punct('=') {
                    self.bump();
                    let value = match self.peek().tok.clone() {
                        Tok::Int(n) => Value::Int(n, self.bump().span),
                        Tok::Decimal(x) => {
                            self.bump();
                            Value::Decimal(x)
                        }
                        Tok::Ident(s) => Value::Ident(s, self.bump().span),
                        _ => return Err(self.err(&["integer", "number", "identifier"])),
                    };
                    args.push((name, span, value));
                } else {
                    refs.push((name, span));
                }
                if self.peek().tok == Tok::Punct(',') {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.punct(')')?;
        self.punct(';')?;
        Ok(RawLayer { id, id_span, kind, refs, args })
    }
}

/// Parses `.netdsl` text into a validated [`NetworkDef`] whose layers carry
/// the span of every integer attribute literal.
pub fn parse(text: &str) -> Result<NetworkDef, ParseError> {
    let net = parse_unvalidated(text)?;
    let result = net.validate();
    if let Some(first) = result.violations.first() {
        let offset = first.layer().and_then(|id| net.layer(id)).map_or(0, layer_offset);
        let mut message = first.to_string();
        if result.violations.len() > 1 {
            message.push_str(&format!(" (and {} more)", result.violations.len() - 1));
        }
        return Err(semantic(text, offset, message));
    }
    Ok(net)
}

fn layer_offset(l: &LayerSpec) -> usize {
    l.origin.map_or(0, |s| s.start)
}

/// Syntax and reference checks only; IR invariants (cycles, class count,
/// groups divisibility) are left to [`NetworkDef::validate`].
pub fn parse_unvalidated(text: &str) -> Result<NetworkDef, ParseError> {
    let mut p = Parser { text, toks: lex(text)?, pos: 0 };
    p.keyword("network")?;
    let (name, _) = p.ident()?;
    p.punct('{')?;
    p.keyword("input")?;
    let (c, _) = p.int()?;
    p.cross()?;
    let (h, _) = p.int()?;
    p.cross()?;
    let (w, _) = p.int()?;
    p.punct(';')?;
    p.keyword("classes")?;
    let (num_classes, classes_span) = p.int()?;
    p.punct(';')?;
    let mut raw = Vec::new();
    while !matches!(p.peek().tok, Tok::Punct('}') | Tok::Eof) {
        raw.push(p.layer()?);
    }
    p.punct('}')?;
    if p.peek().tok != Tok::Eof {
        return Err(p.err(&["end of input"]));
    }
    for (dim, v) in [("channels", c), ("height", h), ("width", w), ("classes", num_classes)] {
        if v == 0 {
            return Err(semantic(text, classes_span.start, format!("input {dim} must be >= 1")));
        }
    }

    let mut positions: HashMap<String, usize> = HashMap::new();
    for r in &raw {
        if r.id == INPUT {
            return Err(semantic(text, r.id_span.start, format!("layer id `{INPUT}` is reserved")));
        }
        if positions.insert(r.id.clone(), r.id_span.start).is_some() {
            return Err(semantic(text, r.id_span.start, format!("duplicate layer id `{}`", r.id)));
        }
    }

    let mut layers = Vec::with_capacity(raw.len());
    let mut edges = Vec::new();
    for (idx, r) in raw.iter().enumerate() {
        let mut layer = LayerSpec::new(r.id.clone(), r.kind);
        layer.origin = Some(r.id_span);
        let mut refs = r.refs.clone();
        let schema = r.kind.schema();
        for (key, key_span, value) in &r.args {
            if key == "from" {
                match value {
                    Value::Ident(s, span) => refs.push((s.clone(), *span)),
                    _ => return Err(semantic(text, key_span.start, "`from` expects a layer reference")),
                }
                continue;
            }
            if r.kind == LayerKind::Dropout && key == "p" {
                layer.rate = match value {
                    Value::Int(n, _) => *n as f64,
                    Value::Decimal(x) => *x,
                    Value::Ident(..) => return Err(semantic(text, key_span.start, "dropout `p` expects a number")),
                };
                continue;
            }
            let Some(&(_, attr)) = schema.iter().find(|(k, _)| k == key) else {
                return Err(semantic(text, key_span.start, format!("unknown attribute `{key}` for {}", r.kind.keyword())));
            };
            let Value::Int(n, span) = value else {
                return Err(semantic(text, key_span.start, format!("attribute `{key}` expects an integer")));
            };
            if layer.attrs.insert(attr, *n).is_some() {
                return Err(semantic(text, key_span.start, format!("attribute `{key}` given twice")));
            }
            layer.spans.insert(attr, *span);
        }
        for &(key, attr) in schema {
            if !layer.attrs.contains_key(&attr) {
                match r.kind.default_for(attr) {
                    Some(d) => {
                        layer.attrs.insert(attr, d);
                    }
                    None => {
                        return Err(semantic(text, r.id_span.start, format!("layer `{}` is missing attribute `{key}`", r.id)));
                    }
                }
            }
        }
        if refs.is_empty() {
            let prev = if idx == 0 { INPUT.to_string() } else { raw[idx - 1].id.clone() };
            refs.push((prev, r.id_span));
        }
        for (slot, (producer, span)) in refs.into_iter().enumerate() {
            if producer != INPUT && !positions.contains_key(&producer) {
                return Err(semantic(text, span.start, format!("undefined layer reference `{producer}`")));
            }
            edges.push(Edge { producer, consumer: r.id.clone(), slot });
        }
        layers.push(layer);
    }

    Ok(NetworkDef { name, input_shape: InputShape { channels: c, height: h, width: w }, num_classes, layers, edges })
}

/// Canonical text for a network: one layer per line, explicit inputs, every
/// attribute spelled out.
pub fn print(net: &NetworkDef) -> Result<String, crate::ir::Violation> {
    if let Some(v) = net.validate().violations.into_iter().next() {
        return Err(v);
    }
    Ok(print_unchecked(net))
}

/// Like [`print`] but skips validation; used to render deliberately broken nets.
pub fn print_unchecked(net: &NetworkDef) -> String {
    let mut s = String::new();
    let i = net.input_shape;
    s.push_str(&format!("network {} {{\n", net.name));
    s.push_str(&format!("  input {}x{}x{};\n", i.channels, i.height, i.width));
    s.push_str(&format!("  classes {};\n", net.num_classes));
    for l in &net.layers {
        let mut args: Vec<String> = net.inputs_of(&l.id).into_iter().map(str::to_string).collect();
        for &(key, attr) in l.kind.schema() {
            if let Some(v) = l.try_get(attr) {
                args.push(format!("{key}={v}"));
            }
        }
        if l.kind == LayerKind::Dropout {
            args.push(format!("p={}", l.rate));
        }
        s.push_str(&format!("  {}: {}({});\n", l.id, l.kind.keyword(), args.join(", ")));
    }
    s.push_str("}\n");
    s
}

/// Every integer attribute literal of a parsed net, sorted by position.
pub fn literal_table(net: &NetworkDef) -> Vec<(Span, String, Attr)> {
    let mut table: Vec<(Span, String, Attr)> = net
        .layers
        .iter()
        .flat_map(|l| l.spans.iter().map(move |(attr, span)| (*span, l.id.clone(), *attr)))
        .collect();
    table.sort();
    table
}

/// Replacement of one integer literal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edit {
    pub span: Span,
    pub replacement: String,
}

impl Edit {
    pub fn new(span: Span, value: u64) -> Self {
        Edit { span, replacement: value.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EditError {
    #[error("edits overlap at {a:?} and {b:?}")]
    Overlap { a: Span, b: Span },
    #[error("span {span:?} is out of range for text of length {len}")]
    SpanOutOfRange { span: Span, len: usize },
    #[error("replacement `{0}` is not a positive integer literal")]
    InvalidReplacement(String),
}

/// Applies a batch of non-overlapping literal replacements. The result is
/// byte-identical to `text` outside the edited spans and independent of the
/// order of `edits`.
pub fn apply_edits(text: &str, edits: &[Edit]) -> Result<String, EditError> {
    let mut sorted: Vec<&Edit> = edits.iter().collect();
    sorted.sort_by_key(|e| (e.span.start, e.span.end));
    for e in &sorted {
        let ok = !e.replacement.is_empty()
            && e.replacement.bytes().all(|b| b.is_ascii_digit())
            && e.replacement.parse::<u64>().is_ok_and(|v| v > 0);
        if !ok {
            return Err(EditError::InvalidReplacement(e.replacement.clone()));
        }
        let s = e.span;
        if s.start > s.end || s.end > text.len() || !text.is_char_boundary(s.start) || !text.is_char_boundary(s.end) {
            return Err(EditError::SpanOutOfRange { span: s, len: text.len() });
        }
    }
    for pair in sorted.windows(2) {
        if pair[0].span.overlaps(&pair[1].span) || pair[0].span == pair[1].span {
            return Err(EditError::Overlap { a: pair[0].span, b: pair[1].span });
        }
    }
    let mut out = String::with_capacity(text.len() + 16);
    let mut cursor = 0;
    for e in sorted {
        out.push_str(&text[cursor..e.span.start]);
        out.push_str(&e.replacement);
        cursor = e.span.end;
    }
    out.push_str(&text[cursor..]);
    Ok(out)
}

/// Where an untouched span lands after `edits` are applied.
pub fn remap_span(span: Span, edits: &[Edit]) -> Span {
    let delta: isize = edits
        .iter()
        .filter(|e| e.span.end <= span.start)
        .map(|e| e.replacement.len() as isize - e.span.len() as isize)
        .sum();
    Span::new((span.start as isize + delta) as usize, (span.end as isize + delta) as usize)
}

/// Per-layer attribute values keyed by layer id, handy for comparing nets.
pub fn attribute_map(net: &NetworkDef) -> BTreeMap<(String, Attr), u64> {
    net.layers
        .iter()
        .flat_map(|l| l.attrs.iter().map(move |(a, v)| ((l.id.clone(), *a), *v)))
        .collect()
}
