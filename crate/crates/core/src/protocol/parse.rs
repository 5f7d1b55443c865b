//! Single-pass recursive-descent parser with skip-to-next-tag recovery.
//!
//! Parsing is total: every input yields a best-effort trajectory and the
//! full list of violations. Element content ends at the first `<` that
//! starts anything tag-shaped; if that is not the matching closer the
//! element is reported unclosed and parsing resumes at that `<`.

use alloc::string::String;
use alloc::vec::Vec;

use super::escape::entity_at;
use super::validate::{completeness, structural};
use super::{
    is_identifier, parse_args, ActionCall, ActionResult, AnswerBlock, Item, ProtocolError, ResultStatus, Role, Scope,
    Span, SpanMap, TagName, ThinkBlock, Trajectory, Turn, Violation, ViolationKind,
};

pub const MAX_DOCUMENT_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub trajectory: Trajectory,
    pub violations: Vec<Violation>,
    pub spans: SpanMap,
}

pub fn parse_bytes(bytes: &[u8]) -> Result<Parsed, ProtocolError> {
    if bytes.len() > MAX_DOCUMENT_BYTES {
        return Err(ProtocolError::Oversize { len: bytes.len() });
    }
    let text = core::str::from_utf8(bytes).map_err(|_| ProtocolError::Encoding)?;
    parse(text)
}

/// Parses a document into an anonymous trajectory (empty `task_id`).
pub fn parse(document: &str) -> Result<Parsed, ProtocolError> {
    if document.len() > MAX_DOCUMENT_BYTES {
        return Err(ProtocolError::Oversize { len: document.len() });
    }
    let mut parser = Parser {
        src: document,
        violations: Vec::new(),
        items: Vec::new(),
    };
    parser.run();

    let (trajectory, spans) = segment(parser.items);
    let mut violations = parser.violations;
    violations.extend(structural(&trajectory, Some(&spans)));
    violations.extend(completeness(&trajectory, document.len()));
    violations.sort_by_key(|v| v.span.start);
    Ok(Parsed {
        trajectory,
        violations,
        spans,
    })
}

fn segment(items: Vec<(Item, Span)>) -> (Trajectory, SpanMap) {
    let mut trajectory = Trajectory::default();
    let mut spans: SpanMap = Vec::new();
    for (item, span) in items {
        let role = if matches!(item, Item::Result(_)) {
            Role::Runtime
        } else {
            Role::Assistant
        };
        match trajectory.turns.last_mut() {
            Some(turn) if turn.role == role => {
                turn.items.push(item);
                spans.last_mut().expect("aligned").push(span);
            }
            _ => {
                trajectory.turns.push(Turn {
                    role,
                    items: alloc::vec![item],
                });
                spans.push(alloc::vec![span]);
            }
        }
    }
    (trajectory, spans)
}

struct Token<'a> {
    start: usize,
    end: usize,
    closing: bool,
    name: &'a str,
    attrs: &'a str,
    self_closing: bool,
}

enum Scan<'a> {
    /// A `<` that does not start anything tag-shaped.
    NotTag,
    /// Tag-shaped but never reaches `>`; `end` is where scanning stopped.
    Unterminated {
        name: &'a str,
        end: usize,
    },
    Tag(Token<'a>),
}

fn is_name_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b':' | b'.')
}

struct Parser<'a> {
    src: &'a str,
    violations: Vec<Violation>,
    items: Vec<(Item, Span)>,
}

impl<'a> Parser<'a> {
    fn push(&mut self, kind: ViolationKind, start: usize, end: usize, note: &str) {
        self.violations.push(Violation::new(kind, Span::new(start, end), note));
    }

    fn scan(&self, at: usize) -> Scan<'a> {
        let src = self.src;
        let bytes = src.as_bytes();
        let mut i = at + 1;
        let closing = bytes.get(i) == Some(&b'/');
        if closing {
            i += 1;
        }
        if !bytes.get(i).is_some_and(|b| b.is_ascii_alphabetic()) {
            return Scan::NotTag;
        }
        let name_start = i;
        while bytes.get(i).is_some_and(|b| is_name_byte(*b)) {
            i += 1;
        }
        let name = &src[name_start..i];
        let attrs_start = i;
        while i < bytes.len() && bytes[i] != b'>' && bytes[i] != b'<' {
            i += 1;
        }
        if i >= bytes.len() || bytes[i] == b'<' {
            return Scan::Unterminated { name, end: i };
        }
        let raw_attrs = &src[attrs_start..i];
        let trimmed = raw_attrs.trim_end();
        let self_closing = !closing && trimmed.ends_with('/');
        let attrs = if self_closing {
            &trimmed[..trimmed.len() - 1]
        } else {
            raw_attrs
        };
        Scan::Tag(Token {
            start: at,
            end: i + 1,
            closing,
            name,
            attrs,
            self_closing,
        })
    }

    fn run(&mut self) {
        let mut pos = 0;
        while let Some(off) = self.src[pos..].find('<') {
            let at = pos + off;
            match self.scan(at) {
                Scan::NotTag => pos = at + 1,
                Scan::Unterminated { name, end } => {
                    let kind = if TagName::from_name(name).is_some() {
                        ViolationKind::UnclosedTag
                    } else {
                        ViolationKind::UnknownTag
                    };
                    self.push(kind, at, end, "tag is never terminated by '>'");
                    pos = end;
                }
                Scan::Tag(tok) => {
                    pos = tok.end;
                    match TagName::from_name(tok.name) {
                        None => self.push(
                            ViolationKind::UnknownTag,
                            tok.start,
                            tok.end,
                            "tag outside the protocol vocabulary",
                        ),
                        Some(_) if tok.closing => self.push(
                            ViolationKind::UnclosedTag,
                            tok.start,
                            tok.end,
                            "closing tag without a matching opener",
                        ),
                        Some(tag) => pos = self.element(tag, tok),
                    }
                }
            }
        }
    }

    /// Reads element content after the opener. Returns the decoded text and
    /// the position where top-level scanning resumes.
    fn content(&mut self, tag: TagName, opener_start: usize, from: usize) -> (String, usize) {
        let src = self.src;
        let mut text = String::new();
        let mut pos = from;
        loop {
            let Some(off) = src[pos..].find(['<', '&']) else {
                text.push_str(&src[pos..]);
                self.push(
                    ViolationKind::UnclosedTag,
                    opener_start,
                    src.len(),
                    "element runs to end of document",
                );
                return (text, src.len());
            };
            let at = pos + off;
            text.push_str(&src[pos..at]);
            if src.as_bytes()[at] == b'&' {
                match entity_at(&src[at..]) {
                    Some((len, c)) => {
                        text.push(c);
                        pos = at + len;
                    }
                    None => {
                        self.push(ViolationKind::BadEscape, at, at + 1, "raw '&' in text");
                        text.push('&');
                        pos = at + 1;
                    }
                }
                continue;
            }
            match self.scan(at) {
                Scan::NotTag => {
                    self.push(ViolationKind::BadEscape, at, at + 1, "raw '<' in text");
                    text.push('<');
                    pos = at + 1;
                }
                Scan::Tag(tok) if tok.closing && tok.name == tag.as_str() && tok.attrs.trim().is_empty() => {
                    return (text, tok.end);
                }
                _ => {
                    self.push(
                        ViolationKind::UnclosedTag,
                        opener_start,
                        at,
                        "element interrupted by another tag",
                    );
                    return (text, at);
                }
            }
        }
    }

    fn element(&mut self, tag: TagName, tok: Token<'a>) -> usize {
        let (text, end) = if tok.self_closing {
            (String::new(), tok.end)
        } else {
            self.content(tag, tok.start, tok.end)
        };
        let span = Span::new(tok.start, end);
        let attrs = match parse_attrs(tok.attrs) {
            Some(attrs) => attrs,
            None => {
                self.push(ViolationKind::UnknownTag, tok.start, tok.end, "malformed attributes");
                return end;
            }
        };
        let item = match tag {
            TagName::Think | TagName::Answer => {
                if !attrs.is_empty() {
                    self.push(
                        ViolationKind::UnknownTag,
                        tok.start,
                        tok.end,
                        "element takes no attributes",
                    );
                }
                if tag == TagName::Think {
                    Item::Think(ThinkBlock::new(text))
                } else {
                    Item::Answer(AnswerBlock { text })
                }
            }
            TagName::Act => match act_from(&attrs, &text) {
                Ok(call) => Item::Act(call),
                Err(note) => {
                    self.push(ViolationKind::UnknownTag, tok.start, end, note);
                    return end;
                }
            },
            TagName::Result => match result_from(&attrs, text) {
                Ok(result) => Item::Result(result),
                Err(note) => {
                    self.push(ViolationKind::UnknownTag, tok.start, end, note);
                    return end;
                }
            },
        };
        self.items.push((item, span));
        end
    }
}

type Attrs = Vec<(String, String)>;

fn attr<'b>(attrs: &'b Attrs, key: &str) -> Option<&'b str> {
    attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

/// `key="value"` pairs separated by whitespace; duplicates are malformed.
fn parse_attrs(src: &str) -> Option<Attrs> {
    let mut attrs: Attrs = Vec::new();
    let mut rest = src;
    loop {
        let trimmed = rest.trim_start();
        if trimmed.is_empty() {
            return Some(attrs);
        }
        if trimmed.len() == rest.len() && !attrs.is_empty() {
            return None;
        }
        let eq = trimmed.find('=')?;
        let key = &trimmed[..eq];
        if key.is_empty() || !key.bytes().all(is_name_byte) {
            return None;
        }
        let value_src = trimmed[eq + 1..].strip_prefix('"')?;
        let close = value_src.find('"')?;
        let value = super::unescape_lossy(&value_src[..close]);
        if attrs.iter().any(|(k, _)| k == key) {
            return None;
        }
        attrs.push((String::from(key), value));
        rest = &value_src[close + 1..];
    }
}

fn parse_id(value: Option<&str>) -> Option<u64> {
    let value = value?;
    if value.is_empty() || !value.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    value.parse().ok()
}

fn act_from(attrs: &Attrs, text: &str) -> Result<ActionCall, &'static str> {
    if attrs
        .iter()
        .any(|(k, _)| !matches!(k.as_str(), "id" | "name" | "scope"))
    {
        return Err("unexpected attribute on act");
    }
    let id = parse_id(attr(attrs, "id"))
        .filter(|id| *id > 0)
        .ok_or("act needs a positive integer id")?;
    let name = attr(attrs, "name")
        .filter(|n| is_identifier(n))
        .ok_or("act needs an identifier name")?;
    let scope = attr(attrs, "scope")
        .and_then(Scope::from_attr)
        .ok_or("act scope must be global or local")?;
    let args = parse_args(text).ok_or("act arguments must be a JSON object of scalars")?;
    Ok(ActionCall::new(id, name, scope, args))
}

fn result_from(attrs: &Attrs, payload: String) -> Result<ActionResult, &'static str> {
    if attrs.iter().any(|(k, _)| !matches!(k.as_str(), "id" | "status")) {
        return Err("unexpected attribute on result");
    }
    let call_id = parse_id(attr(attrs, "id")).ok_or("result needs an integer id")?;
    let status = match attr(attrs, "status") {
        None => ResultStatus::Ok,
        Some(s) => ResultStatus::from_attr(s).ok_or("unknown result status")?,
    };
    Ok(ActionResult {
        call_id,
        status,
        payload,
    })
}
