use alloc::string::String;

pub(crate) const ENTITIES: [(&str, char); 4] = [("&lt;", '<'), ("&gt;", '>'), ("&amp;", '&'), ("&quot;", '"')];

/// Entity-escapes `&`, `<` and `>`.
pub fn escape_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            _ => out.push(c),
        }
    }
    out
}

/// Length of the entity at the start of `s`, and the char it stands for.
pub(crate) fn entity_at(s: &str) -> Option<(usize, char)> {
    ENTITIES
        .iter()
        .find(|(e, _)| s.starts_with(e))
        .map(|(e, c)| (e.len(), *c))
}

/// Decodes known entities; anything else passes through unchanged.
pub fn unescape_lossy(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        match entity_at(rest) {
            Some((len, c)) => {
                out.push(c);
                rest = &rest[len..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// True when `text` holds no raw `<`/`>` and every `&` starts a known entity.
pub fn is_neutralized(text: &str) -> bool {
    if text.contains(['<', '>']) {
        return false;
    }
    text.match_indices('&').all(|(i, _)| entity_at(&text[i..]).is_some())
}
