//! Fault injection: turns a clean trajectory into a document exhibiting a
//! chosen violation. Used to build format-reward test corpora and by the
//! simulated policy to realize its format-discipline propensities.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::serialize::render_item_into;
use super::{escape_text, validate, Item, ProtocolError, Role, TagName, Trajectory, ViolationKind};
use crate::rng::{below, rng, Rng};

#[derive(Debug, Clone)]
struct Fragment {
    /// `None` for injected non-protocol tags.
    tag: Option<TagName>,
    open: String,
    content: String,
    close: String,
    turn: usize,
    touched: bool,
}

impl Fragment {
    fn from_item(item: &Item, turn: usize) -> Self {
        let mut rendered = String::new();
        render_item_into(&mut rendered, item);
        let open_end = rendered.find('>').expect("rendered tag") + 1;
        let close_start = rendered.rfind("</").expect("rendered closer");
        Self {
            tag: Some(item.tag()),
            open: rendered[..open_end].to_string(),
            content: rendered[open_end..close_start].to_string(),
            close: rendered[close_start..].to_string(),
            turn,
            touched: false,
        }
    }

    fn injected(tag: Option<TagName>, open: String, content: &str, close: &str, turn: usize) -> Self {
        Self {
            tag,
            open,
            content: content.to_string(),
            close: close.to_string(),
            turn,
            touched: true,
        }
    }
}

/// An editable rendering of a trajectory to which faults can be applied
/// one after another.
#[derive(Debug, Clone)]
pub struct Draft {
    frags: Vec<Fragment>,
    roles: Vec<Role>,
    max_call_id: u64,
}

impl Draft {
    pub fn new(trajectory: &Trajectory) -> Self {
        let frags = trajectory
            .turns
            .iter()
            .enumerate()
            .flat_map(|(ti, turn)| turn.items.iter().map(move |item| Fragment::from_item(item, ti)))
            .collect();
        Self {
            frags,
            roles: trajectory.turns.iter().map(|t| t.role).collect(),
            max_call_id: trajectory.calls().map(|c| c.id).max().unwrap_or(0),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, f) in self.frags.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&f.open);
            out.push_str(&f.content);
            out.push_str(&f.close);
        }
        out
    }

    fn indices(&self, pred: impl Fn(&Fragment) -> bool) -> Vec<usize> {
        (0..self.frags.len()).filter(|&i| pred(&self.frags[i])).collect()
    }

    fn choose(candidates: &[usize], rng: &mut Rng, kind: ViolationKind) -> Result<usize, ProtocolError> {
        if candidates.is_empty() {
            return Err(ProtocolError::UnsupportedKind(kind));
        }
        Ok(candidates[below(rng, candidates.len())])
    }

    /// Applies one fault. Faults compose; an already-faulted fragment is
    /// never removed, so applying a fault never repairs an earlier one.
    pub fn apply(&mut self, kind: ViolationKind, rng: &mut Rng) -> Result<(), ProtocolError> {
        use ViolationKind as K;
        match kind {
            K::UnclosedTag => {
                let c = self.indices(|f| f.tag.is_some() && !f.close.is_empty());
                let i = Self::choose(&c, rng, kind)?;
                self.frags[i].close.clear();
                self.frags[i].touched = true;
            }
            K::UnknownTag => {
                let at = below(rng, self.frags.len() + 1);
                let turn = self.frags.get(at).map_or(0, |f| f.turn);
                self.frags
                    .insert(at, Fragment::injected(None, "<scratch/>".into(), "", "", turn));
            }
            K::ActOutsideThinkTurn => {
                let mut c = Vec::new();
                for (i, f) in self.frags.iter().enumerate() {
                    let next_same_act = self
                        .frags
                        .get(i + 1)
                        .is_some_and(|n| n.turn == f.turn && n.tag == Some(TagName::Act));
                    if f.tag == Some(TagName::Act) && !next_same_act && self.roles[f.turn] == Role::Assistant {
                        c.push(i);
                    }
                }
                if !c.is_empty() {
                    let i = Self::choose(&c, rng, kind)?;
                    let turn = self.frags[i].turn;
                    self.frags.insert(
                        i + 1,
                        Fragment::injected(
                            Some(TagName::Think),
                            "<think>".into(),
                            "second thoughts",
                            "</think>",
                            turn,
                        ),
                    );
                } else {
                    // no action calls: open the final assistant turn with one
                    let last = self
                        .roles
                        .iter()
                        .rposition(|r| *r == Role::Assistant)
                        .ok_or(ProtocolError::UnsupportedKind(kind))?;
                    let at = self
                        .frags
                        .iter()
                        .position(|f| f.turn == last)
                        .ok_or(ProtocolError::UnsupportedKind(kind))?;
                    self.max_call_id += 1;
                    let open = format!("<act id=\"{}\" name=\"clock_now\" scope=\"global\">", self.max_call_id);
                    self.frags
                        .insert(at, Fragment::injected(Some(TagName::Act), open, "{}", "</act>", last));
                }
            }
            K::MissingAnswer => {
                let c = self.indices(|f| f.tag == Some(TagName::Answer) && !f.touched);
                let i = Self::choose(&c, rng, kind)?;
                self.frags.remove(i);
            }
            K::DuplicateId => {
                let c = self.indices(|f| f.tag == Some(TagName::Act));
                let i = Self::choose(&c, rng, kind)?;
                let mut copy = self.frags[i].clone();
                copy.touched = true;
                self.frags.insert(i + 1, copy);
            }
            K::BadEscape => {
                let mut c = self.indices(|f| f.tag == Some(TagName::Think));
                if c.is_empty() {
                    c = self.indices(|f| match f.tag {
                        Some(TagName::Result) => true,
                        // a blank answer must stay blank
                        Some(TagName::Answer) => !f.content.trim().is_empty(),
                        _ => false,
                    });
                }
                let i = Self::choose(&c, rng, kind)?;
                self.frags[i].content.insert_str(0, "& ");
                self.frags[i].touched = true;
            }
            K::OrphanResult => {
                let id = if self.max_call_id >= 99 {
                    self.max_call_id + 1
                } else {
                    99
                };
                let open = format!("<result id=\"{id}\" status=\"ok\">");
                self.frags.insert(
                    0,
                    Fragment::injected(Some(TagName::Result), open, &escape_text("orphan"), "</result>", 0),
                );
            }
            K::EmptyAnswer => {
                let c = self.indices(|f| f.tag == Some(TagName::Answer) && !f.touched);
                let i = Self::choose(&c, rng, kind)?;
                self.frags[i].content = if below(rng, 2) == 0 { String::new() } else { " ".into() };
                self.frags[i].touched = true;
            }
        }
        Ok(())
    }
}

/// Renders `trajectory` with one injected fault of `kind`; deterministic in `seed`.
pub fn mutate(trajectory: &Trajectory, kind: ViolationKind, seed: u64) -> Result<String, ProtocolError> {
    if let Some(v) = validate(trajectory).first() {
        return Err(ProtocolError::InvalidTrajectory(format!("{}: {}", v.kind, v.note)));
    }
    let mut draft = Draft::new(trajectory);
    draft.apply(kind, &mut rng(seed))?;
    Ok(draft.render())
}
