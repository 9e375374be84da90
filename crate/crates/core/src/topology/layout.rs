//! Stage layout strings over `F`, `S` and `-`.
//!
//! `F` is a full convolution that owns its kernel, `S` a child that borrows
//! one, and `-` closes a residual block. `"FS-SF-SF"` is three blocks of two
//! convolutions each.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotTag {
    Full,
    Shared,
}

impl SlotTag {
    pub fn letter(self) -> char {
        match self {
            SlotTag::Full => 'F',
            SlotTag::Shared => 'S',
        }
    }
}

/// A parsed stage layout: tags grouped into residual blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub blocks: Vec<Vec<SlotTag>>,
}

impl Layout {
    pub fn parse(s: &str) -> Result<Self> {
        let mut blocks = vec![Vec::new()];
        for (pos, ch) in s.chars().enumerate() {
            match ch {
                'F' | 'f' => blocks.last_mut().unwrap().push(SlotTag::Full),
                'S' | 's' => blocks.last_mut().unwrap().push(SlotTag::Shared),
                '-' => {
                    if blocks.last().unwrap().is_empty() {
                        return Err(Error::Parse { pos, msg: "empty block before '-'".into() });
                    }
                    blocks.push(Vec::new());
                }
                other => return Err(Error::Parse { pos, msg: format!("illegal character {other:?}") }),
            }
        }
        if blocks.last().unwrap().is_empty() {
            let msg = if s.is_empty() { "empty layout" } else { "empty block at end" };
            return Err(Error::Parse { pos: s.chars().count(), msg: msg.into() });
        }
        let layout = Self { blocks };
        if layout.num_full() == 0 {
            return Err(Error::Parse { pos: 0, msg: "layout needs at least one F".into() });
        }
        Ok(layout)
    }

    /// Tags in order, ignoring block boundaries.
    pub fn slots(&self) -> Vec<SlotTag> {
        self.blocks.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_full(&self) -> usize {
        self.slots().iter().filter(|t| **t == SlotTag::Full).count()
    }

    /// Same block structure with every `S` replaced by `F`.
    pub fn expanded(&self) -> Self {
        Self { blocks: self.blocks.iter().map(|b| vec![SlotTag::Full; b.len()]).collect() }
    }

    /// For every slot, the index of the `F` it takes its kernel from
    /// (`None` for `F` slots). An `S` binds to the nearest `F` after it, or
    /// failing that the nearest `F` before it.
    pub fn bind_children(&self) -> Vec<Option<usize>> {
        let slots = self.slots();
        (0..slots.len())
            .map(|i| {
                if slots[i] == SlotTag::Full {
                    return None;
                }
                let forward = (i + 1..slots.len()).find(|&j| slots[j] == SlotTag::Full);
                forward.or_else(|| (0..i).rev().find(|&j| slots[j] == SlotTag::Full))
            })
            .collect()
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.blocks.iter().map(|b| b.iter().map(|t| t.letter()).collect()).collect();
        write!(f, "{}", parts.join("-"))
    }
}
