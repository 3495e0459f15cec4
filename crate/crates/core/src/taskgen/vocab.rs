//! Token vocabulary shared by instructions and actions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Pick,
    Place,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Pick,
        Action::Place,
    ];

    pub fn token(self) -> usize {
        self as usize
    }

    pub fn from_token(t: usize) -> Option<Action> {
        Self::ALL.get(t).copied()
    }
}

/// Padding after the end of an action chunk; never a valid action.
pub const PAD: usize = 6;
const WORD_OFFSET: usize = 8;

pub const OBJECTS: [&str; 8] = [
    "carrot", "apple", "cube", "cup", "banana", "can", "sponge", "spoon",
];
pub const RECEPTACLES: [&str; 6] = ["plate", "bowl", "towel", "tray", "box", "basket"];
pub const SHAPES: [&str; 5] = ["star", "circle", "square", "triangle", "heart"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const DIRECTIONS: [&str; 4] = ["up", "down", "left", "right"];

const FUNCTION_WORDS: [&str; 14] = [
    "put", "the", "on", "place", "onto", "move", "to", "pick", "and", "drop", "it", "shape",
    "arrow", "number",
];
const PARITY_WORDS: [&str; 2] = ["odd", "even"];

fn words() -> impl Iterator<Item = &'static str> {
    FUNCTION_WORDS
        .iter()
        .chain(&PARITY_WORDS)
        .chain(&DIRECTIONS)
        .chain(&OBJECTS)
        .chain(&RECEPTACLES)
        .chain(&SHAPES)
        .chain(&COLORS)
        .copied()
}

/// Token id of a vocabulary word.
pub fn word(w: &str) -> Result<usize> {
    words()
        .position(|x| x == w)
        .map(|i| WORD_OFFSET + i)
        .ok_or_else(|| Error::Input(format!("unknown word {w:?}")))
}

pub(crate) fn w(s: &str) -> usize {
    word(s).expect("built-in vocabulary word")
}

/// Inverse of [`word`]; action tokens decode to upper-case action names.
pub fn decode(token: usize) -> Option<&'static str> {
    if let Some(a) = Action::from_token(token) {
        return Some(match a {
            Action::Up => "UP",
            Action::Down => "DOWN",
            Action::Left => "LEFT",
            Action::Right => "RIGHT",
            Action::Pick => "PICK",
            Action::Place => "PLACE",
        });
    }
    token.checked_sub(WORD_OFFSET).and_then(|i| words().nth(i))
}

/// Number of token ids the task generator can emit.
pub fn vocab_size() -> usize {
    WORD_OFFSET + words().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_round_trip_and_fit() {
        for wd in words() {
            assert_eq!(decode(word(wd).unwrap()), Some(wd));
        }
        assert!(vocab_size() <= 96);
        assert!(word("zebra").is_err());
    }
}
