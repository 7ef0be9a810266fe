//! Musical keys: tonic pitch class plus major/minor mode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const PITCH_CLASS_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

pub const MAJOR_SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
pub const NATURAL_MINOR_SCALE: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Major,
    Minor,
}

/// One of the 24 major/minor keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyLabel {
    tonic: u8,
    mode: Mode,
}

impl KeyLabel {
    pub const COUNT: usize = 24;

    pub fn new(tonic: u8, mode: Mode) -> Result<Self, Error> {
        if tonic >= 12 {
            return Err(Error::invalid(format!("tonic pitch class {tonic} out of range")));
        }
        Ok(Self { tonic, mode })
    }

    pub fn tonic(self) -> u8 {
        self.tonic
    }

    pub fn mode(self) -> Mode {
        self.mode
    }

    /// Class index: majors 0..12 by tonic, then minors 12..24.
    pub fn index(self) -> usize {
        self.tonic as usize + if self.mode == Mode::Minor { 12 } else { 0 }
    }

    pub fn from_index(index: usize) -> Result<Self, Error> {
        if index >= Self::COUNT {
            return Err(Error::invalid(format!("key index {index} out of range")));
        }
        let mode = if index < 12 { Mode::Major } else { Mode::Minor };
        Ok(Self {
            tonic: (index % 12) as u8,
            mode,
        })
    }

    pub fn all() -> impl Iterator<Item = KeyLabel> {
        (0..Self::COUNT).map(|i| Self::from_index(i).expect("in range"))
    }

    pub fn scale(self) -> [u8; 7] {
        let steps = match self.mode {
            Mode::Major => MAJOR_SCALE,
            Mode::Minor => NATURAL_MINOR_SCALE,
        };
        steps.map(|s| (self.tonic + s) % 12)
    }
}

impl fmt::Display for KeyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {}", PITCH_CLASS_NAMES[self.tonic as usize], mode)
    }
}

impl FromStr for KeyLabel {
    type Err = Error;

    /// Parses `"<tonic> <mode>"`, e.g. `"F# minor"` or `"Bb major"`.
    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::invalid(format!("unrecognized key `{s}`"));
        let mut parts = s.split_whitespace();
        let (Some(tonic), Some(mode), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let mut chars = tonic.chars();
        let letter = chars.next().ok_or_else(bad)?.to_ascii_uppercase();
        let natural: i32 = match letter {
            'C' => 0,
            'D' => 2,
            'E' => 4,
            'F' => 5,
            'G' => 7,
            'A' => 9,
            'B' => 11,
            _ => return Err(bad()),
        };
        let accidental: i32 = chars
            .map(|c| match c {
                '#' => Ok(1),
                'b' => Ok(-1),
                _ => Err(bad()),
            })
            .sum::<Result<i32, Error>>()?;
        let mode = match mode.to_ascii_lowercase().as_str() {
            "major" | "maj" => Mode::Major,
            "minor" | "min" => Mode::Minor,
            _ => return Err(bad()),
        };
        Self::new((natural + accidental).rem_euclid(12) as u8, mode)
    }
}

impl Serialize for KeyLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KeyLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip_covers_24_keys() {
        let all: Vec<_> = KeyLabel::all().collect();
        assert_eq!(all.len(), 24);
        for (i, k) in all.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(k.to_string().parse::<KeyLabel>().unwrap(), *k);
        }
    }

    #[test]
    fn parses_flats_and_sharps() {
        assert_eq!("Bb major".parse::<KeyLabel>().unwrap().tonic(), 10);
        assert_eq!("Cb minor".parse::<KeyLabel>().unwrap().tonic(), 11);
        assert_eq!("e MINOR".parse::<KeyLabel>().unwrap().to_string(), "E minor");
        assert!("H major".parse::<KeyLabel>().is_err());
        assert!("C dorian".parse::<KeyLabel>().is_err());
    }

    #[test]
    fn c_major_scale() {
        let k: KeyLabel = "C major".parse().unwrap();
        assert_eq!(k.scale(), [0, 2, 4, 5, 7, 9, 11]);
        let a: KeyLabel = "A minor".parse().unwrap();
        let mut s = a.scale();
        s.sort_unstable();
        assert_eq!(s, [0, 2, 4, 5, 7, 9, 11]);
    }
}
