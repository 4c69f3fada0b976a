//! Semantic label sets. The renderer always works at the fine 19-class
//! level (CelebAMask-HQ ordering); the coarse 7-class set merges subclasses.

use serde::{Deserialize, Serialize};

pub mod fine {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const NOSE: u8 = 2;
    pub const EYE_GLASSES: u8 = 3;
    pub const L_EYE: u8 = 4;
    pub const R_EYE: u8 = 5;
    pub const L_BROW: u8 = 6;
    pub const R_BROW: u8 = 7;
    pub const L_EAR: u8 = 8;
    pub const R_EAR: u8 = 9;
    pub const MOUTH: u8 = 10;
    pub const U_LIP: u8 = 11;
    pub const L_LIP: u8 = 12;
    pub const HAIR: u8 = 13;
    pub const HAT: u8 = 14;
    pub const EARRING: u8 = 15;
    pub const NECKLACE: u8 = 16;
    pub const NECK: u8 = 17;
    pub const CLOTH: u8 = 18;

    pub const COUNT: usize = 19;
}

pub mod coarse {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const HAIR: u8 = 2;
    pub const EYES: u8 = 3;
    pub const NOSE: u8 = 4;
    pub const MOUTH: u8 = 5;
    pub const NECK: u8 = 6;

    pub const COUNT: usize = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelSet {
    #[default]
    Coarse7,
    Fine19,
}

impl LabelSet {
    pub fn n_classes(self) -> usize {
        match self {
            LabelSet::Coarse7 => coarse::COUNT,
            LabelSet::Fine19 => fine::COUNT,
        }
    }

    /// Maps a fine renderer label into this set.
    pub fn from_fine(self, label: u8) -> u8 {
        match self {
            LabelSet::Fine19 => label,
            LabelSet::Coarse7 => match label {
                fine::BACKGROUND => coarse::BACKGROUND,
                fine::SKIN | fine::L_BROW | fine::R_BROW | fine::L_EAR | fine::R_EAR => {
                    coarse::SKIN
                }
                fine::EARRING => coarse::SKIN,
                fine::NOSE => coarse::NOSE,
                fine::EYE_GLASSES | fine::L_EYE | fine::R_EYE => coarse::EYES,
                fine::MOUTH | fine::U_LIP | fine::L_LIP => coarse::MOUTH,
                fine::HAIR | fine::HAT => coarse::HAIR,
                fine::NECKLACE | fine::NECK | fine::CLOTH => coarse::NECK,
                _ => coarse::BACKGROUND,
            },
        }
    }

    /// Whether a label of this set belongs to the head-and-neck region.
    pub fn is_head_or_neck(self, label: u8) -> bool {
        match self {
            LabelSet::Coarse7 => label != coarse::BACKGROUND,
            LabelSet::Fine19 => label != fine::BACKGROUND && label != fine::CLOTH,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            LabelSet::Coarse7 => &["background", "skin", "hair", "eyes", "nose", "mouth", "neck"],
            LabelSet::Fine19 => &[
                "background",
                "skin",
                "nose",
                "eye_g",
                "l_eye",
                "r_eye",
                "l_brow",
                "r_brow",
                "l_ear",
                "r_ear",
                "mouth",
                "u_lip",
                "l_lip",
                "hair",
                "hat",
                "ear_r",
                "neck_l",
                "neck",
                "cloth",
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarse_mapping_is_total_and_in_range() {
        for l in 0..fine::COUNT as u8 {
            assert!((LabelSet::Coarse7.from_fine(l) as usize) < coarse::COUNT);
            assert_eq!(LabelSet::Fine19.from_fine(l), l);
        }
        assert_eq!(LabelSet::Coarse7.class_names().len(), 7);
        assert_eq!(LabelSet::Fine19.class_names().len(), 19);
    }
}
