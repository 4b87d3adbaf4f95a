//! The eight taillight states and their 3-letter codes.
//!
//! A code spells out (brake, left, right) activation: `B`/`O` in the first
//! position, `L`/`O` in the second, `R`/`O` in the third. Class indices
//! follow the canonical code order below and double as logit positions.

/// One of the 8 recognizable taillight states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaillightState {
    Ooo,
    Boo,
    Olo,
    Blo,
    Oor,
    Bor,
    Olr,
    Blr,
}

impl TaillightState {
    pub const COUNT: usize = 8;

    /// Canonical class order; index in this array is the class index.
    pub const ALL: [TaillightState; 8] = [
        TaillightState::Ooo,
        TaillightState::Boo,
        TaillightState::Olo,
        TaillightState::Blo,
        TaillightState::Oor,
        TaillightState::Bor,
        TaillightState::Olr,
        TaillightState::Blr,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("state in ALL")
    }

    pub fn from_index(index: usize) -> Option<TaillightState> {
        Self::ALL.get(index).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            TaillightState::Ooo => "OOO",
            TaillightState::Boo => "BOO",
            TaillightState::Olo => "OLO",
            TaillightState::Blo => "BLO",
            TaillightState::Oor => "OOR",
            TaillightState::Bor => "BOR",
            TaillightState::Olr => "OLR",
            TaillightState::Blr => "BLR",
        }
    }

    pub fn from_code(code: &str) -> Option<TaillightState> {
        Self::ALL.iter().copied().find(|s| s.code() == code)
    }

    /// (brake, left, right) activation bits.
    pub fn bits(self) -> (bool, bool, bool) {
        match self {
            TaillightState::Ooo => (false, false, false),
            TaillightState::Boo => (true, false, false),
            TaillightState::Olo => (false, true, false),
            TaillightState::Blo => (true, true, false),
            TaillightState::Oor => (false, false, true),
            TaillightState::Bor => (true, false, true),
            TaillightState::Olr => (false, true, true),
            TaillightState::Blr => (true, true, true),
        }
    }

    pub fn from_bits(brake: bool, left: bool, right: bool) -> TaillightState {
        match (brake, left, right) {
            (false, false, false) => TaillightState::Ooo,
            (true, false, false) => TaillightState::Boo,
            (false, true, false) => TaillightState::Olo,
            (true, true, false) => TaillightState::Blo,
            (false, false, true) => TaillightState::Oor,
            (true, false, true) => TaillightState::Bor,
            (false, true, true) => TaillightState::Olr,
            (true, true, true) => TaillightState::Blr,
        }
    }

    /// Label under a horizontal flip: left and right swap, brake is kept.
    pub fn flipped(self) -> TaillightState {
        let (brake, left, right) = self.bits();
        TaillightState::from_bits(brake, right, left)
    }
}

impl std::fmt::Display for TaillightState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_bits_round_trip() {
        for (i, s) in TaillightState::ALL.iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(TaillightState::from_index(i), Some(*s));
            assert_eq!(TaillightState::from_code(s.code()), Some(*s));
            let (b, l, r) = s.bits();
            assert_eq!(TaillightState::from_bits(b, l, r), *s);
        }
        assert_eq!(TaillightState::from_code("XYZ"), None);
    }

    #[test]
    fn codes_spell_their_bits() {
        for s in TaillightState::ALL {
            let (b, l, r) = s.bits();
            let code = s.code().as_bytes();
            assert_eq!(code[0] == b'B', b);
            assert_eq!(code[1] == b'L', l);
            assert_eq!(code[2] == b'R', r);
        }
    }

    #[test]
    fn flip_swaps_turn_sides_and_keeps_brake() {
        use TaillightState::*;
        assert_eq!(Olo.flipped(), Oor);
        assert_eq!(Oor.flipped(), Olo);
        assert_eq!(Blo.flipped(), Bor);
        assert_eq!(Bor.flipped(), Blo);
        for fixed in [Ooo, Boo, Olr, Blr] {
            assert_eq!(fixed.flipped(), fixed);
        }
        for s in TaillightState::ALL {
            assert_eq!(s.flipped().flipped(), s, "flip is an involution");
            assert_eq!(s.flipped().bits().0, s.bits().0, "brake preserved");
        }
    }
}
