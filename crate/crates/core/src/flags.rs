//! Per-run quality and diagnostic flags.

use std::fmt;

bitflags::bitflags! {
    #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
    pub struct Flags: u32 {
        /// Amplitude-moment discriminant was negative and clamped to zero.
        const CLAMPED_MOMENTS = 1;
        /// Estimate of v² fell outside [0, 1] and was clamped.
        const CLAMPED_V = 1 << 1;
        /// Cross-term too small to resolve the sign of v; +1 was used.
        const SIGN_INDETERMINATE = 1 << 2;
        /// Closest pair of grid candidates is further apart than any
        /// correct determination should be.
        const LARGE_GAP_JXY = 1 << 3;
        const LARGE_GAP_JZ = 1 << 4;
        /// The Jz phase could not be resolved; the run carries no Jz estimate.
        const JZ_REJECTED = 1 << 5;
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("-");
        }
        let names: Vec<String> = self
            .iter_names()
            .map(|(n, _)| n.to_ascii_lowercase())
            .collect();
        f.write_str(&names.join("|"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display() {
        assert_eq!(Flags::empty().to_string(), "-");
        assert_eq!(
            (Flags::CLAMPED_V | Flags::JZ_REJECTED).to_string(),
            "clamped_v|jz_rejected"
        );
    }
}
