//! 64-channel 10-10 montage with mastoid references.

use std::sync::Arc;

use crate::error::{BciError, Result};

pub const FS_HZ: f64 = 1000.0;

/// (label, lateral step, anterior step) on the 10-10 grid; one step is 10 %
/// of the nasion-inion arc (18 degrees). Positions are mapped onto the unit
/// sphere with an azimuthal-equidistant projection centred on Cz.
const GRID: [(&str, f64, f64); 64] = [
    ("Fp1", -1.0, 4.0), ("Fp2", 1.0, 4.0),
    ("AF7", -3.0, 3.0), ("AF3", -1.0, 3.0), ("AFz", 0.0, 3.0), ("AF4", 1.0, 3.0), ("AF8", 3.0, 3.0),
    ("F9", -5.0, 2.0), ("F7", -4.0, 2.0), ("F5", -3.0, 2.0), ("F3", -2.0, 2.0), ("F1", -1.0, 2.0),
    ("Fz", 0.0, 2.0), ("F2", 1.0, 2.0), ("F4", 2.0, 2.0), ("F6", 3.0, 2.0), ("F8", 4.0, 2.0),
    ("F10", 5.0, 2.0),
    ("FT7", -4.0, 1.0), ("FC5", -3.0, 1.0), ("FC3", -2.0, 1.0), ("FC1", -1.0, 1.0), ("FCz", 0.0, 1.0),
    ("FC2", 1.0, 1.0), ("FC4", 2.0, 1.0), ("FC6", 3.0, 1.0), ("FT8", 4.0, 1.0),
    ("T7", -4.0, 0.0), ("C5", -3.0, 0.0), ("C3", -2.0, 0.0), ("C1", -1.0, 0.0), ("Cz", 0.0, 0.0),
    ("C2", 1.0, 0.0), ("C4", 2.0, 0.0), ("C6", 3.0, 0.0), ("T8", 4.0, 0.0),
    ("TP7", -4.0, -1.0), ("CP5", -3.0, -1.0), ("CP3", -2.0, -1.0), ("CP1", -1.0, -1.0), ("CPz", 0.0, -1.0),
    ("CP2", 1.0, -1.0), ("CP4", 2.0, -1.0), ("CP6", 3.0, -1.0), ("TP8", 4.0, -1.0),
    ("P7", -4.0, -2.0), ("P5", -3.0, -2.0), ("P3", -2.0, -2.0), ("P1", -1.0, -2.0), ("Pz", 0.0, -2.0),
    ("P2", 1.0, -2.0), ("P4", 2.0, -2.0), ("P6", 3.0, -2.0), ("P8", 4.0, -2.0),
    ("PO7", -3.0, -3.0), ("PO3", -1.0, -3.0), ("POz", 0.0, -3.0), ("PO4", 1.0, -3.0), ("PO8", 3.0, -3.0),
    ("O1", -1.0, -4.0), ("Oz", 0.0, -4.0), ("O2", 1.0, -4.0),
    ("M1", -5.5, -2.0), ("M2", 5.5, -2.0),
];

/// Channels over the forehead dropped from decoding and ERP analysis
/// (the Fp, AF and F rows).
pub const FRONTAL_EXCLUDED: [&str; 18] = [
    "Fp1", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F9", "F7", "F5", "F3", "F1", "Fz", "F2", "F4",
    "F6", "F8", "F10",
];

pub const REFERENCE_CHANNELS: [&str; 2] = ["M1", "M2"];

/// Degrees of arc per grid step.
const STEP_DEG: f64 = 18.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLayout {
    names: Arc<[String]>,
    positions: Vec<[f64; 3]>,
    pub fs_hz: f64,
}

impl Default for ChannelLayout {
    fn default() -> Self {
        Self::standard_64()
    }
}

impl ChannelLayout {
    pub fn standard_64() -> Self {
        let names: Arc<[String]> = GRID.iter().map(|(n, _, _)| n.to_string()).collect();
        let positions = GRID.iter().map(|&(_, x, y)| grid_to_unit_sphere(x, y)).collect();
        Self { names, positions, fs_hz: FS_HZ }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &Arc<[String]> {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| BciError::MissingChannel(name.to_string()))
    }

    pub fn cz(&self) -> usize {
        self.index_of("Cz").expect("standard layout has Cz")
    }

    pub fn position(&self, idx: usize) -> [f64; 3] {
        self.positions[idx]
    }

    pub fn is_frontal_excluded(&self, name: &str) -> bool {
        FRONTAL_EXCLUDED.contains(&name)
    }

    /// Channels kept for decoding: everything except mastoids and the
    /// frontal block (44 channels for the standard montage).
    pub fn decoding_channels(&self) -> Vec<String> {
        self.names
            .iter()
            .filter(|n| !REFERENCE_CHANNELS.contains(&n.as_str()) && !self.is_frontal_excluded(n))
            .cloned()
            .collect()
    }

    /// Great-circle distance (radians) between two electrodes.
    pub fn arc_distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.positions[a], self.positions[b]);
        let dot = (p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).clamp(-1.0, 1.0);
        dot.acos()
    }
}

fn grid_to_unit_sphere(x: f64, y: f64) -> [f64; 3] {
    let r = (x * x + y * y).sqrt();
    let theta = (r * STEP_DEG).to_radians();
    let phi = y.atan2(x);
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn montage_invariants() {
        let l = ChannelLayout::standard_64();
        assert_eq!(l.len(), 64);
        let unique: HashSet<_> = l.names().iter().collect();
        assert_eq!(unique.len(), 64);
        for n in ["Cz", "M1", "M2"] {
            assert!(l.index_of(n).is_some());
            assert!(!FRONTAL_EXCLUDED.contains(&n));
        }
        assert_eq!(FRONTAL_EXCLUDED.len(), 18);
        assert!(FRONTAL_EXCLUDED.iter().all(|n| l.index_of(n).is_some()));
        assert_eq!(l.decoding_channels().len(), 44);
        assert_eq!(l.fs_hz, 1000.0);
    }

    #[test]
    fn cz_is_the_vertex() {
        let l = ChannelLayout::standard_64();
        let p = l.position(l.cz());
        assert!((p[2] - 1.0).abs() < 1e-12);
        let t7 = l.index_of("T7").unwrap();
        assert!((l.arc_distance(l.cz(), t7) - 72f64.to_radians()).abs() < 1e-12);
    }
}
