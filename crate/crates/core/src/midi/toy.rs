//! Small procedural piano pieces for tests, benches and the bundled toy set.
//!
//! Each piece repeats a short scale-degree motif with light variation, so a
//! tiny model can pick up per-piece regularities (register, loudness, tempo).

use rand::Rng;

use super::{Note, NoteSequence};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyStyle {
    /// MIDI pitch of the scale root.
    pub root: u8,
    pub minor: bool,
    /// Mean velocity; individual notes vary by about ±6.
    pub velocity: u8,
    /// Seconds between successive onsets.
    pub step: f64,
    /// Fraction of `step` a note sounds for.
    pub legato: f64,
    /// Probability of adding a third above a melody note.
    pub chord_prob: f64,
}

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [i32; 7] = [0, 2, 3, 5, 7, 8, 10];

fn degree_pitch(style: &ToyStyle, degree: i32) -> u8 {
    let scale = if style.minor { &MINOR } else { &MAJOR };
    let octave = degree.div_euclid(7);
    let pc = scale[degree.rem_euclid(7) as usize];
    (i32::from(style.root) + 12 * octave + pc).clamp(0, 127) as u8
}

/// Generates `n_notes` melody notes (plus optional chord tones) in `style`.
pub fn piece(style: &ToyStyle, n_notes: usize, seed: u64) -> NoteSequence {
    let mut rng = seed::rng(seed);
    let motif: Vec<i32> = (0..8).map(|_| rng.random_range(-3..=5)).collect();
    let mut notes = Vec::with_capacity(n_notes * 2);
    let mut t = 0.0;
    let mut transpose = 0;
    for i in 0..n_notes {
        if i % motif.len() == 0 && i > 0 {
            transpose = rng.random_range(-2..=2);
        }
        let mut degree = motif[i % motif.len()] + transpose;
        if rng.random_bool(0.15) {
            degree += rng.random_range(-1..=1);
        }
        let pitch = degree_pitch(style, degree);
        let vel = (i32::from(style.velocity) + rng.random_range(-6..=6)).clamp(1, 127) as u8;
        let dur = style.step * style.legato;
        notes.push(Note { pitch, velocity: vel, onset: t, offset: t + dur });
        if rng.random_bool(style.chord_prob) {
            let third = degree_pitch(style, degree + 2);
            notes.push(Note { pitch: third, velocity: vel, onset: t, offset: t + dur });
        }
        t += style.step;
    }
    NoteSequence::new(notes, 480, String::new())
}

/// The eight styles behind the bundled toy MIDI set.
pub fn toy_styles() -> Vec<ToyStyle> {
    vec![
        ToyStyle { root: 60, minor: false, velocity: 80, step: 0.25, legato: 0.9, chord_prob: 0.1 },
        ToyStyle { root: 57, minor: true, velocity: 56, step: 0.4, legato: 0.95, chord_prob: 0.3 },
        ToyStyle { root: 67, minor: false, velocity: 100, step: 0.15, legato: 0.6, chord_prob: 0.0 },
        ToyStyle { root: 48, minor: true, velocity: 44, step: 0.5, legato: 1.0, chord_prob: 0.4 },
        ToyStyle { root: 72, minor: false, velocity: 72, step: 0.2, legato: 0.5, chord_prob: 0.05 },
        ToyStyle { root: 53, minor: false, velocity: 64, step: 0.3, legato: 0.8, chord_prob: 0.2 },
        ToyStyle { root: 62, minor: true, velocity: 92, step: 0.18, legato: 0.7, chord_prob: 0.15 },
        ToyStyle { root: 45, minor: false, velocity: 36, step: 0.6, legato: 1.0, chord_prob: 0.5 },
    ]
}

/// Two well-separated style clusters, `A` (loud, high, fast) and `B` (soft,
/// low, slow), with per-piece jitter so features vary inside a cluster.
pub fn cluster_style(cluster_b: bool, rng: &mut impl Rng) -> ToyStyle {
    if cluster_b {
        ToyStyle {
            root: rng.random_range(40..=50),
            minor: true,
            velocity: rng.random_range(30..=50),
            step: rng.random_range(0.35..0.55),
            legato: 1.0,
            chord_prob: 0.3,
        }
    } else {
        ToyStyle {
            root: rng.random_range(68..=78),
            minor: false,
            velocity: rng.random_range(88..=112),
            step: rng.random_range(0.1..0.18),
            legato: 0.6,
            chord_prob: 0.0,
        }
    }
}
