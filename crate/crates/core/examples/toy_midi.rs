//! Writes the bundled toy MIDI set: `cargo run --example toy_midi -- <dir>`.

use std::path::PathBuf;

use cadenza::midi::{toy, write_midi};

const NAMES: [&str; 8] = [
    "c-major-bright",
    "a-minor-slow",
    "g-major-staccato",
    "c-minor-low",
    "c-major-high",
    "f-major-flowing",
    "d-minor-driving",
    "a-major-deep",
];

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/toy_midi".into()));
    std::fs::create_dir_all(&dir)?;
    for (i, (style, name)) in toy::toy_styles().iter().zip(NAMES).enumerate() {
        let seq = toy::piece(style, 320, 1000 + i as u64);
        let path = dir.join(format!("{:02}-{name}.mid", i + 1));
        std::fs::write(&path, write_midi(&seq.notes, 480, 500_000))?;
        println!("{} ({} notes)", path.display(), seq.notes.len());
    }
    Ok(())
}
