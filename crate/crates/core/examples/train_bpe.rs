//! Regenerates `assets/bpe_merges.txt` from `assets/bpe_corpus.txt`.
//!
//! cargo run -p grain --example train_bpe

use grain::tokenizer::{format_merges, train_merges};

const N_MERGES: usize = 600;

fn main() -> std::io::Result<()> {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets");
    let corpus = std::fs::read_to_string(root.join("bpe_corpus.txt"))?;
    let merges = train_merges(&corpus, N_MERGES);
    std::fs::write(root.join("bpe_merges.txt"), format_merges(&merges))?;
    println!("wrote {} merges", merges.len());
    Ok(())
}
