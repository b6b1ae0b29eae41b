//! Synthetic inputs shared by the benchmarks.

use medtrust_core::corpus::{Document, Source};
use medtrust_core::retrieval::RankedList;
use medtrust_core::verdict::{render_verdict, CiteStatement, Verdict};

const VOCAB: [&str; 16] = [
    "heart", "renal", "failure", "acute", "chronic", "dose", "insulin", "beta", "blocker", "sepsis", "lactate",
    "stroke", "aspirin", "warfarin", "anemia", "ferritin",
];

/// Deterministic pseudo-random word stream (xorshift).
struct Words(u64);

impl Iterator for Words {
    type Item = &'static str;
    fn next(&mut self) -> Option<Self::Item> {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        Some(VOCAB[(self.0 % VOCAB.len() as u64) as usize])
    }
}

pub fn corpus(n: usize, words_per_doc: usize) -> Vec<Document> {
    let mut w = Words(0x9E37_79B9_7F4A_7C15);
    (0..n)
        .map(|i| Document {
            doc_id: format!("d{i:06}"),
            title: w.by_ref().take(3).collect::<Vec<_>>().join(" "),
            text: w.by_ref().take(words_per_doc).collect::<Vec<_>>().join(" "),
            source: Source::Other,
        })
        .collect()
}

/// `lists` rankings over a shared pool of `len` ids, each rotated.
pub fn ranked_lists(lists: usize, len: usize) -> Vec<RankedList> {
    (0..lists)
        .map(|l| {
            let entries = (0..len).map(|r| (format!("d{:06}", (r * (l + 1) + l * 7) % (len * 2)), -(r as f64))).collect::<Vec<_>>();
            let mut seen = std::collections::HashSet::new();
            let entries = entries.into_iter().filter(|(d, _)| seen.insert(d.clone())).collect();
            RankedList::new(format!("r{l}"), entries).expect("valid ranking")
        })
        .collect()
}

pub fn verdict_text(statements: usize) -> String {
    let mut w = Words(7);
    let v = Verdict::CiteReason {
        statements: (0..statements)
            .map(|i| CiteStatement {
                text: w.by_ref().take(12).collect::<Vec<_>>().join(" "),
                citations: vec![i % 5 + 1, (i + 2) % 5 + 1],
            })
            .collect(),
    };
    render_verdict(&v)
}
