//! Load raw Memotion- and MAMI-shaped tables, print per-label statistics,
//! and write the canonical JSON-lines corpus.
//!
//! ```text
//! cargo run --example ingest_stats
//! ```

use std::path::Path;

use memescope::corpus::{self, ColumnMap, Corpus, TaskId};

pub fn main() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");

    let memotion = corpus::load(&fixtures.join("memotion_sample.csv"), &ColumnMap::memotion_default())
        .expect("fixture loads");
    for task in memotion.tasks() {
        print!("{}", corpus::compute_stats(&memotion, *task).expect("task present"));
    }

    let mami = corpus::load(&fixtures.join("mami_sample.tsv"), &ColumnMap::mami_default()).expect("fixture loads");
    print!("{}", corpus::compute_stats(&mami, TaskId::MGT).expect("task present"));

    // a custom layout: same columns, different names, semicolon separated
    let custom = ColumnMap::from_toml_str(
        r#"
        dataset = "Memotion"
        delimiter = ";"
        id = "uid"
        image = "img"
        caption = "txt"
        labels = { HM = "h", SR = "s", OF = "o", SN = "sent", MV = "m" }
        aliases = { SN = { "very_positive" = "positive", "very_negative" = "negative" } }
        "#,
    )
    .expect("column map parses");
    let dir = tempfile::tempdir().expect("temp dir");
    let raw = dir.path().join("custom.csv");
    std::fs::write(
        &raw,
        "uid;img;txt;h;s;o;sent;m\n\
         a1;a1.png;when the build passes;funny;general;slight;Very Positive;motivational\n\
         a2;a2.png;monday again;not funny;not sarcastic;not offensive;negative;not_motivational\n",
    )
    .expect("write");
    let custom_corpus = corpus::load(&raw, &custom).expect("custom layout loads");
    println!("custom layout: {} samples, a1 sentiment = {}", custom_corpus.len(), custom_corpus.get("a1").unwrap().gold[&TaskId::SN]);

    // a bad label is reported with its row, not silently dropped
    std::fs::write(&raw, "uid;img;txt;h;s;o;sent;m\nb1;b1.png;x;ecstatic;general;slight;positive;motivational\n").unwrap();
    if let Err(e) = corpus::load(&raw, &custom) {
        for line in e.diagnostics() {
            println!("rejected: {line}");
        }
    }

    let out = dir.path().join("memotion.jsonl");
    memotion.write_jsonl(&out).expect("write corpus");
    assert_eq!(Corpus::read_jsonl(&out).expect("read corpus"), memotion);
    println!("canonical corpus round-trips through {}", out.file_name().unwrap().to_string_lossy());
}
