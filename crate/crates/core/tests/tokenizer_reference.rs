use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use groundkit::bundle::TokenizerData;
use groundkit::tokenizer::{vocab_from_merges, Tokenizer};
use serde::Deserialize;

#[derive(Deserialize)]
struct Reference {
    context_length: usize,
    phrases: Vec<Phrase>,
}

#[derive(Deserialize)]
struct Phrase {
    text: String,
    ids: Vec<u32>,
}

fn fixtures() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

/// The shipped merges file: a version line, then the first
/// `49152 - 256 - 2` merge pairs are used.
fn real_tokenizer_data() -> TokenizerData {
    let mut text = String::new();
    GzDecoder::new(std::fs::File::open(fixtures().join("bpe_simple_vocab_16e6.txt.gz")).unwrap())
        .read_to_string(&mut text)
        .unwrap();
    let merges: Vec<(String, String)> = text
        .lines()
        .skip(1)
        .take(49152 - 256 - 2)
        .map(|l| {
            let (a, b) = l.split_once(' ').unwrap();
            (a.to_string(), b.to_string())
        })
        .collect();
    vocab_from_merges(&merges)
}

fn reference() -> Reference {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join("tokenizer_reference.json")).unwrap()).unwrap()
}

#[test]
fn ids_match_the_reference_tokenizer() {
    let tok = Tokenizer::from_data(&real_tokenizer_data()).unwrap();
    let r = reference();
    assert_eq!(r.phrases.len(), 20);
    assert_eq!(tok.vocab_size(), 49408);
    assert_eq!((tok.sot_id(), tok.eot_id()), (49406, 49407));
    let mut mismatches = Vec::new();
    for p in &r.phrases {
        let got = tok.tokenize(&p.text).unwrap();
        assert_eq!(got.ids.len(), r.context_length);
        if got.ids != p.ids {
            mismatches.push(format!("{:?}: got {:?}", p.text, got.trimmed().ids));
        }
    }
    assert!(mismatches.is_empty(), "{mismatches:#?}");
}

#[test]
fn cat_caption_ids() {
    let tok = Tokenizer::from_data(&real_tokenizer_data()).unwrap();
    let seq = tok.tokenize("a photo of a cat").unwrap();
    assert_eq!(seq.trimmed().ids, vec![49406, 320, 1125, 539, 320, 2368, 49407]);
    assert_eq!(seq.eot_position(), Some(6));
}
