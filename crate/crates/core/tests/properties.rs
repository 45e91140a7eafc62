//! Property tests. Each checks the library against a small independent oracle.

use std::collections::HashMap;
use std::sync::Arc;

use proptest::prelude::*;

use rcg_core::analysis::{lcs_len, rouge_l, rouge_tokens};
use rcg_core::embed::{cosine, l2_norm, test_embed, EmbeddingMatrix, TestEmbedder};
use rcg_core::index::{FlatIndex, VectorIndex};
use rcg_core::ingest::{split, Document, PassageStore, SplitUnit, SplitterConfig};
use rcg_core::prompt::{assemble, PromptCatalog, PromptSet};
use rcg_core::retrieval::{apply_epw, select_kb, KnowledgeBase, RetrievalConfig, RetrievalMode};

fn cfg() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            "[a-zA-Z0-9]{1,8}",
            Just(" ".to_string()),
            Just("\n".to_string()),
            Just("  \t".to_string()),
            "[äöü日本]{1,3}",
            Just(".".to_string()),
        ],
        0..80,
    )
    .prop_map(|parts| parts.concat())
}

/// LCS by memoised recursion over suffixes; deliberately unlike the table version.
fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo.get(&(i, j)) {
            return *v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

fn norm_tokens(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|t| {
            let lower = t.to_lowercase();
            let chars: Vec<char> = lower.chars().collect();
            let lo = chars.iter().position(|c| c.is_alphanumeric());
            let hi = chars.iter().rposition(|c| c.is_alphanumeric());
            match (lo, hi) {
                (Some(lo), Some(hi)) => chars[lo..=hi].iter().collect(),
                _ => String::new(),
            }
        })
        .filter(|t| !t.is_empty())
        .collect()
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn passages_match_their_offsets(text in text_strategy(), chunk in 1usize..12, overlap_frac in 0usize..100, words in any::<bool>()) {
        let overlap = (chunk - 1) * overlap_frac / 100;
        let unit = if words { SplitUnit::Word } else { SplitUnit::Character };
        let c = SplitterConfig::new(chunk, overlap, unit);
        let doc = Document::new("d", text.clone());
        let ps = split(&doc, &c).unwrap();
        let chars: Vec<char> = text.chars().collect();
        for (i, p) in ps.iter().enumerate() {
            prop_assert_eq!(p.ordinal as usize, i);
            let slice: String = chars[p.char_start as usize..p.char_end as usize].iter().collect();
            prop_assert_eq!(&p.text, &slice);
            match unit {
                SplitUnit::Word => prop_assert!(p.text.split_whitespace().count() <= chunk),
                SplitUnit::Character => prop_assert!(p.text.chars().count() <= chunk),
            }
        }
        if overlap == 0 {
            let joined: String = ps.iter().map(|p| p.text.as_str()).collect();
            let has_content = match unit {
                SplitUnit::Word => text.split_whitespace().next().is_some(),
                SplitUnit::Character => !text.is_empty(),
            };
            prop_assert_eq!(joined, if has_content { text.clone() } else { String::new() });
        }
    }

    #[test]
    fn test_embedder_is_unit_deterministic_symmetric(a in text_strategy(), b in text_strategy()) {
        let va = test_embed(&a, 64);
        prop_assert_eq!(&va, &test_embed(&a, 64));
        prop_assert!((l2_norm(&va) - 1.0).abs() <= 1e-4);
        let vb = test_embed(&b, 64);
        let ab = cosine(&va, &vb).unwrap();
        let ba = cosine(&vb, &va).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-7);
        prop_assert!((-1.0..=1.0 + 1e-6).contains(&ab));
    }

    #[test]
    fn flat_search_matches_full_sort(
        rows in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 8), 1..60),
        q in prop::collection::vec(-1.0f32..1.0, 8),
        k in 1usize..10,
    ) {
        prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
        let mut m = EmbeddingMatrix::new(8);
        let mut unit_rows = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            let n = r.iter().map(|x| x * x).sum::<f32>().sqrt();
            let u: Vec<f32> = if n > 0.0 { r.iter().map(|x| x / n).collect() } else { r.clone() };
            m.push(i.to_string(), &u).unwrap();
            unit_rows.push(m.row(i).to_vec());
        }
        let idx = FlatIndex::build(m);
        let hits = idx.search(&q, k).unwrap();

        let qn = q.iter().map(|x| x * x).sum::<f32>().sqrt();
        let qu: Vec<f32> = q.iter().map(|x| x / qn).collect();
        let mut all: Vec<(f32, usize)> = unit_rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(&qu).map(|(a, b)| a * b).sum::<f32>(), i))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        prop_assert_eq!(hits.len(), k.min(rows.len()));
        for (h, (s, i)) in hits.iter().zip(&all) {
            prop_assert!((h.score - s).abs() < 1e-5);
            // Accept swaps only between numerically tied scores.
            if h.row != *i {
                prop_assert!((unit_rows[h.row].iter().zip(&qu).map(|(a, b)| a * b).sum::<f32>() - s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn epw_prefix_monotone(passages in prop::collection::vec(text_strategy(), 0..6)) {
        let full: Vec<String> = passages.iter().map(|p| p.trim().to_string()).collect::<Vec<_>>().join("\n")
            .split_whitespace().map(str::to_string).collect();
        let mut prev: Vec<String> = Vec::new();
        for w in (0..=100u8).step_by(10) {
            let toks: Vec<String> = apply_epw(&passages, w).split_whitespace().map(str::to_string).collect();
            prop_assert_eq!(toks.len(), (full.len() * w as usize).div_ceil(100));
            prop_assert_eq!(&toks[..], &full[..toks.len()]);
            prop_assert!(toks.starts_with(&prev));
            prev = toks;
        }
    }

    #[test]
    fn assembly_is_plain_concatenation(
        slots in prop::collection::vec(".{0,12}", 5),
        knowledge in ".{0,20}",
        query in ".{0,20}",
    ) {
        let ps = PromptSet {
            ai_prefix: slots[0].clone(),
            retriever_prefix: slots[1].clone(),
            retriever_suffix: slots[2].clone(),
            model_prefix: slots[3].clone(),
            model_suffix: slots[4].clone(),
        };
        let expected = format!("{}{}{}{}{}{}{}", slots[0], slots[1], knowledge, slots[2], slots[3], query, slots[4]);
        prop_assert_eq!(assemble(&ps, &knowledge, &query), expected);
    }

    #[test]
    fn catalog_round_trip_is_byte_exact(name in "[a-z-]{1,10}", slot in "(.|\n|\r|\t){0,24}") {
        let mut cat = PromptCatalog::default();
        cat.insert(name.clone(), PromptSet { retriever_suffix: slot.clone(), ..Default::default() });
        let text = cat.to_text();
        let back = PromptCatalog::from_text(&text).unwrap();
        prop_assert_eq!(&back.get(&name).unwrap().retriever_suffix, &slot);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn rouge_matches_lcs_oracle(a in text_strategy(), b in text_strategy()) {
        let s = rouge_l(&a, &b);
        let (ta, tb) = (norm_tokens(&a), norm_tokens(&b));
        let lcs = lcs_oracle(&ta, &tb) as f64;
        let f1 = if lcs == 0.0 { 0.0 } else {
            let p = lcs / ta.len() as f64;
            let r = lcs / tb.len() as f64;
            2.0 * p * r / (p + r)
        };
        prop_assert!((s.f1 - f1).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&s.f1));
        prop_assert!((rouge_l(&b, &a).f1 - s.f1).abs() <= 1e-12);
        if !ta.is_empty() {
            prop_assert_eq!(rouge_l(&a, &a).f1, 1.0);
        }
        let (xa, xb) = (a.clone() + " shared tail", b.clone() + " shared tail");
        prop_assert!(lcs_len(&rouge_tokens(&xa), &rouge_tokens(&xb)) >= lcs_len(&rouge_tokens(&a), &rouge_tokens(&b)));
    }

    #[test]
    fn mokb_is_bruteforce_argmax(
        descs in prop::collection::vec(prop_oneof!["[a-e]{1,3}( [a-e]{1,3}){0,3}", Just("a b".to_string())], 1..12),
        query in "[a-e]{1,3}( [a-e]{1,3}){0,3}",
    ) {
        let e = TestEmbedder::with_dim(16);
        let kbs: Vec<Arc<KnowledgeBase>> = descs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                Arc::new(
                    KnowledgeBase::new(
                        format!("kb{i}"), "n", d.clone(),
                        PassageStore::default(),
                        VectorIndex::Flat(FlatIndex::build(EmbeddingMatrix::new(16))),
                        &e,
                    )
                    .unwrap(),
                )
            })
            .collect();
        let rc = RetrievalConfig { mode: RetrievalMode::Mokb, ..Default::default() };
        let got = select_kb(&query, &kbs, &rc, &e).unwrap().unwrap();
        let qv = test_embed(&query, 16);
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, d) in descs.iter().enumerate() {
            let dv = test_embed(d, 16);
            let s = cosine(&qv, &dv).unwrap() as f64;
            if s > best.1 {
                best = (i, s);
            }
        }
        prop_assert_eq!(got, format!("kb{}", best.0));
    }
}
