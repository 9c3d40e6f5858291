//! Query results must agree with an independent brute-force filter.

use todkit_core::formalrep::{DomainIntent, Intent, Relation, SlotConstraint};
use todkit_core::kbstore::{KBRecord, KBResult, KBStore};
use todkit_core::sampling::Sampler;

fn store() -> KBStore {
    KBStore::load(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/kb_en.json")).unwrap()
}

// ---------------------------------------------------------------------------
// Independent matcher, written with plain loops and its own normalization.
// ---------------------------------------------------------------------------

fn fold(s: &str) -> String {
    let mut out = String::new();
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word.to_lowercase());
    }
    out
}

fn first_number(s: &str) -> Option<f64> {
    let mut start = None;
    let bytes = s.as_bytes();
    for (i, b) in bytes.iter().enumerate() {
        if b.is_ascii_digit() {
            start = Some(if i > 0 && bytes[i - 1] == b'-' { i - 1 } else { i });
            break;
        }
    }
    let start = start?;
    let mut end = start;
    let mut seen_dot = false;
    for (i, b) in bytes.iter().enumerate().skip(start) {
        match b {
            b'0'..=b'9' | b'-' => end = i + 1,
            b'.' if !seen_dot => {
                seen_dot = true;
                end = i + 1;
            }
            _ => break,
        }
    }
    s[start..end].trim_end_matches('.').parse().ok()
}

fn brute_matches(record: &KBRecord, constraints: &[SlotConstraint]) -> Option<bool> {
    for c in constraints {
        if c.values.iter().any(|v| fold(v) == "don't care") {
            continue;
        }
        let values = record.attrs.get(&c.slot);
        let ok = match c.relation {
            Relation::EqualTo => values
                .map(|vs| vs.iter().any(|v| fold(v) == fold(&c.values[0])))
                .unwrap_or(false),
            Relation::Not => values
                .map(|vs| !vs.iter().any(|v| fold(v) == fold(&c.values[0])))
                .unwrap_or(true),
            Relation::OneOf => values
                .map(|vs| {
                    vs.iter().any(|v| c.values.iter().any(|cv| fold(v) == fold(cv)))
                })
                .unwrap_or(false),
            Relation::AtLeast | Relation::LessThan => {
                let target = first_number(&c.values[0])?;
                match values {
                    None => false,
                    Some(vs) => {
                        let mut hit = false;
                        for v in vs {
                            let n = first_number(v)?;
                            if (c.relation == Relation::AtLeast && n >= target)
                                || (c.relation == Relation::LessThan && n < target)
                            {
                                hit = true;
                            }
                        }
                        hit
                    }
                }
            }
        };
        if !ok {
            return Some(false);
        }
    }
    Some(true)
}

fn brute_rank(mut names: Vec<(Option<f64>, String)>) -> Option<String> {
    names.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => y.partial_cmp(&x).unwrap().then_with(|| a.1.cmp(&b.1)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.1.cmp(&b.1),
    });
    names.first().map(|(_, n)| n.clone())
}

#[test]
fn query_agrees_with_brute_force_on_random_constraint_sets() {
    let store = store();
    let mut sampler = Sampler::new(0x5eed);
    let mut compared = 0;
    for domain in ["hotels", "restaurants"] {
        let frame = DomainIntent::new(domain, Intent::Search).unwrap();
        let pool: Vec<(String, String)> = store
            .records(domain)
            .iter()
            .flat_map(|r| {
                r.attrs
                    .iter()
                    .flat_map(|(s, vs)| vs.iter().map(move |v| (s.clone(), v.clone())))
            })
            .collect();
        for _ in 0..500 {
            let constraints = sampler.constraints_for_query(&pool);
            let brute: Option<Vec<&KBRecord>> = store
                .records(domain)
                .iter()
                .try_fold(Vec::new(), |mut acc, r| {
                    brute_matches(r, &constraints).map(|ok| {
                        if ok {
                            acc.push(r);
                        }
                        acc
                    })
                });
            match (store.query(&frame, &constraints), brute) {
                (Ok(result), Some(expected)) => {
                    compared += 1;
                    match result {
                        KBResult::NoResult => assert!(
                            expected.is_empty(),
                            "engine says no result, brute force found {expected:?}"
                        ),
                        KBResult::Match { record, available_options } => {
                            assert_eq!(available_options, expected.len());
                            let ranked = brute_rank(
                                expected
                                    .iter()
                                    .map(|r| {
                                        (
                                            r.attrs.get("rating").and_then(|vs| {
                                                first_number(&vs[0])
                                            }),
                                            r.name().to_string(),
                                        )
                                    })
                                    .collect(),
                            );
                            assert_eq!(Some(record.name().to_string()), ranked);
                        }
                    }
                }
                (Err(_), None) => {} // both flag the numeric type mismatch
                (engine, brute) => {
                    panic!("disagreement: engine={engine:?} brute={brute:?}")
                }
            }
        }
    }
    assert!(compared >= 900, "only {compared} comparable cases");
}

#[test]
fn adding_a_constraint_never_increases_available_options() {
    let store = store();
    let frame = DomainIntent::new("hotels", Intent::Search).unwrap();
    let base = vec![SlotConstraint::single("price_level", Relation::EqualTo, "cheap").unwrap()];
    let narrowed = {
        let mut c = base.clone();
        c.push(SlotConstraint::single("stars", Relation::AtLeast, "5").unwrap());
        c
    };
    let count = |constraints: &[SlotConstraint]| match store.query(&frame, constraints).unwrap() {
        KBResult::Match { available_options, .. } => available_options,
        KBResult::NoResult => 0,
    };
    assert!(count(&narrowed) <= count(&base));
    let mut sampler = Sampler::new(77);
    let pool: Vec<(String, String)> = store
        .records("hotels")
        .iter()
        .flat_map(|r| {
            r.attrs.iter().flat_map(|(s, vs)| vs.iter().map(move |v| (s.clone(), v.clone())))
        })
        .collect();
    for _ in 0..200 {
        let constraints = sampler.constraints_for_query(&pool);
        if store.query(&frame, &constraints).is_err() {
            continue;
        }
        for keep in 0..constraints.len() {
            let subset: Vec<SlotConstraint> = constraints
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != keep)
                .map(|(_, c)| c.clone())
                .collect();
            if store.query(&frame, &subset).is_err() {
                continue;
            }
            assert!(count(&constraints) <= count(&subset));
        }
    }
}
