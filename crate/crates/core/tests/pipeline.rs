use entret_core::eval::Metric;
use entret_core::pipeline::{build_index, run_ablation, run_queries, AblationConfig, ProjectionSetup};
use entret_core::projection::TripletConfig;
use entret_core::represent::{synth_generate, SynthConfig};
use entret_core::{Error, MentionToken, RepresentationKey};

fn small_setup() -> ProjectionSetup {
    let mut s = ProjectionSetup {
        hidden: 64,
        output: 500,
        triplets: TripletConfig {
            per_type: 60,
            ..TripletConfig::default()
        },
        ..ProjectionSetup::default()
    };
    s.train.batch_size = 64;
    s.seeded(2)
}

#[test]
fn span_variants_beat_eos_variants() {
    let d = synth_generate(&SynthConfig {
        num_types: 10,
        mentions_per_type: 12,
        ..SynthConfig::default()
    })
    .unwrap();
    let queries = d.queries(d.types[7..].iter().map(|t| t.label.as_str()));
    let cfg = AblationConfig {
        selected: "17:attn.v".parse().unwrap(),
        last: "31:block.out".parse().unwrap(),
        k: 50,
        min_score: None,
        projection: small_setup(),
    };
    let out = run_ablation(&d.corpus, &d.store, &queries, &cfg).unwrap();
    assert_eq!(out.variants.len(), 8);
    assert_eq!(out.training.len(), 4);
    assert_eq!(out.report.significance.len(), 7);
    let r = |name: &str| out.report.system(name).unwrap().macro_mean(Metric::RPrecision).unwrap();
    for mlp in ["mlp", "raw"] {
        assert!(r(&format!("17:attn.v/span/{mlp}")) > r(&format!("17:attn.v/eos/{mlp}")));
    }
    assert!(r("17:attn.v/span/raw") > r("31:block.out/span/raw"));

    let raw_dim = out
        .variants
        .iter()
        .find(|(v, _)| !v.mlp)
        .map(|(v, _)| d.store.dim(&v.key).unwrap());
    assert_eq!(raw_dim, Some(1024));
}

#[test]
fn raw_index_keeps_key_dimension() {
    let d = synth_generate(&SynthConfig {
        num_types: 3,
        mentions_per_type: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let key: RepresentationKey = "31:block.out".parse().unwrap();
    let idx = build_index(&d.corpus, &d.store, &key, MentionToken::SpanEnd, None).unwrap();
    assert_eq!(idx.dim(), 256);
    assert!(matches!(idx.to_bytes(), Err(Error::UnsupportedIndexDim { .. })));
    let q = d.queries([d.types[0].label.as_str()]);
    let res = run_queries(&idx, &d.store, &key, None, &q, 5, None).unwrap();
    assert_eq!(res[0].ranking.len(), 5);
}

#[test]
fn ablation_needs_eos_records() {
    let d = synth_generate(&SynthConfig {
        num_types: 4,
        mentions_per_type: 4,
        emit_eos: false,
        ..SynthConfig::default()
    })
    .unwrap();
    let queries = d.queries([d.types[3].label.as_str()]);
    let cfg = AblationConfig {
        selected: "17:attn.v".parse().unwrap(),
        last: "31:block.out".parse().unwrap(),
        k: 10,
        min_score: None,
        projection: small_setup(),
    };
    assert!(matches!(
        run_ablation(&d.corpus, &d.store, &queries, &cfg),
        Err(Error::MissingVariantData(_))
    ));
}
