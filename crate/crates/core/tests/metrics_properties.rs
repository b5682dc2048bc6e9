use std::collections::BTreeMap;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadm_core::canvas::{generate_canvas_mask, CanvasMask, RgbImage, ShapeFamily};
use sadm_core::denoiser::PromptId;
use sadm_core::metrics::{
    build_prototypes, histograd_embed, m_sim_ext, m_sim_int, member_view, style_consistency, CaseScore, Embedder,
    HistoGrad, PrototypeTable, ScoreReport, MIN_PROTOTYPE_MEMBERS,
};
use sadm_core::synthdata::{generate_dataset, make_triplet, item_seed};

#[test]
fn held_out_images_retrieve_their_own_class() {
    let train = generate_dataset(0, 2048).unwrap();
    let protos = build_prototypes(&HistoGrad, &train, MIN_PROTOTYPE_MEMBERS).unwrap();
    let n = 1000;
    let hits = (0..n)
        .filter(|&i| {
            let t = make_triplet(item_seed(0xBEEF, i)).unwrap();
            protos.nearest(&histograd_embed(&member_view(&t))) == t.label.prompt()
        })
        .count();
    let rate = hits as f64 / n as f64;
    assert!(rate >= 0.9, "self-retrieval {rate}");
}

fn random_image(rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::new(32, 32, (0..32 * 32 * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn style_consistency_is_mean_of_pairwise_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let imgs: Vec<RgbImage> = (0..4).map(|_| random_image(&mut rng)).collect();
    let es: Vec<Vec<f64>> = imgs.iter().map(|i| histograd_embed(i).data).collect();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut pairs = Vec::new();
    for i in 0..4 {
        for j in i + 1..4 {
            pairs.push(cos(&es[i], &es[j]));
        }
    }
    assert_eq!(pairs.len(), 6);
    let oracle = pairs.iter().sum::<f64>() / 6.0;
    let got = style_consistency(&HistoGrad, &imgs.iter().collect::<Vec<_>>()).unwrap();
    assert!((got - oracle).abs() <= 1e-6, "{got} vs {oracle}");

    let copies = [&imgs[0], &imgs[0], &imgs[0]];
    assert_eq!(style_consistency(&HistoGrad, &copies).unwrap(), 1.0);
}

#[test]
fn report_aggregates_match_independent_reaggregation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cats = ["animal", "material", "nature", "food", "other"];
    let langs = ["en", "zh", "ja", "ko"];
    let cases: Vec<CaseScore> = (0..145)
        .map(|i| {
            let skipped = rng.random_bool(0.1);
            let opt = |rng: &mut ChaCha8Rng| (!skipped).then(|| rng.random_range(-1.0..1.0));
            CaseScore {
                index: i,
                characters: format!("c{i}"),
                category: cats[rng.random_range(0..cats.len())].into(),
                language: langs[rng.random_range(0..langs.len())].into(),
                m_sim_int: opt(&mut rng),
                m_sim_ext: opt(&mut rng),
                style_consistency: opt(&mut rng),
                skipped: skipped.then(|| "missing mask".to_string()),
            }
        })
        .collect();
    let report = ScoreReport::from_cases(cases.clone());

    // Re-aggregate from the serialized report rows, by summing per key.
    let json: serde_json::Value = serde_json::to_value(&report).unwrap();
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for row in json["cases"].as_array().unwrap() {
        if !row["skipped"].is_null() {
            continue;
        }
        for key in ["category", "language"] {
            let group = row[key].as_str().unwrap().to_string();
            for metric in ["m_sim_int", "m_sim_ext", "style_consistency"] {
                let e = sums.entry((format!("{key}:{group}"), metric.into())).or_default();
                e.0 += row[metric].as_f64().unwrap();
                e.1 += 1;
            }
        }
        for metric in ["m_sim_int", "m_sim_ext", "style_consistency"] {
            let e = sums.entry(("overall".into(), metric.into())).or_default();
            e.0 += row[metric].as_f64().unwrap();
            e.1 += 1;
        }
    }
    let mut checked = 0;
    for ((group, metric), (sum, n)) in &sums {
        let node = if group == "overall" {
            &json["overall"]
        } else {
            let (key, name) = group.split_once(':').unwrap();
            let table = if key == "category" { "by_category" } else { "by_language" };
            &json[table][name]
        };
        let got = node[metric.as_str()].as_f64().unwrap();
        assert!((got - sum / *n as f64).abs() <= 1e-9, "{group} {metric}");
        assert_eq!(node["n_cases"].as_u64().unwrap() as usize, *n);
        checked += 1;
    }
    assert_eq!(checked, 3 * (1 + cats.len() + langs.len()));
}

fn protos() -> &'static PrototypeTable {
    static TABLE: OnceLock<PrototypeTable> = OnceLock::new();
    TABLE.get_or_init(|| build_prototypes(&HistoGrad, &generate_dataset(5, 512).unwrap(), 1).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn interior_and_exterior_scores_are_blind_to_the_other_region(
        img_seed in any::<u64>(), mask_seed in any::<u64>(), class in 0usize..8,
    ) {
        let table = protos();
        let mut rng = ChaCha8Rng::seed_from_u64(img_seed);
        let mask = generate_canvas_mask(mask_seed, 64, 64, ShapeFamily::Ellipse).unwrap();
        let a = RgbImage::new(64, 64, (0..64 * 64 * 3).map(|_| rng.random::<f32>()).collect()).unwrap();
        let b = RgbImage::new(64, 64, (0..64 * 64 * 3).map(|_| rng.random::<f32>()).collect()).unwrap();
        let mix = |inside: &RgbImage, outside: &RgbImage| {
            RgbImage::from_fn(64, 64, |x, y| if mask.get(x, y) { inside.pixel(x, y) } else { outside.pixel(x, y) })
        };
        let p = PromptId(class);
        let int_a = m_sim_int(&HistoGrad, table, &mix(&a, &a), &mask, p).unwrap();
        let int_b = m_sim_int(&HistoGrad, table, &mix(&a, &b), &mask, p).unwrap();
        prop_assert_eq!(int_a, int_b);
        let ext_a = m_sim_ext(&HistoGrad, table, &mix(&a, &a), &mask, p).unwrap();
        let ext_b = m_sim_ext(&HistoGrad, table, &mix(&b, &a), &mask, p).unwrap();
        prop_assert_eq!(ext_a, ext_b);
        for s in [int_a, ext_a] {
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn embedding_is_deterministic_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng);
        let a = HistoGrad.embed(&img);
        let b = HistoGrad.embed(&img);
        prop_assert_eq!(&a.data, &b.data);
        let other = HistoGrad.embed(&random_image(&mut rng));
        let c = a.cosine(&other);
        prop_assert!((-1.0..=1.0).contains(&c));
    }
}

#[test]
fn full_mask_exterior_is_white_baseline() {
    let table = protos();
    let full = CanvasMask::filled(64, 64, true);
    let img = RgbImage::solid(64, 64, [0.2, 0.5, 0.1]);
    let white = RgbImage::white(64, 64);
    let got = m_sim_ext(&HistoGrad, table, &img, &full, PromptId(0)).unwrap();
    let want = histograd_embed(&white).cosine(table.prototype(PromptId(0)).unwrap());
    assert_eq!(got, want);
}
