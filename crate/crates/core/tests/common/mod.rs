#![allow(dead_code)]

use lateral::leafpipe::{PipelineConfig, RawInstance, RawItem, Stage};
use lateral::seqcore::PatchGrid;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

const WORDS: [&str; 64] = [
    "amber", "basket", "candle", "donkey", "ember", "falcon", "garden", "harbor", "island",
    "jacket", "kettle", "ladder", "meadow", "needle", "orchard", "pebble", "quarry", "ribbon",
    "saddle", "tunnel", "umbrella", "valley", "walnut", "yarrow", "zephyr", "anchor", "bramble",
    "canyon", "dagger", "easel", "fender", "goblet", "hammock", "inkwell", "jigsaw", "kernel",
    "lantern", "marble", "nectar", "oyster", "parsley", "quiver", "rudder", "spindle", "thimble",
    "urchin", "velvet", "wicker", "yeoman", "zinnia", "acorn", "bobbin", "cobble", "dimple",
    "eyelet", "fiddle", "gravel", "hinge", "icicle", "juniper", "kayak", "locket", "mitten",
    "nutmeg",
];

pub fn sentences(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let w: Vec<&str> = (0..4).map(|k| WORDS[(4 * i + k) % WORDS.len()]).collect();
            format!(
                "The {} sat by the {} with a {} and {}.",
                w[0], w[1], w[2], w[3]
            )
        })
        .collect()
}

pub fn flat(v: f64) -> PatchGrid {
    PatchGrid::new(2, 2, 2, vec![v; 8]).unwrap()
}

/// 5x5x1 grid that is 1 on `on` and 0 elsewhere.
pub fn indicator(on: &[usize]) -> PatchGrid {
    let mut d = vec![0.0; 25];
    for &i in on {
        d[i] = 1.0;
    }
    PatchGrid::new(5, 5, 1, d).unwrap()
}

pub fn doc(id: &str, text: Vec<String>, images: Vec<PatchGrid>) -> RawInstance {
    let mut items = Vec::new();
    let mut imgs = images.into_iter();
    for (i, s) in text.into_iter().enumerate() {
        items.push(RawItem::Sentence(s));
        if i % 2 == 0 {
            items.extend(imgs.next().map(RawItem::Image));
        }
    }
    items.extend(imgs.map(RawItem::Image));
    RawInstance {
        source_id: id.into(),
        domain: Some("fixture".into()),
        items,
    }
}

pub fn flats(vs: &[f64]) -> Vec<PatchGrid> {
    vs.iter().map(|&v| flat(v)).collect()
}

/// Configuration the labeled fixture is written against: defaults plus the
/// coherence stage enabled.
pub fn fixture_config() -> PipelineConfig {
    PipelineConfig {
        coherence_threshold: Some(0.45),
        ..Default::default()
    }
}

/// Twenty instances; `clean-*` ids must be accepted, `bad-<stage>-*` ids
/// must be rejected at that stage.
pub fn labeled_fixture() -> Vec<RawInstance> {
    let (s1, s2, s3) = (
        (0..10).collect::<Vec<_>>(),
        (6..16).collect::<Vec<_>>(),
        (0..4).chain(12..18).collect::<Vec<_>>(),
    );
    let mut repeated = sentences(3);
    repeated.push(repeated[0].clone());
    let mut terse = sentences(3);
    terse[1] = "Too short.".into();
    let dup_065 = (1.0 - 0.65) / (1.0 + 0.65);
    vec![
        doc("clean-01", sentences(3), flats(&[1.0, 0.9, 0.8])),
        doc(
            "clean-02-six-images",
            sentences(4),
            flats(&[1.0, 0.95, 0.9, 0.85, 0.8, 0.75]),
        ),
        doc(
            "clean-03-twelve-sentences",
            sentences(12),
            flats(&[1.0, 0.9, 0.9, 0.8]),
        ),
        doc("clean-04", sentences(1), flats(&[0.5, 0.6, 0.7, 0.8, 0.9])),
        doc(
            "clean-05-pair-at-threshold",
            sentences(2),
            flats(&[1.0, 1.0, 0.25]),
        ),
        doc("clean-06-identical", sentences(5), flats(&[0.7; 4])),
        doc("clean-07", sentences(8), flats(&[-1.0, -0.8, -0.9])),
        doc(
            "clean-08",
            sentences(6),
            flats(&[2.0, 1.5, 1.8, 1.6, 1.7, 1.9]),
        ),
        doc(
            "clean-09-three-images",
            sentences(2),
            flats(&[0.3, 0.35, 0.4]),
        ),
        doc("clean-10", sentences(10), flats(&[1.2, 1.1, 1.0, 0.9, 1.3])),
        doc("bad-image_count-none", sentences(3), vec![]),
        doc("bad-image_count-two", sentences(3), flats(&[1.0, 0.9])),
        doc("bad-image_count-seven", sentences(3), flats(&[1.0; 7])),
        doc(
            "bad-text_length-thirteen",
            sentences(13),
            flats(&[1.0, 0.9, 0.8]),
        ),
        doc(
            "bad-text_length-twenty",
            sentences(20),
            flats(&[1.0, 0.9, 0.8]),
        ),
        doc(
            "bad-coherence-spread",
            sentences(3),
            vec![indicator(&s1), indicator(&s2), indicator(&s3)],
        ),
        doc("bad-text_quality-repeat", repeated, flats(&[1.0, 0.9, 0.8])),
        doc("bad-text_quality-terse", terse, flats(&[1.0, 0.9, 0.8])),
        doc(
            "bad-duplicate-pair-065",
            sentences(3),
            flats(&[1.0, 0.95, dup_065]),
        ),
        doc(
            "bad-duplicate-one-of-three",
            sentences(3),
            flats(&[1.0, 0.5, 0.2]),
        ),
    ]
}

pub fn expected_stage(id: &str) -> Option<Stage> {
    let rest = id.strip_prefix("bad-")?;
    Some(match rest.split('-').next().unwrap() {
        "image_count" => Stage::ImageCount,
        "text_length" => Stage::TextLength,
        "coherence" => Stage::Coherence,
        "text_quality" => Stage::TextQuality,
        "duplicate" => Stage::Duplicate,
        other => panic!("unknown label {other}"),
    })
}

/// Minimal HTTP judge stub: answers every POST with `{"text": reply(prompt)}`.
/// Returns the endpoint URL.
pub fn spawn_judge_stub(reply: fn(&str) -> String) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                if let Some(v) = l.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0u8; len];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
            let prompt = req["prompt"].as_str().unwrap_or_default();
            let out = serde_json::json!({ "text": reply(prompt) }).to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                out.len(),
                out
            );
        }
    });
    format!("http://{addr}/judge")
}
