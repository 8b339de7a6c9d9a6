//! Overfits the small architecture on eight synthetic lines and prints the
//! training curve. Usage: `cargo run --release --example overfit -- [epochs] [lr] [batch]`.

use std::time::Instant;

use kalchas::dataset::{render_line, sample_from_image, GlyphAtlas, RenderStyle};
use kalchas::model::{ArchConfig, CrnnModel};
use kalchas::train::{evaluate, train, TrainConfig};
use kalchas::Charset;

const LINES: [&str; 8] = [
    "γνῶθι σεαυτόν.",
    "μηδὲν ἄγαν.",
    "χαλεπὰ τὰ καλά.",
    "ἀρχὴ ἥμισυ παντός.",
    "ἡ ψυχὴ τοῦ ἀνθρώπου ἀθάνατος.",
    "πάντα ῥεῖ καὶ οὐδὲν μένει.",
    "ἓν οἶδα ὅτι οὐδὲν οἶδα.",
    "ὁ βίος βραχύς, ἡ δὲ τέχνη μακρή.",
];

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let batch = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let atlas = GlyphAtlas::polytonic();
    let cs = Charset::polytonic();
    let model = CrnnModel::<f32>::build(ArchConfig::small(cs.size()), cs.clone(), 0).unwrap();
    let samples: Vec<_> = LINES
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let r = render_line(&atlas, t, &RenderStyle::default(), i as u64).unwrap();
            sample_from_image(&format!("line{i}"), &r.image, t, &cs, model.timesteps()).unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        epochs,
        batch_size: batch,
        learning_rate: lr,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(model, &samples, &[], &cfg, &mut |p| {
        println!("{:4} loss {:8.4} cer {:.4} ({:.0}s)", p.epoch, p.train_loss, p.train_cer, start.elapsed().as_secs_f64())
    })
    .unwrap();
    let (loss, rate, hyps) = evaluate(&out.model, &samples).unwrap();
    println!("final loss {loss:.4} cer {rate:.4}");
    for (h, t) in hyps.iter().zip(LINES) {
        println!("{t} -> {h}");
    }
}
