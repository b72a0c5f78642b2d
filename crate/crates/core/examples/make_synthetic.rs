//! Writes the synthetic card corpus used by `make demo`.
//!
//! Usage: make_synthetic <out_dir>
//!
//! train.jsonl has clean renders from camera 0. query.jsonl and gallery.jsonl
//! re-render the same 32 identities with jitter from cameras 1 and 2.

use std::path::Path;

use valpat::data::{save_manifest, CaptionedSample, Dataset, ImageRef};
use valpat::synthetic::pedestrian_cards;

fn write_split(dir: &Path, name: &str, render_seed: Option<u64>, camera: i64) -> valpat::Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| valpat::Error::Io { path: images.clone(), source: e })?;
    let mut samples: Vec<CaptionedSample> = pedestrian_cards(render_seed);
    for (i, s) in samples.iter_mut().enumerate() {
        let rel = format!("images/{name}_{i:02}.png");
        if let ImageRef::Pixels(im) = &s.image_ref {
            im.save_png(&dir.join(&rel))?;
        }
        s.image_ref = ImageRef::Path(rel);
        s.camera_id = Some(camera);
    }
    save_manifest(&Dataset::new(samples, None), &dir.join(format!("{name}.jsonl")))
}

fn main() {
    let Some(out) = std::env::args().nth(1) else {
        eprintln!("usage: make_synthetic <out_dir>");
        std::process::exit(2);
    };
    let dir = Path::new(&out);
    let result = write_split(dir, "train", None, 0)
        .and_then(|_| write_split(dir, "query", Some(1), 1))
        .and_then(|_| write_split(dir, "gallery", Some(2), 2));
    if let Err(e) = result {
        eprintln!("{}", valpat::cli::error_line(&e));
        std::process::exit(1);
    }
    println!("wrote train, query and gallery splits to {}", dir.display());
}
