//! The dataset's on-disk form: write the synthetic images and labels as an
//! IDX file pair, read them back, and verify the round trip reproduces the
//! files byte for byte.
//!
//!     cargo run --release --example idx_files

use fstlab::dataset::{gen_synthetic, SyntheticSpec};
use fstlab::idx::{load_idx, write_idx};

fn main() -> fstlab::Result<()> {
    let (train, _) = gen_synthetic(&SyntheticSpec {
        train_per_class: 20,
        test_per_class: 1,
        ..Default::default()
    })?;

    let dir = std::env::temp_dir();
    let images = dir.join("fstlab-example-images.idx");
    let labels = dir.join("fstlab-example-labels.idx");
    write_idx(&train, &images, &labels)?;
    println!(
        "wrote {} samples: {} ({} bytes), {} ({} bytes)",
        train.len(),
        images.display(),
        std::fs::metadata(&images).map(|m| m.len()).unwrap_or(0),
        labels.display(),
        std::fs::metadata(&labels).map(|m| m.len()).unwrap_or(0),
    );

    let loaded = load_idx(&images, &labels, train.class_count)?;
    println!("loaded shape {:?}, labels match: {}", loaded.images.shape(), loaded.labels == train.labels);

    // Pixels are stored as bytes, so a second write must be bit-identical.
    let images2 = dir.join("fstlab-example-images2.idx");
    let labels2 = dir.join("fstlab-example-labels2.idx");
    write_idx(&loaded, &images2, &labels2)?;
    let same = std::fs::read(&images)
        .and_then(|a| std::fs::read(&images2).map(|b| a == b))
        .unwrap_or(false);
    println!("write-load-write byte identical: {same}");
    Ok(())
}
