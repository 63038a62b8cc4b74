//! Generates a synthetic attribute dataset, splits it and saves it to disk.
//!
//! `cargo run --release --example generate_data -- [out_dir]`

use haszsl::data::{generate_dataset, Protocol, ProtocolConfig, SplitKind, SynthConfig, SyntheticDataset};

fn main() -> haszsl::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example_data".into());
    let ds = generate_dataset(&SynthConfig { seed: 1, ..SynthConfig::default() })?;
    let protocol = Protocol::new(&ds, &ProtocolConfig::default(), 1)?;

    println!("{} images, {} classes, hash {}", ds.samples.len(), ds.num_classes(), &ds.hash()[..16]);
    println!("seen {:?}", ds.class_ids(SplitKind::Seen));
    println!("unseen {:?}", ds.class_ids(SplitKind::Unseen));
    println!(
        "train {} | val seen {} unseen {} | test seen {} unseen {}",
        protocol.train.len(),
        protocol.val_seen.len(),
        protocol.val_unseen.len(),
        protocol.test_seen.len(),
        protocol.test_unseen.len()
    );

    ds.save(out.as_ref())?;
    let back = SyntheticDataset::load(out.as_ref())?;
    assert_eq!(back.hash(), ds.hash());
    println!("saved to {out}");
    Ok(())
}
