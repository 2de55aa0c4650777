//! Negative-source scheduling: cross-device negatives switch on at 50% of
//! training, memory-bank negatives at 60%, and the bank is a FIFO queue of
//! whole batches.

use mmretrieval::losses::NegativeSets;
use mmretrieval::negsampling::{
    sample_negatives, BankBatch, DeviceBatch, DeviceGroup, MemoryBank, Schedule,
};

fn main() -> mmretrieval::Result<()> {
    let total = 2000;
    let schedule = Schedule::standard(total);
    for step in [0, 999, 1000, 1199, 1200, 1999] {
        println!(
            "step {step:4}: cdns {} mbns {}",
            schedule.cdns_active(step),
            schedule.mbns_active(step)
        );
    }

    // two devices, batch size 3, bank capacity 2 batches
    let mut bank = MemoryBank::new(2);
    let batch = |tag: f64| DeviceBatch {
        ids: vec![10 + tag as u64, 20 + tag as u64, 30 + tag as u64],
        embs: vec![vec![tag, 0.0]; 3],
        probs: vec![0.2; 3],
    };
    let group = DeviceGroup::new(vec![batch(0.0), batch(100.0)])?;

    for tag in 1..=4 {
        bank.push(BankBatch {
            embs: vec![vec![tag as f64, 0.0]; 3],
            probs: vec![0.2; 3],
        });
        println!("pushed batch {tag}: bank holds {} embeddings", bank.current_size());
    }

    let show = |label: &str, negs: &NegativeSets| {
        println!("{label}: {} bank + {} cross-device negatives", negs.mbns.len(), negs.cdns.len());
    };
    show("step 0   ", &sample_negatives(&bank, &group, 0, 0, &schedule, 10)?);
    show("step 1000", &sample_negatives(&bank, &group, 0, 1000, &schedule, 10)?);
    show("step 1200", &sample_negatives(&bank, &group, 0, 1200, &schedule, 10)?);

    // the positive product never appears among its own negatives
    let negs = sample_negatives(&bank, &group, 0, 1200, &schedule, 110)?;
    show("positive on other device", &negs);
    Ok(())
}
