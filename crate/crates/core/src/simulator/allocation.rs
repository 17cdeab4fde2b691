use rand::seq::SliceRandom;
use rand::Rng;

use crate::design::TrialDesign;
use crate::error::{Error, Result};
use crate::mixed_model::PatientAllocation;

/// Equal allocation of `n` patients to the design's sequences in random order.
pub fn allocate_simple<R: Rng + ?Sized>(
    design: &TrialDesign,
    n: usize,
    rng: &mut R,
) -> Result<PatientAllocation> {
    let k = design.n_sequences();
    if !n.is_multiple_of(k) {
        return Err(Error::InvalidAllocation(format!(
            "{n} patients cannot be split equally over {k} sequences"
        )));
    }
    let mut seqs: Vec<usize> = (0..n).map(|i| i % k).collect();
    seqs.shuffle(rng);
    Ok(PatientAllocation::new(seqs))
}

/// Assigns sequence-homogeneous blocks by cycling through randomly permuted
/// rounds of the `K` sequences. State carries over between stages.
#[derive(Debug, Clone)]
pub struct BlockScheduler {
    block_size: usize,
    round: Vec<usize>,
    position: usize,
    next_label: usize,
}

impl BlockScheduler {
    pub fn new(block_size: usize) -> Result<Self> {
        if block_size < 2 {
            return Err(Error::InvalidAllocation(
                "block size must be at least 2".into(),
            ));
        }
        Ok(Self {
            block_size,
            round: Vec::new(),
            position: 0,
            next_label: 0,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Allocate `n` more patients in whole blocks and append them to `alloc`.
    pub fn extend<R: Rng + ?Sized>(
        &mut self,
        design: &TrialDesign,
        n: usize,
        alloc: &mut PatientAllocation,
        rng: &mut R,
    ) -> Result<()> {
        if !n.is_multiple_of(self.block_size) {
            return Err(Error::InvalidAllocation(format!(
                "{n} patients do not fill blocks of {}",
                self.block_size
            )));
        }
        let k = design.n_sequences();
        let labels = alloc.blocks.get_or_insert_with(Vec::new);
        for _ in 0..n / self.block_size {
            if self.position == self.round.len() {
                self.round = (0..k).collect();
                self.round.shuffle(rng);
                self.position = 0;
            }
            let seq = self.round[self.position];
            self.position += 1;
            for _ in 0..self.block_size {
                alloc.sequences.push(seq);
                labels.push(self.next_label);
            }
            self.next_label += 1;
        }
        Ok(())
    }
}

/// Block-randomised allocation of `n` patients in blocks of `block_size`.
pub fn allocate_block<R: Rng + ?Sized>(
    design: &TrialDesign,
    n: usize,
    block_size: usize,
    rng: &mut R,
) -> Result<PatientAllocation> {
    let mut alloc = PatientAllocation {
        sequences: Vec::with_capacity(n),
        blocks: Some(Vec::with_capacity(n)),
    };
    BlockScheduler::new(block_size)?.extend(design, n, &mut alloc, rng)?;
    Ok(alloc)
}

/// Whether every sequence has the same number of patients.
pub fn is_even(alloc: &PatientAllocation, n_sequences: usize) -> bool {
    let counts = alloc.sequence_counts(n_sequences);
    counts.iter().all(|&c| c == counts[0])
}
