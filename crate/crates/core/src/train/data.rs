use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::DegradationRanges;
use crate::degrade::{degrade, DegradationParams};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::quality::{proxy_scores, CorpusNormalizer, QualityReport};

#[derive(Clone, Debug, PartialEq)]
pub struct HqSample {
    pub id: String,
    pub image: Tensor,
    pub report: QualityReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub lq: Tensor,
    pub hq: Tensor,
    pub report: QualityReport,
    pub params: DegradationParams,
    pub seed: u64,
}

/// Fits the normalizer on `images` and scores each of them with it.
pub fn score_images(images: &[(String, Tensor)]) -> Result<(CorpusNormalizer, Vec<HqSample>)> {
    let raw = images.iter().map(|(_, im)| proxy_scores(im)).collect::<Result<Vec<_>>>()?;
    let normalizer = CorpusNormalizer::fit(&raw)?;
    let samples = images
        .iter()
        .zip(raw)
        .map(|((id, im), r)| HqSample { id: id.clone(), image: im.clone(), report: normalizer.report(r) })
        .collect();
    Ok((normalizer, samples))
}

/// Degrades every HQ sample with parameters and noise drawn from
/// `seed_i = ranges.seed + i`.
pub fn make_pairs(hq: &[HqSample], ranges: &DegradationRanges) -> Result<Vec<Pair>> {
    hq.iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = ranges.seed.wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let size = s.image.shape()[0];
            let params = ranges.sample(&mut rng, size);
            let lq = degrade(&s.image, &params, seed)?;
            Ok(Pair { id: s.id.clone(), lq, hq: s.image.clone(), report: s.report.clone(), params, seed })
        })
        .collect()
}

/// Splits off the last `holdout` items.
pub fn split_holdout<T>(items: &[T], holdout: usize) -> Result<(&[T], &[T])> {
    if holdout == 0 || holdout >= items.len() {
        return Err(Error::Argument(format!("cannot hold out {holdout} of {} items", items.len())));
    }
    Ok(items.split_at(items.len() - holdout))
}
